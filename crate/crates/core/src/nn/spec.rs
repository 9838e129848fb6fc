use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// One of the three supported network families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum Architecture {
    /// Fully connected ReLU network. An empty `hidden` list is multinomial logistic regression.
    Mlp { hidden: Vec<usize> },
    /// Stacked 1-D convolutions over time (features are channels), ReLU,
    /// mean-pool over time, dense head.
    Conv1d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        layers: usize,
    },
    /// Linear embedding plus sinusoidal positions, one pre-norm encoder block
    /// (self-attention and feed-forward), mean-pool over time, final norm, dense head.
    AttnEncoder {
        model_dim: usize,
        ff_hidden: usize,
        heads: usize,
    },
}

impl Architecture {
    pub fn conv1d_default() -> Self {
        Architecture::Conv1d {
            filters: 64,
            kernel: 10,
            stride: 1,
            padding: 5,
            layers: 2,
        }
    }

    pub fn attn_default() -> Self {
        Architecture::AttnEncoder {
            model_dim: 64,
            ff_hidden: 256,
            heads: 1,
        }
    }

    pub fn uses_time_axis(&self) -> bool {
        !matches!(self, Architecture::Mlp { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub class_count: usize,
    #[serde(flatten)]
    pub arch: Architecture,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, class_count: usize, hidden: Vec<usize>) -> Self {
        Self {
            input_dim,
            class_count,
            arch: Architecture::Mlp { hidden },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be >= 1"));
        }
        if self.class_count < 2 {
            return Err(Error::config("class_count must be >= 2"));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::config("mlp hidden widths must be positive"));
                }
            }
            Architecture::Conv1d {
                filters,
                kernel,
                stride,
                layers,
                ..
            } => {
                if *filters == 0 || *kernel == 0 || *stride == 0 || *layers == 0 {
                    return Err(Error::config("conv1d filters, kernel, stride, layers must be positive"));
                }
            }
            Architecture::AttnEncoder {
                model_dim,
                ff_hidden,
                heads,
            } => {
                if *model_dim == 0 || *ff_hidden == 0 || *heads == 0 || model_dim % heads != 0 {
                    return Err(Error::config(
                        "attn_encoder needs positive sizes and heads dividing model_dim",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::for_spec(self)
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Weight,
    Bias,
    /// Layer-norm scale, initialized to one.
    Gain,
}

/// A named `rows × cols` slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub kind: BlockKind,
}

impl Block {
    pub fn size(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub blocks: Vec<Block>,
    pub len: usize,
}

impl Layout {
    fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, kind: BlockKind) {
        self.blocks.push(Block {
            name: name.into(),
            offset: self.len,
            rows,
            cols,
            kind,
        });
        self.len += rows * cols;
    }

    fn dense(&mut self, name: &str, rows: usize, cols: usize) {
        self.push(format!("{name}.w"), rows, cols, BlockKind::Weight);
        self.push(format!("{name}.b"), 1, cols, BlockKind::Bias);
    }

    fn norm(&mut self, name: &str, width: usize) {
        self.push(format!("{name}.gain"), 1, width, BlockKind::Gain);
        self.push(format!("{name}.shift"), 1, width, BlockKind::Bias);
    }

    fn for_spec(spec: &ModelSpec) -> Self {
        let mut l = Layout {
            blocks: Vec::new(),
            len: 0,
        };
        let (d, k) = (spec.input_dim, spec.class_count);
        match &spec.arch {
            Architecture::Mlp { hidden } => {
                let mut prev = d;
                for (i, &h) in hidden.iter().enumerate() {
                    l.dense(&format!("hidden{i}"), prev, h);
                    prev = h;
                }
                l.dense("head", prev, k);
            }
            Architecture::Conv1d {
                filters,
                kernel,
                layers,
                ..
            } => {
                let mut channels = d;
                for i in 0..*layers {
                    l.dense(&format!("conv{i}"), kernel * channels, *filters);
                    channels = *filters;
                }
                l.dense("head", *filters, k);
            }
            Architecture::AttnEncoder {
                model_dim,
                ff_hidden,
                ..
            } => {
                let dm = *model_dim;
                l.dense("embed", d, dm);
                l.norm("norm1", dm);
                for name in ["query", "key", "value", "attn_out"] {
                    l.dense(name, dm, dm);
                }
                l.norm("norm2", dm);
                l.dense("ff1", dm, *ff_hidden);
                l.dense("ff2", *ff_hidden, dm);
                l.norm("norm_final", dm);
                l.dense("head", dm, k);
            }
        }
        l
    }
}

/// Glorot-uniform weights, zero biases and shifts, unit norm gains.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Vec<f64> {
    let layout = spec.layout();
    let mut rng = rng_from_seed(seed);
    let mut params = vec![0.0; layout.len];
    for b in &layout.blocks {
        let slot = &mut params[b.offset..b.offset + b.size()];
        match b.kind {
            BlockKind::Weight => {
                let limit = (6.0 / (b.rows + b.cols) as f64).sqrt();
                for p in slot {
                    *p = rng.random_range(-limit..=limit);
                }
            }
            BlockKind::Bias => {}
            BlockKind::Gain => slot.fill(1.0),
        }
    }
    params
}
