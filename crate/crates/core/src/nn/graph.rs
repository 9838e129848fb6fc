//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! views into a flat vector; `backward` returns the gradient with respect to
//! that flat vector.

pub(crate) type NodeId = usize;

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param { offset: usize },
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulBt(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    LayerNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows(NodeId),
    Unfold {
        input: NodeId,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ColSlice {
        input: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

pub(crate) struct Graph<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        self.nodes.len() - 1
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> NodeId {
        let value = self.params[offset..offset + rows * cols].to_vec();
        self.push(rows, cols, value, Op::Param { offset })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions");
        let v = matmul(&self.nodes[a].value, &self.nodes[b].value, m, k, n);
        self.push(m, n, v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt inner dimensions");
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                v[i * n + j] = av[i * k..(i + 1) * k]
                    .iter()
                    .zip(&bv[j * k..(j + 1) * k])
                    .map(|(x, y)| x * y)
                    .sum();
            }
        }
        self.push(m, n, v, Op::MatMulBt(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(bias), (1, n), "bias shape");
        let bv = &self.nodes[bias].value;
        let mut v = self.nodes[a].value.clone();
        for row in v.chunks_exact_mut(n) {
            for (x, b) in row.iter_mut().zip(bv) {
                *x += b;
            }
        }
        self.push(m, n, v, Op::AddBias(a, bias))
    }

    /// `a · w + b`
    pub fn affine(&mut self, a: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let z = self.matmul(a, w);
        self.add_bias(z, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (m, n) = self.shape(a);
        let v = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(m, n, v, Op::Add(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let v = self.nodes[a].value.iter().map(|x| x.max(0.0)).collect();
        self.push(m, n, v, Op::Relu(a))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let (m, n) = self.shape(a);
        let v = self.nodes[a].value.iter().map(|x| x * s).collect();
        self.push(m, n, v, Op::Scale(a, s))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut v = self.nodes[a].value.clone();
        for row in v.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        self.push(m, n, v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (m, n) = self.shape(input);
        let x = &self.nodes[input].value;
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mu) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        self.push(
            m,
            n,
            out,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut v = vec![0.0; n];
        for row in self.nodes[a].value.chunks_exact(n) {
            for (o, x) in v.iter_mut().zip(row) {
                *o += x;
            }
        }
        v.iter_mut().for_each(|x| *x /= m as f64);
        self.push(1, n, v, Op::MeanRows(a))
    }

    /// Sliding windows over the time axis (rows) with symmetric zero padding.
    /// Output row `t` holds input rows `t·stride − padding ..` flattened.
    pub fn unfold(&mut self, input: NodeId, kernel: usize, stride: usize, padding: usize) -> NodeId {
        let (t, c) = self.shape(input);
        let padded = t + 2 * padding;
        assert!(padded >= kernel, "unfold window longer than padded input");
        let t_out = (padded - kernel) / stride + 1;
        let x = &self.nodes[input].value;
        let mut v = vec![0.0; t_out * kernel * c];
        for o in 0..t_out {
            for k in 0..kernel {
                let src = (o * stride + k) as isize - padding as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let src = src as usize;
                v[(o * kernel + k) * c..(o * kernel + k + 1) * c]
                    .copy_from_slice(&x[src * c..(src + 1) * c]);
            }
        }
        self.push(
            t_out,
            kernel * c,
            v,
            Op::Unfold {
                input,
                kernel,
                stride,
                padding,
            },
        )
    }

    pub fn col_slice(&mut self, input: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.shape(input);
        assert!(start + len <= n);
        let v = self.nodes[input]
            .value
            .chunks_exact(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push(m, len, v, Op::ColSlice { input, start })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let m = self.shape(parts[0]).0;
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in &parts {
                let w = self.nodes[p].cols;
                assert_eq!(self.nodes[p].rows, m);
                v.extend_from_slice(&self.nodes[p].value[r * w..(r + 1) * w]);
            }
        }
        self.push(m, n, v, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let n = self.shape(parts[0]).1;
        let m: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut v = Vec::with_capacity(m * n);
        for &p in &parts {
            assert_eq!(self.nodes[p].cols, n);
            v.extend_from_slice(&self.nodes[p].value);
        }
        self.push(m, n, v, Op::ConcatRows(parts))
    }

    /// Propagates `seed` (the gradient of some scalar w.r.t. node `out`) back
    /// to every parameter. Returns the flat parameter gradient.
    pub fn backward(&self, out: NodeId, seed: Vec<f64>) -> Vec<f64> {
        assert_eq!(seed.len(), self.nodes[out].value.len());
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(seed);
        let mut param_grad = vec![0.0; self.params.len()];

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
            grads[id].get_or_insert_with(|| vec![0.0; len])
        }

        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let (m, n) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {}
                Op::Param { offset } => {
                    for (p, x) in param_grad[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *p += x;
                    }
                }
                Op::MatMul(a, b) => {
                    let k = self.nodes[*a].cols;
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let ga = acc(&mut grads, *a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                    let gb = acc(&mut grads, *b, k * n);
                    for i in 0..m {
                        for p in 0..k {
                            let av_ip = av[i * k + p];
                            if av_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av_ip * g[i * n + j];
                            }
                        }
                    }
                }
                Op::MatMulBt(a, b) => {
                    let k = self.nodes[*a].cols;
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let ga = acc(&mut grads, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for p in 0..k {
                                ga[i * k + p] += gij * bv[j * k + p];
                            }
                        }
                    }
                    let gb = acc(&mut grads, *b, n * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for p in 0..k {
                                gb[j * k + p] += gij * av[i * k + p];
                            }
                        }
                    }
                }
                Op::AddBias(a, bias) => {
                    let gbias = acc(&mut grads, *bias, n);
                    for row in g.chunks_exact(n) {
                        for (gb, x) in gbias.iter_mut().zip(row) {
                            *gb += x;
                        }
                    }
                    add_into(acc(&mut grads, *a, m * n), &g);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, m * n), &g);
                    add_into(acc(&mut grads, *b, m * n), &g);
                }
                Op::Relu(a) => {
                    let av = &self.nodes[*a].value;
                    let ga = acc(&mut grads, *a, m * n);
                    for ((o, x), gi) in ga.iter_mut().zip(av).zip(&g) {
                        if *x > 0.0 {
                            *o += gi;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, m * n);
                    for (o, gi) in ga.iter_mut().zip(&g) {
                        *o += s * gi;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, m * n);
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            ga[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = &self.nodes[*gamma].value;
                    {
                        let gg = acc(&mut grads, *gamma, n);
                        for r in 0..m {
                            for c in 0..n {
                                gg[c] += g[r * n + c] * xhat[r * n + c];
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, *beta, n);
                        for row in g.chunks_exact(n) {
                            for (o, x) in gb.iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    }
                    let gx = acc(&mut grads, *input, m * n);
                    for r in 0..m {
                        let dxhat: Vec<f64> = (0..n).map(|c| g[r * n + c] * gv[c]).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat
                            .iter()
                            .zip(&xhat[r * n..(r + 1) * n])
                            .map(|(a, b)| a * b)
                            .sum();
                        for c in 0..n {
                            gx[r * n + c] += inv_std[r] / n as f64
                                * (n as f64 * dxhat[c] - sum - xhat[r * n + c] * dot);
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let rows = self.nodes[*a].rows;
                    let ga = acc(&mut grads, *a, rows * n);
                    for row in ga.chunks_exact_mut(n) {
                        for (o, x) in row.iter_mut().zip(&g) {
                            *o += x / rows as f64;
                        }
                    }
                }
                Op::Unfold {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (t, c) = self.shape(*input);
                    let gi = acc(&mut grads, *input, t * c);
                    for o in 0..m {
                        for k in 0..*kernel {
                            let src = (o * stride + k) as isize - *padding as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let src = src as usize;
                            for ch in 0..c {
                                gi[src * c + ch] += g[(o * kernel + k) * c + ch];
                            }
                        }
                    }
                }
                Op::ColSlice { input, start } => {
                    let w = self.nodes[*input].cols;
                    let gi = acc(&mut grads, *input, m * w);
                    for r in 0..m {
                        for c in 0..n {
                            gi[r * w + start + c] += g[r * n + c];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.nodes[p].cols;
                        let gp = acc(&mut grads, p, m * w);
                        for r in 0..m {
                            for c in 0..w {
                                gp[r * w + c] += g[r * n + start + c];
                            }
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.len();
                        add_into(acc(&mut grads, p, len), &g[start..start + len]);
                        start += len;
                    }
                }
            }
        }
        param_grad
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
