//! Command-line entry points. Every subcommand reads an optional JSON config
//! (`--config`) and an optional seed override (`--seed`), and writes JSON or
//! CSV artifacts.

pub mod server;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use privatexr_core::accountant::{default_orders, epsilon_after, find_sigma, PrivacySpec};
use privatexr_core::attack::{mia_end_to_end, run_rda, AttackReport, MiaConfig, RdaConfig};
use privatexr_core::attribution::{explain_batch, select_top_quarter, ShapleyMode, ValueKind, MAX_EXACT_FEATURES};
use privatexr_core::data::{load_csv, synth_generate, write_csv, CsvSchema, Dataset, SynthConfig};
use privatexr_core::harness::{bench_inference, prepare_data, run_pipeline, train_target, ExperimentConfig, ExplainSettings};
use privatexr_core::nn::TrainedModel;
use privatexr_core::privatizer::{FeatureDpMode, FeatureDpSpec};
use privatexr_core::rng::{stream, streams};
use privatexr_core::serving::{build_bundle, default_bundle_config, ModelBundle};
use privatexr_core::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<privatexr_core::Error> for CliError {
    fn from(e: privatexr_core::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "privatexr", version, about = "Privacy workbench for XR sensor classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Default)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Sidecar JSON naming columns and classes.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Also write a schema sidecar carrying the class names.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the target model of an experiment config.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines per-epoch progress log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Shapley attributions and the top-quarter feature selection.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-sample φ as CSV.
        #[arg(long)]
        phi_csv: Option<PathBuf>,
    },
    /// Add calibrated input noise to a dataset. The config is a feature-DP spec.
    Privatize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Run an adversary against a model or dataset.
    Attack {
        #[command(subcommand)]
        attack: AttackCommand,
    },
    /// Run one privacy condition end to end and emit a report.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time privatize + forward per sample for several feature-DP specs.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// RDP accountant calculator.
    Account(AccountArgs),
    /// Train a serving bundle (non-private model plus one private model per level).
    Bundle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve predictions over HTTP and the /stream channel.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AttackCommand {
    /// Shadow-model membership inference.
    Mia {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Attacker pool CSV.
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        members: PathBuf,
        #[arg(long)]
        non_members: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// RBFN re-identification.
    Rda {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Feature-DP spec applied to test frames.
        #[arg(long)]
        feature_dp: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct AccountArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub q: f64,
    #[arg(long)]
    pub steps: u64,
    #[arg(long)]
    pub delta: f64,
    #[arg(long, required_unless_present = "solve_sigma")]
    pub sigma: Option<f64>,
    /// Solve for σ reaching `--epsilon` instead.
    #[arg(long, requires = "epsilon")]
    pub solve_sigma: bool,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn config_or_default<T: DeserializeOwned + Default>(common: &Common) -> CliResult<T> {
    match &common.config {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn required_config<T: DeserializeOwned>(common: &Common, what: &str) -> CliResult<T> {
    match &common.config {
        Some(p) => read_json(p),
        None => Err(CliError::Config(format!("--config with a {what} is required"))),
    }
}

fn load_data(args: &DataArgs) -> CliResult<Dataset> {
    let schema = match &args.schema {
        Some(p) => CsvSchema::from_manifest(p)?,
        None => CsvSchema::default(),
    };
    Ok(load_csv(&args.data, &schema)?)
}

fn load_model(path: &Path) -> CliResult<TrainedModel> {
    Ok(TrainedModel::load(path)?)
}

/// Writes pretty JSON to `out`, or one line to stdout.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(p) => {
            let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
            std::fs::write(p, text)?;
        }
        None => {
            let text = serde_json::to_string(value).map_err(|e| CliError::Runtime(e.to_string()))?;
            writeln!(std::io::stdout(), "{text}")?;
        }
    }
    Ok(())
}

fn experiment_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg: ExperimentConfig = config_or_default(common)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct ExplainOutput {
    ranking: Vec<usize>,
    mean_abs_phi: Vec<f64>,
    selected_top_quarter: Vec<usize>,
    config: ExplainSettings,
}

/// MIA settings as read from a CLI config; shadows default to the target's spec.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(default)]
struct MiaCliConfig {
    shadow_count: Option<usize>,
    shadow_train_size: Option<usize>,
    shadow_train: Option<TrainConfig>,
    attack_hidden: Option<Vec<usize>>,
    attack_train: Option<TrainConfig>,
    seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
struct BenchCliConfig {
    specs: Vec<FeatureDpSpec>,
    repetitions: usize,
    seed: u64,
}

impl Default for BenchCliConfig {
    fn default() -> Self {
        Self {
            specs: vec![FeatureDpSpec::off(), FeatureDpSpec::full(privatexr_core::accountant::PrivacyLevel::High)],
            repetitions: 5,
            seed: 0,
        }
    }
}

/// Settings of the `serve` subcommand.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default)]
pub struct ServeConfig {
    pub bind: String,
    pub fps: f64,
    pub bundle: Option<PathBuf>,
    /// Frames replayed on /stream; defaults to the bundle's training source.
    pub replay: Option<PathBuf>,
    pub replay_schema: Option<PathBuf>,
    /// Recipe used to train a bundle when none is given.
    pub build: ExperimentConfig,
    pub seed: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            fps: 10.0,
            bundle: None,
            replay: None,
            replay_schema: None,
            build: default_bundle_config(),
            seed: 0,
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { common, out, manifest } => {
            let mut cfg: SynthConfig = config_or_default(&common)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let ds = synth_generate(&cfg)?;
            write_csv(&ds, &out)?;
            if let Some(m) = manifest {
                let schema = CsvSchema {
                    features: Some(ds.feature_names().to_vec()),
                    class_names: Some(ds.class_names().to_vec()),
                    ..CsvSchema::default()
                };
                emit(&schema, Some(&m))?;
            }
            Ok(())
        }
        Command::Train { common, out, log } => {
            let mut cfg = experiment_config(&common)?;
            cfg.train.progress_log = log;
            let data = prepare_data(&cfg)?;
            let model = train_target(&cfg, &data)?;
            model.save(&out)?;
            emit(&model.meta, None)
        }
        Command::Explain { common, model, data, out, phi_csv } => {
            let settings: ExplainSettings = config_or_default(&common)?;
            let model = load_model(&model)?;
            let ds = load_data(&data)?;
            let d = ds.dim();
            let n = settings.samples.unwrap_or(privatexr_core::attribution::DEFAULT_EXPLAIN_SAMPLES).min(ds.len());
            let rows = ds.subset(&(0..n).collect::<Vec<_>>()).feature_matrix();
            let mode = settings.mode.clone().unwrap_or(if d <= MAX_EXACT_FEATURES {
                ShapleyMode::Exact
            } else {
                ShapleyMode::Sampled { permutations: 64, seed: common.seed.unwrap_or(0) }
            });
            let report = explain_batch(&model, &rows, &vec![0.0; d], mode, ValueKind::Probability)?;
            let gi = report.global_importance();
            if let Some(p) = phi_csv {
                let mut w = std::io::BufWriter::new(std::fs::File::create(p)?);
                writeln!(w, "{}", ds.feature_names().join(","))?;
                for row in &report.per_sample_phi {
                    let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    writeln!(w, "{}", cells.join(","))?;
                }
            }
            let output = ExplainOutput {
                selected_top_quarter: select_top_quarter(&gi, d),
                ranking: gi.ranking,
                mean_abs_phi: gi.mean_abs_phi,
                config: settings,
            };
            emit(&output, out.as_deref())
        }
        Command::Privatize { common, data, out, audit } => {
            let spec: FeatureDpSpec = required_config(&common, "feature-DP spec")?;
            let ds = load_data(&data)?;
            let p = spec.prepare(ds.dim())?;
            let noised = p.apply_dataset(&ds, &mut stream(common.seed.unwrap_or(0), streams::FEATURE_NOISE))?;
            write_csv(&noised, &out)?;
            emit(&p.audit(), audit.as_deref())
        }
        Command::Attack { attack: AttackCommand::Mia { common, model, data, members, non_members, out } } => {
            let c: MiaCliConfig = config_or_default(&common)?;
            let target = load_model(&model)?;
            let pool = load_data(&data)?;
            let schema = DataArgs { data: members.clone(), schema: data.schema.clone() };
            let members = load_data(&schema)?;
            let non_members = load_data(&DataArgs { data: non_members, ..schema })?;
            let shadow_train = c.shadow_train.unwrap_or_default();
            let mut cfg = MiaConfig::new(
                c.shadow_count.unwrap_or(4),
                c.shadow_train_size.unwrap_or(members.len()).min(pool.len() / 2),
                target.spec.clone(),
                shadow_train,
            );
            if let Some(h) = c.attack_hidden {
                cfg.attack_hidden = h;
            }
            if let Some(t) = c.attack_train {
                cfg.attack_train = t;
            }
            cfg.seed = common.seed.unwrap_or(c.seed);
            let auc = mia_end_to_end(&target, &pool, &members, &non_members, &cfg)?;
            let report = AttackReport {
                condition: "mia".into(),
                mia_auc: Some(auc),
                rda_identification_rate: None,
                utility: None,
                runs: cfg.shadow_count,
                seed: cfg.seed,
            };
            emit(&report, out.as_deref())
        }
        Command::Attack { attack: AttackCommand::Rda { common, data, feature_dp, out } } => {
            let mut cfg: RdaConfig = config_or_default(&common)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let ds = load_data(&data)?;
            let privatizer = match feature_dp {
                Some(p) => Some(read_json::<FeatureDpSpec>(&p)?.prepare(ds.dim())?),
                None => None,
            };
            let result = run_rda(&ds, &cfg, privatizer.as_ref())?;
            let condition = match &privatizer {
                Some(p) if p.audit().mode != FeatureDpMode::Off => "rda-privatized",
                _ => "rda",
            };
            let report = AttackReport {
                condition: condition.into(),
                mia_auc: None,
                rda_identification_rate: Some(result.rate),
                utility: None,
                runs: cfg.runs,
                seed: cfg.seed,
            };
            emit(&report, out.as_deref())
        }
        Command::Pipeline { common, out } => {
            let cfg = experiment_config(&common)?;
            let report = run_pipeline(&cfg)?;
            emit(&report, out.as_deref())
        }
        Command::Bench { common, model, data, out } => {
            let mut cfg: BenchCliConfig = config_or_default(&common)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let model = load_model(&model)?;
            let ds = load_data(&data)?;
            let result = bench_inference(&model, &ds.feature_matrix(), &cfg.specs, cfg.repetitions, cfg.seed)?;
            emit(&result, out.as_deref())
        }
        Command::Account(args) => account(&args),
        Command::Bundle { common, out } => {
            let mut cfg: ExperimentConfig = match &common.config {
                Some(p) => read_json(p)?,
                None => default_bundle_config(),
            };
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            build_bundle(&cfg)?.save(&out)?;
            Ok(())
        }
        Command::Serve { common, bundle, bind } => {
            let mut cfg: ServeConfig = config_or_default(&common)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(b) = bundle {
                cfg.bundle = Some(b);
            }
            if let Some(b) = bind {
                cfg.bind = b;
            }
            serve(cfg)
        }
    }
}

/// Every failure here stems from the flags, so all of them are config errors.
fn account(args: &AccountArgs) -> CliResult<()> {
    let bad = |e: privatexr_core::Error| CliError::Config(e.to_string());
    let orders = default_orders();
    if args.solve_sigma {
        let eps = args.epsilon.ok_or_else(|| CliError::Config("--solve-sigma needs --epsilon".into()))?;
        let sigma = find_sigma(&PrivacySpec::new(eps, args.delta).map_err(bad)?, args.q, args.steps, &orders).map_err(bad)?;
        let (achieved, alpha) = epsilon_after(args.q, sigma, args.steps, args.delta, &orders).map_err(bad)?;
        emit(&serde_json::json!({ "sigma": sigma, "epsilon": achieved, "alpha": alpha }), None)
    } else {
        let sigma = args.sigma.ok_or_else(|| CliError::Config("--sigma is required".into()))?;
        let (eps, alpha) = epsilon_after(args.q, sigma, args.steps, args.delta, &orders).map_err(bad)?;
        emit(&serde_json::json!({ "epsilon": eps, "alpha": alpha }), None)
    }
}

fn serve(cfg: ServeConfig) -> CliResult<()> {
    let bundle = match &cfg.bundle {
        Some(p) => ModelBundle::load(p)?,
        None => build_bundle(&ExperimentConfig { seed: cfg.seed, ..cfg.build.clone() })?,
    };
    let replay = match &cfg.replay {
        Some(p) => load_data(&DataArgs { data: p.clone(), schema: cfg.replay_schema.clone() })?,
        None => prepare_data(&cfg.build)?.test,
    };
    let state = server::AppState::new(bundle, replay, cfg.fps, cfg.seed)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.bind).await?;
        eprintln!("listening on {}", listener.local_addr()?);
        server::serve(listener, state).await
    })?;
    Ok(())
}
