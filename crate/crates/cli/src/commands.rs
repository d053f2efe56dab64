use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use pscbm::data::{generate_synthetic, load_external, save_external, Dataset, Split, SyntheticSpec};
use pscbm::intervention::{evaluate_plain, run_intervention_curve, CurveConfig, PolicyKind, StrategyKind};
use pscbm::metrics::{aggregate_runs, AggregateCurve, AucTable, InterventionCurve};
use pscbm::model::io;
use pscbm::training::{train_cbm, train_pscbm, CbmTrainConfig, Paradigm, PscbmTrainConfig, TrainOutput};
use pscbm::{CovarianceKind, ModelBundle};
use serde::{Deserialize, Serialize};

use crate::config::{self, split_list, ConfigError, StrategySpec};

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Generator spec (TOML or JSON); unset fields keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one spec field, e.g. `--set rho=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the concept-csv files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainCbmArgs {
    /// Dataset directory in concept-csv format.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Validation metrics CSV; training rows go next to it.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Global,
    Amortized,
}

impl From<KindArg> for CovarianceKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Global => CovarianceKind::Global,
            KindArg::Amortized => CovarianceKind::Amortized,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainPscbmArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Pre-trained CBM model file.
    #[arg(long)]
    pub cbm: PathBuf,
    #[arg(long, value_enum, default_value_t = KindArg::Global)]
    pub kind: KindArg,
    /// Train with random concept interventions.
    #[arg(long)]
    pub interventions: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model file, optionally labelled: `--model pscbmi=out/pscbmi.json`.
    #[arg(long = "model", value_name = "[LABEL=]PATH", required = true)]
    pub models: Vec<String>,
    /// Sweep settings (TOML or JSON); flags below take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated policies: random, concept_uncertainty.
    #[arg(long)]
    pub policies: Option<String>,
    /// Comma-separated strategies: hard, simple_percentile,
    /// empirical_percentile, confidence_region.
    #[arg(long)]
    pub strategies: Option<String>,
    /// Monte Carlo samples per prediction.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
    /// Follow the initial uncertainty ranking instead of re-ranking.
    #[arg(long)]
    pub rank_once: bool,
    /// Output directory for tables and curves.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CurvesArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_name = "[LABEL=]PATH")]
    pub model: String,
    #[arg(long, default_value = "concept_uncertainty")]
    pub policy: String,
    #[arg(long, default_value = "hard")]
    pub strategy: String,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value = "0")]
    pub seeds: String,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub rank_once: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings of an intervention sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub policies: Vec<PolicyKind>,
    pub strategies: Vec<StrategySpec>,
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub split: Split,
    pub rank_once: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            policies: vec![PolicyKind::Random, PolicyKind::ConceptUncertainty],
            strategies: StrategyKind::all().map(|s| StrategySpec::Name(s.name().into())).to_vec(),
            samples: 100,
            seeds: vec![0],
            split: Split::Test,
            rank_once: false,
        }
    }
}

/// A model file and the label its rows carry.
#[derive(Debug, Clone)]
pub struct LabeledModel {
    pub label: Option<String>,
    pub bundle: Arc<ModelBundle>,
}

/// Splits `label=path` (or a bare path).
pub fn parse_model_arg(s: &str) -> (Option<String>, PathBuf) {
    match s.split_once('=') {
        Some((label, path)) if !label.is_empty() && !label.contains(['/', '\\']) => {
            (Some(label.to_string()), PathBuf::from(path))
        }
        _ => (None, PathBuf::from(s)),
    }
}

pub fn load_model(path: &Path) -> anyhow::Result<ModelBundle> {
    io::load(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn load_data(dir: &Path) -> anyhow::Result<Dataset> {
    load_external(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn parse_policies(s: &str) -> Result<Vec<PolicyKind>, ConfigError> {
    split_list(s)
        .iter()
        .map(|p| PolicyKind::parse(p).ok_or_else(|| ConfigError::new("policies", format!("unknown policy {p:?}"))))
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, ConfigError> {
    split_list(s)
        .iter()
        .map(|v| v.parse().map_err(|_| ConfigError::new("seeds", format!("not a seed: {v:?}"))))
        .collect()
}

fn parse_split(s: &str) -> Result<Split, ConfigError> {
    s.parse().map_err(|_| ConfigError::new("split", format!("unknown split {s:?}")))
}

pub fn gen_data(args: &GenDataArgs) -> anyhow::Result<Dataset> {
    let spec: SyntheticSpec = config::load(&SyntheticSpec::default(), args.config.as_deref(), &args.sets)?;
    let data = generate_synthetic(&spec, args.seed)?;
    save_external(&data, &args.out)?;
    println!(
        "wrote {} rows ({} concepts, {} classes) to {}",
        data.len(),
        data.num_concepts(),
        data.classes(),
        args.out.display()
    );
    Ok(data)
}

pub fn train_cbm_cmd(args: &TrainCbmArgs) -> anyhow::Result<TrainOutput> {
    let mut cfg: CbmTrainConfig = config::load(&CbmTrainConfig::default(), args.config.as_deref(), &args.sets)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let data = load_data(&args.data)?;
    let out = train_cbm(&data, &cfg)?;
    io::save(&out.bundle, &args.out)?;
    if let Some(log) = &args.log {
        out.log.write(log)?;
    }
    let (concept_acc, target_acc) = evaluate_plain(&out.bundle, &data, Split::Test, cfg.samples, cfg.seed)?;
    println!(
        "cbm: test concept acc {concept_acc:.4}, target acc {target_acc:.4}, wall time {:.3} s",
        out.wall_time_s
    );
    println!("model {} -> {}", io::fingerprint(&out.bundle), args.out.display());
    Ok(out)
}

pub fn train_pscbm_cmd(args: &TrainPscbmArgs) -> anyhow::Result<TrainOutput> {
    if !args.cbm.exists() {
        bail!("missing backbone: {} does not exist", args.cbm.display());
    }
    let cbm = load_model(&args.cbm)?;
    let kind = CovarianceKind::from(args.kind);
    let paradigm = if args.interventions {
        Paradigm::WithInterventions
    } else {
        Paradigm::Plain
    };
    let mut cfg: PscbmTrainConfig =
        config::load(&PscbmTrainConfig::defaults(kind, paradigm), args.config.as_deref(), &args.sets)?;
    if cfg.paradigm != paradigm {
        return Err(ConfigError::new("paradigm", "set it with --interventions, not in the config").into());
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate(cbm.concepts())?;
    let wrapped = cbm
        .wrap_pretrained(kind)
        .with_context(|| format!("missing backbone: {} is not a usable CBM", args.cbm.display()))?;
    let data = load_data(&args.data)?;
    let out = train_pscbm(&wrapped, &data, &cfg)?;
    io::save(&out.bundle, &args.out)?;
    if let Some(log) = &args.log {
        out.log.write(log)?;
    }
    let last = out.log.validation.last().expect("epoch-0 row is always logged");
    println!(
        "pscbm ({}, {}): val concept loss {:.4}, backbone {}",
        kind.name(),
        paradigm.name(),
        last.loss.concept_loss,
        out.bundle.backbone_checksum()
    );
    println!("wall_time_s {:.3}", out.wall_time_s);
    println!("model {} -> {}", io::fingerprint(&out.bundle), args.out.display());
    Ok(out)
}

/// Curves of one sweep, grouped per model/policy/strategy.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub runs: Vec<InterventionCurve>,
    pub aggregates: Vec<AggregateCurve>,
    pub table: AucTable,
}

/// Checks every model against the sweep before any curve is computed.
fn check_sweep(models: &[LabeledModel], strategies: &[StrategyKind], data: &Dataset, cfg: &EvalConfig) -> anyhow::Result<()> {
    if cfg.policies.is_empty() {
        return Err(ConfigError::new("policies", "need at least one policy").into());
    }
    if strategies.is_empty() {
        return Err(ConfigError::new("strategies", "need at least one strategy").into());
    }
    if cfg.seeds.is_empty() {
        return Err(ConfigError::new("seeds", "need at least one seed").into());
    }
    if cfg.samples == 0 {
        return Err(ConfigError::new("samples", "need at least one Monte Carlo sample").into());
    }
    if data.indices(cfg.split).is_empty() {
        return Err(ConfigError::new("split", format!("{} split is empty", cfg.split.name())).into());
    }
    let mut labels = BTreeSet::new();
    for m in models {
        let b = &m.bundle;
        let label = m.label.clone().unwrap_or_else(|| b.mode().name().to_string());
        if !labels.insert(label.clone()) {
            return Err(ConfigError::new("model", format!("two models share the label {label:?}; name them with LABEL=PATH")).into());
        }
        if data.num_concepts() != b.concepts() || data.input_dim() != b.input_dim() {
            bail!(pscbm::Error::ShapeMismatch(format!("dataset does not match model {label:?}")));
        }
        for s in strategies {
            if s.needs_covariance() && !b.is_stochastic() {
                return Err(anyhow::Error::new(pscbm::Error::IncompatibleStrategy(s.name().into()))
                    .context(format!("model {label:?} is a regular CBM")));
            }
            if *s == StrategyKind::EmpiricalPercentile && b.percentiles().is_none() {
                return Err(anyhow::Error::new(pscbm::Error::MissingPercentileTable).context(format!("model {label:?}")));
            }
        }
    }
    Ok(())
}

/// Every (model, policy, strategy, seed) curve, aggregated over seeds.
pub fn sweep(models: &[LabeledModel], data: &Dataset, cfg: &EvalConfig) -> anyhow::Result<SweepResult> {
    let strategies = cfg
        .strategies
        .iter()
        .map(StrategySpec::resolve)
        .collect::<Result<Vec<_>, _>>()?;
    check_sweep(models, &strategies, data, cfg)?;
    let mut runs = Vec::new();
    let mut aggregates = Vec::new();
    for m in models {
        for &policy in &cfg.policies {
            for &strategy in &strategies {
                let mut group = Vec::with_capacity(cfg.seeds.len());
                for &seed in &cfg.seeds {
                    let curve_cfg = CurveConfig {
                        split: cfg.split,
                        rank_once: cfg.rank_once,
                        method: m.label.clone(),
                        ..CurveConfig::new(policy, strategy, cfg.samples, seed)
                    };
                    group.push(run_intervention_curve(&m.bundle, data, &curve_cfg)?);
                }
                aggregates.push(aggregate_runs(&group)?);
                runs.extend(group);
            }
        }
    }
    let table = AucTable::from_aggregates(&aggregates);
    Ok(SweepResult { runs, aggregates, table })
}

fn stem(a: &AggregateCurve) -> String {
    format!("{}__{}__{}", a.label.method, a.label.policy, a.label.strategy)
}

fn load_models(specs: &[String]) -> anyhow::Result<Vec<LabeledModel>> {
    specs
        .iter()
        .map(|s| {
            let (label, path) = parse_model_arg(s);
            Ok(LabeledModel {
                label,
                bundle: Arc::new(load_model(&path)?),
            })
        })
        .collect()
}

/// Resolves the sweep settings of `eval`: config file, then flags.
pub fn eval_config(args: &EvalArgs) -> anyhow::Result<EvalConfig> {
    let mut cfg: EvalConfig = config::load(&EvalConfig::default(), args.config.as_deref(), &[])?;
    if let Some(p) = &args.policies {
        cfg.policies = parse_policies(p)?;
    }
    if let Some(s) = &args.strategies {
        cfg.strategies = split_list(s).into_iter().map(StrategySpec::Name).collect();
    }
    if let Some(n) = args.samples {
        cfg.samples = n;
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(s) = &args.split {
        cfg.split = parse_split(s)?;
    }
    cfg.rank_once |= args.rank_once;
    Ok(cfg)
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<SweepResult> {
    let cfg = eval_config(args)?;
    let models = load_models(&args.models)?;
    let data = load_data(&args.data)?;
    let result = sweep(&models, &data, &cfg)?;
    let curves = args.out.join("curves");
    for a in &result.aggregates {
        a.write(&curves, &stem(a))?;
    }
    std::fs::write(args.out.join("auc_table.csv"), result.table.to_csv())?;
    std::fs::write(args.out.join("auc_table.txt"), result.table.to_text())?;
    std::fs::write(args.out.join("runs.json"), serde_json::to_string_pretty(&result.runs)?)?;
    print!("{}", result.table.to_text());
    Ok(result)
}

pub fn curves(args: &CurvesArgs) -> anyhow::Result<SweepResult> {
    let cfg = EvalConfig {
        policies: parse_policies(&args.policy)?,
        strategies: vec![StrategySpec::Name(args.strategy.clone())],
        samples: args.samples,
        seeds: parse_seeds(&args.seeds)?,
        split: parse_split(&args.split)?,
        rank_once: args.rank_once,
    };
    if cfg.policies.len() != 1 {
        return Err(ConfigError::new("policy", "give exactly one policy").into());
    }
    let models = load_models(std::slice::from_ref(&args.model))?;
    let data = load_data(&args.data)?;
    let result = sweep(&models, &data, &cfg)?;
    let a = &result.aggregates[0];
    a.write(&args.out, &stem(a))?;
    std::fs::write(args.out.join("runs.json"), serde_json::to_string_pretty(&result.runs)?)?;
    println!(
        "{}: concept AUC {:.4} ± {:.4}, target AUC {:.4} ± {:.4}",
        stem(a),
        a.auc_concept_mean,
        a.auc_concept_sd,
        a.auc_target_mean,
        a.auc_target_sd
    );
    Ok(result)
}
