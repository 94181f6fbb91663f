//! Experiment orchestration: run configuration, data preparation for each
//! ablation cell, the training/evaluation loop, the windowed scoring protocol
//! and CSV reports.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crragent::{evaluate, AgentConfig, AgentError, GroundTruth, MetricsRecord, TrainMethod, Trainer};
use crate::diffcore::{write_checkpoint, AdamConfig, Checkpoint, DiffError, Support};
use crate::rewardlearn::RewardConfig;
use crate::rng::{self, tags};
use crate::trajdata::{build_split, read_dataset, DataError, Dataset, SplitDataset, SuccessRule};
use crate::worldsim::{generate_dataset, generate_episodes, parse_mix, Env, PolicyKind, SimError};

/// Dataset meta key recording how many leading episodes predate a low-quality injection.
pub const BASE_COUNT_KEY: &str = "lq_base_count";

#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> LabError + '_ {
    move |source| LabError::File { path: path.to_path_buf(), source }
}

/// Every knob of a run. Serialized as `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: Env,
    pub method: TrainMethod,
    pub mix: String,
    pub data_seed: u64,
    pub success_rule: SuccessRule,
    pub inclusion_prob: f64,
    pub split_seed: u64,
    pub unlabeled_fraction: f64,
    pub low_quality_multiplier: f64,
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eval_window_fraction: f64,
    pub eval_seed: u64,
    pub eval_sample: bool,
    pub seeds: Vec<u64>,
    pub gamma: f64,
    pub sync_period: u64,
    pub m_samples: usize,
    pub expert_batch: usize,
    pub unlabeled_batch: usize,
    pub hidden: Vec<usize>,
    pub layer_norm: bool,
    pub components: usize,
    pub std_floor: f64,
    pub n_atoms: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub reward_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub reward_hidden: Vec<usize>,
    pub augment_scale: f64,
    pub eta: f64,
    pub pu_nonneg: bool,
    pub trail_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: Env::PointReach,
            method: TrainMethod::OrilP,
            mix: "scripted:20,noisy0.5:200,noisy1:140,random:150".into(),
            data_seed: 0,
            success_rule: SuccessRule::StepFraction(0.5),
            inclusion_prob: 0.1,
            split_seed: 0,
            unlabeled_fraction: 1.0,
            low_quality_multiplier: 1.0,
            total_steps: 50_000,
            eval_every: 2_000,
            eval_episodes: 20,
            eval_window_fraction: 0.5,
            eval_seed: 1_000,
            eval_sample: true,
            seeds: vec![0, 1, 2],
            gamma: 0.99,
            sync_period: 100,
            m_samples: 4,
            expert_batch: 256,
            unlabeled_batch: 256,
            hidden: vec![64, 64],
            layer_norm: true,
            components: 5,
            std_floor: 1e-3,
            n_atoms: 51,
            v_min: 0.0,
            v_max: 100.0,
            policy_lr: 1e-4,
            critic_lr: 1e-4,
            reward_lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            reward_hidden: vec![64, 64],
            augment_scale: 0.01,
            eta: 0.5,
            pu_nonneg: false,
            trail_k: 10,
        }
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, ()> {
    let v = v.trim().trim_start_matches('[').trim_end_matches(']');
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| x.trim().parse().map_err(|_| ())).collect()
}

fn rule_to_string(r: &SuccessRule) -> String {
    match r {
        SuccessRule::TopQuantile(q) => format!("top:{q}"),
        SuccessRule::StepFraction(f) => format!("steps:{f}"),
    }
}

fn parse_rule(v: &str) -> Result<SuccessRule, ()> {
    match v.split_once(':') {
        Some(("top", q)) => q.parse().map(SuccessRule::TopQuantile).map_err(|_| ()),
        Some(("steps", f)) => f.parse().map(SuccessRule::StepFraction).map_err(|_| ()),
        _ => Err(()),
    }
}

impl RunConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("env", self.env.to_string()),
            ("method", self.method.to_string()),
            ("mix", self.mix.clone()),
            ("data_seed", self.data_seed.to_string()),
            ("success_rule", rule_to_string(&self.success_rule)),
            ("inclusion_prob", self.inclusion_prob.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("unlabeled_fraction", self.unlabeled_fraction.to_string()),
            ("low_quality_multiplier", self.low_quality_multiplier.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("eval_window_fraction", self.eval_window_fraction.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("eval_sample", self.eval_sample.to_string()),
            ("seeds", join(&self.seeds)),
            ("gamma", self.gamma.to_string()),
            ("sync_period", self.sync_period.to_string()),
            ("m_samples", self.m_samples.to_string()),
            ("expert_batch", self.expert_batch.to_string()),
            ("unlabeled_batch", self.unlabeled_batch.to_string()),
            ("hidden", join(&self.hidden)),
            ("layer_norm", self.layer_norm.to_string()),
            ("components", self.components.to_string()),
            ("std_floor", self.std_floor.to_string()),
            ("n_atoms", self.n_atoms.to_string()),
            ("v_min", self.v_min.to_string()),
            ("v_max", self.v_max.to_string()),
            ("policy_lr", self.policy_lr.to_string()),
            ("critic_lr", self.critic_lr.to_string()),
            ("reward_lr", self.reward_lr.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("reward_hidden", join(&self.reward_hidden)),
            ("augment_scale", self.augment_scale.to_string()),
            ("eta", self.eta.to_string()),
            ("pu_nonneg", self.pu_nonneg.to_string()),
            ("trail_k", self.trail_k.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), LabError> {
        let bad = || LabError::Config(format!("bad value for {key}: {v:?}"));
        macro_rules! parse {
            ($field:expr) => {
                $field = v.parse().map_err(|_| bad())?
            };
        }
        match key {
            "env" => self.env = v.parse().map_err(|_| bad())?,
            "method" => self.method = v.parse().map_err(|_| bad())?,
            "mix" => {
                parse_mix(v).map_err(|_| bad())?;
                self.mix = v.to_string()
            }
            "data_seed" => parse!(self.data_seed),
            "success_rule" => self.success_rule = parse_rule(v).map_err(|_| bad())?,
            "inclusion_prob" => parse!(self.inclusion_prob),
            "split_seed" => parse!(self.split_seed),
            "unlabeled_fraction" => parse!(self.unlabeled_fraction),
            "low_quality_multiplier" => parse!(self.low_quality_multiplier),
            "total_steps" => parse!(self.total_steps),
            "eval_every" => parse!(self.eval_every),
            "eval_episodes" => parse!(self.eval_episodes),
            "eval_window_fraction" => parse!(self.eval_window_fraction),
            "eval_seed" => parse!(self.eval_seed),
            "eval_sample" => parse!(self.eval_sample),
            "seeds" => self.seeds = parse_list(v).map_err(|_| bad())?,
            "gamma" => parse!(self.gamma),
            "sync_period" => parse!(self.sync_period),
            "m_samples" => parse!(self.m_samples),
            "expert_batch" => parse!(self.expert_batch),
            "unlabeled_batch" => parse!(self.unlabeled_batch),
            "hidden" => self.hidden = parse_list(v).map_err(|_| bad())?,
            "layer_norm" => parse!(self.layer_norm),
            "components" => parse!(self.components),
            "std_floor" => parse!(self.std_floor),
            "n_atoms" => parse!(self.n_atoms),
            "v_min" => parse!(self.v_min),
            "v_max" => parse!(self.v_max),
            "policy_lr" => parse!(self.policy_lr),
            "critic_lr" => parse!(self.critic_lr),
            "reward_lr" => parse!(self.reward_lr),
            "adam_beta1" => parse!(self.adam_beta1),
            "adam_beta2" => parse!(self.adam_beta2),
            "adam_eps" => parse!(self.adam_eps),
            "reward_hidden" => self.reward_hidden = parse_list(v).map_err(|_| bad())?,
            "augment_scale" => parse!(self.augment_scale),
            "eta" => parse!(self.eta),
            "pu_nonneg" => parse!(self.pu_nonneg),
            "trail_k" => parse!(self.trail_k),
            _ => return Err(LabError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Checks the cross-field invariants.
    pub fn validate(&self) -> Result<(), LabError> {
        let fail = |m: &str| Err(LabError::Config(m.to_string()));
        if self.eval_every == 0 || self.total_steps < self.eval_every {
            return fail("need total_steps >= eval_every >= 1");
        }
        if !(self.eval_window_fraction > 0.0 && self.eval_window_fraction <= 1.0) {
            return fail("eval_window_fraction must lie in (0, 1]");
        }
        let lower = self.eval_window_fraction * self.total_steps as f64;
        let in_window = (1..=self.total_steps / self.eval_every).filter(|k| (k * self.eval_every) as f64 >= lower).count();
        if in_window < 2 {
            return fail("fewer than two evaluations fall in the eval window");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma must lie in (0, 1)");
        }
        for (name, f) in [("inclusion_prob", self.inclusion_prob), ("unlabeled_fraction", self.unlabeled_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return fail(&format!("{name} must lie in (0, 1]"));
            }
        }
        if self.low_quality_multiplier < 1.0 {
            return fail("low_quality_multiplier must be at least 1");
        }
        if self.seeds.is_empty() || self.eval_episodes == 0 || self.sync_period == 0 {
            return fail("seeds, eval_episodes and sync_period must be nonempty/positive");
        }
        if self.n_atoms < 2 || self.v_max <= self.v_min || self.components == 0 {
            return fail("bad critic support or mixture size");
        }
        if self.expert_batch == 0 || self.unlabeled_batch == 0 {
            return fail("batch sizes must be positive");
        }
        Ok(())
    }

    pub fn agent_config(&self) -> AgentConfig {
        let adam = |lr| AdamConfig { lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps };
        AgentConfig {
            gamma: self.gamma,
            sync_period: self.sync_period,
            m_samples: self.m_samples,
            expert_batch: self.expert_batch,
            unlabeled_batch: self.unlabeled_batch,
            hidden: self.hidden.clone(),
            layer_norm: self.layer_norm,
            components: self.components,
            std_floor: self.std_floor,
            support: Support::new(self.v_min, self.v_max, self.n_atoms),
            policy_adam: adam(self.policy_lr),
            critic_adam: adam(self.critic_lr),
            eval_sample: self.eval_sample,
        }
    }

    /// Reward-model settings; the mode follows the method (BCE for methods without a learned reward).
    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            mode: self.method.reward_mode(self.eta, self.pu_nonneg, self.trail_k).unwrap_or(crate::rewardlearn::RewardMode::Bce),
            augment_scale: self.augment_scale,
            hidden: self.reward_hidden.clone(),
            layer_norm: self.layer_norm,
            adam: AdamConfig { lr: self.reward_lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps },
        }
    }

    pub fn mix(&self) -> Result<Vec<(PolicyKind, usize)>, LabError> {
        Ok(parse_mix(&self.mix)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LabError> {
        let path = path.as_ref();
        fs::read_to_string(path).map_err(file_err(path))?.parse()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LabError> {
        let path = path.as_ref();
        fs::write(path, self.to_string()).map_err(file_err(path))
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

impl FromStr for RunConfig {
    type Err = LabError;

    /// Starts from the defaults; `#` starts a comment.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut cfg = RunConfig::default();
        for (n, line) in s.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AblationSpec {
    UnlabeledFraction(Vec<f64>),
    LowQualityInjection(f64),
    DemoFraction(Vec<f64>),
}

impl AblationSpec {
    pub fn parse(kind: &str, values: &[f64]) -> Result<Self, LabError> {
        let fractions = |v: &[f64]| -> Result<Vec<f64>, LabError> {
            if v.is_empty() || v.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
                return Err(LabError::Config(format!("{kind} needs fractions in (0, 1]")));
            }
            Ok(v.to_vec())
        };
        match kind.to_ascii_uppercase().as_str() {
            "UNLABELED_FRACTION" => Ok(AblationSpec::UnlabeledFraction(fractions(values)?)),
            "DEMO_FRACTION" => Ok(AblationSpec::DemoFraction(fractions(values)?)),
            "LOW_QUALITY_INJECTION" => match values {
                [m] if *m >= 1.0 => Ok(AblationSpec::LowQualityInjection(*m)),
                _ => Err(LabError::Config("LOW_QUALITY_INJECTION takes one multiplier >= 1".into())),
            },
            _ => Err(LabError::Config(format!("unknown ablation {kind:?}"))),
        }
    }

    /// One config per cell.
    pub fn cells(&self, base: &RunConfig) -> Vec<RunConfig> {
        match self {
            AblationSpec::UnlabeledFraction(fs) => {
                fs.iter().map(|&f| RunConfig { unlabeled_fraction: f, ..base.clone() }).collect()
            }
            AblationSpec::DemoFraction(fs) => {
                fs.iter().map(|&f| RunConfig { inclusion_prob: f, ..base.clone() }).collect()
            }
            AblationSpec::LowQualityInjection(m) => vec![RunConfig { low_quality_multiplier: *m, ..base.clone() }],
        }
    }
}

/// Rolls out the configured behavior mix.
pub fn generate_raw(cfg: &RunConfig) -> Result<Dataset, LabError> {
    Ok(generate_dataset(&cfg.env, &cfg.mix()?, cfg.data_seed)?)
}

fn base_count(raw: &Dataset) -> usize {
    raw.meta.get(BASE_COUNT_KEY).and_then(|v| v.parse().ok()).unwrap_or(raw.len())
}

/// A copy of `raw` with random-policy episodes appended so that the unlabeled
/// set grows by the factor `cfg.low_quality_multiplier`; demonstrations are unaffected.
pub fn inject_low_quality(cfg: &RunConfig, raw: &Dataset) -> Result<Dataset, LabError> {
    let base = base_count(raw);
    if base != raw.len() {
        return Err(LabError::Config("dataset already carries injected episodes".into()));
    }
    let split = build_split(raw, cfg.success_rule, cfg.inclusion_prob, cfg.split_seed)?;
    let extra = ((cfg.low_quality_multiplier - 1.0) * split.unlabeled.len() as f64).round() as usize;
    let mut out = raw.clone();
    if extra == 0 {
        return Ok(out);
    }
    let first_id = raw.episodes().iter().map(|e| e.id()).max().map_or(0, |m| m + 1);
    let seed = rng::derive_seed(cfg.data_seed, tags::ABLATION);
    for e in generate_episodes(&cfg.env, &[(PolicyKind::Random, extra)], seed, first_id)? {
        out.push(e)?;
    }
    out.meta.insert(BASE_COUNT_KEY.into(), base.to_string());
    out.meta.insert("lq_multiplier".into(), cfg.low_quality_multiplier.to_string());
    Ok(out)
}

/// Everything a run reads: the split and, separately, the ground-truth sidecar.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: SplitDataset,
    pub gt: GroundTruth,
}

/// The split for one cell. The demonstration draw only ever sees the
/// episodes that predate any injection; injected episodes join the unlabeled
/// set, which is then subsampled (nested across fractions) and halved.
pub fn prepare(cfg: &RunConfig, raw: &Dataset) -> Result<Prepared, LabError> {
    let base = base_count(raw);
    let original = raw.subset(&(0..base).collect::<Vec<_>>());
    let split = build_split(&original, cfg.success_rule, cfg.inclusion_prob, cfg.split_seed)?;
    let mut unlabeled = split.unlabeled.clone();
    for e in &raw.episodes()[base..] {
        unlabeled.push(e.clone().stripped())?;
    }
    if cfg.unlabeled_fraction < 1.0 {
        let mut order: Vec<usize> = (0..unlabeled.len()).collect();
        order.shuffle(&mut rng::stream(cfg.split_seed, tags::ABLATION));
        let keep = (cfg.unlabeled_fraction * order.len() as f64).ceil() as usize;
        let mut kept = order[..keep].to_vec();
        kept.sort_unstable();
        unlabeled = unlabeled.subset(&kept);
    }
    let split = SplitDataset::from_parts(split.demos, unlabeled, cfg.split_seed)?;
    Ok(Prepared { split, gt: GroundTruth::from_dataset(raw)? })
}

/// Mean of the evaluation returns at steps `>= window_fraction · total_steps`
/// (at least two must fall in the window).
pub fn eval_protocol(evals: &[(u64, f64)], total_steps: u64, window_fraction: f64) -> Result<f64, LabError> {
    let lower = window_fraction * total_steps as f64;
    let window: Vec<f64> = evals.iter().filter(|(s, _)| *s as f64 >= lower).map(|&(_, r)| r).collect();
    if window.len() < 2 {
        return Err(LabError::Protocol(format!(
            "{} evaluation(s) at or after step {lower}; the window needs at least two",
            window.len()
        )));
    }
    Ok(window.iter().sum::<f64>() / window.len() as f64)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub evals: Vec<(u64, f64)>,
    pub score: f64,
    pub trainer: Trainer,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Trains one `(cfg.method, seed)` run, evaluating every `eval_every` steps.
/// When `metrics` is given, one CSV row per step is written to it.
pub fn run(cfg: &RunConfig, prepared: &Prepared, seed: u64, mut metrics: Option<&mut dyn Write>) -> Result<RunOutcome, LabError> {
    cfg.validate()?;
    let gt = (cfg.method == TrainMethod::CrrGt).then(|| prepared.gt.clone());
    let mut trainer =
        Trainer::new(prepared.split.clone(), cfg.method, cfg.agent_config(), cfg.reward_config(), gt, seed)?;
    if let Some(w) = metrics.as_mut() {
        writeln!(w, "step,method,reward_loss,critic_loss,policy_loss,indicator_rate,eval_return")
            .map_err(file_err(Path::new("metrics")))?;
    }
    let mut evals = Vec::new();
    for _ in 0..cfg.total_steps {
        let rec: MetricsRecord = trainer.step()?;
        let done = trainer.steps_done();
        let eval = if done % cfg.eval_every == 0 {
            let r = evaluate(&trainer.bundle.policy, &cfg.env, cfg.eval_episodes, cfg.eval_seed, cfg.eval_sample)?;
            evals.push((done, r));
            Some(r)
        } else {
            None
        };
        if let Some(w) = metrics.as_mut() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                done,
                rec.method,
                opt(rec.reward_loss),
                opt(rec.critic_loss),
                rec.policy_loss,
                opt(rec.indicator_rate),
                opt(eval)
            )
            .map_err(file_err(Path::new("metrics")))?;
        }
    }
    let score = eval_protocol(&evals, cfg.total_steps, cfg.eval_window_fraction)?;
    Ok(RunOutcome { evals, score, trainer })
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub env: String,
    pub seed: u64,
    pub score: f64,
    pub unlabeled_fraction: f64,
    pub low_quality_multiplier: f64,
    pub demo_fraction: f64,
}

impl SummaryRow {
    pub fn new(cfg: &RunConfig, seed: u64, score: f64) -> Self {
        Self {
            method: cfg.method.to_string(),
            env: cfg.env.to_string(),
            seed,
            score,
            unlabeled_fraction: cfg.unlabeled_fraction,
            low_quality_multiplier: cfg.low_quality_multiplier,
            demo_fraction: cfg.inclusion_prob,
        }
    }
}

/// One row of `report.csv`: a cell aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub env: String,
    pub unlabeled_fraction: f64,
    pub low_quality_multiplier: f64,
    pub demo_fraction: f64,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups rows by method, env and ablation axes, in first-appearance order.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<ReportRow> {
    let mut order: Vec<(String, String, [u64; 3])> = Vec::new();
    let mut groups: BTreeMap<(String, String, [u64; 3]), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.method.clone(),
            r.env.clone(),
            [r.unlabeled_fraction.to_bits(), r.low_quality_multiplier.to_bits(), r.demo_fraction.to_bits()],
        );
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.score);
    }
    order
        .into_iter()
        .map(|key| {
            let scores = &groups[&key];
            let (mean, std) = mean_std(scores);
            ReportRow {
                method: key.0,
                env: key.1,
                unlabeled_fraction: f64::from_bits(key.2[0]),
                low_quality_multiplier: f64::from_bits(key.2[1]),
                demo_fraction: f64::from_bits(key.2[2]),
                seeds: scores.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<(), LabError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(file_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(file_err(path))?;
    Ok(())
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>, LabError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(file_err(path))?;
    Ok(csv::Reader::from_reader(file).deserialize().collect::<Result<_, _>>()?)
}

/// Reads a dataset file, mapping a missing file to a file error.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, LabError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(LabError::File {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found"),
        });
    }
    Ok(read_dataset(path)?)
}

/// Policy, critic and (when learned) reward networks of a finished run.
pub fn checkpoint_of(outcome: &RunOutcome, cfg: &RunConfig, seed: u64) -> Checkpoint {
    let t = &outcome.trainer;
    let mut entries = vec![("policy".to_string(), t.bundle.policy.clone()), ("critic".to_string(), t.bundle.critic.clone())];
    if let Some(r) = &t.reward {
        entries.push(("reward".to_string(), r.net.clone()));
    }
    let mut meta = BTreeMap::new();
    meta.insert("method".into(), cfg.method.to_string());
    meta.insert("env".into(), cfg.env.to_string());
    meta.insert("seed".into(), seed.to_string());
    meta.insert("steps".into(), t.steps_done().to_string());
    Checkpoint { entries, meta }
}

/// Trains one run and writes `metrics.csv`, `summary.csv`, `config.txt` and `checkpoint.bin` into `out`.
pub fn train_to_dir(cfg: &RunConfig, raw: &Dataset, seed: u64, out: &Path) -> Result<RunOutcome, LabError> {
    fs::create_dir_all(out).map_err(file_err(out))?;
    let prepared = prepare(cfg, raw)?;
    let metrics_path = out.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(fs::File::create(&metrics_path).map_err(file_err(&metrics_path))?);
    let outcome = run(cfg, &prepared, seed, Some(&mut metrics))?;
    metrics.flush().map_err(file_err(&metrics_path))?;
    write_csv(out.join("summary.csv"), &[SummaryRow::new(cfg, seed, outcome.score)])?;
    cfg.save(out.join("config.txt"))?;
    write_checkpoint(out.join("checkpoint.bin"), &checkpoint_of(&outcome, cfg, seed))?;
    Ok(outcome)
}

/// Number of worker threads for ablation grids: `ORIL_THREADS`, else all cores.
pub fn thread_count() -> usize {
    std::env::var("ORIL_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every `(cell, seed)` of an ablation in parallel and returns summary rows
/// in grid order. An injection ablation writes its amended dataset to
/// `out/dataset_injected.bin` when `out` is given.
pub fn ablate(base: &RunConfig, spec: &AblationSpec, raw: &Dataset, out: Option<&Path>) -> Result<Vec<SummaryRow>, LabError> {
    use rayon::prelude::*;
    let mut jobs = Vec::new();
    for cell in spec.cells(base) {
        let data = if cell.low_quality_multiplier > 1.0 {
            let amended = inject_low_quality(&cell, raw)?;
            if let Some(dir) = out {
                fs::create_dir_all(dir).map_err(file_err(dir))?;
                crate::trajdata::write_dataset(&amended, dir.join("dataset_injected.bin"))?;
            }
            amended
        } else {
            raw.clone()
        };
        let prepared = prepare(&cell, &data)?;
        for &seed in &cell.seeds {
            jobs.push((cell.clone(), prepared.clone(), seed));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| LabError::Config(e.to_string()))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(cell, prepared, seed)| Ok(SummaryRow::new(cell, *seed, run(cell, prepared, *seed, None)?.score)))
            .collect()
    })
}
