//! The four-step progressive schedule at desk scale.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{cosine_lr, ClipSource, LossBreakdown, TrainOptions, Trainer};
use crate::checkpoint::{load_model, save_checkpoint, Manifest, LAMBDAS};
use crate::codec::QuantMode;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::CanfVcpp;
use crate::nn::ParamStore;

/// Parameter subset selected by name patterns. A pattern that starts with
/// `.` matches anywhere in the name, any other pattern is a prefix.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trainable {
    include: Vec<String>,
    exclude: Vec<String>,
}

fn matches(pattern: &str, name: &str) -> bool {
    if pattern.starts_with('.') {
        name.contains(pattern)
    } else {
        name.starts_with(pattern)
    }
}

impl Trainable {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn only(patterns: &[&str]) -> Self {
        Self {
            include: patterns.iter().map(|s| s.to_string()).collect(),
            exclude: Vec::new(),
        }
    }

    pub fn all_except(patterns: &[&str]) -> Self {
        Self {
            include: Vec::new(),
            exclude: patterns.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        (self.include.is_empty() || self.include.iter().any(|p| matches(p, name)))
            && !self.exclude.iter().any(|p| matches(p, name))
    }
}

/// What a phase minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `λ·μ·D + R + L_reg` over the clip.
    RateDistortion,
    /// `λ·MSE(x_c, x_t)` plus the motion rate, P-frames only.
    Prediction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpec {
    pub name: &'static str,
    pub clip_len: usize,
    pub batch: usize,
    /// Share of the stage's step budget.
    pub fraction: f64,
    pub trainable: Trainable,
    pub objective: Objective,
    pub lr: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: u8,
    pub phases: Vec<PhaseSpec>,
    pub steps: usize,
    /// Modulated loss is active from this stage on.
    pub modulated_loss: bool,
    /// Whether lower-rate models are fine-tuned from the λ_max result.
    pub sweep: bool,
}

impl StageConfig {
    pub fn phase_steps(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .phases
            .iter()
            .map(|p| (p.fraction * self.steps as f64).round() as usize)
            .collect();
        let assigned: usize = out.iter().sum();
        if let Some(last) = out.last_mut() {
            *last = (*last + self.steps).saturating_sub(assigned);
        }
        out
    }
}

const LR: (f64, f64) = (1e-4, 1e-5);
const NEW_MODULES: [&str; 3] = ["mcnet.", "modulator.", ".entropy.ctx."];

/// Phases, subsets and default budgets of stage `stage` (1–4).
pub fn stage_plan(stage: u8, steps: Option<usize>) -> Result<StageConfig> {
    let phase = |name, clip_len, batch, fraction, trainable, objective, lr| PhaseSpec {
        name,
        clip_len,
        batch,
        fraction,
        trainable,
        objective,
        lr,
    };
    use Objective::*;
    let (phases, default_steps, sweep) = match stage {
        1 => (
            vec![phase("epa-round", 5, 1, 1.0, Trainable::all_except(&NEW_MODULES), RateDistortion, LR)],
            500,
            true,
        ),
        2 => (
            vec![
                phase("mcnet-2f", 2, 1, 0.25, Trainable::only(&["mcnet."]), Prediction, LR),
                phase("mcnet-inter-2f", 2, 1, 0.25, Trainable::only(&["mcnet.", "inter."]), RateDistortion, LR),
                phase(
                    "joint-5f",
                    5,
                    1,
                    0.5,
                    Trainable::all_except(&["modulator.", ".entropy.ctx."]),
                    RateDistortion,
                    LR,
                ),
            ],
            1000,
            false,
        ),
        3 => {
            let rest = Trainable::all_except(&[".entropy.ctx."]);
            (
                vec![
                    phase("modulator-2f", 2, 1, 1.0 / 3.0, Trainable::only(&["modulator."]), RateDistortion, LR),
                    phase("joint-5f", 5, 1, 1.0 / 3.0, rest.clone(), RateDistortion, LR),
                    phase("joint-7f", 7, 2, 1.0 / 3.0, rest, RateDistortion, LR),
                ],
                1000,
                false,
            )
        }
        4 => (
            vec![
                phase("context-7f", 7, 2, 1.0 / 3.0, Trainable::only(&[".entropy.ctx."]), RateDistortion, LR),
                phase("joint-7f", 7, 2, 2.0 / 3.0, Trainable::all(), RateDistortion, (5e-5, 1e-5)),
            ],
            1500,
            true,
        ),
        s => return Err(Error::Config(format!("stage must be 1–4, got {s}"))),
    };
    Ok(StageConfig {
        stage,
        phases,
        steps: steps.unwrap_or(default_steps),
        modulated_loss: stage >= 3,
        sweep,
    })
}

pub fn checkpoint_name(stage: u8, lambda: u32) -> String {
    format!("stage{stage}_lambda{lambda}.ckpt")
}

fn default_lambdas() -> Vec<u32> {
    let mut l = LAMBDAS.to_vec();
    l.reverse();
    l
}

/// Contents of a training config file (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<u32>,
    /// Overrides the stage's default step budget.
    pub steps: Option<usize>,
    /// Fine-tuning steps per lower λ.
    pub sweep_steps: usize,
    pub crop: usize,
    pub epa: bool,
    pub round: bool,
    pub modulated: bool,
    pub reg_weight: f64,
    pub seed: u64,
    /// Directory holding one sub-directory of frames per sequence; a
    /// synthetic translating-texture set is used when absent.
    pub data: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Per-step CSV log.
    pub log: Option<PathBuf>,
    /// Starting checkpoint; stages after the first default to the previous
    /// stage's λ_max checkpoint in `out_dir`.
    pub init: Option<PathBuf>,
    /// Architecture for a fresh stage-1 model.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            lambdas: default_lambdas(),
            steps: None,
            sweep_steps: 200,
            crop: 64,
            epa: true,
            round: true,
            modulated: true,
            reg_weight: super::DEFAULT_REG_WEIGHT,
            seed: 0,
            data: None,
            out_dir: PathBuf::from("checkpoints"),
            log: None,
            init: None,
            model: ModelConfig::tiny(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1–4, got {}", self.stage)));
        }
        if self.lambdas.is_empty() {
            return Err(Error::Config("λ list is empty".into()));
        }
        for &l in &self.lambdas {
            crate::checkpoint::lambda_index(l).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.crop == 0 || self.crop % 16 != 0 {
            return Err(Error::Config(format!("crop {} must be a positive multiple of 16", self.crop)));
        }
        Ok(())
    }

    fn options(&self, lambda: u32, modulated_stage: bool) -> TrainOptions {
        TrainOptions {
            lambda: lambda as f64,
            epa: self.epa,
            modulated: self.modulated && modulated_stage,
            quant: if self.round {
                QuantMode::RoundSte
            } else {
                QuantMode::AdditiveNoise
            },
            reg_weight: self.reg_weight,
            objective: Objective::RateDistortion,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Serialize)]
struct LogRow<'a> {
    stage: u8,
    phase: &'a str,
    lambda: u32,
    step: usize,
    distortion: f64,
    bpp: f64,
    total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct StageReport {
    pub checkpoints: Vec<PathBuf>,
    /// Last loss of every (phase, λ) run.
    pub last: Vec<(String, u32, LossBreakdown)>,
    pub steps: usize,
}

/// Trains `phase` for `steps` updates and reports every step's loss.
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    model: &CanfVcpp,
    store: &ParamStore,
    phase: &PhaseSpec,
    opts: &TrainOptions,
    steps: usize,
    source: &mut dyn ClipSource,
    seed: u64,
    mut on_step: impl FnMut(usize, &LossBreakdown) -> Result<()>,
) -> Result<Option<LossBreakdown>> {
    if steps == 0 {
        return Ok(None);
    }
    if store.select(|n| phase.trainable.contains(n)).is_empty() {
        log::warn!("phase {} has no parameters in this model; skipped", phase.name);
        return Ok(None);
    }
    let mut trainer = Trainer::new(model, store, &phase.trainable, seed)?;
    let opts = TrainOptions {
        objective: phase.objective,
        ..*opts
    };
    let mut last = None;
    for step in 0..steps {
        let frames = source.sample(phase.batch, phase.clip_len)?;
        let lr = cosine_lr(step, steps, phase.lr.0, phase.lr.1);
        let loss = trainer.step(&frames, &opts, lr)?;
        on_step(step, &loss)?;
        last = Some(loss);
    }
    Ok(last)
}

fn initial_model(cfg: &TrainConfig, lambda_max: u32) -> Result<(ParamStore, CanfVcpp)> {
    let path = match (&cfg.init, cfg.stage) {
        (Some(p), _) => p.clone(),
        (None, 1) => {
            let store = ParamStore::new(cfg.model.seed);
            let model = CanfVcpp::new(&store, &cfg.model)?;
            return Ok((store, model));
        }
        (None, s) => cfg.out_dir.join(checkpoint_name(s - 1, lambda_max)),
    };
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "stage {} needs the prerequisite checkpoint {}",
            cfg.stage,
            path.display()
        )));
    }
    let (store, model, manifest) = load_model(&path)?;
    if cfg.stage > 1 && manifest.stage + 1 < cfg.stage {
        log::warn!("starting stage {} from a stage {} checkpoint", cfg.stage, manifest.stage);
    }
    Ok((store, model))
}

fn open_log(path: Option<&Path>) -> Result<Option<csv::Writer<std::fs::File>>> {
    let Some(path) = path else { return Ok(None) };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(Some(csv::WriterBuilder::new().has_headers(!exists).from_writer(file)))
}

/// Runs one stage of the schedule: every phase at the largest λ, then (for
/// stages 1 and 4) a short fine-tune of each lower λ starting from the
/// λ_max weights. Writes `stage{K}_lambda{λ}.ckpt` into `cfg.out_dir`.
pub fn run_stage(cfg: &TrainConfig, source: &mut dyn ClipSource) -> Result<StageReport> {
    cfg.validate()?;
    let plan = stage_plan(cfg.stage, cfg.steps)?;
    let lambda_max = *cfg.lambdas.iter().max().expect("validated non-empty");
    let (store, model) = initial_model(cfg, lambda_max)?;
    let model_cfg = model.config().clone();
    let mut log = open_log(cfg.log.as_deref())?;
    let mut report = StageReport::default();

    let mut record = |phase: &str, lambda: u32, step: usize, l: &LossBreakdown| -> Result<()> {
        if let Some(w) = log.as_mut() {
            w.serialize(LogRow {
                stage: cfg.stage,
                phase,
                lambda,
                step,
                distortion: l.distortion(),
                bpp: l.bpp(),
                total: l.total,
            })
            .map_err(|e| Error::Io {
                path: cfg.log.clone().unwrap_or_default(),
                source: std::io::Error::other(e),
            })?;
            w.flush().map_err(|e| Error::io(cfg.log.clone().unwrap_or_default(), e))?;
        }
        Ok(())
    };

    let opts = cfg.options(lambda_max, plan.modulated_loss);
    for (i, (phase, steps)) in plan.phases.iter().zip(plan.phase_steps()).enumerate() {
        log::info!("stage {} phase {} ({steps} steps, λ = {lambda_max})", cfg.stage, phase.name);
        let last = train_phase(&model, &store, phase, &opts, steps, source, cfg.seed + i as u64, |s, l| {
            record(phase.name, lambda_max, s, l)
        })?;
        report.steps += steps;
        if let Some(l) = last {
            report.last.push((phase.name.to_string(), lambda_max, l));
        }
    }
    let base_path = cfg.out_dir.join(checkpoint_name(cfg.stage, lambda_max));
    save_checkpoint(&base_path, &store, &Manifest::new(lambda_max, cfg.stage, model_cfg.clone()))?;
    report.checkpoints.push(base_path);

    if plan.sweep {
        let base_weights = store
            .all_vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
            .collect::<Result<std::collections::BTreeMap<_, _>>>()?;
        let tail = plan.phases.last().expect("every stage has a phase");
        let sweep = PhaseSpec {
            name: "lambda-sweep",
            fraction: 1.0,
            ..tail.clone()
        };
        for &lambda in cfg.lambdas.iter().filter(|&&l| l != lambda_max) {
            store.assign(&base_weights)?;
            let opts = cfg.options(lambda, plan.modulated_loss);
            let last = train_phase(&model, &store, &sweep, &opts, cfg.sweep_steps, source, cfg.seed + lambda as u64, |s, l| {
                record(sweep.name, lambda, s, l)
            })?;
            report.steps += cfg.sweep_steps;
            if let Some(l) = last {
                report.last.push((sweep.name.to_string(), lambda, l));
            }
            let path = cfg.out_dir.join(checkpoint_name(cfg.stage, lambda));
            save_checkpoint(&path, &store, &Manifest::new(lambda, cfg.stage, model_cfg.clone()))?;
            report.checkpoints.push(path);
        }
        store.assign(&base_weights)?;
    }
    Ok(report)
}
