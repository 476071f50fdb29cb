//! Flag-grid ablations: train each setting briefly per λ, code an
//! evaluation set through the real bitstream, and report BD-rate against an
//! anchor setting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, save_checkpoint, Manifest, LAMBDAS};
use crate::codec::QuantMode;
use crate::config::{ModelConfig, ModulationScope};
use crate::error::{Error, Result};
use crate::frames::{load_sequence_dirs, Frame};
use crate::metrics::{bd_rate, RdCurve, RdPoint, BD_RATE_METHOD};
use crate::model::CanfVcpp;
use crate::nn::ParamStore;
use crate::pipeline::encode_sequence;
use crate::training::{
    train_phase, ClipSource, Objective, PhaseSpec, SequenceClips, SyntheticClips, TrainOptions, Trainable, DEFAULT_REG_WEIGHT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    pub epa: bool,
    pub round: bool,
    pub multiscale: bool,
    pub modulated: bool,
    pub feature_mod: bool,
    pub quadtree: bool,
    pub modulation_scope: ModulationScope,
}

impl Flags {
    /// Every tool off: the plain conditional codec trained per frame with
    /// additive noise.
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn full() -> Self {
        Self {
            epa: true,
            round: true,
            multiscale: true,
            modulated: true,
            feature_mod: true,
            quadtree: true,
            modulation_scope: ModulationScope::All,
        }
    }

    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            multiscale: self.multiscale,
            feature_mod: self.feature_mod,
            modulation_scope: self.modulation_scope,
            quadtree: self.quadtree,
            ..base.clone()
        }
    }

    pub fn train_options(&self, lambda: u32) -> TrainOptions {
        TrainOptions {
            lambda: lambda as f64,
            epa: self.epa,
            modulated: self.modulated,
            quant: if self.round {
                QuantMode::RoundSte
            } else {
                QuantMode::AdditiveNoise
            },
            reg_weight: DEFAULT_REG_WEIGHT,
            objective: Objective::RateDistortion,
        }
    }

    fn rows(&self) -> [(&'static str, String); 7] {
        let tick = |b: bool| if b { "✓".to_string() } else { String::new() };
        [
            ("EPA training", tick(self.epa)),
            ("Round-based training", tick(self.round)),
            ("Multi-scale MCNet", tick(self.multiscale)),
            ("Modulated loss", tick(self.modulated)),
            ("Feature map modulation", tick(self.feature_mod)),
            (
                "Modulated modules",
                if self.feature_mod {
                    scope_name(self.modulation_scope).to_string()
                } else {
                    String::new()
                },
            ),
            ("Quadtree entropy model", tick(self.quadtree)),
        ]
    }
}

fn scope_name(s: ModulationScope) -> &'static str {
    match s {
        ModulationScope::All => "GridNet + inter codec",
        ModulationScope::GridNet => "GridNet",
        ModulationScope::GridNetLast => "GridNet last layer",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setting {
    pub label: String,
    #[serde(default)]
    pub flags: Flags,
}

impl Setting {
    pub fn new(label: &str, flags: Flags) -> Self {
        Self {
            label: label.to_string(),
            flags,
        }
    }

    fn checkpoint_file(&self, lambda: u32) -> String {
        let slug: String = self
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        format!("{slug}_lambda{lambda}.ckpt")
    }
}

/// Published BD-rates for one dataset, one value per setting. Rendered next
/// to the measured row and never compared against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub dataset: String,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub title: String,
    pub anchor: Setting,
    pub settings: Vec<Setting>,
    pub lambdas: Vec<u32>,
    /// Training steps per (setting, λ).
    pub steps: usize,
    pub clip_len: usize,
    /// Side of the synthetic training and evaluation frames, or the crop
    /// size for `data`.
    pub size: usize,
    pub eval_sequences: usize,
    pub eval_frames: usize,
    pub gop: usize,
    pub seed: u64,
    /// Training sequences (one sub-directory per sequence).
    pub data: Option<PathBuf>,
    /// Evaluation sequences, coded at full size.
    pub eval_data: Option<PathBuf>,
    /// Load `{label}_lambda{λ}.ckpt` from here instead of training.
    pub checkpoints: Option<PathBuf>,
    /// Save freshly trained weights here.
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub references: Vec<Reference>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            title: "Ablation".into(),
            anchor: Setting::new("anchor", Flags::baseline()),
            settings: Vec::new(),
            lambdas: LAMBDAS.to_vec(),
            steps: 300,
            clip_len: 3,
            size: 32,
            eval_sequences: 2,
            eval_frames: 4,
            gop: 4,
            seed: 0,
            data: None,
            eval_data: None,
            checkpoints: None,
            out_dir: None,
            model: ModelConfig::tiny(),
            references: Vec::new(),
        }
    }
}

fn refs(rows: &[(&str, &[f64])]) -> Vec<Reference> {
    rows.iter()
        .map(|(d, v)| Reference {
            dataset: d.to_string(),
            values: v.iter().map(|&x| Some(x)).collect(),
        })
        .collect()
}

/// Setting (c) of the incremental table: EPA, rounding and the multi-scale
/// MCNet, no modulation.
fn setting_c() -> Flags {
    Flags {
        epa: true,
        round: true,
        multiscale: true,
        ..Flags::baseline()
    }
}

impl AblationGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.settings.is_empty() {
            return Err(Error::Config("the grid has no settings".into()));
        }
        for &l in &self.lambdas {
            crate::checkpoint::lambda_index(l).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.lambdas.is_empty() {
            return Err(Error::Config("λ list is empty".into()));
        }
        if self.clip_len < 2 || self.eval_frames == 0 || self.eval_sequences == 0 || self.gop == 0 {
            return Err(Error::Config("clip_len ≥ 2, eval_frames ≥ 1, eval_sequences ≥ 1 and gop ≥ 1 are required".into()));
        }
        if self.size == 0 || self.size % 16 != 0 {
            return Err(Error::Config(format!("size {} must be a positive multiple of 16", self.size)));
        }
        for r in &self.references {
            if r.values.len() != self.settings.len() {
                return Err(Error::Config(format!(
                    "reference row {} has {} values for {} settings",
                    r.dataset,
                    r.values.len(),
                    self.settings.len()
                )));
            }
        }
        Ok(())
    }

    /// Built-in grids named `table1`, `table4` and `table5`.
    pub fn preset(name: &str) -> Result<Self> {
        let mut g = Self::default();
        match name {
            "table1" => {
                g.title = "Incremental tools over the conditional baseline".into();
                g.anchor = Setting::new("anchor", Flags::baseline());
                let a = Flags {
                    epa: true,
                    round: true,
                    ..Flags::baseline()
                };
                let c = Flags {
                    modulated: true,
                    feature_mod: true,
                    ..setting_c()
                };
                g.settings = vec![
                    Setting::new("(a)", a),
                    Setting::new("(b)", setting_c()),
                    Setting::new("(c)", c),
                    Setting::new("(d)", Flags { quadtree: true, ..c }),
                ];
                g.references = refs(&[
                    ("UVG", &[-8.2, -17.0, -25.6, -40.2]),
                    ("HEVC-B", &[-8.7, -8.4, -23.8, -38.1]),
                    ("MCL-JCV", &[-9.1, -13.9, -22.0, -35.5]),
                ]);
            }
            "table4" => {
                g.title = "Modulated loss and feature map modulation".into();
                g.anchor = Setting::new("anchor (c)", setting_c());
                let fm = |modulated, feature_mod| Flags {
                    modulated,
                    feature_mod,
                    modulation_scope: ModulationScope::GridNet,
                    ..setting_c()
                };
                g.settings = vec![
                    Setting::new("loss only", fm(true, false)),
                    Setting::new("modulation only", fm(false, true)),
                    Setting::new("both", fm(true, true)),
                ];
                g.references = refs(&[
                    ("UVG", &[1.1, -2.9, -10.9]),
                    ("HEVC-B", &[3.0, -2.2, -12.6]),
                    ("MCL-JCV", &[-0.7, -2.5, -9.0]),
                ]);
            }
            "table5" => {
                g.title = "Modules adapted by feature map modulation".into();
                g.anchor = Setting::new("anchor (c)", setting_c());
                let scoped = |modulation_scope| Flags {
                    modulated: true,
                    feature_mod: true,
                    modulation_scope,
                    ..setting_c()
                };
                g.settings = vec![
                    Setting::new("GridNet", scoped(ModulationScope::GridNet)),
                    Setting::new("GridNet + inter", scoped(ModulationScope::All)),
                    Setting::new("GridNet last layer", scoped(ModulationScope::GridNetLast)),
                ];
                g.references = refs(&[
                    ("UVG", &[-10.9, -9.8, -6.9]),
                    ("HEVC-B", &[-12.6, -15.3, -9.8]),
                    ("MCL-JCV", &[-9.0, -9.3, -6.8]),
                ]);
            }
            other => {
                return Err(Error::Config(format!("unknown preset `{other}` (table1, table4, table5)")));
            }
        }
        Ok(g)
    }

    fn training_source(&self, seed: u64) -> Result<Box<dyn ClipSource>> {
        Ok(match &self.data {
            Some(dir) => Box::new(SequenceClips::new(load_sequence_dirs(dir)?, self.size, 0.5, seed)?),
            None => Box::new(SyntheticClips::new(self.size, 2, seed)),
        })
    }

    /// The evaluation set, shared by every setting.
    pub fn evaluation_set(&self) -> Result<Vec<Vec<Frame>>> {
        match &self.eval_data {
            Some(dir) => Ok(load_sequence_dirs(dir)?
                .into_iter()
                .take(self.eval_sequences)
                .map(|s| s.into_iter().take(self.eval_frames).collect())
                .collect()),
            None => {
                let mut src = SyntheticClips::new(self.size, 2, self.seed ^ 0x5eed_e7a1);
                (0..self.eval_sequences)
                    .map(|_| {
                        src.sample(1, self.eval_frames)?
                            .iter()
                            .map(Frame::from_tensor)
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect()
            }
        }
    }

    fn model_for(&self, setting: &Setting, lambda: u32) -> Result<(ParamStore, CanfVcpp)> {
        if let Some(dir) = &self.checkpoints {
            let path = dir.join(setting.checkpoint_file(lambda));
            if !path.exists() {
                return Err(Error::Checkpoint(format!(
                    "setting {} at λ = {lambda} needs {}",
                    setting.label,
                    path.display()
                )));
            }
            let (store, model, _) = load_model(&path)?;
            return Ok((store, model));
        }
        let cfg = setting.flags.model_config(&self.model);
        let store = ParamStore::new(cfg.seed);
        let model = CanfVcpp::new(&store, &cfg)?;
        let phase = PhaseSpec {
            name: "ablation",
            clip_len: self.clip_len,
            batch: 1,
            fraction: 1.0,
            trainable: Trainable::all(),
            objective: Objective::RateDistortion,
            lr: (1e-4, 1e-5),
        };
        let mut source = self.training_source(self.seed)?;
        train_phase(
            &model,
            &store,
            &phase,
            &setting.flags.train_options(lambda),
            self.steps,
            source.as_mut(),
            self.seed,
            |_, _| Ok(()),
        )?;
        if let Some(dir) = &self.out_dir {
            save_checkpoint(&dir.join(setting.checkpoint_file(lambda)), &store, &Manifest::new(lambda, 0, cfg))?;
        }
        Ok((store, model))
    }

    /// Rate and mean PSNR of `setting` at every λ, from coded bitstreams.
    pub fn evaluate_setting(&self, setting: &Setting, eval: &[Vec<Frame>]) -> Result<Vec<(u32, RdPoint)>> {
        let mut out = Vec::with_capacity(self.lambdas.len());
        for &lambda in &self.lambdas {
            let (_store, model) = self.model_for(setting, lambda)?;
            let (mut bits, mut pixels, mut psnr_sum, mut frames) = (0.0, 0usize, 0.0, 0usize);
            for seq in eval {
                let r = encode_sequence(&model, seq, self.gop, lambda, true)?;
                for f in &r.report.frames {
                    bits += f.bits;
                    psnr_sum += f.psnr;
                }
                pixels += r.report.width * r.report.height * r.report.frames.len();
                frames += r.report.frames.len();
            }
            if frames == 0 {
                return Err(Error::NoFrames);
            }
            let point = RdPoint {
                bpp: bits / pixels as f64,
                psnr: psnr_sum / frames as f64,
            };
            log::info!("{} λ = {lambda}: {:.4} bpp, {:.3} dB", setting.label, point.bpp, point.psnr);
            out.push((lambda, point));
        }
        Ok(out)
    }

    /// Trains (or loads) and evaluates the anchor and every setting.
    pub fn run(&self) -> Result<AblationReport> {
        self.validate()?;
        let eval = self.evaluation_set()?;
        let anchor = self.evaluate_setting(&self.anchor, &eval)?;
        let settings = self
            .settings
            .iter()
            .map(|s| self.evaluate_setting(s, &eval))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.summarize(anchor, settings))
    }

    /// Assembles a report from measured points (one list per setting).
    pub fn summarize(&self, anchor: Vec<(u32, RdPoint)>, settings: Vec<Vec<(u32, RdPoint)>>) -> AblationReport {
        let curve = |pts: &[(u32, RdPoint)]| RdCurve::new(pts.iter().map(|p| p.1).collect());
        let anchor_curve = curve(&anchor);
        let results = self
            .settings
            .iter()
            .zip(settings)
            .map(|(s, points)| {
                let bd = match (&anchor_curve, curve(&points)) {
                    (Ok(a), Ok(t)) => bd_rate(a, &t),
                    (Err(e), _) => Err(Error::Metric(format!("anchor: {e}"))),
                    (_, Err(e)) => Err(e),
                };
                SettingResult {
                    label: s.label.clone(),
                    flags: s.flags,
                    points,
                    bd_rate: bd.as_ref().ok().copied(),
                    note: bd.err().map(|e| e.to_string()),
                }
            })
            .collect();
        AblationReport {
            title: self.title.clone(),
            anchor: SettingResult {
                label: self.anchor.label.clone(),
                flags: self.anchor.flags,
                points: anchor,
                bd_rate: None,
                note: None,
            },
            settings: results,
            references: self.references.clone(),
            method: BD_RATE_METHOD.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettingResult {
    pub label: String,
    pub flags: Flags,
    pub points: Vec<(u32, RdPoint)>,
    /// Against the anchor; `None` when the curves do not support it.
    pub bd_rate: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub title: String,
    pub anchor: SettingResult,
    pub settings: Vec<SettingResult>,
    pub references: Vec<Reference>,
    pub method: String,
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Markdown table: one column per setting, flag rows, the measured
    /// BD-rate row and the published rows marked as reference only.
    pub fn render_markdown(&self) -> String {
        let mut s = format!("### {}\n\nAnchor: {}\n\n", self.title, self.anchor.label);
        let header: Vec<&str> = self.settings.iter().map(|r| r.label.as_str()).collect();
        s += &format!("| | {} |\n", header.join(" | "));
        s += &format!("|---|{}\n", "---|".repeat(header.len()));
        for i in 0..7 {
            let name = self.anchor.flags.rows()[i].0;
            let cells: Vec<String> = self.settings.iter().map(|r| r.flags.rows()[i].1.clone()).collect();
            if cells.iter().all(String::is_empty) && self.anchor.flags.rows()[i].1.is_empty() {
                continue;
            }
            s += &format!("| {name} | {} |\n", cells.join(" | "));
        }
        let bd: Vec<String> = self
            .settings
            .iter()
            .map(|r| r.bd_rate.map_or("n/a".to_string(), |v| format!("{v:.1}")))
            .collect();
        s += &format!("| **BD-rate (%), measured** | {} |\n", bd.join(" | "));
        for r in &self.references {
            let cells: Vec<String> = r
                .values
                .iter()
                .map(|v| v.map_or(String::new(), |x| format!("*{x:.1}*")))
                .collect();
            s += &format!("| *published {}, reference only* | {} |\n", r.dataset, cells.join(" | "));
        }
        s += &format!("\n{}\n", self.method);
        for r in self.settings.iter().filter(|r| r.note.is_some()) {
            s += &format!("\n- {}: {}", r.label, r.note.as_deref().unwrap_or_default());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(scale: f64) -> Vec<(u32, RdPoint)> {
        [(256, 0.1, 30.0), (512, 0.2, 32.0), (1024, 0.4, 34.5), (2048, 0.8, 36.0)]
            .iter()
            .map(|&(l, b, p)| (l, RdPoint { bpp: b * scale, psnr: p }))
            .collect()
    }

    #[test]
    fn anchor_against_itself_is_zero() {
        let mut g = AblationGrid::preset("table1").unwrap();
        g.settings = vec![g.anchor.clone()];
        g.references.clear();
        let r = g.summarize(curve(1.0), vec![curve(1.0)]);
        assert_eq!(r.settings[0].bd_rate, Some(0.0));
    }

    #[test]
    fn table1_schema_has_four_settings() {
        let g = AblationGrid::preset("table1").unwrap();
        let labels: Vec<&str> = g.settings.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels, ["(a)", "(b)", "(c)", "(d)"]);
        assert_eq!(g.anchor.flags, Flags::baseline());
        assert_eq!(g.settings[3].flags, Flags::full());
        let r = g.summarize(curve(1.0), vec![curve(0.9), curve(0.8), curve(0.7), curve(0.5)]);
        let md = r.render_markdown();
        assert!(md.contains("| | (a) | (b) | (c) | (d) |"), "{md}");
        assert!(md.contains("*-40.2*"));
        let d = r.settings[3].bd_rate.unwrap();
        assert!((d + 50.0).abs() < 1e-9);
        // published values only appear as annotations
        assert!(r.settings.iter().all(|s| s.bd_rate.unwrap() > -50.1));
    }

    #[test]
    fn presets_validate_and_parse() {
        for p in ["table1", "table4", "table5"] {
            AblationGrid::preset(p).unwrap().validate().unwrap();
        }
        assert!(AblationGrid::preset("table9").is_err());
        let g = AblationGrid::from_toml(
            "title = \"t\"\nsteps = 1\nlambdas = [2048]\n[anchor]\nlabel = \"a\"\n[[settings]]\nlabel = \"b\"\nflags = { epa = true, modulation_scope = \"grid-net-last\" }\n",
        )
        .unwrap();
        assert_eq!(g.settings[0].flags.modulation_scope, ModulationScope::GridNetLast);
        assert!(g.settings[0].flags.epa && !g.settings[0].flags.round);
        assert!(AblationGrid::from_toml("bogus = 1\n[[settings]]\nlabel = \"b\"\n").is_err());
    }

    #[test]
    fn unsupported_curves_are_reported_not_fatal() {
        let g = AblationGrid::preset("table4").unwrap();
        let short: Vec<_> = curve(1.0).into_iter().take(2).collect();
        let r = g.summarize(curve(1.0), vec![short, curve(1.0), curve(2.0)]);
        assert!(r.settings[0].bd_rate.is_none() && r.settings[0].note.is_some());
        assert!((r.settings[2].bd_rate.unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = AblationGrid::preset("table5").unwrap();
        g.checkpoints = Some(dir.path().to_path_buf());
        g.eval_sequences = 1;
        g.eval_frames = 2;
        let r = g.run();
        assert!(matches!(r, Err(Error::Checkpoint(_))), "{:?}", r.err());
    }
}
