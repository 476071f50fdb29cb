use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use canfvc::ablation::AblationGrid;
use canfvc::checkpoint::load_model;
use canfvc::entropy::Bitstream;
use canfvc::frames::{load_raw_sequence, load_sequence, load_sequence_dirs, save_frame, Frame};
use canfvc::metrics::{bd_rate, complexity_report, psnr_rgb, RdCurve, RdPoint, BD_RATE_METHOD};
use canfvc::model::CanfVcpp;
use canfvc::nn::ParamStore;
use canfvc::pipeline::{decode_sequence, encode_sequence, serialize_psnr};
use canfvc::training::{run_stage, ClipSource, SequenceClips, SyntheticClips, TrainConfig};
use canfvc::{Error, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "canfvc", version, about = "Learned P-frame video codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a frame directory or raw RGB24 file into a bitstream.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Frame size `WxH` when `input` is a raw RGB24 file.
        #[arg(long, value_parser = parse_size)]
        size: Option<(usize, usize)>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        gop: usize,
        /// Code at most this many frames.
        #[arg(long)]
        frames: Option<usize>,
        /// Per-frame report; defaults to `<output>.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write the encoder-side reconstructions here.
        #[arg(long)]
        recon: Option<PathBuf>,
        /// Estimate rates without running the range coder.
        #[arg(long)]
        no_arith: bool,
    },
    /// Decode a bitstream into PNG frames.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// PSNR of reconstructions against originals, with rates from a report.
    Eval {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        orig: PathBuf,
        #[arg(long)]
        bits: Option<PathBuf>,
    },
    /// BD-rate between two `lambda,bpp,psnr` CSV curves.
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Run an ablation grid (TOML file or preset table1/table4/table5).
    Ablate {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        grid: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Override the per-setting step budget.
        #[arg(long)]
        steps: Option<usize>,
        /// Markdown table destination; printed when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run one training stage from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Parameters, KMACs per pixel and buffer size.
    Complexity {
        /// Untrained tiny model when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w = w.parse().map_err(|e| format!("width: {e}"))?;
    let h = h.parse().map_err(|e| format!("height: {e}"))?;
    Ok((w, h))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn save_frames(frames: &[Frame], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for (i, f) in frames.iter().enumerate() {
        save_frame(f, &dir.join(format!("frame_{:04}.png", i + 1)))?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct CsvRow {
    #[allow(dead_code)]
    lambda: f64,
    bpp: f64,
    psnr: f64,
}

fn read_curve(path: &Path) -> Result<RdCurve> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let points = rdr
        .deserialize::<CsvRow>()
        .map(|r| {
            r.map(|r| RdPoint { bpp: r.bpp, psnr: r.psnr })
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    RdCurve::new(points)
}

#[derive(Deserialize)]
struct BitsFrame {
    bits: f64,
}

#[derive(Deserialize)]
struct BitsReport {
    frames: Vec<BitsFrame>,
}

#[derive(Serialize)]
struct EvalFrame {
    frame: usize,
    #[serde(serialize_with = "serialize_psnr")]
    psnr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    bpp: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    frames: Vec<EvalFrame>,
    #[serde(serialize_with = "serialize_psnr")]
    psnr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    bpp: Option<f64>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode {
            checkpoint,
            input,
            size,
            output,
            gop,
            frames,
            report,
            recon,
            no_arith,
        } => {
            let (_store, model, manifest) = load_model(&checkpoint)?;
            let mut seq = match size {
                Some((w, h)) => load_raw_sequence(&input, w, h)?,
                None => load_sequence(&input)?,
            };
            if let Some(n) = frames {
                seq.truncate(n);
            }
            let r = encode_sequence(&model, &seq, gop, manifest.lambda, !no_arith)?;
            if let (Some(bs), Some(out)) = (&r.bitstream, &output) {
                std::fs::write(out, bs.to_bytes()).map_err(|e| Error::Io {
                    path: out.clone(),
                    source: e,
                })?;
            }
            let report_path = report.or_else(|| output.as_ref().map(|o| o.with_extension("json")));
            let json = r.report.to_json()?;
            match report_path {
                Some(p) => write(&p, &json)?,
                None => println!("{json}"),
            }
            if let Some(dir) = recon {
                save_frames(&r.reconstructions, &dir)?;
            }
            eprintln!(
                "{} frames, {:.4} bpp, {:.3} dB{}",
                r.report.frames.len(),
                r.report.bpp,
                r.report.psnr,
                if no_arith { " (estimated rate)" } else { "" }
            );
        }
        Command::Decode {
            checkpoint,
            input,
            output,
        } => {
            let (_store, model, manifest) = load_model(&checkpoint)?;
            let bytes = std::fs::read(&input).map_err(|e| Error::Io {
                path: input.clone(),
                source: e,
            })?;
            let bs = Bitstream::from_bytes(&bytes)?;
            let frames = decode_sequence(&model, &bs, manifest.lambda)?;
            save_frames(&frames, &output)?;
            eprintln!("decoded {} frames into {}", frames.len(), output.display());
        }
        Command::Eval { recon, orig, bits } => {
            let rec = load_sequence(&recon)?;
            let org = load_sequence(&orig)?;
            if rec.is_empty() {
                return Err(Error::NoFrames);
            }
            if rec.len() > org.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} reconstructions for {} originals",
                    rec.len(),
                    org.len()
                )));
            }
            let bits = bits
                .map(|p| {
                    serde_json::from_str::<BitsReport>(&read(&p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
                })
                .transpose()?;
            let (h, w) = (org[0].height(), org[0].width());
            let mut out = Vec::with_capacity(rec.len());
            for (i, (r, o)) in rec.iter().zip(&org).enumerate() {
                out.push(EvalFrame {
                    frame: i + 1,
                    psnr: psnr_rgb(o, r)?,
                    bpp: bits.as_ref().and_then(|b| b.frames.get(i)).map(|f| f.bits / (h * w) as f64),
                });
            }
            let bpp = bits.map(|b| b.frames.iter().take(rec.len()).map(|f| f.bits).sum::<f64>() / (rec.len() * h * w) as f64);
            let psnr = out.iter().map(|f| f.psnr).sum::<f64>() / out.len() as f64;
            let report = EvalReport { frames: out, psnr, bpp };
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?);
        }
        Command::Bdrate { anchor, test } => {
            let v = bd_rate(&read_curve(&anchor)?, &read_curve(&test)?)?;
            println!("BD-rate: {v:+.3} %");
            println!("method: {BD_RATE_METHOD}");
        }
        Command::Ablate {
            grid,
            preset,
            steps,
            output,
            json,
        } => {
            let mut g = match (grid, preset) {
                (Some(p), _) => AblationGrid::from_toml(&read(&p)?)?,
                (None, Some(name)) => AblationGrid::preset(&name)?,
                (None, None) => unreachable!("clap requires one of --grid/--preset"),
            };
            if let Some(s) = steps {
                g.steps = s;
            }
            let report = g.run()?;
            let md = report.render_markdown();
            match output {
                Some(p) => write(&p, &md)?,
                None => println!("{md}"),
            }
            if let Some(p) = json {
                report.write_json(&p)?;
            }
        }
        Command::Train { config, steps } => {
            let mut cfg = TrainConfig::from_toml(&read(&config)?)?;
            if steps.is_some() {
                cfg.steps = steps;
            }
            let mut source: Box<dyn ClipSource> = match &cfg.data {
                Some(dir) => Box::new(SequenceClips::new(load_sequence_dirs(dir)?, cfg.crop, 0.5, cfg.seed)?),
                None => Box::new(SyntheticClips::new(cfg.crop, 2, cfg.seed)),
            };
            let report = run_stage(&cfg, source.as_mut())?;
            for (phase, lambda, l) in &report.last {
                eprintln!(
                    "{phase} λ={lambda}: loss {:.4}, mse {:.6}, {:.4} bpp",
                    l.total,
                    l.distortion(),
                    l.bpp()
                );
            }
            for c in &report.checkpoints {
                println!("{}", c.display());
            }
        }
        Command::Complexity {
            checkpoint,
            height,
            width,
        } => {
            let (store, model) = match checkpoint {
                Some(p) => {
                    let (s, m, _) = load_model(&p)?;
                    (s, m)
                }
                None => {
                    let store = ParamStore::new(0);
                    let model = CanfVcpp::new(&store, &ModelConfig::tiny())?;
                    (store, model)
                }
            };
            let r = complexity_report(&store, &model, height, width)?;
            println!("{}", serde_json::to_string_pretty(&r).map_err(|e| Error::Config(e.to_string()))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
