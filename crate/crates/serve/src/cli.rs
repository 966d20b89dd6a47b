//! Command-line interface. Usage errors exit 2, operational errors exit 1.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gliopipe::modality::Modality;
use gliopipe::models::inference::{predict_methylation, MethylationPrediction};
use gliopipe::trainer::cls::train_classifier;
use gliopipe::trainer::config::{Task, TrainConfig};
use gliopipe::trainer::evaluate::{evaluate_classification, evaluate_segmentation, RegionSelection};
use gliopipe::trainer::manifest::{load_cases, read_volume, write_dataset};
use gliopipe::trainer::phantom::{phantom_cohort, PhantomSpec};
use gliopipe::trainer::report::to_json_lines;
use gliopipe::trainer::seg::{train_segmentation_with, SegResume};
use gliopipe::volio::{canonicalize, write_nifti, write_nifti_gz, Volume3D};

use crate::api::{router, AppState, ServeConfig};
use crate::bundle::{read_checkpoint, resolve_model_dir, write_checkpoint, ModelBundle};
use crate::study::summarize;

#[derive(Debug, Parser)]
#[command(name = "gliopipe", version, about = "Brain MRI tumor segmentation and MGMT methylation prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Segmentation,
    Methylation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegionArg {
    EdemaPlusEnhancing,
    StandardBrats,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a DICOM series directory (or any readable volume) to NIfTI.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic phantom cases and a manifest.
    Phantom {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        dims: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmentation network.
    TrainSeg {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Model directory to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from `last.gpck` in this directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train the per-modality classifiers and the ensemble.
    TrainCls {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score trained models against a labelled manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Model directory (defaults to $GLIOPIPE_MODEL_DIR).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = TaskArg::Segmentation)]
        task: TaskArg,
        #[arg(long, value_enum, default_value_t = RegionArg::EdemaPlusEnhancing)]
        region_source: RegionArg,
        /// Write the report here as JSON lines instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a model on one study given as MODALITY=PATH pairs.
    Predict {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "input", value_name = "MODALITY=PATH", required = true)]
        inputs: Vec<String>,
        /// Mask output for segmentation.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

/// Parses and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command, &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_config(path: Option<&Path>, fallback: TrainConfig, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => fallback,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_inputs(pairs: &[String]) -> Result<BTreeMap<Modality, Volume3D>> {
    let mut out = BTreeMap::new();
    for p in pairs {
        let Some((m, path)) = p.split_once('=') else {
            bail!("input {p:?} is not MODALITY=PATH");
        };
        let m: Modality = m.parse().with_context(|| format!("input {p:?}"))?;
        let v = canonicalize(&read_volume(Path::new(path))?);
        out.insert(m, v);
    }
    Ok(out)
}

pub fn format_methylation(p: &MethylationPrediction) -> String {
    let mut s = format!("probability {:.6}\nstatus_bit {}\n", p.probability, p.status_bit);
    s.push_str("modality  probability  imputed\n");
    for e in &p.per_modality {
        s.push_str(&format!("{:<8}  {:.6}     {}\n", e.modality.name(), e.probability, if e.imputed { "yes" } else { "no" }));
    }
    s
}

pub fn execute(cmd: Command, out: &mut dyn std::io::Write) -> Result<()> {
    match cmd {
        Command::Convert { input, out: dst } => {
            let v = canonicalize(&read_volume(&input)?);
            let bytes = if dst.to_string_lossy().ends_with(".gz") { write_nifti_gz(&v) } else { write_nifti(&v) };
            fs::write(&dst, bytes).with_context(|| format!("writing {}", dst.display()))?;
            writeln!(out, "wrote {} ({}x{}x{})", dst.display(), v.dims[0], v.dims[1], v.dims[2])?;
        }
        Command::Phantom { count, dims, seed, out: dir } => {
            if count == 0 || dims < 8 {
                bail!("need --count >= 1 and --dims >= 8");
            }
            let cases = phantom_cohort(count, &PhantomSpec::cube(dims), seed);
            let m = write_dataset(&dir, &cases)?;
            writeln!(out, "wrote {count} cases, manifest {}", m.display())?;
        }
        Command::TrainSeg { config, manifest, out: dir, seed, resume } => {
            let cfg = load_config(config.as_deref(), TrainConfig::segmentation(), seed)?;
            if cfg.task != Task::Segmentation {
                bail!("config task is not segmentation");
            }
            let cases = load_cases(&manifest)?;
            let resume_state = if resume {
                Some(SegResume { last: read_checkpoint(&dir.join("last.gpck"))?, best: read_checkpoint(&dir.join("segmentation.gpck"))? })
            } else {
                None
            };
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("train_seg.toml"), cfg.to_toml())?;
            let history_path = dir.join("history.jsonl");
            let mut lines = String::new();
            let outcome = train_segmentation_with(&cases, &cfg, resume_state.as_ref(), &mut |e| {
                let line = to_json_lines(std::slice::from_ref(e));
                eprint!("{line}");
                lines.push_str(&line);
            })?;
            let mut existing = if resume { fs::read_to_string(&history_path).unwrap_or_default() } else { String::new() };
            existing.push_str(&lines);
            fs::write(&history_path, existing)?;
            ModelBundle::save_segmentation(&dir, &outcome.best)?;
            write_checkpoint(&dir.join("last.gpck"), &outcome.last)?;
            writeln!(out, "trained on {} cases, validated on {}; model in {}", outcome.train_ids.len(), outcome.val_ids.len(), dir.display())?;
        }
        Command::TrainCls { config, manifest, out: dir, seed } => {
            let cfg = load_config(config.as_deref(), TrainConfig::classification(), seed)?;
            if cfg.task != Task::Classification {
                bail!("config task is not classification");
            }
            let cases = load_cases(&manifest)?;
            let outcome = train_classifier(&cases, &cfg)?;
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("train_cls.toml"), cfg.to_toml())?;
            ModelBundle::save_methylation(&dir, &outcome.model)?;
            fs::write(dir.join("cls_history.jsonl"), to_json_lines(&outcome.history))?;
            fs::write(dir.join("cls_metrics.json"), serde_json::to_string_pretty(&outcome.metrics)?)?;
            writeln!(out, "held-out AUROC {:.4}", outcome.metrics.overall)?;
            for (m, a) in &outcome.metrics.per_modality {
                writeln!(out, "{:<8} AUROC {:.4}", m.name(), a)?;
            }
        }
        Command::Evaluate { manifest, checkpoint, task, region_source, out: dst } => {
            let dir = resolve_model_dir(checkpoint.as_deref())?;
            let bundle = ModelBundle::load(&dir)?;
            let cases = load_cases(&manifest)?;
            let text = match task {
                TaskArg::Segmentation => {
                    let model = bundle.segmentation.as_ref().with_context(|| format!("no segmentation model in {}", dir.display()))?;
                    let sel = match region_source {
                        RegionArg::EdemaPlusEnhancing => RegionSelection::EdemaPlusEnhancing,
                        RegionArg::StandardBrats => RegionSelection::StandardBrats,
                        RegionArg::Both => RegionSelection::Both,
                    };
                    let r = evaluate_segmentation(model, &cases, sel)?;
                    let mut t = to_json_lines(&r.cases);
                    t.push_str(&serde_json::to_string(&serde_json::json!({ "mean": r.mean, "median": r.median }))?);
                    t.push('\n');
                    t
                }
                TaskArg::Methylation => {
                    let model = bundle.methylation.as_ref().with_context(|| format!("no methylation model in {}", dir.display()))?;
                    let r = evaluate_classification(model, &cases)?;
                    let mut t = to_json_lines(&r.cases);
                    t.push_str(&serde_json::to_string(&serde_json::json!({
                        "auroc": r.auroc,
                        "per_modality_auroc": r.per_modality_auroc,
                        "accuracy": r.accuracy,
                    }))?);
                    t.push('\n');
                    t
                }
            };
            match dst {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => write!(out, "{text}")?,
            }
        }
        Command::Predict { task, checkpoint, inputs, out: dst } => {
            let dir = resolve_model_dir(checkpoint.as_deref())?;
            let bundle = ModelBundle::load(&dir)?;
            let study = parse_inputs(&inputs)?;
            match task {
                TaskArg::Segmentation => {
                    let model = bundle.segmentation.as_ref().with_context(|| format!("no segmentation model in {}", dir.display()))?;
                    let mask = model.segment(&study)?;
                    if let Some(p) = &dst {
                        fs::write(p, write_nifti(&mask)).with_context(|| format!("writing {}", p.display()))?;
                    }
                    let summary = summarize(&mask, Default::default());
                    writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
                }
                TaskArg::Methylation => {
                    let model = bundle.methylation.as_ref().with_context(|| format!("no methylation model in {}", dir.display()))?;
                    let p = predict_methylation(model, &study)?;
                    write!(out, "{}", format_methylation(&p))?;
                }
            }
        }
        Command::Serve { checkpoint, config, host, port } => {
            let dir = resolve_model_dir(checkpoint.as_deref())?;
            let bundle = ModelBundle::load(&dir)?;
            let cfg: ServeConfig = match config {
                Some(p) => toml::from_str(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => ServeConfig::default(),
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await.with_context(|| format!("binding {host}:{port}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, router(AppState::new(bundle, cfg))).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
