//! `dagan`: corpus generation, translation training, detector training and
//! evaluation for pixel-level domain adaptation.
//!
//! Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric
//! failure, 1 anything else.

use clap::{Args, Parser, Subcommand, ValueEnum};
use dagan::pipeline::{self, DetectionSource, PipelineConfig};
use dagan::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dagan", version, about = "Cycle-consistent pixel-level domain adaptation for detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; missing keys take defaults
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory [default: $DAGAN_OUT/<subcommand>]
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Override any config value, e.g. `--set gan.total_steps=200`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed
    #[arg(long)]
    seed: Option<u64>,
    /// Cycle-consistency weight
    #[arg(long)]
    lambda_cycle: Option<f64>,
    /// Translation training steps
    #[arg(long)]
    gan_steps: Option<usize>,
    /// Detector training epochs
    #[arg(long)]
    detector_epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Cycle,
    Forward,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source/target corpus and its manifests
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Train translation networks on unpaired source and target images
    TrainGan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// One model per class
        #[arg(long)]
        conditioned: bool,
    },
    /// Translate a source manifest with trained generator(s)
    Transform {
        #[command(flatten)]
        common: Common,
        /// Directory written by train-gan
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        source: PathBuf,
    },
    /// Train a detector on a manifest
    TrainDetector {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        /// Permit boxed target-domain images (supervised upper bound only)
        #[arg(long)]
        allow_target_labels: bool,
    },
    /// Score a detector, or a detections file, on a test manifest
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
        detector: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Train and evaluate every regime over all seeds
    Compare {
        #[command(flatten)]
        common: Common,
        /// Also train the target-supervised upper bound
        #[arg(long)]
        allow_target_labels: bool,
    },
    /// Merge eval/compare JSON files into one CSV
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// CSV path [default: stdout]
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::Json(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::NonFinite(_) | Error::Diverged { .. } => 4,
        _ => 1,
    }
}

impl Common {
    fn resolve(&self, extra: &[(&str, String)]) -> dagan::Result<PipelineConfig> {
        let mut overrides = Vec::new();
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("gan.lambda_cycle", self.lambda_cycle.map(|v| v.to_string()));
        flag("gan.total_steps", self.gan_steps.map(|v| v.to_string()));
        flag("detector_train.epochs", self.detector_epochs.map(|v| v.to_string()));
        for (k, v) in extra {
            overrides.push((k.to_string(), v.clone()));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        pipeline::parse_config(self.config.as_deref(), &overrides)
    }

    fn out_dir(&self, cfg: &PipelineConfig, name: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.out_root().join(name))
    }
}

fn run(cli: Cli) -> dagan::Result<()> {
    match cli.command {
        Command::GenCorpus { common } => {
            let cfg = common.resolve(&[])?;
            let out = common.out_dir(&cfg, "corpus");
            let c = pipeline::gen_corpus(&cfg, &out)?;
            println!(
                "corpus in {}: {} source train, {} target train, {} target test",
                out.display(),
                c.source_train.len(),
                c.target_train.len(),
                c.target_test.len()
            );
        }
        Command::TrainGan {
            common,
            source,
            target,
            mode,
            conditioned,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                let m = match m {
                    Mode::Cycle => "cycle",
                    Mode::Forward => "forward",
                };
                extra.push(("gan.mode", m.to_string()));
            }
            if conditioned {
                extra.push(("gan.conditioned", "true".to_string()));
            }
            let cfg = common.resolve(&extra)?;
            let out = common.out_dir(&cfg, "gan");
            let (src, tgt) = (pipeline::open_manifest(&source)?, pipeline::open_manifest(&target)?);
            let run = pipeline::train_gan(&cfg, &src, &tgt, &out)?;
            println!(
                "translation models in {}: {} per-class, shared {}",
                out.display(),
                run.per_class.len(),
                if run.unconditioned.is_some() { "yes" } else { "no" }
            );
        }
        Command::Transform { common, gan, source } => {
            let cfg = common.resolve(&[])?;
            let out = common.out_dir(&cfg, "transformed");
            let translator = pipeline::load_translator(&gan)?;
            let m = pipeline::transform(&translator, &pipeline::open_manifest(&source)?, &out)?;
            cfg.write_resolved(&out)?;
            println!("{} images -> {}", m.len(), dagan::data::manifest_path(&out, pipeline::TRANSFORMED).display());
        }
        Command::TrainDetector {
            common,
            train,
            allow_target_labels,
        } => {
            let cfg = common.resolve(&[])?;
            let out = common.out_dir(&cfg, "detector");
            let m = pipeline::open_manifest(&train)?;
            let t = pipeline::train_detector_on(&cfg, &m, &out, allow_target_labels)?;
            println!(
                "detector in {} (final loss {:.4})",
                out.display(),
                t.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Evaluate {
            common,
            test,
            detector,
            detections,
        } => {
            let cfg = common.resolve(&[])?;
            let out = common.out_dir(&cfg, "eval");
            let test = pipeline::open_manifest(&test)?;
            let source = match (&detector, &detections) {
                (Some(d), _) => DetectionSource::Detector(d),
                (None, Some(f)) => DetectionSource::File(f),
                (None, None) => return Err(Error::Config("evaluate needs --detector or --detections".into())),
            };
            let report = pipeline::evaluate(&cfg, &test, source, &out)?;
            print!("{}", std::fs::read_to_string(out.join(pipeline::EVAL_JSON)).map_err(|e| Error::Io {
                path: out.join(pipeline::EVAL_JSON),
                source: e,
            })?);
            log::info!("mAP {:.4}", report.map);
        }
        Command::Compare {
            common,
            allow_target_labels,
        } => {
            let cfg = common.resolve(&[])?;
            let out = common.out_dir(&cfg, "compare");
            let table = pipeline::compare(&cfg, &out, allow_target_labels)?;
            print!("{}", table.to_markdown());
            println!("tables in {}", out.display());
        }
        Command::Report { inputs, out } => {
            let csv = pipeline::report(&inputs)?;
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn write(path: &Path, s: &str) -> dagan::Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| Error::Io {
            path: d.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, s).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
