use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use volt::cli::{self, DiagnoseArgs, EvalArgs, EvalSplit, ThresholdSpec};
use volt::config::{RunConfig, TrainSplit, Variant};
use volt::error::{Result, VoltError};

#[derive(Parser)]
#[command(
    name = "volt",
    about = "Multi-view 3D voxel reconstruction with a volume transformer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model variant: volt (vanilla) or evolt (divergence-enhanced).
    #[arg(long)]
    variant: Option<String>,
}

impl Common {
    /// defaults → preset → config file → flags.
    fn resolve(&self, preset: Option<&str>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(name) = preset {
            cfg.apply_preset(name)?;
        }
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(variant) = &self.variant {
            cfg.variant = Variant::parse(variant)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        objects: Option<usize>,
        /// Views rendered per object (evenly spaced azimuths).
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        g: Option<usize>,
        /// Silhouette raster size.
        #[arg(long)]
        p: Option<usize>,
        /// Embedding width written to the dataset.
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        embed_seed: Option<u64>,
        /// Write into an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Named preset: overfit8 or trend64.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        dk: Option<usize>,
        #[arg(long)]
        ffn: Option<usize>,
        #[arg(long)]
        lenc: Option<usize>,
        #[arg(long)]
        ldec: Option<usize>,
        #[arg(long)]
        g: Option<usize>,
        #[arg(long)]
        s: Option<usize>,
        /// Which objects to train on: train (80% split) or all.
        #[arg(long)]
        split: Option<String>,
    },
    /// Evaluate a checkpoint: IoU and F-score@1% over view counts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated view counts, e.g. "2,8,24" (azimuth prefixes).
        #[arg(long)]
        views: Option<String>,
        /// "sweep" or comma-separated thresholds, e.g. "0.5".
        #[arg(long, default_value = "sweep")]
        thresholds: String,
        /// Objects to evaluate: train, val, or all.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Export attention matrices, view-divergence D, and KDE curves.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of objects (manifest order) to trace.
        #[arg(long, default_value_t = 20)]
        objects: usize,
        /// Views per object; defaults to the dataset's view count.
        #[arg(long)]
        views: Option<usize>,
    },
    /// Check analytic gradients against central differences (micro model).
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Number of views in the probe sample.
        #[arg(long, default_value_t = 2)]
        views: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Maximum acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn parse_view_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| VoltError::config(format!("bad view count `{v}`")))
        })
        .collect()
}

fn init_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("VOLT_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| VoltError::config(format!("VOLT_THREADS must be an integer, got `{raw}`")))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| VoltError::config(format!("thread pool: {e}")))?;
        }
    }
    Ok(())
}

fn run() -> Result<()> {
    init_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Gen {
            common,
            out,
            objects,
            views,
            g,
            p,
            d,
            embed_seed,
            force,
        } => {
            let mut cfg = common.resolve(None)?;
            if let Some(v) = objects {
                cfg.objects = v;
            }
            if let Some(v) = views {
                cfg.views = v;
            }
            if let Some(v) = g {
                cfg.g = v;
            }
            if let Some(v) = p {
                cfg.p = v;
            }
            if let Some(v) = d {
                cfg.d = v;
            }
            if let Some(v) = embed_seed {
                cfg.embed_seed = v;
            }
            cli::cmd_gen(&cfg, &out, force)?;
        }
        Command::Train {
            common,
            data,
            out,
            preset,
            steps,
            lr,
            batch,
            weight_decay,
            d,
            heads,
            dk,
            ffn,
            lenc,
            ldec,
            g,
            s,
            split,
        } => {
            let mut cfg = common.resolve(preset.as_deref())?;
            if let Some(v) = steps {
                cfg.steps = v;
            }
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if let Some(v) = batch {
                cfg.batch_size = v;
            }
            if let Some(v) = weight_decay {
                cfg.weight_decay = v;
            }
            if let Some(v) = d {
                cfg.d = v;
            }
            if let Some(v) = heads {
                cfg.heads = v;
            }
            if let Some(v) = dk {
                cfg.d_k = v;
            }
            if let Some(v) = ffn {
                cfg.ffn_hidden = v;
            }
            if let Some(v) = lenc {
                cfg.l_enc = v;
            }
            if let Some(v) = ldec {
                cfg.l_dec = v;
            }
            if let Some(v) = g {
                cfg.g = v;
            }
            if let Some(v) = s {
                cfg.s = v;
            }
            if let Some(v) = &split {
                cfg.train_split = TrainSplit::parse(v)?;
            }
            cli::cmd_train(&cfg, &data, &out)?;
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            views,
            thresholds,
            split,
        } => {
            let args = EvalArgs {
                views: match views {
                    Some(text) => parse_view_list(&text)?,
                    None => Vec::new(),
                },
                thresholds: ThresholdSpec::parse(&thresholds)?,
                split: EvalSplit::parse(&split)?,
            };
            cli::cmd_eval(&checkpoint, &data, &out, &args)?;
        }
        Command::Diagnose {
            checkpoint,
            data,
            out,
            objects,
            views,
        } => {
            cli::cmd_diagnose(&checkpoint, &data, &out, &DiagnoseArgs { objects, views })?;
        }
        Command::GradCheck {
            common,
            views,
            eps,
            tol,
        } => {
            let cfg = common.resolve(None)?;
            let report = cli::cmd_grad_check(cfg.variant, cfg.seed, views, eps)?;
            if report.max_rel_err >= tol {
                return Err(VoltError::numeric(format!(
                    "gradient check failed: {:.3e} >= tolerance {tol:.1e}",
                    report.max_rel_err
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
