use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wmnet_core::autograd::Graph;
use wmnet_core::params::ParamStore;
use wmnet_core::wavelet;
use wmnet_core::wunet::{WuNet, WuNetConfig};
use wmnet_harness::checkpoint::Checkpoint;
use wmnet_harness::data::{self, Split};
use wmnet_harness::experiments::{ablate, sweep_w};
use wmnet_harness::model::{core_param_count, WUNET_ATTENTION_DIM};
use wmnet_harness::plot::plot_log;
use wmnet_harness::train::{append_jsonl, evaluate, run_training, PredictionSource, Trained};
use wmnet_harness::{DatasetSpec, Error, ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "wmnet", version, about = "Misalignment-aware visible-infrared detection on synthetic pairs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render train/val splits as PNG pairs plus JSONL annotations.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes model.ckpt, train.jsonl and metrics.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a regenerated split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// JSONL log to append to (default: metrics.jsonl next to the checkpoint).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Debug hook: score ground truth pushed through the decoder.
        #[arg(long)]
        force_gt: bool,
    },
    /// Seven-row component ablation.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// W1 x W2 initial-value sweep (ten rows).
    SweepW {
        #[arg(long)]
        config: PathBuf,
    },
    /// Line chart of a JSONL log.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        field: Option<String>,
    },
    /// Parameter counts per component for a config.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    Wavelet {
        #[command(subcommand)]
        cmd: WaveletCmd,
    },
    Wunet {
        #[command(subcommand)]
        cmd: WunetCmd,
    },
}

#[derive(Subcommand)]
enum WaveletCmd {
    /// Decompose and reconstruct an image; print the errors.
    Roundtrip { image: PathBuf },
}

#[derive(Subcommand)]
enum WunetCmd {
    /// Enhance an RGB image with infrared guidance.
    Enhance {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take WU-Net weights from this checkpoint instead of a fresh init.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { spec, out } => {
            let s = DatasetSpec::load(&spec)?;
            data::write_dataset(&s, &out)?;
            println!("wrote {} train / {} val pairs to {}", s.train_size, s.val_size, out.display());
        }
        Cmd::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (_, report) = run_training(&cfg)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Cmd::Eval {
            ckpt,
            split,
            log,
            force_gt,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let source = if force_gt {
                PredictionSource::ForcedGroundTruth
            } else {
                PredictionSource::Model
            };
            let report = evaluate(&ck, Split::parse(&split)?, source)?;
            let log = log.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("metrics.jsonl"));
            append_jsonl(&log, &report)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Cmd::Ablate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let t = ablate(&cfg)?;
            t.write(&cfg.out_dir, "ablation")?;
            print!("{}", t.to_markdown());
        }
        Cmd::SweepW { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let t = sweep_w(&cfg)?;
            t.write(&cfg.out_dir, "w_sweep")?;
            print!("{}", t.to_markdown());
        }
        Cmd::Plot { log, out, field } => {
            let f = plot_log(&log, &out, field.as_deref())?;
            println!("plotted {f} to {}", out.display());
        }
        Cmd::Params { config } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let t = Trained::init(&cfg)?;
            println!("config {} ({})", cfg.hash(), cfg.flags.code());
            for prefix in ["wunet", "ir.", "rgb.", "maf", "head"] {
                println!("{prefix:<8} {}", t.store.num_scalars_with_prefix(prefix));
            }
            println!("total    {}", t.num_params());
            println!("core audit at stage widths (cfm vs cross-attention):");
            for w in cfg.widths {
                println!("  C={w:<3} {} vs {}", core_param_count(w, true), core_param_count(w, false));
            }
        }
        Cmd::Wavelet {
            cmd: WaveletCmd::Roundtrip { image },
        } => {
            let x = data::load_png(&image, 3)?.cast::<f64>();
            let s = wavelet::dwt2(&x)?;
            let y = wavelet::idwt2(&s)?;
            let (h, w, _) = x.hwc()?;
            let err = wavelet::crop(&y, h, w)?.max_abs_diff(&x);
            let e_in = wavelet::pad_to_even(&x)?.sum_sq();
            let e_out = wavelet::stack_subbands(&s).sum_sq();
            println!("max_abs_error {err:.3e}");
            println!("energy_relative_error {:.3e}", (e_out - e_in).abs() / e_in.max(f64::MIN_POSITIVE));
        }
        Cmd::Wunet {
            cmd: WunetCmd::Enhance { rgb, ir, out, ckpt },
        } => {
            let rgb = data::load_png(&rgb, 3)?;
            let ir = data::load_png(&ir, 1)?;
            let mut store = ParamStore::<f32>::new();
            let wu = match ckpt {
                Some(p) => {
                    let t = Trained::from_checkpoint(&Checkpoint::load(&p)?)?;
                    if t.model.wunet.is_none() {
                        return Err(Error::Config("checkpoint was trained without WU-Net".into()));
                    }
                    store = t.store;
                    t.model.wunet.unwrap()
                }
                None => {
                    let cfg = WuNetConfig {
                        levels: 2,
                        channels: 3,
                        attention_dim: WUNET_ATTENTION_DIM,
                    };
                    WuNet::new(&mut store, "wunet", cfg, &mut ChaCha8Rng::seed_from_u64(0))?
                }
            };
            let g = Graph::with_params(&store);
            let y = wu.forward(&g, g.constant(rgb), g.constant(ir))?;
            data::save_png(&g.value(y), &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
