//! Command-line surface: train, decode, bench, gen-data, transfer, viz.
//!
//! Every failure exits nonzero with a single `error: ...` line on stderr.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hydraformer_core::bench::{bench_rtf, BenchMode};
use hydraformer_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use hydraformer_core::config::{parse_plan_file, parse_run_config, RunConfig};
use hydraformer_core::data::{gen_synthetic, load_dataset, write_dataset, Dataset};
use hydraformer_core::eval::{decode_dataset, DecodeMode};
use hydraformer_core::model::ModelState;
use hydraformer_core::objectives::LossWeights;
use hydraformer_core::projection::project_params;
use hydraformer_core::training::{init_model, train, InitPlan};

#[derive(Parser)]
#[command(name = "hydraformer", version, about = "Multi-rate subsampling speech model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DecodeModeArg {
    Greedy,
    Rescore,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchModeArg {
    Full,
    Chunked,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and a dataset manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional initialization plan (weight transfer).
        #[arg(long)]
        init_plan: Option<PathBuf>,
    },
    /// Decode a manifest with a trained checkpoint.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        branch: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: DecodeModeArg,
        #[arg(long, default_value_t = 8)]
        beam: usize,
        /// CTC weight mixed into rescoring.
        #[arg(long, default_value_t = 0.3)]
        ctc_weight: f64,
        /// Right-to-left share of the rescoring decoder score.
        #[arg(long, default_value_t = 0.3)]
        r2l_weight: f64,
        /// Divide decoder scores by candidate length during rescoring.
        #[arg(long, default_value_t = false)]
        length_norm: bool,
    },
    /// Measure the real-time factor of one branch over a manifest.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        branch: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        mode: BenchModeArg,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        utts: usize,
        /// Total vocabulary size including blank/sos/eos.
        #[arg(long)]
        vocab: usize,
        #[arg(long, default_value_t = 12)]
        frames_per_token: usize,
        #[arg(long, default_value_t = 0.05)]
        noise_std: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Build a model from an initialization plan without training.
    Transfer {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project per-block encoder parameters of several checkpoints to 2-D.
    Viz {
        /// Comma-separated checkpoint paths.
        #[arg(long, value_delimiter = ',')]
        ckpts: Vec<PathBuf>,
        /// Parameter inside each encoder block, e.g. conv.depthwise.weight.
        #[arg(long)]
        select: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Exclusive ownership of a training output directory.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("output dir {} is locked by another run (remove {} if stale)",
                    dir.display(), path.display())
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_run_config(&text)?)
}

fn build_model(cfg: &RunConfig, plan: &InitPlan, seed: u64) -> Result<ModelState> {
    Ok(init_model(plan, cfg.frontend()?, cfg.encoder(), cfg.decoder(), seed)?)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out, data, init_plan } => {
            let cfg = load_config(&config)?;
            let dataset = load_dataset(&data)?;
            if dataset.vocab_size() != cfg.vocab_size {
                bail!(
                    "config vocab_size {} does not match dataset vocab {}",
                    cfg.vocab_size,
                    dataset.vocab_size()
                );
            }
            let plan = match &init_plan {
                None => InitPlan::default(),
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    parse_plan_file(&text, path.parent().unwrap_or(Path::new(".")))?.plan
                }
            };
            let _lock = DirLock::acquire(&out)?;
            let mut model = build_model(&cfg, &plan, cfg.seed)?;

            let metrics_path = out.join("metrics.log");
            let mut metrics = std::io::BufWriter::new(
                fs::File::create(&metrics_path)
                    .with_context(|| format!("creating {}", metrics_path.display()))?,
            );
            let interval = cfg.checkpoint_interval;
            let vocab = dataset.vocab.clone();
            let out_dir = out.clone();
            let records = train(&mut model, &dataset, &cfg.train(), |record, state| {
                writeln!(metrics, "{}", record.metrics_line())?;
                if interval > 0 && record.step % interval == 0 {
                    let path = out_dir.join(format!("step{:06}.ckpt", record.step));
                    save_checkpoint(
                        &path,
                        &Checkpoint::new(state.clone(), vocab.clone(), record.step as u64)?,
                    )?;
                }
                Ok(())
            })?;
            metrics.flush()?;

            let final_path = out.join("final.ckpt");
            save_checkpoint(
                &final_path,
                &Checkpoint::new(model, dataset.vocab.clone(), cfg.steps as u64)?,
            )?;
            let last = records.last().map(|r| r.loss_total);
            println!(
                "trained {} steps, final_loss={}, checkpoint={}",
                records.len(),
                last.map(|l| format!("{l:.6}")).unwrap_or_else(|| "n/a".to_string()),
                final_path.display()
            );
            Ok(())
        }

        Command::Decode { ckpt, branch, data, mode, beam, ctc_weight, r2l_weight, length_norm } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let dataset = load_dataset(&data)?;
            check_vocab(&ckpt, &dataset)?;
            let weights = LossWeights {
                r2l_weight: if ckpt.state.decoder.num_blocks_r2l == 0 { 0.0 } else { r2l_weight },
                ..LossWeights::default()
            };
            let mode = match mode {
                DecodeModeArg::Greedy => DecodeMode::Greedy,
                DecodeModeArg::Rescore => {
                    DecodeMode::Rescore { beam, length_normalize: length_norm }
                }
            };
            let (hyps, accuracy) =
                decode_dataset(&ckpt.state, branch, &dataset, mode, &weights, ctc_weight)?;
            for (i, (hyp, utt)) in hyps.iter().zip(&dataset.utterances).enumerate() {
                println!(
                    "utt{i}\t{}\t{}",
                    tokens_to_text(hyp.ids(), &dataset.vocab),
                    tokens_to_text(utt.target.ids(), &dataset.vocab)
                );
            }
            println!("token_accuracy {accuracy:.4}");
            Ok(())
        }

        Command::Bench { ckpt, branch, data, mode, reps } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let dataset = load_dataset(&data)?;
            let mode = match mode {
                BenchModeArg::Full => BenchMode::Full,
                BenchModeArg::Chunked => BenchMode::Chunked,
            };
            let report = bench_rtf(&ckpt.state, branch, &dataset, mode, reps)?;
            println!("{}", report.summary_line());
            Ok(())
        }

        Command::GenData { out, utts, vocab, frames_per_token, noise_std, seed } => {
            let dataset = gen_synthetic(utts, vocab, frames_per_token, noise_std, seed)?;
            let manifest = write_dataset(&dataset, &out)?;
            println!(
                "wrote {} utterances ({:.2} s audio) to {}",
                dataset.utterances.len(),
                dataset.audio_seconds(),
                manifest.display()
            );
            Ok(())
        }

        Command::Transfer { plan, out } => {
            let text =
                fs::read_to_string(&plan).with_context(|| format!("reading {}", plan.display()))?;
            let plan_file = parse_plan_file(&text, plan.parent().unwrap_or(Path::new(".")))?;
            let cfg = load_config(&plan_file.config_path)?;
            let model = build_model(&cfg, &plan_file.plan, plan_file.seed)?;
            save_checkpoint(&out, &Checkpoint::with_default_vocab(model, 0))?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Command::Viz { ckpts, select, out } => {
            let output = project_params(&ckpts, &select, &out)?;
            println!("wrote {} and {}", output.csv_path.display(), output.svg_path.display());
            Ok(())
        }
    }
}

fn check_vocab(ckpt: &Checkpoint, dataset: &Dataset) -> Result<()> {
    if ckpt.state.decoder.vocab_size != dataset.vocab_size() {
        bail!(
            "checkpoint vocab {} does not match dataset vocab {}",
            ckpt.state.decoder.vocab_size,
            dataset.vocab_size()
        );
    }
    Ok(())
}

fn tokens_to_text(ids: &[usize], vocab: &[String]) -> String {
    if ids.is_empty() {
        return "<empty>".to_string();
    }
    ids.iter()
        .map(|&i| vocab.get(i).map(|s| s.as_str()).unwrap_or("<bad>"))
        .collect::<Vec<_>>()
        .join(" ")
}
