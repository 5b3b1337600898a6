use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use disccap_core::generator::Variant;
use disccap_core::pipeline;
use disccap_core::synthworld::{DatasetConfig, Split};
use disccap_core::training::RewardKind;

/// Caption training with a discriminability objective on a synthetic scene
/// world.
#[derive(Parser)]
#[command(name = "disccap", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (scenes, features, references).
    GenData {
        /// Flat key=value config (n_train, n_val, n_test, d, noise_sigma, seed).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the joint-embedding retrieval model.
    TrainRetrieval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
    },
    /// MLE-pretrain a caption generator.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// fc or attn.
        #[arg(long)]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 5e-4)]
        lr: f64,
    },
    /// Self-critical fine-tuning from a pretrained generator.
    TrainRl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        /// cider, cider_disc or mle_disc.
        #[arg(long)]
        reward: String,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Frozen retrieval checkpoint (required for *_disc rewards).
        #[arg(long)]
        retrieval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        /// Defaults to the init checkpoint's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the distractor-pair evaluation set.
    BuildPairs {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        /// Pairs to keep (default 100 on val, 300 on test).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Full report: Acc, Acc-new, BLEU4, CIDEr, distinct, avg_len.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        retrieval: PathBuf,
        #[arg(long)]
        retrieval_new: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Side-by-side table over saved report files.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> disccap_core::Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => {
            let cfg = match config {
                Some(path) => DatasetConfig::from_kv(&std::fs::read_to_string(&path).map_err(
                    |e| disccap_core::Error::config(format!("cannot read {}: {e}", path.display())),
                )?)?,
                None => DatasetConfig::default(),
            };
            pipeline::gen_data(&cfg, &out)?;
            println!(
                "wrote {} ({} train / {} val / {} test images)",
                out.display(),
                cfg.n_train,
                cfg.n_val,
                cfg.n_test
            );
        }
        Cmd::TrainRetrieval {
            data,
            seed,
            out,
            epochs,
        } => {
            let sidecar = pipeline::train_retrieval_cmd(&data, seed, epochs, &out)?;
            println!("retrieval checkpoint {} ({})", out.display(), sidecar.id);
        }
        Cmd::Pretrain {
            data,
            variant,
            seed,
            out,
            epochs,
            batch,
            lr,
        } => {
            let sidecar = pipeline::pretrain_cmd(&data, variant, seed, epochs, batch, lr, &out)?;
            println!("generator checkpoint {} ({})", out.display(), sidecar.id);
        }
        Cmd::TrainRl {
            data,
            init,
            reward,
            lambda,
            retrieval,
            out,
            epochs,
            seed,
        } => {
            let kind: RewardKind = reward.parse()?;
            let sidecar = pipeline::train_rl_cmd(
                &data,
                &init,
                kind,
                lambda,
                retrieval.as_deref(),
                epochs,
                seed,
                &out,
            )?;
            println!("generator checkpoint {} ({})", out.display(), sidecar.id);
        }
        Cmd::BuildPairs {
            data,
            generator,
            n,
            out,
            split,
        } => {
            let kept = pipeline::build_pairs_cmd(&data, &generator, n, split, &out)?;
            println!("wrote {kept} pairs to {}", out.display());
        }
        Cmd::Eval {
            data,
            generator,
            pairs,
            retrieval,
            retrieval_new,
            out,
            split,
        } => {
            let report =
                pipeline::eval_cmd(&data, &generator, &pairs, &retrieval, &retrieval_new, split, &out)?;
            print!("{}", disccap_core::evalharness::render_table(&[report]));
        }
        Cmd::Report { inputs } => {
            print!("{}", pipeline::report_cmd(&inputs)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
