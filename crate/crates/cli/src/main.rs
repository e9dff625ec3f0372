use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use desk_cli::config::ExperimentConfig;
use desk_cli::pipeline::Run;
use desk_cli::{exit_code, report};
use desk_core::kernel::PostProcess;
use desk_core::siamese::TransferScheme;
use desk_core::{Error, Result};

#[derive(Parser)]
#[command(name = "desk", version, about = "Deep Siamese kernels for SVM and k-NN transfer learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// TConv_TFC, NConv_TFC or NConv_NFC.
    #[arg(long)]
    scheme: Option<TransferScheme>,
    /// psd, coincidence or none.
    #[arg(long)]
    post: Option<PostProcess>,
    /// Allow SVM fitting on grams that are not Mercer kernels.
    #[arg(long)]
    unsafe_raw_gram: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the non-target classifier that donates conv weights.
    Pretrain(Common),
    /// Train the similarity network and report pair AUC-ROC.
    TrainSiamese(Common),
    /// Compute raw train and test gram matrices.
    Gram(Common),
    /// Symmetrize and project (or co-incidence transform) the grams.
    Postprocess(Common),
    /// Select C on the validation carve and fit one-vs-one SVMs.
    FitSvm(Common),
    /// Test accuracy, confusion matrix and spectrum of the fitted SVM.
    Eval(Common),
    /// k-NN accuracy on the same grams.
    KnnEval(Common),
    /// Eigenvalues of the symmetrized training gram.
    Spectrum(Common),
    /// Tables from stored metrics of one or more run directories.
    Report {
        dir: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print a complete config with every default filled in.
    ConfigExample,
}

fn open(c: &Common) -> Result<Run> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(s) = c.scheme {
        cfg.siamese.scheme = s;
    }
    if let Some(p) = c.post {
        cfg.post = p;
    }
    if c.unsafe_raw_gram {
        cfg.svm.unsafe_raw_gram = true;
    }
    if let Some(d) = &c.out_dir {
        cfg.out_dir = d.clone();
    }
    Run::new(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let acc = open(&c)?.pretrain()?;
            println!("pretrain: validation accuracy {acc:.4}");
        }
        Command::TrainSiamese(c) => {
            let run = open(&c)?;
            let (val, test) = run.train_siamese()?;
            println!("train-siamese ({}): validation pair AUC {val:.4}, target test pair AUC {test:.4}", run.cfg.siamese.scheme);
        }
        Command::Gram(c) => open(&c)?.gram()?,
        Command::Postprocess(c) => open(&c)?.postprocess()?,
        Command::FitSvm(c) => {
            let model = open(&c)?.fit_svm()?;
            println!("fit-svm: C = {}, {} machines", model.c, model.machines.len());
        }
        Command::Eval(c) => println!("eval: SVM test accuracy {:.4}", open(&c)?.eval()?),
        Command::KnnEval(c) => println!("knn-eval: k-NN test accuracy {:.4}", open(&c)?.knn_eval()?),
        Command::Spectrum(c) => {
            let r = open(&c)?.spectrum()?;
            println!(
                "spectrum: {} positive, {} negative; positive mass {:.4}, negative mass {:.4}",
                r.positive_count, r.negative_count, r.positive_mass, r.negative_mass
            );
        }
        Command::Report { dir, out_dir } => {
            let (md, csv) = report::build(&dir)?;
            let out = out_dir.unwrap_or(dir);
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (name, text) in [("report.md", md), ("report.csv", csv)] {
                let p = out.join(name);
                std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            }
            println!("report: wrote {}", out.join("report.md").display());
        }
        Command::ConfigExample => println!("{}", serde_json::to_string_pretty(&ExperimentConfig::example())?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
