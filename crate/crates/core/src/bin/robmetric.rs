use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use robmetric::bounds::{bhc_simulate, bound_value, BoundMode, BoundQuery, Family};
use robmetric::error::{Error, Result};
use robmetric::exec::{stream_rng, Exec};
use robmetric::harness::{
    self, derive_seed, gen_synthetic, ExperimentConfig, SyntheticSpec,
};
use robmetric::io;
use robmetric::model::LossSpec;

#[derive(Parser)]
#[command(name = "robmetric", version, about = "Regularized metric learning with robustness certificates")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset as CSV.
    Gen {
        /// Take the synthetic spec from this experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a CSV dataset and write it as JSON.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, default_value = "fro")]
        family: Family,
        #[command(flatten)]
        solver: SolverArgs,
        /// rbf bandwidth for the kernel-rbf family.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Certify a trained model on its training CSV; writes a bound report.
    Audit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Probe CSV; drawn from the config's distribution when absent.
        #[arg(long)]
        probe: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a generalization bound.
    Bound {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        b: f64,
        #[arg(long)]
        k: u64,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        p_hat: Option<u64>,
        #[arg(long, default_value = "pair")]
        mode: BoundMode,
    },
    /// Simulate the multinomial deviation tail against its cap.
    Bhc {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        lambda: f64,
        /// Comma-separated cell probabilities (uniform when absent).
        #[arg(long, value_delimiter = ',')]
        mu: Option<Vec<f64>>,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gap-vs-n table as CSV.
    Curve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "50,100,200,400")]
        ladder: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-NN accuracy of a model.
    Knn {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Run a full experiment and write its reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run repetitions one at a time.
        #[arg(long)]
        sequential: bool,
    },
    /// Write the default experiment config.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 0.1)]
    c: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 1.0)]
    step0: f64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen { config, n, seed, out } => {
            let mut spec = match config {
                Some(p) => io::load_config(&p)?.synthetic,
                None => SyntheticSpec::default_task(200, 0),
            };
            if let Some(n) = n {
                spec.n = n;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            io::save_dataset(&gen_synthetic(&spec)?, &out)
        }
        Cmd::Train {
            data,
            radius,
            family,
            solver,
            sigma,
            out,
        } => {
            let ds = io::load_dataset(&data, radius)?;
            let mut cfg = ExperimentConfig::default_task();
            cfg.family = family;
            cfg.kernel_sigma = sigma;
            cfg.solver.c = solver.c;
            cfg.solver.max_iters = solver.max_iters;
            cfg.solver.step0 = solver.step0;
            cfg.solver.tol = solver.tol;
            let m = harness::train(&cfg, &ds)?;
            io::save_model(&m, &out)
        }
        Cmd::Audit {
            model,
            data,
            config,
            probe,
            seed,
            out,
        } => {
            let mut cfg = io::load_config(&config)?;
            let m = io::load_model(&model)?;
            if m.kind() != cfg.family.metric_kind() {
                return Err(Error::InvalidInput(format!(
                    "model kind {} does not match family {}",
                    m.kind().as_str(),
                    cfg.family
                )));
            }
            cfg.solver.c = m.c;
            let ds = io::load_dataset(&data, Some(cfg.synthetic.radius))?;
            let probe = match probe {
                Some(p) => io::read_examples(fs::File::open(p)?)?,
                None => cfg.synthetic.sample(&mut stream_rng(seed, 1), cfg.probe_size)?,
            };
            let mc_seed = derive_seed(seed, 2);
            let truth = if cfg.family.is_triplet() {
                harness::true_triplet_loss_estimate(&m, &cfg.synthetic, cfg.mc_samples, mc_seed)?
            } else {
                harness::true_loss_estimate(&m, &LossSpec::hinge(), &cfg.synthetic, cfg.mc_samples, mc_seed)?
            };
            let report = harness::certify(&cfg, &m, &ds, &probe, truth, seed)?;
            emit(&io::to_json(&report)?, out.as_deref())
        }
        Cmd::Bound {
            epsilon,
            b,
            k,
            n,
            delta,
            p_hat,
            mode,
        } => {
            let q = BoundQuery {
                epsilon,
                b,
                k,
                n,
                delta,
                p_hat,
                mode,
            };
            println!("{}", bound_value(&q)?);
            Ok(())
        }
        Cmd::Bhc {
            k,
            n,
            lambda,
            mu,
            trials,
            seed,
        } => {
            let mu = mu.unwrap_or_else(|| vec![1.0 / k as f64; k]);
            let r = bhc_simulate(k, &mu, n, lambda, trials, seed, Exec::default())?;
            emit(&io::to_json(&r)?, None)
        }
        Cmd::Curve { config, ladder, out } => {
            let cfg = io::load_config(&config)?;
            let rows = harness::gap_curve(&cfg, &ladder)?;
            let mut buf = Vec::new();
            {
                let mut w = csv::Writer::from_writer(&mut buf);
                for r in &rows {
                    w.serialize(r)?;
                }
                w.flush()?;
            }
            emit(&String::from_utf8_lossy(&buf), out.as_deref())
        }
        Cmd::Knn { model, train, test, k } => {
            let m = io::load_model(&model)?;
            let tr = io::load_dataset(&train, None)?;
            let te = io::load_dataset(&test, None)?;
            println!("{}", harness::knn_eval(&m, &tr, &te, k)?);
            Ok(())
        }
        Cmd::Run {
            config,
            out,
            sequential,
        } => {
            let cfg = io::load_config(&config)?;
            let exec = if sequential { Exec::Sequential } else { Exec::default() };
            let output = harness::run_experiment_with(&cfg, exec)?;
            emit(&io::to_json(&output)?, out.as_deref())
        }
        Cmd::InitConfig { out } => {
            emit(&io::config_to_toml(&ExperimentConfig::default_task())?, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
