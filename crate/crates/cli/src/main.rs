//! `hxfer`: data generation, training, evaluation and experiment grids for
//! similarity-based transfer between feed entrances.
//!
//! Stages communicate through files in `--out-dir`:
//!
//! ```text
//! gen-data      -> source.jsonl, target.jsonl
//! train-nsr     -> nsr_source.json, nsr_target.json
//! train-source  -> agent_source.json
//! train-target  -> agent_target.json, train_log.csv
//! evaluate      -> eval.csv
//! grid          -> grid.csv
//! sweep         -> sweep_<param>.csv
//! ```

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hxfer::agent::QAgent;
use hxfer::config::ExperimentConfig;
use hxfer::dataset::Dataset;
use hxfer::eval::{self, build_datasets, cell_config, evaluate, SweepParam};
use hxfer::nsr::NsrModel;
use hxfer::rng::{derive_seed, tags};
use hxfer::similarity::BetaDirection;
use hxfer::trainer::{self, Method, Pretrained};

#[derive(Parser)]
#[command(name = "hxfer", version, about = "Offline transfer of ad-allocation policies between feed entrances")]
struct Cli {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for single-run stages and the first seed of grids and sweeps.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(flatten)]
    similarity: SimilarityFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SimilarityFlags {
    /// Instance-filter threshold on the similarity weight.
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    beta_min: Option<usize>,
    #[arg(long, global = true)]
    beta_max: Option<usize>,
    /// Keep all source samples and scale their loss by the weight instead of filtering.
    #[arg(long, global = true)]
    weighted_instances: bool,
    #[arg(long, global = true, value_enum)]
    beta_direction: Option<Direction>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    Narrowing,
    Widening,
}

#[derive(Subcommand)]
enum Command {
    /// Log uniform-policy datasets for both entrances.
    GenData,
    /// Train the source and target N-step-return models.
    TrainNsr,
    /// Train the source agent with DQN on source data.
    TrainSource,
    /// Train the target agent with the chosen method.
    TrainTarget {
        #[arg(long)]
        method: Option<Method>,
    },
    /// Roll out an agent greedily in the target entrance.
    Evaluate {
        /// Agent checkpoint; defaults to `<out-dir>/agent_target.json`.
        #[arg(long)]
        agent: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train and evaluate several methods over several seeds.
    Grid {
        /// Comma-separated method names; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        #[arg(long)]
        n_seeds: Option<usize>,
    },
    /// Vary tau or N for the configured method.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        n_seeds: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.base_seed = seed;
    }
    let sim = &mut cfg.transfer.similarity;
    let flags = &cli.similarity;
    if let Some(t) = flags.tau {
        sim.tau = t;
    }
    if let Some(b) = flags.beta_min {
        sim.beta_min = b;
    }
    if let Some(b) = flags.beta_max {
        sim.beta_max = b;
    }
    if flags.weighted_instances {
        sim.weighted_mode = true;
    }
    if let Some(d) = flags.beta_direction {
        sim.beta_direction = match d {
            Direction::Narrowing => BetaDirection::Narrowing,
            Direction::Widening => BetaDirection::Widening,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    let out = cli.out_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let seed = cfg.base_seed;

    match cli.command {
        Command::GenData => {
            let data = build_datasets(&cfg, seed)?;
            data.source.save(out.join("source.jsonl"))?;
            data.target.save(out.join("target.jsonl"))?;
            println!(
                "source: {} transitions, target: {} transitions (hash {})",
                data.source.len(),
                data.target.len(),
                data.hash()
            );
        }
        Command::TrainNsr => {
            let (ds_s, ds_t) = load_datasets(&out)?;
            let tc = cell_config(&cfg, cfg.transfer.method, seed);
            let (s, t) = trainer::train_nsr_pair(&ds_s, &ds_t, &tc)?;
            s.save(out.join("nsr_source.json"))?;
            t.save(out.join("nsr_target.json"))?;
            println!("wrote nsr_source.json, nsr_target.json");
        }
        Command::TrainSource => {
            let (ds_s, _) = load_datasets(&out)?;
            let tc = cell_config(&cfg, cfg.transfer.method, seed);
            let agent = trainer::train_source_agent(&ds_s, &tc)?;
            agent.save(out.join("agent_source.json"))?;
            println!("wrote agent_source.json");
        }
        Command::TrainTarget { method } => {
            let method = method.unwrap_or(cfg.transfer.method);
            let (ds_s, ds_t) = load_datasets(&out)?;
            let tc = cell_config(&cfg, method, seed);
            let pre = if method.needs_pretraining() {
                Some(Pretrained {
                    nsr_source: NsrModel::load(out.join("nsr_source.json")).context("run train-nsr first")?,
                    nsr_target: NsrModel::load(out.join("nsr_target.json")).context("run train-nsr first")?,
                    agent_source: QAgent::load(out.join("agent_source.json")).context("run train-source first")?,
                })
            } else {
                None
            };
            let outcome = trainer::train_target(&ds_s, &ds_t, pre.as_ref(), &tc)?;
            outcome.agent.save(out.join("agent_target.json"))?;
            trainer::write_log_csv(&outcome.log, create(&out.join("train_log.csv"))?)?;
            println!(
                "{method}: {} updates on {} transitions ({} from source)",
                outcome.iterations_run,
                outcome.merged.len(),
                outcome.source_kept
            );
        }
        Command::Evaluate { agent, episodes } => {
            let path = agent.unwrap_or_else(|| out.join("agent_target.json"));
            let agent = QAgent::load(&path).with_context(|| format!("loading agent {}", path.display()))?;
            let n = episodes.unwrap_or(cfg.eval_episodes);
            let m = evaluate(&agent, &cfg.eval_env()?, n, derive_seed(seed, tags::EVAL))?;
            let mut w = csv::Writer::from_writer(create(&out.join("eval.csv"))?);
            w.write_record(["agent", "episodes", "seed", "r_ad", "r_fee"])?;
            w.write_record([path.display().to_string(), n.to_string(), seed.to_string(), m.r_ad.to_string(), m.r_fee.to_string()])?;
            w.flush()?;
            println!("R_ad = {:.6}, R_fee = {:.6}", m.r_ad, m.r_fee);
        }
        Command::Grid { methods, n_seeds } => {
            let methods = if methods.is_empty() { cfg.methods.clone() } else { methods };
            let reports = eval::run_grid(&methods, &cfg, n_seeds.unwrap_or(cfg.n_seeds))?;
            eval::write_report_csv(&reports, create(&out.join("grid.csv"))?)?;
            let mut failed = false;
            for r in &reports {
                match &r.failure {
                    None => println!("{:<14} R_ad {:.4}  R_fee {:.4}", r.method.name(), r.r_ad_mean(), r.r_fee_mean()),
                    Some(e) => {
                        failed = true;
                        println!("{:<14} FAILED: {e}", r.method.name());
                    }
                }
            }
            if failed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Sweep { param, values, method, n_seeds } => {
            let mut cfg = cfg;
            if let Some(m) = method {
                cfg.transfer.method = m;
            }
            let rows = eval::sweep(param, &values, &cfg, n_seeds.unwrap_or(cfg.n_seeds))?;
            let name = match param {
                SweepParam::Tau => "tau",
                SweepParam::N => "n",
            };
            eval::write_sweep_csv(&rows, create(&out.join(format!("sweep_{name}.csv")))?)?;
            let mut failed = false;
            for r in &rows {
                failed |= r.status != "ok";
                println!("{}={:<8} {}  R_ad {:.4}  R_fee {:.4}", r.param, r.value, r.status, r.r_ad_mean, r.r_fee_mean);
            }
            if failed {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_datasets(out: &Path) -> Result<(Dataset, Dataset)> {
    let load = |name: &str| {
        let p = out.join(name);
        if !p.exists() {
            bail!("{} not found; run gen-data first", p.display());
        }
        Dataset::load(&p).with_context(|| format!("reading {}", p.display()))
    };
    Ok((load("source.jsonl")?, load("target.jsonl")?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}
