//! Rollout evaluation and experiment harness: method grids and
//! hyperparameter sweeps, reported as CSV.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::QAgent;
use crate::config::ExperimentConfig;
use crate::dataset::{annotate_nsr, generate, BehaviorPolicy, Dataset};
use crate::env::FeedEnv;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, tags};
use crate::trainer::{pretrain, train_target, Method, Pretrained, TransferConfig};

/// Mean per-episode ads revenue and service fee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r_ad: f64,
    pub r_fee: f64,
}

/// Greedy rollouts of `agent`; episode `i` uses a stream derived from `(seed, i)`.
pub fn evaluate(agent: &QAgent, env: &FeedEnv, n_episodes: usize, seed: u64) -> Result<Metrics> {
    if n_episodes == 0 {
        return Err(Error::Usage("n_episodes must be at least 1".into()));
    }
    if agent.n_actions() != env.n_actions() {
        return Err(Error::Usage("agent and environment disagree on the action count".into()));
    }
    let per_episode = (0..n_episodes as u64)
        .into_par_iter()
        .map(|ep| {
            let mut rng = rng_from_seed(derive_seed(seed, ep));
            let mut state = env.reset(&mut rng);
            let (mut ad, mut fee) = (0.0, 0.0);
            loop {
                let action = agent.act(&env.featurize(&state), 0.0, &mut rng);
                let out = env.step(&state, action, &mut rng)?;
                ad += out.r_ad;
                fee += out.r_fee;
                if out.is_terminal() {
                    return Ok((ad, fee));
                }
                state = out.next_state;
            }
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let n = n_episodes as f64;
    Ok(Metrics {
        r_ad: per_episode.iter().map(|p| p.0).sum::<f64>() / n,
        r_fee: per_episode.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

/// Datasets shared by every method for one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub source: Dataset,
    pub target: Dataset,
}

impl SeedData {
    pub fn hash(&self) -> String {
        let s = self.source.content_hash();
        let t = self.target.content_hash();
        format!("{}:{}", &s[..16], &t[..16])
    }
}

/// Logs uniform-policy datasets for both entrances, NSR-annotated.
pub fn build_datasets(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let (source, target) = build_raw_datasets(cfg, seed)?;
    let t = &cfg.transfer;
    Ok(SeedData {
        seed,
        source: annotate_nsr(source, t.nsr_horizon, t.gamma)?,
        target: annotate_nsr(target, t.nsr_horizon, t.gamma)?,
    })
}

fn build_raw_datasets(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let source = generate(&cfg.source_env()?, BehaviorPolicy::Uniform, cfg.n_source_requests, derive_seed(seed, tags::SOURCE_DATA))?;
    let target = generate(&cfg.target_env()?, BehaviorPolicy::Uniform, cfg.n_target_requests, derive_seed(seed, tags::TARGET_DATA))?;
    Ok((source, target))
}

/// Transfer config for one grid cell.
pub fn cell_config(cfg: &ExperimentConfig, method: Method, seed: u64) -> TransferConfig {
    TransferConfig { method, seed, ..cfg.transfer.clone() }
}

/// Trains `method` on one seed's data and evaluates it on the target entrance.
pub fn run_cell(cfg: &ExperimentConfig, data: &SeedData, pre: Option<&Pretrained>, method: Method) -> Result<Metrics> {
    let tc = cell_config(cfg, method, data.seed);
    let outcome = train_target(&data.source, &data.target, pre, &tc)?;
    evaluate(&outcome.agent, &cfg.eval_env()?, cfg.eval_episodes, derive_seed(data.seed, tags::EVAL))
}

/// Pre-trains the models shared by all transfer methods of one seed.
pub fn pretrain_seed(cfg: &ExperimentConfig, data: &SeedData) -> Result<Pretrained> {
    pretrain(&data.source, &data.target, &cfg_for_pretrain(cfg, data.seed))
}

fn cfg_for_pretrain(cfg: &ExperimentConfig, seed: u64) -> TransferConfig {
    cell_config(cfg, Method::Shtaa, seed)
}

/// One row of a method grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub method: Method,
    /// `None` when every seed succeeded.
    pub failure: Option<String>,
    pub seeds: Vec<u64>,
    pub r_ad: Vec<f64>,
    pub r_fee: Vec<f64>,
    pub baseline: Method,
    pub r_ad_improvement: Option<f64>,
    pub r_fee_improvement: Option<f64>,
    pub dataset_hashes: Vec<String>,
    pub config_hash: String,
}

impl ExperimentReport {
    pub fn r_ad_mean(&self) -> f64 {
        mean_std(&self.r_ad).0
    }

    pub fn r_fee_mean(&self) -> f64 {
        mean_std(&self.r_fee).0
    }

    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }
}

/// Sample mean and (n-1) standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Outcome of one method on one seed.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub dataset_hash: String,
    pub result: std::result::Result<Metrics, String>,
}

/// Trains and evaluates every method on identical per-seed datasets.
/// A failing cell marks its row failed; the grid keeps going.
pub fn run_grid(methods: &[Method], cfg: &ExperimentConfig, n_seeds: usize) -> Result<Vec<ExperimentReport>> {
    if methods.is_empty() {
        return Err(Error::Usage("grid needs at least one method".into()));
    }
    cfg.validate()?;
    let cfg = ExperimentConfig { n_seeds, ..cfg.clone() };
    let cells: Vec<CellResult> = cfg
        .seeds()
        .into_par_iter()
        .map(|seed| grid_seed(methods, &cfg, seed))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(assemble(methods, &cfg, &cells))
}

fn grid_seed(methods: &[Method], cfg: &ExperimentConfig, seed: u64) -> Result<Vec<CellResult>> {
    let data = build_datasets(cfg, seed)?;
    let hash = data.hash();
    let pre = if methods.iter().any(|m| m.needs_pretraining()) {
        Some(pretrain_seed(cfg, &data).map_err(|e| e.to_string()))
    } else {
        None
    };
    Ok(methods
        .par_iter()
        .map(|&method| {
            let result = match (&pre, method.needs_pretraining()) {
                (Some(Err(e)), true) => Err(format!("pre-training failed: {e}")),
                (Some(Ok(p)), true) => run_cell(cfg, &data, Some(p), method).map_err(|e| e.to_string()),
                _ => run_cell(cfg, &data, None, method).map_err(|e| e.to_string()),
            };
            CellResult { method, seed, dataset_hash: hash.clone(), result }
        })
        .collect())
}

/// Groups cell results into one report per method.
pub fn assemble(methods: &[Method], cfg: &ExperimentConfig, cells: &[CellResult]) -> Vec<ExperimentReport> {
    let config_hash = cfg.hash();
    let mut reports: Vec<ExperimentReport> = methods
        .iter()
        .map(|&method| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.method == method).collect();
            let failures: Vec<String> =
                mine.iter().filter_map(|c| c.result.as_ref().err().map(|e| format!("seed {}: {e}", c.seed))).collect();
            let ok: Vec<(&CellResult, Metrics)> = mine.iter().filter_map(|c| c.result.as_ref().ok().map(|m| (*c, *m))).collect();
            ExperimentReport {
                method,
                failure: (!failures.is_empty()).then(|| failures.join("; ")),
                seeds: ok.iter().map(|(c, _)| c.seed).collect(),
                r_ad: ok.iter().map(|(_, m)| m.r_ad).collect(),
                r_fee: ok.iter().map(|(_, m)| m.r_fee).collect(),
                baseline: cfg.baseline,
                r_ad_improvement: None,
                r_fee_improvement: None,
                dataset_hashes: mine.iter().map(|c| c.dataset_hash.clone()).collect(),
                config_hash: config_hash.clone(),
            }
        })
        .collect();
    if let Some(base) = reports.iter().find(|r| r.method == cfg.baseline && r.is_ok()).cloned() {
        let (ad, fee) = (base.r_ad_mean(), base.r_fee_mean());
        for r in &mut reports {
            if !r.r_ad.is_empty() {
                r.r_ad_improvement = Some((r.r_ad_mean() - ad) / ad);
                r.r_fee_improvement = Some((r.r_fee_mean() - fee) / fee);
            }
        }
    }
    reports
}

#[derive(Debug, Serialize)]
struct ReportCsvRow<'a> {
    method: &'a str,
    status: String,
    n_seeds: usize,
    seeds: String,
    r_ad_mean: f64,
    r_ad_std: f64,
    r_fee_mean: f64,
    r_fee_std: f64,
    baseline: &'a str,
    r_ad_improvement: Option<f64>,
    r_fee_improvement: Option<f64>,
    r_ad_per_seed: String,
    r_fee_per_seed: String,
    dataset_hashes: String,
    config_hash: &'a str,
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

pub fn write_report_csv<W: std::io::Write>(reports: &[ExperimentReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        let (ad_m, ad_s) = mean_std(&r.r_ad);
        let (fee_m, fee_s) = mean_std(&r.r_fee);
        w.serialize(ReportCsvRow {
            method: r.method.name(),
            status: r.failure.as_ref().map_or_else(|| "ok".to_string(), |f| format!("failed: {f}")),
            n_seeds: r.r_ad.len(),
            seeds: join(&r.seeds),
            r_ad_mean: ad_m,
            r_ad_std: ad_s,
            r_fee_mean: fee_m,
            r_fee_std: fee_s,
            baseline: r.baseline.name(),
            r_ad_improvement: r.r_ad_improvement,
            r_fee_improvement: r.r_fee_improvement,
            r_ad_per_seed: join(&r.r_ad),
            r_fee_per_seed: join(&r.r_fee),
            dataset_hashes: r.dataset_hashes.join(";"),
            config_hash: &r.config_hash,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Instance-filter threshold.
    Tau,
    /// N-step-return horizon.
    N,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(SweepParam::Tau),
            "N" | "n" => Ok(SweepParam::N),
            other => Err(Error::Config(format!("unknown sweep parameter '{other}' (expected tau or N)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub status: String,
    pub n_seeds: usize,
    pub r_ad_mean: f64,
    pub r_ad_std: f64,
    pub r_fee_mean: f64,
    pub r_fee_std: f64,
}

/// One transfer run per (value, seed) with the method from `cfg.transfer`.
pub fn sweep(param: SweepParam, values: &[f64], cfg: &ExperimentConfig, n_seeds: usize) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    if param == SweepParam::N && values.iter().any(|v| *v < 1.0 || v.fract() != 0.0) {
        return Err(Error::Config("N values must be positive integers".into()));
    }
    cfg.validate()?;
    let cfg = ExperimentConfig { n_seeds, ..cfg.clone() };
    let per_seed: Vec<Vec<std::result::Result<Metrics, String>>> = cfg
        .seeds()
        .into_par_iter()
        .map(|seed| sweep_seed(param, values, &cfg, seed))
        .collect::<Result<_>>()?;
    let name = match param {
        SweepParam::Tau => "tau",
        SweepParam::N => "N",
    };
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let ok: Vec<Metrics> = per_seed.iter().filter_map(|s| s[i].as_ref().ok().copied()).collect();
            let errs: Vec<&String> = per_seed.iter().filter_map(|s| s[i].as_ref().err()).collect();
            let (ad_m, ad_s) = mean_std(&ok.iter().map(|m| m.r_ad).collect::<Vec<_>>());
            let (fee_m, fee_s) = mean_std(&ok.iter().map(|m| m.r_fee).collect::<Vec<_>>());
            SweepRow {
                param: name.into(),
                value,
                status: if errs.is_empty() { "ok".into() } else { format!("failed: {}", errs[0]) },
                n_seeds: ok.len(),
                r_ad_mean: ad_m,
                r_ad_std: ad_s,
                r_fee_mean: fee_m,
                r_fee_std: fee_s,
            }
        })
        .collect())
}

fn sweep_seed(param: SweepParam, values: &[f64], cfg: &ExperimentConfig, seed: u64) -> Result<Vec<std::result::Result<Metrics, String>>> {
    match param {
        SweepParam::Tau => {
            let data = build_datasets(cfg, seed)?;
            let pre = if cfg.transfer.method.needs_pretraining() {
                match pretrain_seed(cfg, &data) {
                    Ok(p) => Some(p),
                    Err(e) => return Ok(values.iter().map(|_| Err(format!("pre-training failed: {e}"))).collect()),
                }
            } else {
                None
            };
            Ok(values
                .par_iter()
                .map(|&tau| {
                    let mut c = cfg.clone();
                    c.transfer.similarity.tau = tau;
                    run_cell(&c, &data, pre.as_ref(), c.transfer.method).map_err(|e| e.to_string())
                })
                .collect())
        }
        SweepParam::N => {
            let (source, target) = build_raw_datasets(cfg, seed)?;
            Ok(values
                .par_iter()
                .map(|&n| {
                    let mut c = cfg.clone();
                    c.transfer.nsr_horizon = n as usize;
                    let t = &c.transfer;
                    let data = SeedData {
                        seed,
                        source: annotate_nsr(source.clone(), t.nsr_horizon, t.gamma)?,
                        target: annotate_nsr(target.clone(), t.nsr_horizon, t.gamma)?,
                    };
                    let pre = if t.method.needs_pretraining() { Some(pretrain_seed(&c, &data)?) } else { None };
                    run_cell(&c, &data, pre.as_ref(), t.method)
                })
                .map(|r| r.map_err(|e| e.to_string()))
                .collect())
        }
    }
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn report_improvement_and_aggregate() {
        let cfg = ExperimentConfig::default();
        let cell = |method, seed, ad: f64| CellResult {
            method,
            seed,
            dataset_hash: format!("h{seed}"),
            result: Ok(Metrics { r_ad: ad, r_fee: 1.0 }),
        };
        let cells = vec![
            cell(Method::NoTransfer, 0, 1.0),
            cell(Method::NoTransfer, 1, 3.0),
            cell(Method::Shtaa, 0, 2.2),
            cell(Method::Shtaa, 1, 2.2),
            CellResult { method: Method::NoAc, seed: 0, dataset_hash: "h0".into(), result: Err("boom".into()) },
        ];
        let reports = assemble(&[Method::NoTransfer, Method::Shtaa, Method::NoAc], &cfg, &cells);
        assert_eq!(reports[0].r_ad_mean(), 2.0);
        assert!((reports[1].r_ad_improvement.unwrap() - 0.1).abs() < 1e-12);
        assert!(!reports[2].is_ok());
        assert_eq!(reports[1].dataset_hashes, reports[0].dataset_hashes);
        let mut buf = Vec::new();
        write_report_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("failed: seed 0: boom"));
    }

    #[test]
    fn sweep_param_parsing() {
        assert_eq!("tau".parse::<SweepParam>().unwrap(), SweepParam::Tau);
        assert_eq!("N".parse::<SweepParam>().unwrap(), SweepParam::N);
        assert!("gamma".parse::<SweepParam>().is_err());
    }
}
