//! Nonparametric bootstrap and the Monte Carlo study harness.
//!
//! Every random draw comes from a ChaCha8 substream keyed by a derived seed,
//! and every sum is taken in a fixed order, so results do not depend on the
//! number of worker threads.

use std::fmt::Write as _;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ObservedData;
use crate::datagen::{derive_seed, generate, substream, true_theta, DgpConfig};
use crate::error::{Error, Result};
use crate::estimators::{estimate_many, EstimateDiagnostics, EstimatorKind, EstimatorOptions, NuisanceFits};

/// Two-sided 95% standard normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

const TAG_REPLICATE: u64 = 0x5245_504c;
const TAG_BOOTSTRAP: u64 = 0x424f_4f54;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
    /// Reuse the full-sample nuisance fits instead of refitting per resample.
    pub fixed_nuisance: bool,
    /// More failed resamples than this fraction is an error.
    pub max_failure_fraction: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 200,
            seed: 1,
            fixed_nuisance: false,
            max_failure_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub sd: f64,
    pub succeeded: usize,
    pub failed: usize,
}

/// Canonical indices of bootstrap resample `b`, sorted.
pub fn resample_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = substream(seed, b as u64);
    let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    idx.sort_unstable();
    idx
}

/// Unbiased sample standard deviation.
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Pairs bootstrap of a statistic with `k` outputs. One summary per output;
/// an output whose failures exceed the allowed fraction is an error.
pub fn bootstrap<F>(data: &ObservedData, cfg: &BootstrapConfig, k: usize, stat: F) -> Vec<Result<BootstrapSummary>>
where
    F: Fn(&ObservedData) -> Vec<Result<f64>> + Sync,
{
    if cfg.resamples < 2 {
        let e = format!("bootstrap needs at least 2 resamples, got {}", cfg.resamples);
        return (0..k).map(|_| Err(Error::Input(e.clone()))).collect();
    }
    let n = data.len();
    let draws: Vec<Vec<Option<f64>>> = (0..cfg.resamples)
        .into_par_iter()
        .map(|b| {
            let sample = data.select(&resample_indices(n, cfg.seed, b));
            let out = stat(&sample);
            debug_assert_eq!(out.len(), k);
            out.into_iter()
                .map(|r| r.ok().filter(|v| v.is_finite()))
                .collect()
        })
        .collect();
    (0..k)
        .map(|j| {
            let ok: Vec<f64> = draws.iter().filter_map(|d| d[j]).collect();
            let failed = cfg.resamples - ok.len();
            if failed as f64 > cfg.max_failure_fraction * cfg.resamples as f64 || ok.len() < 2 {
                return Err(Error::Estimation(format!(
                    "{failed} of {} bootstrap resamples failed",
                    cfg.resamples
                )));
            }
            Ok(BootstrapSummary {
                sd: sample_sd(&ok),
                succeeded: ok.len(),
                failed,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: EstimatorKind,
    pub estimate: f64,
    pub bootstrap_sd: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub bootstrap_succeeded: usize,
    pub bootstrap_failed: usize,
    pub censoring_fraction: f64,
    pub diagnostics: EstimateDiagnostics,
}

/// Point estimates for `kinds` plus Wald intervals from the bootstrap when
/// `boot` is given.
pub fn estimate_with_bootstrap(
    data: &ObservedData,
    kinds: &[EstimatorKind],
    opts: &EstimatorOptions,
    boot: Option<&BootstrapConfig>,
) -> Result<Vec<EstimateReport>> {
    let fits = NuisanceFits::fit(data, kinds, opts)?;
    let points = estimate_many(kinds, data, opts, Some(&fits));
    let mut points_ok = Vec::with_capacity(kinds.len());
    for (k, p) in kinds.iter().zip(points) {
        points_ok.push(p.map_err(|e| Error::Estimation(format!("{k}: {e}")))?);
    }
    let censored = data.deltas().iter().filter(|d| !**d).count() as f64 / data.len() as f64;
    let boots: Vec<Option<BootstrapSummary>> = match boot {
        None => vec![None; kinds.len()],
        Some(cfg) => {
            let fixed = cfg.fixed_nuisance.then_some(&fits);
            let stat = |s: &ObservedData| -> Vec<Result<f64>> {
                estimate_many(kinds, s, opts, fixed)
                    .into_iter()
                    .map(|r| r.map(|e| e.value))
                    .collect()
            };
            let mut out = Vec::with_capacity(kinds.len());
            for (k, r) in kinds.iter().zip(bootstrap(data, cfg, kinds.len(), stat)) {
                out.push(Some(r.map_err(|e| Error::Estimation(format!("{k}: {e}")))?));
            }
            out
        }
    };
    Ok(kinds
        .iter()
        .zip(points_ok)
        .zip(boots)
        .map(|((&kind, p), b)| {
            let sd = b.as_ref().map(|b| b.sd);
            EstimateReport {
                estimator: kind,
                estimate: p.value,
                bootstrap_sd: sd,
                ci_lower: sd.map(|s| p.value - Z_975 * s),
                ci_upper: sd.map(|s| p.value + Z_975 * s),
                bootstrap_succeeded: b.as_ref().map_or(0, |b| b.succeeded),
                bootstrap_failed: b.as_ref().map_or(0, |b| b.failed),
                censoring_fraction: censored,
                diagnostics: p.diagnostics,
            }
        })
        .collect())
}

pub fn reports_table(reports: &[EstimateReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:>10} {:>10} {:>10} {:>10}", "method", "estimate", "boot_sd", "ci_lo", "ci_hi");
    let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
    for r in reports {
        let _ = writeln!(
            s,
            "{:<8} {:>10.5} {:>10} {:>10} {:>10}",
            r.estimator.name(),
            r.estimate,
            f(r.bootstrap_sd),
            f(r.ci_lower),
            f(r.ci_upper)
        );
    }
    if let Some(r) = reports.first() {
        let _ = writeln!(s, "censoring fraction: {:.4}", r.censoring_fraction);
    }
    for r in reports {
        let d = &r.diagnostics;
        if d.rank_deficient_jumps > 0 || d.clamp_count > 0 || d.outside_plausible_band || d.folds_without_jumps > 0 {
            let _ = writeln!(
                s,
                "warning {}: rank-deficient jumps {}, clamped predictors {}, outside [-0.5, 1.5] {}, empty folds {}",
                r.estimator.name(),
                d.rank_deficient_jumps,
                d.clamp_count,
                d.outside_plausible_band,
                d.folds_without_jumps
            );
        }
    }
    s
}

pub fn reports_csv<W: Write>(reports: &[EstimateReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "estimator",
        "estimate",
        "bootstrap_sd",
        "ci_lower",
        "ci_upper",
        "bootstrap_succeeded",
        "bootstrap_failed",
        "censoring_fraction",
        "rank_deficient_jumps",
        "clamp_count",
    ])?;
    let o = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in reports {
        w.write_record([
            r.estimator.name().to_string(),
            r.estimate.to_string(),
            o(r.bootstrap_sd),
            o(r.ci_lower),
            o(r.ci_upper),
            r.bootstrap_succeeded.to_string(),
            r.bootstrap_failed.to_string(),
            r.censoring_fraction.to_string(),
            r.diagnostics.rank_deficient_jumps.to_string(),
            r.diagnostics.clamp_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub replicates: usize,
    pub n: usize,
    pub master_seed: u64,
    pub estimators: Vec<EstimatorKind>,
    pub options: EstimatorOptions,
    /// `None` skips the bootstrap (no SD or coverage columns).
    pub bootstrap: Option<BootstrapConfig>,
    /// Overrides the quadrature value of `theta0`.
    pub theta0: Option<f64>,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            replicates: 1000,
            n: 1500,
            master_seed: 20_230_501,
            estimators: vec![EstimatorKind::Pee, EstimatorKind::Pce, EstimatorKind::Pmdre],
            options: EstimatorOptions::default(),
            bootstrap: Some(BootstrapConfig::default()),
            theta0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub estimator: EstimatorKind,
    pub estimate: Option<f64>,
    pub bootstrap_sd: Option<f64>,
    pub covered: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub estimator: EstimatorKind,
    pub bias: f64,
    /// Standard deviation of the estimates across replicates.
    pub see: f64,
    /// Mean bootstrap standard error.
    pub sd: Option<f64>,
    /// Wald 95% coverage.
    pub cp: Option<f64>,
    /// Monte Carlo standard error of the bias, `see / sqrt(R)`.
    pub bias_mc_se: f64,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McStudy {
    pub theta0: f64,
    pub n: usize,
    pub replicates: usize,
    pub master_seed: u64,
    pub dgp_digest: String,
    pub summaries: Vec<McSummary>,
    pub records: Vec<ReplicateRecord>,
}

/// Output of one estimator on one replicate: estimate and optional bootstrap SD.
pub type ReplicateOutput = Result<(f64, Option<f64>)>;

/// Runs the study with the registered estimators.
pub fn monte_carlo(dgp: &DgpConfig, mc: &McConfig) -> Result<McStudy> {
    let kinds = mc.estimators.clone();
    let opts = mc.options.clone();
    let boot = mc.bootstrap.clone();
    monte_carlo_with(dgp, mc, move |data, seed| {
        let boot = boot.clone().map(|b| BootstrapConfig {
            seed: derive_seed(seed, TAG_BOOTSTRAP, 0),
            ..b
        });
        match estimate_with_bootstrap(data, &kinds, &opts, boot.as_ref()) {
            Ok(reports) => reports.into_iter().map(|r| Ok((r.estimate, r.bootstrap_sd))).collect(),
            Err(whole) => {
                // fall back to one estimator at a time so failures are attributed
                let msg = whole.to_string();
                kinds
                    .iter()
                    .map(|k| {
                        estimate_with_bootstrap(data, &[*k], &opts, boot.as_ref())
                            .map(|mut r| {
                                let r = r.remove(0);
                                (r.estimate, r.bootstrap_sd)
                            })
                            .map_err(|e| Error::Estimation(format!("{e} ({msg})")))
                    })
                    .collect()
            }
        }
    })
}

/// Runs `mc.replicates` independent datasets through `f`. `f` receives the
/// replicate data and its seed, and returns one output per entry of
/// `mc.estimators`.
pub fn monte_carlo_with<F>(dgp: &DgpConfig, mc: &McConfig, f: F) -> Result<McStudy>
where
    F: Fn(&ObservedData, u64) -> Vec<ReplicateOutput> + Sync,
{
    dgp.validate()?;
    if mc.replicates == 0 {
        return Err(Error::Config("replicates must be at least 1".into()));
    }
    if mc.estimators.is_empty() {
        return Err(Error::Config("at least one estimator is required".into()));
    }
    let theta0 = match mc.theta0 {
        Some(t) => t,
        None => true_theta(dgp, mc.options.tau)?,
    };
    let per_rep: Vec<Result<(u64, Vec<ReplicateOutput>)>> = (0..mc.replicates)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(mc.master_seed, TAG_REPLICATE, r as u64);
            let data = generate(&dgp.with_seed(seed), mc.n)?.observed();
            let out = f(&data, seed);
            if out.len() != mc.estimators.len() {
                return Err(Error::Estimation("replicate output length mismatch".into()));
            }
            Ok((seed, out))
        })
        .collect();
    let mut records = Vec::with_capacity(mc.replicates * mc.estimators.len());
    for (r, rep) in per_rep.into_iter().enumerate() {
        let (seed, outs) = rep?;
        for (&kind, out) in mc.estimators.iter().zip(outs) {
            records.push(match out {
                Ok((est, sd)) => ReplicateRecord {
                    replicate: r,
                    seed,
                    estimator: kind,
                    estimate: Some(est),
                    bootstrap_sd: sd,
                    covered: sd.map(|s| (est - theta0).abs() <= Z_975 * s),
                    error: None,
                },
                Err(e) => ReplicateRecord {
                    replicate: r,
                    seed,
                    estimator: kind,
                    estimate: None,
                    bootstrap_sd: None,
                    covered: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    let summaries = mc
        .estimators
        .iter()
        .map(|&kind| summarize(kind, theta0, records.iter().filter(|r| r.estimator == kind)))
        .collect();
    Ok(McStudy {
        theta0,
        n: mc.n,
        replicates: mc.replicates,
        master_seed: mc.master_seed,
        dgp_digest: dgp.digest(),
        summaries,
        records,
    })
}

fn summarize<'a>(kind: EstimatorKind, theta0: f64, recs: impl Iterator<Item = &'a ReplicateRecord>) -> McSummary {
    let recs: Vec<&ReplicateRecord> = recs.collect();
    let est: Vec<f64> = recs.iter().filter_map(|r| r.estimate).collect();
    let failed = recs.len() - est.len();
    let mean = est.iter().sum::<f64>() / est.len() as f64;
    let see = sample_sd(&est);
    let sds: Vec<f64> = recs.iter().filter_map(|r| r.bootstrap_sd).collect();
    let cov: Vec<bool> = recs.iter().filter_map(|r| r.covered).collect();
    McSummary {
        estimator: kind,
        bias: mean - theta0,
        see,
        sd: (!sds.is_empty()).then(|| sds.iter().sum::<f64>() / sds.len() as f64),
        cp: (!cov.is_empty()).then(|| cov.iter().filter(|c| **c).count() as f64 / cov.len() as f64),
        bias_mc_se: see / (est.len() as f64).sqrt(),
        succeeded: est.len(),
        failed,
    }
}

impl McStudy {
    pub fn summary(&self, kind: EstimatorKind) -> Option<&McSummary> {
        self.summaries.iter().find(|s| s.estimator == kind)
    }

    /// Bias, SEE and SD scaled by 1e3; CP in percent.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "N = {}, R = {}, theta0 = {:.4} (bias, SEE, SD x 1e-3; CP in %)",
            self.n, self.replicates, self.theta0
        );
        let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8} {:>8} {:>6}", "", "Bias", "SEE", "SD", "95% CP", "fail");
        for m in &self.summaries {
            let sd = m.sd.map_or("-".to_string(), |v| format!("{:.2}", 1e3 * v));
            let cp = m.cp.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
            let _ = writeln!(
                s,
                "{:<12} {:>8.2} {:>8.2} {:>8} {:>8} {:>6}",
                m.estimator.label(),
                1e3 * m.bias,
                1e3 * m.see,
                sd,
                cp,
                m.failed
            );
        }
        s
    }

    /// Summary JSON without the per-replicate records.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct View<'a> {
            theta0: f64,
            n: usize,
            replicates: usize,
            master_seed: u64,
            dgp_digest: &'a str,
            summaries: &'a [McSummary],
        }
        let v = View {
            theta0: self.theta0,
            n: self.n,
            replicates: self.replicates,
            master_seed: self.master_seed,
            dgp_digest: &self.dgp_digest,
            summaries: &self.summaries,
        };
        serde_json::to_string_pretty(&v).map_err(|e| Error::Estimation(e.to_string()))
    }

    pub fn write_records_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["replicate", "seed", "estimator", "estimate", "bootstrap_sd", "covered", "error"])?;
        for r in &self.records {
            w.write_record([
                r.replicate.to_string(),
                r.seed.to_string(),
                r.estimator.name().to_string(),
                r.estimate.map_or(String::new(), |v| v.to_string()),
                r.bootstrap_sd.map_or(String::new(), |v| v.to_string()),
                r.covered.map_or(String::new(), |v| u8::from(v).to_string()),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::estimate;

    fn sample(n: usize, seed: u64) -> ObservedData {
        generate(&DgpConfig::default().with_seed(seed), n).unwrap().observed()
    }

    #[test]
    fn resamples_are_sorted_and_seeded() {
        let a = resample_indices(50, 3, 7);
        assert_eq!(a.len(), 50);
        assert!(a.windows(2).all(|p| p[0] <= p[1]));
        assert_eq!(a, resample_indices(50, 3, 7));
        assert_ne!(a, resample_indices(50, 3, 8));
    }

    #[test]
    fn bootstrap_of_the_mean_matches_theory() {
        let data = sample(400, 4);
        let cfg = BootstrapConfig {
            resamples: 400,
            ..Default::default()
        };
        let r = bootstrap(&data, &cfg, 1, |s| vec![Ok(s.x().iter().sum::<f64>() / s.len() as f64)]);
        let got = r[0].as_ref().unwrap().sd;
        let xs = data.x();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let plug_in = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64 / xs.len() as f64).sqrt();
        assert!((got / plug_in - 1.0).abs() < 0.15, "{got} vs {plug_in}");
    }

    #[test]
    fn too_many_failures_is_an_error() {
        let data = sample(50, 1);
        let cfg = BootstrapConfig {
            resamples: 20,
            ..Default::default()
        };
        let r = bootstrap(&data, &cfg, 2, |s| {
            vec![
                Ok(s.x()[0]),
                if s.x()[0] > 0.8 { Err(Error::Estimation("x".into())) } else { Ok(1.0) },
            ]
        });
        assert!(r[0].is_ok());
        let fails = (0..20)
            .filter(|&b| data.select(&resample_indices(50, 1, b)).x()[0] > 0.8)
            .count();
        assert_eq!(r[1].is_err(), fails > 4);
        let single = bootstrap(&data, &BootstrapConfig { resamples: 1, ..cfg }, 1, |_| vec![Ok(0.0)]);
        assert!(single[0].is_err());
    }

    #[test]
    fn reports_carry_wald_intervals() {
        let data = sample(300, 8);
        let opts = EstimatorOptions::default();
        let boot = BootstrapConfig {
            resamples: 20,
            ..Default::default()
        };
        let kinds = [EstimatorKind::Pmdre, EstimatorKind::Km];
        let reps = estimate_with_bootstrap(&data, &kinds, &opts, Some(&boot)).unwrap();
        for (k, r) in kinds.iter().zip(&reps) {
            assert_eq!(r.estimate, estimate(*k, &data, &opts).unwrap().value);
            let sd = r.bootstrap_sd.unwrap();
            assert!(sd > 0.0 && sd < 0.2);
            assert!((r.ci_upper.unwrap() - r.ci_lower.unwrap() - 2.0 * Z_975 * sd).abs() < 1e-12);
        }
        let fixed = BootstrapConfig {
            fixed_nuisance: true,
            ..boot
        };
        let f = estimate_with_bootstrap(&data, &kinds, &opts, Some(&fixed)).unwrap();
        assert_eq!(f[1].bootstrap_sd, reps[1].bootstrap_sd);
        assert!(reports_table(&reps).contains("pmdre"));
    }

    #[test]
    fn study_is_reproducible_and_summarized() {
        let mc = McConfig {
            replicates: 6,
            n: 200,
            master_seed: 5,
            estimators: vec![EstimatorKind::Km, EstimatorKind::Pce],
            bootstrap: Some(BootstrapConfig {
                resamples: 10,
                ..Default::default()
            }),
            ..Default::default()
        };
        let dgp = DgpConfig::default();
        let a = monte_carlo(&dgp, &mc).unwrap();
        let b = monte_carlo(&dgp, &mc).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 12);
        let km = a.summary(EstimatorKind::Km).unwrap();
        let ests: Vec<f64> = a
            .records
            .iter()
            .filter(|r| r.estimator == EstimatorKind::Km)
            .map(|r| r.estimate.unwrap())
            .collect();
        let mean = ests.iter().sum::<f64>() / 6.0;
        assert!((km.bias - (mean - a.theta0)).abs() < 1e-15);
        assert!((km.see - sample_sd(&ests)).abs() < 1e-15);
        assert!(a.table().contains("theta_KM"));
        let mut buf = Vec::new();
        a.write_records_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 13);
    }

    #[test]
    fn generic_harness_passes_seeds_through() {
        let mc = McConfig {
            replicates: 3,
            n: 20,
            estimators: vec![EstimatorKind::Km],
            bootstrap: None,
            theta0: Some(0.0),
            ..Default::default()
        };
        let s = monte_carlo_with(&DgpConfig::default(), &mc, |_, seed| vec![Ok(((seed % 1000) as f64, None))]).unwrap();
        for r in &s.records {
            assert_eq!(r.estimate.unwrap(), (r.seed % 1000) as f64);
            assert_eq!(r.seed, derive_seed(mc.master_seed, TAG_REPLICATE, r.replicate as u64));
        }
        assert!(s.summaries[0].cp.is_none());
    }
}
