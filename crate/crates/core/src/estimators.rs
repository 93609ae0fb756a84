//! Estimators of `theta = P(T > tau)`.
//!
//! All estimators here target the functional `D(T; theta) = 1(T > tau) - theta`
//! and use the derived pair `(T_D, Delta_D)` with `T_D = min(T, tau)`.
//!
//! The doubly robust estimating function is linear in `theta` because the
//! event-side bridge is `H(t; theta) = exp{B(t) . (1, w, x)} - theta`:
//!
//! ```text
//! Xi_i(theta) = num_i - theta * den_i
//! num_i = Delta_D Q(T_D) 1(T > tau) - int_0^{T_D} exp{B(t).} {dQ(t) - Q(t-) dN_C(t)}
//! den_i = Delta_D Q(T_D)            - int_0^{T_D}            {dQ(t) - Q(t-) dN_C(t)}
//! ```
//!
//! so the root of `sum_i Xi_i` is `sum num / sum den`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bridge::{
    clamped_exp, dot, fit_a_until, fit_b, fit_censoring_bridge, fit_event_bridge, BridgeDesign, BridgeFit,
    FeatureMap,
};
use crate::data::{check_tau, JumpKind, ObservedData};
use crate::datagen::substream;
use crate::error::{Error, Result};

/// Estimates outside this band are flagged (ratio estimators are reported raw).
pub const PLAUSIBLE_BAND: (f64, f64) = (-0.5, 1.5);

/// Event-side input to the doubly robust estimating function.
#[derive(Debug, Clone, Copy)]
pub enum EventSide<'a> {
    Fitted(&'a BridgeFit),
    /// `H(t; theta) = 0` for every `t` and `theta`.
    Zero,
}

/// Censoring-side input to the doubly robust estimating function.
#[derive(Debug, Clone, Copy)]
pub enum CensoringSide<'a> {
    Fitted(&'a BridgeFit),
    /// `Q(0) = 1` and `Q(t) = 0` for `t > 0`.
    Vanishing,
}

/// Per-subject `theta`-free and `theta`-coefficient parts of `Xi_i`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct XiTerms {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

impl XiTerms {
    pub fn num_sum(&self) -> f64 {
        self.num.iter().sum()
    }

    pub fn den_sum(&self) -> f64 {
        self.den.iter().sum()
    }

    /// `sum_i Xi_i(theta)`.
    pub fn score(&self, theta: f64) -> f64 {
        self.num_sum() - theta * self.den_sum()
    }

    pub fn root(&self) -> Result<f64> {
        ratio(self.num_sum(), self.den_sum())
    }
}

fn ratio(num: f64, den: f64) -> Result<f64> {
    if den == 0.0 || !den.is_finite() {
        return Err(Error::Estimation(format!(
            "no observed-D subjects: estimating-equation denominator is {den}"
        )));
    }
    Ok(num / den)
}

#[inline]
fn link_value(fit: &BridgeFit, coef: &[f64], feat: &[f64]) -> f64 {
    debug_assert_eq!(coef.len(), fit.dim());
    clamped_exp(dot(coef, feat)).0
}

/// `Q_i(t)` (right-continuous).
pub fn q_value(fit: &BridgeFit, data: &ObservedData, i: usize, t: f64) -> f64 {
    let f = fit.features(data, i);
    link_value(fit, fit.path.eval(t), &f)
}

/// `Xi` decomposition for the subjects `indices` of `data`.
pub fn xi_terms_for(
    data: &ObservedData,
    indices: &[usize],
    h: EventSide<'_>,
    q: CensoringSide<'_>,
    tau: f64,
) -> Result<XiTerms> {
    check_tau(tau)?;
    let mut out = XiTerms {
        num: Vec::with_capacity(indices.len()),
        den: Vec::with_capacity(indices.len()),
    };
    let h_fit = match h {
        EventSide::Fitted(f) => Some(f),
        EventSide::Zero => None,
    };
    let mut h_feat = vec![0.0; h_fit.map_or(0, |f| f.dim())];
    let h_free = |feat: &[f64], t: f64| -> f64 {
        let f = h_fit.expect("fitted event side");
        link_value(f, f.path.eval(t), feat)
    };
    // event-side coefficients at each censoring-side knot
    let h_at_knots: Vec<&[f64]> = match (h_fit, q) {
        (Some(hf), CensoringSide::Fitted(qf)) => qf.path.knots().iter().map(|&s| hf.path.eval(s)).collect(),
        _ => Vec::new(),
    };
    let mut q_feat = vec![0.0; if let CensoringSide::Fitted(qf) = q { qf.dim() } else { 0 }];

    for &i in indices {
        if let Some(f) = h_fit {
            f.design.link.fill(data, i, &mut h_feat);
        }
        let d = data.derived(i, tau);
        let survives = data.survives_past(i, tau);
        let censored_before = !data.delta[i] && !d.delta_d;

        // (Q(T_D), int H_free dM, int dM) with dM = dQ - Q(t-) dN_C
        let (q_end, int_free, int_coef) = match q {
            CensoringSide::Fitted(qf) => {
                qf.design.link.fill(data, i, &mut q_feat);
                let path = &qf.path;
                let last = path.knots().partition_point(|&s| s <= d.t_d);
                if let Some(hf) = h_fit {
                    let mut q_prev = link_value(qf, path.initial(), &q_feat);
                    let mut int_free = 0.0;
                    let mut int_coef = 0.0;
                    for (k, h_coef) in h_at_knots.iter().enumerate().take(last) {
                        let q_k = link_value(qf, path.value_at_knot(k), &q_feat);
                        let dq = q_k - q_prev;
                        int_free += link_value(hf, h_coef, &h_feat) * dq;
                        int_coef += dq;
                        q_prev = q_k;
                    }
                    if censored_before {
                        let c = data.t[i];
                        let q_left = link_value(qf, path.left_limit(c), &q_feat);
                        int_free -= h_free(&h_feat, c) * q_left;
                        int_coef -= q_left;
                    }
                    (q_prev, int_free, int_coef)
                } else {
                    (link_value(qf, path.eval(d.t_d), &q_feat), 0.0, 0.0)
                }
            }
            CensoringSide::Vanishing => {
                let mut int_free = 0.0;
                let mut int_coef = 0.0;
                if d.t_d > 0.0 && h_fit.is_some() {
                    // single jump of size -1 right after the origin; Q(c-) = 0
                    int_free -= h_free(&h_feat, 0.0);
                    int_coef -= 1.0;
                }
                let q_end = if d.t_d > 0.0 { 0.0 } else { 1.0 };
                (q_end, int_free, int_coef)
            }
        };

        let (a, b) = if d.delta_d {
            (if survives { q_end } else { 0.0 }, q_end)
        } else {
            (0.0, 0.0)
        };
        out.num.push(a - int_free);
        out.den.push(b - int_coef);
    }
    Ok(out)
}

pub fn xi_terms(data: &ObservedData, h: EventSide<'_>, q: CensoringSide<'_>, tau: f64) -> Result<XiTerms> {
    let all: Vec<usize> = (0..data.len()).collect();
    xi_terms_for(data, &all, h, q, tau)
}

/// `(1/n) sum_i exp{B(0) . (1, w_i, x_i)}`.
pub fn pee(data: &ObservedData, fit_b: &BridgeFit) -> f64 {
    let coef = fit_b.path.eval(0.0);
    let mut feat = vec![0.0; fit_b.dim()];
    let mut sum = 0.0;
    for i in 0..data.len() {
        fit_b.design.link.fill(data, i, &mut feat);
        sum += link_value(fit_b, coef, &feat);
    }
    sum / data.len() as f64
}

/// Self-normalized censoring-weighted estimator
/// `sum Delta_D Q(T_D) 1(T > tau) / sum Delta_D Q(T_D)`.
pub fn pce(data: &ObservedData, fit_a: &BridgeFit, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..data.len() {
        let d = data.derived(i, tau);
        let (a, b) = if d.delta_d {
            let q = q_value(fit_a, data, i, d.t_d);
            (if data.survives_past(i, tau) { q } else { 0.0 }, q)
        } else {
            (0.0, 0.0)
        };
        num += a;
        den += b;
    }
    ratio(num, den)
}

/// Root of `sum_i Xi_i(H, Q; theta) = 0`.
pub fn pmdre(data: &ObservedData, h: EventSide<'_>, q: CensoringSide<'_>, tau: f64) -> Result<f64> {
    xi_terms(data, h, q, tau)?.root()
}

/// Product-limit estimate of `P(T > tau)` treating censoring as independent.
pub fn kaplan_meier(data: &ObservedData, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let n = data.len();
    let mut s = 1.0;
    for g in data.jump_groups(JumpKind::Event, Some(tau)) {
        let at_risk = (n - g.at_risk_start) as f64;
        s *= 1.0 - g.members.len() as f64 / at_risk;
    }
    Ok(s)
}

/// Covariates used by the conditional-independence baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateSet {
    /// Only the shared covariate `x`.
    XOnly,
    /// `x`, `w` and `z` all treated as ordinary covariates.
    ProxiesAsCovariates,
}

impl CovariateSet {
    fn feature_map(self) -> FeatureMap {
        match self {
            CovariateSet::XOnly => FeatureMap::X,
            CovariateSet::ProxiesAsCovariates => FeatureMap::Xwz,
        }
    }
}

/// Both bridges of the conditional-independence baseline.
///
/// With link = instrument the censoring recursion is an exponential-link
/// additive-hazard fit, so `Q = 1 / G(t | L)` and `H = E[D | T >= t, L]`, and
/// the doubly robust function reduces to the augmented IPCW one.
pub fn fit_covariate_bridges(data: &ObservedData, tau: f64, covariates: CovariateSet) -> Result<(BridgeFit, BridgeFit)> {
    let design = BridgeDesign::covariates(covariates.feature_map());
    let a = fit_censoring_bridge(data, design, Some(tau));
    let b = fit_event_bridge(data, design, tau)?;
    Ok((a, b))
}

pub fn aipcw_baseline(data: &ObservedData, tau: f64, covariates: CovariateSet) -> Result<f64> {
    let (a, b) = fit_covariate_bridges(data, tau, covariates)?;
    pmdre(data, EventSide::Fitted(&b), CensoringSide::Fitted(&a), tau)
}

pub fn ipcw_baseline(data: &ObservedData, tau: f64, covariates: CovariateSet) -> Result<f64> {
    let design = BridgeDesign::covariates(covariates.feature_map());
    let a = fit_censoring_bridge(data, design, Some(tau));
    pce(data, &a, tau)
}

/// Fold labels for `n` canonical indices: seeded permutation, then
/// contiguous blocks whose sizes differ by at most one.
pub fn fold_labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, 0xf01d);
    perm.shuffle(&mut rng);
    let base = n / k;
    let extra = n % k;
    let mut labels = vec![0; n];
    let mut pos = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for &idx in &perm[pos..pos + size] {
            labels[idx] = fold;
        }
        pos += size;
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFit {
    pub value: f64,
    pub num_sum: f64,
    pub den_sum: f64,
    /// Folds whose training part had no event or no censoring jump, so one
    /// of the bridges stayed at its zero path.
    pub folds_without_jumps: usize,
    pub rank_deficient_jumps: usize,
    pub clamp_count: u64,
}

/// K-fold cross-fitted doubly robust estimate.
pub fn prdre(data: &ObservedData, k: usize, tau: f64, seed: u64) -> Result<CrossFit> {
    if k < 2 {
        return Err(Error::Input(format!("fold count must be at least 2, got {k}")));
    }
    if data.len() < 2 * k {
        return Err(Error::Input(format!(
            "cross-fitting with {k} folds needs at least {} subjects, got {}",
            2 * k,
            data.len()
        )));
    }
    let labels = fold_labels(data.len(), k, seed);
    prdre_with_folds(data, &labels, k, tau)
}

pub fn prdre_with_folds(data: &ObservedData, labels: &[usize], k: usize, tau: f64) -> Result<CrossFit> {
    check_tau(tau)?;
    if labels.len() != data.len() || labels.iter().any(|&l| l >= k) {
        return Err(Error::Input("fold labels must cover every subject with values < k".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut empty = 0;
    let mut rank_def = 0;
    let mut clamps = 0;
    for fold in 0..k {
        let train: Vec<usize> = (0..data.len()).filter(|&i| labels[i] != fold).collect();
        let test: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == fold).collect();
        if test.is_empty() {
            continue;
        }
        let train_data = data.select(&train);
        let a = fit_a_until(&train_data, Some(tau));
        let b = fit_b(&train_data, tau)?;
        if a.path.is_empty() || b.path.is_empty() {
            empty += 1;
        }
        rank_def += a.diagnostics.rank_deficient_jumps(3) + b.diagnostics.rank_deficient_jumps(3);
        clamps += a.diagnostics.clamp_count + b.diagnostics.clamp_count;
        let terms = xi_terms_for(data, &test, EventSide::Fitted(&b), CensoringSide::Fitted(&a), tau)?;
        num += terms.num_sum();
        den += terms.den_sum();
    }
    Ok(CrossFit {
        value: ratio(num, den)?,
        num_sum: num,
        den_sum: den,
        folds_without_jumps: empty,
        rank_deficient_jumps: rank_def,
        clamp_count: clamps,
    })
}

/// Registered estimator names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Pee,
    Pce,
    Pmdre,
    Prdre,
    Km,
    Aipcw,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Pee,
        EstimatorKind::Pce,
        EstimatorKind::Pmdre,
        EstimatorKind::Prdre,
        EstimatorKind::Km,
        EstimatorKind::Aipcw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Pee => "pee",
            EstimatorKind::Pce => "pce",
            EstimatorKind::Pmdre => "pmdre",
            EstimatorKind::Prdre => "prdre",
            EstimatorKind::Km => "km",
            EstimatorKind::Aipcw => "aipcw",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Pee => "theta_PEE",
            EstimatorKind::Pce => "theta_PCE",
            EstimatorKind::Pmdre => "theta_PMDRE",
            EstimatorKind::Prdre => "theta_PRDRE",
            EstimatorKind::Km => "theta_KM",
            EstimatorKind::Aipcw => "theta_AIPCW",
        }
    }

    fn uses_proximal_fits(self) -> bool {
        matches!(self, EstimatorKind::Pee | EstimatorKind::Pce | EstimatorKind::Pmdre)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown estimator {s:?}; expected one of pee, pce, pmdre, prdre, km, aipcw"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub tau: f64,
    pub folds: usize,
    pub fold_seed: u64,
    pub aipcw_covariates: CovariateSet,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            tau: 0.5,
            folds: 5,
            fold_seed: 1,
            aipcw_covariates: CovariateSet::ProxiesAsCovariates,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateDiagnostics {
    pub rank_deficient_jumps: usize,
    pub clamp_count: u64,
    /// Sum of the estimating-equation denominators, for ratio estimators.
    pub denominator: Option<f64>,
    pub outside_plausible_band: bool,
    pub folds_without_jumps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub diagnostics: EstimateDiagnostics,
}

impl Estimate {
    fn new(value: f64, mut diagnostics: EstimateDiagnostics) -> Self {
        diagnostics.outside_plausible_band = !(PLAUSIBLE_BAND.0..=PLAUSIBLE_BAND.1).contains(&value);
        Estimate { value, diagnostics }
    }
}

/// Nuisance fits that can be computed once and reused across estimators.
#[derive(Debug, Clone)]
pub struct NuisanceFits {
    pub tau: f64,
    pub proximal: Option<(BridgeFit, BridgeFit)>,
    pub covariate: Option<(BridgeFit, BridgeFit)>,
}

impl NuisanceFits {
    pub fn fit(data: &ObservedData, kinds: &[EstimatorKind], opts: &EstimatorOptions) -> Result<Self> {
        let proximal = if kinds.iter().any(|k| k.uses_proximal_fits()) {
            Some((fit_a_until(data, Some(opts.tau)), fit_b(data, opts.tau)?))
        } else {
            None
        };
        let covariate = if kinds.contains(&EstimatorKind::Aipcw) {
            Some(fit_covariate_bridges(data, opts.tau, opts.aipcw_covariates)?)
        } else {
            None
        };
        Ok(NuisanceFits {
            tau: opts.tau,
            proximal,
            covariate,
        })
    }
}

fn fit_diag(a: &BridgeFit, b: &BridgeFit) -> EstimateDiagnostics {
    EstimateDiagnostics {
        rank_deficient_jumps: a.diagnostics.rank_deficient_jumps(a.dim()) + b.diagnostics.rank_deficient_jumps(b.dim()),
        clamp_count: a.diagnostics.clamp_count + b.diagnostics.clamp_count,
        ..Default::default()
    }
}

/// Evaluates `kinds` on `data`. Nuisance bridges come from `fits` when given
/// (fixed-nuisance mode) and are fitted on `data` otherwise. Cross-fitting
/// always refits inside its folds.
pub fn estimate_many(
    kinds: &[EstimatorKind],
    data: &ObservedData,
    opts: &EstimatorOptions,
    fits: Option<&NuisanceFits>,
) -> Vec<Result<Estimate>> {
    let owned;
    let fits = match fits {
        Some(f) => f,
        None => match NuisanceFits::fit(data, kinds, opts) {
            Ok(f) => {
                owned = f;
                &owned
            }
            Err(e) => {
                let msg = e.to_string();
                return kinds.iter().map(|_| Err(Error::Estimation(msg.clone()))).collect();
            }
        },
    };
    let tau = opts.tau;
    kinds
        .iter()
        .map(|&kind| -> Result<Estimate> {
            match kind {
                EstimatorKind::Pee => {
                    let (a, b) = fits.proximal.as_ref().expect("proximal fits");
                    Ok(Estimate::new(pee(data, b), fit_diag(a, b)))
                }
                EstimatorKind::Pce => {
                    let (a, b) = fits.proximal.as_ref().expect("proximal fits");
                    Ok(Estimate::new(pce(data, a, tau)?, fit_diag(a, b)))
                }
                EstimatorKind::Pmdre => {
                    let (a, b) = fits.proximal.as_ref().expect("proximal fits");
                    let terms = xi_terms(data, EventSide::Fitted(b), CensoringSide::Fitted(a), tau)?;
                    let mut d = fit_diag(a, b);
                    d.denominator = Some(terms.den_sum());
                    Ok(Estimate::new(terms.root()?, d))
                }
                EstimatorKind::Prdre => {
                    let cf = prdre(data, opts.folds, tau, opts.fold_seed)?;
                    let d = EstimateDiagnostics {
                        rank_deficient_jumps: cf.rank_deficient_jumps,
                        clamp_count: cf.clamp_count,
                        denominator: Some(cf.den_sum),
                        folds_without_jumps: cf.folds_without_jumps,
                        ..Default::default()
                    };
                    Ok(Estimate::new(cf.value, d))
                }
                EstimatorKind::Km => Ok(Estimate::new(kaplan_meier(data, tau)?, EstimateDiagnostics::default())),
                EstimatorKind::Aipcw => {
                    let (a, b) = fits.covariate.as_ref().expect("covariate fits");
                    let terms = xi_terms(data, EventSide::Fitted(b), CensoringSide::Fitted(a), tau)?;
                    let mut d = fit_diag(a, b);
                    d.denominator = Some(terms.den_sum());
                    Ok(Estimate::new(terms.root()?, d))
                }
            }
        })
        .collect()
}

pub fn estimate(kind: EstimatorKind, data: &ObservedData, opts: &EstimatorOptions) -> Result<Estimate> {
    estimate_many(&[kind], data, opts, None).pop().expect("one result")
}
