//! Recursive estimation of the two bridge processes.
//!
//! Both bridges use an exponential link, `exp{coef(t) . features}`, with a
//! step-function coefficient path. At every jump `s` of the relevant counting
//! process the increment solves the projected estimating equation
//!
//! ```text
//! M(s) dcoef(s) = r(s)
//! M(s) = (1/n) sum_i 1(T_i >= s) w_i(s) instr_i link_i^T
//! r(s) = (1/n) sum_i w_i(s) instr_i dN_i(s)
//! ```
//!
//! with `w_i(s) = exp{coef . link_i}` evaluated at the predictable side of
//! the jump, solved through the SVD pseudo-inverse.
//!
//! - Censoring side (`Q`): link `(1, z, x)`, instrument `(1, w, x)`, driven by
//!   `N_C`, forward in time from `A(0) = 0` with weights at `A(s-)`.
//! - Event side (`H`): link `(1, w, x)`, instrument `(1, z, x)`, driven by
//!   `N_T`, backward from `B(t) = 0` on `[tau, inf)` with weights at `B(s+)`
//!   and `B(s-) = B(s+) - dB(s)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{check_tau, JumpGroup, JumpKind, ObservedData, StepPath};
use crate::error::Result;
use crate::linalg::pinv_solve;

/// Linear predictors are clamped to `[-LP_CLAMP, LP_CLAMP]` before `exp`.
pub const LP_CLAMP: f64 = 50.0;

const CHUNK: usize = 4096;
const PAR_MIN: usize = 4 * CHUNK;

/// Covariate vectors a bridge can use, always with a leading intercept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMap {
    /// `(1, z, x)`
    Zx,
    /// `(1, w, x)`
    Wx,
    /// `(1, x, w, z)`
    Xwz,
    /// `(1, x)`
    X,
}

impl FeatureMap {
    pub fn dim(self) -> usize {
        match self {
            FeatureMap::Zx | FeatureMap::Wx => 3,
            FeatureMap::Xwz => 4,
            FeatureMap::X => 2,
        }
    }

    pub fn names(self) -> &'static [&'static str] {
        match self {
            FeatureMap::Zx => &["intercept", "z", "x"],
            FeatureMap::Wx => &["intercept", "w", "x"],
            FeatureMap::Xwz => &["intercept", "x", "w", "z"],
            FeatureMap::X => &["intercept", "x"],
        }
    }

    #[inline]
    pub fn fill(self, data: &ObservedData, i: usize, out: &mut [f64]) {
        out[0] = 1.0;
        match self {
            FeatureMap::Zx => {
                out[1] = data.z[i];
                out[2] = data.x[i];
            }
            FeatureMap::Wx => {
                out[1] = data.w[i];
                out[2] = data.x[i];
            }
            FeatureMap::Xwz => {
                out[1] = data.x[i];
                out[2] = data.w[i];
                out[3] = data.z[i];
            }
            FeatureMap::X => out[1] = data.x[i],
        }
    }

    pub fn matrix(self, data: &ObservedData) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d * data.len()];
        for (i, row) in out.chunks_mut(d).enumerate() {
            self.fill(data, i, row);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Event,
    Censoring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeDesign {
    pub link: FeatureMap,
    pub instrument: FeatureMap,
}

impl BridgeDesign {
    pub fn proximal(side: Side) -> Self {
        match side {
            Side::Censoring => BridgeDesign {
                link: FeatureMap::Zx,
                instrument: FeatureMap::Wx,
            },
            Side::Event => BridgeDesign {
                link: FeatureMap::Wx,
                instrument: FeatureMap::Zx,
            },
        }
    }

    /// Classical regression design: the same covariates act as link and
    /// instrument, which turns each step into a weighted least-squares update.
    pub fn covariates(map: FeatureMap) -> Self {
        BridgeDesign {
            link: map,
            instrument: map,
        }
    }

    pub fn dim(&self) -> usize {
        assert_eq!(self.link.dim(), self.instrument.dim());
        self.link.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpDiagnostic {
    pub time: f64,
    pub rank: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub jumps: Vec<JumpDiagnostic>,
    /// Number of clamped linear predictors across all weight evaluations.
    pub clamp_count: u64,
}

impl FitDiagnostics {
    pub fn rank_deficient_jumps(&self, dim: usize) -> usize {
        self.jumps.iter().filter(|j| j.rank < dim).count()
    }

    pub fn max_full_rank_residual(&self, dim: usize) -> f64 {
        self.jumps
            .iter()
            .filter(|j| j.rank == dim)
            .map(|j| j.residual)
            .fold(0.0, f64::max)
    }
}

/// A fitted bridge: coefficient path plus the rule turning it into values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeFit {
    pub path: StepPath,
    pub side: Side,
    pub design: BridgeDesign,
    /// `tau` for event-side fits.
    pub horizon: Option<f64>,
    pub diagnostics: FitDiagnostics,
}

#[inline]
pub(crate) fn clamped_exp(lp: f64) -> (f64, bool) {
    if lp > LP_CLAMP {
        (LP_CLAMP.exp(), true)
    } else if lp < -LP_CLAMP {
        ((-LP_CLAMP).exp(), true)
    } else {
        (lp.exp(), false)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl BridgeFit {
    pub fn zero(side: Side, design: BridgeDesign, horizon: Option<f64>) -> Self {
        BridgeFit {
            path: StepPath::zero(design.dim()),
            side,
            design,
            horizon,
            diagnostics: FitDiagnostics::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.path.dim()
    }

    /// Link features of subject `i` in `data`.
    pub fn features(&self, data: &ObservedData, i: usize) -> Vec<f64> {
        let mut f = vec![0.0; self.dim()];
        self.design.link.fill(data, i, &mut f);
        f
    }

    /// `exp{path(t) . link_i}`: `Q_i(t)` on the censoring side, the
    /// `theta`-free part of `H_i(t)` on the event side.
    pub fn value(&self, t: f64, data: &ObservedData, i: usize) -> f64 {
        let f = self.features(data, i);
        clamped_exp(dot(self.path.eval(t), &f)).0
    }

    /// Same as [`value`](Self::value) with the left limit of the path.
    pub fn value_left(&self, t: f64, data: &ObservedData, i: usize) -> f64 {
        let f = self.features(data, i);
        clamped_exp(dot(self.path.left_limit(t), &f)).0
    }

    /// A copy with `offset` added to the coefficient path from `start` on
    /// (`start = None`: everywhere).
    pub fn perturbed(&self, offset: &[f64], start: Option<f64>) -> BridgeFit {
        let path = match start {
            None => self.path.offset_all(offset),
            Some(s) => self.path.offset_from(offset, s),
        };
        BridgeFit {
            path,
            diagnostics: FitDiagnostics::default(),
            ..self.clone()
        }
    }
}

/// Censoring-side bridge over every censoring time.
pub fn fit_a(data: &ObservedData) -> BridgeFit {
    fit_censoring_bridge(data, BridgeDesign::proximal(Side::Censoring), None)
}

/// Censoring-side bridge restricted to censoring times `<= horizon`, which
/// is all the estimators of `P(T > tau)` need with `horizon = tau`.
pub fn fit_a_until(data: &ObservedData, horizon: Option<f64>) -> BridgeFit {
    fit_censoring_bridge(data, BridgeDesign::proximal(Side::Censoring), horizon)
}

pub fn fit_b(data: &ObservedData, tau: f64) -> Result<BridgeFit> {
    fit_event_bridge(data, BridgeDesign::proximal(Side::Event), tau)
}

pub fn fit_censoring_bridge(data: &ObservedData, design: BridgeDesign, until: Option<f64>) -> BridgeFit {
    let groups = data.jump_groups(JumpKind::Censoring, until);
    let (path, diagnostics) = run(data, design, &groups, Direction::Forward);
    BridgeFit {
        path,
        side: Side::Censoring,
        design,
        horizon: until,
        diagnostics,
    }
}

pub fn fit_event_bridge(data: &ObservedData, design: BridgeDesign, tau: f64) -> Result<BridgeFit> {
    check_tau(tau)?;
    let groups = data.jump_groups(JumpKind::Event, Some(tau));
    let (path, diagnostics) = run(data, design, &groups, Direction::Backward);
    Ok(BridgeFit {
        path,
        side: Side::Event,
        design,
        horizon: Some(tau),
        diagnostics,
    })
}

/// The system `(M, r)` solved at `group`, with weights built from `coef`.
/// Row-major `M`.
pub fn jump_system(
    data: &ObservedData,
    design: BridgeDesign,
    coef: &[f64],
    group: &JumpGroup,
) -> (Vec<f64>, Vec<f64>) {
    let link = design.link.matrix(data);
    let instr = design.instrument.matrix(data);
    let mut clamps = 0;
    macro_rules! go {
        ($d:literal) => {{
            let c: [f64; $d] = coef.try_into().expect("coefficient dimension");
            let (m, r) = system::<$d>(&link, &instr, &c, group, data.len(), &mut clamps);
            (m.iter().flatten().copied().collect(), r.to_vec())
        }};
    }
    match design.dim() {
        2 => go!(2),
        3 => go!(3),
        4 => go!(4),
        d => panic!("unsupported bridge dimension {d}"),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Backward,
}

fn run(data: &ObservedData, design: BridgeDesign, groups: &[JumpGroup], dir: Direction) -> (StepPath, FitDiagnostics) {
    let link = design.link.matrix(data);
    let instr = design.instrument.matrix(data);
    match design.dim() {
        2 => recurse::<2>(&link, &instr, groups, data.len(), dir),
        3 => recurse::<3>(&link, &instr, groups, data.len(), dir),
        4 => recurse::<4>(&link, &instr, groups, data.len(), dir),
        d => panic!("unsupported bridge dimension {d}"),
    }
}

fn recurse<const D: usize>(
    link: &[f64],
    instr: &[f64],
    groups: &[JumpGroup],
    n: usize,
    dir: Direction,
) -> (StepPath, FitDiagnostics) {
    let mut coef = [0.0; D];
    let mut diag = FitDiagnostics::default();
    let mut knot_values: Vec<[f64; D]> = Vec::with_capacity(groups.len());
    let mut jumps = Vec::with_capacity(groups.len());

    let order: Box<dyn Iterator<Item = &JumpGroup>> = match dir {
        Direction::Forward => Box::new(groups.iter()),
        Direction::Backward => Box::new(groups.iter().rev()),
    };
    for g in order {
        let (m, r) = system::<D>(link, instr, &coef, g, n, &mut diag.clamp_count);
        let flat: Vec<f64> = m.iter().flatten().copied().collect();
        let solve = pinv_solve(&flat, &r, D);
        jumps.push(JumpDiagnostic {
            time: g.time,
            rank: solve.rank,
            residual: solve.residual,
        });
        match dir {
            Direction::Forward => {
                for d in 0..D {
                    coef[d] += solve.solution[d];
                }
                knot_values.push(coef);
            }
            Direction::Backward => {
                // knot value is B(s+); the update gives B(s-)
                knot_values.push(coef);
                for d in 0..D {
                    coef[d] -= solve.solution[d];
                }
            }
        }
    }

    let knots: Vec<f64>;
    let initial: Vec<f64>;
    match dir {
        Direction::Forward => {
            knots = groups.iter().map(|g| g.time).collect();
            initial = vec![0.0; D];
        }
        Direction::Backward => {
            knots = groups.iter().map(|g| g.time).collect();
            knot_values.reverse();
            jumps.reverse();
            initial = coef.to_vec();
        }
    }
    diag.jumps = jumps;
    let values = knot_values.iter().flatten().copied().collect();
    (StepPath::from_parts(D, initial, knots, values), diag)
}

type Partial<const D: usize> = ([[f64; D]; D], u64);

fn system<const D: usize>(
    link: &[f64],
    instr: &[f64],
    coef: &[f64; D],
    group: &JumpGroup,
    n: usize,
    clamps: &mut u64,
) -> ([[f64; D]; D], [f64; D]) {
    let start = group.at_risk_start;
    let len = n - start;
    let chunk_sum = |c: usize| -> Partial<D> {
        let lo = start + c * CHUNK;
        let hi = (lo + CHUNK).min(n);
        let mut m = [[0.0; D]; D];
        let mut k = 0u64;
        for i in lo..hi {
            let l = &link[i * D..(i + 1) * D];
            let s = &instr[i * D..(i + 1) * D];
            let mut lp = 0.0;
            for d in 0..D {
                lp += coef[d] * l[d];
            }
            let (w, cl) = clamped_exp(lp);
            k += cl as u64;
            for a in 0..D {
                let ws = w * s[a];
                for b in 0..D {
                    m[a][b] += ws * l[b];
                }
            }
        }
        (m, k)
    };
    let chunks = len.div_ceil(CHUNK);
    let partials: Vec<Partial<D>> = if len >= PAR_MIN {
        (0..chunks).into_par_iter().map(chunk_sum).collect()
    } else {
        (0..chunks).map(chunk_sum).collect()
    };
    let inv_n = 1.0 / n as f64;
    let mut m = [[0.0; D]; D];
    for (p, k) in &partials {
        *clamps += k;
        for a in 0..D {
            for b in 0..D {
                m[a][b] += p[a][b];
            }
        }
    }
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }

    let mut r = [0.0; D];
    for i in group.members.clone() {
        let l = &link[i * D..(i + 1) * D];
        let s = &instr[i * D..(i + 1) * D];
        let mut lp = 0.0;
        for d in 0..D {
            lp += coef[d] * l[d];
        }
        let (w, _) = clamped_exp(lp);
        for a in 0..D {
            r[a] += w * s[a];
        }
    }
    for v in r.iter_mut() {
        *v *= inv_n;
    }
    (m, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Subject};

    fn s(t: f64, d: bool, x: f64, w: f64, z: f64) -> Subject {
        Subject::new(t, d, x, w, z).unwrap()
    }

    /// Four subjects, one censoring at t = 1 (subject with w=0.5, x=0.2).
    fn censoring_fixture() -> ObservedData {
        Dataset::new(vec![
            s(1.0, false, 0.2, 0.5, 1.0),
            s(2.0, true, 1.0, 1.5, 0.3),
            s(3.0, true, 0.5, -0.5, 2.0),
            s(4.0, true, 1.5, 1.0, -1.0),
        ])
        .unwrap()
        .observed()
    }

    /// Solves a 3x3 system by Cramer's rule.
    fn cramer(m: [[f64; 3]; 3], r: [f64; 3]) -> [f64; 3] {
        let det = |a: [[f64; 3]; 3]| {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        };
        let d = det(m);
        let mut out = [0.0; 3];
        for k in 0..3 {
            let mut mk = m;
            for i in 0..3 {
                mk[i][k] = r[i];
            }
            out[k] = det(mk) / d;
        }
        out
    }

    #[test]
    fn single_censoring_jump_matches_hand_solution() {
        let data = censoring_fixture();
        let fit = fit_a(&data);
        assert_eq!(fit.path.knots(), &[1.0]);
        // A(1-) = 0 so every weight is 1; all four subjects are at risk.
        let rows: [([f64; 3], [f64; 3]); 4] = [
            ([1.0, 0.5, 0.2], [1.0, 1.0, 0.2]),
            ([1.0, 1.5, 1.0], [1.0, 0.3, 1.0]),
            ([1.0, -0.5, 0.5], [1.0, 2.0, 0.5]),
            ([1.0, 1.0, 1.5], [1.0, -1.0, 1.5]),
        ];
        let mut m = [[0.0; 3]; 3];
        for (ins, lk) in rows.iter() {
            for a in 0..3 {
                for b in 0..3 {
                    m[a][b] += ins[a] * lk[b] / 4.0;
                }
            }
        }
        let r = [1.0 / 4.0, 0.5 / 4.0, 0.2 / 4.0];
        let expected = cramer(m, r);
        let got = fit.path.eval(1.0);
        for k in 0..3 {
            assert!((got[k] - expected[k]).abs() < 1e-12, "{got:?} vs {expected:?}");
        }
        assert_eq!(fit.path.eval(0.999), &[0.0, 0.0, 0.0]);
        assert!(fit.diagnostics.max_full_rank_residual(3) <= 1e-10);
    }

    #[test]
    fn single_event_backward_step_matches_hand_solution() {
        // one event at 0.3 < tau = 0.5
        let data = Dataset::new(vec![
            s(0.3, true, 0.2, 0.5, 1.0),
            s(0.7, false, 1.0, 1.5, 0.3),
            s(0.9, true, 0.5, -0.5, 2.0),
            s(1.2, true, 1.5, 1.0, -1.0),
        ])
        .unwrap()
        .observed();
        let fit = fit_b(&data, 0.5).unwrap();
        assert_eq!(fit.path.knots(), &[0.3]);
        // B(0.3+) = 0: instrument (1,z,x), link (1,w,x)
        let rows: [([f64; 3], [f64; 3]); 4] = [
            ([1.0, 1.0, 0.2], [1.0, 0.5, 0.2]),
            ([1.0, 0.3, 1.0], [1.0, 1.5, 1.0]),
            ([1.0, 2.0, 0.5], [1.0, -0.5, 0.5]),
            ([1.0, -1.0, 1.5], [1.0, 1.0, 1.5]),
        ];
        let mut m = [[0.0; 3]; 3];
        for (ins, lk) in rows.iter() {
            for a in 0..3 {
                for b in 0..3 {
                    m[a][b] += ins[a] * lk[b] / 4.0;
                }
            }
        }
        let r = [1.0 / 4.0, 1.0 / 4.0, 0.2 / 4.0];
        let db = cramer(m, r);
        let b0 = fit.path.eval(0.0);
        for k in 0..3 {
            assert!((b0[k] + db[k]).abs() < 1e-12, "{b0:?} vs -{db:?}");
        }
        assert_eq!(fit.path.eval(0.3), &[0.0, 0.0, 0.0]);
        assert_eq!(fit.path.eval(0.5), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn no_jumps_give_zero_paths() {
        let data = Dataset::new(vec![s(1.0, true, 0.1, 0.2, 0.3), s(2.0, true, 0.4, 0.5, 0.6)])
            .unwrap()
            .observed();
        let a = fit_a(&data);
        assert!(a.path.is_empty());
        assert_eq!(a.value(5.0, &data, 0), 1.0);
        let b = fit_b(&data, 0.5).unwrap();
        assert!(b.path.is_empty());
        assert_eq!(b.value(0.0, &data, 1), 1.0);
    }

    #[test]
    fn events_after_horizon_are_ignored() {
        let data = censoring_fixture();
        let b = fit_b(&data, 1.5).unwrap();
        assert!(b.path.is_empty());
        let b = fit_b(&data, 3.0).unwrap();
        assert_eq!(b.path.knots(), &[2.0, 3.0]);
        assert!(b.path.eval(3.0).iter().all(|v| *v == 0.0));
        assert!(fit_b(&data, 0.0).is_err());
    }

    #[test]
    fn rank_deficiency_is_flagged_not_fatal() {
        // identical covariates: M has rank one
        let data = Dataset::new(vec![
            s(1.0, false, 1.0, 1.0, 1.0),
            s(2.0, true, 1.0, 1.0, 1.0),
            s(3.0, true, 1.0, 1.0, 1.0),
        ])
        .unwrap()
        .observed();
        let a = fit_a(&data);
        assert_eq!(a.diagnostics.rank_deficient_jumps(3), 1);
        assert!(a.path.eval(1.0).iter().all(|v| v.is_finite()));
        // min-norm increment reproduces the Nelson-Aalen step 1/3 in the predictor
        let lp: f64 = a.path.eval(1.0).iter().sum();
        assert!((lp - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_system_when_proxies_coincide() {
        let ds = crate::datagen::generate(&crate::datagen::DgpConfig::default(), 200).unwrap();
        let subjects: Vec<Subject> = ds
            .subjects()
            .iter()
            .map(|s| Subject { z: s.w, u: None, ..*s })
            .collect();
        let data = Dataset::new(subjects).unwrap().observed();
        let fit = fit_a(&data);
        let design = BridgeDesign::proximal(Side::Censoring);
        for g in data.jump_groups(JumpKind::Censoring, None) {
            let coef = fit.path.left_limit(g.time).to_vec();
            let (m, _) = jump_system(&data, design, &coef, &g);
            for a in 0..3 {
                for b in 0..3 {
                    assert!((m[a * 3 + b] - m[b * 3 + a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn recursion_matches_jump_system_at_every_knot() {
        let ds = crate::datagen::generate(&crate::datagen::DgpConfig::default(), 300).unwrap();
        let data = ds.observed();
        let fit = fit_b(&data, 0.5).unwrap();
        let design = BridgeDesign::proximal(Side::Event);
        let groups = data.jump_groups(JumpKind::Event, Some(0.5));
        assert_eq!(groups.len(), fit.path.len());
        for (k, g) in groups.iter().enumerate() {
            let after = fit.path.value_at_knot(k).to_vec();
            let before = fit.path.left_limit(g.time).to_vec();
            let (m, r) = jump_system(&data, design, &after, g);
            let step: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
            for a in 0..3 {
                let lhs: f64 = (0..3).map(|b| m[a * 3 + b] * step[b]).sum();
                assert!((lhs - r[a]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn clamp_guard_counts() {
        assert_eq!(clamped_exp(60.0), (LP_CLAMP.exp(), true));
        assert_eq!(clamped_exp(-60.0), ((-LP_CLAMP).exp(), true));
        assert_eq!(clamped_exp(1.0), (1f64.exp(), false));
        let data = Dataset::new(vec![
            s(1.0, false, 0.0, 0.0, 100.0),
            s(2.0, false, 0.0, 0.0, 0.0),
            s(3.0, true, 1.0, 2.0, 3.0),
        ])
        .unwrap()
        .observed();
        let g = &data.jump_groups(JumpKind::Censoring, None)[0];
        let (m, _) = jump_system(&data, BridgeDesign::proximal(Side::Censoring), &[0.0, 1.0, 0.0], g);
        assert!(m.iter().all(|v| v.is_finite()));
    }
}
