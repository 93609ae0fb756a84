//! Records, datasets, step paths and counting-process views.
//!
//! Estimators never see [`Subject`] directly. They work on [`ObservedData`],
//! a columnar view that drops the latent factor and stores subjects in a
//! canonical order, so every downstream sum runs in the same order whatever
//! order the records arrived in.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One right-censored record with its proxy covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    /// Observed time `min(T, C)`.
    pub t_tilde: f64,
    /// `true` when the event of interest was observed first.
    pub delta: bool,
    pub x: f64,
    /// Event-side proxy.
    pub w: f64,
    /// Censoring-side proxy.
    pub z: f64,
    /// Latent factor, only present in synthetic oracle-mode data.
    pub u: Option<f64>,
}

impl Subject {
    pub fn new(t_tilde: f64, delta: bool, x: f64, w: f64, z: f64) -> Result<Self> {
        let s = Subject {
            t_tilde,
            delta,
            x,
            w,
            z,
            u: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_latent(mut self, u: f64) -> Self {
        self.u = Some(u);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.t_tilde >= 0.0) || !self.t_tilde.is_finite() {
            return Err(Error::Input(format!(
                "t_tilde must be finite and nonnegative, got {}",
                self.t_tilde
            )));
        }
        for (name, v) in [("x", self.x), ("w", self.w), ("z", self.z)] {
            if !v.is_finite() {
                return Err(Error::Input(format!("{name} must be finite, got {v}")));
            }
        }
        if let Some(u) = self.u {
            if !u.is_finite() {
                return Err(Error::Input(format!("u must be finite, got {u}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config_digest: Option<String>,
    pub seed: Option<u64>,
}

/// A nonempty collection of subjects in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    subjects: Vec<Subject>,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Input("dataset must contain at least one subject".into()));
        }
        let has_u = subjects[0].u.is_some();
        for (i, s) in subjects.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::Input(format!("subject {i}: {e}")))?;
            if s.u.is_some() != has_u {
                return Err(Error::Input(format!(
                    "subject {i}: latent factor present on some subjects but not others"
                )));
            }
        }
        Ok(Dataset {
            subjects,
            meta: DatasetMeta::default(),
        })
    }

    pub fn with_meta(mut self, meta: DatasetMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn has_latent(&self) -> bool {
        self.subjects[0].u.is_some()
    }

    pub fn censoring_fraction(&self) -> f64 {
        let c = self.subjects.iter().filter(|s| !s.delta).count();
        c as f64 / self.len() as f64
    }

    /// Observed times in increasing order; equal times keep input order.
    pub fn sorted_times(&self) -> Vec<(f64, usize)> {
        let mut v: Vec<(f64, usize)> = self
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| (s.t_tilde, i))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }

    pub fn observed(&self) -> ObservedData {
        ObservedData::from_subjects(&self.subjects)
    }

    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref()).map_err(|e| {
            Error::Input(format!("cannot open {}: {e}", path.as_ref().display()))
        })?;
        Self::from_csv_reader(f)
    }

    /// Parses the `t_tilde,delta,x,w,z[,u]` format. Columns are matched by
    /// header name, so their order does not matter.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let mut idx = [0usize; 5];
        let mut missing = Vec::new();
        for (k, name) in ["t_tilde", "delta", "x", "w", "z"].iter().enumerate() {
            match col(name) {
                Some(i) => idx[k] = i,
                None => missing.push(*name),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Input(format!(
                "missing column(s) in dataset CSV: {}",
                missing.join(", ")
            )));
        }
        let u_col = col("u");
        for h in headers.iter() {
            if !["t_tilde", "delta", "x", "w", "z", "u"].contains(&h) {
                return Err(Error::Input(format!("unexpected column {h:?} in dataset CSV")));
            }
        }

        let mut subjects = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = line + 2;
            let num = |i: usize, name: &str| -> Result<f64> {
                let raw = rec.get(i).unwrap_or("");
                raw.parse::<f64>().map_err(|_| {
                    Error::Input(format!("row {row}: cannot parse {name} value {raw:?}"))
                })
            };
            let delta = match rec.get(idx[1]).unwrap_or("") {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Input(format!(
                        "row {row}: delta must be 0 or 1, got {other:?}"
                    )))
                }
            };
            let mut s = Subject {
                t_tilde: num(idx[0], "t_tilde")?,
                delta,
                x: num(idx[2], "x")?,
                w: num(idx[3], "w")?,
                z: num(idx[4], "z")?,
                u: None,
            };
            if let Some(ui) = u_col {
                s.u = Some(num(ui, "u")?);
            }
            s.validate()
                .map_err(|e| Error::Input(format!("row {row}: {e}")))?;
            subjects.push(s);
        }
        Dataset::new(subjects)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if self.has_latent() {
            w.write_record(["t_tilde", "delta", "x", "w", "z", "u"])?;
        } else {
            w.write_record(["t_tilde", "delta", "x", "w", "z"])?;
        }
        for s in &self.subjects {
            let mut row = vec![
                s.t_tilde.to_string(),
                if s.delta { "1".into() } else { "0".into() },
                s.x.to_string(),
                s.w.to_string(),
                s.z.to_string(),
            ];
            if let Some(u) = s.u {
                row.push(u.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Which counting process a jump belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JumpKind {
    /// `N_T`: jumps at observed event times (`delta = 1`).
    Event,
    /// `N_C`: jumps at observed censoring times (`delta = 0`).
    Censoring,
}

impl JumpKind {
    fn matches(self, delta: bool) -> bool {
        match self {
            JumpKind::Event => delta,
            JumpKind::Censoring => !delta,
        }
    }
}

/// Jump times of `N_T` or `N_C` in increasing order, each with the (input
/// order) indices of the subjects jumping there.
pub fn counting_increments(dataset: &Dataset, kind: JumpKind) -> Vec<(f64, Vec<usize>)> {
    let mut out: Vec<(f64, Vec<usize>)> = Vec::new();
    for (t, i) in dataset.sorted_times() {
        if !kind.matches(dataset.subjects[i].delta) {
            continue;
        }
        match out.last_mut() {
            Some((last, members)) if last.to_bits() == t.to_bits() => members.push(i),
            _ => out.push((t, vec![i])),
        }
    }
    out
}

/// `(T_D, Delta_D)` for the functional `1(T > tau) - theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedTimes {
    pub t_d: f64,
    pub delta_d: bool,
}

pub fn derived_times(subject: &Subject, tau: f64) -> Result<DerivedTimes> {
    check_tau(tau)?;
    Ok(derive(subject.t_tilde, subject.delta, tau))
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Input(format!("tau must be positive and finite, got {tau}")));
    }
    Ok(())
}

#[inline]
fn derive(t_tilde: f64, delta: bool, tau: f64) -> DerivedTimes {
    DerivedTimes {
        t_d: t_tilde.min(tau),
        delta_d: delta || t_tilde >= tau,
    }
}

/// Right-continuous, piecewise-constant, vector-valued function of time.
///
/// `eval(t)` returns the value stored at the greatest knot `<= t`, or the
/// initial vector when `t` precedes every knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPath {
    dim: usize,
    initial: Vec<f64>,
    knots: Vec<f64>,
    // row-major, one row of length `dim` per knot
    values: Vec<f64>,
}

impl StepPath {
    pub fn new(initial: Vec<f64>, knots: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let dim = initial.len();
        if dim == 0 {
            return Err(Error::Input("step path needs a nonzero dimension".into()));
        }
        if knots.len() != values.len() {
            return Err(Error::Input("one value vector per knot is required".into()));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Input("knots must be strictly increasing".into()));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::Input("knots must be finite".into()));
        }
        let mut flat = Vec::with_capacity(dim * knots.len());
        for v in &values {
            if v.len() != dim {
                return Err(Error::Input("value vectors must share the initial dimension".into()));
            }
            flat.extend_from_slice(v);
        }
        if initial.iter().chain(flat.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("step path values must be finite".into()));
        }
        Ok(StepPath {
            dim,
            initial,
            knots,
            values: flat,
        })
    }

    pub(crate) fn from_parts(dim: usize, initial: Vec<f64>, knots: Vec<f64>, values: Vec<f64>) -> Self {
        debug_assert_eq!(initial.len(), dim);
        debug_assert_eq!(values.len(), dim * knots.len());
        StepPath {
            dim,
            initial,
            knots,
            values,
        }
    }

    pub fn zero(dim: usize) -> Self {
        StepPath {
            dim,
            initial: vec![0.0; dim],
            knots: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn value_at_knot(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the value in force at `t`: `None` means the initial vector.
    #[inline]
    pub fn segment(&self, t: f64) -> Option<usize> {
        let p = self.knots.partition_point(|&k| k <= t);
        p.checked_sub(1)
    }

    #[inline]
    pub fn eval(&self, t: f64) -> &[f64] {
        match self.segment(t) {
            Some(k) => self.value_at_knot(k),
            None => &self.initial,
        }
    }

    /// Left limit `path(t-)`.
    #[inline]
    pub fn left_limit(&self, t: f64) -> &[f64] {
        let p = self.knots.partition_point(|&k| k < t);
        match p.checked_sub(1) {
            Some(k) => self.value_at_knot(k),
            None => &self.initial,
        }
    }

    /// Adds `offset` to every value, including the initial one.
    pub fn offset_all(&self, offset: &[f64]) -> Self {
        assert_eq!(offset.len(), self.dim);
        let mut out = self.clone();
        for (v, o) in out.initial.iter_mut().zip(offset) {
            *v += o;
        }
        for row in out.values.chunks_mut(self.dim) {
            for (v, o) in row.iter_mut().zip(offset) {
                *v += o;
            }
        }
        out
    }

    /// Adds `offset` on `[start, inf)` only, inserting a knot at `start` when
    /// needed. Values before `start` are untouched.
    pub fn offset_from(&self, offset: &[f64], start: f64) -> Self {
        assert_eq!(offset.len(), self.dim);
        let mut knots = Vec::with_capacity(self.knots.len() + 1);
        let mut values = Vec::with_capacity(self.values.len() + self.dim);
        let mut inserted = false;
        for (k, &t) in self.knots.iter().enumerate() {
            if !inserted && t > start {
                knots.push(start);
                let base = self.left_limit(start);
                values.extend(base.iter().zip(offset).map(|(v, o)| v + o));
                inserted = true;
            }
            let row = self.value_at_knot(k);
            knots.push(t);
            if t >= start {
                inserted = true;
                values.extend(row.iter().zip(offset).map(|(v, o)| v + o));
            } else {
                values.extend_from_slice(row);
            }
        }
        if !inserted {
            knots.push(start);
            let base = self.eval(start);
            values.extend(base.iter().zip(offset).map(|(v, o)| v + o));
        }
        StepPath {
            dim: self.dim,
            initial: self.initial.clone(),
            knots,
            values,
        }
    }

    /// Largest absolute difference between two paths over the union of their
    /// knots (and time zero).
    pub fn sup_distance(&self, other: &StepPath) -> f64 {
        assert_eq!(self.dim, other.dim);
        let mut times: Vec<f64> = self.knots.iter().chain(other.knots.iter()).copied().collect();
        times.push(0.0);
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut worst: f64 = 0.0;
        for &t in &times {
            for (a, b) in self.eval(t).iter().zip(other.eval(t)) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    /// Writes `time,c0,c1,...` rows; the first row holds the initial vector at
    /// time `-inf`.
    pub fn write_csv<W: Write>(&self, writer: W, names: &[&str]) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["time".to_string()];
        for d in 0..self.dim {
            header.push(names.get(d).map(|s| s.to_string()).unwrap_or(format!("c{d}")));
        }
        w.write_record(&header)?;
        let mut row = vec!["-inf".to_string()];
        row.extend(self.initial.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
        for (k, t) in self.knots.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(self.value_at_knot(k).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Jump of one counting process at one time, in canonical index space.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpGroup {
    pub time: f64,
    /// First canonical index with `t_tilde >= time`; the at-risk set is
    /// `at_risk_start..n`.
    pub at_risk_start: usize,
    /// Subjects jumping at `time`.
    pub members: Range<usize>,
}

/// Columnar, latent-free view of a dataset in canonical order.
///
/// Canonical order sorts by `(t_tilde, delta, x, w, z)` with `f64::total_cmp`.
/// At a shared time censorings therefore precede events, and fully identical
/// records are interchangeable, so any permutation of the input produces the
/// same view.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedData {
    pub(crate) t: Vec<f64>,
    pub(crate) delta: Vec<bool>,
    pub(crate) x: Vec<f64>,
    pub(crate) w: Vec<f64>,
    pub(crate) z: Vec<f64>,
}

fn canonical_cmp(a: &Subject, b: &Subject) -> Ordering {
    a.t_tilde
        .total_cmp(&b.t_tilde)
        .then(a.delta.cmp(&b.delta))
        .then(a.x.total_cmp(&b.x))
        .then(a.w.total_cmp(&b.w))
        .then(a.z.total_cmp(&b.z))
}

impl ObservedData {
    pub fn from_subjects(subjects: &[Subject]) -> Self {
        let mut sorted: Vec<&Subject> = subjects.iter().collect();
        sorted.sort_by(|a, b| canonical_cmp(a, b));
        ObservedData {
            t: sorted.iter().map(|s| s.t_tilde).collect(),
            delta: sorted.iter().map(|s| s.delta).collect(),
            x: sorted.iter().map(|s| s.x).collect(),
            w: sorted.iter().map(|s| s.w).collect(),
            z: sorted.iter().map(|s| s.z).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn deltas(&self) -> &[bool] {
        &self.delta
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// Gathers the given canonical indices. Nondecreasing `indices` keep the
    /// result canonical; other orders are re-sorted.
    pub fn select(&self, indices: &[usize]) -> ObservedData {
        let gather = |v: &[f64]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let out = ObservedData {
            t: gather(&self.t),
            delta: indices.iter().map(|&i| self.delta[i]).collect(),
            x: gather(&self.x),
            w: gather(&self.w),
            z: gather(&self.z),
        };
        if indices.windows(2).all(|p| p[0] <= p[1]) {
            out
        } else {
            ObservedData::from_subjects(&out.to_subjects())
        }
    }

    pub fn to_subjects(&self) -> Vec<Subject> {
        (0..self.len())
            .map(|i| Subject {
                t_tilde: self.t[i],
                delta: self.delta[i],
                x: self.x[i],
                w: self.w[i],
                z: self.z[i],
                u: None,
            })
            .collect()
    }

    #[inline]
    pub fn derived(&self, i: usize, tau: f64) -> DerivedTimes {
        derive(self.t[i], self.delta[i], tau)
    }

    /// Whether `1(T > tau)` is known to hold: observed beyond `tau`, or
    /// censored exactly at `tau` (which implies `T > tau`).
    #[inline]
    pub fn survives_past(&self, i: usize, tau: f64) -> bool {
        self.t[i] > tau || (self.t[i] == tau && !self.delta[i])
    }

    pub fn count(&self, kind: JumpKind) -> usize {
        self.delta.iter().filter(|&&d| kind.matches(d)).count()
    }

    /// Jump groups of `N_T` or `N_C` in increasing time order. With
    /// `until = Some(h)` only jumps at times `<= h` are returned.
    pub fn jump_groups(&self, kind: JumpKind, until: Option<f64>) -> Vec<JumpGroup> {
        let n = self.len();
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            let t = self.t[i];
            if let Some(h) = until {
                if t > h {
                    break;
                }
            }
            let at_risk_start = i;
            let mut j = i;
            while j < n && self.t[j].to_bits() == t.to_bits() {
                j += 1;
            }
            // within [i, j) censorings come first
            let split = i + self.delta[i..j].iter().take_while(|d| !**d).count();
            let members = match kind {
                JumpKind::Censoring => i..split,
                JumpKind::Event => split..j,
            };
            if !members.is_empty() {
                out.push(JumpGroup {
                    time: t,
                    at_risk_start,
                    members,
                });
            }
            i = j;
        }
        out
    }

    /// Fraction of subjects with `1(T > tau)` observed, the natural estimate
    /// when nobody is censored before `tau`.
    pub fn empirical_survival(&self, tau: f64) -> f64 {
        let k = (0..self.len()).filter(|&i| self.survives_past(i, tau)).count();
        k as f64 / self.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subj(t: f64, d: bool) -> Subject {
        Subject::new(t, d, 0.0, 0.0, 0.0).unwrap()
    }

    #[test]
    fn increments_from_definition() {
        let ds = Dataset::new(vec![subj(1.0, false), subj(2.0, true), subj(2.0, true)]).unwrap();
        let ev = counting_increments(&ds, JumpKind::Event);
        assert_eq!(ev, vec![(2.0, vec![1, 2])]);
        let ce = counting_increments(&ds, JumpKind::Censoring);
        assert_eq!(ce, vec![(1.0, vec![0])]);
    }

    #[test]
    fn no_censoring_means_no_censoring_increments() {
        let ds = Dataset::new(vec![subj(1.0, true), subj(0.5, true)]).unwrap();
        assert!(counting_increments(&ds, JumpKind::Censoring).is_empty());
        assert_eq!(counting_increments(&ds, JumpKind::Event).len(), 2);
    }

    #[test]
    fn derived_time_rules() {
        let d = derived_times(&subj(0.7, false), 0.5).unwrap();
        assert_eq!(d, DerivedTimes { t_d: 0.5, delta_d: true });
        let d = derived_times(&subj(0.3, true), 0.5).unwrap();
        assert_eq!(d, DerivedTimes { t_d: 0.3, delta_d: true });
        let d = derived_times(&subj(0.3, false), 0.5).unwrap();
        assert_eq!(d, DerivedTimes { t_d: 0.3, delta_d: false });
        // exactly at tau counts as observed
        let d = derived_times(&subj(0.5, false), 0.5).unwrap();
        assert_eq!(d, DerivedTimes { t_d: 0.5, delta_d: true });
        assert!(derived_times(&subj(0.3, false), 0.0).is_err());
        assert!(derived_times(&subj(0.3, false), -1.0).is_err());
    }

    #[test]
    fn rejects_bad_subjects() {
        assert!(Subject::new(-0.1, true, 0.0, 0.0, 0.0).is_err());
        assert!(Subject::new(f64::NAN, true, 0.0, 0.0, 0.0).is_err());
        assert!(Subject::new(1.0, true, f64::INFINITY, 0.0, 0.0).is_err());
        assert!(Dataset::new(vec![]).is_err());
        let mixed = vec![subj(1.0, true), subj(1.0, true).with_latent(0.3)];
        assert!(Dataset::new(mixed).is_err());
    }

    #[test]
    fn step_path_evaluation() {
        let p = StepPath::new(vec![0.0], vec![1.0, 2.0], vec![vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(p.eval(0.5), &[0.0]);
        assert_eq!(p.eval(1.0), &[1.0]);
        assert_eq!(p.eval(1.7), &[1.0]);
        assert_eq!(p.eval(2.0), &[3.0]);
        assert_eq!(p.eval(100.0), &[3.0]);
        assert_eq!(p.left_limit(1.0), &[0.0]);
        assert_eq!(p.left_limit(2.0), &[1.0]);
        assert!(StepPath::new(vec![0.0], vec![1.0, 1.0], vec![vec![1.0], vec![3.0]]).is_err());
        assert!(StepPath::new(vec![0.0], vec![1.0], vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn offset_from_inserts_knot() {
        let p = StepPath::new(vec![0.0], vec![1.0, 2.0], vec![vec![1.0], vec![3.0]]).unwrap();
        let q = p.offset_from(&[0.5], 0.25);
        assert_eq!(q.knots(), &[0.25, 1.0, 2.0]);
        assert_eq!(q.eval(0.0), &[0.0]);
        assert_eq!(q.eval(0.3), &[0.5]);
        assert_eq!(q.eval(1.5), &[1.5]);
        let r = p.offset_from(&[0.5], 1.0);
        assert_eq!(r.knots(), &[1.0, 2.0]);
        assert_eq!(r.eval(0.5), &[0.0]);
        assert_eq!(r.eval(1.0), &[1.5]);
        let s = p.offset_from(&[0.5], 5.0);
        assert_eq!(s.eval(5.0), &[3.5]);
        assert_eq!(s.eval(4.0), &[3.0]);
    }

    #[test]
    fn jump_groups_put_censoring_first_at_ties() {
        let ds = Dataset::new(vec![
            subj(2.0, true),
            subj(1.0, true),
            subj(2.0, false),
            subj(3.0, false),
        ])
        .unwrap();
        let obs = ds.observed();
        assert_eq!(obs.times(), &[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(obs.deltas(), &[true, false, true, false]);
        let ev = obs.jump_groups(JumpKind::Event, None);
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[1].time, 2.0);
        assert_eq!(ev[1].at_risk_start, 1);
        assert_eq!(ev[1].members, 2..3);
        let ce = obs.jump_groups(JumpKind::Censoring, Some(2.5));
        assert_eq!(ce.len(), 1);
        assert_eq!(ce[0].members, 1..2);
    }

    #[test]
    fn csv_roundtrip_and_missing_columns() {
        let ds = Dataset::new(vec![
            Subject::new(0.25, true, 1.0, 0.1, -0.3).unwrap().with_latent(0.8),
            Subject::new(1.0 / 3.0, false, 0.9, 0.2, 0.4).unwrap().with_latent(1.1),
        ])
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::from_csv_reader(buf.as_slice()).unwrap();
        assert_eq!(back, ds);

        let bad = "t_tilde,delta,x,z\n1,1,0,0\n";
        let err = Dataset::from_csv_reader(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("missing column(s) in dataset CSV: w"), "{err}");
        let bad_delta = "t_tilde,delta,x,w,z\n1,2,0,0,0\n";
        assert!(Dataset::from_csv_reader(bad_delta.as_bytes()).is_err());
    }
}
