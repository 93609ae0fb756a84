//! Synthetic data with a shared latent factor driving both failure and
//! censoring.
//!
//! Draws, per subject and given `(X, U)`:
//!
//! ```text
//! X, U ~ max{N(mu, sd^2), 0}            (independent)
//! Z    ~ N(z0 + zx X + zu U, z_sd^2)    censoring-side proxy
//! W    ~ N(w0 + wx X + wu U, w_sd^2)    event-side proxy
//! T    ~ Exp(t0 + tx X + tu U)
//! C    =  min{Exp(c0 + cx X + cu U), cap}
//! ```
//!
//! Every subject owns a ChaCha8 substream (stream id = subject index), so a
//! dataset does not depend on how generation is scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{check_tau, Dataset, DatasetMeta, Subject};
use crate::error::{Error, Result};
use crate::quadrature::RectifiedNormal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpConfig {
    pub mu_x: f64,
    pub sd_x: f64,
    pub mu_u: f64,
    pub sd_u: f64,
    pub z_intercept: f64,
    pub z_on_x: f64,
    pub z_on_u: f64,
    pub z_sd: f64,
    pub w_intercept: f64,
    pub w_on_x: f64,
    pub w_on_u: f64,
    pub w_sd: f64,
    pub c_intercept: f64,
    pub c_on_x: f64,
    pub c_on_u: f64,
    /// Administrative cap: `C <= c_cap`. May be `inf`.
    pub c_cap: f64,
    pub t_intercept: f64,
    pub t_on_x: f64,
    pub t_on_u: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            mu_x: 1.0,
            sd_x: 0.35,
            mu_u: 1.0,
            sd_u: 0.35,
            z_intercept: 0.2,
            z_on_x: 0.3,
            z_on_u: 0.8,
            z_sd: 0.25,
            w_intercept: 0.2,
            w_on_x: 0.5,
            w_on_u: 0.8,
            w_sd: 0.25,
            c_intercept: 0.2,
            c_on_x: 0.25,
            c_on_u: 0.3,
            c_cap: 3.0,
            t_intercept: 0.3,
            t_on_x: 0.5,
            t_on_u: 0.6,
            seed: 20_230_501,
        }
    }
}

/// Documented key list with defaults, used by `--help` and the README.
pub const DGP_KEYS: &[(&str, &str)] = &[
    ("mu_x", "1.0"),
    ("sd_x", "0.35"),
    ("mu_u", "1.0"),
    ("sd_u", "0.35"),
    ("z_intercept", "0.2"),
    ("z_on_x", "0.3"),
    ("z_on_u", "0.8"),
    ("z_sd", "0.25"),
    ("w_intercept", "0.2"),
    ("w_on_x", "0.5"),
    ("w_on_u", "0.8"),
    ("w_sd", "0.25"),
    ("c_intercept", "0.2"),
    ("c_on_x", "0.25"),
    ("c_on_u", "0.3"),
    ("c_cap", "3.0"),
    ("t_intercept", "0.3"),
    ("t_on_x", "0.5"),
    ("t_on_u", "0.6"),
    ("seed", "20230501"),
];

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("mu_x", self.mu_x),
            ("sd_x", self.sd_x),
            ("mu_u", self.mu_u),
            ("sd_u", self.sd_u),
            ("z_intercept", self.z_intercept),
            ("z_on_x", self.z_on_x),
            ("z_on_u", self.z_on_u),
            ("z_sd", self.z_sd),
            ("w_intercept", self.w_intercept),
            ("w_on_x", self.w_on_x),
            ("w_on_u", self.w_on_u),
            ("w_sd", self.w_sd),
            ("c_intercept", self.c_intercept),
            ("c_on_x", self.c_on_x),
            ("c_on_u", self.c_on_u),
            ("t_intercept", self.t_intercept),
            ("t_on_x", self.t_on_x),
            ("t_on_u", self.t_on_u),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        for (name, v) in [
            ("sd_x", self.sd_x),
            ("sd_u", self.sd_u),
            ("z_sd", self.z_sd),
            ("w_sd", self.w_sd),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [("c_intercept", self.c_intercept), ("t_intercept", self.t_intercept)] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("c_on_x", self.c_on_x),
            ("c_on_u", self.c_on_u),
            ("t_on_x", self.t_on_x),
            ("t_on_u", self.t_on_u),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.c_cap > 0.0) {
            return Err(Error::Config(format!("c_cap must be > 0, got {}", self.c_cap)));
        }
        Ok(())
    }

    pub fn x_law(&self) -> RectifiedNormal {
        RectifiedNormal::new(self.mu_x, self.sd_x)
    }

    pub fn u_law(&self) -> RectifiedNormal {
        RectifiedNormal::new(self.mu_u, self.sd_u)
    }

    #[inline]
    pub fn event_rate(&self, x: f64, u: f64) -> f64 {
        self.t_intercept + self.t_on_x * x + self.t_on_u * u
    }

    #[inline]
    pub fn censoring_rate(&self, x: f64, u: f64) -> f64 {
        self.c_intercept + self.c_on_x * x + self.c_on_u * u
    }

    #[inline]
    pub fn z_mean(&self, x: f64, u: f64) -> f64 {
        self.z_intercept + self.z_on_x * x + self.z_on_u * u
    }

    #[inline]
    pub fn w_mean(&self, x: f64, u: f64) -> f64 {
        self.w_intercept + self.w_on_x * x + self.w_on_u * u
    }

    /// Short stable fingerprint of every field, recorded in dataset metadata.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(text.as_bytes()))
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DgpConfig {
            seed,
            ..self.clone()
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; derives independent child seeds from a master seed.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(0x94d0_49bb_1331_11eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Random stream dedicated to one item of a seeded collection.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One full-data draw, including the quantities never observed in practice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FullDraw {
    pub x: f64,
    pub u: f64,
    pub z: f64,
    pub w: f64,
    pub t: f64,
    pub c: f64,
}

impl FullDraw {
    pub fn t_tilde(&self) -> f64 {
        self.t.min(self.c)
    }

    pub fn delta(&self) -> bool {
        self.t <= self.c
    }
}

#[inline]
pub fn draw_full<R: Rng + ?Sized>(cfg: &DgpConfig, rng: &mut R) -> FullDraw {
    let n = |rng: &mut R| -> f64 { rng.sample(StandardNormal) };
    let x = (cfg.mu_x + cfg.sd_x * n(rng)).max(0.0);
    let u = (cfg.mu_u + cfg.sd_u * n(rng)).max(0.0);
    let z = cfg.z_mean(x, u) + cfg.z_sd * n(rng);
    let w = cfg.w_mean(x, u) + cfg.w_sd * n(rng);
    let e1: f64 = rng.sample(Exp1);
    let t = e1 / cfg.event_rate(x, u);
    let e2: f64 = rng.sample(Exp1);
    let c = (e2 / cfg.censoring_rate(x, u)).min(cfg.c_cap);
    FullDraw { x, u, z, w, t, c }
}

/// `n` subjects drawn from `cfg`, deterministic in `cfg.seed`.
pub fn generate(cfg: &DgpConfig, n: usize) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    let subjects: Vec<Subject> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(cfg.seed, i);
            let d = draw_full(cfg, &mut rng);
            Subject {
                t_tilde: d.t_tilde(),
                delta: d.delta(),
                x: d.x,
                w: d.w,
                z: d.z,
                u: Some(d.u),
            }
        })
        .collect();
    Ok(Dataset::new(subjects)?.with_meta(DatasetMeta {
        config_digest: Some(cfg.digest()),
        seed: Some(cfg.seed),
    }))
}

/// `theta0 = P(T > tau) = E[exp{-tau (t0 + tx X + tu U)}]` by adaptive
/// quadrature over each rectified normal (`X` and `U` are independent).
pub fn true_theta(cfg: &DgpConfig, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let tol = 1e-12;
    let ex = cfg.x_law().expect(|x| (-tau * cfg.t_on_x * x).exp(), tol);
    let eu = cfg.u_law().expect(|u| (-tau * cfg.t_on_u * u).exp(), tol);
    Ok((-tau * cfg.t_intercept).exp() * ex * eu)
}

/// Population censoring fraction `P(C < T)` by tensor Gauss-Legendre
/// quadrature over `(X, U)`, using the closed form given the latent pair.
pub fn censoring_probability(cfg: &DgpConfig) -> Result<f64> {
    cfg.validate()?;
    let xs = cfg.x_law().rule(24, 20);
    let us = cfg.u_law().rule(24, 20);
    let mut acc = 0.0;
    for &(x, wx) in &xs {
        for &(u, wu) in &us {
            let lc = cfg.censoring_rate(x, u);
            let total = lc + cfg.event_rate(x, u);
            // P(Exp(lc) < min(Exp(lt), cap)); the cap itself yields C < T when T > cap
            let before_cap = lc / total * (1.0 - (-cfg.c_cap * total).exp());
            let at_cap = if cfg.c_cap.is_finite() {
                (-cfg.c_cap * total).exp()
            } else {
                0.0
            };
            acc += wx * wu * (before_cap + at_cap);
        }
    }
    Ok(acc)
}

/// Monte Carlo estimate of `P(T > tau)` from `draws` simulated event times.
/// Returns `(estimate, standard error)`.
pub fn true_theta_monte_carlo(cfg: &DgpConfig, tau: f64, draws: usize, seed: u64) -> Result<(f64, f64)> {
    check_tau(tau)?;
    cfg.validate()?;
    const CHUNK: usize = 1 << 16;
    let chunks = draws.div_ceil(CHUNK);
    let hits: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(seed, c as u64);
            let m = CHUNK.min(draws - c * CHUNK);
            let mut k = 0u64;
            for _ in 0..m {
                let x = (cfg.mu_x + cfg.sd_x * rng.sample::<f64, _>(StandardNormal)).max(0.0);
                let u = (cfg.mu_u + cfg.sd_u * rng.sample::<f64, _>(StandardNormal)).max(0.0);
                let e: f64 = rng.sample(Exp1);
                if e / cfg.event_rate(x, u) > tau {
                    k += 1;
                }
            }
            k
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    let p = hits as f64 / draws as f64;
    Ok((p, (p * (1.0 - p) / draws as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::std_normal_cdf;

    fn rectified_mgf(mu: f64, sd: f64, c: f64) -> f64 {
        // E[exp(-c max(N(mu, sd^2), 0))]
        std_normal_cdf(-mu / sd) + (-c * mu + c * c * sd * sd / 2.0).exp() * std_normal_cdf((mu - c * sd * sd) / sd)
    }

    #[test]
    fn default_config_reproduces_the_simulation_design() {
        let c = DgpConfig::default();
        assert_eq!((c.mu_x, c.sd_x, c.mu_u, c.sd_u), (1.0, 0.35, 1.0, 0.35));
        assert_eq!((c.z_intercept, c.z_on_x, c.z_on_u, c.z_sd), (0.2, 0.3, 0.8, 0.25));
        assert_eq!((c.w_intercept, c.w_on_x, c.w_on_u, c.w_sd), (0.2, 0.5, 0.8, 0.25));
        assert_eq!((c.c_intercept, c.c_on_x, c.c_on_u, c.c_cap), (0.2, 0.25, 0.3, 3.0));
        assert_eq!((c.t_intercept, c.t_on_x, c.t_on_u), (0.3, 0.5, 0.6));
        assert_eq!(DGP_KEYS.len(), 20);
    }

    #[test]
    fn true_theta_matches_closed_form() {
        let c = DgpConfig::default();
        let q = true_theta(&c, 0.5).unwrap();
        let exact = (-0.5_f64 * 0.3).exp() * rectified_mgf(1.0, 0.35, 0.25) * rectified_mgf(1.0, 0.35, 0.3);
        assert!((q - exact).abs() < 1e-10, "{q} vs {exact}");
        assert!((q - 0.5013).abs() < 5e-4, "{q}");
    }

    #[test]
    fn true_theta_edge_cases() {
        let c = DgpConfig::default();
        assert!((true_theta(&c, 1e-9).unwrap() - 1.0).abs() < 1e-8);
        let flat = DgpConfig {
            t_intercept: 0.7,
            t_on_x: 0.0,
            t_on_u: 0.0,
            ..c.clone()
        };
        assert!((true_theta(&flat, 0.5).unwrap() - (-0.35_f64).exp()).abs() < 1e-11);
        assert!(true_theta(&c, 0.0).is_err());
    }

    #[test]
    fn true_theta_monotone_in_hazard() {
        let base = DgpConfig::default();
        let t0 = true_theta(&base, 0.5).unwrap();
        for bump in [
            DgpConfig { t_intercept: 0.4, ..base.clone() },
            DgpConfig { t_on_x: 0.6, ..base.clone() },
            DgpConfig { t_on_u: 0.7, ..base.clone() },
        ] {
            assert!(true_theta(&bump, 0.5).unwrap() <= t0);
        }
    }

    #[test]
    fn validation_names_violated_constraint() {
        let c = DgpConfig {
            c_intercept: 0.0,
            c_on_x: 0.0,
            c_on_u: 0.0,
            ..DgpConfig::default()
        };
        let e = generate(&c, 10).unwrap_err().to_string();
        assert!(e.contains("c_intercept"), "{e}");
        let c = DgpConfig { t_on_u: -0.1, ..DgpConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("t_on_u"));
        let c = DgpConfig { c_cap: 0.0, ..DgpConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("c_cap"));
        assert!(generate(&DgpConfig::default(), 0).is_err());
    }

    #[test]
    fn generation_is_seed_deterministic_and_rectified() {
        let c = DgpConfig::default();
        let a = generate(&c, 500).unwrap();
        let b = generate(&c, 500).unwrap();
        assert_eq!(a, b);
        // prefix stability: subject i depends only on (seed, i)
        let longer = generate(&c, 800).unwrap();
        assert_eq!(&longer.subjects()[..500], a.subjects());
        let other = generate(&c.with_seed(7), 500).unwrap();
        assert_ne!(a, other);
        for s in a.subjects() {
            assert!(s.x >= 0.0 && s.u.unwrap() >= 0.0);
            assert!(s.t_tilde <= 3.0);
        }
    }

    #[test]
    fn censoring_fraction_matches_population_value() {
        let c = DgpConfig::default();
        let p = censoring_probability(&c).unwrap();
        // direct simulation of (C, T) with 4e6 draws: 0.3518 (se 2.4e-4)
        assert!((p - 0.3518).abs() < 1e-3, "{p}");
        let se = (p * (1.0 - p) / 1500.0).sqrt();
        for seed in [1u64, 2, 3] {
            let f = generate(&c.with_seed(seed), 1500).unwrap().censoring_fraction();
            assert!((f - p).abs() < 4.0 * se, "seed {seed}: {f} vs {p}");
        }
    }

    #[test]
    #[ignore = "the stated design censors about 35% of subjects, not 30%"]
    fn censoring_rate_is_about_thirty_percent() {
        let c = DgpConfig::default();
        for seed in [1u64, 2, 3] {
            let ds = generate(&c.with_seed(seed), 1500).unwrap();
            let f = ds.censoring_fraction();
            assert!((0.27..=0.33).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn vanishing_censoring_hazard() {
        let c = DgpConfig {
            c_intercept: 1e-8,
            c_on_x: 0.0,
            c_on_u: 0.0,
            c_cap: 1e12,
            ..DgpConfig::default()
        };
        let ds = generate(&c, 2000).unwrap();
        assert!(ds.subjects().iter().all(|s| s.delta));
    }
}
