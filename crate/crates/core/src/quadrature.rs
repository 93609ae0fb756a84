//! Gauss-Legendre quadrature and expectations over rectified normals.

use statrs::function::erf::erfc;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on the Legendre recurrence.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1);
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_and_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_and_derivative(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

/// Adaptive bisection driven by the gap between a 10-point rule on a panel
/// and the same rule on its two halves.
pub fn adaptive_gauss_legendre<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let rule = GaussLegendre::new(10);
    let whole = rule.integrate(f, a, b);
    adapt(f, &rule, a, b, whole, tol, 0)
}

fn adapt<F: Fn(f64) -> f64>(
    f: &F,
    rule: &GaussLegendre,
    a: f64,
    b: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    let mid = 0.5 * (a + b);
    let left = rule.integrate(f, a, mid);
    let right = rule.integrate(f, mid, b);
    let refined = left + right;
    if (refined - whole).abs() <= tol || depth >= 40 {
        return refined;
    }
    adapt(f, rule, a, mid, left, 0.5 * tol, depth + 1)
        + adapt(f, rule, mid, b, right, 0.5 * tol, depth + 1)
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Law of `max{N(mu, sd^2), 0}`: an atom at zero of mass `Phi(-mu/sd)` plus
/// the normal density on `(0, inf)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectifiedNormal {
    pub mu: f64,
    pub sd: f64,
}

/// A discrete rule `(value, weight)` whose weights sum to one.
pub type DiscreteRule = Vec<(f64, f64)>;

impl RectifiedNormal {
    pub fn new(mu: f64, sd: f64) -> Self {
        RectifiedNormal { mu, sd }
    }

    pub fn atom_mass(&self) -> f64 {
        if self.sd == 0.0 {
            return if self.mu <= 0.0 { 1.0 } else { 0.0 };
        }
        std_normal_cdf(-self.mu / self.sd)
    }

    fn upper(&self) -> f64 {
        self.mu.max(0.0) + 12.0 * self.sd
    }

    fn density(&self, x: f64) -> f64 {
        std_normal_pdf((x - self.mu) / self.sd) / self.sd
    }

    /// `E[f(V)]` to absolute tolerance `tol` (for integrands bounded by one
    /// in magnitude over the bulk of the law).
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F, tol: f64) -> f64 {
        if self.sd == 0.0 {
            return f(self.mu.max(0.0));
        }
        let atom = self.atom_mass() * f(0.0);
        let g = |x: f64| f(x) * self.density(x);
        atom + adaptive_gauss_legendre(&g, 0.0, self.upper(), tol)
    }

    /// Fixed composite rule with `panels * order` continuous nodes plus the
    /// atom at zero.
    pub fn rule(&self, panels: usize, order: usize) -> DiscreteRule {
        if self.sd == 0.0 {
            return vec![(self.mu.max(0.0), 1.0)];
        }
        let gl = GaussLegendre::new(order);
        let mut out = Vec::with_capacity(panels * order + 1);
        let atom = self.atom_mass();
        if atom > 0.0 {
            out.push((0.0, atom));
        }
        let hi = self.upper();
        let width = hi / panels as f64;
        for p in 0..panels {
            let a = p as f64 * width;
            let half = 0.5 * width;
            let mid = a + half;
            for (x, w) in gl.nodes.iter().zip(&gl.weights) {
                let v = mid + half * x;
                out.push((v, w * half * self.density(v)));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let gl = GaussLegendre::new(5);
        // degree 9 exact
        let v = gl.integrate(|x| x.powi(8) + x.powi(3), -1.0, 1.0);
        assert!((v - 2.0 / 9.0).abs() < 1e-14);
        let s: f64 = gl.weights.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
    }

    #[test]
    fn adaptive_handles_peaks() {
        let v = adaptive_gauss_legendre(&|x: f64| (-(x - 0.3).powi(2) * 1e4).exp(), 0.0, 1.0, 1e-12);
        let exact = (std::f64::consts::PI / 1e4).sqrt();
        assert!((v - exact).abs() < 1e-10);
    }

    #[test]
    fn rectified_normal_closed_form() {
        // E[exp(-c V)] = Phi(-mu/s) + exp(-c mu + c^2 s^2 / 2) Phi((mu - c s^2)/s)
        let rn = RectifiedNormal::new(1.0, 0.35);
        for c in [0.0, 0.25, 0.3, 1.7] {
            let q = rn.expect(|v| (-c * v).exp(), 1e-12);
            let exact = std_normal_cdf(-1.0 / 0.35)
                + (-c * 1.0 + c * c * 0.35 * 0.35 / 2.0).exp()
                    * std_normal_cdf((1.0 - c * 0.35 * 0.35) / 0.35);
            assert!((q - exact).abs() < 1e-10, "c={c}: {q} vs {exact}");
        }
        let mass: f64 = rn.rule(8, 16).iter().map(|p| p.1).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_law_is_a_point_mass() {
        let rn = RectifiedNormal::new(0.7, 0.0);
        assert_eq!(rn.expect(|v| v * v, 1e-9), 0.7 * 0.7);
        assert_eq!(rn.rule(4, 4), vec![(0.7, 1.0)]);
        let neg = RectifiedNormal::new(-0.7, 0.0);
        assert_eq!(neg.expect(|v| v + 1.0, 1e-9), 1.0);
    }
}
