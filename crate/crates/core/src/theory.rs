//! Information-theoretic identities behind block drafting, checked
//! numerically on explicit finite joint distributions.
//!
//! `X` is the next token, `Y` the second-next token and `C` the context.
//! Every quantity is computed by direct summation over its own definition
//! (never as a difference of other quantities), so the identities below are
//! genuine numerical checks:
//!
//! 1. `H(X) = H(X|Y) + I(X;Y)`
//! 2. `H(X) + H(Y) = H(Y|X) + 2 I(X;Y) + H(X|Y)`
//! 3. `H(X) = H(X|C) + I(X;C)`
//! 4. `H(X) + H(Y) = H(X|C) + I(X;C) + H(Y|X) + I(X;Y)`

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FalconError, Result};

/// Tolerance on the total probability mass.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Random variable selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    X,
    Y,
    C,
}

/// Joint distribution `p(x, y, c)` stored row-major as `[x][y][c]`.
/// Two-variable joints use `|C| = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    nx: usize,
    ny: usize,
    nc: usize,
    p: Vec<f64>,
}

impl JointDistribution {
    pub fn new(nx: usize, ny: usize, nc: usize, p: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 || nc == 0 {
            return Err(FalconError::Validation(format!(
                "support sizes must be positive, got {nx}x{ny}x{nc}"
            )));
        }
        if p.len() != nx * ny * nc {
            return Err(FalconError::Validation(format!(
                "probability table has {} entries, expected {}",
                p.len(),
                nx * ny * nc
            )));
        }
        if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(FalconError::Validation(format!(
                "probabilities must be finite and non-negative, found {v}"
            )));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(FalconError::Validation(format!("total mass is {total}, expected 1")));
        }
        Ok(JointDistribution { nx, ny, nc, p })
    }

    /// Two-variable joint `p(x, y)`.
    pub fn pair(nx: usize, ny: usize, p: Vec<f64>) -> Result<Self> {
        Self::new(nx, ny, 1, p)
    }

    /// Normalises non-negative weights into a distribution.
    pub fn from_weights(nx: usize, ny: usize, nc: usize, weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(FalconError::Validation(format!(
                "weights must have positive finite sum, got {total}"
            )));
        }
        Self::new(nx, ny, nc, weights.iter().map(|w| w / total).collect())
    }

    /// Random joint with Dirichlet(1) weights; roughly a quarter of the
    /// entries are forced to zero so that `0 log 0` terms are exercised.
    pub fn random<R: Rng>(nx: usize, ny: usize, nc: usize, rng: &mut R) -> Result<Self> {
        let n = nx * ny * nc;
        let mut w: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < 0.25 {
                    0.0
                } else {
                    -(1.0 - rng.gen::<f64>()).ln()
                }
            })
            .collect();
        if w.iter().all(|v| *v == 0.0) {
            let i = rng.gen_range(0..n);
            w[i] = 1.0;
        }
        Self::from_weights(nx, ny, nc, &w)
    }

    /// All mass on a single outcome.
    pub fn point_mass(nx: usize, ny: usize, nc: usize, x: usize, y: usize, c: usize) -> Result<Self> {
        let mut p = vec![0.0; nx * ny * nc];
        if x >= nx || y >= ny || c >= nc {
            return Err(FalconError::Validation(format!(
                "outcome ({x}, {y}, {c}) outside support {nx}x{ny}x{nc}"
            )));
        }
        p[(x * ny + y) * nc + c] = 1.0;
        Self::new(nx, ny, nc, p)
    }

    /// Uniform over all outcomes (all variables independent).
    pub fn uniform(nx: usize, ny: usize, nc: usize) -> Result<Self> {
        let n = nx * ny * nc;
        Self::new(nx, ny, nc, vec![1.0 / n as f64; n])
    }

    /// `Y` copies `X` with probability `1 - flip`, otherwise it is uniform
    /// over the other values; `X` is uniform and `C` independent uniform.
    pub fn noisy_copy(n: usize, nc: usize, flip: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&flip) || n == 0 {
            return Err(FalconError::Validation(format!(
                "noisy copy needs n >= 1 and flip in [0, 1], got n={n}, flip={flip}"
            )));
        }
        let mut w = vec![0.0; n * n * nc];
        for x in 0..n {
            for y in 0..n {
                let py = if x == y {
                    1.0 - flip
                } else if n > 1 {
                    flip / (n - 1) as f64
                } else {
                    0.0
                };
                for c in 0..nc {
                    w[(x * n + y) * nc + c] = py;
                }
            }
        }
        Self::from_weights(n, n, nc, &w)
    }

    pub fn support(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nc)
    }

    pub fn prob(&self, x: usize, y: usize, c: usize) -> f64 {
        self.p[(x * self.ny + y) * self.nc + c]
    }

    pub fn table(&self) -> &[f64] {
        &self.p
    }

    fn size(&self, v: Var) -> usize {
        match v {
            Var::X => self.nx,
            Var::Y => self.ny,
            Var::C => self.nc,
        }
    }

    fn outcomes(&self) -> impl Iterator<Item = ([usize; 3], f64)> + '_ {
        (0..self.p.len()).map(move |i| {
            let c = i % self.nc;
            let y = (i / self.nc) % self.ny;
            let x = i / (self.nc * self.ny);
            ([x, y, c], self.p[i])
        })
    }

    /// Marginal of one variable.
    pub fn marginal(&self, v: Var) -> Vec<f64> {
        let mut m = vec![0.0; self.size(v)];
        for (o, p) in self.outcomes() {
            m[o[v as usize]] += p;
        }
        m
    }

    /// Pairwise marginal `p(a, b)` stored row-major as `[a][b]`.
    pub fn marginal_pair(&self, a: Var, b: Var) -> Vec<f64> {
        let nb = self.size(b);
        let mut m = vec![0.0; self.size(a) * nb];
        for (o, p) in self.outcomes() {
            m[o[a as usize] * nb + o[b as usize]] += p;
        }
        m
    }
}

fn check_distinct(a: Var, b: Var) {
    assert_ne!(a, b, "conditional quantities need two distinct variables");
}

/// Shannon entropy `H(v)` in bits.
pub fn entropy(dist: &JointDistribution, v: Var) -> f64 {
    dist.marginal(v)
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.log2())
        .sum()
}

/// Conditional entropy `H(a | b)` in bits, summed as
/// `-sum p(a, b) log2 p(a | b)`.
pub fn conditional_entropy(dist: &JointDistribution, a: Var, b: Var) -> f64 {
    check_distinct(a, b);
    let joint = dist.marginal_pair(a, b);
    let pb = dist.marginal(b);
    let nb = pb.len();
    let mut h = 0.0;
    for (i, p) in joint.iter().enumerate() {
        if *p > 0.0 {
            h -= p * (p / pb[i % nb]).log2();
        }
    }
    h
}

/// Mutual information `I(a; b)` in bits, summed as
/// `sum p(a, b) log2 (p(a, b) / (p(a) p(b)))`.
pub fn mutual_information(dist: &JointDistribution, a: Var, b: Var) -> f64 {
    check_distinct(a, b);
    let joint = dist.marginal_pair(a, b);
    let pa = dist.marginal(a);
    let pb = dist.marginal(b);
    let nb = pb.len();
    let mut i_ab = 0.0;
    for (i, p) in joint.iter().enumerate() {
        if *p > 0.0 {
            i_ab += p * (p / (pa[i / nb] * pb[i % nb])).log2();
        }
    }
    i_ab
}

/// Every term appearing in the four identities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyTerms {
    pub h_x: f64,
    pub h_y: f64,
    pub h_x_given_y: f64,
    pub h_y_given_x: f64,
    pub i_xy: f64,
    pub h_x_given_c: f64,
    pub i_xc: f64,
}

impl EntropyTerms {
    pub fn of(dist: &JointDistribution) -> Self {
        EntropyTerms {
            h_x: entropy(dist, Var::X),
            h_y: entropy(dist, Var::Y),
            h_x_given_y: conditional_entropy(dist, Var::X, Var::Y),
            h_y_given_x: conditional_entropy(dist, Var::Y, Var::X),
            i_xy: mutual_information(dist, Var::X, Var::Y),
            h_x_given_c: conditional_entropy(dist, Var::X, Var::C),
            i_xc: mutual_information(dist, Var::X, Var::C),
        }
    }

    /// Absolute residual of each identity, in the order listed in the
    /// module docs.
    pub fn residuals(&self) -> [f64; 4] {
        let t = self;
        [
            (t.h_x - (t.h_x_given_y + t.i_xy)).abs(),
            (t.h_x + t.h_y - (t.h_y_given_x + 2.0 * t.i_xy + t.h_x_given_y)).abs(),
            (t.h_x - (t.h_x_given_c + t.i_xc)).abs(),
            (t.h_x + t.h_y - (t.h_x_given_c + t.i_xc + t.h_y_given_x + t.i_xy)).abs(),
        ]
    }

    /// Sanity conditions: non-negative quantities and conditioning never
    /// increasing entropy. Returns a description of the first violation.
    pub fn sanity(&self, tol: f64) -> std::result::Result<(), String> {
        let named = [
            ("H(X)", self.h_x),
            ("H(Y)", self.h_y),
            ("H(X|Y)", self.h_x_given_y),
            ("H(Y|X)", self.h_y_given_x),
            ("I(X;Y)", self.i_xy),
            ("H(X|C)", self.h_x_given_c),
            ("I(X;C)", self.i_xc),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < -tol {
                return Err(format!("{name} = {v}"));
            }
        }
        if self.h_x_given_y > self.h_x + tol {
            return Err(format!("H(X|Y) = {} exceeds H(X) = {}", self.h_x_given_y, self.h_x));
        }
        if self.h_x_given_c > self.h_x + tol {
            return Err(format!("H(X|C) = {} exceeds H(X) = {}", self.h_x_given_c, self.h_x));
        }
        Ok(())
    }
}

/// Labels of the four identities, in residual order.
pub const IDENTITIES: [&str; 4] = [
    "H(X) = H(X|Y) + I(X;Y)",
    "H(X) + H(Y) = H(Y|X) + 2I(X;Y) + H(X|Y)",
    "H(X) = H(X|C) + I(X;C)",
    "H(X) + H(Y) = H(X|C) + I(X;C) + H(Y|X) + I(X;Y)",
];

/// Outcome of [`check_decompositions`].
#[derive(Clone, Debug)]
pub struct DecompositionReport {
    pub joints: usize,
    pub max_residual: [f64; 4],
    /// Sanity violations, one line per offending joint.
    pub sanity_failures: Vec<String>,
    /// Terms of the constructed strongly dependent joint.
    pub high_dependence: EntropyTerms,
}

impl DecompositionReport {
    pub fn worst(&self) -> f64 {
        self.max_residual.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() < tol && self.sanity_failures.is_empty()
    }
}

impl fmt::Display for DecompositionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "joints evaluated: {}", self.joints)?;
        for (name, r) in IDENTITIES.iter().zip(self.max_residual) {
            writeln!(f, "  max residual {r:.3e} bits  {name}")?;
        }
        let t = &self.high_dependence;
        writeln!(
            f,
            "strongly dependent joint: H(X)+H(Y) = {:.6} = H(Y|X) {:.6} + 2I(X;Y) {:.6} + H(X|Y) {:.6}",
            t.h_x + t.h_y,
            t.h_y_given_x,
            2.0 * t.i_xy,
            t.h_x_given_y
        )?;
        if self.sanity_failures.is_empty() {
            write!(f, "sanity checks: all passed")
        } else {
            write!(f, "sanity checks: {} failures", self.sanity_failures.len())
        }
    }
}

/// Evaluates the four identities on `dist`, on a set of structured joints
/// (point mass, uniform, noisy copies) and on `trials` random joints with
/// the same support sizes as `dist`.
pub fn check_decompositions(dist: &JointDistribution, trials: usize, seed: u64) -> DecompositionReport {
    let (nx, ny, nc) = dist.support();
    let n = nx.max(ny).max(2);
    let high = JointDistribution::noisy_copy(n, nc, 0.02).expect("valid noisy copy");
    let structured = [
        dist.clone(),
        JointDistribution::point_mass(nx, ny, nc, 0, 0, 0).expect("valid point mass"),
        JointDistribution::uniform(nx, ny, nc).expect("valid uniform"),
        JointDistribution::noisy_copy(n, nc, 0.0).expect("valid copy"),
        high.clone(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = DecompositionReport {
        joints: 0,
        max_residual: [0.0; 4],
        sanity_failures: Vec::new(),
        high_dependence: EntropyTerms::of(&high),
    };
    let eval = |d: &JointDistribution, label: &str, report: &mut DecompositionReport| {
        let terms = EntropyTerms::of(d);
        for (m, r) in report.max_residual.iter_mut().zip(terms.residuals()) {
            *m = m.max(r);
        }
        if let Err(e) = terms.sanity(1e-12) {
            report.sanity_failures.push(format!("{label}: {e}"));
        }
        report.joints += 1;
    };
    for (i, d) in structured.iter().enumerate() {
        eval(d, &format!("structured #{i}"), &mut report);
    }
    for t in 0..trials {
        let d = JointDistribution::random(nx, ny, nc, &mut rng).expect("valid random joint");
        eval(&d, &format!("random #{t}"), &mut report);
    }
    report
}
