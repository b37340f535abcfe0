//! Entropy-regularized optimal transport between anchor words and a batch.
//!
//! For scores `S` (K x B) the solver finds the plan `Q` maximizing
//! `<Q, S> + eps * H(Q)` subject to `Q 1 = mu` (row marginal, one entry per
//! anchor) and `Q^T 1 = nu` (column marginal, one entry per item). The
//! optimum has the scaling form `Q = Diag(u) exp(S / eps) Diag(v)`, which the
//! Sinkhorn-Knopp iteration reaches by alternately rescaling rows and columns.
//!
//! The default path keeps the scalings as log potentials and only
//! exponentiates a stabilized kernel, re-absorbing the multiplicative
//! scalings into the potentials whenever they drift out of range. The plain
//! multiplicative path is kept for cross-checking on easy instances.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::anchors::WordAnchorSpace;
use crate::bridge::PooledBatch;
use crate::error::{dim_mismatch, Error, Result};
use crate::numeric::{log_sum_exp, uniform, unit_rows};

/// Scalings beyond this range are folded back into the log potentials.
const ABSORB_LIMIT: f64 = 1e50;
/// Kernel products below this are treated as underflowed.
const TINY: f64 = 1e-280;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Entropy smoothness. Larger values give softer assignments.
    pub eps: f64,
    /// Max-norm tolerance on both marginal constraints.
    pub tol: f64,
    pub max_iter: usize,
    pub log_domain: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { eps: 0.05, tol: 1e-6, max_iter: 500, log_domain: true }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidValue(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidValue(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidValue("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// K x B similarity scores between anchors (rows) and batch items (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix(DMatrix<f64>);

impl ScoreMatrix {
    pub fn new(scores: DMatrix<f64>) -> Result<Self> {
        if scores.nrows() == 0 || scores.ncols() == 0 {
            return Err(Error::Empty("score matrix"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidValue("score matrix has non-finite entries".into()));
        }
        Ok(Self(scores))
    }

    /// Scores `central * pooled^T`, with pooled rows L2-normalized when `normalize` is set.
    pub fn between(central: &DMatrix<f64>, pooled: &PooledBatch, normalize: bool) -> Result<Self> {
        if pooled.dim() != central.ncols() {
            return Err(dim_mismatch(format!(
                "pooled dimension {} does not match central dimension {}",
                pooled.dim(),
                central.ncols()
            )));
        }
        let z = if normalize { unit_rows(pooled.vectors()).0 } else { pooled.vectors().clone() };
        Self::new(central * z.transpose())
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }
}

/// A soft transport plan with the solver's convergence record.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    /// K x B, nonnegative.
    pub q: DMatrix<f64>,
    pub iterations_used: usize,
    /// Max-norm violation over both marginal constraints, measured on `q`.
    pub marginal_error: f64,
    pub converged: bool,
    /// `ln u`: `q = Diag(u) exp(S / eps) Diag(v)`.
    pub log_row_scaling: DVector<f64>,
    /// `ln v`.
    pub log_col_scaling: DVector<f64>,
}

impl AssignmentMatrix {
    /// The column re-normalization vector `v`. May overflow to infinity for
    /// small `eps`; prefer [`AssignmentMatrix::log_col_scaling`].
    pub fn column_scaling(&self) -> DVector<f64> {
        self.log_col_scaling.map(f64::exp)
    }

    pub fn n_anchors(&self) -> usize {
        self.q.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.q.ncols()
    }

    /// Column `n` rescaled to sum to one.
    pub fn item_distribution(&self, n: usize) -> DVector<f64> {
        let col = self.q.column(n);
        let s = col.sum();
        if s > 0.0 {
            col / s
        } else {
            DVector::from_element(col.len(), 1.0 / col.len() as f64)
        }
    }
}

fn check_marginal(v: &DVector<f64>, name: &str) -> Result<()> {
    if v.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidValue(format!("{name} marginal must be strictly positive")));
    }
    if (v.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidValue(format!("{name} marginal sums to {}, expected 1", v.sum())));
    }
    Ok(())
}

fn marginal_violation(q: &DMatrix<f64>, mu: &DVector<f64>, nu: &DVector<f64>) -> f64 {
    let rows = q.column_sum();
    let cols = q.row_sum();
    let r = (rows - mu).amax();
    let c = (cols.transpose() - nu).amax();
    r.max(c)
}

/// Solves the entropic transport problem for scores `s` with row marginal
/// `mu` (length K) and column marginal `col_marginal` (length B).
///
/// Returns the plan after both marginals are within `cfg.tol`, or after
/// `cfg.max_iter` iterations with the remaining violation reported.
pub fn sinkhorn(
    s: &ScoreMatrix,
    mu: &DVector<f64>,
    col_marginal: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<AssignmentMatrix> {
    cfg.validate()?;
    let (k, b) = (s.nrows(), s.ncols());
    if mu.len() != k || col_marginal.len() != b {
        return Err(dim_mismatch(format!(
            "scores are {k}x{b} but marginals have lengths {} and {}",
            mu.len(),
            col_marginal.len()
        )));
    }
    check_marginal(mu, "row")?;
    check_marginal(col_marginal, "column")?;
    if cfg.log_domain {
        Ok(sinkhorn_stabilized(s.values(), mu, col_marginal, cfg))
    } else {
        sinkhorn_plain(s.values(), mu, col_marginal, cfg)
    }
}

/// Multiplicative Sinkhorn on `exp(S / eps)`; fails if the kernel or the
/// scalings leave the floating-point range.
fn sinkhorn_plain(
    s: &DMatrix<f64>,
    mu: &DVector<f64>,
    nu: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<AssignmentMatrix> {
    let kernel = s.map(|x| (x / cfg.eps).exp());
    if kernel.iter().any(|x| !x.is_finite() || *x < TINY) {
        return Err(Error::NumericalOverflow);
    }
    let mut u = DVector::from_element(s.nrows(), 1.0);
    let mut v = DVector::from_element(s.ncols(), 1.0);
    let mut kv = &kernel * &v;
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    while iterations < cfg.max_iter {
        iterations += 1;
        u = mu.component_div(&kv);
        let ktu = kernel.tr_mul(&u);
        v = nu.component_div(&ktu);
        kv = &kernel * &v;
        if u.iter().chain(v.iter()).chain(kv.iter()).any(|x| !x.is_finite() || *x == 0.0) {
            return Err(Error::NumericalOverflow);
        }
        err = (u.component_mul(&kv) - mu).amax();
        if err <= cfg.tol {
            break;
        }
    }
    let q = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| u[i] * kernel[(i, j)] * v[j]);
    let marginal_error = marginal_violation(&q, mu, nu).max(if err.is_finite() { 0.0 } else { err });
    Ok(AssignmentMatrix {
        converged: marginal_error <= cfg.tol,
        q,
        iterations_used: iterations,
        marginal_error,
        log_row_scaling: u.map(f64::ln),
        log_col_scaling: v.map(f64::ln),
    })
}

/// Log-potential state `(f, g)` with the kernel `exp((S + f 1^T + 1 g^T) / eps)`.
struct Potentials<'a> {
    s: &'a DMatrix<f64>,
    eps: f64,
    f: DVector<f64>,
    g: DVector<f64>,
}

impl Potentials<'_> {
    fn kernel(&self) -> DMatrix<f64> {
        let (f, g, eps) = (&self.f, &self.g, self.eps);
        DMatrix::from_fn(self.s.nrows(), self.s.ncols(), |i, j| ((self.s[(i, j)] + f[i] + g[j]) / eps).exp())
    }

    /// Exact log-domain row update: `f_i = eps ln mu_i - eps LSE_j((S_ij + g_j) / eps)`.
    fn update_rows(&mut self, mu: &DVector<f64>) {
        for i in 0..self.s.nrows() {
            let lse = log_sum_exp((0..self.s.ncols()).map(|j| (self.s[(i, j)] + self.g[j]) / self.eps));
            self.f[i] = self.eps * (mu[i].ln() - lse);
        }
    }

    fn update_cols(&mut self, nu: &DVector<f64>) {
        for j in 0..self.s.ncols() {
            let lse = log_sum_exp((0..self.s.nrows()).map(|i| (self.s[(i, j)] + self.f[i]) / self.eps));
            self.g[j] = self.eps * (nu[j].ln() - lse);
        }
    }

    fn absorb(&mut self, a: &mut DVector<f64>, b: &mut DVector<f64>) {
        for (fi, ai) in self.f.iter_mut().zip(a.iter_mut()) {
            *fi += self.eps * ai.ln();
            *ai = 1.0;
        }
        for (gj, bj) in self.g.iter_mut().zip(b.iter_mut()) {
            *gj += self.eps * bj.ln();
            *bj = 1.0;
        }
    }
}

fn out_of_range(x: &DVector<f64>) -> bool {
    x.iter().any(|v| !(*v < ABSORB_LIMIT && *v > 1.0 / ABSORB_LIMIT))
}

fn underflowed(x: &DVector<f64>) -> bool {
    x.iter().any(|v| !(*v > TINY) || !v.is_finite())
}

fn sinkhorn_stabilized(s: &DMatrix<f64>, mu: &DVector<f64>, nu: &DVector<f64>, cfg: &SolverConfig) -> AssignmentMatrix {
    let (k, b) = s.shape();
    let mut pot = Potentials { s, eps: cfg.eps, f: DVector::zeros(k), g: DVector::zeros(b) };
    // One exact sweep puts every row and column sum in range before the
    // multiplicative phase starts.
    pot.update_rows(mu);
    pot.update_cols(nu);
    let mut kernel = pot.kernel();
    let mut a = DVector::from_element(k, 1.0);
    let mut bb = DVector::from_element(b, 1.0);
    let mut kb = &kernel * &bb;
    let mut iterations = 1;
    let mut err = (a.component_mul(&kb) - mu).amax();

    while err > cfg.tol && iterations < cfg.max_iter {
        iterations += 1;
        if underflowed(&kb) {
            pot.absorb(&mut a, &mut bb);
            pot.update_rows(mu);
            pot.update_cols(nu);
            kernel = pot.kernel();
            kb = &kernel * &bb;
            err = (a.component_mul(&kb) - mu).amax();
            continue;
        }
        a = mu.component_div(&kb);
        let kta = kernel.tr_mul(&a);
        if underflowed(&kta) {
            pot.absorb(&mut a, &mut bb);
            pot.update_cols(nu);
            kernel = pot.kernel();
            kb = &kernel * &bb;
            err = (a.component_mul(&kb) - mu).amax();
            continue;
        }
        bb = nu.component_div(&kta);
        if out_of_range(&a) || out_of_range(&bb) {
            pot.absorb(&mut a, &mut bb);
            kernel = pot.kernel();
        }
        kb = &kernel * &bb;
        err = (a.component_mul(&kb) - mu).amax();
    }
    pot.absorb(&mut a, &mut bb);
    let q = pot.kernel();
    let marginal_error = marginal_violation(&q, mu, nu);
    AssignmentMatrix {
        converged: marginal_error <= cfg.tol,
        q,
        iterations_used: iterations,
        marginal_error,
        log_row_scaling: pot.f / cfg.eps,
        log_col_scaling: pot.g / cfg.eps,
    }
}

/// Assigns a pooled batch to the anchor words under the word-marginal
/// polytope: rows sum to the space's `mu`, columns to `1 / B`.
pub fn assign_batch(space: &WordAnchorSpace, pooled: &PooledBatch, cfg: &SolverConfig) -> Result<AssignmentMatrix> {
    let scores = ScoreMatrix::between(space.weights(), pooled, space.is_normalized())?;
    sinkhorn(&scores, space.mu(), &uniform(pooled.len()), cfg)
}

/// Like [`assign_batch`] but with every row of `central` receiving equal
/// mass `1 / K`.
pub fn equipartition_assign(
    central: &DMatrix<f64>,
    normalize: bool,
    pooled: &PooledBatch,
    cfg: &SolverConfig,
) -> Result<AssignmentMatrix> {
    let scores = ScoreMatrix::between(central, pooled, normalize)?;
    sinkhorn(&scores, &uniform(central.nrows()), &uniform(pooled.len()), cfg)
}

/// `H(Q) = -sum Q log Q` with `0 log 0 = 0`.
pub fn assignment_entropy(q: &AssignmentMatrix) -> f64 {
    entropy_of(&q.q)
}

pub(crate) fn entropy_of(q: &DMatrix<f64>) -> f64 {
    -q.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Learnable central space for the prototype ablation. Rows stay on the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSpace {
    /// K_p x d.
    pub prototypes: DMatrix<f64>,
}

impl PrototypeSpace {
    pub const DEFAULT_COUNT: usize = 3000;

    pub fn new(count: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prototypes = DMatrix::from_fn(count, dim, |_, _| StandardNormal.sample(&mut rng));
        let mut p = Self { prototypes };
        p.renormalize();
        p
    }

    pub fn len(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.nrows() == 0
    }

    /// Projects every row back to unit L2 norm.
    pub fn renormalize(&mut self) {
        self.prototypes = unit_rows(&self.prototypes).0;
    }
}
