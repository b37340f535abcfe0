//! Small numeric helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Norms below this are treated as zero when normalizing.
pub(crate) const NORM_EPS: f64 = 1e-12;

pub(crate) fn log_sum_exp<I: IntoIterator<Item = f64> + Clone>(xs: I) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `logits`, computed with max subtraction.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// Rows scaled to unit L2 norm, alongside the original norms. Rows with
/// (near) zero norm are left as zero.
pub(crate) fn unit_rows(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        norms.push(n);
        if n > NORM_EPS {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    (out, norms)
}

/// Pulls a gradient taken w.r.t. `x / |x|` back to `x`:
/// `(g - xhat (xhat . g)) / |x|`.
pub(crate) fn unit_backward(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    if norm <= NORM_EPS {
        return vec![0.0; unit.len()];
    }
    let dot: f64 = unit.iter().zip(grad_unit).map(|(u, g)| u * g).sum();
    unit.iter().zip(grad_unit).map(|(u, g)| (g - u * dot) / norm).collect()
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= NORM_EPS || nb <= NORM_EPS {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub(crate) fn row_vec(m: &DMatrix<f64>, r: usize) -> Vec<f64> {
    m.row(r).iter().copied().collect()
}

pub(crate) fn uniform(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0 / n as f64)
}
