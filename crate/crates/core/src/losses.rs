//! Training objectives and their analytic gradients.
//!
//! Every loss returns its value together with the gradient w.r.t. the
//! bridge-side inputs (pooled visual vectors, per-item soft prompts, and for
//! the ablations the learnable central space or the matching head). The
//! text side and the anchor embeddings are frozen, so no gradient is
//! produced for them. Assignment matrices are treated as constants.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::anchors::WordAnchorSpace;
use crate::bridge::PooledBatch;
use crate::error::{dim_mismatch, Error, Result};
use crate::numeric::{cosine, log_sum_exp, softmax, unit_backward, unit_rows};
use crate::ot::AssignmentMatrix;

/// A frozen next-token model that accepts soft prompts.
pub trait FrozenDecoder {
    fn vocab_size(&self) -> usize;

    fn embed_dim(&self) -> usize;

    /// Next-token logits given prompt rows and the preceding token ids.
    fn logits(&self, prompts: &DMatrix<f64>, context: &[usize]) -> Result<DVector<f64>>;

    /// `-log p(target | prompts, context)` and its gradient w.r.t. the prompt rows.
    fn token_nll(&self, prompts: &DMatrix<f64>, context: &[usize], target: usize) -> Result<(f64, DMatrix<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Objective {
    Map,
    Cap,
    Itc,
    Itm,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Map, Objective::Cap, Objective::Itc, Objective::Itm];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Map => "map",
            Objective::Cap => "cap",
            Objective::Itc => "itc",
            Objective::Itm => "itm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Softmax temperature of the word probabilities.
    pub tau: f64,
    pub lambda_map: f64,
    pub lambda_cap: f64,
    pub lambda_itc: f64,
    pub lambda_itm: f64,
    pub itc_temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.1, lambda_map: 0.6, lambda_cap: 0.4, lambda_itc: 0.0, lambda_itm: 0.0, itc_temperature: 0.07 }
    }
}

impl LossConfig {
    pub fn weight(&self, o: Objective) -> f64 {
        match o {
            Objective::Map => self.lambda_map,
            Objective::Cap => self.lambda_cap,
            Objective::Itc => self.lambda_itc,
            Objective::Itm => self.lambda_itm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidValue(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.itc_temperature > 0.0) {
            return Err(Error::InvalidValue("itc_temperature must be positive".into()));
        }
        for o in Objective::ALL {
            let w = self.weight(o);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidValue(format!("lambda_{} must be a nonnegative number, got {w}", o.name())));
            }
        }
        if self.lambda_map + self.lambda_cap <= 0.0 {
            return Err(Error::InvalidValue("lambda_map + lambda_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Linear matching head over `[v ; t]` with two output classes
/// (0 = mismatched, 1 = matched).
#[derive(Debug, Clone, PartialEq)]
pub struct ItmHead {
    /// 2 x 2d.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl ItmHead {
    pub fn zeros(d: usize) -> Self {
        Self { weight: DMatrix::zeros(2, 2 * d), bias: DVector::zeros(2) }
    }

    fn scaled(&self, s: f64) -> Self {
        Self { weight: &self.weight * s, bias: &self.bias * s }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    /// B x d gradient w.r.t. the pooled visual vectors.
    pub grad_pooled_v: DMatrix<f64>,
    /// Per item, N_p x d gradient w.r.t. the soft prompts. Empty when the
    /// loss does not read prompts.
    pub grad_prompts: Vec<DMatrix<f64>>,
    /// Gradient w.r.t. a learnable central space, when requested.
    pub grad_central: Option<DMatrix<f64>>,
    pub grad_itm_head: Option<ItmHead>,
}

impl LossValue {
    fn single(o: Objective, value: f64, grad_pooled_v: DMatrix<f64>) -> Self {
        Self {
            total: value,
            components: BTreeMap::from([(o.name().to_string(), value)]),
            grad_pooled_v,
            grad_prompts: Vec::new(),
            grad_central: None,
            grad_itm_head: None,
        }
    }

    pub fn component(&self, o: Objective) -> Option<f64> {
        self.components.get(o.name()).copied()
    }
}

/// Probabilities, log probabilities, normalized rows and the row norms.
type CentralProbs = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, Vec<f64>);

/// Row-wise softmax of `central . z / tau`, returning probabilities, log
/// probabilities and the (optionally normalized) pooled rows.
fn central_probs(central: &DMatrix<f64>, normalize: bool, pooled: &PooledBatch, tau: f64) -> Result<CentralProbs> {
    if !(tau > 0.0) {
        return Err(Error::InvalidValue(format!("tau must be positive, got {tau}")));
    }
    if pooled.dim() != central.ncols() {
        return Err(dim_mismatch(format!(
            "pooled dimension {} vs central dimension {}",
            pooled.dim(),
            central.ncols()
        )));
    }
    let (z, norms) =
        if normalize { unit_rows(pooled.vectors()) } else { (pooled.vectors().clone(), vec![1.0; pooled.len()]) };
    let logits = (&z * central.transpose()) / tau;
    let (b, k) = logits.shape();
    let mut p = DMatrix::zeros(b, k);
    let mut logp = DMatrix::zeros(b, k);
    for n in 0..b {
        let row: Vec<f64> = logits.row(n).iter().copied().collect();
        let lse = log_sum_exp(row.iter().copied());
        for j in 0..k {
            logp[(n, j)] = row[j] - lse;
            p[(n, j)] = logp[(n, j)].exp();
        }
    }
    Ok((p, logp, z, norms))
}

/// Probability of each item belonging to each anchor word: B x K, rows sum to one.
pub fn word_probs(pooled: &PooledBatch, space: &WordAnchorSpace, tau: f64) -> Result<DMatrix<f64>> {
    Ok(central_probs(space.weights(), space.is_normalized(), pooled, tau)?.0)
}

/// Columns of `q` rescaled into per-item distributions, as a B x K matrix.
fn item_targets(q: &AssignmentMatrix) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(q.n_items(), q.n_anchors());
    for n in 0..q.n_items() {
        out.set_row(n, &q.item_distribution(n).transpose());
    }
    out
}

/// Swapped assignment prediction: each modality's word probabilities are
/// trained toward the other modality's transport assignment.
pub fn assignment_prediction_loss(
    q_v: &AssignmentMatrix,
    q_t: &AssignmentMatrix,
    pooled_v: &PooledBatch,
    pooled_t: &PooledBatch,
    space: &WordAnchorSpace,
    tau: f64,
) -> Result<LossValue> {
    map_loss(q_v, q_t, pooled_v, pooled_t, space.weights(), space.is_normalized(), tau, false)
}

/// Swapped assignment prediction against an arbitrary central space.
/// With `central_grad`, also returns the gradient w.r.t. `central`.
#[allow(clippy::too_many_arguments)]
pub fn map_loss(
    q_v: &AssignmentMatrix,
    q_t: &AssignmentMatrix,
    pooled_v: &PooledBatch,
    pooled_t: &PooledBatch,
    central: &DMatrix<f64>,
    normalize: bool,
    tau: f64,
    central_grad: bool,
) -> Result<LossValue> {
    let b = pooled_v.len();
    let k = central.nrows();
    if pooled_t.len() != b || q_v.q.shape() != (k, b) || q_t.q.shape() != (k, b) {
        return Err(dim_mismatch(format!(
            "map loss expects {b} items and {k} anchors on every input; got text {} and plans {:?}, {:?}",
            pooled_t.len(),
            q_v.q.shape(),
            q_t.q.shape()
        )));
    }
    let (p_v, logp_v, z_v, norms_v) = central_probs(central, normalize, pooled_v, tau)?;
    let (p_t, logp_t, z_t, _) = central_probs(central, normalize, pooled_t, tau)?;
    let target_v = item_targets(q_t);
    let target_t = item_targets(q_v);

    let mut loss = 0.0;
    for n in 0..b {
        for j in 0..k {
            loss -= target_v[(n, j)] * logp_v[(n, j)] + target_t[(n, j)] * logp_t[(n, j)];
        }
    }
    loss /= b as f64;

    // d/dlogits of the visual term, then through logits = z . w / tau.
    let coef = 1.0 / (b as f64 * tau);
    let resid_v = (&p_v - &target_v) * coef;
    let grad_unit = &resid_v * central;
    let mut grad = DMatrix::zeros(b, pooled_v.dim());
    for n in 0..b {
        let g: Vec<f64> = grad_unit.row(n).iter().copied().collect();
        let row = if normalize { unit_backward(&crate::numeric::row_vec(&z_v, n), norms_v[n], &g) } else { g };
        for (j, v) in row.into_iter().enumerate() {
            grad[(n, j)] = v;
        }
    }
    let mut out = LossValue::single(Objective::Map, loss, grad);
    if central_grad {
        let resid_t = (&p_t - &target_t) * coef;
        out.grad_central = Some(resid_v.transpose() * &z_v + resid_t.transpose() * &z_t);
    }
    Ok(out)
}

/// Prefix language-modeling loss through a frozen decoder.
///
/// For every item, each caption token is predicted from the item's soft
/// prompts, the prefix and the preceding caption tokens; token losses are
/// averaged per caption and then over the batch.
pub fn caption_loss<D: FrozenDecoder + ?Sized>(
    decoder: &D,
    prompts: &[DMatrix<f64>],
    prefix_ids: &[usize],
    target_ids: &[Vec<usize>],
) -> Result<LossValue> {
    if prompts.len() != target_ids.len() {
        return Err(dim_mismatch(format!("{} prompt sets for {} captions", prompts.len(), target_ids.len())));
    }
    if prompts.is_empty() {
        return Err(Error::Empty("caption batch"));
    }
    let b = prompts.len() as f64;
    let d = decoder.embed_dim();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(prompts.len());
    for (p, targets) in prompts.iter().zip(target_ids) {
        if targets.is_empty() {
            return Err(Error::Empty("caption"));
        }
        let weight = 1.0 / (b * targets.len() as f64);
        let mut context = prefix_ids.to_vec();
        let mut g = DMatrix::zeros(p.nrows(), p.ncols());
        for &t in targets {
            let (nll, dp) = decoder.token_nll(p, &context, t)?;
            loss += weight * nll;
            g += dp * weight;
            context.push(t);
        }
        grads.push(g);
    }
    let mut out = LossValue::single(Objective::Cap, loss, DMatrix::zeros(prompts.len(), d));
    out.grad_prompts = grads;
    Ok(out)
}

fn check_pair(pooled_v: &PooledBatch, pooled_t: &PooledBatch) -> Result<()> {
    if pooled_v.len() != pooled_t.len() || pooled_v.dim() != pooled_t.dim() {
        return Err(dim_mismatch("visual and text batches differ in shape"));
    }
    if pooled_v.len() < 2 {
        return Err(Error::InvalidValue("contrastive objectives need at least 2 items".into()));
    }
    Ok(())
}

/// Symmetric contrastive loss over the B x B cosine-similarity matrix; the
/// diagonal holds the positive pairs.
pub fn itc_loss(pooled_v: &PooledBatch, pooled_t: &PooledBatch, temperature: f64) -> Result<LossValue> {
    check_pair(pooled_v, pooled_t)?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidValue("temperature must be positive".into()));
    }
    let b = pooled_v.len();
    let (v, norms) = unit_rows(pooled_v.vectors());
    let (t, _) = unit_rows(pooled_t.vectors());
    let logits = (&v * t.transpose()) / temperature;
    let mut loss = 0.0;
    // resid = softmax over rows + softmax over columns - 2 I
    let mut resid = DMatrix::zeros(b, b);
    for i in 0..b {
        let row: Vec<f64> = logits.row(i).iter().copied().collect();
        loss += log_sum_exp(row.iter().copied()) - row[i];
        for (j, p) in softmax(&row).into_iter().enumerate() {
            resid[(i, j)] += p;
        }
    }
    for j in 0..b {
        let col: Vec<f64> = logits.column(j).iter().copied().collect();
        loss += log_sum_exp(col.iter().copied()) - col[j];
        for (i, p) in softmax(&col).into_iter().enumerate() {
            resid[(i, j)] += p;
        }
    }
    for i in 0..b {
        resid[(i, i)] -= 2.0;
    }
    let scale = 1.0 / (2.0 * b as f64);
    loss *= scale;
    let grad_unit = resid * &t * (scale / temperature);
    let mut grad = DMatrix::zeros(b, pooled_v.dim());
    for n in 0..b {
        let g: Vec<f64> = grad_unit.row(n).iter().copied().collect();
        let row = unit_backward(&crate::numeric::row_vec(&v, n), norms[n], &g);
        for (j, x) in row.into_iter().enumerate() {
            grad[(n, j)] = x;
        }
    }
    Ok(LossValue::single(Objective::Itc, loss, grad))
}

/// Index of the most similar off-diagonal partner for every item.
fn hardest_negatives(sim: &DMatrix<f64>, by_row: bool) -> Vec<usize> {
    let b = sim.nrows();
    (0..b)
        .map(|n| {
            let mut best = usize::MAX;
            let mut best_s = f64::NEG_INFINITY;
            for m in (0..b).filter(|&m| m != n) {
                let s = if by_row { sim[(n, m)] } else { sim[(m, n)] };
                if s > best_s {
                    best_s = s;
                    best = m;
                }
            }
            best
        })
        .collect()
}

/// Image-text matching with in-batch hard negatives.
///
/// Every positive pair `(v_n, t_n)` is joined by two negatives: `v_n` with
/// its most similar other caption and `t_n` with its most similar other
/// image. Each pair `[v ; t]` of unit vectors is classified by `head` with a
/// two-way softmax; the loss is the mean cross-entropy over all `3B` pairs.
pub fn itm_loss(pooled_v: &PooledBatch, pooled_t: &PooledBatch, head: &ItmHead) -> Result<LossValue> {
    check_pair(pooled_v, pooled_t)?;
    let (b, d) = (pooled_v.len(), pooled_v.dim());
    if head.weight.shape() != (2, 2 * d) || head.bias.len() != 2 {
        return Err(dim_mismatch(format!("matching head must be 2x{} with 2 biases", 2 * d)));
    }
    let (v, norms) = unit_rows(pooled_v.vectors());
    let (t, _) = unit_rows(pooled_t.vectors());
    let sim = &v * t.transpose();
    let hard_t = hardest_negatives(&sim, true);
    let hard_v = hardest_negatives(&sim, false);

    let mut pairs: Vec<(usize, usize, usize)> = Vec::with_capacity(3 * b);
    for n in 0..b {
        pairs.push((n, n, 1));
        pairs.push((n, hard_t[n], 0));
        pairs.push((hard_v[n], n, 0));
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad_unit = DMatrix::zeros(b, d);
    let mut head_grad = ItmHead::zeros(d);
    for &(i, j, label) in &pairs {
        let x = DVector::from_iterator(2 * d, v.row(i).iter().chain(t.row(j).iter()).copied());
        let logits = &head.weight * &x + &head.bias;
        let p = softmax(logits.as_slice());
        loss -= p[label].ln() * scale;
        let mut dlogits = DVector::from_vec(p);
        dlogits[label] -= 1.0;
        dlogits *= scale;
        head_grad.weight += &dlogits * x.transpose();
        head_grad.bias += &dlogits;
        let dx = head.weight.tr_mul(&dlogits);
        for c in 0..d {
            grad_unit[(i, c)] += dx[c];
        }
    }
    let mut grad = DMatrix::zeros(b, d);
    for n in 0..b {
        let g: Vec<f64> = grad_unit.row(n).iter().copied().collect();
        let row = unit_backward(&crate::numeric::row_vec(&v, n), norms[n], &g);
        for (c, x) in row.into_iter().enumerate() {
            grad[(n, c)] = x;
        }
    }
    let mut out = LossValue::single(Objective::Itm, loss, grad);
    out.grad_itm_head = Some(head_grad);
    Ok(out)
}

/// Weighted sum of component losses and their gradients.
///
/// Objectives whose weight is zero still appear in `components` but add
/// nothing to the total or the gradients.
pub fn total_loss(components: &[(Objective, &LossValue)], cfg: &LossConfig) -> Result<LossValue> {
    let first = components.first().ok_or(Error::Empty("loss components"))?;
    let shape = first.1.grad_pooled_v.shape();
    let mut out = LossValue {
        total: 0.0,
        components: BTreeMap::new(),
        grad_pooled_v: DMatrix::zeros(shape.0, shape.1),
        grad_prompts: Vec::new(),
        grad_central: None,
        grad_itm_head: None,
    };
    for &(o, value) in components {
        let w = cfg.weight(o);
        out.components.insert(o.name().to_string(), value.total);
        if w == 0.0 {
            continue;
        }
        if value.grad_pooled_v.shape() != shape {
            return Err(dim_mismatch("component gradients differ in shape"));
        }
        out.total += w * value.total;
        out.grad_pooled_v += &value.grad_pooled_v * w;
        if !value.grad_prompts.is_empty() {
            if out.grad_prompts.is_empty() {
                out.grad_prompts = value.grad_prompts.iter().map(|g| g * w).collect();
            } else {
                for (acc, g) in out.grad_prompts.iter_mut().zip(&value.grad_prompts) {
                    *acc += g * w;
                }
            }
        }
        if let Some(gc) = &value.grad_central {
            match &mut out.grad_central {
                Some(acc) => *acc += gc * w,
                None => out.grad_central = Some(gc * w),
            }
        }
        if let Some(h) = &value.grad_itm_head {
            match &mut out.grad_itm_head {
                Some(acc) => {
                    acc.weight += &h.weight * w;
                    acc.bias += &h.bias * w;
                }
                None => out.grad_itm_head = Some(h.scaled(w)),
            }
        }
    }
    Ok(out)
}

/// Cosine similarity between two vectors; zero if either is (near) zero.
pub fn cosine_similarity(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    cosine(a.as_slice(), b.as_slice())
}
