use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, lr_at, AdamState, AdamW};
use super::{LinearBridge, PooledBatch};
use crate::anchors::WordAnchorSpace;
use crate::error::{dim_mismatch, Error, Result};
use crate::evaluation::modality_gap;
use crate::io;
use crate::losses::{
    caption_loss, itc_loss, itm_loss, map_loss, total_loss, FrozenDecoder, ItmHead, LossConfig, LossValue, Objective,
};
use crate::numeric::{uniform, unit_rows};
use crate::ot::{sinkhorn, AssignmentMatrix, PrototypeSpace, ScoreMatrix, SolverConfig};
use crate::toy::PREFIX_IDS;

/// One image-caption pair: visual patch features, text token features and
/// the caption's token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedItem {
    /// N_p x d_v.
    pub visual: DMatrix<f64>,
    /// T x d.
    pub text: DMatrix<f64>,
    pub caption: Vec<usize>,
}

/// What the transport problems assign items to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentralSpace {
    /// The frozen anchor words.
    Words,
    /// Learnable unit-norm prototypes of the given count.
    Prototypes(usize),
}

/// Row marginal of the transport polytope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowMarginal {
    /// The word frequency distribution of the anchor space.
    WordFrequency,
    /// Equal mass on every row of the central space.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub adamw: AdamW,
    pub solver: SolverConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub bias: bool,
    pub central: CentralSpace,
    pub marginal: RowMarginal,
    /// Interval (in steps) between modality-gap measurements in the metrics log.
    pub gap_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 32,
            adamw: AdamW::default(),
            solver: SolverConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            bias: true,
            central: CentralSpace::Words,
            marginal: RowMarginal::WordFrequency,
            gap_every: 50,
        }
    }
}

impl TrainConfig {
    /// Schedule used with OPT-sized decoders at full scale.
    pub fn opt_scale() -> Self {
        Self { lr: 1e-4, warmup_steps: 1500, total_steps: 30_000, batch_size: 128, ..Self::default() }
    }

    /// Schedule used with T5-sized decoders at full scale.
    pub fn t5_scale() -> Self {
        Self { lr: 5e-3, warmup_steps: 3000, total_steps: 15_000, batch_size: 256, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidValue(format!("lr must be positive, got {}", self.lr)));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidValue("total_steps must be at least 1".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::InvalidValue(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidValue("batch_size must be at least 1".into()));
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::InvalidValue("AdamW betas must lie in [0, 1)".into()));
        }
        if !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return Err(Error::InvalidValue("AdamW eps must be positive and weight decay nonnegative".into()));
        }
        if self.gap_every == 0 {
            return Err(Error::InvalidValue("gap_every must be at least 1".into()));
        }
        if let CentralSpace::Prototypes(0) = self.central {
            return Err(Error::InvalidValue("prototype count must be at least 1".into()));
        }
        self.solver.validate()?;
        self.loss.validate()
    }
}

/// One line of the JSON-lines metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub marginal_error: Option<f64>,
    pub sinkhorn_iterations: Option<usize>,
    /// Norm of the modality gap over the training set, sampled periodically.
    pub gap_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bridge: LinearBridge,
    pub metrics: Vec<MetricRecord>,
    pub prototypes: Option<PrototypeSpace>,
    pub itm_head: Option<ItmHead>,
}

/// Mean text feature per item.
pub fn pooled_text(items: &[PairedItem]) -> Result<PooledBatch> {
    let d = items.first().map(|i| i.text.ncols()).ok_or(Error::Empty("dataset"))?;
    let mut out = DMatrix::zeros(items.len(), d);
    for (n, it) in items.iter().enumerate() {
        if it.text.nrows() == 0 {
            return Err(Error::Empty("sequence"));
        }
        if it.text.ncols() != d {
            return Err(dim_mismatch(format!("item {n} has {} text features, expected {d}", it.text.ncols())));
        }
        out.set_row(n, &it.text.row_mean());
    }
    PooledBatch::new(out)
}

/// Mean projected visual feature per item.
pub fn pooled_visual(bridge: &LinearBridge, items: &[PairedItem]) -> Result<PooledBatch> {
    let mut out = DMatrix::zeros(items.len(), bridge.out_dim());
    for (n, it) in items.iter().enumerate() {
        if it.visual.nrows() == 0 {
            return Err(Error::Empty("sequence"));
        }
        let mean = it.visual.row_mean();
        let projected = bridge.apply_rows(&DMatrix::from_row_slice(1, mean.len(), mean.as_slice()))?;
        out.set_row(n, &projected.row(0));
    }
    PooledBatch::new(out)
}

fn solve(
    central: &DMatrix<f64>,
    normalize: bool,
    row_marginal: &DVector<f64>,
    pooled: &PooledBatch,
    cfg: &SolverConfig,
) -> Result<AssignmentMatrix> {
    let scores = ScoreMatrix::between(central, pooled, normalize)?;
    sinkhorn(&scores, row_marginal, &uniform(pooled.len()), cfg)
}

/// Everything the objective needs about one batch under the current parameters.
struct BatchEval {
    value: LossValue,
    assignments: Option<(AssignmentMatrix, AssignmentMatrix)>,
}

impl BatchEval {
    fn marginal_error(&self) -> Option<f64> {
        self.assignments.as_ref().map(|(v, t)| v.marginal_error.max(t.marginal_error))
    }

    fn iterations(&self) -> Option<usize> {
        self.assignments.as_ref().map(|(v, t)| v.iterations_used.max(t.iterations_used))
    }
}

struct Trainable<'a, D: FrozenDecoder + ?Sized> {
    space: &'a WordAnchorSpace,
    decoder: &'a D,
    cfg: &'a TrainConfig,
    prototypes: Option<PrototypeSpace>,
    itm_head: Option<ItmHead>,
}

impl<D: FrozenDecoder + ?Sized> Trainable<'_, D> {
    fn central(&self) -> (&DMatrix<f64>, bool) {
        match &self.prototypes {
            Some(p) => (&p.prototypes, true),
            None => (self.space.weights(), self.space.is_normalized()),
        }
    }

    /// Evaluates the weighted objective. Assignments are solved for the
    /// current parameters unless `fixed` supplies them.
    fn evaluate<B: Borrow<PairedItem>>(
        &self,
        bridge: &LinearBridge,
        batch: &[B],
        fixed: Option<&(AssignmentMatrix, AssignmentMatrix)>,
    ) -> Result<BatchEval> {
        let lc = &self.cfg.loss;
        let d = bridge.out_dim();
        let mut prompts = Vec::with_capacity(batch.len());
        let mut pv = DMatrix::zeros(batch.len(), d);
        let mut pt = DMatrix::zeros(batch.len(), d);
        for (n, it) in batch.iter().map(Borrow::borrow).enumerate() {
            if it.visual.nrows() == 0 || it.text.nrows() == 0 {
                return Err(Error::Empty("sequence"));
            }
            if it.text.ncols() != d {
                return Err(dim_mismatch(format!("text features have {} dims, anchors {d}", it.text.ncols())));
            }
            let p = bridge.apply_rows(&it.visual)?;
            pv.set_row(n, &p.row_mean());
            pt.set_row(n, &it.text.row_mean());
            prompts.push(p);
        }
        let pooled_v = PooledBatch::new(pv)?;
        let pooled_t = PooledBatch::new(pt)?;

        let mut parts: Vec<(Objective, LossValue)> = Vec::new();
        let mut assignments = None;
        if lc.lambda_map > 0.0 {
            let (central, normalize) = self.central();
            let (q_v, q_t) = match fixed {
                Some(q) => q.clone(),
                None => {
                    let mu = match self.cfg.marginal {
                        RowMarginal::WordFrequency if self.prototypes.is_none() => self.space.mu().clone(),
                        _ => uniform(central.nrows()),
                    };
                    (
                        solve(central, normalize, &mu, &pooled_v, &self.cfg.solver)?,
                        solve(central, normalize, &mu, &pooled_t, &self.cfg.solver)?,
                    )
                }
            };
            let grad_central = self.prototypes.is_some();
            parts.push((
                Objective::Map,
                map_loss(&q_v, &q_t, &pooled_v, &pooled_t, central, normalize, lc.tau, grad_central)?,
            ));
            assignments = Some((q_v, q_t));
        }
        if lc.lambda_cap > 0.0 {
            let captions: Vec<Vec<usize>> = batch.iter().map(|it| it.borrow().caption.clone()).collect();
            parts.push((Objective::Cap, caption_loss(self.decoder, &prompts, &PREFIX_IDS, &captions)?));
        }
        if batch.len() >= 2 {
            if lc.lambda_itc > 0.0 {
                parts.push((Objective::Itc, itc_loss(&pooled_v, &pooled_t, lc.itc_temperature)?));
            }
            if let (true, Some(head)) = (lc.lambda_itm > 0.0, &self.itm_head) {
                parts.push((Objective::Itm, itm_loss(&pooled_v, &pooled_t, head)?));
            }
        }
        let refs: Vec<(Objective, &LossValue)> = parts.iter().map(|(o, v)| (*o, v)).collect();
        let value = total_loss(&refs, lc)?;
        Ok(BatchEval { value, assignments })
    }
}

/// Gradient of a loss w.r.t. the bridge parameters, given the loss's
/// gradients w.r.t. the pooled visual vectors and the per-patch prompts.
///
/// Every patch of item `n` receives its prompt gradient plus `1 / N_p` of
/// the pooled gradient, since the pooled vector is the patch mean.
pub fn bridge_gradient<B: Borrow<PairedItem>>(
    bridge: &LinearBridge,
    batch: &[B],
    value: &LossValue,
) -> (DMatrix<f64>, Option<DVector<f64>>) {
    let mut gw = DMatrix::zeros(bridge.out_dim(), bridge.in_dim());
    let mut gb = DVector::zeros(bridge.out_dim());
    for (n, it) in batch.iter().map(Borrow::borrow).enumerate() {
        let n_p = it.visual.nrows() as f64;
        let pooled_share = value.grad_pooled_v.row(n).transpose() / n_p;
        for i in 0..it.visual.nrows() {
            let mut g = pooled_share.clone();
            if let Some(gp) = value.grad_prompts.get(n) {
                g += gp.row(i).transpose();
            }
            gw += &g * it.visual.row(i);
            gb += g;
        }
    }
    (gw, bridge.bias.as_ref().map(|_| gb))
}

/// Objective value and bridge gradient on one batch.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub grad_weight: DMatrix<f64>,
    pub grad_bias: Option<DVector<f64>>,
    /// Visual and text assignments used by the map term, if it is active.
    pub assignments: Option<(AssignmentMatrix, AssignmentMatrix)>,
}

/// Evaluates the configured objective of `cfg.loss` on one batch with the
/// frozen anchor words as central space. Pass `assignments` to hold them
/// fixed (as training does within a step) instead of solving afresh.
pub fn batch_objective<D: FrozenDecoder + ?Sized>(
    bridge: &LinearBridge,
    batch: &[PairedItem],
    space: &WordAnchorSpace,
    decoder: &D,
    cfg: &TrainConfig,
    itm_head: Option<&ItmHead>,
    assignments: Option<&(AssignmentMatrix, AssignmentMatrix)>,
) -> Result<BatchObjective> {
    let t = Trainable { space, decoder, cfg, prototypes: None, itm_head: itm_head.cloned() };
    let ev = t.evaluate(bridge, batch, assignments)?;
    let (grad_weight, grad_bias) = bridge_gradient(bridge, batch, &ev.value);
    Ok(BatchObjective {
        total: ev.value.total,
        components: ev.value.components,
        grad_weight,
        grad_bias,
        assignments: ev.assignments,
    })
}

/// Normalized-space gap norm between projected visual and text means.
pub(crate) fn gap_norm(bridge: &LinearBridge, items: &[PairedItem], normalize: bool) -> Result<f64> {
    let v = pooled_visual(bridge, items)?;
    let t = pooled_text(items)?;
    let (v, t) = if normalize {
        (PooledBatch::new(unit_rows(v.vectors()).0)?, PooledBatch::new(unit_rows(t.vectors()).0)?)
    } else {
        (v, t)
    };
    Ok(modality_gap(&v, &t)?.norm)
}

/// Trains a fresh bridge on `dataset`.
///
/// Each step draws the next batch of a per-epoch shuffle, solves the
/// transport problems for both modalities (held constant), evaluates the
/// weighted objective, back-propagates through pooling and projection and
/// takes one AdamW step. `on_record` sees every metric record as it is made.
pub fn train<D: FrozenDecoder + ?Sized>(
    dataset: &[PairedItem],
    space: &WordAnchorSpace,
    decoder: &D,
    cfg: &TrainConfig,
    on_record: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = dataset.first().ok_or(Error::Empty("dataset"))?;
    let d_v = first.visual.ncols();
    let d = space.dim();
    for (n, it) in dataset.iter().enumerate() {
        if it.visual.ncols() != d_v || it.text.ncols() != d {
            return Err(dim_mismatch(format!("item {n} does not match the dataset's feature dimensions")));
        }
        if let Some(&id) = it.caption.iter().find(|&&id| id >= space.len()) {
            return Err(Error::OutOfVocabulary { id, vocab_size: space.len() });
        }
    }
    if decoder.embed_dim() != d {
        return Err(dim_mismatch("decoder and anchor space differ in dimension"));
    }

    let mut bridge = LinearBridge::new(d, d_v, cfg.bias, cfg.seed);
    let prototypes = match cfg.central {
        CentralSpace::Prototypes(n) => Some(PrototypeSpace::new(n, d, cfg.seed.wrapping_add(1))),
        CentralSpace::Words => None,
    };
    let itm_head = (cfg.loss.lambda_itm > 0.0).then(|| ItmHead::zeros(d));
    let mut model = Trainable { space, decoder, cfg, prototypes, itm_head };

    let mut w_state = AdamState::new(bridge.weight.len());
    let mut b_state = AdamState::new(d);
    let mut p_state = model.prototypes.as_ref().map(|p| AdamState::new(p.prototypes.len()));
    let mut hw_state = AdamState::new(2 * 2 * d);
    let mut hb_state = AdamState::new(2);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut metrics = Vec::with_capacity(cfg.total_steps);

    for step in 1..=cfg.total_steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<&PairedItem> = order[cursor..end].iter().map(|&i| &dataset[i]).collect();
        cursor = end;

        let lr = lr_at(step - 1, cfg)?;
        let ev = model.evaluate(&bridge, &batch, None)?;
        let mut record = MetricRecord {
            step,
            lr,
            loss: ev.value.total,
            components: ev.value.components.clone(),
            marginal_error: ev.marginal_error(),
            sinkhorn_iterations: ev.iterations(),
            gap_norm: None,
            diagnostic: None,
        };
        if !ev.value.total.is_finite() {
            let detail = format!("loss components {:?}", ev.value.components);
            record.diagnostic = Some(detail.clone());
            on_record(&record)?;
            metrics.push(record);
            return Err(Error::NonFiniteLoss { step, detail });
        }

        let (gw, gb) = bridge_gradient(&bridge, &batch, &ev.value);
        adamw_step(bridge.weight.as_mut_slice(), gw.as_slice(), &mut w_state, step, lr, &cfg.adamw)?;
        if let (Some(b), Some(g)) = (bridge.bias.as_mut(), gb) {
            adamw_step(b.as_mut_slice(), g.as_slice(), &mut b_state, step, lr, &cfg.adamw)?;
        }
        if let (Some(p), Some(st), Some(g)) = (model.prototypes.as_mut(), p_state.as_mut(), &ev.value.grad_central) {
            adamw_step(p.prototypes.as_mut_slice(), g.as_slice(), st, step, lr, &cfg.adamw)?;
            p.renormalize();
        }
        if let (Some(h), Some(g)) = (model.itm_head.as_mut(), &ev.value.grad_itm_head) {
            adamw_step(h.weight.as_mut_slice(), g.weight.as_slice(), &mut hw_state, step, lr, &cfg.adamw)?;
            adamw_step(h.bias.as_mut_slice(), g.bias.as_slice(), &mut hb_state, step, lr, &cfg.adamw)?;
        }

        if step % cfg.gap_every == 0 || step == cfg.total_steps {
            record.gap_norm = Some(gap_norm(&bridge, dataset, space.is_normalized())?);
        }
        on_record(&record)?;
        metrics.push(record);
    }
    Ok(TrainOutcome { bridge, metrics, prototypes: model.prototypes, itm_head: model.itm_head })
}

/// Serializes records as JSON lines.
pub fn metrics_to_jsonl(records: &[MetricRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the weight matrix in the binary matrix format at `path` and a
/// `key = value` sidecar at `<path>.meta` holding dimensions, bias, step and seed.
pub fn write_checkpoint(path: &Path, bridge: &LinearBridge, step: usize, seed: u64) -> Result<()> {
    io::write_matrix(path, &bridge.weight)?;
    let mut meta = String::new();
    writeln!(meta, "out_dim = {}", bridge.out_dim()).unwrap();
    writeln!(meta, "in_dim = {}", bridge.in_dim()).unwrap();
    match &bridge.bias {
        Some(b) => {
            writeln!(meta, "bias = present").unwrap();
            let vals: Vec<String> = b.iter().map(|v| format!("{v:?}")).collect();
            writeln!(meta, "bias_values = {}", vals.join(",")).unwrap();
        }
        None => writeln!(meta, "bias = absent").unwrap(),
    }
    writeln!(meta, "step = {step}").unwrap();
    writeln!(meta, "seed = {seed}").unwrap();
    io::write_atomic(&sidecar_path(path), meta.as_bytes())
}

/// Reads a checkpoint written by [`write_checkpoint`]; returns the bridge and the step.
pub fn read_checkpoint(path: &Path) -> Result<(LinearBridge, usize)> {
    let weight = io::read_matrix(path)?;
    let meta_path = sidecar_path(path);
    let text = fs::read_to_string(&meta_path)?;
    let bad = |reason: String| Error::Malformed { path: meta_path.clone(), reason };
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("expected key = value, got `{line}`")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing key `{k}`")));
    let parse_usize =
        |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("`{k}` is not an integer"))) };
    if parse_usize("out_dim")? != weight.nrows() || parse_usize("in_dim")? != weight.ncols() {
        return Err(bad("dimensions disagree with the weight file".into()));
    }
    let bias = match get("bias")?.as_str() {
        "present" => {
            let vals: Vec<f64> = get("bias_values")?
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| bad(format!("bad bias value `{s}`"))))
                .collect::<Result<_>>()?;
            Some(DVector::from_vec(vals))
        }
        "absent" => None,
        other => return Err(bad(format!("bias must be present or absent, got `{other}`"))),
    };
    let step = parse_usize("step")?;
    let seed: u64 = get("seed")?.parse().map_err(|_| bad("`seed` is not an integer".into()))?;
    let mut bridge = LinearBridge::from_parts(weight, bias)?;
    bridge.init_seed = seed;
    Ok((bridge, step))
}
