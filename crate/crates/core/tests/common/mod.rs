#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use otbridge::bridge::{LinearBridge, PairedItem};
use otbridge::losses::ItmHead;
use otbridge::toy::{generate_synthetic, SyntheticData, SyntheticSpec, ToyFrozenDecoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Small synthetic problem for derivative checks.
pub struct GradCase {
    pub data: SyntheticData,
    pub batch: Vec<PairedItem>,
    pub decoder: ToyFrozenDecoder,
    pub bridge: LinearBridge,
    pub head: ItmHead,
}

pub fn grad_case(seed: u64) -> GradCase {
    let spec = SyntheticSpec {
        k: 25,
        d: 6,
        d_v: 9,
        n_train: 6,
        n_heldout: 1,
        concepts_per_item: 2,
        patches_per_item: 3,
        seed,
        ..Default::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let batch = data.train.clone();
    let decoder = ToyFrozenDecoder::new(&data.space, seed + 100);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let mut bridge = LinearBridge::new(6, 9, true, seed);
    bridge.bias = Some(DVector::from_fn(6, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal)));
    let head = ItmHead { weight: gaussian(2, 12, &mut rng) * 0.5, bias: DVector::from_vec(vec![0.1, -0.2]) };
    GradCase { data, batch, decoder, bridge, head }
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn finite_difference(x: &DMatrix<f64>, h: f64, mut f: impl FnMut(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(x.nrows(), x.ncols());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut plus = x.clone();
            plus[(i, j)] += h;
            let mut minus = x.clone();
            minus[(i, j)] -= h;
            g[(i, j)] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
    }
    g
}

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

pub fn with_weight(bridge: &LinearBridge, w: &DMatrix<f64>) -> LinearBridge {
    LinearBridge { weight: w.clone(), ..bridge.clone() }
}

use otbridge::bridge::{batch_objective, bridge_gradient, pooled_text, pooled_visual, TrainConfig};
use otbridge::losses::{caption_loss, itc_loss, itm_loss, map_loss, LossValue};
use otbridge::ot::{assign_batch, AssignmentMatrix, SolverConfig};
use otbridge::toy::PREFIX_IDS;

#[derive(Debug, Clone, Copy)]
pub enum Term {
    Map,
    Cap,
    Itc,
    Itm,
    Total,
}

pub const TERMS: [Term; 5] = [Term::Map, Term::Cap, Term::Itc, Term::Itm, Term::Total];

fn total_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.loss.lambda_map = 0.6;
    cfg.loss.lambda_cap = 0.4;
    cfg.loss.lambda_itc = 0.3;
    cfg.loss.lambda_itm = 0.2;
    cfg
}

/// Assignments at the case's base bridge; held fixed under perturbation.
pub fn base_assignments(c: &GradCase) -> (AssignmentMatrix, AssignmentMatrix) {
    let cfg = SolverConfig { tol: 1e-12, max_iter: 5000, ..SolverConfig::default() };
    let pv = pooled_visual(&c.bridge, &c.batch).unwrap();
    let pt = pooled_text(&c.batch).unwrap();
    (assign_batch(&c.data.space, &pv, &cfg).unwrap(), assign_batch(&c.data.space, &pt, &cfg).unwrap())
}

fn single_term(c: &GradCase, term: Term, bridge: &LinearBridge, q: &(AssignmentMatrix, AssignmentMatrix)) -> LossValue {
    let pv = pooled_visual(bridge, &c.batch).unwrap();
    let pt = pooled_text(&c.batch).unwrap();
    let space = &c.data.space;
    match term {
        Term::Map => map_loss(&q.0, &q.1, &pv, &pt, space.weights(), space.is_normalized(), 0.1, false).unwrap(),
        Term::Cap => {
            let prompts: Vec<DMatrix<f64>> = c.batch.iter().map(|it| bridge.apply_rows(&it.visual).unwrap()).collect();
            let caps: Vec<Vec<usize>> = c.batch.iter().map(|it| it.caption.clone()).collect();
            caption_loss(&c.decoder, &prompts, &PREFIX_IDS, &caps).unwrap()
        }
        Term::Itc => itc_loss(&pv, &pt, 0.07).unwrap(),
        Term::Itm => itm_loss(&pv, &pt, &c.head).unwrap(),
        Term::Total => unreachable!(),
    }
}

/// Analytic and central-difference gradients of `term` w.r.t. the bridge weight.
pub fn weight_gradients(c: &GradCase, term: Term, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let q = base_assignments(c);
    match term {
        Term::Total => {
            let cfg = total_config();
            let space = &c.data.space;
            let at = |b: &LinearBridge| {
                batch_objective(b, &c.batch, space, &c.decoder, &cfg, Some(&c.head), Some(&q)).unwrap()
            };
            let analytic = at(&c.bridge).grad_weight;
            let fd = finite_difference(&c.bridge.weight, h, |w| at(&with_weight(&c.bridge, w)).total);
            (analytic, fd)
        }
        _ => {
            let value = single_term(c, term, &c.bridge, &q);
            let analytic = bridge_gradient(&c.bridge, &c.batch, &value).0;
            let fd =
                finite_difference(&c.bridge.weight, h, |w| single_term(c, term, &with_weight(&c.bridge, w), &q).total);
            (analytic, fd)
        }
    }
}
