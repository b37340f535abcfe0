//! End-to-end acceptance checks. Run with `cargo test --test acceptance`.
//! Prints one PASS/FAIL line per criterion and exits nonzero on any failure.

#[path = "common/mod.rs"]
mod common;

use std::collections::BTreeSet;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use otbridge::bridge::{
    metrics_to_jsonl, pooled_text, pooled_visual, read_checkpoint, train, write_checkpoint, LinearBridge, RowMarginal,
    TrainConfig,
};
use otbridge::config::{parse_config, RunConfig};
use otbridge::dataset::{read_dataset, write_dataset, DatasetDir};
use otbridge::evaluation::{modality_gap, nearest_anchors, semantic_arithmetic, t2i_retrieve, Sign};
use otbridge::io;
use otbridge::ot::{assignment_entropy, sinkhorn, AssignmentMatrix, ScoreMatrix, SolverConfig};
use otbridge::toy::{generate_synthetic, SyntheticSpec, ToyFrozenDecoder};
use otbridge::PooledBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS_GRID: [f64; 4] = [0.1, 0.05, 0.01, 0.005];

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Instance {
    s: DMatrix<f64>,
    mu: DVector<f64>,
    nu: DVector<f64>,
}

fn instance(seed: u64, max_k: usize, max_b: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=max_k);
    let b = rng.random_range(1..=max_b);
    let s = DMatrix::from_fn(k, b, |_, _| rng.random_range(-1.0..1.0));
    let raw = DVector::from_fn(k, |_, _| rng.random_range(0.05..1.0));
    let mu = &raw / raw.sum();
    Instance { s, mu, nu: DVector::from_element(b, 1.0 / b as f64) }
}

fn solve(inst: &Instance, cfg: &SolverConfig) -> AssignmentMatrix {
    sinkhorn(&ScoreMatrix::new(inst.s.clone()).unwrap(), &inst.mu, &inst.nu, cfg).unwrap()
}

fn marginal_gap(q: &DMatrix<f64>, mu: &DVector<f64>, nu: &DVector<f64>) -> f64 {
    let rows = DVector::from_iterator(q.nrows(), q.row_iter().map(|r| r.sum()));
    let cols = DVector::from_iterator(q.ncols(), q.column_iter().map(|c| c.sum()));
    (rows - mu).amax().max((cols - nu).amax())
}

// 100 instances, each solved at every eps of the grid
fn feasibility_solves() -> (Vec<(Instance, f64, AssignmentMatrix)>, Duration) {
    let cfg = SolverConfig { max_iter: 10_000, ..SolverConfig::default() };
    let insts: Vec<Instance> = (0..100).map(|seed| instance(seed, 200, 64)).collect();
    let t0 = Instant::now();
    let mut out = Vec::new();
    for inst in insts {
        for eps in EPS_GRID {
            let q = solve(&inst, &SolverConfig { eps, ..cfg });
            out.push((Instance { s: inst.s.clone(), mu: inst.mu.clone(), nu: inst.nu.clone() }, eps, q));
        }
    }
    (out, t0.elapsed())
}

fn c1_feasibility(solves: &[(Instance, f64, AssignmentMatrix)], took: Duration) -> Outcome {
    let worst = solves.iter().map(|(i, _, q)| marginal_gap(&q.q, &i.mu, &i.nu)).fold(0.0, f64::max);
    let iters = solves.iter().map(|(_, _, q)| q.iterations_used).max().unwrap_or(0);
    outcome(
        worst <= 1e-6 && took < Duration::from_secs(10),
        format!("{} solves, max marginal violation {worst:.2e}, max iterations {iters}, {took:.2?}", solves.len()),
    )
}

fn c2_scaling_form(solves: &[(Instance, f64, AssignmentMatrix)]) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut converged = 0;
    for (inst, eps, q) in solves.iter().filter(|(_, _, q)| q.converged) {
        converged += 1;
        let (k, b) = inst.s.shape();
        let l = DMatrix::from_fn(k, b, |i, j| q.q[(i, j)].ln() - inst.s[(i, j)] / eps);
        let row_mean: Vec<f64> = l.row_iter().map(|r| r.mean()).collect();
        let col_mean: Vec<f64> = l.column_iter().map(|c| c.mean()).collect();
        let grand = l.mean();
        for i in 0..k {
            for j in 0..b {
                worst = worst.max((l[(i, j)] - row_mean[i] - col_mean[j] + grand).abs());
            }
        }
    }
    outcome(
        converged == solves.len() && worst < 1e-6,
        format!("{converged}/{} converged, max double-centered residual {worst:.2e}", solves.len()),
    )
}

fn logsumexp(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Plain log-domain Sinkhorn run for a fixed number of sweeps.
fn reference_sinkhorn(s: &DMatrix<f64>, mu: &DVector<f64>, nu: &DVector<f64>, eps: f64, sweeps: usize) -> DMatrix<f64> {
    let (k, b) = s.shape();
    let mut f = vec![0.0; k];
    let mut g = vec![0.0; b];
    for _ in 0..sweeps {
        for i in 0..k {
            f[i] = mu[i].ln() - logsumexp((0..b).map(|j| s[(i, j)] / eps + g[j]));
        }
        for j in 0..b {
            g[j] = nu[j].ln() - logsumexp((0..k).map(|i| s[(i, j)] / eps + f[i]));
        }
    }
    DMatrix::from_fn(k, b, |i, j| (s[(i, j)] / eps + f[i] + g[j]).exp())
}

fn c3_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let inst = instance(1000 + seed, 10, 5);
        let eps = EPS_GRID[seed as usize % EPS_GRID.len()];
        let q = solve(&inst, &SolverConfig { eps, tol: 1e-13, max_iter: 10_000, log_domain: true });
        let r = reference_sinkhorn(&inst.s, &inst.mu, &inst.nu, eps, 10_000);
        worst = worst.max((&q.q - r).amax());
    }
    outcome(worst <= 1e-8, format!("20 instances, max entrywise difference {worst:.2e}"))
}

fn c4_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut where_ = String::new();
    for seed in 1..=20u64 {
        let c = common::grad_case(seed);
        for term in common::TERMS {
            let (analytic, fd) = common::weight_gradients(&c, term, 1e-5);
            let e = common::relative_error(&analytic, &fd);
            if e > worst {
                worst = e;
                where_ = format!("{term:?}, seed {seed}");
            }
        }
    }
    outcome(worst < 1e-4, format!("5 terms x 20 seeds, max relative error {worst:.2e} ({where_})"))
}

fn c5_entropy() -> Outcome {
    let mut worst_drop: f64 = 0.0;
    for seed in 0..10u64 {
        let inst = instance(2000 + seed, 200, 64);
        let mut grid = EPS_GRID;
        grid.sort_by(f64::total_cmp);
        let h: Vec<f64> = grid
            .iter()
            .map(|&eps| {
                assignment_entropy(&solve(
                    &inst,
                    &SolverConfig { eps, tol: 1e-12, max_iter: 100_000, log_domain: true },
                ))
            })
            .collect();
        for w in h.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }
    outcome(worst_drop <= 1e-9, format!("10 instances, largest entropy decrease {worst_drop:.2e}"))
}

fn base_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec { seed, ..SyntheticSpec::default() }
}

fn run_config(seed: u64) -> TrainConfig {
    TrainConfig { lr: 5e-3, total_steps: 2000, seed, ..TrainConfig::default() }
}

fn heldout_r1(bridge: &LinearBridge, items: &[otbridge::PairedItem]) -> f64 {
    let r = t2i_retrieve(&pooled_text(items).unwrap(), &pooled_visual(bridge, items).unwrap(), &[1]).unwrap();
    r.recall_at[&1]
}

fn c6_alignment() -> Outcome {
    let t0 = Instant::now();
    let spec = base_spec(42);
    let data = generate_synthetic(&spec).unwrap();
    let dec = ToyFrozenDecoder::new(&data.space, spec.seed);
    let out = train(&data.train, &data.space, &dec, &run_config(42), &mut |_| Ok(())).unwrap();
    let r1 = heldout_r1(&out.bridge, &data.heldout);
    let took = t0.elapsed();
    outcome(r1 >= 0.9 && took < Duration::from_secs(120), format!("held-out T2I R@1 {r1:.3} in {took:.2?}"))
}

fn unit_rows(p: &PooledBatch) -> PooledBatch {
    let mut m = p.vectors().clone();
    for mut r in m.row_iter_mut() {
        let n = r.norm();
        r /= n;
    }
    PooledBatch::new(m).unwrap()
}

fn gap_norm(bridge: &LinearBridge, items: &[otbridge::PairedItem]) -> f64 {
    let v = unit_rows(&pooled_visual(bridge, items).unwrap());
    let t = unit_rows(&pooled_text(items).unwrap());
    modality_gap(&v, &t).unwrap().norm
}

fn c7_gap_ordering() -> Outcome {
    let mut held = 0;
    let mut rows = Vec::new();
    for seed in 1..=5u64 {
        let spec = base_spec(seed);
        let data = generate_synthetic(&spec).unwrap();
        let dec = ToyFrozenDecoder::new(&data.space, spec.seed);
        let both = run_config(seed);
        let mut cap_only = both.clone();
        cap_only.loss.lambda_map = 0.0;
        let untrained = LinearBridge::new(spec.d, spec.d_v, both.bias, seed);
        let g0 = gap_norm(&untrained, &data.train);
        let g_cap =
            gap_norm(&train(&data.train, &data.space, &dec, &cap_only, &mut |_| Ok(())).unwrap().bridge, &data.train);
        let g_both =
            gap_norm(&train(&data.train, &data.space, &dec, &both, &mut |_| Ok(())).unwrap().bridge, &data.train);
        if g_both < g_cap && g_cap < g0 {
            held += 1;
        }
        rows.push(format!("{g0:.3}/{g_cap:.3}/{g_both:.3}"));
    }
    outcome(held >= 4, format!("ordering held in {held}/5 seeds (untrained/cap/cap+map: {})", rows.join(", ")))
}

fn c8_polytope() -> Outcome {
    let mut held = 0;
    let mut rows = Vec::new();
    for seed in 1..=5u64 {
        let spec = SyntheticSpec { zipf_s: 1.5, ..base_spec(seed) };
        let data = generate_synthetic(&spec).unwrap();
        let dec = ToyFrozenDecoder::new(&data.space, spec.seed);
        let words = run_config(seed);
        let uniform = TrainConfig { marginal: RowMarginal::Uniform, ..words.clone() };
        let r_words =
            heldout_r1(&train(&data.train, &data.space, &dec, &words, &mut |_| Ok(())).unwrap().bridge, &data.heldout);
        let r_uniform = heldout_r1(
            &train(&data.train, &data.space, &dec, &uniform, &mut |_| Ok(())).unwrap().bridge,
            &data.heldout,
        );
        if r_words >= r_uniform {
            held += 1;
        }
        rows.push(format!("{r_words:.2}/{r_uniform:.2}"));
    }
    outcome(held >= 4, format!("word marginal >= uniform in {held}/5 seeds (R@1 words/uniform: {})", rows.join(", ")))
}

fn c9_arithmetic() -> Outcome {
    let spec = SyntheticSpec { noise_sigma: 0.0, ..base_spec(42) };
    let data = generate_synthetic(&spec).unwrap();
    let dec = ToyFrozenDecoder::new(&data.space, spec.seed);
    let bridge = train(&data.train, &data.space, &dec, &run_config(42), &mut |_| Ok(())).unwrap().bridge;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let trials = 200;
    let mut hits = 0;
    for _ in 0..trials {
        let mut c: Vec<usize> = Vec::new();
        while c.len() < 3 {
            let x = rng.random_range(4..spec.k);
            if !c.contains(&x) {
                c.push(x);
            }
        }
        let (t, u, v) = (c[0], c[1], c[2]);
        // {t,u} - {u,v} + {v,t} pools to t
        let items: Vec<_> = [[t, u], [u, v], [v, t]].iter().map(|p| data.generator.make_item(p, &mut rng)).collect();
        let pv = pooled_visual(&bridge, &items).unwrap();
        let q =
            semantic_arithmetic(&[(Sign::Plus, pv.row(0)), (Sign::Minus, pv.row(1)), (Sign::Plus, pv.row(2))], false)
                .unwrap();
        if nearest_anchors(&q, &data.space, 1).unwrap()[0].0 == data.space.vocab()[t] {
            hits += 1;
        }
    }
    let rate = hits as f64 / trials as f64;
    outcome(rate >= 0.95, format!("top-1 hit the target in {hits}/{trials} trials"))
}

fn c10_determinism() -> Outcome {
    let mut failures = Vec::new();
    let spec = SyntheticSpec { n_train: 128, n_heldout: 20, ..base_spec(9) };
    let data = generate_synthetic(&spec).unwrap();
    let dec = ToyFrozenDecoder::new(&data.space, spec.seed);
    let cfg = TrainConfig { total_steps: 150, warmup_steps: 10, gap_every: 25, ..run_config(9) };
    let log = || {
        let mut recs = Vec::new();
        let out = train(&data.train, &data.space, &dec, &cfg, &mut |r| {
            recs.push(r.clone());
            Ok(())
        })
        .unwrap();
        (metrics_to_jsonl(&recs).unwrap(), out.bridge)
    };
    let (a, bridge) = log();
    let (b, _) = log();
    if a != b {
        failures.push("metrics log differs between identical runs");
    }

    let dir = tempfile::tempdir().unwrap();
    let ds = DatasetDir::from_synthetic(&data);
    write_dataset(&dir.path().join("d1"), &ds).unwrap();
    let back = read_dataset(&dir.path().join("d1")).unwrap();
    write_dataset(&dir.path().join("d2"), &back).unwrap();
    for entry in fs::read_dir(dir.path().join("d1")).unwrap() {
        let name = entry.unwrap().file_name();
        if fs::read(dir.path().join("d1").join(&name)).unwrap() != fs::read(dir.path().join("d2").join(&name)).unwrap()
        {
            failures.push("dataset file changed on rewrite");
        }
    }
    if back.train.iter().zip(&data.train).any(|(x, y)| x.caption != y.caption) || back.space.mu() != data.space.mu() {
        failures.push("dataset contents changed");
    }

    // f32-representable values survive a matrix write exactly
    let m = bridge.weight.map(|x| x as f32 as f64);
    let p = dir.path().join("m.bin");
    io::write_matrix(&p, &m).unwrap();
    if io::read_matrix(&p).unwrap() != m {
        failures.push("matrix round trip");
    }

    let ck = dir.path().join("bridge.bin");
    write_checkpoint(&ck, &bridge, 150, 9).unwrap();
    match read_checkpoint(&ck) {
        Ok((back, 150)) if back.weight == bridge.weight.map(|x| x as f32 as f64) && back.bias == bridge.bias => {}
        _ => failures.push("checkpoint round trip"),
    }

    let cfg_text = parse_config(None, &[("lr".into(), "0.005".into()), ("seed".into(), "9".into())])
        .unwrap()
        .to_canonical_string();
    let cp = dir.path().join("config.txt");
    fs::write(&cp, &cfg_text).unwrap();
    let reread: RunConfig = parse_config(Some(&cp), &[]).unwrap();
    if reread.to_canonical_string() != cfg_text {
        failures.push("config round trip");
    }

    let lines = a.lines().count();
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{lines} metric records identical across runs; dataset, matrix, checkpoint and config round-trip")
        } else {
            failures.into_iter().collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>().join("; ")
        },
    )
}

fn main() -> ExitCode {
    let (solves, took) = feasibility_solves();
    let checks: Vec<(&str, Check)> = vec![
        ("1 solver feasibility", Box::new(|| c1_feasibility(&solves, took))),
        ("2 scaling form of the plan", Box::new(|| c2_scaling_form(&solves))),
        ("3 reference solver agreement", Box::new(c3_oracle)),
        ("4 gradient suite", Box::new(c4_gradients)),
        ("5 entropy monotone in eps", Box::new(c5_entropy)),
        ("6 synthetic alignment", Box::new(c6_alignment)),
        ("7 modality gap ordering", Box::new(c7_gap_ordering)),
        ("8 word marginal vs uniform", Box::new(c8_polytope)),
        ("9 semantic arithmetic", Box::new(c9_arithmetic)),
        ("10 determinism and round trips", Box::new(c10_determinism)),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
