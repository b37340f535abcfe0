//! Command-line entry point. Exit codes: 0 success, 1 invalid input, 2 runtime failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bridge::{
    pooled_text, pooled_visual, read_checkpoint, train, write_checkpoint, LinearBridge, MetricRecord, PooledBatch,
};
use crate::config::{parse_config, parse_override, RunConfig};
use crate::dataset::{read_dataset, write_dataset, DatasetDir, Split};
use crate::error::{Error, Result};
use crate::evaluation::{
    modality_gap, nearest_anchors, pca_2d, projection_csv, semantic_arithmetic, t2i_retrieve, top_words_per_item, Sign,
};
use crate::io;
use crate::numeric::unit_rows;
use crate::ot::{sinkhorn, ScoreMatrix, SolverConfig};
use crate::toy::{generate_synthetic, greedy_decode, SyntheticSpec, ToyFrozenDecoder, PREFIX_IDS};

/// `println!` that stays quiet when stdout is closed early, e.g. piped into `head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser, Debug)]
#[command(name = "otbridge", version, about = "Align visual features to a frozen word-embedding space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired dataset with a planted visual-to-text map.
    GenSynth(GenSynthArgs),
    /// Train a bridge and write its checkpoint, metrics and frozen config.
    Train(TrainArgs),
    /// Dump the assignment matrix of a split and each item's top words.
    Assign(AssignArgs),
    /// Text-to-image retrieval recall on a split.
    Retrieve(RetrieveArgs),
    /// Modality gap between projected visual and text features.
    Gap(GapArgs),
    /// Signed sums of item representations and their nearest anchor words.
    Arith(ArithArgs),
    /// Greedy captions from the toy decoder.
    Caption(CaptionArgs),
    /// Train and evaluate a grid of loss weightings or solver variants.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 24)]
    d_v: usize,
    #[arg(long, default_value_t = 512)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_heldout: usize,
    #[arg(long, default_value_t = 3)]
    concepts_per_item: usize,
    #[arg(long, default_value_t = 3)]
    patches_per_item: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    null_scale: f64,
    #[arg(long, default_value_t = 3.0)]
    visual_offset: f64,
    #[arg(long, default_value_t = 1.0)]
    zipf_s: f64,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set data_dir=DIR`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides: Vec<(String, String)> = self.set.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
        if let Some(d) = &self.data {
            overrides.push(("data_dir".into(), d.display().to_string()));
        }
        if let Some(o) = &self.out {
            overrides.push(("out_dir".into(), o.display().to_string()));
        }
        parse_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Heldout => Split::Heldout,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Bridge checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
    split: SplitArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MarginalArg {
    Words,
    Uniform,
}

#[derive(Args, Debug)]
struct AssignArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Assign text features instead of projected visual features.
    #[arg(long)]
    text: bool,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    #[arg(long, value_enum, default_value_t = MarginalArg::Words)]
    marginal: MarginalArg,
    /// Write the assignment matrix here in the binary matrix format.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    ks: Vec<usize>,
    /// Write every query's ranked gallery as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GapArgs {
    #[arg(long)]
    data: PathBuf,
    /// Without a checkpoint the gap of a freshly initialized bridge is reported.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    /// Seed of the fresh bridge when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Measure on raw pooled vectors rather than unit-normalized ones.
    #[arg(long)]
    raw: bool,
    /// Write a 2-D PCA projection of both modalities as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModalityArg {
    Visual,
    Text,
}

#[derive(Args, Debug)]
struct ArithArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Signed item index, e.g. `+3` or `-12`; repeatable.
    #[arg(long = "term", allow_hyphen_values = true, required = true)]
    terms: Vec<String>,
    #[arg(long, value_enum, default_value_t = ModalityArg::Visual)]
    modality: ModalityArg,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Scale the sum to unit length before the search.
    #[arg(long)]
    normalize: bool,
    /// Write the nearest-anchor table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CaptionArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Number of leading items to caption.
    #[arg(long, default_value_t = 5)]
    items: usize,
    #[arg(long, default_value_t = 5)]
    max_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Grid {
    Lambda,
    Solver,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_enum)]
    grid: Grid,
    #[command(flatten)]
    cfg: ConfigArgs,
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => run_train(a),
        Command::Assign(a) => assign(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Gap(a) => gap(a),
        Command::Arith(a) => arith(a),
        Command::Caption(a) => caption(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        d_v: a.d_v,
        d: a.d,
        k: a.k,
        n_train: a.n_train,
        n_heldout: a.n_heldout,
        concepts_per_item: a.concepts_per_item,
        patches_per_item: a.patches_per_item,
        noise_sigma: a.noise_sigma,
        null_scale: a.null_scale,
        visual_offset: a.visual_offset,
        zipf_s: a.zipf_s,
        seed: a.seed,
    };
    let data = generate_synthetic(&spec)?;
    write_dataset(&a.out, &DatasetDir::from_synthetic(&data))?;
    say!(
        "wrote {} train and {} held-out items (K={}, d={}, d_v={}) to {}",
        data.train.len(),
        data.heldout.len(),
        spec.k,
        spec.d,
        spec.d_v,
        a.out.display()
    );
    Ok(())
}

fn decoder_for(ds: &DatasetDir) -> ToyFrozenDecoder {
    ToyFrozenDecoder::new(&ds.space, ds.decoder_seed)
}

/// Trains on the training split, always writing the metrics log, even
/// when training stops on a non-finite loss.
fn train_run(cfg: &RunConfig, ds: &DatasetDir, out: &Path) -> Result<LinearBridge> {
    std::fs::create_dir_all(out)?;
    io::write_atomic(&out.join("config.txt"), cfg.to_canonical_string().as_bytes())?;
    let decoder = decoder_for(ds);
    let mut records: Vec<MetricRecord> = Vec::new();
    let result = train(&ds.train, &ds.space, &decoder, &cfg.train, &mut |r| {
        records.push(r.clone());
        Ok(())
    });
    io::write_atomic(&out.join("metrics.jsonl"), crate::bridge::metrics_to_jsonl(&records)?.as_bytes())?;
    let outcome = result?;
    write_checkpoint(&out.join("bridge.bin"), &outcome.bridge, cfg.train.total_steps, cfg.train.seed)?;
    Ok(outcome.bridge)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let ds = read_dataset(cfg.require_data_dir()?)?;
    let out = cfg.require_out_dir()?.to_path_buf();
    let bridge = train_run(&cfg, &ds, &out)?;
    let v = pooled_visual(&bridge, &ds.heldout)?;
    let t = pooled_text(&ds.heldout)?;
    let r = t2i_retrieve(&t, &v, &[1, 5])?;
    say!(
        "trained {} steps; held-out T2I R@1 {:.3} R@5 {:.3}; outputs in {}",
        cfg.train.total_steps,
        r.recall_at[&1],
        r.recall_at[&5],
        out.display()
    );
    Ok(())
}

fn load_eval(e: &EvalArgs) -> Result<(DatasetDir, LinearBridge)> {
    let ds = read_dataset(&e.data)?;
    let (bridge, _) = read_checkpoint(&e.checkpoint)?;
    if bridge.out_dim() != ds.space.dim() {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint maps into {} dims, anchors have {}",
            bridge.out_dim(),
            ds.space.dim()
        )));
    }
    Ok((ds, bridge))
}

fn assign(a: AssignArgs) -> Result<()> {
    let (ds, bridge) = load_eval(&a.eval)?;
    let items = ds.split(a.eval.split.into());
    let pooled = if a.text { pooled_text(items)? } else { pooled_visual(&bridge, items)? };
    let cfg = SolverConfig { eps: a.eps, ..SolverConfig::default() };
    cfg.validate()?;
    let mu = match a.marginal {
        MarginalArg::Words => ds.space.mu().clone(),
        MarginalArg::Uniform => crate::numeric::uniform(ds.space.len()),
    };
    let scores = ScoreMatrix::between(ds.space.weights(), &pooled, ds.space.is_normalized())?;
    let q = sinkhorn(&scores, &mu, &crate::numeric::uniform(pooled.len()), &cfg)?;
    say!(
        "# {} items, {} iterations, marginal error {:.3e}, converged {}",
        q.n_items(),
        q.iterations_used,
        q.marginal_error,
        q.converged
    );
    for (n, words) in top_words_per_item(&q, ds.space.vocab(), a.top_k)?.iter().enumerate() {
        let list: Vec<String> = words.iter().map(|(w, m)| format!("{w}:{:.4}", m * q.n_items() as f64)).collect();
        say!("{n}\t{}", list.join(" "));
    }
    if let Some(p) = &a.out {
        io::write_matrix(p, &q.q)?;
    }
    Ok(())
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    let (ds, bridge) = load_eval(&a.eval)?;
    let items = ds.split(a.eval.split.into());
    let r = t2i_retrieve(&pooled_text(items)?, &pooled_visual(&bridge, items)?, &a.ks)?;
    say!("k\trecall");
    for (k, v) in &r.recall_at {
        say!("{k}\t{v:.4}");
    }
    if let Some(p) = &a.csv {
        let mut s = String::from("query,ranking\n");
        for (q, rank) in r.rankings.iter().enumerate() {
            let ids: Vec<String> = rank.iter().map(|i| i.to_string()).collect();
            writeln!(s, "{q},{}", ids.join(" ")).unwrap();
        }
        io::write_atomic(p, s.as_bytes())?;
    }
    Ok(())
}

fn unit_batch(p: &PooledBatch) -> Result<PooledBatch> {
    PooledBatch::new(unit_rows(p.vectors()).0)
}

fn gap(a: GapArgs) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let d_v = ds.train.first().map(|i| i.visual.ncols()).ok_or(Error::Empty("training split"))?;
    let bridge = match &a.checkpoint {
        Some(p) => read_checkpoint(p)?.0,
        None => LinearBridge::new(ds.space.dim(), d_v, true, a.seed),
    };
    let items = ds.split(a.split.into());
    let (mut v, mut t) = (pooled_visual(&bridge, items)?, pooled_text(items)?);
    if !a.raw {
        v = unit_batch(&v)?;
        t = unit_batch(&t)?;
    }
    let g = modality_gap(&v, &t)?;
    say!("gap_norm\t{:.6}", g.norm);
    let delta: Vec<String> = g.delta.iter().map(|x| format!("{x:.6}")).collect();
    say!("delta\t{}", delta.join(" "));
    if let Some(p) = &a.csv {
        io::write_atomic(p, projection_csv(&pca_2d(&v, &t)?).as_bytes())?;
    }
    Ok(())
}

fn parse_term(s: &str, n_items: usize) -> Result<(Sign, usize)> {
    let (sign, rest) = match s.as_bytes().first() {
        Some(b'+') => (Sign::Plus, &s[1..]),
        Some(b'-') => (Sign::Minus, &s[1..]),
        _ => (Sign::Plus, s),
    };
    let idx: usize = rest.parse().map_err(|_| Error::InvalidValue(format!("term `{s}` is not a signed item index")))?;
    if idx >= n_items {
        return Err(Error::InvalidValue(format!("item {idx} out of range ({n_items} items)")));
    }
    Ok((sign, idx))
}

fn arith(a: ArithArgs) -> Result<()> {
    let (ds, bridge) = load_eval(&a.eval)?;
    let items = ds.split(a.eval.split.into());
    let pooled = match a.modality {
        ModalityArg::Visual => pooled_visual(&bridge, items)?,
        ModalityArg::Text => pooled_text(items)?,
    };
    let terms: Vec<(Sign, nalgebra::DVector<f64>)> = a
        .terms
        .iter()
        .map(|s| parse_term(s, items.len()).map(|(sign, i)| (sign, pooled.row(i))))
        .collect::<Result<_>>()?;
    let v = semantic_arithmetic(&terms, a.normalize)?;
    let near = nearest_anchors(&v, &ds.space, a.k)?;
    let mut csv = String::from("rank,token,similarity\n");
    for (r, (tok, sim)) in near.iter().enumerate() {
        say!("{}\t{tok}\t{sim:.4}", r + 1);
        writeln!(csv, "{},{tok},{sim}", r + 1).unwrap();
    }
    if let Some(p) = &a.csv {
        io::write_atomic(p, csv.as_bytes())?;
    }
    Ok(())
}

fn caption(a: CaptionArgs) -> Result<()> {
    let (ds, bridge) = load_eval(&a.eval)?;
    let decoder = decoder_for(&ds);
    let vocab = ds.space.vocab();
    for (n, it) in ds.split(a.eval.split.into()).iter().take(a.items).enumerate() {
        let prompts = bridge.apply_rows(&it.visual)?;
        let ids = greedy_decode(&decoder, &prompts, &PREFIX_IDS, a.max_len)?;
        let words: Vec<&str> = ids.iter().map(|&i| vocab[i].as_str()).collect();
        let truth: Vec<&str> = it.caption.iter().filter_map(|&i| vocab.get(i).map(String::as_str)).collect();
        say!("{n}\t{}\t| {}", words.join(" "), truth.join(" "));
    }
    Ok(())
}

/// Loss-weight ratios of the weighting ablation, as `(lambda_map, lambda_cap)`.
pub const LAMBDA_GRID: [(f64, f64); 7] =
    [(0.0, 1.0), (0.2, 0.8), (0.4, 0.6), (0.5, 0.5), (0.6, 0.4), (0.8, 0.2), (1.0, 0.0)];

/// Entropy smoothness values of the solver ablation.
pub const EPS_GRID: [f64; 4] = [0.1, 0.05, 0.01, 0.005];

/// Named configurations of one ablation grid, each derived from `base`.
pub fn ablation_grid(base: &RunConfig, grid_lambda: bool) -> Result<Vec<(String, RunConfig)>> {
    let mut out = Vec::new();
    if grid_lambda {
        for (m, c) in LAMBDA_GRID {
            let mut cfg = base.clone();
            cfg.set("lambda_map", &m.to_string())?;
            cfg.set("lambda_cap", &c.to_string())?;
            out.push((format!("map={m} cap={c}"), cfg));
        }
    } else {
        let variants = [
            ("prototypes+uniform", "prototypes", "uniform"),
            ("words+uniform", "words", "uniform"),
            ("words+frequency", "words", "words"),
        ];
        for (name, central, marginal) in variants {
            for eps in EPS_GRID {
                let mut cfg = base.clone();
                cfg.set("central", central)?;
                cfg.set("marginal", marginal)?;
                cfg.set("eps", &eps.to_string())?;
                out.push((format!("{name} eps={eps}"), cfg));
            }
        }
    }
    for (_, c) in &out {
        c.validate()?;
    }
    Ok(out)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = a.cfg.load()?;
    let ds = read_dataset(base.require_data_dir()?)?;
    let out = base.require_out_dir()?.to_path_buf();
    let grid_name = if a.grid == Grid::Lambda { "lambda" } else { "solver" };
    let mut csv = String::from("variant,r_at_1,r_at_5,gap_norm,final_loss\n");
    say!("{:<28} {:>7} {:>7} {:>9} {:>10}", "variant", "R@1", "R@5", "gap", "loss");
    for (i, (name, cfg)) in ablation_grid(&base, a.grid == Grid::Lambda)?.into_iter().enumerate() {
        let run_dir = out.join(format!("{grid_name}_{i:02}"));
        let bridge = train_run(&cfg, &ds, &run_dir)?;
        let (v, t) = (pooled_visual(&bridge, &ds.heldout)?, pooled_text(&ds.heldout)?);
        let r = t2i_retrieve(&t, &v, &[1, 5])?;
        let g =
            modality_gap(&unit_batch(&pooled_visual(&bridge, &ds.train)?)?, &unit_batch(&pooled_text(&ds.train)?)?)?;
        let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl"))?;
        let last: MetricRecord = serde_json::from_str(metrics.lines().last().ok_or(Error::Empty("metrics log"))?)?;
        say!("{name:<28} {:>7.3} {:>7.3} {:>9.4} {:>10.4}", r.recall_at[&1], r.recall_at[&5], g.norm, last.loss);
        writeln!(csv, "{name},{},{},{},{}", r.recall_at[&1], r.recall_at[&5], g.norm, last.loss).unwrap();
    }
    io::write_atomic(&out.join(format!("ablate_{grid_name}.csv")), csv.as_bytes())?;
    Ok(())
}
