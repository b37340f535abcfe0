//! Desk-scale stand-ins for the frozen encoders and language model, and a
//! synthetic paired-data generator with a planted visual-to-text map.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::anchors::{TokenCounts, WordAnchorSpace};
use crate::bridge::PairedItem;
use crate::error::{Error, Result};
use crate::losses::FrozenDecoder;
use crate::numeric::softmax;

/// End-of-sequence token id in synthetic vocabularies.
pub const EOS_ID: usize = 0;
/// Ids of the caption prefix tokens `A photo of`.
pub const PREFIX_IDS: [usize; 3] = [1, 2, 3];
pub const PREFIX_TEXT: &str = "A photo of";
/// First id available to concept words.
pub const FIRST_CONCEPT_ID: usize = 4;

/// A frozen one-layer next-token model tied to the anchor embeddings:
/// `logits = W tanh(M c)`, where `c` is the mean of the soft prompts and the
/// embeddings of all context tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFrozenDecoder {
    anchors: DMatrix<f64>,
    mixing: DMatrix<f64>,
}

impl ToyFrozenDecoder {
    pub const DEFAULT_GAIN: f64 = 3.0;
    pub const DEFAULT_JITTER: f64 = 0.3;

    /// `M = gain * (I + jitter * G / sqrt(d))` with `G` standard normal, seeded.
    pub fn new(space: &WordAnchorSpace, seed: u64) -> Self {
        Self::with_gain(space, seed, Self::DEFAULT_GAIN, Self::DEFAULT_JITTER)
    }

    pub fn with_gain(space: &WordAnchorSpace, seed: u64, gain: f64, jitter: f64) -> Self {
        let d = space.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = jitter / (d as f64).sqrt();
        let mixing = DMatrix::from_fn(d, d, |i, j| {
            let g: f64 = StandardNormal.sample(&mut rng);
            gain * (if i == j { 1.0 } else { 0.0 } + scale * g)
        });
        Self { anchors: space.weights().clone(), mixing }
    }

    pub fn from_parts(anchors: DMatrix<f64>, mixing: DMatrix<f64>) -> Result<Self> {
        let d = anchors.ncols();
        if mixing.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!("mixing matrix must be {d}x{d}")));
        }
        Ok(Self { anchors, mixing })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let k = self.anchors.nrows();
        match ids.iter().find(|&&id| id >= k) {
            Some(&id) => Err(Error::OutOfVocabulary { id, vocab_size: k }),
            None => Ok(()),
        }
    }

    /// Mean context vector and the number of vectors averaged.
    fn context_mean(&self, prompts: &DMatrix<f64>, context: &[usize]) -> Result<(DVector<f64>, usize)> {
        let d = self.anchors.ncols();
        if prompts.nrows() > 0 && prompts.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "prompts have {} features, decoder expects {d}",
                prompts.ncols()
            )));
        }
        self.check_ids(context)?;
        let n = prompts.nrows() + context.len();
        if n == 0 {
            return Err(Error::Empty("decoder context"));
        }
        let mut c = DVector::zeros(d);
        for row in prompts.row_iter() {
            c += row.transpose();
        }
        for &id in context {
            c += self.anchors.row(id).transpose();
        }
        Ok((c / n as f64, n))
    }
}

impl FrozenDecoder for ToyFrozenDecoder {
    fn vocab_size(&self) -> usize {
        self.anchors.nrows()
    }

    fn embed_dim(&self) -> usize {
        self.anchors.ncols()
    }

    fn logits(&self, prompts: &DMatrix<f64>, context: &[usize]) -> Result<DVector<f64>> {
        let (c, _) = self.context_mean(prompts, context)?;
        let h = (&self.mixing * c).map(f64::tanh);
        Ok(&self.anchors * h)
    }

    fn token_nll(&self, prompts: &DMatrix<f64>, context: &[usize], target: usize) -> Result<(f64, DMatrix<f64>)> {
        self.check_ids(&[target])?;
        let (c, n) = self.context_mean(prompts, context)?;
        let h = (&self.mixing * c).map(f64::tanh);
        let logits = &self.anchors * &h;
        let p = softmax(logits.as_slice());
        let nll = -p[target].ln();
        let mut dlogits = DVector::from_vec(p);
        dlogits[target] -= 1.0;
        let dh = self.anchors.tr_mul(&dlogits);
        let dpre = dh.zip_map(&h, |g, hv| g * (1.0 - hv * hv));
        let dc = self.mixing.tr_mul(&dpre) / n as f64;
        let grad = DMatrix::from_fn(prompts.nrows(), prompts.ncols(), |_, j| dc[j]);
        Ok((nll, grad))
    }
}

/// Logits of the next token after `prev_token_ids`, conditioned on soft prompts.
pub fn decoder_logits<D: FrozenDecoder + ?Sized>(
    dec: &D,
    prompt_vectors: &DMatrix<f64>,
    prev_token_ids: &[usize],
) -> Result<DVector<f64>> {
    dec.logits(prompt_vectors, prev_token_ids)
}

/// Appends the argmax token (lowest id on ties) until `max_len` tokens or the
/// end token. The end token is not included in the output.
pub fn greedy_decode<D: FrozenDecoder + ?Sized>(
    dec: &D,
    prompt_vectors: &DMatrix<f64>,
    prefix_ids: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::InvalidValue("max_len must be at least 1".into()));
    }
    let mut context = prefix_ids.to_vec();
    let mut out = Vec::with_capacity(max_len);
    while out.len() < max_len {
        let logits = dec.logits(prompt_vectors, &context)?;
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        if best == EOS_ID {
            break;
        }
        out.push(best);
        context.push(best);
    }
    Ok(out)
}

/// Parameters of a synthetic paired dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub d_v: usize,
    pub d: usize,
    /// Vocabulary size including the four reserved tokens.
    pub k: usize,
    pub n_train: usize,
    pub n_heldout: usize,
    pub concepts_per_item: usize,
    pub patches_per_item: usize,
    pub noise_sigma: f64,
    /// Scale of the visual feature component the planted map ignores.
    pub null_scale: f64,
    /// Norm of an offset shared by every visual patch, lying in the planted
    /// map's null space. Models the common direction pretrained visual
    /// features occupy; the planted map does not see it.
    pub visual_offset: f64,
    /// Zipf exponent of the concept-word frequencies; 0 is uniform.
    pub zipf_s: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            d_v: 24,
            d: 16,
            k: 200,
            n_train: 512,
            n_heldout: 100,
            concepts_per_item: 3,
            patches_per_item: 3,
            noise_sigma: 0.05,
            null_scale: 0.5,
            visual_offset: 3.0,
            zipf_s: 1.0,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_v == 0 || self.patches_per_item == 0 || self.concepts_per_item == 0 {
            return Err(Error::InvalidValue("synthetic dimensions must be at least 1".into()));
        }
        if self.d_v < self.d {
            return Err(Error::InvalidValue(format!("d_v ({}) must be at least d ({})", self.d_v, self.d)));
        }
        if self.k < FIRST_CONCEPT_ID + self.concepts_per_item {
            return Err(Error::InvalidValue(format!(
                "vocabulary of {} cannot hold {} reserved tokens plus {} concepts per item",
                self.k, FIRST_CONCEPT_ID, self.concepts_per_item
            )));
        }
        if self.n_train == 0 {
            return Err(Error::InvalidValue("n_train must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.null_scale >= 0.0 && self.visual_offset >= 0.0 && self.zipf_s >= 0.0) {
            return Err(Error::InvalidValue(
                "noise, null scale, visual offset and zipf exponent must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Holds the planted geometry so more items can be drawn after generation.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    pub spec: SyntheticSpec,
    /// K x d, unit rows.
    pub anchors: DMatrix<f64>,
    /// d x d_v.
    pub planted_map: DMatrix<f64>,
    planted_pinv: DMatrix<f64>,
    null_projector: DMatrix<f64>,
    offset: DVector<f64>,
    /// Sampling weights over concept ids `FIRST_CONCEPT_ID..k`.
    concept_weights: Vec<f64>,
}

pub struct SyntheticData {
    pub space: WordAnchorSpace,
    pub train: Vec<PairedItem>,
    pub heldout: Vec<PairedItem>,
    pub generator: SyntheticGenerator,
}

pub fn synthetic_vocab(k: usize) -> Vec<String> {
    (0..k)
        .map(|i| match i {
            EOS_ID => "<eos>".to_string(),
            1 => "A".to_string(),
            2 => "photo".to_string(),
            3 => "of".to_string(),
            _ => format!("w{i}"),
        })
        .collect()
}

impl SyntheticGenerator {
    pub fn new(spec: SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let (k, d, d_v) = (spec.k, spec.d, spec.d_v);
        let anchors = crate::numeric::unit_rows(&gaussian(k, d, 1.0, rng)).0;
        let planted_map = gaussian(d, d_v, 1.0 / (d_v as f64).sqrt(), rng);
        let planted_pinv = planted_map
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::InvalidValue(format!("planted map is degenerate: {e}")))?;
        let null_projector = DMatrix::identity(d_v, d_v) - &planted_pinv * &planted_map;
        let raw = &null_projector * gaussian(d_v, 1, 1.0, rng).column(0);
        let offset = match raw.norm() {
            n if n > 1e-12 => raw * (spec.visual_offset / n),
            _ => DVector::zeros(d_v),
        };
        let concept_weights = (1..=k - FIRST_CONCEPT_ID).map(|r| (r as f64).powf(-spec.zipf_s)).collect();
        Ok(Self { spec, anchors, planted_map, planted_pinv, null_projector, offset, concept_weights })
    }

    /// Draws `n` distinct concept ids, each step proportional to the Zipf weights.
    pub fn sample_concepts(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut w = self.concept_weights.clone();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let total: f64 = w.iter().sum();
            let mut x = rng.random_range(0.0..total);
            let mut pick = w.len() - 1;
            for (i, wi) in w.iter().enumerate() {
                if x < *wi {
                    pick = i;
                    break;
                }
                x -= wi;
            }
            w[pick] = 0.0;
            out.push(pick + FIRST_CONCEPT_ID);
        }
        out
    }

    /// Builds one paired item showing `concepts`.
    ///
    /// Text features are the concept anchor rows plus noise. Visual patches
    /// are arranged so that the planted map sends their mean to the concept
    /// mean plus noise, and each patch carries a shared offset and a random
    /// component, both in the planted map's null space.
    pub fn make_item(&self, concepts: &[usize], rng: &mut ChaCha8Rng) -> PairedItem {
        let spec = &self.spec;
        let (d, d_v, n_c) = (spec.d, spec.d_v, concepts.len());
        let text = DMatrix::from_fn(n_c, d, |t, j| {
            self.anchors[(concepts[t], j)] + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
        });
        let concept_mean =
            DVector::from_fn(d, |j, _| concepts.iter().map(|&c| self.anchors[(c, j)]).sum::<f64>() / n_c as f64);
        let target = &concept_mean + gaussian(d, 1, spec.noise_sigma, rng).column(0);
        let n_p = spec.patches_per_item;
        let cycled: Vec<usize> = (0..n_p).map(|i| concepts[i % n_c]).collect();
        let cycled_mean =
            DVector::from_fn(d, |j, _| cycled.iter().map(|&c| self.anchors[(c, j)]).sum::<f64>() / n_p as f64);
        let mut visual = DMatrix::zeros(n_p, d_v);
        for (i, &c) in cycled.iter().enumerate() {
            let in_range = self.anchors.row(c).transpose() - &cycled_mean + &target;
            let null = &self.null_projector * gaussian(d_v, 1, spec.null_scale, rng).column(0);
            let patch = &self.planted_pinv * in_range + null + &self.offset;
            visual.set_row(i, &patch.transpose());
        }
        PairedItem { visual, text, caption: concepts.to_vec() }
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Generates anchors, a word marginal estimated from the training captions,
/// training and held-out pairs, and the planted map.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let generator = SyntheticGenerator::new(spec.clone(), &mut rng)?;
    let draw = |rng: &mut ChaCha8Rng| {
        let concepts = generator.sample_concepts(spec.concepts_per_item, rng);
        generator.make_item(&concepts, rng)
    };
    let train: Vec<PairedItem> = (0..spec.n_train).map(|_| draw(&mut rng)).collect();
    let heldout: Vec<PairedItem> = (0..spec.n_heldout).map(|_| draw(&mut rng)).collect();

    let vocab = synthetic_vocab(spec.k);
    let mut counts = TokenCounts::new();
    for item in &train {
        for &id in &item.caption {
            counts.add(vocab[id].clone(), 1);
        }
    }
    let space = WordAnchorSpace::from_token_counts(generator.anchors.clone(), vocab, &counts, true)?;
    Ok(SyntheticData { space, train, heldout, generator })
}
