//! Retrieval, candidate ranking, modality gap, embedding arithmetic and
//! word-assignment inspection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::anchors::WordAnchorSpace;
use crate::bridge::PooledBatch;
use crate::error::{dim_mismatch, Error, Result};
use crate::losses::FrozenDecoder;
use crate::numeric::cosine;
use crate::ot::AssignmentMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub delta: DVector<f64>,
    pub norm: f64,
    pub centroid_v: DVector<f64>,
    pub centroid_t: DVector<f64>,
}

/// Difference between the visual and text centroids.
pub fn modality_gap(pooled_v: &PooledBatch, pooled_t: &PooledBatch) -> Result<GapReport> {
    if pooled_v.len() != pooled_t.len() || pooled_v.dim() != pooled_t.dim() {
        return Err(dim_mismatch(format!(
            "{}x{} visual vs {}x{} text",
            pooled_v.len(),
            pooled_v.dim(),
            pooled_t.len(),
            pooled_t.dim()
        )));
    }
    if pooled_v.is_empty() {
        return Err(Error::Empty("pooled batch"));
    }
    let centroid_v = pooled_v.vectors().row_mean().transpose();
    let centroid_t = pooled_t.vectors().row_mean().transpose();
    let delta = &centroid_v - &centroid_t;
    let norm = delta.norm();
    Ok(GapReport { delta, norm, centroid_v, centroid_t })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Gallery indices per query, best first.
    pub rankings: Vec<Vec<usize>>,
    pub recall_at: BTreeMap<usize, f64>,
}

/// Indices sorted by descending score; equal scores keep index order.
fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Ranks the gallery for every query by cosine similarity. Query `i` is
/// paired with gallery item `i` when computing recall.
pub fn t2i_retrieve(query_pooled: &PooledBatch, gallery_pooled: &PooledBatch, ks: &[usize]) -> Result<RetrievalResult> {
    if gallery_pooled.is_empty() {
        return Err(Error::Empty("gallery"));
    }
    if query_pooled.dim() != gallery_pooled.dim() {
        return Err(dim_mismatch("query and gallery dimensions differ"));
    }
    let gallery: Vec<DVector<f64>> = (0..gallery_pooled.len()).map(|j| gallery_pooled.row(j)).collect();
    let rankings: Vec<Vec<usize>> = (0..query_pooled.len())
        .map(|i| {
            let q = query_pooled.row(i);
            let scores: Vec<f64> = gallery.iter().map(|g| cosine(q.as_slice(), g.as_slice())).collect();
            rank_desc(&scores)
        })
        .collect();
    let n = rankings.len().max(1) as f64;
    let recall_at = ks
        .iter()
        .map(|&k| {
            let hits = rankings.iter().enumerate().filter(|(i, r)| r.iter().take(k).any(|j| j == i)).count();
            (k, hits as f64 / n)
        })
        .collect();
    Ok(RetrievalResult { rankings, recall_at })
}

/// Mean per-token negative log-likelihood of each candidate given the
/// prompts and question; returns the index of the lowest (first on ties).
pub fn it2t_rank<D: FrozenDecoder + ?Sized>(
    decoder: &D,
    prompts: &DMatrix<f64>,
    question_ids: &[usize],
    candidates: &[Vec<usize>],
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let mut losses = Vec::with_capacity(candidates.len());
    for cand in candidates {
        if cand.is_empty() {
            return Err(Error::Empty("candidate"));
        }
        let mut context = question_ids.to_vec();
        let mut total = 0.0;
        for &t in cand {
            total += decoder.token_nll(prompts, &context, t)?.0;
            context.push(t);
        }
        losses.push(total / cand.len() as f64);
    }
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    Ok((best, losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

/// Signed sum of the vectors, optionally scaled to unit length.
pub fn semantic_arithmetic(terms: &[(Sign, DVector<f64>)], normalize: bool) -> Result<DVector<f64>> {
    let d = terms.first().map(|(_, v)| v.len()).ok_or(Error::Empty("arithmetic terms"))?;
    let mut out = DVector::zeros(d);
    for (sign, v) in terms {
        if v.len() != d {
            return Err(dim_mismatch("arithmetic terms differ in dimension"));
        }
        match sign {
            Sign::Plus => out += v,
            Sign::Minus => out -= v,
        }
    }
    if normalize {
        let n = out.norm();
        if n > 0.0 {
            out /= n;
        }
    }
    Ok(out)
}

/// The `k` anchors most cosine-similar to `vector`, best first, ties by index.
pub fn nearest_anchors(vector: &DVector<f64>, space: &WordAnchorSpace, k: usize) -> Result<Vec<(String, f64)>> {
    if k > space.len() {
        return Err(Error::InvalidValue(format!("k = {k} exceeds vocabulary size {}", space.len())));
    }
    if vector.len() != space.dim() {
        return Err(dim_mismatch(format!("vector of length {} for {}-dim anchors", vector.len(), space.dim())));
    }
    let scores: Vec<f64> =
        space.weights().row_iter().map(|r| cosine(vector.as_slice(), r.transpose().as_slice())).collect();
    Ok(rank_desc(&scores).into_iter().take(k).map(|j| (space.vocab()[j].clone(), scores[j])).collect())
}

/// Per item, the `k` words holding the most assignment mass.
pub fn top_words_per_item(q: &AssignmentMatrix, vocab: &[String], k: usize) -> Result<Vec<Vec<(String, f64)>>> {
    if vocab.len() != q.n_anchors() {
        return Err(dim_mismatch(format!("{} words for {} assignment rows", vocab.len(), q.n_anchors())));
    }
    if k > vocab.len() {
        return Err(Error::InvalidValue(format!("k = {k} exceeds vocabulary size {}", vocab.len())));
    }
    Ok((0..q.n_items())
        .map(|n| {
            let col: Vec<f64> = q.q.column(n).iter().copied().collect();
            rank_desc(&col).into_iter().take(k).map(|j| (vocab[j].clone(), col[j])).collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoint {
    pub item_id: usize,
    pub modality: Modality,
    pub x: f64,
    pub y: f64,
}

/// Projects both sets jointly onto their top two principal components.
/// Component signs are fixed so the largest-magnitude loading is positive.
pub fn pca_2d(pooled_v: &PooledBatch, pooled_t: &PooledBatch) -> Result<Vec<ProjectedPoint>> {
    if pooled_v.dim() != pooled_t.dim() {
        return Err(dim_mismatch("visual and text dimensions differ"));
    }
    let n = pooled_v.len() + pooled_t.len();
    if n == 0 {
        return Err(Error::Empty("pooled batch"));
    }
    let d = pooled_v.dim();
    let mut all = DMatrix::zeros(n, d);
    all.rows_mut(0, pooled_v.len()).copy_from(pooled_v.vectors());
    all.rows_mut(pooled_v.len(), pooled_t.len()).copy_from(pooled_t.vectors());
    let mean = all.row_mean();
    for mut r in all.row_iter_mut() {
        r -= &mean;
    }
    let cov = all.transpose() * &all / n as f64;
    let eig = cov.symmetric_eigen();
    let order = rank_desc(eig.eigenvalues.as_slice());
    let mut axes = Vec::with_capacity(2);
    for &j in order.iter().take(2) {
        let mut axis = eig.eigenvectors.column(j).into_owned();
        let lead = axis.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if lead < 0.0 {
            axis.neg_mut();
        }
        axes.push(axis);
    }
    while axes.len() < 2 {
        axes.push(DVector::zeros(d));
    }
    Ok(all
        .row_iter()
        .enumerate()
        .map(|(i, r)| {
            let (item_id, modality) =
                if i < pooled_v.len() { (i, Modality::Visual) } else { (i - pooled_v.len(), Modality::Text) };
            ProjectedPoint { item_id, modality, x: r.dot(&axes[0].transpose()), y: r.dot(&axes[1].transpose()) }
        })
        .collect())
}

pub fn projection_csv(points: &[ProjectedPoint]) -> String {
    let mut out = String::from("item_id,modality,x,y\n");
    for p in points {
        writeln!(out, "{},{},{},{}", p.item_id, p.modality.name(), p.x, p.y).unwrap();
    }
    out
}
