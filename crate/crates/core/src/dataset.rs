//! Directory layout for paired datasets.
//!
//! ```text
//! anchors.bin  vocab.txt  counts.txt      anchor space
//! train.visual.bin  train.text.bin  train.captions.txt
//! heldout.visual.bin  heldout.text.bin  heldout.captions.txt
//! planted_map.bin                         optional
//! dataset.txt                             key = value metadata
//! ```
//!
//! Visual patches are stacked `patches_per_item` rows per item. Text rows
//! are stacked too, one row per caption token, so caption lengths recover
//! the item boundaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::anchors::{load_anchor_space, write_anchor_space, WordAnchorSpace};
use crate::bridge::PairedItem;
use crate::config::parse_pairs;
use crate::error::{dim_mismatch, Error, Result};
use crate::io;
use crate::toy::SyntheticData;

#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub space: WordAnchorSpace,
    pub train: Vec<PairedItem>,
    pub heldout: Vec<PairedItem>,
    pub patches_per_item: usize,
    /// Seed of the toy decoder paired with this anchor space.
    pub decoder_seed: u64,
    pub planted_map: Option<DMatrix<f64>>,
    /// Extra metadata written verbatim to `dataset.txt`.
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

impl DatasetDir {
    pub fn from_synthetic(data: &SyntheticData) -> Self {
        let spec = &data.generator.spec;
        let notes = [
            ("k", spec.k.to_string()),
            ("d", spec.d.to_string()),
            ("d_v", spec.d_v.to_string()),
            ("concepts_per_item", spec.concepts_per_item.to_string()),
            ("noise_sigma", format!("{:?}", spec.noise_sigma)),
            ("null_scale", format!("{:?}", spec.null_scale)),
            ("visual_offset", format!("{:?}", spec.visual_offset)),
            ("zipf_s", format!("{:?}", spec.zipf_s)),
            ("seed", spec.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            space: data.space.clone(),
            train: data.train.clone(),
            heldout: data.heldout.clone(),
            patches_per_item: spec.patches_per_item,
            decoder_seed: spec.seed,
            planted_map: Some(data.generator.planted_map.clone()),
            notes,
        }
    }

    pub fn split(&self, split: Split) -> &[PairedItem] {
        match split {
            Split::Train => &self.train,
            Split::Heldout => &self.heldout,
        }
    }
}

fn stack(blocks: impl Iterator<Item = DMatrix<f64>>, cols: usize) -> DMatrix<f64> {
    let blocks: Vec<DMatrix<f64>> = blocks.collect();
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.rows_mut(r, b.nrows()).copy_from(&b);
        r += b.nrows();
    }
    out
}

fn write_split(dir: &Path, name: &str, items: &[PairedItem], d_v: usize, d: usize) -> Result<()> {
    io::write_matrix(&dir.join(format!("{name}.visual.bin")), &stack(items.iter().map(|i| i.visual.clone()), d_v))?;
    io::write_matrix(&dir.join(format!("{name}.text.bin")), &stack(items.iter().map(|i| i.text.clone()), d))?;
    let caps: Vec<Vec<usize>> = items.iter().map(|i| i.caption.clone()).collect();
    io::write_captions(&dir.join(format!("{name}.captions.txt")), &caps)
}

fn read_split(dir: &Path, name: &str, patches_per_item: usize) -> Result<Vec<PairedItem>> {
    let visual_path = dir.join(format!("{name}.visual.bin"));
    let text_path = dir.join(format!("{name}.text.bin"));
    let visual = io::read_matrix(&visual_path)?;
    let text = io::read_matrix(&text_path)?;
    let captions = io::read_captions(&dir.join(format!("{name}.captions.txt")))?;
    if visual.nrows() != captions.len() * patches_per_item {
        return Err(Error::Malformed {
            path: visual_path,
            reason: format!("{} rows for {} items of {patches_per_item} patches", visual.nrows(), captions.len()),
        });
    }
    let text_rows: usize = captions.iter().map(Vec::len).sum();
    if text.nrows() != text_rows {
        return Err(Error::Malformed {
            path: text_path,
            reason: format!("{} rows but captions hold {text_rows} tokens", text.nrows()),
        });
    }
    let mut t = 0;
    Ok(captions
        .into_iter()
        .enumerate()
        .map(|(n, caption)| {
            let item = PairedItem {
                visual: visual.rows(n * patches_per_item, patches_per_item).into_owned(),
                text: text.rows(t, caption.len()).into_owned(),
                caption,
            };
            t += item.caption.len();
            item
        })
        .collect())
}

pub fn write_dataset(dir: &Path, data: &DatasetDir) -> Result<()> {
    fs::create_dir_all(dir)?;
    let d = data.space.dim();
    let d_v = data.train.first().map(|i| i.visual.ncols()).ok_or(Error::Empty("training split"))?;
    for it in data.train.iter().chain(&data.heldout) {
        if it.visual.nrows() != data.patches_per_item || it.visual.ncols() != d_v || it.text.ncols() != d {
            return Err(dim_mismatch("items differ in patch count or feature dimensions"));
        }
        if it.text.nrows() != it.caption.len() {
            return Err(dim_mismatch("text rows must match caption length"));
        }
    }
    write_anchor_space(&data.space, &dir.join("anchors.bin"), &dir.join("vocab.txt"), &dir.join("counts.txt"))?;
    write_split(dir, Split::Train.name(), &data.train, d_v, d)?;
    write_split(dir, Split::Heldout.name(), &data.heldout, d_v, d)?;
    if let Some(a) = &data.planted_map {
        io::write_matrix(&dir.join("planted_map.bin"), a)?;
    }
    let mut meta = format!(
        "patches_per_item = {}\ndecoder_seed = {}\nnormalized = {}\n",
        data.patches_per_item,
        data.decoder_seed,
        data.space.is_normalized()
    );
    for (k, v) in &data.notes {
        meta.push_str(&format!("{k} = {v}\n"));
    }
    io::write_atomic(&dir.join("dataset.txt"), meta.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<DatasetDir> {
    let meta_path = dir.join("dataset.txt");
    let mut meta: BTreeMap<String, String> =
        parse_pairs(&fs::read_to_string(&meta_path)?, &meta_path)?.into_iter().collect();
    let mut take = |k: &str| {
        meta.remove(k).ok_or_else(|| Error::Malformed { path: meta_path.clone(), reason: format!("missing `{k}`") })
    };
    let bad = |k: &str| Error::Malformed { path: dir.join("dataset.txt"), reason: format!("bad value for `{k}`") };
    let patches_per_item: usize = take("patches_per_item")?.parse().map_err(|_| bad("patches_per_item"))?;
    let decoder_seed: u64 = take("decoder_seed")?.parse().map_err(|_| bad("decoder_seed"))?;
    let normalized: bool = take("normalized")?.parse().map_err(|_| bad("normalized"))?;
    if patches_per_item == 0 {
        return Err(bad("patches_per_item"));
    }
    let space =
        load_anchor_space(&dir.join("anchors.bin"), &dir.join("vocab.txt"), &dir.join("counts.txt"), normalized)?;
    let train = read_split(dir, Split::Train.name(), patches_per_item)?;
    let heldout = read_split(dir, Split::Heldout.name(), patches_per_item)?;
    let planted = dir.join("planted_map.bin");
    let planted_map = if planted.exists() { Some(io::read_matrix(&planted)?) } else { None };
    Ok(DatasetDir { space, train, heldout, patches_per_item, decoder_seed, planted_map, notes: meta })
}
