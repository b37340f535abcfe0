//! On-disk formats.
//!
//! Matrices use a small binary container: the magic bytes `OTBEMB1\0`, then
//! little-endian `u32` rows and `u32` cols, then `rows * cols` little-endian
//! `f32` values in row-major order. Everything in memory is `f64`; values are
//! rounded to `f32` on write.
//!
//! Text files are UTF-8: vocabularies hold one token per line, counts files
//! hold `token<TAB>count` lines and caption files hold space-separated token
//! ids, one caption per line.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OTBEMB1\0";

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Malformed { path: path.to_path_buf(), reason: reason.into() }
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(16 + rows * cols * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for r in 0..rows {
        for c in 0..cols {
            out.extend_from_slice(&(m[(r, c)] as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(malformed(path, "missing OTBEMB1 header"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected =
        rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(|| malformed(path, "shape overflows"))?;
    let body = &bytes[16..];
    if body.len() != expected {
        return Err(malformed(
            path,
            format!("expected {expected} payload bytes for {rows}x{cols}, found {}", body.len()),
        ));
    }
    let values: Vec<f64> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_matrix(&bytes, path)
}

pub fn write_vocab(path: &Path, vocab: &[String]) -> Result<()> {
    let mut s = String::new();
    for tok in vocab {
        s.push_str(tok);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let vocab: Vec<String> = text.lines().map(str::to_owned).collect();
    if let Some(i) = vocab.iter().position(|t| t.is_empty() || t.contains(char::is_whitespace)) {
        return Err(malformed(path, format!("line {}: token must be nonempty without whitespace", i + 1)));
    }
    Ok(vocab)
}

/// Writes `token<TAB>count` lines in the given order.
pub fn write_counts(path: &Path, counts: &[(String, u64)]) -> Result<()> {
    let mut s = String::new();
    for (tok, n) in counts {
        s.push_str(&format!("{tok}\t{n}\n"));
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_counts(path: &Path) -> Result<Vec<(String, u64)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (tok, n) = line
            .split_once('\t')
            .ok_or_else(|| malformed(path, format!("line {}: expected token<TAB>count", i + 1)))?;
        let n: u64 = n
            .trim()
            .parse()
            .map_err(|_| malformed(path, format!("line {}: count `{n}` is not a nonnegative integer", i + 1)))?;
        out.push((tok.to_owned(), n));
    }
    Ok(out)
}

pub fn write_captions(path: &Path, captions: &[Vec<usize>]) -> Result<()> {
    let mut s = String::new();
    for cap in captions {
        let line: Vec<String> = cap.iter().map(|id| id.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_captions(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|t| {
                    t.parse::<usize>().map_err(|_| malformed(path, format!("line {}: `{t}` is not a token id", i + 1)))
                })
                .collect()
        })
        .collect()
}
