//! Embedding matrices: binary I/O, normalization and a seeded synthetic
//! generator with known class structure.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! "SECATEMB" | version u8 = 1 | n_rows u32 | dim u32 | n_rows*dim f32
//! [ label flag u8 | n_rows u32 labels ]
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::BASE_NAMES;

pub const EMB_MAGIC: &[u8; 8] = b"SECATEMB";
pub const EMB_VERSION: u8 = 1;

/// Row-major `n_rows x dim` matrix of 32-bit embeddings.
///
/// Row identifiers are the row positions `0..n_rows`; they are stable for the
/// lifetime of the matrix and survive a file roundtrip.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n_rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(n_rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if n_rows < 1 {
            return Err(Error::validation("embedding matrix needs at least one row"));
        }
        if dim < 2 {
            return Err(Error::validation(format!("embedding dim must be >= 2, got {dim}")));
        }
        if data.len() != n_rows * dim {
            return Err(Error::Length(format!(
                "expected {} values for {n_rows}x{dim}, got {}",
                n_rows * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite value in row {} column {}",
                i / dim,
                i % dim
            )));
        }
        Ok(Self { n_rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::validation("ragged rows"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_ids(&self) -> impl Iterator<Item = u32> + '_ {
        0..self.n_rows as u32
    }

    /// New matrix made of the given rows, renumbered from zero.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            if r >= self.n_rows {
                return Err(Error::Data(format!("row {r} out of range {}", self.n_rows)));
            }
            data.extend_from_slice(self.row(r));
        }
        Self::new(rows.len(), self.dim, data)
    }

    pub fn to_bytes(&self, labels: Option<&[u32]>) -> Result<Vec<u8>> {
        if let Some(l) = labels {
            if l.len() != self.n_rows {
                return Err(Error::Length(format!("{} labels for {} rows", l.len(), self.n_rows)));
            }
        }
        let mut out = Vec::with_capacity(18 + 4 * self.data.len() + 1 + 4 * self.n_rows);
        out.extend_from_slice(EMB_MAGIC);
        out.push(EMB_VERSION);
        out.extend_from_slice(&(self.n_rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        encode_label_block(&mut out, labels);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<Vec<u32>>)> {
        let fmt = |detail: String| Error::Format {
            what: "embedding file",
            detail,
        };
        if bytes.len() < 9 {
            return Err(Error::Length("embedding file shorter than header".into()));
        }
        if &bytes[..8] != EMB_MAGIC {
            return Err(fmt(format!("bad magic {:?}", &bytes[..8])));
        }
        if bytes[8] != EMB_VERSION {
            return Err(fmt(format!("unsupported version {}", bytes[8])));
        }
        let mut cur = Cursor::new(&bytes[9..]);
        let n_rows = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let count = n_rows
            .checked_mul(dim)
            .ok_or_else(|| fmt("dimension overflow".into()))?;
        if cur.remaining() < count * 4 {
            return Err(Error::Length(format!(
                "payload holds {} bytes, header needs {}",
                cur.remaining(),
                count * 4
            )));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f32::from_le_bytes(cur.take4()?));
        }
        let labels = decode_label_block(&mut cur, n_rows)?;
        if cur.remaining() != 0 {
            return Err(fmt(format!("{} trailing bytes", cur.remaining())));
        }
        Ok((Self::new(n_rows, dim, data)?, labels))
    }

    pub fn write(&self, path: &Path, labels: Option<&[u32]>) -> Result<()> {
        let bytes = self.to_bytes(labels)?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<(Self, Option<Vec<u32>>)> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn encode_label_block(out: &mut Vec<u8>, labels: Option<&[u32]>) {
    match labels {
        None => out.push(0),
        Some(l) => {
            out.push(1);
            for v in l {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

pub(crate) fn decode_label_block(cur: &mut Cursor<'_>, n_rows: usize) -> Result<Option<Vec<u32>>> {
    if cur.remaining() == 0 {
        return Ok(None);
    }
    match cur.u8()? {
        0 => Ok(None),
        1 => {
            if cur.remaining() < 4 * n_rows {
                return Err(Error::Length(format!(
                    "label block holds {} bytes, needs {}",
                    cur.remaining(),
                    4 * n_rows
                )));
            }
            (0..n_rows).map(|_| cur.u32()).collect::<Result<Vec<_>>>().map(Some)
        }
        f => Err(Error::Format {
            what: "label block",
            detail: format!("bad flag {f}"),
        }),
    }
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Length(format!(
                "wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn take4(&mut self) -> Result<[u8; 4]> {
        Ok(self.take(4)?.try_into().expect("4 bytes"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take4()?))
    }
}

/// Parameters of the Gaussian-mixture generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Minimum centroid spacing in units of the within-class standard deviation.
    pub separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::validation("n_classes must be >= 2"));
        }
        if self.per_class < 2 {
            return Err(Error::validation("per_class must be >= 2"));
        }
        if self.dim < 2 {
            return Err(Error::validation("dim must be >= 2"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::validation("separation must be positive"));
        }
        Ok(())
    }
}

/// Class labels and base-lexicon names for a generated matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub labels: Vec<u32>,
    pub class_names: Vec<String>,
}

impl GroundTruth {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Rows of each class, in row order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.n_classes()];
        for (row, &l) in self.labels.iter().enumerate() {
            m[l as usize].push(row);
        }
        m
    }

    /// Renames classes using base-lexicon entries starting at `offset`.
    pub fn with_name_offset(mut self, offset: usize) -> Result<Self> {
        let n = self.class_names.len();
        if offset + n > BASE_NAMES.len() {
            return Err(Error::validation(format!(
                "base lexicon has {} names, need {}",
                BASE_NAMES.len(),
                offset + n
            )));
        }
        self.class_names = BASE_NAMES[offset..offset + n].iter().map(|s| s.to_string()).collect();
        Ok(self)
    }
}

const MAX_CENTROID_ATTEMPTS: usize = 10_000;

/// Draws `per_class` rows around each of `n_classes` unit-variance isotropic
/// Gaussians. Rows are class-major.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(EmbeddingMatrix, GroundTruth)> {
    spec.validate()?;
    if spec.n_classes > BASE_NAMES.len() {
        return Err(Error::validation(format!(
            "at most {} classes supported by the base lexicon",
            BASE_NAMES.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let radius = spec.separation;
    let min_dist2 = spec.separation * spec.separation;

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    let mut attempts = 0usize;
    while centroids.len() < spec.n_classes {
        attempts += 1;
        if attempts > MAX_CENTROID_ATTEMPTS {
            return Err(Error::validation(format!(
                "could not place {} centroids {} apart in {} dims",
                spec.n_classes, spec.separation, spec.dim
            )));
        }
        let c = sample_on_sphere(&mut rng, spec.dim, radius);
        let ok = centroids
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() >= min_dist2);
        if ok {
            centroids.push(c);
        }
    }

    let n_rows = spec.n_classes * spec.per_class;
    let mut data = Vec::with_capacity(n_rows * spec.dim);
    let mut labels = Vec::with_capacity(n_rows);
    for (class, c) in centroids.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &mu in c {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push((mu + z) as f32);
            }
            labels.push(class as u32);
        }
    }
    let gt = GroundTruth {
        labels,
        class_names: BASE_NAMES[..spec.n_classes].iter().map(|s| s.to_string()).collect(),
    };
    Ok((EmbeddingMatrix::new(n_rows, spec.dim, data)?, gt))
}

fn sample_on_sphere<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x * radius / norm).collect();
        }
    }
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let dim = matrix.dim();
    let mut data = Vec::with_capacity(matrix.data().len());
    for (i, row) in matrix.data().chunks(dim).enumerate() {
        let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroRow { row_id: i as u32 });
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    EmbeddingMatrix::new(matrix.n_rows(), dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_classes,
            per_class,
            dim,
            separation,
            seed,
        }
    }

    #[test]
    fn tiny_spec_has_forced_shape() {
        let (m, gt) = generate_synthetic(&spec(2, 2, 2, 100.0, 0)).unwrap();
        assert_eq!(m.n_rows(), 4);
        assert_eq!(m.dim(), 2);
        assert_eq!(gt.labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(2, 2, 2, 100.0, 0);
        let (a, _) = generate_synthetic(&s).unwrap();
        let (b, _) = generate_synthetic(&s).unwrap();
        let bits = |m: &EmbeddingMatrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn class_means_respect_separation() {
        let s = spec(8, 400, 16, 6.0, 11);
        let (m, gt) = generate_synthetic(&s).unwrap();
        let members = gt.members();
        let means: Vec<Vec<f64>> = members
            .iter()
            .map(|rows| {
                let mut acc = vec![0.0; m.dim()];
                for &r in rows {
                    for (a, &v) in acc.iter_mut().zip(m.row(r)) {
                        *a += f64::from(v);
                    }
                }
                acc.iter().map(|a| a / rows.len() as f64).collect()
            })
            .collect();
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                // sample means wobble by about sqrt(dim / per_class) = 0.2
                assert!(d >= 6.0 - 0.6, "classes {i},{j} at {d}");
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(matches!(
            generate_synthetic(&spec(1, 2, 2, 1.0, 0)),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            generate_synthetic(&spec(2, 1, 2, 1.0, 0)),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            generate_synthetic(&spec(2, 2, 2, 0.0, 0)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn roundtrip_small_matrix() {
        let m = EmbeddingMatrix::from_rows(&[vec![0.5, -1.25]]).unwrap();
        let bytes = m.to_bytes(None).unwrap();
        let (back, labels) = EmbeddingMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(labels.is_none());
    }

    #[test]
    fn roundtrip_with_labels() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let bytes = m.to_bytes(Some(&[7, 9])).unwrap();
        let (back, labels) = EmbeddingMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(labels, Some(vec![7, 9]));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let m = EmbeddingMatrix::from_rows(&[vec![0.5, -1.25]]).unwrap();
        let mut bytes = m.to_bytes(None).unwrap();
        bytes[0] = b'X';
        assert!(matches!(EmbeddingMatrix::from_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_is_length_error() {
        let m = EmbeddingMatrix::from_rows(&[vec![0.5, -1.25], vec![2.0, 3.0]]).unwrap();
        let bytes = m.to_bytes(None).unwrap();
        let cut = &bytes[..bytes.len() - 6];
        assert!(matches!(EmbeddingMatrix::from_bytes(cut), Err(Error::Length(_))));
        let with_labels = m.to_bytes(Some(&[1, 2])).unwrap();
        let cut = &with_labels[..with_labels.len() - 2];
        assert!(matches!(EmbeddingMatrix::from_bytes(cut), Err(Error::Length(_))));
    }

    #[test]
    fn header_layout_is_exact() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = m.to_bytes(Some(&[5])).unwrap();
        assert_eq!(&b[..8], b"SECATEMB");
        assert_eq!(b[8], 1);
        assert_eq!(&b[9..13], &1u32.to_le_bytes());
        assert_eq!(&b[13..17], &2u32.to_le_bytes());
        assert_eq!(&b[17..21], &1.0f32.to_le_bytes());
        assert_eq!(&b[21..25], &0.0f32.to_le_bytes());
        assert_eq!(b[25], 1);
        assert_eq!(&b[26..30], &5u32.to_le_bytes());
        assert_eq!(b.len(), 30);
    }

    #[test]
    fn normalize_examples() {
        let m = EmbeddingMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let n = l2_normalize(&m).unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-7 && (n.row(0)[1] - 0.8).abs() < 1e-7);

        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -2.0]]).unwrap();
        let n = l2_normalize(&m).unwrap();
        assert_eq!(n.data(), &[1.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn zero_row_names_the_row() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        match l2_normalize(&m) {
            Err(Error::ZeroRow { row_id }) => assert_eq!(row_id, 1),
            other => panic!("expected zero-row error, got {other:?}"),
        }
    }
}
