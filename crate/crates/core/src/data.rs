//! Datasets: MNIST IDX ingestion, synthetic corpora, stratified splits,
//! mini-batching, and a raw `f64` dump format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{BidoError, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    MnistIdx,
    SyntheticBlobs,
    SyntheticDigits,
    Raw,
}

/// Inputs in `[0, 1]` with one-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Matrix,
    classes: Vec<usize>,
    class_count: usize,
    pub split: SplitTag,
    pub provenance: Provenance,
}

impl Dataset {
    /// Builds a dataset from inputs and class indices, checking the
    /// `[0, 1]` range.
    pub fn new(inputs: Matrix, classes: Vec<usize>, class_count: usize, provenance: Provenance) -> Result<Self> {
        if inputs.rows() != classes.len() {
            return Err(BidoError::Consistency(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                classes.len()
            )));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= class_count) {
            return Err(BidoError::param(format!("label {c} outside {class_count} classes")));
        }
        if let Some(v) = inputs.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(BidoError::param(format!("input value {v} outside [0, 1]")));
        }
        let labels = Matrix::from_fn(classes.len(), class_count, |r, c| if classes[r] == c { 1.0 } else { 0.0 });
        Ok(Dataset {
            inputs,
            labels,
            classes,
            class_count,
            split: SplitTag::Full,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    /// One-hot rows.
    pub fn labels(&self) -> &Matrix {
        &self.labels
    }

    /// Class index per sample.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &c in &self.classes {
            counts[c] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: self.labels.select_rows(indices),
            classes: indices.iter().map(|&i| self.classes[i]).collect(),
            class_count: self.class_count,
            split: self.split,
            provenance: self.provenance,
        }
    }

    /// Inputs and one-hot labels of the given rows.
    pub fn batch(&self, indices: &[usize]) -> (Matrix, Matrix) {
        (self.inputs.select_rows(indices), self.labels.select_rows(indices))
    }

    /// Rows belonging to `class`.
    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.classes[i] == class).collect()
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Reads a file, transparently inflating gzip (detected by its magic bytes).
fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| BidoError::Format {
                path: path.to_path_buf(),
                message: format!("gzip: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| BidoError::Format {
            path: path.to_path_buf(),
            message: "truncated header".into(),
        })
}

/// Parses an IDX image/label file pair. Pixels are scaled by `1/255` and
/// labels one-hot encoded over 10 classes.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_maybe_gzip(images_path)?;
    let labels = read_maybe_gzip(labels_path)?;
    let fmt = |path: &Path, message: String| BidoError::Format {
        path: path.to_path_buf(),
        message,
    };

    let magic = be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES {
        return Err(fmt(images_path, format!("image magic 0x{magic:08x}, expected 0x{IDX_IMAGES:08x}")));
    }
    let count = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let pixels = &images[16..];
    if pixels.len() != count * rows * cols {
        return Err(fmt(
            images_path,
            format!("header declares {count}×{rows}×{cols} pixels, file holds {}", pixels.len()),
        ));
    }

    let magic = be_u32(&labels, 0, labels_path)?;
    if magic != IDX_LABELS {
        return Err(fmt(labels_path, format!("label magic 0x{magic:08x}, expected 0x{IDX_LABELS:08x}")));
    }
    let label_count = be_u32(&labels, 4, labels_path)? as usize;
    let values = &labels[8..];
    if values.len() != label_count {
        return Err(fmt(
            labels_path,
            format!("header declares {label_count} labels, file holds {}", values.len()),
        ));
    }
    if label_count != count {
        return Err(BidoError::Consistency(format!(
            "{count} images but {label_count} labels"
        )));
    }
    if let Some(&bad) = values.iter().find(|&&v| v > 9) {
        return Err(fmt(labels_path, format!("label value {bad} outside 0..=9")));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = Matrix::from_vec(count, rows * cols, data)?;
    Dataset::new(inputs, values.iter().map(|&v| v as usize).collect(), 10, Provenance::MnistIdx)
}

/// Standard deviation of every blob, in input units.
pub const BLOB_STD: f64 = 0.05;

/// Gaussian clusters around seeded centers whose pairwise distance is at
/// least `separation · BLOB_STD`; samples are clipped to `[0, 1]^d`.
pub fn synthetic_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class < 2 || dim == 0 {
        return Err(BidoError::param(format!(
            "blobs need k ≥ 2, n ≥ 2 and d ≥ 1 (got {classes}, {per_class}, {dim})"
        )));
    }
    if !(separation >= 0.0) {
        return Err(BidoError::param(format!("separation {separation} must be nonnegative")));
    }
    let min_dist = separation * BLOB_STD;
    let (lo, hi) = (2.0 * BLOB_STD, 1.0 - 2.0 * BLOB_STD);
    if classes > 1 && min_dist > (hi - lo) * (dim as f64).sqrt() {
        return Err(BidoError::Generation(format!(
            "separation {separation}σ exceeds the diameter of the center region in {dim} dimensions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0usize;
    while centers.len() < classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(BidoError::Generation(format!(
                "could not place {classes} centers {min_dist:.3} apart in [0,1]^{dim}"
            )));
        }
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(lo..=hi)).collect();
        if centers
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_dist)
        {
            centers.push(c);
        }
    }
    let noise = Normal::new(0.0, BLOB_STD).expect("valid std");
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(c.iter().map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(k);
        }
    }
    Dataset::new(
        Matrix::from_vec(classes * per_class, dim, data)?,
        labels,
        classes,
        Provenance::SyntheticBlobs,
    )
}

/// Seven-segment layout: which of the seven strokes each digit lights.
const SEGMENTS: [&str; 10] = [
    "abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg",
];

fn segment_endpoints(s: char) -> ((f64, f64), (f64, f64)) {
    match s {
        'a' => ((0.0, 0.0), (1.0, 0.0)),
        'g' => ((0.0, 1.0), (1.0, 1.0)),
        'd' => ((0.0, 2.0), (1.0, 2.0)),
        'f' => ((0.0, 0.0), (0.0, 1.0)),
        'b' => ((1.0, 0.0), (1.0, 1.0)),
        'e' => ((0.0, 1.0), (0.0, 2.0)),
        'c' => ((1.0, 1.0), (1.0, 2.0)),
        _ => unreachable!("segment names are a..g"),
    }
}

/// Ten-class toy digits: seven-segment glyphs drawn as soft strokes on a
/// `side × side` canvas under a random affine map (rotation, scale,
/// shear, translation), with per-endpoint jitter, random stroke width and
/// intensity, and additive Gaussian pixel noise clipped to `[0, 1]`.
pub fn synthetic_digits(per_class: usize, side: usize, seed: u64) -> Result<Dataset> {
    if per_class == 0 || side < 4 {
        return Err(BidoError::param(format!(
            "digits need at least one sample per class and a side of 4 or more (got {per_class}, {side})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let n = side as f64;
    let coord = |i: usize| (i as f64 + 0.5) / n;
    let mut data = Vec::with_capacity(10 * per_class * side * side);
    let mut labels = Vec::with_capacity(10 * per_class);
    for (digit, segs) in SEGMENTS.iter().enumerate() {
        for _ in 0..per_class {
            let theta: f64 = rng.random_range(-0.25..0.25);
            let scale: f64 = rng.random_range(0.8..1.1);
            let shear: f64 = rng.random_range(-0.25..0.25);
            let a = [
                [scale * theta.cos(), scale * (-theta.sin() + shear)],
                [scale * theta.sin(), scale * theta.cos()],
            ];
            let t = [0.5 + rng.random_range(-0.08..0.08), 0.5 + rng.random_range(-0.08..0.08)];
            let width: f64 = rng.random_range(0.035..0.07);
            let mut img = vec![0.0f64; side * side];
            for s in segs.chars() {
                let (p0, p1) = segment_endpoints(s);
                let mut place = |p: (f64, f64)| {
                    let x = (p.0 - 0.5) * 0.45 + rng.random_range(-0.04..0.04);
                    let y = (p.1 - 1.0) * 0.3 + rng.random_range(-0.04..0.04);
                    [a[0][0] * x + a[0][1] * y + t[0], a[1][0] * x + a[1][1] * y + t[1]]
                };
                let q0 = place(p0);
                let q1 = place(p1);
                let d = [q1[0] - q0[0], q1[1] - q0[1]];
                let len2 = d[0] * d[0] + d[1] * d[1];
                for row in 0..side {
                    let yy = coord(row);
                    for col in 0..side {
                        let xx = coord(col);
                        let u = (((xx - q0[0]) * d[0] + (yy - q0[1]) * d[1]) / len2).clamp(0.0, 1.0);
                        let dx = xx - q0[0] - u * d[0];
                        let dy = yy - q0[1] - u * d[1];
                        let v = (-(dx * dx + dy * dy) / (2.0 * width * width)).exp();
                        let px = &mut img[row * side + col];
                        *px = px.max(v);
                    }
                }
            }
            let intensity: f64 = rng.random_range(0.7..1.0);
            data.extend(
                img.iter()
                    .map(|v| (v * intensity + noise.sample(&mut rng)).clamp(0.0, 1.0)),
            );
            labels.push(digit);
        }
    }
    Dataset::new(
        Matrix::from_vec(10 * per_class, side * side, data)?,
        labels,
        10,
        Provenance::SyntheticDigits,
    )
}

/// Stratified, seeded train/val/test split.
///
/// Each class is shuffled and cut by largest-remainder rounding of
/// `fractions`, so per-class part sizes are within one sample of the exact
/// proportion; each part is then shuffled.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(BidoError::param(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let parts_used = fractions.iter().filter(|f| **f > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..dataset.class_count() {
        let mut members = dataset.indices_of_class(class);
        if members.is_empty() {
            continue;
        }
        if members.len() < parts_used {
            return Err(BidoError::param(format!(
                "class {class} has {} samples, fewer than the {parts_used} split parts",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut left = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).filter(|&i| fractions[i] > 0.0).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        let mut start = 0;
        for (part, &c) in parts.iter_mut().zip(&counts) {
            part.extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }
    let tags = [SplitTag::Train, SplitTag::Val, SplitTag::Test];
    let mut out = Vec::with_capacity(3);
    for (part, tag) in parts.iter_mut().zip(tags) {
        part.shuffle(&mut rng);
        let mut d = dataset.subset(part);
        d.split = tag;
        out.push(d);
    }
    let test = out.pop().expect("three parts");
    let val = out.pop().expect("three parts");
    let train = out.pop().expect("three parts");
    Ok((train, val, test))
}

/// One epoch of shuffled mini-batch indices.
///
/// The permutation depends only on `(seed, epoch)`. With `drop_small` set,
/// a trailing batch with fewer than two samples is skipped.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    drop_small: bool,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, seed: u64, epoch: u64, drop_small: bool) -> Result<Self> {
        if batch_size == 0 || (drop_small && batch_size < 2) {
            return Err(BidoError::param(format!("batch size {batch_size} is too small")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(BatchIterator {
            order,
            cursor: 0,
            batch_size,
            drop_small,
        })
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        if self.drop_small && batch.len() < 2 {
            return None;
        }
        Some(batch)
    }
}

const RAW_MAGIC: &[u8; 8] = b"BIDORAW1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDatasetHeader {
    rows: usize,
    cols: usize,
    class_count: usize,
    labels: Vec<usize>,
    split: SplitTag,
    provenance: Provenance,
}

/// `magic | u64 LE header length | JSON header | rows·cols f64 LE`.
pub fn write_raw_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&RawDatasetHeader {
        rows: dataset.len(),
        cols: dataset.input_dim(),
        class_count: dataset.class_count,
        labels: dataset.classes.clone(),
        split: dataset.split,
        provenance: dataset.provenance,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * dataset.inputs.as_slice().len());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in dataset.inputs.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_raw_dataset(path: &Path) -> Result<Dataset> {
    let fmt = |message: String| BidoError::Format {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
        return Err(fmt("not a raw dataset dump (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| fmt("truncated header".into()))?;
    let header: RawDatasetHeader = serde_json::from_slice(body).map_err(|e| fmt(format!("header: {e}")))?;
    let payload = &bytes[16 + hlen..];
    if payload.len() != 8 * header.rows * header.cols {
        return Err(fmt(format!(
            "expected {} data bytes, found {}",
            8 * header.rows * header.cols,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut d = Dataset::new(
        Matrix::from_vec(header.rows, header.cols, data)?,
        header.labels,
        header.class_count,
        header.provenance,
    )?;
    d.split = header.split;
    Ok(d)
}

/// Writes `values` as contiguous little-endian `f64` with a JSON sidecar
/// at `path` + `.json`.
pub fn write_raw_array(path: &Path, values: &[f64], sidecar: &serde_json::Value) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * values.len());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    fs::write(side, serde_json::to_vec_pretty(sidecar)?)?;
    Ok(())
}

pub fn read_raw_array(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(BidoError::Format {
            path: path.to_path_buf(),
            message: format!("{} bytes is not a whole number of f64 values", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use std::collections::HashSet;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    fn write_pair(dir: &Path, img_magic: u32, lbl_magic: u32, n_labels: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let pixels: Vec<u8> = (0..2 * 28 * 28).map(|i| if i == 0 { 255 } else { 0 }).collect();
        let img = dir.join("img.idx");
        let lbl = dir.join("lbl.idx");
        fs::write(&img, idx_bytes(img_magic, &[2, 28, 28], &pixels)).unwrap();
        let labels: Vec<u8> = (0..n_labels as u8).map(|i| i % 10).collect();
        fs::write(&lbl, idx_bytes(lbl_magic, &[n_labels], &labels)).unwrap();
        (img, lbl)
    }

    #[test]
    fn idx_parses_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_pair(dir.path(), 0x803, 0x801, 2);
        let d = load_mnist_idx(&img, &lbl).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.input_dim(), 784);
        assert_eq!(d.inputs()[(0, 0)], 1.0);
        assert_eq!(d.inputs()[(0, 1)], 0.0);
        assert_eq!(d.classes(), &[0, 1]);
        assert_eq!(d.labels().row(1)[1], 1.0);
    }

    #[test]
    fn idx_rejects_wrong_magic_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_pair(dir.path(), 0x803, 0x803, 2);
        match load_mnist_idx(&img, &lbl) {
            Err(BidoError::Format { message, .. }) => assert!(message.contains("0x00000803"), "{message}"),
            other => panic!("{other:?}"),
        }
        let (img, lbl) = write_pair(dir.path(), 0x801, 0x801, 2);
        assert!(matches!(load_mnist_idx(&img, &lbl), Err(BidoError::Format { .. })));
        let (img, lbl) = write_pair(dir.path(), 0x803, 0x801, 3);
        assert!(matches!(load_mnist_idx(&img, &lbl), Err(BidoError::Consistency(_))));
    }

    #[test]
    fn idx_reads_gzip() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_pair(dir.path(), 0x803, 0x801, 2);
        let gz = dir.path().join("img.idx.gz");
        let mut enc = GzEncoder::new(fs::File::create(&gz).unwrap(), flate2::Compression::default());
        enc.write_all(&fs::read(&img).unwrap()).unwrap();
        enc.finish().unwrap();
        assert_eq!(load_mnist_idx(&gz, &lbl).unwrap(), load_mnist_idx(&img, &lbl).unwrap());
    }

    #[test]
    fn blobs_are_deterministic_and_bounded() {
        let a = synthetic_blobs(3, 20, 4, 8.0, 5).unwrap();
        let b = synthetic_blobs(3, 20, 4, 8.0, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.inputs().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.class_counts(), vec![20, 20, 20]);
        assert!(matches!(synthetic_blobs(3, 5, 1, 100.0, 0), Err(BidoError::Generation(_))));
        assert!(synthetic_blobs(1, 5, 1, 1.0, 0).is_err());
    }

    #[test]
    fn digits_are_deterministic_and_bounded() {
        let a = synthetic_digits(3, 16, 1).unwrap();
        assert_eq!(a, synthetic_digits(3, 16, 1).unwrap());
        assert_ne!(a, synthetic_digits(3, 16, 2).unwrap());
        assert_eq!(a.len(), 30);
        assert_eq!(a.input_dim(), 256);
        assert!(a.inputs().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        // Strokes are visible: every image has bright pixels.
        for row in a.inputs().row_iter() {
            assert!(row.iter().cloned().fold(0.0, f64::max) > 0.5);
        }
    }

    #[test]
    fn split_examples() {
        let d = synthetic_blobs(2, 50, 2, 4.0, 0).unwrap();
        let (tr, va, te) = split(&d, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        assert_eq!(tr.class_counts(), vec![40, 40]);
        assert_eq!(va.class_counts(), vec![5, 5]);
        assert_eq!(te.class_counts(), vec![5, 5]);
        assert_eq!(tr.split, SplitTag::Train);
        let (tr2, _, _) = split(&d, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(tr, tr2);
        let (all, v0, t0) = split(&d, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!((all.len(), v0.len(), t0.len()), (100, 0, 0));
        let tiny = synthetic_blobs(2, 2, 2, 1.0, 0).unwrap();
        assert!(split(&tiny, [0.4, 0.3, 0.3], 0).is_err());
        assert!(split(&d, [0.5, 0.5, 0.5], 0).is_err());
    }

    #[test]
    fn batches_drop_single_tail() {
        let batches: Vec<_> = BatchIterator::new(9, 4, 0, 0, true).unwrap().collect();
        assert_eq!(batches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4]);
        let batches: Vec<_> = BatchIterator::new(10, 4, 0, 0, true).unwrap().collect();
        assert_eq!(batches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let keep: Vec<_> = BatchIterator::new(9, 4, 0, 0, false).unwrap().collect();
        assert_eq!(keep.len(), 3);
    }

    #[test]
    fn raw_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.raw");
        let d = synthetic_digits(2, 8, 4).unwrap();
        write_raw_dataset(&d, &p).unwrap();
        let back = read_raw_dataset(&p).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.inputs()), bits(d.inputs()));
        assert_eq!(back, d);
        let arr = dir.path().join("a.f64");
        write_raw_array(&arr, &[1.5, -0.0], &serde_json::json!({"shape": [2]})).unwrap();
        assert_eq!(read_raw_array(&arr).unwrap(), vec![1.5, -0.0]);
        assert!(dir.path().join("a.f64.json").exists());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn split_is_disjoint_exhaustive_stratified(
            seed in any::<u64>(),
            per_class in 3usize..40,
            a in 0.1f64..0.8,
        ) {
            let d = synthetic_blobs(3, per_class, 2, 2.0, seed).unwrap();
            let b = (1.0 - a) / 2.0;
            let fr = [a, b, 1.0 - a - b];
            let (tr, va, te) = split(&d, fr, seed).unwrap();
            prop_assert_eq!(tr.len() + va.len() + te.len(), d.len());
            // Identify rows by their bit patterns (continuous draws are distinct).
            let key = |ds: &Dataset| ds.inputs().row_iter().map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
            let mut seen = HashSet::new();
            for part in [&tr, &va, &te] {
                for k in key(part) {
                    prop_assert!(seen.insert(k));
                }
            }
            for (part, f) in [&tr, &va, &te].iter().zip(fr) {
                for c in part.class_counts() {
                    prop_assert!((c as f64 - f * per_class as f64).abs() <= 1.0);
                }
            }
        }

        #[test]
        fn batches_cover_each_index_once(len in 0usize..200, m in 2usize..40, seed in any::<u64>(), epoch in 0u64..5) {
            let mut seen = vec![0u32; len];
            let mut sizes = Vec::new();
            for b in BatchIterator::new(len, m, seed, epoch, true).unwrap() {
                sizes.push(b.len());
                for i in b {
                    seen[i] += 1;
                }
            }
            prop_assert!(sizes.iter().all(|&s| s >= 2));
            let dropped = if len % m == 1 { 1 } else { 0 };
            prop_assert_eq!(seen.iter().filter(|&&c| c == 1).count(), len - dropped);
            prop_assert!(seen.iter().all(|&c| c <= 1));
        }
    }
}
