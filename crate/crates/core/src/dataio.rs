//! Dataset synthesis and ingestion.
//!
//! Two deterministic synthetic generators (Gaussian blobs for linearly easy
//! tasks, interleaved spirals for tasks where operation choice matters) plus
//! loaders for two simple external formats: IDX image/label pairs and CSV
//! with a header row. Every generator is a pure function of its arguments,
//! seed included.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Feature dimension spirals are lifted to.
pub const SPIRAL_DIM: usize = 8;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// In-memory classification dataset with named index splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N rows of d_in features each.
    pub features: Vec<Vec<f64>>,
    /// N class ids in `[0, class_count)`.
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Indices into `features`/`labels`; disjoint from `test`.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Check structural invariants: label range, finite features, equal row
    /// widths, in-range disjoint splits.
    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.labels.len() {
            return Err(Error::LengthMismatch {
                left: self.features.len(),
                right: self.labels.len(),
            });
        }
        let d = self.d_in();
        for (i, row) in self.features.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "feature row {i} has width {}, expected {d}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("feature row {i}")));
            }
        }
        for (i, &y) in self.labels.iter().enumerate() {
            if y >= self.class_count {
                return Err(Error::DimensionMismatch(format!(
                    "label {y} at sample {i} out of range for {} classes",
                    self.class_count
                )));
            }
        }
        let mut seen = vec![false; self.len()];
        for &i in self.train.iter().chain(&self.test) {
            if i >= self.len() {
                return Err(Error::DimensionMismatch(format!("split index {i} out of range")));
            }
            if seen[i] {
                return Err(Error::DimensionMismatch(format!("split index {i} appears twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Stratified 80/20 split in sample order: per class, the first
/// `max(1, 4n/5)` occurrences go to train, the rest to test.
fn stratified_split(labels: &[usize], class_count: usize) -> (Vec<usize>, Vec<usize>) {
    let mut per_class = vec![0usize; class_count];
    for &y in labels {
        per_class[y] += 1;
    }
    let quota: Vec<usize> = per_class.iter().map(|&n| (4 * n / 5).max(1).min(n)).collect();
    // Spread each class's held-out samples evenly across its generation
    // order. A contiguous tail would hold out an unrepresentative slice of
    // generators that sweep a parameter (the spiral's outer end, say), and
    // test accuracy would measure extrapolation instead of fit.
    let mut seen = vec![0usize; class_count];
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        let n = per_class[y];
        let m = n - quota[y];
        let j = seen[y];
        if (j + 1) * m / n > j * m / n {
            test.push(i);
        } else {
            train.push(i);
        }
        seen[y] += 1;
    }
    (train, test)
}

/// Gaussian clusters with unit-separated means: class k is centred on the
/// basis vector `k mod d_in` scaled by `1 + k / d_in`, with per-coordinate
/// standard deviation `spread`. 80/20 stratified split.
pub fn gen_blobs(classes: usize, per_class: usize, d_in: usize, spread: f64, seed: u64) -> Dataset {
    assert!(classes >= 2, "need at least two classes");
    assert!(per_class >= 4, "need at least four samples per class");
    assert!(d_in >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut features = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let mut mean = vec![0.0; d_in];
        mean[k % d_in] = 1.0 + (k / d_in) as f64;
        for _ in 0..per_class {
            features.push(mean.iter().map(|&mu| mu + spread * normal.sample(&mut rng)).collect());
            labels.push(k);
        }
    }
    let (train, test) = stratified_split(&labels, classes);
    Dataset { features, labels, class_count: classes, train, test }
}

/// Interleaved Archimedean spirals in the plane, lifted to [`SPIRAL_DIM`]
/// dimensions by a fixed random projection (independent of `seed`, so the
/// embedding is a property of the generator, not of the draw). Class arms
/// are offset by equal angles; `noise` is the per-coordinate planar
/// standard deviation. 80/20 stratified split.
pub fn gen_spirals(classes: usize, per_class: usize, noise: f64, seed: u64) -> Dataset {
    assert!(classes == 2 || classes == 3, "spirals support 2 or 3 classes");
    assert!(per_class >= 8, "need at least eight samples per class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();

    // fixed 2 -> SPIRAL_DIM lift
    let mut lift_rng = ChaCha8Rng::seed_from_u64(0x4C49_4654);
    let lift: Vec<[f64; 2]> = (0..SPIRAL_DIM)
        .map(|_| {
            [
                normal.sample(&mut lift_rng) / (2.0f64).sqrt(),
                normal.sample(&mut lift_rng) / (2.0f64).sqrt(),
            ]
        })
        .collect();

    // Radii of order one keep post-lift activations in the regime where the
    // nonlinear candidate ops actually bend, which is what makes this task
    // distinguish them.
    let turns = 0.625;
    let mut features = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let phase = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
        for i in 0..per_class {
            let t = i as f64 / per_class as f64;
            let rho = 0.75 + 2.25 * t;
            let theta = 2.0 * std::f64::consts::PI * turns * t + phase;
            let px = rho * theta.cos() + noise * normal.sample(&mut rng);
            let py = rho * theta.sin() + noise * normal.sample(&mut rng);
            features.push(lift.iter().map(|row| row[0] * px + row[1] * py).collect());
            labels.push(k);
        }
    }
    let (train, test) = stratified_split(&labels, classes);
    Dataset { features, labels, class_count: classes, train, test }
}

fn read_be_u32(buf: &[u8], at: usize, path: &str, header: usize) -> Result<u32> {
    if buf.len() < at + 4 {
        return Err(Error::IdxTruncated {
            path: path.to_string(),
            expected: header,
            got: buf.len(),
        });
    }
    Ok(u32::from_be_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]]))
}

/// Load an IDX image/label file pair. Pixels are flattened row-major and
/// scaled to `[0, 1]` by 1/255; the split is the stratified 80/20 rule in
/// file order.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_name = images_path.display().to_string();
    let lbl_name = labels_path.display().to_string();
    let img = std::fs::read(images_path)?;
    let lbl = std::fs::read(labels_path)?;

    let magic = read_be_u32(&img, 0, &img_name, 16)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxBadMagic { path: img_name, got: magic, expected: IDX_IMAGES_MAGIC });
    }
    let count = read_be_u32(&img, 4, &img_name, 16)? as usize;
    let rows = read_be_u32(&img, 8, &img_name, 16)? as usize;
    let cols = read_be_u32(&img, 12, &img_name, 16)? as usize;
    let expected = 16 + count * rows * cols;
    if img.len() < expected {
        return Err(Error::IdxTruncated { path: img_name, expected, got: img.len() });
    }

    let magic = read_be_u32(&lbl, 0, &lbl_name, 8)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxBadMagic { path: lbl_name, got: magic, expected: IDX_LABELS_MAGIC });
    }
    let lbl_count = read_be_u32(&lbl, 4, &lbl_name, 8)? as usize;
    let lbl_expected = 8 + lbl_count;
    if lbl.len() < lbl_expected {
        return Err(Error::IdxTruncated { path: lbl_name, expected: lbl_expected, got: lbl.len() });
    }
    if count != lbl_count {
        return Err(Error::IdxCountMismatch { images: count, labels: lbl_count });
    }
    if count == 0 {
        return Err(Error::EmptyDataset(img_name));
    }

    let d = rows * cols;
    let features: Vec<Vec<f64>> = (0..count)
        .map(|i| img[16 + i * d..16 + (i + 1) * d].iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    let labels: Vec<usize> = lbl[8..8 + count].iter().map(|&y| y as usize).collect();
    let class_count = labels.iter().copied().max().unwrap() + 1;
    let (train, test) = stratified_split(&labels, class_count);
    let ds = Dataset { features, labels, class_count, train, test };
    ds.validate()?;
    Ok(ds)
}

/// Write a dataset as an IDX pair (images as `count x 1 x d_in`, features
/// scaled by 255 and rounded to bytes). `load_idx` of the result reproduces
/// the dataset bit-exactly when every feature is an integer multiple of
/// 1/255.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    assert!(ds.class_count <= 256, "IDX labels are single bytes");
    let d = ds.d_in();
    let mut img = Vec::with_capacity(16 + ds.len() * d);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&1u32.to_be_bytes());
    img.extend_from_slice(&(d as u32).to_be_bytes());
    for row in &ds.features {
        img.extend(row.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lbl.extend(ds.labels.iter().map(|&y| y as u8));
    std::fs::write(images_path, img)?;
    std::fs::write(labels_path, lbl)?;
    Ok(())
}

/// Load a CSV with a header row. `label_column` names the integer class
/// column; every other column is a numeric feature, kept in header order.
/// Rows keep file order; row/column numbers in errors are 1-indexed with the
/// header as row 1.
fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::CsvSchema(format!("{other:?}")),
    }
}

pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader =
        csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(|e| Error::CsvSchema(e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::CsvSchema(format!("missing label column {label_column:?}")))?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (rec_no, record) in reader.records().enumerate() {
        let row = rec_no + 2; // header is row 1
        let record = record.map_err(|e| Error::CsvSchema(e.to_string()))?;
        if record.len() != headers.len() {
            return Err(Error::CsvSchema(format!(
                "row {row} has {} fields, expected {}",
                record.len(),
                headers.len()
            )));
        }
        let mut x = Vec::with_capacity(headers.len() - 1);
        for (c, cell) in record.iter().enumerate() {
            if c == label_idx {
                let y: i64 = cell.trim().parse().map_err(|e: std::num::ParseIntError| {
                    Error::CsvParse { row, col: c + 1, msg: e.to_string() }
                })?;
                if y < 0 {
                    return Err(Error::CsvParse {
                        row,
                        col: c + 1,
                        msg: format!("negative class id {y}"),
                    });
                }
                labels.push(y as usize);
            } else {
                let v: f64 = cell.trim().parse().map_err(|e: std::num::ParseFloatError| {
                    Error::CsvParse { row, col: c + 1, msg: e.to_string() }
                })?;
                x.push(v);
            }
        }
        features.push(x);
    }
    if features.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    let class_count = labels.iter().copied().max().unwrap() + 1;
    let (train, test) = stratified_split(&labels, class_count);
    let ds = Dataset { features, labels, class_count, train, test };
    ds.validate()?;
    Ok(ds)
}
