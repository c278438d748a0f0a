//! Data ingestion, contamination protocol and synthetic generators.
//!
//! File formats:
//! - static: CSV with a header row, numeric feature columns, class label last;
//! - sequences: one JSON object per line, `{"id", "label", "steps": [[..], ..]}`;
//! - images: `DSBT`, a version byte, then `count, channels, height, width` as
//!   `u32` LE, then per item a `u32` LE label and `C·H·W` `f64` LE values.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::energy_recurrent::Sequence;
use crate::error::{DsebmError, Result};
use crate::model::{image_shape, Normalizer, Sample};
use crate::numerics::{RngStream, Tensor};

pub const IMAGE_MAGIC: &[u8; 4] = b"DSBT";
pub const IMAGE_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Static,
    Sequence,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Unassigned,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub label: String,
    pub sample: Sample,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub kind: DataKind,
    pub items: Vec<Item>,
    /// Empty until a protocol assigns inlier classes.
    pub inlier_classes: BTreeSet<String>,
    pub rho: Option<f64>,
    /// Per-feature statistics: of every item on load, of the training split
    /// after [`make_contaminated`].
    pub stats: Normalizer,
}

fn kind_of(sample: &Sample) -> DataKind {
    match sample {
        Sample::Vector(_) => DataKind::Static,
        Sample::Sequence(_) => DataKind::Sequence,
        Sample::Image(_) => DataKind::Image,
    }
}

impl LabeledDataset {
    /// Validates that all items share a kind and feature shape.
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| DsebmError::Empty("dataset has no items".into()))?;
        let kind = kind_of(&first.sample);
        let shape = |s: &Sample| match s {
            Sample::Vector(t) | Sample::Image(t) => t.shape().to_vec(),
            Sample::Sequence(q) => vec![q.dim()],
        };
        let expected = shape(&first.sample);
        for (i, item) in items.iter().enumerate() {
            if kind_of(&item.sample) != kind || shape(&item.sample) != expected {
                return Err(DsebmError::Shape(format!(
                    "item {i} ({:?}) has shape {:?}, expected {:?}",
                    item.id,
                    shape(&item.sample),
                    expected
                )));
            }
        }
        let stats = Normalizer::fit(items.iter().map(|i| &i.sample))?;
        Ok(Self {
            kind,
            items,
            inlier_classes: BTreeSet::new(),
            rho: None,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.stats.dim()
    }

    pub fn labels(&self) -> BTreeSet<String> {
        self.items.iter().map(|i| i.label.clone()).collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn samples(&self, split: Split) -> Vec<Sample> {
        self.split(split).map(|i| i.sample.clone()).collect()
    }

    /// Items whose label is in `classes`.
    pub fn filter_labels(&self, classes: &BTreeSet<String>) -> Vec<&Item> {
        self.items.iter().filter(|i| classes.contains(&i.label)).collect()
    }
}

fn parse_err(path: &Path, record: usize, message: impl Into<String>) -> DsebmError {
    DsebmError::Parse {
        path: path.to_path_buf(),
        record,
        message: message.into(),
    }
}

/// Reads a static dataset. Item ids are the zero-based data row indices;
/// diagnostics carry file line numbers.
pub fn load_static(path: &Path) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let width = reader.headers().map_err(|e| csv_err(path, e))?.len();
    if width < 2 {
        return Err(parse_err(path, 1, "need at least one feature column and a label column"));
    }
    let mut items = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(row + 2, |p| p.line() as usize);
        if rec.len() != width {
            return Err(parse_err(path, line, format!("expected {width} fields, found {}", rec.len())));
        }
        let mut values = Vec::with_capacity(width - 1);
        for (col, field) in rec.iter().take(width - 1).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("column {}: not a number: {field:?}", col + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("column {}: non-finite value {field:?}", col + 1)));
            }
            values.push(v);
        }
        items.push(Item {
            id: row.to_string(),
            label: rec[width - 1].trim().to_string(),
            sample: Sample::Vector(Tensor::vector(values)),
            split: Split::Unassigned,
        });
    }
    if items.is_empty() {
        return Err(DsebmError::Empty(format!("{}: no data rows", path.display())));
    }
    LabeledDataset::new(items)
}

fn csv_err(path: &Path, e: csv::Error) -> DsebmError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DsebmError::Io(io),
        other => parse_err(path, line, format!("{other:?}")),
    }
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    id: serde_json::Value,
    label: serde_json::Value,
    steps: Vec<Vec<f64>>,
}

fn json_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Reads a line-delimited sequence file; lengths may differ per record.
pub fn load_sequences(path: &Path) -> Result<LabeledDataset> {
    let file = fs::File::open(path)?;
    let mut items = Vec::new();
    let mut dim = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let record = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(path, record, e.to_string()))?;
        if rec.steps.is_empty() {
            return Err(parse_err(path, record, "sequence has no steps"));
        }
        let d = rec.steps[0].len();
        if d == 0 || *dim.get_or_insert(d) != d || rec.steps.iter().any(|s| s.len() != d) {
            return Err(parse_err(path, record, "inconsistent step dimensionality"));
        }
        if rec.steps.iter().flatten().any(|v| !v.is_finite()) {
            return Err(parse_err(path, record, "non-finite value"));
        }
        let steps = rec.steps.into_iter().map(Tensor::vector).collect();
        items.push(Item {
            id: json_text(&rec.id),
            label: json_text(&rec.label),
            sample: Sample::Sequence(Sequence::new(steps)?),
            split: Split::Unassigned,
        });
    }
    if items.is_empty() {
        return Err(DsebmError::Empty(format!("{}: no records", path.display())));
    }
    LabeledDataset::new(items)
}

/// Reads an image container. Labels are decimal renderings of the stored
/// `u32`; item ids are zero-based indices.
pub fn load_images(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path)?;
    if bytes.len() < 21 || &bytes[..4] != IMAGE_MAGIC {
        return Err(parse_err(path, 0, "missing DSBT header"));
    }
    if bytes[4] != IMAGE_VERSION {
        return Err(parse_err(path, 0, format!("unsupported version {}", bytes[4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (count, c, h, w) = (u32_at(5), u32_at(9), u32_at(13), u32_at(17));
    if c == 0 || h == 0 || w == 0 {
        return Err(parse_err(path, 0, format!("invalid shape {c}x{h}x{w}")));
    }
    if count == 0 {
        return Err(DsebmError::Empty(format!("{}: no images", path.display())));
    }
    let per = c * h * w;
    let stride = 4 + 8 * per;
    let body = &bytes[21..];
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let record = i + 1;
        let start = i * stride;
        if body.len() < start + stride {
            let have = body.len().saturating_sub(start + 4) / 8;
            return Err(parse_err(
                path,
                record,
                format!("truncated: shape {c}x{h}x{w} needs {per} values, found {have}"),
            ));
        }
        let label = u32::from_le_bytes(body[start..start + 4].try_into().unwrap());
        let data: Vec<f64> = body[start + 4..start + stride]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, record, "non-finite value"));
        }
        items.push(Item {
            id: i.to_string(),
            label: label.to_string(),
            sample: Sample::Image(Tensor::new(vec![c, h, w], data)?),
            split: Split::Unassigned,
        });
    }
    if body.len() != count * stride {
        return Err(parse_err(path, count, "trailing bytes after last item"));
    }
    LabeledDataset::new(items)
}

/// Dispatches on `kind`.
pub fn load(path: &Path, kind: DataKind) -> Result<LabeledDataset> {
    match kind {
        DataKind::Static => load_static(path),
        DataKind::Sequence => load_sequences(path),
        DataKind::Image => load_images(path),
    }
}

/// Writes `items` in the format of their kind.
pub fn write_items(items: &[&Item], path: &Path) -> Result<()> {
    let first = items
        .first()
        .ok_or_else(|| DsebmError::Empty("nothing to write".into()))?;
    match kind_of(&first.sample) {
        DataKind::Static => {
            let d = first.sample.feature_dim();
            let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
            let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
            header.push("label".into());
            w.write_record(&header).map_err(|e| csv_err(path, e))?;
            for item in items {
                let mut row: Vec<String> = item.sample.values().iter().map(|v| v.to_string()).collect();
                row.push(item.label.clone());
                w.write_record(&row).map_err(|e| csv_err(path, e))?;
            }
            w.flush()?;
        }
        DataKind::Sequence => {
            let mut out = std::io::BufWriter::new(fs::File::create(path)?);
            for item in items {
                let Sample::Sequence(s) = &item.sample else {
                    return Err(DsebmError::Shape("mixed sample kinds".into()));
                };
                let rec = SequenceRecord {
                    id: item.id.clone().into(),
                    label: item.label.clone().into(),
                    steps: s.steps().iter().map(|t| t.data().to_vec()).collect(),
                };
                serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        DataKind::Image => {
            let Sample::Image(t) = &first.sample else { unreachable!() };
            let [c, h, w] = image_shape(t)?;
            let mut buf = Vec::new();
            buf.extend_from_slice(IMAGE_MAGIC);
            buf.push(IMAGE_VERSION);
            for v in [items.len(), c, h, w] {
                buf.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for item in items {
                let label: u32 = item.label.parse().map_err(|_| {
                    DsebmError::InvalidArgument(format!("image labels must be u32, got {:?}", item.label))
                })?;
                buf.extend_from_slice(&label.to_le_bytes());
                for v in item.sample.values() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            fs::write(path, buf)?;
        }
    }
    Ok(())
}

/// Splits `dataset` into an inlier-only training set and a test set
/// contaminated at ratio `rho`.
///
/// `split_ratio` is the fraction of inliers used for training (rounded to
/// nearest). The test set receives `⌈rho·m/(1 − rho)⌉` outliers, `m` being the
/// number of held-out inliers. Items not selected are dropped.
pub fn make_contaminated(
    dataset: &LabeledDataset,
    inlier_classes: &BTreeSet<String>,
    rho: f64,
    split_ratio: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if inlier_classes.is_empty() {
        return Err(DsebmError::InvalidArgument("no inlier classes".into()));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(DsebmError::InvalidArgument(format!("rho must lie in [0, 1), got {rho}")));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(DsebmError::InvalidArgument(format!(
            "split ratio must lie in (0, 1), got {split_ratio}"
        )));
    }
    let (mut inliers, mut outliers): (Vec<usize>, Vec<usize>) =
        (0..dataset.items.len()).partition(|&i| inlier_classes.contains(&dataset.items[i].label));
    if inliers.is_empty() {
        return Err(DsebmError::Empty("no items of the inlier classes".into()));
    }
    let mut rng = RngStream::new(seed);
    rng.shuffle(&mut inliers);
    rng.shuffle(&mut outliers);
    let n_train = ((split_ratio * inliers.len() as f64).round() as usize).min(inliers.len());
    let n_test = inliers.len() - n_train;
    let n_out = (rho * n_test as f64 / (1.0 - rho) - 1e-9).ceil().max(0.0) as usize;
    if n_out > outliers.len() {
        return Err(DsebmError::InsufficientOutliers {
            needed: n_out,
            available: outliers.len(),
        });
    }
    let mut train: Vec<usize> = inliers[..n_train].to_vec();
    let mut test: Vec<usize> = inliers[n_train..].iter().chain(&outliers[..n_out]).copied().collect();
    train.sort_unstable();
    test.sort_unstable();
    let pick = |idx: &[usize], split: Split| -> Vec<Item> {
        idx.iter()
            .map(|&i| Item {
                split,
                ..dataset.items[i].clone()
            })
            .collect()
    };
    let mut items = pick(&train, Split::Train);
    items.extend(pick(&test, Split::Test));
    let stats = if train.is_empty() {
        dataset.stats.clone()
    } else {
        Normalizer::fit(train.iter().map(|&i| &dataset.items[i].sample))?
    };
    Ok(LabeledDataset {
        kind: dataset.kind,
        items,
        inlier_classes: inlier_classes.clone(),
        rho: Some(rho),
        stats,
    })
}

pub const INLIER_LABEL: &str = "0";
pub const OUTLIER_LABEL: &str = "1";

fn check_n(n: usize) -> Result<()> {
    if n < 10 {
        return Err(DsebmError::InvalidArgument(format!("need n >= 10, got {n}")));
    }
    Ok(())
}

fn vector_item(i: usize, label: &str, values: Vec<f64>) -> Item {
    Item {
        id: i.to_string(),
        label: label.to_string(),
        sample: Sample::Vector(Tensor::vector(values)),
        split: Split::Unassigned,
    }
}

/// `n/2` inliers labelled `"0"` from an equal mixture of unit Gaussians at
/// `±2·e₀`, and the rest labelled `"1"`: mixture draws shifted by
/// `separation` along the last axis.
pub fn synth_gaussians(n: usize, d: usize, separation: f64, seed: u64) -> Result<LabeledDataset> {
    check_n(n)?;
    if d == 0 {
        return Err(DsebmError::InvalidArgument("d must be positive".into()));
    }
    let mut rng = RngStream::new(seed);
    let n_in = n / 2;
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = rng.normal_vec(d, 1.0);
        x[0] += if rng.uniform() < 0.5 { -2.0 } else { 2.0 };
        let label = if i < n_in {
            INLIER_LABEL
        } else {
            x[d - 1] += separation;
            OUTLIER_LABEL
        };
        items.push(vector_item(i, label, x));
    }
    LabeledDataset::new(items)
}

/// `n/2` inliers labelled `"0"` from modes at ±2.5 with standard deviation
/// 0.5, and the rest labelled `"1"` uniform on `[−6, 6]`.
pub fn synth_bimodal_1d(n: usize, seed: u64) -> Result<LabeledDataset> {
    check_n(n)?;
    let mut rng = RngStream::new(seed);
    let n_in = n / 2;
    let items = (0..n)
        .map(|i| {
            if i < n_in {
                let center = if rng.uniform() < 0.5 { -2.5 } else { 2.5 };
                vector_item(i, INLIER_LABEL, vec![center + rng.normal(0.5)])
            } else {
                vector_item(i, OUTLIER_LABEL, vec![rng.uniform_range(-6.0, 6.0)])
            }
        })
        .collect();
    LabeledDataset::new(items)
}

/// Sequences of `d`-dimensional steps with lengths in `[min_len, max_len]`.
/// Inliers follow noisy phase-shifted sinusoids; outliers are random walks.
pub fn synth_sequences(n: usize, d: usize, min_len: usize, max_len: usize, seed: u64) -> Result<LabeledDataset> {
    check_n(n)?;
    if d == 0 || min_len == 0 || max_len < min_len {
        return Err(DsebmError::InvalidArgument("need d > 0 and 0 < min_len <= max_len".into()));
    }
    let mut rng = RngStream::new(seed);
    let n_in = n / 2;
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let len = min_len + rng.index(max_len - min_len + 1);
        let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
        let mut walk = vec![0.0; d];
        let steps: Vec<Tensor> = (0..len)
            .map(|t| {
                let v = (0..d)
                    .map(|j| {
                        if i < n_in {
                            (0.6 * t as f64 + phase + j as f64).sin() + rng.normal(0.1)
                        } else {
                            walk[j] += rng.normal(0.7);
                            walk[j]
                        }
                    })
                    .collect();
                Tensor::vector(v)
            })
            .collect();
        let label = if i < n_in { INLIER_LABEL } else { OUTLIER_LABEL };
        items.push(Item {
            id: i.to_string(),
            label: label.into(),
            sample: Sample::Sequence(Sequence::new(steps)?),
            split: Split::Unassigned,
        });
    }
    LabeledDataset::new(items)
}

/// Single-channel `size × size` images. Inliers show a horizontal bar at a
/// random row, outliers a vertical bar at a random column, both with noise.
pub fn synth_images(n: usize, size: usize, seed: u64) -> Result<LabeledDataset> {
    check_n(n)?;
    if size < 2 {
        return Err(DsebmError::InvalidArgument("image size must be at least 2".into()));
    }
    let mut rng = RngStream::new(seed);
    let n_in = n / 2;
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let at = rng.index(size);
        let mut data = vec![0.0; size * size];
        for r in 0..size {
            for c in 0..size {
                let on = if i < n_in { r == at } else { c == at };
                data[r * size + c] = if on { 1.0 } else { 0.0 } + rng.normal(0.05);
            }
        }
        let label = if i < n_in { INLIER_LABEL } else { OUTLIER_LABEL };
        items.push(Item {
            id: i.to_string(),
            label: label.into(),
            sample: Sample::Image(Tensor::new(vec![1, size, size], data)?),
            split: Split::Unassigned,
        });
    }
    LabeledDataset::new(items)
}
