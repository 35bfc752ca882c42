//! Datasets: IDX and CSV loaders, seeded synthetic tasks, batch planning.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{GpsError, Result};
use crate::rng::{substream, Rng};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    /// A loaded file that has not been split.
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, features...]`.
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if samples.rank() < 2 || samples.shape()[0] != labels.len() {
            return Err(GpsError::Input(format!(
                "samples {:?} do not match {} labels",
                samples.shape(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(GpsError::Input("dataset has no samples".into()));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(GpsError::Input(format!(
                "label {y} at sample {i} outside [0, {classes})"
            )));
        }
        Ok(Dataset {
            samples,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.samples.shape()[1..].iter().product()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.samples.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (samples, labels) = self.batch(indices);
        Dataset {
            samples,
            labels,
            classes: self.classes,
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Per-feature mean and standard deviation fitted on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn fit(ds: &Dataset) -> Self {
        let d = ds.feature_count();
        let n = ds.len() as f64;
        let x = ds.samples.data();
        let mut mean = vec![0.0; d];
        for row in x.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x.chunks(d) {
            for j in 0..d {
                var[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        FeatureStats { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let d = self.mean.len();
        for row in ds.samples.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
    }
}

/// Standardizes all splits with statistics from the first one.
pub fn standardize(train: &mut Dataset, others: &mut [&mut Dataset]) -> FeatureStats {
    let stats = FeatureStats::fit(train);
    stats.apply(train);
    for ds in others {
        stats.apply(ds);
    }
    stats
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| GpsError::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| GpsError::Format(format!("{what}: header truncated at byte {at}")))
}

/// Loads an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let ib = read_file(ipath)?;
    let lb = read_file(lpath)?;
    let iname = ipath.display().to_string();
    let lname = lpath.display().to_string();

    let magic = be_u32(&ib, 0, &iname)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(GpsError::Format(format!(
            "{iname}: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(&ib, 4, &iname)? as usize;
    let rows = be_u32(&ib, 8, &iname)? as usize;
    let cols = be_u32(&ib, 12, &iname)? as usize;
    let pixels = &ib[16..];
    if pixels.len() != n * rows * cols {
        return Err(GpsError::Format(format!(
            "{iname}: header declares {n}x{rows}x{cols} pixels but {} bytes follow",
            pixels.len()
        )));
    }

    let magic = be_u32(&lb, 0, &lname)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(GpsError::Format(format!(
            "{lname}: label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let nl = be_u32(&lb, 4, &lname)? as usize;
    if nl != n {
        return Err(GpsError::Format(format!(
            "{lname} has {nl} labels but {iname} has {n} images"
        )));
    }
    let raw_labels = &lb[8..];
    if raw_labels.len() != n {
        return Err(GpsError::Format(format!(
            "{lname}: header declares {n} labels but {} bytes follow",
            raw_labels.len()
        )));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let samples = Tensor::new(vec![n, rows * cols], data)?;
    Dataset::new(samples, labels, classes, Split::All)
}

/// Writes an IDX image/label pair (fixture and export helper).
pub fn write_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    label_bytes: &[u8],
) -> Result<()> {
    let n = label_bytes.len();
    assert_eq!(pixels.len(), n * rows * cols, "pixel count");
    let mut ib = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend_from_slice(pixels);
    let mut lb = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend_from_slice(label_bytes);
    fs::write(images.as_ref(), ib).map_err(|e| GpsError::io(&images, e))?;
    fs::write(labels.as_ref(), lb).map_err(|e| GpsError::io(&labels, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

impl FromStr for LabelColumn {
    type Err = GpsError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.to_string()),
        })
    }
}

/// Loads a numeric CSV. Labels are mapped to `0..C` in order of first appearance.
pub fn load_csv(path: impl AsRef<Path>, label: &LabelColumn, header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .from_path(path)
        .map_err(|e| GpsError::Format(format!("{name}: {e}")))?;
    let label_idx = match label {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(col) => {
            if !header {
                return Err(GpsError::Config(format!(
                    "label column '{col}' given by name but the CSV has no header"
                )));
            }
            let headers = reader
                .headers()
                .map_err(|e| GpsError::Format(format!("{name}: {e}")))?;
            headers.iter().position(|h| h.trim() == col).ok_or_else(|| {
                GpsError::Config(format!("{name}: no column named '{col}'"))
            })?
        }
    };
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| GpsError::Format(format!("{name}: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(GpsError::Format(format!(
                "{name}: row at line {line} has {} fields, expected {w}",
                record.len()
            )));
        }
        if label_idx >= w {
            return Err(GpsError::Config(format!(
                "{name}: label column {label_idx} but rows have {w} fields"
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let field = field.trim();
            if j == label_idx {
                let next = label_ids.len();
                labels.push(*label_ids.entry(field.to_string()).or_insert(next));
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    GpsError::Format(format!(
                        "{name}: non-numeric value '{field}' at line {line}, column {j}"
                    ))
                })?;
                data.push(v);
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(GpsError::Input(format!("{name}: no data rows")));
    }
    let samples = Tensor::new(vec![n, width.unwrap_or(1) - 1], data)?;
    Dataset::new(samples, labels, label_ids.len(), Split::All)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    GaussianBlobs,
    TwoRings,
    XorGrid,
}

impl FromStr for Generator {
    type Err = GpsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-blobs" => Ok(Generator::GaussianBlobs),
            "two-rings" => Ok(Generator::TwoRings),
            "xor-grid" => Ok(Generator::XorGrid),
            other => Err(GpsError::Config(format!("unknown generator '{other}'"))),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generator::GaussianBlobs => "gaussian-blobs",
            Generator::TwoRings => "two-rings",
            Generator::XorGrid => "xor-grid",
        })
    }
}

/// A seeded synthetic classification task.
///
/// `task_seed` fixes the class geometry (blob centres, ring radii order,
/// grid labelling) while `seed` drives sampling, so two specs sharing a
/// `task_seed` describe related tasks. `shift` moves every blob centre by a
/// random offset of that length, giving a related but different target task.
/// With `informative = m > 0` blob centres live in the first `m` coordinates
/// and shifts in the next `m`; every other coordinate is pure noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub generator: Generator,
    pub dim: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub noise: f64,
    pub seed: u64,
    pub task_seed: u64,
    /// Blob centre scale / ring spacing / grid cells per axis.
    pub separation: f64,
    pub shift: f64,
    pub informative: usize,
}

impl SynthSpec {
    pub fn blobs(dim: usize, classes: usize, samples_per_class: usize, seed: u64) -> Self {
        SynthSpec {
            generator: Generator::GaussianBlobs,
            dim,
            classes,
            samples_per_class,
            noise: 0.0,
            seed,
            task_seed: seed,
            separation: 1.0,
            shift: 0.0,
            informative: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GpsError::Config(m));
        if self.classes < 2 {
            return bad(format!("synthetic task needs >= 2 classes, got {}", self.classes));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad(format!("label noise {} outside [0, 0.5)", self.noise));
        }
        if self.samples_per_class < 5 {
            return bad("need >= 5 samples per class for a 60/20/20 split".into());
        }
        let min_dim = if self.generator == Generator::GaussianBlobs { 1 } else { 2 };
        if self.dim < min_dim {
            return bad(format!("{} needs dim >= {min_dim}", self.generator));
        }
        if self.informative > self.dim {
            return bad(format!(
                "informative dims {} exceed dim {}",
                self.informative, self.dim
            ));
        }
        if !(self.separation > 0.0) || !(self.shift >= 0.0) {
            return bad("separation must be > 0 and shift >= 0".into());
        }
        Ok(())
    }
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gen_blobs(spec: &SynthSpec, by_class: &mut [Vec<Vec<f64>>]) {
    let active = match spec.informative {
        0 => spec.dim,
        m => m,
    };
    let mut geo = substream(spec.task_seed, "synth-centres");
    let centres: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.dim)
                .map(|i| if i < active { spec.separation * normal(&mut geo) } else { 0.0 })
                .collect()
        })
        .collect();
    let mut shift = substream(spec.task_seed, "synth-shift");
    let centres: Vec<Vec<f64>> = centres
        .into_iter()
        .map(|c| {
            if spec.shift == 0.0 {
                return c;
            }
            let dir: Vec<f64> = (0..spec.dim)
                .map(|i| {
                    let used = spec.informative == 0 || (active..2 * active).contains(&i);
                    if used { normal(&mut shift) } else { 0.0 }
                })
                .collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            c.iter()
                .zip(&dir)
                .map(|(m, d)| m + spec.shift * d / norm)
                .collect()
        })
        .collect();
    let mut rng = substream(spec.seed, "synth-samples");
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            by_class[c].push(centre.iter().map(|m| m + normal(&mut rng)).collect());
        }
    }
}

fn gen_rings(spec: &SynthSpec, by_class: &mut [Vec<Vec<f64>>]) {
    let mut order: Vec<usize> = (0..spec.classes).collect();
    order.shuffle(&mut substream(spec.task_seed, "synth-rings"));
    let mut rng = substream(spec.seed, "synth-samples");
    for c in 0..spec.classes {
        let radius = spec.separation * (1.0 + order[c] as f64);
        for _ in 0..spec.samples_per_class {
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let r = radius + 0.1 * spec.separation * normal(&mut rng);
            let mut x = vec![r * angle.cos(), r * angle.sin()];
            x.extend((2..spec.dim).map(|_| 0.1 * normal(&mut rng)));
            by_class[c].push(x);
        }
    }
}

fn gen_xor(spec: &SynthSpec, by_class: &mut [Vec<Vec<f64>>]) {
    let cells = spec.separation.round().max(2.0) as usize;
    let mut relabel: Vec<usize> = (0..spec.classes).collect();
    relabel.shuffle(&mut substream(spec.task_seed, "synth-xor"));
    let mut rng = substream(spec.seed, "synth-samples");
    while by_class.iter().any(|v| v.len() < spec.samples_per_class) {
        let x: f64 = rng.random::<f64>() * 2.0 - 1.0;
        let y: f64 = rng.random::<f64>() * 2.0 - 1.0;
        let cx = (((x + 1.0) / 2.0 * cells as f64) as usize).min(cells - 1);
        let cy = (((y + 1.0) / 2.0 * cells as f64) as usize).min(cells - 1);
        let c = relabel[(cx + cy) % spec.classes];
        let mut p = vec![x, y];
        p.extend((2..spec.dim).map(|_| 0.1 * normal(&mut rng)));
        if by_class[c].len() < spec.samples_per_class {
            by_class[c].push(p);
        }
    }
}

/// Generates a task and returns `(train, val, test)`, split 60/20/20 per class
/// and standardized with training statistics.
pub fn synth_task(spec: &SynthSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let mut by_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); spec.classes];
    match spec.generator {
        Generator::GaussianBlobs => gen_blobs(spec, &mut by_class),
        Generator::TwoRings => gen_rings(spec, &mut by_class),
        Generator::XorGrid => gen_xor(spec, &mut by_class),
    }
    let mut split_rng = substream(spec.seed, "synth-split");
    let mut parts: [(Vec<f64>, Vec<usize>); 3] = Default::default();
    for (c, mut rows) in by_class.into_iter().enumerate() {
        rows.shuffle(&mut split_rng);
        let n = rows.len();
        let n_train = (n as f64 * 0.6).round() as usize;
        let n_val = (n as f64 * 0.2).round() as usize;
        for (i, row) in rows.into_iter().enumerate() {
            let part = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            parts[part].0.extend(row);
            parts[part].1.push(c);
        }
    }
    let mut noise_rng = substream(spec.seed, "synth-noise");
    let splits = [Split::Train, Split::Val, Split::Test];
    let mut out = Vec::with_capacity(3);
    for ((data, mut labels), split) in parts.into_iter().zip(splits) {
        if spec.noise > 0.0 {
            for y in labels.iter_mut() {
                if noise_rng.random::<f64>() < spec.noise {
                    let other = noise_rng.random_range(0..spec.classes - 1);
                    *y = if other >= *y { other + 1 } else { other };
                }
            }
        }
        let n = labels.len();
        let samples = Tensor::new(vec![n, spec.dim], data)?;
        out.push(Dataset::new(samples, labels, spec.classes, split)?);
    }
    let mut test = out.pop().unwrap();
    let mut val = out.pop().unwrap();
    let mut train = out.pop().unwrap();
    standardize(&mut train, &mut [&mut val, &mut test]);
    Ok((train, val, test))
}

/// Partitions the dataset into batches where every class present contributes
/// at least two samples, so each anchor has a same-class partner.
///
/// Classes are cut into groups of two (three for an odd remainder) which are
/// interleaved round-robin across classes and packed into batches without
/// splitting a group. A class with a single sample cannot be paired and
/// appears alone in its batch.
pub fn balanced_batches(ds: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 4 {
        return Err(GpsError::Config(format!(
            "balanced batches need batch_size >= 4, got {batch_size}"
        )));
    }
    let mut rng = substream(seed, "balanced-batches");
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        per_class[y].push(i);
    }
    let mut groups: Vec<std::collections::VecDeque<Vec<usize>>> = per_class
        .into_iter()
        .map(|mut idx| {
            idx.shuffle(&mut rng);
            let mut gs: Vec<Vec<usize>> = idx.chunks(2).map(|c| c.to_vec()).collect();
            if gs.len() > 1 && gs.last().is_some_and(|g| g.len() == 1) {
                let tail = gs.pop().unwrap();
                gs.last_mut().unwrap().extend(tail);
            }
            gs.into()
        })
        .collect();
    let mut sequence = Vec::new();
    while groups.iter().any(|g| !g.is_empty()) {
        let mut order: Vec<usize> = (0..groups.len()).filter(|&c| !groups[c].is_empty()).collect();
        order.shuffle(&mut rng);
        for c in order {
            sequence.push(groups[c].pop_front().unwrap());
        }
    }
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for group in sequence {
        if !current.is_empty() && current.len() + group.len() > batch_size {
            batches.push(std::mem::take(&mut current));
        }
        current.extend(group);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// Sequential batches over a seeded permutation of `0..n`.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
