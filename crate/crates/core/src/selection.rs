//! Gradient-importance snapshots and selection masks.
//!
//! A [`GradientSnapshot`] holds the full-pass gradient of a selection loss
//! for every selectable weight matrix. Masks are then built per neuron (the
//! default), per layer, over the whole network, at random, or by weight
//! magnitude. Every ranking orders by descending magnitude and breaks ties
//! toward the lower flat index, so masks are fully reproducible.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use bitvec::prelude::*;
use rand::seq::index;

use crate::autodiff::{CustomOp, Graph, NodeId, Reduction};
use crate::codec::{Reader, Writer};
use crate::data::{balanced_batches, Dataset};
use crate::error::{GpsError, Result};
use crate::model::{Model, NeuronMap, ParamRole};
use crate::rng::{fnv1a, substream};
use crate::tensor::Tensor;

const MASK_MAGIC: &[u8; 4] = b"GPSM";
const MASK_VERSION: u32 = 1;
pub const DEFAULT_TAU: f64 = 0.07;

// ---------------------------------------------------------------------------
// Supervised contrastive loss

struct SupConBackward {
    /// Row-normalized embeddings `[B, d]`.
    unit: Vec<f64>,
    norms: Vec<f64>,
    /// d(loss)/d(similarity), `[B, B]`.
    dsim: Vec<f64>,
    batch: usize,
    dim: usize,
    tau: f64,
}

impl CustomOp for SupConBackward {
    fn name(&self) -> &str {
        "supcon"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let (b, d) = (self.batch, self.dim);
        let scale = grad_out.data()[0] / self.tau;
        let u = &self.unit;
        let mut gz = vec![0.0; b * d];
        for k in 0..b {
            let mut gu = vec![0.0; d];
            for j in 0..b {
                let w = self.dsim[k * b + j] + self.dsim[j * b + k];
                if w != 0.0 {
                    for t in 0..d {
                        gu[t] += w * u[j * d + t];
                    }
                }
            }
            let uk = &u[k * d..(k + 1) * d];
            let radial: f64 = gu.iter().zip(uk).map(|(a, b)| a * b).sum();
            for t in 0..d {
                gz[k * d + t] = scale * (gu[t] - uk[t] * radial) / self.norms[k];
            }
        }
        vec![Tensor::new(vec![b, d], gz).expect("shape")]
    }
}

/// Supervised contrastive loss over the rows of `z[B, d]`, summed over anchors.
///
/// Rows are L2-normalized first. For anchor `i` the positives are the other
/// samples sharing its label and the denominator runs over every sample but
/// `i`; anchors without a positive contribute nothing.
pub fn scl_loss(g: &mut Graph, z: NodeId, labels: &[usize], tau: f64) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(GpsError::Config(format!("SCL temperature must be > 0, got {tau}")));
    }
    let zt = g.value(z)?;
    if zt.rank() != 2 || zt.shape()[0] != labels.len() {
        return Err(GpsError::Dimension(format!(
            "scl: embeddings {:?} with {} labels",
            zt.shape(),
            labels.len()
        )));
    }
    let (b, d) = (zt.shape()[0], zt.shape()[1]);
    if b < 2 {
        return Err(GpsError::Input(format!("scl needs a batch of >= 2, got {b}")));
    }
    let zd = zt.data();
    let mut unit = vec![0.0; b * d];
    let mut norms = vec![0.0; b];
    for i in 0..b {
        let row = &zd[i * d..(i + 1) * d];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        norms[i] = n;
        for t in 0..d {
            unit[i * d + t] = row[t] / n;
        }
    }
    let mut sim = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let s: f64 = (0..d).map(|t| unit[i * d + t] * unit[j * d + t]).sum();
            sim[i * b + j] = s / tau;
        }
    }
    let mut total = 0.0;
    let mut dsim = vec![0.0; b * b];
    for i in 0..b {
        let positives = (0..b).filter(|&p| p != i && labels[p] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        let row = &sim[i * b..(i + 1) * b];
        let max = (0..b)
            .filter(|&a| a != i)
            .map(|a| row[a])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..b).filter(|&a| a != i).map(|a| (row[a] - max).exp()).sum();
        let lse = max + denom.ln();
        let pos_sum: f64 = (0..b)
            .filter(|&p| p != i && labels[p] == labels[i])
            .map(|p| row[p])
            .sum();
        total += lse - pos_sum / positives as f64;
        for a in (0..b).filter(|&a| a != i) {
            let q = (row[a] - max).exp() / denom;
            let pos = if labels[a] == labels[i] {
                1.0 / positives as f64
            } else {
                0.0
            };
            dsim[i * b + a] = q - pos;
        }
    }
    let op = SupConBackward {
        unit,
        norms,
        dsim,
        batch: b,
        dim: d,
        tau,
    };
    g.custom(&[z], Tensor::scalar(total), Box::new(op))
}

// ---------------------------------------------------------------------------
// Gradient snapshots

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Head-free supervised contrastive loss on the embedding.
    Scl,
    /// Cross-entropy through the (freshly initialized) head.
    CeWithHead,
}

impl FromStr for LossKind {
    type Err = GpsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scl" => Ok(LossKind::Scl),
            "ce-with-head" | "ce" => Ok(LossKind::CeWithHead),
            other => Err(GpsError::Config(format!("unknown selection loss '{other}'"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Scl => "scl",
            LossKind::CeWithHead => "ce-with-head",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotConfig {
    pub loss: LossKind,
    pub tau: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        SnapshotConfig {
            loss: LossKind::Scl,
            tau: DEFAULT_TAU,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientSnapshot {
    /// `(matrix name, accumulated gradient)` for every selectable matrix, in model order.
    pub matrices: Vec<(String, Tensor)>,
    pub loss: LossKind,
    pub dataset_id: String,
    pub batches: usize,
    pub seed: u64,
}

impl GradientSnapshot {
    /// Content hash used to tie masks back to their snapshot.
    pub fn id(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in &self.matrices {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    /// Every value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> GradientSnapshot {
        GradientSnapshot {
            matrices: self
                .matrices
                .iter()
                .map(|(n, t)| (n.clone(), t.map(|v| v * factor)))
                .collect(),
            ..self.clone()
        }
    }

    pub fn from_matrices(matrices: Vec<(String, Tensor)>) -> Self {
        GradientSnapshot {
            matrices,
            loss: LossKind::Scl,
            dataset_id: String::new(),
            batches: 0,
            seed: 0,
        }
    }

    fn check_against(&self, map: &NeuronMap) -> Result<()> {
        let same = self.matrices.len() == map.matrices.len()
            && self
                .matrices
                .iter()
                .zip(&map.matrices)
                .all(|((n, t), (mn, ms))| n == mn && t.shape() == &ms[..]);
        if same {
            Ok(())
        } else {
            Err(GpsError::Contract(
                "gradient snapshot does not match the neuron map's matrices".into(),
            ))
        }
    }
}

/// One pass over `dataset`, summing per-batch gradients of the selection loss
/// for every selectable matrix. Sum reductions keep the total equal to the
/// full-set gradient for the cross-entropy path.
pub fn accumulate_gradients(
    model: &Model,
    dataset: &Dataset,
    config: &SnapshotConfig,
) -> Result<GradientSnapshot> {
    if dataset.is_empty() {
        return Err(GpsError::Input("selection dataset is empty".into()));
    }
    let batches = match config.loss {
        LossKind::Scl => balanced_batches(dataset, config.batch_size, config.seed)?,
        LossKind::CeWithHead => (0..dataset.len())
            .collect::<Vec<_>>()
            .chunks(config.batch_size.max(1))
            .map(|c| c.to_vec())
            .collect(),
    };
    let selectable: Vec<usize> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.role.is_selectable())
        .map(|(i, _)| i)
        .collect();
    let mut sums: Vec<Tensor> = selectable
        .iter()
        .map(|&i| Tensor::zeros(model.params()[i].value.shape()))
        .collect();
    for batch in &batches {
        let (x, y) = dataset.batch(batch);
        let mut pass = model.forward_graph(&x, |p| p.role == ParamRole::Weight)?;
        let loss = match config.loss {
            LossKind::Scl => scl_loss(&mut pass.graph, pass.embedding, &y, config.tau)?,
            LossKind::CeWithHead => {
                pass.graph
                    .softmax_cross_entropy(pass.logits, &y, Reduction::Sum)?
            }
        };
        pass.graph.backward(loss)?;
        for (acc, &pi) in sums.iter_mut().zip(&selectable) {
            let g = pass.graph.grad(pass.params[pi]).expect("selectable leaf has grad");
            acc.accumulate(g);
        }
    }
    let matrices: Vec<(String, Tensor)> = selectable
        .iter()
        .zip(sums)
        .map(|(&i, t)| (model.params()[i].name.clone(), t))
        .collect();
    if let Some((name, _)) = matrices.iter().find(|(_, t)| !t.is_finite()) {
        return Err(GpsError::Numeric(format!(
            "non-finite selection gradient in '{name}'"
        )));
    }
    Ok(GradientSnapshot {
        matrices,
        loss: config.loss,
        dataset_id: format!("{:016x}", dataset_digest(dataset)),
        batches: batches.len(),
        seed: config.seed,
    })
}

fn dataset_digest(ds: &Dataset) -> u64 {
    let mut bytes = Vec::with_capacity(ds.samples.numel() * 8 + ds.len() * 8);
    for v in ds.samples.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.labels {
        bytes.extend_from_slice(&(y as u64).to_le_bytes());
    }
    fnv1a(&bytes)
}

// ---------------------------------------------------------------------------
// Masks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    NeuronTopK,
    NetTopFrac,
    LayerTopFrac,
    NetRandom,
    NeuronRandom,
    Magnitude,
    /// Empty weight mask; every bias trains.
    BiasOnly,
    /// Empty weight mask; only the head trains.
    LinearOnly,
    /// Every parameter trains.
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::NeuronTopK,
        Strategy::NetTopFrac,
        Strategy::LayerTopFrac,
        Strategy::NetRandom,
        Strategy::NeuronRandom,
        Strategy::Magnitude,
        Strategy::BiasOnly,
        Strategy::LinearOnly,
        Strategy::Full,
    ];

    pub fn code(self) -> u8 {
        Strategy::ALL.iter().position(|&s| s == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Result<Strategy> {
        Strategy::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| GpsError::Format(format!("unknown strategy code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NeuronTopK => "neuron-topk",
            Strategy::NetTopFrac => "net-topfrac",
            Strategy::LayerTopFrac => "layer-topfrac",
            Strategy::NetRandom => "net-random",
            Strategy::NeuronRandom => "neuron-random",
            Strategy::Magnitude => "magnitude",
            Strategy::BiasOnly => "bias-only",
            Strategy::LinearOnly => "linear-only",
            Strategy::Full => "full",
        }
    }

    /// Non-selectable, non-head parameters that train alongside the mask.
    pub fn extras(self) -> ExtraScope {
        match self {
            Strategy::BiasOnly => ExtraScope::Biases,
            Strategy::Full => ExtraScope::All,
            _ => ExtraScope::None,
        }
    }

    pub fn needs_snapshot(self) -> bool {
        matches!(
            self,
            Strategy::NeuronTopK | Strategy::NetTopFrac | Strategy::LayerTopFrac
        )
    }
}

impl FromStr for Strategy {
    type Err = GpsError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| GpsError::Config(format!("unknown selection strategy '{s}'")))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtraScope {
    None,
    Biases,
    /// Biases, norms and positional tables.
    All,
}

impl ExtraScope {
    pub fn covers(self, role: ParamRole) -> bool {
        match self {
            ExtraScope::None => false,
            ExtraScope::Biases => role == ParamRole::Bias,
            ExtraScope::All => !role.is_head() && !role.is_selectable(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    None,
    PerNeuron(u32),
    Fraction(f64),
    Count(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    pub name: String,
    pub shape: Vec<usize>,
    pub bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Binary trainability mask over every selectable weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    pub matrices: Vec<MaskMatrix>,
    pub strategy: Strategy,
    pub budget: Budget,
    pub seed: u64,
    /// Snapshot id the mask was derived from (0 when none); not persisted.
    pub source: u64,
}

impl SelectionMask {
    fn blank(map: &NeuronMap, strategy: Strategy, budget: Budget, seed: u64, fill: bool) -> Self {
        SelectionMask {
            matrices: map
                .matrices
                .iter()
                .map(|(name, shape)| MaskMatrix {
                    name: name.clone(),
                    shape: shape.clone(),
                    bits: vec![fill; shape.iter().product()],
                })
                .collect(),
            strategy,
            budget,
            seed,
            source: 0,
        }
    }

    /// Empty mask for `strategy` (use with bias-only / linear-only).
    pub fn empty(map: &NeuronMap, strategy: Strategy) -> Self {
        SelectionMask::blank(map, strategy, Budget::None, 0, false)
    }

    /// All-ones mask; with [`Strategy::Full`] every parameter trains.
    pub fn full(map: &NeuronMap) -> Self {
        SelectionMask::blank(map, Strategy::Full, Budget::None, 0, true)
    }

    pub fn popcount(&self) -> usize {
        self.matrices.iter().map(MaskMatrix::popcount).sum()
    }

    pub fn size(&self) -> usize {
        self.matrices.iter().map(|m| m.bits.len()).sum()
    }

    pub fn matrix(&self, name: &str) -> Option<&MaskMatrix> {
        self.matrices.iter().find(|m| m.name == name)
    }

    /// Number of parameters this mask makes trainable in `model`, head excluded.
    pub fn trainable_count(&self, model: &Model) -> usize {
        let extras = self.strategy.extras();
        self.popcount()
            + model
                .params()
                .iter()
                .filter(|p| extras.covers(p.role))
                .map(|p| p.value.numel())
                .sum::<usize>()
    }

    /// Checks the mask lines up with the model's selectable matrices.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        let mut sel = model.selectable();
        for m in &self.matrices {
            match sel.next() {
                Some(p) if p.name == m.name && p.value.shape() == &m.shape[..] => {}
                _ => {
                    return Err(GpsError::Contract(format!(
                        "mask matrix '{}' {:?} does not match the model",
                        m.name, m.shape
                    )))
                }
            }
        }
        if sel.next().is_some() {
            return Err(GpsError::Contract(
                "mask covers fewer matrices than the model has".into(),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(MASK_MAGIC);
        w.u32(MASK_VERSION);
        w.u8(self.strategy.code());
        match self.budget {
            Budget::Fraction(p) => w.f64(p),
            Budget::PerNeuron(k) | Budget::Count(k) => w.u32(k),
            Budget::None => w.u32(0),
        }
        w.u64(self.seed);
        w.u32(self.matrices.len() as u32);
        for m in &self.matrices {
            w.name(&m.name)?;
            w.dims(&m.shape)?;
            let packed: BitVec<u8, Lsb0> = m.bits.iter().copied().collect();
            w.bytes(packed.as_raw_slice());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SelectionMask> {
        let mut r = Reader::new(bytes, "mask");
        r.expect_magic(MASK_MAGIC, MASK_VERSION)?;
        let strategy = Strategy::from_code(r.u8()?)?;
        let budget = match strategy {
            Strategy::NetTopFrac | Strategy::LayerTopFrac => Budget::Fraction(r.f64()?),
            Strategy::NeuronTopK | Strategy::NeuronRandom | Strategy::Magnitude => {
                Budget::PerNeuron(r.u32()?)
            }
            Strategy::NetRandom => Budget::Count(r.u32()?),
            _ => {
                r.u32()?;
                Budget::None
            }
        };
        let seed = r.u64()?;
        let count = r.u32()?;
        let mut matrices = Vec::new();
        for _ in 0..count {
            let name = r.name()?;
            let shape = r.dims()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.div_ceil(8))?;
            let bits = BitSlice::<u8, Lsb0>::from_slice(raw)[..n]
                .iter()
                .map(|b| *b)
                .collect();
            matrices.push(MaskMatrix { name, shape, bits });
        }
        r.finish()?;
        Ok(SelectionMask {
            matrices,
            strategy,
            budget,
            seed,
            source: 0,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_bytes()?).map_err(|e| GpsError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SelectionMask> {
        let bytes = fs::read(path.as_ref()).map_err(|e| GpsError::io(&path, e))?;
        SelectionMask::from_bytes(&bytes)
    }
}

/// `ceil(p * n)`, snapping products within rounding noise of an integer.
pub fn fraction_count(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let r = x.round();
    let c = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (c as usize).min(n)
}

fn check_fraction(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(GpsError::Config(format!("fraction p must be in (0, 1], got {p}")))
    }
}

fn check_k(k: usize) -> Result<u32> {
    if k == 0 {
        return Err(GpsError::Config("K must be >= 1".into()));
    }
    u32::try_from(k).map_err(|_| GpsError::Config(format!("K = {k} too large")))
}

/// Indices of the `m` largest scores, ties toward the lower index.
fn top_indices(candidates: &[usize], score: impl Fn(usize) -> f64, m: usize) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = candidates.iter().map(|&i| (score(i), i)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(m).map(|(_, i)| i).collect()
}

fn per_neuron_topk(
    map: &NeuronMap,
    values: &[&[f64]],
    k: usize,
    strategy: Strategy,
) -> Result<SelectionMask> {
    let kk = check_k(k)?;
    let mut mask = SelectionMask::blank(map, strategy, Budget::PerNeuron(kk), 0, false);
    for e in &map.entries {
        let v = values[e.matrix];
        let keep = k.min(e.connections.len());
        for i in top_indices(&e.connections, |c| v[c].abs(), keep) {
            mask.matrices[e.matrix].bits[i] = true;
        }
    }
    Ok(mask)
}

/// Per neuron, the `min(K, fan_in)` input connections with largest |gradient|.
pub fn select_neuron_topk(
    snapshot: &GradientSnapshot,
    map: &NeuronMap,
    k: usize,
) -> Result<SelectionMask> {
    snapshot.check_against(map)?;
    let values: Vec<&[f64]> = snapshot.matrices.iter().map(|(_, t)| t.data()).collect();
    let mut mask = per_neuron_topk(map, &values, k, Strategy::NeuronTopK)?;
    mask.source = snapshot.id();
    Ok(mask)
}

/// Per neuron, the `min(K, fan_in)` input connections with largest |weight|.
pub fn select_magnitude(model: &Model, map: &NeuronMap, k: usize) -> Result<SelectionMask> {
    let values: Vec<&[f64]> = model.selectable().map(|p| p.value.data()).collect();
    if values.len() != map.matrices.len() {
        return Err(GpsError::Contract("neuron map does not match the model".into()));
    }
    per_neuron_topk(map, &values, k, Strategy::Magnitude)
}

/// The `count` entries with globally largest |gradient|; ties toward lower (matrix, index).
pub fn select_net_topcount(snapshot: &GradientSnapshot, count: usize) -> Result<SelectionMask> {
    let mut flat = Vec::new();
    for (m, (_, t)) in snapshot.matrices.iter().enumerate() {
        flat.extend(t.data().iter().enumerate().map(|(i, v)| (v.abs(), m, i)));
    }
    if count > flat.len() {
        return Err(GpsError::Config(format!(
            "budget {count} exceeds {} selectable parameters",
            flat.len()
        )));
    }
    flat.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut mask = mask_like(snapshot, Strategy::NetTopFrac);
    for &(_, m, i) in &flat[..count] {
        mask.matrices[m].bits[i] = true;
    }
    let total = flat.len();
    mask.budget = Budget::Fraction(count as f64 / total as f64);
    Ok(mask)
}

/// The `ceil(p * N)` entries with globally largest |gradient|.
pub fn select_net_topfrac(snapshot: &GradientSnapshot, p: f64) -> Result<SelectionMask> {
    check_fraction(p)?;
    let total: usize = snapshot.matrices.iter().map(|(_, t)| t.numel()).sum();
    let mut mask = select_net_topcount(snapshot, fraction_count(p, total))?;
    mask.budget = Budget::Fraction(p);
    Ok(mask)
}

/// Per matrix, the `ceil(p * size)` entries with largest |gradient|.
pub fn select_layer_topfrac(snapshot: &GradientSnapshot, p: f64) -> Result<SelectionMask> {
    check_fraction(p)?;
    let quotas: Vec<usize> = snapshot
        .matrices
        .iter()
        .map(|(_, t)| fraction_count(p, t.numel()))
        .collect();
    let mut mask = layer_select(snapshot, &quotas);
    mask.budget = Budget::Fraction(p);
    Ok(mask)
}

/// Per-matrix selection whose quotas are proportional to matrix size
/// (largest-remainder apportionment) and sum to exactly `total`.
pub fn select_layer_budget(snapshot: &GradientSnapshot, total: usize) -> Result<SelectionMask> {
    let sizes: Vec<usize> = snapshot.matrices.iter().map(|(_, t)| t.numel()).collect();
    let n: usize = sizes.iter().sum();
    if total > n {
        return Err(GpsError::Config(format!(
            "budget {total} exceeds {n} selectable parameters"
        )));
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|&s| total * s / n).collect();
    let mut remainders: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| ((total * s) % n, i))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - quotas.iter().sum::<usize>();
    for &(_, i) in remainders.iter().take(missing) {
        quotas[i] += 1;
    }
    let mut mask = layer_select(snapshot, &quotas);
    mask.budget = Budget::Fraction(total as f64 / n as f64);
    Ok(mask)
}

fn layer_select(snapshot: &GradientSnapshot, quotas: &[usize]) -> SelectionMask {
    let mut mask = mask_like(snapshot, Strategy::LayerTopFrac);
    for (m, ((_, t), &q)) in snapshot.matrices.iter().zip(quotas).enumerate() {
        let v = t.data();
        let all: Vec<usize> = (0..v.len()).collect();
        for i in top_indices(&all, |i| v[i].abs(), q) {
            mask.matrices[m].bits[i] = true;
        }
    }
    mask
}

fn mask_like(snapshot: &GradientSnapshot, strategy: Strategy) -> SelectionMask {
    SelectionMask {
        matrices: snapshot
            .matrices
            .iter()
            .map(|(name, t)| MaskMatrix {
                name: name.clone(),
                shape: t.shape().to_vec(),
                bits: vec![false; t.numel()],
            })
            .collect(),
        strategy,
        budget: Budget::None,
        seed: 0,
        source: snapshot.id(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RandomScheme {
    /// `count` parameters uniformly over the whole network.
    Net { count: usize },
    /// `K` uniformly chosen connections per neuron.
    Neuron { k: usize },
}

pub fn select_random(map: &NeuronMap, scheme: RandomScheme, seed: u64) -> Result<SelectionMask> {
    let mut rng = substream(seed, "random-selection");
    match scheme {
        RandomScheme::Net { count } => {
            let n = map.selectable_count();
            if count > n {
                return Err(GpsError::Config(format!(
                    "budget {count} exceeds {n} selectable parameters"
                )));
            }
            let budget = u32::try_from(count)
                .map_err(|_| GpsError::Config(format!("budget {count} too large")))?;
            let mut mask = SelectionMask::blank(map, Strategy::NetRandom, Budget::Count(budget), seed, false);
            let offsets: Vec<usize> = mask
                .matrices
                .iter()
                .scan(0, |acc, m| {
                    let start = *acc;
                    *acc += m.bits.len();
                    Some(start)
                })
                .collect();
            let mut picks = index::sample(&mut rng, n, count).into_vec();
            picks.sort_unstable();
            let mut m = 0;
            for flat in picks {
                while m + 1 < offsets.len() && flat >= offsets[m + 1] {
                    m += 1;
                }
                mask.matrices[m].bits[flat - offsets[m]] = true;
            }
            Ok(mask)
        }
        RandomScheme::Neuron { k } => {
            let kk = check_k(k)?;
            let mut mask =
                SelectionMask::blank(map, Strategy::NeuronRandom, Budget::PerNeuron(kk), seed, false);
            for e in &map.entries {
                let keep = k.min(e.connections.len());
                for j in index::sample(&mut rng, e.connections.len(), keep) {
                    mask.matrices[e.matrix].bits[e.connections[j]] = true;
                }
            }
            Ok(mask)
        }
    }
}

/// Everything needed to turn a model (and, for gradient strategies, a snapshot) into a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub k: Option<usize>,
    pub p: Option<f64>,
    pub count: Option<usize>,
    pub seed: u64,
}

impl SelectionConfig {
    pub fn new(strategy: Strategy) -> Self {
        SelectionConfig {
            strategy,
            k: None,
            p: None,
            count: None,
            seed: 0,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = Some(p);
        self
    }

    pub fn with_count(mut self, count: usize) -> Self {
        self.count = Some(count);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Requires exactly the budget fields the strategy uses.
    pub fn validate(&self) -> Result<()> {
        let (need_k, need_p, need_count) = match self.strategy {
            Strategy::NeuronTopK | Strategy::NeuronRandom | Strategy::Magnitude => (true, false, false),
            Strategy::NetTopFrac => (false, true, false),
            Strategy::LayerTopFrac => (false, self.count.is_none(), self.p.is_none()),
            Strategy::NetRandom => (false, false, true),
            Strategy::BiasOnly | Strategy::LinearOnly | Strategy::Full => (false, false, false),
        };
        let check = |present: bool, needed: bool, field: &str| -> Result<()> {
            match (present, needed) {
                (false, true) => Err(GpsError::Config(format!(
                    "strategy {} requires {field}",
                    self.strategy
                ))),
                (true, false) => Err(GpsError::Config(format!(
                    "strategy {} does not take {field}",
                    self.strategy
                ))),
                _ => Ok(()),
            }
        };
        check(self.k.is_some(), need_k, "K")?;
        if self.strategy == Strategy::LayerTopFrac {
            if self.p.is_some() == self.count.is_some() {
                return Err(GpsError::Config(
                    "strategy layer-topfrac takes exactly one of p or count".into(),
                ));
            }
        } else {
            check(self.p.is_some(), need_p, "p")?;
            check(self.count.is_some(), need_count, "count")?;
        }
        if let Some(p) = self.p {
            check_fraction(p)?;
        }
        if let Some(k) = self.k {
            check_k(k)?;
        }
        Ok(())
    }
}

/// Builds the mask `config` describes. Gradient-ranked strategies need `snapshot`.
pub fn select(
    model: &Model,
    snapshot: Option<&GradientSnapshot>,
    config: &SelectionConfig,
) -> Result<SelectionMask> {
    config.validate()?;
    let map = model.enumerate_neurons();
    let need_snapshot = || {
        snapshot.ok_or_else(|| {
            GpsError::Contract(format!("strategy {} needs a gradient snapshot", config.strategy))
        })
    };
    let mut mask = match config.strategy {
        Strategy::NeuronTopK => select_neuron_topk(need_snapshot()?, &map, config.k.unwrap())?,
        Strategy::NetTopFrac => select_net_topfrac(need_snapshot()?, config.p.unwrap())?,
        Strategy::LayerTopFrac => match (config.p, config.count) {
            (Some(p), _) => select_layer_topfrac(need_snapshot()?, p)?,
            (None, Some(c)) => select_layer_budget(need_snapshot()?, c)?,
            (None, None) => unreachable!("validated"),
        },
        Strategy::NetRandom => select_random(
            &map,
            RandomScheme::Net {
                count: config.count.unwrap(),
            },
            config.seed,
        )?,
        Strategy::NeuronRandom => select_random(
            &map,
            RandomScheme::Neuron {
                k: config.k.unwrap(),
            },
            config.seed,
        )?,
        Strategy::Magnitude => select_magnitude(model, &map, config.k.unwrap())?,
        Strategy::BiasOnly | Strategy::LinearOnly => SelectionMask::empty(&map, config.strategy),
        Strategy::Full => SelectionMask::full(&map),
    };
    mask.seed = config.seed;
    Ok(mask)
}
