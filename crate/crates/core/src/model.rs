//! Small architectures exposing the neuron / input-connection structure that
//! parameter selection ranks over.
//!
//! Weight layout conventions:
//! - linear weights are `[d_in, d_out]` and compute `x · W + b`; output unit
//!   `j` is a neuron whose input connections are column `j`;
//! - conv kernels are `[c_out, c_in, kh, kw]`; each output channel is a
//!   neuron owning the contiguous `c_in · kh · kw` block.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::autodiff::{Graph, NodeId, LAYER_NORM_EPS};
use crate::codec::{Reader, Writer};
use crate::error::{GpsError, Result};
use crate::rng::{fnv1a, substream};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"GPSW";
const CHECKPOINT_VERSION: u32 = 1;
const FLAG_HEAD: u8 = 0b01;
const FLAG_NON_SELECTABLE: u8 = 0b10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    Mlp {
        hidden: Vec<usize>,
    },
    /// Same-padded stride-1 convolutions, ReLU, global average pooling.
    Cnn {
        channels: Vec<usize>,
        kernel: usize,
    },
    /// Patch-free transformer over `[tokens, features]` inputs; the
    /// embedding is the mean of the final normalized token states.
    TinyTransformer {
        dim: usize,
        heads: usize,
        depth: usize,
        mlp_ratio: usize,
    },
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Mlp { .. } => "mlp",
            Architecture::Cnn { .. } => "cnn",
            Architecture::TinyTransformer { .. } => "tiny-transformer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// Per-sample input shape: `[d]` for MLP, `[c, h, w]` for CNN, `[tokens, features]` for the transformer.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn mlp(input: usize, hidden: &[usize], classes: usize, seed: u64) -> Self {
        ModelSpec {
            arch: Architecture::Mlp {
                hidden: hidden.to_vec(),
            },
            input_shape: vec![input],
            classes,
            seed,
        }
    }

    pub fn input_numel(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GpsError::Config(msg));
        if self.classes < 1 {
            return bad("class count must be >= 1".into());
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return bad(format!("input shape {:?} has an empty dimension", self.input_shape));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return bad(format!("mlp hidden sizes {hidden:?} must be >= 1"));
                }
            }
            Architecture::Cnn { channels, kernel } => {
                if self.input_shape.len() != 3 {
                    return bad(format!(
                        "cnn input shape must be [c, h, w], got {:?}",
                        self.input_shape
                    ));
                }
                if channels.is_empty() || channels.contains(&0) {
                    return bad(format!("cnn channels {channels:?} must be non-empty and >= 1"));
                }
                let (h, w) = (self.input_shape[1], self.input_shape[2]);
                if *kernel == 0 || kernel % 2 == 0 || *kernel > h + 2 * (kernel / 2) || *kernel > w + 2 * (kernel / 2) {
                    return bad(format!("cnn kernel {kernel} must be odd and fit the padded input"));
                }
            }
            Architecture::TinyTransformer {
                dim,
                heads,
                depth,
                mlp_ratio,
            } => {
                if self.input_shape.len() != 2 {
                    return bad(format!(
                        "transformer input shape must be [tokens, features], got {:?}",
                        self.input_shape
                    ));
                }
                if *dim == 0 || *heads == 0 || *depth == 0 || *mlp_ratio == 0 {
                    return bad("transformer sizes must be >= 1".into());
                }
                if dim % heads != 0 {
                    return bad(format!("embedding dim {dim} not divisible by {heads} heads"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Linear weight or conv kernel outside the head: the selection domain.
    Weight,
    Bias,
    /// Layer-norm scale/shift.
    Norm,
    /// Learned positional table.
    Positional,
    HeadWeight,
    HeadBias,
}

impl ParamRole {
    pub fn is_head(self) -> bool {
        matches!(self, ParamRole::HeadWeight | ParamRole::HeadBias)
    }

    pub fn is_selectable(self) -> bool {
        self == ParamRole::Weight
    }

    pub fn flags(self) -> u8 {
        let mut f = 0;
        if self.is_head() {
            f |= FLAG_HEAD;
        }
        if !self.is_selectable() && self != ParamRole::HeadWeight {
            f |= FLAG_NON_SELECTABLE;
        }
        f
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
}

/// Block a parameter belongs to for reporting: `layers.3.weight` -> `layers.3`,
/// `blocks.0.attn.wq` -> `blocks.0`, `embed.weight` -> `embed`.
pub fn block_of(name: &str) -> &str {
    let mut parts = name.splitn(3, '.');
    let first = parts.next().unwrap_or(name);
    match parts.next() {
        Some(second) if second.chars().all(|c| c.is_ascii_digit()) && !second.is_empty() => {
            &name[..first.len() + 1 + second.len()]
        }
        _ => first,
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// A recorded forward pass: the graph plus handles to the outputs and to
/// every parameter leaf (same order as [`Model::params`]).
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: NodeId,
    pub embedding: NodeId,
    pub params: Vec<NodeId>,
}

struct Layout(Vec<(String, Vec<usize>, ParamRole)>);

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, role: ParamRole) {
        self.0.push((name, shape, role));
    }
}

fn layout(spec: &ModelSpec) -> Layout {
    use ParamRole::*;
    let mut l = Layout(Vec::new());
    let embed_dim;
    match &spec.arch {
        Architecture::Mlp { hidden } => {
            let mut d = spec.input_numel();
            for (i, &h) in hidden.iter().enumerate() {
                l.push(format!("layers.{i}.weight"), vec![d, h], Weight);
                l.push(format!("layers.{i}.bias"), vec![h], Bias);
                d = h;
            }
            embed_dim = d;
        }
        Architecture::Cnn { channels, kernel } => {
            let mut c = spec.input_shape[0];
            for (i, &co) in channels.iter().enumerate() {
                l.push(format!("convs.{i}.weight"), vec![co, c, *kernel, *kernel], Weight);
                l.push(format!("convs.{i}.bias"), vec![co], Bias);
                c = co;
            }
            embed_dim = c;
        }
        Architecture::TinyTransformer {
            dim,
            depth,
            mlp_ratio,
            ..
        } => {
            let (tokens, features) = (spec.input_shape[0], spec.input_shape[1]);
            let d = *dim;
            let hidden = d * mlp_ratio;
            l.push("embed.weight".into(), vec![features, d], Weight);
            l.push("embed.bias".into(), vec![d], Bias);
            l.push("embed.pos".into(), vec![tokens, d], Positional);
            for b in 0..*depth {
                let p = format!("blocks.{b}");
                l.push(format!("{p}.ln1.gamma"), vec![d], Norm);
                l.push(format!("{p}.ln1.beta"), vec![d], Norm);
                for proj in ["q", "k", "v", "o"] {
                    l.push(format!("{p}.attn.w{proj}"), vec![d, d], Weight);
                    l.push(format!("{p}.attn.b{proj}"), vec![d], Bias);
                }
                l.push(format!("{p}.ln2.gamma"), vec![d], Norm);
                l.push(format!("{p}.ln2.beta"), vec![d], Norm);
                l.push(format!("{p}.mlp.fc1.weight"), vec![d, hidden], Weight);
                l.push(format!("{p}.mlp.fc1.bias"), vec![hidden], Bias);
                l.push(format!("{p}.mlp.fc2.weight"), vec![hidden, d], Weight);
                l.push(format!("{p}.mlp.fc2.bias"), vec![d], Bias);
            }
            l.push("norm.gamma".into(), vec![d], Norm);
            l.push("norm.beta".into(), vec![d], Norm);
            embed_dim = d;
        }
    }
    l.push("head.weight".into(), vec![embed_dim, spec.classes], HeadWeight);
    l.push("head.bias".into(), vec![spec.classes], HeadBias);
    l
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [d_in, d_out] => (*d_in, *d_out),
        [co, ci, kh, kw] => (ci * kh * kw, co * kh * kw),
        _ => (1, 1),
    }
}

fn init_param(seed: u64, name: &str, shape: &[usize], role: ParamRole) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = match role {
        ParamRole::Bias | ParamRole::HeadBias => vec![0.0; numel],
        ParamRole::Norm if name.ends_with("gamma") => vec![1.0; numel],
        ParamRole::Norm => vec![0.0; numel],
        ParamRole::Weight | ParamRole::HeadWeight | ParamRole::Positional => {
            let (fan_in, fan_out) = fans(shape);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = substream(seed, name);
            (0..numel)
                .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
                .collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("layout shapes are consistent")
}

impl Model {
    /// Builds and initializes a model; identical spec and seed give bitwise-identical parameters.
    pub fn build(spec: &ModelSpec) -> Result<Model> {
        spec.validate()?;
        let params = layout(spec)
            .0
            .into_iter()
            .map(|(name, shape, role)| Param {
                value: init_param(spec.seed, &name, &shape, role),
                name,
                role,
            })
            .collect();
        Ok(Model::assemble(spec.clone(), params))
    }

    fn assemble(spec: ModelSpec, params: Vec<Param>) -> Model {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Model {
            spec,
            params,
            index,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn selectable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.role.is_selectable())
    }

    pub fn selectable_count(&self) -> usize {
        self.selectable().map(|p| p.value.numel()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces the classifier with a freshly initialized one for `classes` outputs.
    pub fn with_new_head(&self, classes: usize, seed: u64) -> Result<Model> {
        let mut spec = self.spec.clone();
        spec.classes = classes;
        spec.validate()?;
        let fresh = layout(&spec);
        let mut params = self.params.clone();
        for p in params.iter_mut().filter(|p| p.role.is_head()) {
            let (_, shape, role) = fresh
                .0
                .iter()
                .find(|(n, ..)| *n == p.name)
                .expect("head names are fixed");
            p.value = init_param(seed, &p.name, shape, *role);
        }
        Ok(Model::assemble(spec, params))
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let shape = x.shape();
        let ok = !shape.is_empty()
            && (shape[1..] == self.spec.input_shape[..]
                || (shape.len() == 2 && shape[1] == self.spec.input_numel()));
        if !ok {
            return Err(GpsError::Dimension(format!(
                "batch shape {:?} does not match model input {:?}",
                shape, self.spec.input_shape
            )));
        }
        Ok(shape[0])
    }

    /// Records a forward pass. `requires_grad` decides which parameter leaves receive gradients.
    pub fn forward_graph(
        &self,
        x: &Tensor,
        requires_grad: impl Fn(&Param) -> bool,
    ) -> Result<ForwardPass> {
        let batch = self.check_input(x)?;
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), requires_grad(p)))
            .collect();
        let p = |name: &str| leaves[self.index[name]];
        let input = g.constant(x.clone());
        let embedding = match &self.spec.arch {
            Architecture::Mlp { hidden } => {
                let mut h = g.reshape(input, &[batch, self.spec.input_numel()])?;
                for i in 0..hidden.len() {
                    let lin = g.matmul(h, p(&format!("layers.{i}.weight")))?;
                    let lin = g.add_bias(lin, p(&format!("layers.{i}.bias")))?;
                    h = g.relu(lin)?;
                }
                h
            }
            Architecture::Cnn { channels, kernel } => {
                let mut shape = vec![batch];
                shape.extend_from_slice(&self.spec.input_shape);
                let mut h = g.reshape(input, &shape)?;
                for i in 0..channels.len() {
                    let c = g.conv2d(h, p(&format!("convs.{i}.weight")), 1, kernel / 2)?;
                    let c = g.add_channel_bias(c, p(&format!("convs.{i}.bias")))?;
                    h = g.relu(c)?;
                }
                let s = g.value(h)?.shape().to_vec();
                let flat = g.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
                g.mean_axis(flat, 2)?
            }
            Architecture::TinyTransformer { dim, heads, depth, .. } => {
                self.transformer(&mut g, input, batch, *dim, *heads, *depth, &p)?
            }
        };
        let logits = g.matmul(embedding, p("head.weight"))?;
        let logits = g.add_bias(logits, p("head.bias"))?;
        Ok(ForwardPass {
            graph: g,
            logits,
            embedding,
            params: leaves,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn transformer(
        &self,
        g: &mut Graph,
        input: NodeId,
        batch: usize,
        dim: usize,
        heads: usize,
        depth: usize,
        p: &dyn Fn(&str) -> NodeId,
    ) -> Result<NodeId> {
        let (tokens, features) = (self.spec.input_shape[0], self.spec.input_shape[1]);
        let dh = dim / heads;
        let rows = batch * tokens;
        let x = g.reshape(input, &[rows, features])?;
        let e = g.matmul(x, p("embed.weight"))?;
        let e = g.add_bias(e, p("embed.bias"))?;
        let e = g.reshape(e, &[batch, tokens * dim])?;
        let pos = g.reshape(p("embed.pos"), &[tokens * dim])?;
        let e = g.add_bias(e, pos)?;
        let mut h = g.reshape(e, &[rows, dim])?;

        let split = |g: &mut Graph, t: NodeId| -> Result<NodeId> {
            let t = g.reshape(t, &[batch, tokens, heads, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[batch * heads, tokens, dh])
        };
        for b in 0..depth {
            let name = |s: &str| format!("blocks.{b}.{s}");
            let n1 = g.layer_norm(h, p(&name("ln1.gamma")), p(&name("ln1.beta")), LAYER_NORM_EPS)?;
            let proj = |w: &str, bias: &str, g: &mut Graph| -> Result<NodeId> {
                let y = g.matmul(n1, p(&name(w)))?;
                g.add_bias(y, p(&name(bias)))
            };
            let q = proj("attn.wq", "attn.bq", g)?;
            let k = proj("attn.wk", "attn.bk", g)?;
            let v = proj("attn.wv", "attn.bv", g)?;
            let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
            let kt = g.permute(k, &[0, 2, 1])?;
            let scores = g.bmm(q, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let att = g.softmax(scores)?;
            let ctx = g.bmm(att, v)?;
            let ctx = g.reshape(ctx, &[batch, heads, tokens, dh])?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[rows, dim])?;
            let o = g.matmul(ctx, p(&name("attn.wo")))?;
            let o = g.add_bias(o, p(&name("attn.bo")))?;
            h = g.add(h, o)?;

            let n2 = g.layer_norm(h, p(&name("ln2.gamma")), p(&name("ln2.beta")), LAYER_NORM_EPS)?;
            let f = g.matmul(n2, p(&name("mlp.fc1.weight")))?;
            let f = g.add_bias(f, p(&name("mlp.fc1.bias")))?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, p(&name("mlp.fc2.weight")))?;
            let f = g.add_bias(f, p(&name("mlp.fc2.bias")))?;
            h = g.add(h, f)?;
        }
        let h = g.layer_norm(h, p("norm.gamma"), p("norm.beta"), LAYER_NORM_EPS)?;
        let h = g.reshape(h, &[batch, tokens, dim])?;
        g.mean_axis(h, 1)
    }

    /// Inference: `(logits [B, C], embedding [B, d])`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let pass = self.forward_graph(x, |_| false)?;
        let logits = pass.graph.value(pass.logits)?.clone();
        let z = pass.graph.value(pass.embedding)?.clone();
        Ok((logits, z))
    }

    /// One entry per neuron of every selectable matrix, in parameter order.
    pub fn enumerate_neurons(&self) -> NeuronMap {
        let mut matrices = Vec::new();
        let mut entries = Vec::new();
        for p in self.selectable() {
            let m = matrices.len();
            let shape = p.value.shape();
            matrices.push((p.name.clone(), shape.to_vec()));
            match shape {
                [d_in, d_out] => {
                    for j in 0..*d_out {
                        entries.push(NeuronEntry {
                            matrix: m,
                            neuron: j,
                            connections: (0..*d_in).map(|i| i * d_out + j).collect(),
                        });
                    }
                }
                [co, rest @ ..] => {
                    let fan: usize = rest.iter().product();
                    for o in 0..*co {
                        entries.push(NeuronEntry {
                            matrix: m,
                            neuron: o,
                            connections: (o * fan..(o + 1) * fan).collect(),
                        });
                    }
                }
                [] => unreachable!("selectable parameters have rank >= 2"),
            }
        }
        NeuronMap { matrices, entries }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self
                .params
                .iter()
                .map(|p| CheckpointTensor {
                    name: p.name.clone(),
                    flags: p.role.flags(),
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model of `spec` from checkpoint tensors, checking names, flags and shapes.
    pub fn from_checkpoint(spec: &ModelSpec, ckpt: &Checkpoint) -> Result<Model> {
        spec.validate()?;
        let expected = layout(spec).0;
        for ((name, shape, role), t) in expected.iter().zip(&ckpt.tensors) {
            if *name != t.name {
                return Err(GpsError::Dimension(format!(
                    "checkpoint tensor '{}' found where model expects '{name}'",
                    t.name
                )));
            }
            if t.value.shape() != &shape[..] {
                return Err(GpsError::Dimension(format!(
                    "tensor '{name}': checkpoint shape {:?} vs model shape {shape:?}",
                    t.value.shape()
                )));
            }
            if t.flags != role.flags() {
                return Err(GpsError::Format(format!(
                    "tensor '{name}': flags {:#04b}, expected {:#04b}",
                    t.flags,
                    role.flags()
                )));
            }
        }
        if expected.len() != ckpt.tensors.len() {
            let first = expected
                .get(ckpt.tensors.len())
                .map(|e| e.0.clone())
                .or_else(|| ckpt.tensors.get(expected.len()).map(|t| t.name.clone()))
                .unwrap_or_default();
            return Err(GpsError::Dimension(format!(
                "checkpoint has {} tensors, model expects {} (first unmatched: '{first}')",
                ckpt.tensors.len(),
                expected.len()
            )));
        }
        let params = expected
            .into_iter()
            .zip(&ckpt.tensors)
            .map(|((name, _, role), t)| Param {
                name,
                value: t.value.clone(),
                role,
            })
            .collect();
        Ok(Model::assemble(spec.clone(), params))
    }

    /// Bitwise comparison of every parameter.
    pub fn bitwise_eq(&self, other: &Model) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.role == b.role && a.value.bitwise_eq(&b.value))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeuronEntry {
    /// Index into [`NeuronMap::matrices`].
    pub matrix: usize,
    pub neuron: usize,
    /// Flat row-major indices of this neuron's input connections.
    pub connections: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeuronMap {
    /// Selectable matrices `(name, shape)` in model order.
    pub matrices: Vec<(String, Vec<usize>)>,
    pub entries: Vec<NeuronEntry>,
}

impl NeuronMap {
    pub fn selectable_count(&self) -> usize {
        self.matrices
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn neuron_count(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub flags: u8,
    pub value: Tensor,
}

/// Named tensors in the `GPSW` file layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<CheckpointTensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.tensor_record(&t.name, t.flags, &t.value)?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.expect_magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let (name, flags, value) = r.tensor_record()?;
            tensors.push(CheckpointTensor { name, flags, value });
        }
        r.finish()?;
        Ok(Checkpoint { tensors })
    }

    /// FNV-1a over the serialized byte stream.
    pub fn digest(&self) -> Result<u64> {
        Ok(fnv1a(&self.to_bytes()?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path.as_ref(), bytes).map_err(|e| GpsError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let bytes = fs::read(path.as_ref()).map_err(|e| GpsError::io(&path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    model.to_checkpoint().save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<Model> {
    Model::from_checkpoint(spec, &Checkpoint::load(path)?)
}
