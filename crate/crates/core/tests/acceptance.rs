//! Acceptance gate: runs every criterion and prints one PASS/FAIL line each.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;

use gps_core::autodiff::{Graph, NodeId, Reduction};
use gps_core::data::{synth_task, SynthSpec};
use gps_core::harness::{self, RunConfig};
use gps_core::masked_train::{finetune, l0_distance, TrainConfig};
use gps_core::model::{Architecture, Checkpoint, Model, ModelSpec, NeuronMap};
use gps_core::rng::{substream, Rng};
use gps_core::selection::{
    scl_loss, select_layer_topfrac, select_magnitude, select_net_topfrac, select_neuron_topk,
    select_random, GradientSnapshot, RandomScheme, SelectionMask, DEFAULT_TAU,
};
use gps_core::sparse_delta::{apply_delta, export_delta, mask_distribution, SparseDelta};
use gps_core::Tensor;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| v.signum() * (0.1 + v.abs()))
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

const FD_STEP: f64 = 1e-5;

/// Five-point central difference with step `FD_STEP`.
fn derivative(f: impl Fn(f64) -> f64) -> f64 {
    let h = FD_STEP;
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

type OpBuilder = dyn Fn(&mut Graph, &[NodeId]) -> gps_core::Result<NodeId>;

/// Checks `sum(op(inputs) * R)` for a fixed random `R` against central differences.
fn check_op(build: &OpBuilder, inputs: &[Tensor], rng: &mut Rng) -> f64 {
    let mut probe = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| probe.param(t.clone())).collect();
    let out = build(&mut probe, &ids).unwrap();
    let weights = uniform(rng, probe.value(out).unwrap().shape(), -1.0, 1.0);
    let loss = |vals: &[Tensor]| -> (Graph, Vec<NodeId>, NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids).unwrap();
        let r = g.constant(weights.clone());
        let m = g.mul(out, r).unwrap();
        let l = g.sum(m).unwrap();
        (g, ids, l)
    };
    let (mut g, ids, l) = loss(inputs);
    g.backward(l).unwrap();
    let analytic: Vec<f64> = ids
        .iter()
        .flat_map(|&i| g.grad(i).unwrap().data().to_vec())
        .collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for (which, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let eval = |delta: f64| {
                let mut vals = inputs.to_vec();
                vals[which].data_mut()[e] += delta;
                let (g, _, l) = loss(&vals);
                g.value(l).unwrap().data()[0]
            };
            numeric.push(derivative(eval));
        }
    }
    rel_err(&analytic, &numeric)
}

type InputMaker = dyn Fn(&mut Rng) -> Vec<Tensor>;

fn op_suite() -> Vec<(&'static str, Box<OpBuilder>, Box<InputMaker>)> {
    let u = |shape: &'static [usize]| move |r: &mut Rng| uniform(r, shape, -1.0, 1.0);
    vec![
        ("matmul", Box::new(|g: &mut Graph, x: &[NodeId]| g.matmul(x[0], x[1])), Box::new(move |r: &mut Rng| vec![u(&[3, 4])(r), u(&[4, 2])(r)])),
        ("bmm", Box::new(|g: &mut Graph, x: &[NodeId]| g.bmm(x[0], x[1])), Box::new(move |r: &mut Rng| vec![u(&[2, 3, 4])(r), u(&[2, 4, 2])(r)])),
        ("add", Box::new(|g: &mut Graph, x: &[NodeId]| g.add(x[0], x[1])), Box::new(move |r: &mut Rng| vec![u(&[3, 4])(r), u(&[3, 4])(r)])),
        ("mul", Box::new(|g: &mut Graph, x: &[NodeId]| g.mul(x[0], x[1])), Box::new(move |r: &mut Rng| vec![u(&[3, 4])(r), u(&[3, 4])(r)])),
        ("add_bias", Box::new(|g: &mut Graph, x: &[NodeId]| g.add_bias(x[0], x[1])), Box::new(move |r: &mut Rng| vec![u(&[3, 4])(r), u(&[4])(r)])),
        ("add_channel_bias", Box::new(|g: &mut Graph, x: &[NodeId]| g.add_channel_bias(x[0], x[1])), Box::new(move |r: &mut Rng| vec![u(&[2, 3, 2, 2])(r), u(&[3])(r)])),
        ("scale", Box::new(|g: &mut Graph, x: &[NodeId]| g.scale(x[0], 1.7)), Box::new(move |r: &mut Rng| vec![u(&[3, 4])(r)])),
        ("conv2d same", Box::new(|g: &mut Graph, x: &[NodeId]| g.conv2d(x[0], x[1], 1, 1)), Box::new(move |r: &mut Rng| vec![u(&[2, 2, 4, 4])(r), u(&[3, 2, 3, 3])(r)])),
        ("conv2d strided", Box::new(|g: &mut Graph, x: &[NodeId]| g.conv2d(x[0], x[1], 2, 0)), Box::new(move |r: &mut Rng| vec![u(&[1, 2, 5, 5])(r), u(&[2, 2, 3, 3])(r)])),
        ("layer_norm", Box::new(|g: &mut Graph, x: &[NodeId]| g.layer_norm(x[0], x[1], x[2], 1e-5)), Box::new(move |r: &mut Rng| vec![u(&[3, 5])(r), u(&[5])(r), u(&[5])(r)])),
        ("relu", Box::new(|g: &mut Graph, x: &[NodeId]| g.relu(x[0])), Box::new(move |r: &mut Rng| vec![away_from_zero(u(&[3, 4])(r))])),
        ("gelu", Box::new(|g: &mut Graph, x: &[NodeId]| g.gelu(x[0])), Box::new(move |r: &mut Rng| vec![u(&[3, 4])(r)])),
        ("softmax", Box::new(|g: &mut Graph, x: &[NodeId]| g.softmax(x[0])), Box::new(move |r: &mut Rng| vec![u(&[3, 4])(r)])),
        ("reshape", Box::new(|g: &mut Graph, x: &[NodeId]| g.reshape(x[0], &[2, 6])), Box::new(move |r: &mut Rng| vec![u(&[3, 4])(r)])),
        ("permute", Box::new(|g: &mut Graph, x: &[NodeId]| g.permute(x[0], &[2, 0, 1])), Box::new(move |r: &mut Rng| vec![u(&[2, 3, 4])(r)])),
        ("mean_axis", Box::new(|g: &mut Graph, x: &[NodeId]| g.mean_axis(x[0], 1)), Box::new(move |r: &mut Rng| vec![u(&[2, 3, 4])(r)])),
        ("sum", Box::new(|g: &mut Graph, x: &[NodeId]| g.sum(x[0])), Box::new(move |r: &mut Rng| vec![u(&[3, 4])(r)])),
        ("cross_entropy mean", Box::new(|g: &mut Graph, x: &[NodeId]| g.softmax_cross_entropy(x[0], &[0, 2, 1, 2], Reduction::Mean)), Box::new(move |r: &mut Rng| vec![u(&[4, 3])(r)])),
        ("cross_entropy sum", Box::new(|g: &mut Graph, x: &[NodeId]| g.softmax_cross_entropy(x[0], &[1, 1, 0, 2], Reduction::Sum)), Box::new(move |r: &mut Rng| vec![u(&[4, 3])(r)])),
        ("scl", Box::new(|g: &mut Graph, x: &[NodeId]| scl_loss(g, x[0], &[0, 1, 0, 2, 1, 2], DEFAULT_TAU)), Box::new(move |r: &mut Rng| vec![u(&[6, 3])(r)])),
    ]
}

fn mlp_loss(model: &Model, x: &Tensor, y: &[usize], scl: bool) -> (f64, Vec<f64>) {
    let mut pass = model.forward_graph(x, |_| true).unwrap();
    let l = if scl {
        scl_loss(&mut pass.graph, pass.embedding, y, DEFAULT_TAU).unwrap()
    } else {
        pass.graph
            .softmax_cross_entropy(pass.logits, y, Reduction::Mean)
            .unwrap()
    };
    let value = pass.graph.value(l).unwrap().data()[0];
    pass.graph.backward(l).unwrap();
    let grads = pass
        .params
        .iter()
        .flat_map(|&p| pass.graph.grad(p).unwrap().data().to_vec())
        .collect();
    (value, grads)
}

/// Hidden pre-activations within reach of the difference stencil of zero.
fn near_kink(model: &Model, x: &Tensor) -> bool {
    let w = &model.param("layers.0.weight").unwrap().value;
    let b = &model.param("layers.0.bias").unwrap().value;
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    x.data().chunks(d_in).any(|row| {
        (0..d_out).any(|j| {
            let a: f64 = b.data()[j] + (0..d_in).map(|i| row[i] * w.data()[i * d_out + j]).sum::<f64>();
            a.abs() < 1e-3
        })
    })
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = substream(1, "acceptance-gradcheck");
    let mut worst: (f64, &str) = (0.0, "");
    let suite = op_suite();
    for _ in 0..100 {
        for (name, build, inputs) in &suite {
            let inputs = inputs(&mut rng);
            let e = check_op(build.as_ref(), &inputs, &mut rng);
            if e > worst.0 {
                worst = (e, name);
            }
        }
    }
    let mut worst_e2e = 0.0f64;
    let y = [0, 1, 2, 0, 1, 2, 0, 1];
    for trial in 0..100u64 {
        for scl in [false, true] {
            let model = Model::build(&ModelSpec::mlp(5, &[6], 3, trial)).unwrap();
            let x = loop {
                let x = uniform(&mut rng, &[8, 5], -1.5, 1.5);
                if !near_kink(&model, &x) {
                    break x;
                }
            };
            let (_, analytic) = mlp_loss(&model, &x, &y, scl);
            let mut numeric = Vec::with_capacity(analytic.len());
            for pi in 0..model.params().len() {
                for e in 0..model.params()[pi].value.numel() {
                    let eval = |delta: f64| {
                        let mut m = model.clone();
                        m.params_mut()[pi].value.data_mut()[e] += delta;
                        mlp_loss(&m, &x, &y, scl).0
                    };
                    numeric.push(derivative(eval));
                }
            }
            worst_e2e = worst_e2e.max(rel_err(&analytic, &numeric));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst.0 < 1e-6, || format!("op {} rel err {:.2e}", worst.1, worst.0))?;
    ensure(worst_e2e < 1e-6, || format!("end-to-end rel err {worst_e2e:.2e}"))?;
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} ops + MLP/CE + MLP/SCL x100 trials, max rel err {:.1e} (op), {:.1e} (end-to-end), {secs:.1}s",
        suite.len(),
        worst.0,
        worst_e2e
    ))
}

// --- brute-force selection oracles -----------------------------------------

/// `true` when entry `a` outranks entry `b`: larger magnitude, then lower position.
fn beats(va: f64, a: usize, vb: f64, b: usize) -> bool {
    va.abs() > vb.abs() || (va.abs() == vb.abs() && a < b)
}

fn oracle_per_neuron(map: &NeuronMap, values: &[Vec<f64>], k: usize) -> Vec<Vec<bool>> {
    let mut out: Vec<Vec<bool>> = values.iter().map(|v| vec![false; v.len()]).collect();
    for e in &map.entries {
        let v = &values[e.matrix];
        for &c in &e.connections {
            let rank = e
                .connections
                .iter()
                .filter(|&&o| o != c && beats(v[o], o, v[c], c))
                .count();
            out[e.matrix][c] = rank < k;
        }
    }
    out
}

fn ceil_percent(pct: u64, n: usize) -> usize {
    (pct as usize * n).div_ceil(100)
}

fn oracle_global(values: &[Vec<f64>], count: usize) -> Vec<Vec<bool>> {
    let flat: Vec<f64> = values.iter().flatten().copied().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| {
        if beats(flat[a], a, flat[b], b) {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Greater
        }
    });
    let mut keep = vec![false; flat.len()];
    order.iter().take(count).for_each(|&i| keep[i] = true);
    let mut out = Vec::new();
    let mut offset = 0;
    for v in values {
        out.push(keep[offset..offset + v.len()].to_vec());
        offset += v.len();
    }
    out
}

fn random_values(rng: &mut Rng, n: usize, discrete: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if discrete {
                rng.random_range(-3i32..=3) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect()
}

fn bits(mask: &SelectionMask) -> Vec<Vec<bool>> {
    mask.matrices.iter().map(|m| m.bits.clone()).collect()
}

fn criterion_oracles() -> Outcome {
    let mut spent = std::time::Duration::ZERO;
    let mut timed = |f: &mut dyn FnMut() -> gps_core::Result<SelectionMask>| -> Result<Vec<Vec<bool>>, String> {
        let t = Instant::now();
        let m = f().map_err(|e| e.to_string())?;
        spent += t.elapsed();
        Ok(bits(&m))
    };
    let mut rng = substream(2, "acceptance-oracles");
    let mut checks = 0;
    for trial in 0..100 {
        let dims: Vec<usize> = (0..3).map(|_| rng.random_range(1..=64)).collect();
        let mut model = Model::build(&ModelSpec::mlp(dims[0], &dims[1..], 2, trial)).unwrap();
        let map = model.enumerate_neurons();
        let discrete = trial % 2 == 0;
        let grads: Vec<Vec<f64>> = map
            .matrices
            .iter()
            .map(|(_, s)| random_values(&mut rng, s.iter().product(), discrete))
            .collect();
        let snapshot = GradientSnapshot::from_matrices(
            map.matrices
                .iter()
                .zip(&grads)
                .map(|((n, s), g)| (n.clone(), Tensor::new(s.clone(), g.clone()).unwrap()))
                .collect(),
        );
        let names: Vec<String> = map.matrices.iter().map(|(n, _)| n.clone()).collect();
        let weights: Vec<Vec<f64>> = map
            .matrices
            .iter()
            .map(|(_, s)| random_values(&mut rng, s.iter().product(), !discrete))
            .collect();
        for (name, w) in names.iter().zip(&weights) {
            let p = model.param_mut(name).unwrap();
            p.value = Tensor::new(p.value.shape().to_vec(), w.clone()).unwrap();
        }
        for k in [1, 2, 3] {
            let got = timed(&mut || select_neuron_topk(&snapshot, &map, k))?;
            ensure(got == oracle_per_neuron(&map, &grads, k), || {
                format!("neuron-topk trial {trial} K={k} differs from oracle")
            })?;
            let got = timed(&mut || select_magnitude(&model, &map, k))?;
            ensure(got == oracle_per_neuron(&map, &weights, k), || {
                format!("magnitude trial {trial} K={k} differs from oracle")
            })?;
            checks += 2;
        }
        let total: usize = grads.iter().map(Vec::len).sum();
        for pct in [1u64, 10, 50] {
            let p = pct as f64 / 100.0;
            let got = timed(&mut || select_net_topfrac(&snapshot, p))?;
            ensure(got == oracle_global(&grads, ceil_percent(pct, total)), || {
                format!("net-topfrac trial {trial} p={p} differs from oracle")
            })?;
            let got = timed(&mut || select_layer_topfrac(&snapshot, p))?;
            let want: Vec<Vec<bool>> = grads
                .iter()
                .map(|g| oracle_global(std::slice::from_ref(g), ceil_percent(pct, g.len())).remove(0))
                .collect();
            ensure(got == want, || format!("layer-topfrac trial {trial} p={p} differs from oracle"))?;
            checks += 2;
        }
    }
    let secs = spent.as_secs_f64();
    ensure(secs < 10.0, || format!("selection took {secs:.1}s"))?;
    Ok(format!("{checks} masks equal rank oracles, selection time {secs:.2}s"))
}

// --- pipeline helpers -------------------------------------------------------

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn shipped_config(name: &str) -> RunConfig {
    let path = manifest_dir().join("../../configs").join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn small_config(out: &Path, extra: &str) -> RunConfig {
    let text = format!(
        "seed = 3\nout = {}\nmodel.hidden = 12,12\ndata.dim = 6\ndata.classes = 3\n\
         data.samples_per_class = 30\ndata.separation = 2\ntrain.lr = 0.01\ntrain.epochs = 8\n\
         train.warmup_epochs = 1\ntrain.batch_size = 16\nselect.k = 2\n{extra}",
        out.display()
    );
    RunConfig::parse(&text).unwrap()
}

fn set(cfg: &mut RunConfig, key: &str, value: impl ToString) {
    cfg.set(key, &value.to_string()).unwrap();
}

fn criterion_frozen_exactness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut src = small_config(&dir.path().join("src"), "");
    set(&mut src, "train.epochs", 5);
    let pre = harness::run_pretrain(&src).map_err(|e| e.to_string())?;
    let mut tgt = small_config(&dir.path().join("tgt"), "data.shift = 1.5\ntrain.weight_decay = 0.1\n");
    set(&mut tgt, "base", pre.checkpoint.display());
    set(&mut tgt, "train.epochs", 50);
    set(&mut tgt, "train.warmup_epochs", 5);
    let sel = harness::run_select(&tgt).map_err(|e| e.to_string())?;
    set(&mut tgt, "mask", sel.mask_path.display());
    let out = harness::run_finetune(&tgt).map_err(|e| e.to_string())?;
    ensure(out.history.len() == 50, || format!("{} epochs recorded", out.history.len()))?;
    let base = Checkpoint::load(&pre.checkpoint).map_err(|e| e.to_string())?;
    let tuned = Checkpoint::load(&out.checkpoint).map_err(|e| e.to_string())?;
    let mut frozen = 0usize;
    let mut l0 = 0usize;
    for t in &tuned.tensors {
        if t.name.starts_with("head.") {
            continue;
        }
        let b = base.get(&t.name).ok_or("tensor missing from base")?;
        let mask_bits = sel.mask.matrix(&t.name).map(|m| &m.bits);
        for (i, (x, y)) in b.value.data().iter().zip(t.value.data()).enumerate() {
            let selected = mask_bits.is_some_and(|m| m[i]);
            if x.to_bits() != y.to_bits() {
                l0 += 1;
                ensure(selected, || format!("frozen entry {}[{i}] moved", t.name))?;
            } else if !selected {
                frozen += 1;
            }
        }
    }
    let popcount = sel.mask.popcount();
    ensure(l0 <= popcount, || format!("L0 {l0} > popcount {popcount}"))?;
    Ok(format!(
        "50 masked-Adam epochs (wd 0.1): {frozen} frozen entries bitwise equal, L0 {l0} <= popcount {popcount}"
    ))
}

fn criterion_neuron_counts() -> Outcome {
    let specs = [
        ModelSpec::mlp(16, &[32, 32], 4, 1),
        ModelSpec {
            arch: Architecture::Cnn {
                channels: vec![4, 6],
                kernel: 3,
            },
            input_shape: vec![2, 5, 5],
            classes: 3,
            seed: 2,
        },
        ModelSpec {
            arch: Architecture::TinyTransformer {
                dim: 16,
                heads: 4,
                depth: 1,
                mlp_ratio: 2,
            },
            input_shape: vec![4, 6],
            classes: 3,
            seed: 3,
        },
    ];
    let mut rng = substream(4, "acceptance-counts");
    let mut summary = Vec::new();
    for spec in &specs {
        let model = Model::build(spec).unwrap();
        let map = model.enumerate_neurons();
        let snapshot = GradientSnapshot::from_matrices(
            map.matrices
                .iter()
                .map(|(n, s)| (n.clone(), uniform(&mut rng, s, -1.0, 1.0)))
                .collect(),
        );
        let mut counts = Vec::new();
        for k in 1..=15 {
            let mask = select_neuron_topk(&snapshot, &map, k).map_err(|e| e.to_string())?;
            for e in &map.entries {
                let ones = e.connections.iter().filter(|&&c| mask.matrices[e.matrix].bits[c]).count();
                ensure(ones == k.min(e.connections.len()), || {
                    format!("{}: neuron {} of matrix {} has {ones} ones at K={k}", spec.arch.name(), e.neuron, e.matrix)
                })?;
            }
            let expected: usize = map.entries.iter().map(|e| k.min(e.connections.len())).sum();
            ensure(mask.popcount() == expected, || format!("count {} != {expected}", mask.popcount()))?;
            counts.push(mask.popcount());
        }
        let min_fan = map.entries.iter().map(|e| e.connections.len()).min().unwrap();
        if min_fan >= 15 {
            let slope = counts[1] - counts[0];
            ensure(
                counts.iter().enumerate().all(|(i, &c)| c == counts[0] + i * slope),
                || format!("{}: counts {counts:?} not affine", spec.arch.name()),
            )?;
            ensure(slope == map.neuron_count(), || "slope != neuron count".into())?;
            summary.push(format!("{}: {} + {}·(K-1)", spec.arch.name(), counts[0], slope));
        } else {
            summary.push(format!("{}: min(K, fan_in) per neuron", spec.arch.name()));
        }
    }
    Ok(format!("K=1..15 exact; {}", summary.join("; ")))
}

fn criterion_transfer() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let names = ["neuron-topk", "neuron-random", "net-random", "linear-only", "full"];
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut slowest = 0.0f64;
    for seed in 0..3u64 {
        let mut src = shipped_config("source.conf");
        set(&mut src, "seed", seed);
        set(&mut src, "out", dir.path().join(format!("src{seed}")).display());
        let t = Instant::now();
        let pre = harness::run_pretrain(&src).map_err(|e| e.to_string())?;
        slowest = slowest.max(t.elapsed().as_secs_f64());
        let mut tgt = shipped_config("target.conf");
        set(&mut tgt, "seed", seed);
        set(&mut tgt, "out", dir.path().join(format!("tgt{seed}")).display());
        set(&mut tgt, "base", pre.checkpoint.display());
        set(&mut tgt, "compare.strategies", names.join(","));
        set(&mut tgt, "compare.k", 1);
        set(&mut tgt, "compare.seeds", 3);
        let cmp = harness::run_compare(&tgt).map_err(|e| e.to_string())?;
        let mut budgets = Vec::new();
        for row in &cmp.rows {
            let r = row.outcome.as_ref().map_err(|e| format!("{}: {e}", row.variant))?;
            slowest = slowest.max(r.seconds);
            let i = names.iter().position(|n| *n == row.variant.to_string()).unwrap();
            scores[i].push(r.val_acc);
            if i < 3 {
                budgets.push(r.params);
            }
        }
        ensure(budgets.iter().all(|&b| b == budgets[0]), || format!("budgets differ: {budgets:?}"))?;
    }
    let runs = scores[0].len();
    let m: Vec<f64> = scores.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let (gps, nr, netr, lin, full) = (m[0], m[1], m[2], m[3], m[4]);
    let line = format!(
        "mean val acc over {runs} runs: GPS {gps:.4}, neuron-random {nr:.4}, net-random {netr:.4}, linear {lin:.4}, full {full:.4}; slowest run {slowest:.1}s"
    );
    ensure(gps > nr, || format!("GPS <= neuron-random; {line}"))?;
    ensure(nr >= netr, || format!("neuron-random < net-random; {line}"))?;
    ensure(gps > lin, || format!("GPS <= linear; {line}"))?;
    ensure(full - gps <= 0.03, || format!("GPS more than 3 points below full; {line}"))?;
    ensure(slowest < 60.0, || format!("a run exceeded 60s; {line}"))?;
    Ok(line)
}

fn scl_value(z: &Tensor, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let n = g.constant(z.clone());
    let l = scl_loss(&mut g, n, labels, DEFAULT_TAU).unwrap();
    g.value(l).unwrap().data()[0]
}

fn criterion_scl() -> Outcome {
    let mut rng = substream(6, "acceptance-scl");
    let row = [0.3, -1.2, 0.5, 2.0];
    let pair = Tensor::new(vec![2, 4], row.iter().chain(&row).copied().collect()).unwrap();
    let zero = scl_value(&pair, &[1, 1]);
    ensure(zero.abs() <= 1e-12, || format!("identical pair loss {zero:e}"))?;
    let (b, d) = (8, 5);
    let labels = [0, 1, 2, 0, 1, 2, 0, 1];
    let mut worst_perm = 0.0f64;
    let mut worst_rot = 0.0f64;
    for _ in 0..20 {
        let z = uniform(&mut rng, &[b, d], -1.0, 1.0);
        let base = scl_value(&z, &labels);
        let mut order: Vec<usize> = (0..b).collect();
        for i in (1..b).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permuted = z.select_rows(&order);
        let plabels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        worst_perm = worst_perm.max((scl_value(&permuted, &plabels) - base).abs());
        // random orthogonal matrix by Gram-Schmidt
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-3 {
                q.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        let rotated: Vec<f64> = (0..b)
            .flat_map(|i| {
                let zi = &z.data()[i * d..(i + 1) * d];
                q.iter().map(move |qr| qr.iter().zip(zi).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect();
        let rotated = Tensor::new(vec![b, d], rotated).unwrap();
        worst_rot = worst_rot.max((scl_value(&rotated, &labels) - base).abs());
    }
    ensure(worst_perm <= 1e-12, || format!("permutation changed loss by {worst_perm:e}"))?;
    ensure(worst_rot <= 1e-9, || format!("rotation changed loss by {worst_rot:e}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let src = small_config(&dir.path().join("src"), "");
    let pre = harness::run_pretrain(&src).map_err(|e| e.to_string())?;
    let mut tgt = small_config(&dir.path().join("cmp"), "data.shift = 1.0\n");
    set(&mut tgt, "base", pre.checkpoint.display());
    set(&mut tgt, "compare.strategies", "neuron-topk,neuron-topk+ce");
    set(&mut tgt, "compare.k", 1);
    let cmp = harness::run_compare(&tgt).map_err(|e| e.to_string())?;
    let ce_row = cmp
        .rows
        .iter()
        .find(|r| r.variant.ce)
        .ok_or("no Head+CE row")?;
    let r = ce_row.outcome.as_ref().map_err(|e| e.clone())?;
    let mask = SelectionMask::load(dir.path().join("cmp/rows/neuron-topk+ce_k1_s3/mask.gpsm"))
        .map_err(|e| e.to_string())?;
    let base = harness::load_base(&tgt, &pre.checkpoint).map_err(|e| e.to_string())?;
    let map = base.enumerate_neurons();
    ensure(mask.popcount() == map.neuron_count(), || "Head+CE mask is not one per neuron".into())?;
    Ok(format!(
        "identical pair {zero:.1e}, permutation {worst_perm:.1e}, rotation {worst_rot:.1e}; Head+CE row val acc {:.4} with {} params",
        r.val_acc, r.params
    ))
}

fn criterion_scale_invariance() -> Outcome {
    let mut rng = substream(7, "acceptance-scale");
    let mut compared = 0;
    for trial in 0..50 {
        let dims: Vec<usize> = (0..3).map(|_| rng.random_range(2..=40)).collect();
        let model = Model::build(&ModelSpec::mlp(dims[0], &dims[1..], 2, trial)).unwrap();
        let map = model.enumerate_neurons();
        let snapshot = GradientSnapshot::from_matrices(
            map.matrices
                .iter()
                .map(|(n, s)| (n.clone(), uniform(&mut rng, s, -1.0, 1.0)))
                .collect(),
        );
        let scaled = snapshot.scaled(1e3);
        for k in [1, 2, 3, 7] {
            let a = select_neuron_topk(&snapshot, &map, k).unwrap();
            let b = select_neuron_topk(&scaled, &map, k).unwrap();
            ensure(bits(&a) == bits(&b), || format!("neuron-topk K={k} changed"))?;
            compared += 1;
        }
        for p in [0.01, 0.1, 0.5] {
            ensure(
                bits(&select_net_topfrac(&snapshot, p).unwrap()) == bits(&select_net_topfrac(&scaled, p).unwrap()),
                || format!("net-topfrac p={p} changed"),
            )?;
            ensure(
                bits(&select_layer_topfrac(&snapshot, p).unwrap()) == bits(&select_layer_topfrac(&scaled, p).unwrap()),
                || format!("layer-topfrac p={p} changed"),
            )?;
            compared += 2;
        }
    }
    Ok(format!("{compared} mask pairs bitwise identical under x1e3 scaling"))
}

fn criterion_delta_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut total_entries = 0;
    for run in 0..10u64 {
        let mut rng = substream(run, "acceptance-delta");
        let hidden: Vec<usize> = (0..2).map(|_| rng.random_range(3..=12)).collect();
        let mut s = SynthSpec::blobs(rng.random_range(2..=8), rng.random_range(2..=4), 20, run);
        s.separation = 2.0;
        let (train, val, _) = synth_task(&s).map_err(|e| e.to_string())?;
        let base = Model::build(&ModelSpec::mlp(s.dim, &hidden, 5, run)).unwrap();
        let working = base.with_new_head(s.classes, run + 100).unwrap();
        let map = working.enumerate_neurons();
        let mask = select_random(&map, RandomScheme::Neuron { k: 1 + run as usize % 3 }, run).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            warmup_epochs: 1,
            base_lr: 0.01,
            weight_decay: 0.05 * run as f64,
            batch_size: 8,
            seed: run,
            ..TrainConfig::default()
        };
        let (tuned, _) = finetune(&working, &mask, &train, &val, &cfg).map_err(|e| e.to_string())?;
        let delta = export_delta(&base, &tuned, &mask).map_err(|e| e.to_string())?;
        ensure(delta.entries.len() == mask.popcount(), || "entry count != popcount".into())?;
        let path = dir.path().join(format!("d{run}.gpsd"));
        delta.save(&path).map_err(|e| e.to_string())?;
        let loaded = SparseDelta::load(&path).map_err(|e| e.to_string())?;
        let rebuilt = apply_delta(&base, &loaded).map_err(|e| e.to_string())?;
        ensure(rebuilt.bitwise_eq(&tuned), || format!("run {run}: rebuilt model differs"))?;
        ensure(
            rebuilt.to_checkpoint().to_bytes().unwrap() == tuned.to_checkpoint().to_bytes().unwrap(),
            || format!("run {run}: checkpoint bytes differ"),
        )?;
        ensure(l0_distance(&working, &tuned) <= mask.popcount(), || "L0 bound violated".into())?;
        total_entries += delta.entries.len();
    }
    Ok(format!("10 randomized runs reproduced bitwise ({total_entries} delta entries total)"))
}

/// Every file under `dir`, with timing columns blanked in CSV tables.
fn snapshot_outputs(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let mut bytes = fs::read(&p).unwrap();
            if p.file_name().is_some_and(|n| n == "results.csv") {
                let text = String::from_utf8(bytes).unwrap();
                bytes = text
                    .lines()
                    .map(|l| {
                        let mut cols: Vec<&str> = l.split(',').collect();
                        if cols.len() > 7 {
                            cols[7] = "";
                        }
                        cols.join(",") + "\n"
                    })
                    .collect::<String>()
                    .into_bytes();
            }
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
        }
    }
    out.sort();
    out
}

fn criterion_determinism() -> Outcome {
    let run_all = |root: &Path| -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
        let e = |e: gps_core::GpsError| e.to_string();
        let src = small_config(&root.join("pretrain"), "");
        let pre = harness::run_pretrain(&src).map_err(e)?;
        let mut tgt = small_config(&root.join("select"), "data.shift = 1.0\n");
        set(&mut tgt, "base", pre.checkpoint.display());
        let sel = harness::run_select(&tgt).map_err(e)?;
        set(&mut tgt, "out", root.join("finetune").display());
        set(&mut tgt, "mask", sel.mask_path.display());
        let ft = harness::run_finetune(&tgt).map_err(e)?;
        let mut ev = tgt.clone();
        set(&mut ev, "out", root.join("eval").display());
        set(&mut ev, "checkpoint", ft.checkpoint.display());
        harness::run_eval(&ev).map_err(e)?;
        let mut cmp = tgt.clone();
        set(&mut cmp, "out", root.join("compare").display());
        set(&mut cmp, "mask", "");
        set(&mut cmp, "compare.strategies", "neuron-topk,net-topfrac,net-random,neuron-random,magnitude");
        set(&mut cmp, "compare.k", "1,2");
        set(&mut cmp, "train.epochs", 3);
        harness::run_compare(&cmp).map_err(e)?;
        let mut rep = tgt.clone();
        set(&mut rep, "out", root.join("report").display());
        set(&mut rep, "report.kind", "overlap");
        set(
            &mut rep,
            "report.masks",
            format!(
                "{},{}",
                sel.mask_path.display(),
                root.join("compare/rows/net-random_k1_s3/mask.gpsm").display()
            ),
        );
        harness::run_report(&rep).map_err(e)?;
        Ok(snapshot_outputs(root))
    };
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_all(a.path())?;
    fs::remove_dir_all(a.path()).map_err(|e| e.to_string())?;
    let second = run_all(a.path())?;
    ensure(first.len() == second.len(), || "different file sets".into())?;
    for ((p, x), (q, y)) in first.iter().zip(&second) {
        ensure(p == q && x == y, || format!("{} differs between runs", p.display()))?;
    }
    let bytes: usize = first.iter().map(|(_, b)| b.len()).sum();
    Ok(format!(
        "pretrain/select/finetune/eval/compare/report twice: {} files, {bytes} bytes identical",
        first.len()
    ))
}

fn criterion_reports() -> Outcome {
    let width = 8;
    let model = Model::build(&ModelSpec::mlp(width, &[width, width], 4, 5)).unwrap();
    let map = model.enumerate_neurons();
    let mut rng = substream(10, "acceptance-reports");
    let last = map.matrices.len() - 1;
    let snapshot = GradientSnapshot::from_matrices(
        map.matrices
            .iter()
            .enumerate()
            .map(|(i, (n, s))| {
                let scale = if i == last { 10.0 } else { 1.0 };
                (n.clone(), uniform(&mut rng, s, 0.1, 1.0).map(|v| v * scale))
            })
            .collect(),
    );
    let topk = select_neuron_topk(&snapshot, &map, 1).unwrap();
    let p = topk.popcount() as f64 / map.selectable_count() as f64;
    let net = select_net_topfrac(&snapshot, p).unwrap();
    let net_rows = mask_distribution(&net, &model).unwrap();
    let top_rows = mask_distribution(&topk, &model).unwrap();
    let final_share = net_rows.last().unwrap().fraction;
    ensure(final_share >= 0.9, || format!("net-topfrac final-block share {final_share:.3}"))?;
    let per_block: Vec<usize> = top_rows.iter().map(|r| r.selected).collect();
    ensure(per_block.iter().all(|&c| c == width), || format!("neuron-topk histogram {per_block:?}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("base.gpsw");
    model.to_checkpoint().save(&ckpt).unwrap();
    let (a, b) = (dir.path().join("net.gpsm"), dir.path().join("topk.gpsm"));
    net.save(&a).unwrap();
    topk.save(&b).unwrap();
    let mut cfg = RunConfig::parse(&format!(
        "out = {}\nbase = {}\ndata.dim = {width}\nmodel.hidden = {width},{width}\nreport.kind = distribution\nreport.masks = {},{}\n",
        dir.path().join("dist").display(),
        ckpt.display(),
        a.display(),
        b.display()
    ))
    .unwrap();
    let dist = harness::run_report(&cfg).map_err(|e| e.to_string())?;
    ensure(dist.lines().count() == 1 + 2 * net_rows.len(), || "distribution report rows".into())?;
    set(&mut cfg, "out", dir.path().join("overlap").display());
    set(&mut cfg, "report.kind", "overlap");
    set(&mut cfg, "report.masks", format!("{},{}", b.display(), b.display()));
    let overlap = harness::run_report(&cfg).map_err(|e| e.to_string())?;
    let total = overlap.lines().nth(1).ok_or("empty overlap report")?;
    let jaccard: f64 = total.split(',').nth(3).ok_or("no jaccard")?.parse().map_err(|_| "bad jaccard")?;
    ensure(jaccard == 1.0, || format!("self-overlap jaccard {jaccard}"))?;
    Ok(format!(
        "net-topfrac puts {:.1}% in the final block, neuron-topk histogram {per_block:?}, self-overlap jaccard {jaccard}",
        100.0 * final_share
    ))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("gradient correctness", criterion_gradients),
        ("selection oracle equivalence", criterion_oracles),
        ("frozen-complement exactness", criterion_frozen_exactness),
        ("per-neuron counts and linearity in K", criterion_neuron_counts),
        ("desk-scale transfer ordering", criterion_transfer),
        ("contrastive loss properties", criterion_scl),
        ("scale invariance of selection", criterion_scale_invariance),
        ("delta round trip", criterion_delta_round_trip),
        ("determinism", criterion_determinism),
        ("reports", criterion_reports),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS [{secs:.1}s] {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL [{secs:.1}s] {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
