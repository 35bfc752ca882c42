//! A fine-tuned task stored as absolute values at its trainable positions
//! on top of a shared base checkpoint, plus cross-mask statistics.

use std::fs;
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{GpsError, Result};
use crate::masked_train::training_scopes;
use crate::model::{block_of, Model};
use crate::selection::SelectionMask;
use crate::tensor::Tensor;

const DELTA_MAGIC: &[u8; 4] = b"GPSD";
const DELTA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaEntry {
    pub tensor: String,
    pub index: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTensor {
    pub name: String,
    pub flags: u8,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseDelta {
    pub base_digest: u64,
    /// Sorted by (model parameter order, flat index); no duplicates.
    pub entries: Vec<DeltaEntry>,
    pub head: Vec<HeadTensor>,
}

fn same_backbone(a: &Model, b: &Model) -> bool {
    a.spec().arch == b.spec().arch
        && a.spec().input_shape == b.spec().input_shape
        && a.params().len() == b.params().len()
        && a
            .params()
            .iter()
            .zip(b.params())
            .all(|(p, q)| p.name == q.name && (p.role.is_head() || p.value.shape() == q.value.shape()))
}

pub fn base_digest(base: &Model) -> Result<u64> {
    base.to_checkpoint().digest()
}

/// Records every position `mask` lets train. The heads of `base` and `tuned`
/// may differ in class count.
pub fn export_delta(base: &Model, tuned: &Model, mask: &SelectionMask) -> Result<SparseDelta> {
    if !same_backbone(base, tuned) {
        return Err(GpsError::Contract(
            "base and tuned models do not share a backbone".into(),
        ));
    }
    let scopes = training_scopes(base, mask, false)?;
    let mut entries = Vec::new();
    let mut head = Vec::new();
    for ((b, t), scope) in base.params().iter().zip(tuned.params()).zip(&scopes) {
        if b.role.is_head() {
            head.push(HeadTensor {
                name: t.name.clone(),
                flags: t.role.flags(),
                value: t.value.clone(),
            });
            continue;
        }
        for (i, (x, y)) in b.value.data().iter().zip(t.value.data()).enumerate() {
            if scope.is_trainable(i) {
                entries.push(DeltaEntry {
                    tensor: b.name.clone(),
                    index: i,
                    value: *y,
                });
            } else if x.to_bits() != y.to_bits() {
                return Err(GpsError::Integrity(format!(
                    "tuned model changed frozen entry {}[{i}]",
                    b.name
                )));
            }
        }
    }
    Ok(SparseDelta {
        base_digest: base_digest(base)?,
        entries,
        head,
    })
}

/// Rebuilds the tuned model; `base` itself is left untouched.
pub fn apply_delta(base: &Model, delta: &SparseDelta) -> Result<Model> {
    let digest = base_digest(base)?;
    if digest != delta.base_digest {
        return Err(GpsError::Compatibility(format!(
            "delta was exported against base {:016x}, got {digest:016x}",
            delta.base_digest
        )));
    }
    let classes = match delta.head.iter().find(|h| h.name == "head.bias") {
        Some(h) => h.value.numel(),
        None => base.spec().classes,
    };
    let mut out = if classes == base.spec().classes {
        base.clone()
    } else {
        base.with_new_head(classes, 0)?
    };
    for e in &delta.entries {
        let p = out
            .param_mut(&e.tensor)
            .filter(|p| !p.role.is_head())
            .ok_or_else(|| GpsError::Format(format!("delta names unknown tensor '{}'", e.tensor)))?;
        let n = p.value.numel();
        let slot = p.value.data_mut().get_mut(e.index).ok_or_else(|| {
            GpsError::Format(format!(
                "delta index {} out of range for '{}' ({n} entries)",
                e.index, e.tensor
            ))
        })?;
        *slot = e.value;
    }
    for h in &delta.head {
        let p = out
            .param_mut(&h.name)
            .filter(|p| p.role.is_head())
            .ok_or_else(|| GpsError::Format(format!("delta head block names '{}'", h.name)))?;
        if p.value.shape() != h.value.shape() {
            return Err(GpsError::Format(format!(
                "delta head '{}' has shape {:?}, model expects {:?}",
                h.name,
                h.value.shape(),
                p.value.shape()
            )));
        }
        p.value = h.value.clone();
    }
    Ok(out)
}

impl SparseDelta {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut names: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !names.contains(&e.tensor.as_str()) {
                names.push(&e.tensor);
            }
        }
        let mut w = Writer::new();
        w.bytes(DELTA_MAGIC);
        w.u32(DELTA_VERSION);
        w.u64(self.base_digest);
        w.u64(self.entries.len() as u64);
        w.u32(names.len() as u32);
        for n in &names {
            w.name(n)?;
        }
        for e in &self.entries {
            let id = names.iter().position(|n| *n == e.tensor).expect("collected above");
            w.u32(id as u32);
            w.u64(e.index as u64);
            w.f64(e.value);
        }
        w.u32(self.head.len() as u32);
        for h in &self.head {
            w.tensor_record(&h.name, h.flags, &h.value)?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SparseDelta> {
        let mut r = Reader::new(bytes, "delta");
        r.expect_magic(DELTA_MAGIC, DELTA_VERSION)?;
        let base_digest = r.u64()?;
        let count = r.u64()?;
        if count.checked_mul(20).is_none_or(|b| b > r.remaining() as u64) {
            return Err(GpsError::Format(format!(
                "delta: {count} entries exceed file size"
            )));
        }
        let name_count = r.u32()?;
        let names = (0..name_count).map(|_| r.name()).collect::<Result<Vec<_>>>()?;
        let mut entries: Vec<DeltaEntry> = Vec::with_capacity(count as usize);
        let mut last: Option<(u32, u64)> = None;
        for _ in 0..count {
            let id = r.u32()?;
            let index = r.u64()?;
            let value = r.f64()?;
            let tensor = names
                .get(id as usize)
                .ok_or_else(|| GpsError::Format(format!("delta: name id {id} out of range")))?;
            if last.is_some_and(|prev| prev >= (id, index)) {
                return Err(GpsError::Format(format!(
                    "delta: entries not strictly sorted at {tensor}[{index}]"
                )));
            }
            last = Some((id, index));
            let index = usize::try_from(index)
                .map_err(|_| GpsError::Format(format!("delta: index {index} too large")))?;
            entries.push(DeltaEntry {
                tensor: tensor.clone(),
                index,
                value,
            });
        }
        let heads = r.u32()?;
        let mut head = Vec::new();
        for _ in 0..heads {
            let (name, flags, value) = r.tensor_record()?;
            head.push(HeadTensor { name, flags, value });
        }
        r.finish()?;
        Ok(SparseDelta {
            base_digest,
            entries,
            head,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_bytes()?).map_err(|e| GpsError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SparseDelta> {
        let bytes = fs::read(path.as_ref()).map_err(|e| GpsError::io(&path, e))?;
        SparseDelta::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// Mask statistics

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlapRow {
    pub name: String,
    pub shared: usize,
    pub only_a: usize,
    pub only_b: usize,
}

impl OverlapRow {
    pub fn union(&self) -> usize {
        self.shared + self.only_a + self.only_b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskOverlap {
    /// `|a ∧ b| / |a ∨ b|`; 1 when both masks are empty.
    pub jaccard: f64,
    pub total: OverlapRow,
    pub matrices: Vec<OverlapRow>,
    pub blocks: Vec<OverlapRow>,
}

fn check_same_layout(a: &SelectionMask, b: &SelectionMask) -> Result<()> {
    let same = a.matrices.len() == b.matrices.len()
        && a
            .matrices
            .iter()
            .zip(&b.matrices)
            .all(|(x, y)| x.name == y.name && x.shape == y.shape);
    if same {
        Ok(())
    } else {
        Err(GpsError::Contract("masks cover different models".into()))
    }
}

fn add_to(rows: &mut Vec<OverlapRow>, name: &str, row: &OverlapRow) {
    match rows.iter_mut().find(|r| r.name == name) {
        Some(r) => {
            r.shared += row.shared;
            r.only_a += row.only_a;
            r.only_b += row.only_b;
        }
        None => rows.push(OverlapRow {
            name: name.to_string(),
            ..row.clone()
        }),
    }
}

/// Position-wise overlap of two masks over the same model (head excluded).
pub fn mask_overlap(a: &SelectionMask, b: &SelectionMask) -> Result<MaskOverlap> {
    check_same_layout(a, b)?;
    let mut matrices = Vec::new();
    let mut blocks = Vec::new();
    let mut total = OverlapRow {
        name: "total".into(),
        shared: 0,
        only_a: 0,
        only_b: 0,
    };
    for (x, y) in a.matrices.iter().zip(&b.matrices) {
        let mut row = OverlapRow {
            name: x.name.clone(),
            shared: 0,
            only_a: 0,
            only_b: 0,
        };
        for (&p, &q) in x.bits.iter().zip(&y.bits) {
            match (p, q) {
                (true, true) => row.shared += 1,
                (true, false) => row.only_a += 1,
                (false, true) => row.only_b += 1,
                (false, false) => {}
            }
        }
        add_to(&mut blocks, block_of(&x.name), &row);
        total.shared += row.shared;
        total.only_a += row.only_a;
        total.only_b += row.only_b;
        matrices.push(row);
    }
    let jaccard = match total.union() {
        0 => 1.0,
        u => total.shared as f64 / u as f64,
    };
    Ok(MaskOverlap {
        jaccard,
        total,
        matrices,
        blocks,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCount {
    pub block: String,
    pub selected: usize,
    pub selectable: usize,
    /// Share of all selected parameters that sit in this block.
    pub fraction: f64,
}

/// Selected parameters grouped by block, in model order.
pub fn mask_distribution(mask: &SelectionMask, model: &Model) -> Result<Vec<BlockCount>> {
    mask.check_model(model)?;
    let mut rows: Vec<BlockCount> = Vec::new();
    for m in &mask.matrices {
        let block = block_of(&m.name);
        let (sel, size) = (m.popcount(), m.bits.len());
        match rows.iter_mut().find(|r| r.block == block) {
            Some(r) => {
                r.selected += sel;
                r.selectable += size;
            }
            None => rows.push(BlockCount {
                block: block.to_string(),
                selected: sel,
                selectable: size,
                fraction: 0.0,
            }),
        }
    }
    let total: usize = rows.iter().map(|r| r.selected).sum();
    for r in &mut rows {
        r.fraction = if total == 0 {
            0.0
        } else {
            r.selected as f64 / total as f64
        };
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::selection::{select_random, RandomScheme, Strategy};

    fn setup() -> (Model, SelectionMask) {
        let model = Model::build(&ModelSpec::mlp(4, &[5, 5], 3, 8)).unwrap();
        let mask = select_random(&model.enumerate_neurons(), RandomScheme::Net { count: 9 }, 1).unwrap();
        (model, mask)
    }

    fn perturb(model: &Model, mask: &SelectionMask) -> Model {
        let mut tuned = model.clone();
        for m in &mask.matrices {
            let p = tuned.param_mut(&m.name).unwrap();
            for (i, &b) in m.bits.iter().enumerate() {
                if b {
                    p.value.data_mut()[i] += 0.5 + i as f64;
                }
            }
        }
        tuned.param_mut("head.bias").unwrap().value.data_mut()[1] = 7.0;
        tuned
    }

    #[test]
    fn unchanged_model_exports_base_values() {
        let (model, mask) = setup();
        let d = export_delta(&model, &model, &mask).unwrap();
        assert_eq!(d.entries.len(), mask.popcount());
        for e in &d.entries {
            assert_eq!(e.value, model.param(&e.tensor).unwrap().value.data()[e.index]);
        }
        let empty = SelectionMask::empty(&model.enumerate_neurons(), Strategy::LinearOnly);
        let d = export_delta(&model, &model, &empty).unwrap();
        assert!(d.entries.is_empty());
        assert_eq!(d.head.len(), 2);
        assert!(apply_delta(&model, &d).unwrap().bitwise_eq(&model));
    }

    #[test]
    fn round_trip_and_idempotence() {
        let (model, mask) = setup();
        let tuned = perturb(&model, &mask);
        let d = export_delta(&model, &tuned, &mask).unwrap();
        let back = SparseDelta::from_bytes(&d.to_bytes().unwrap()).unwrap();
        assert_eq!(back, d);
        let rebuilt = apply_delta(&model, &back).unwrap();
        assert!(rebuilt.bitwise_eq(&tuned));
        let twice = apply_delta(&model, &d).unwrap();
        assert!(twice.bitwise_eq(&rebuilt));
    }

    #[test]
    fn head_with_new_class_count() {
        let (model, mask) = setup();
        let mut tuned = perturb(&model, &mask).with_new_head(5, 3).unwrap();
        tuned.param_mut("head.weight").unwrap().value.data_mut()[0] = -3.0;
        let d = export_delta(&model, &tuned, &mask).unwrap();
        let rebuilt = apply_delta(&model, &d).unwrap();
        assert_eq!(rebuilt.spec().classes, 5);
        assert!(rebuilt.bitwise_eq(&tuned));
    }

    #[test]
    fn frozen_change_and_digest_mismatch_detected() {
        let (model, mask) = setup();
        let mut tuned = perturb(&model, &mask);
        let i = mask.matrices[1].bits.iter().position(|&b| !b).unwrap();
        tuned.param_mut(&mask.matrices[1].name).unwrap().value.data_mut()[i] = 1e9;
        assert!(matches!(export_delta(&model, &tuned, &mask), Err(GpsError::Integrity(_))));
        let mut tuned = perturb(&model, &mask);
        tuned.param_mut("layers.1.bias").unwrap().value.data_mut()[0] = 2.0;
        assert!(matches!(export_delta(&model, &tuned, &mask), Err(GpsError::Integrity(_))));

        let d = export_delta(&model, &perturb(&model, &mask), &mask).unwrap();
        let other = Model::build(&ModelSpec::mlp(4, &[5, 5], 3, 9)).unwrap();
        assert!(matches!(apply_delta(&other, &d), Err(GpsError::Compatibility(_))));
        let mut bad = d.clone();
        bad.entries[0].index = 10_000;
        assert!(matches!(apply_delta(&model, &bad), Err(GpsError::Format(_))));
    }

    #[test]
    fn unsorted_file_rejected() {
        let (model, mask) = setup();
        let mut d = export_delta(&model, &model, &mask).unwrap();
        d.entries.swap(0, 1);
        d.entries[0].tensor = d.entries[1].tensor.clone();
        if d.entries[0].index < d.entries[1].index {
            d.entries.swap(0, 1);
        }
        let bytes = d.to_bytes().unwrap();
        assert!(matches!(SparseDelta::from_bytes(&bytes), Err(GpsError::Format(_))));
    }

    #[test]
    fn overlap_basics() {
        let (model, mask) = setup();
        let o = mask_overlap(&mask, &mask).unwrap();
        assert_eq!(o.jaccard, 1.0);
        assert_eq!(o.total.shared, mask.popcount());
        let mut inverse = mask.clone();
        for m in &mut inverse.matrices {
            m.bits.iter_mut().for_each(|b| *b = !*b);
        }
        let o = mask_overlap(&mask, &inverse).unwrap();
        assert_eq!(o.jaccard, 0.0);
        assert_eq!(o.total.union(), model.selectable_count());
        assert_eq!(o.blocks.len(), 2);
        let other = SelectionMask::full(&Model::build(&ModelSpec::mlp(4, &[5], 3, 8)).unwrap().enumerate_neurons());
        assert!(matches!(mask_overlap(&mask, &other), Err(GpsError::Contract(_))));
    }

    #[test]
    fn distribution_of_full_mask_is_selectable_counts() {
        let (model, _) = setup();
        let rows = mask_distribution(&SelectionMask::full(&model.enumerate_neurons()), &model).unwrap();
        let got: Vec<(String, usize, usize)> =
            rows.iter().map(|r| (r.block.clone(), r.selected, r.selectable)).collect();
        assert_eq!(got, vec![("layers.0".into(), 20, 20), ("layers.1".into(), 25, 25)]);
    }
}
