//! Global one-shot L1 magnitude pruning and binary subnetwork masks.
//!
//! A [`Mask`] is an index set over the prunable tensors (encoder weight
//! matrices), detached from any weight values: a mask found on one model can
//! be applied to another with the same architecture.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParameterTree, Tensor};

/// Binary keep/prune pattern for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskEntry {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl MaskEntry {
    pub fn new(shape: Vec<usize>, keep: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != keep.len() {
            return Err(Error::Shape(format!(
                "mask of {} entries for shape {shape:?}",
                keep.len()
            )));
        }
        Ok(Self { shape, keep })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn surviving(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// A subnetwork: surviving (`true`) entries of every prunable tensor.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Mask {
    entries: BTreeMap<String, MaskEntry>,
}

impl Mask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, entry: MaskEntry) {
        self.entries.insert(path.into(), entry);
    }

    /// Mask keeping (`value = true`) or pruning every prunable entry.
    pub fn filled(params: &ParameterTree, value: bool) -> Self {
        Self {
            entries: params
                .prunable()
                .map(|(p, t)| {
                    (
                        p.to_string(),
                        MaskEntry {
                            shape: t.shape().to_vec(),
                            keep: vec![value; t.len()],
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn get(&self, path: &str) -> Option<&MaskEntry> {
        self.entries.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &MaskEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> usize {
        self.entries.values().map(|e| e.keep.len()).sum()
    }

    pub fn surviving(&self) -> usize {
        self.entries.values().map(MaskEntry::surviving).sum()
    }

    /// Fraction of surviving entries.
    pub fn density(&self) -> f64 {
        self.surviving() as f64 / self.total().max(1) as f64
    }

    /// Checks that the domain is exactly the prunable set of `params`.
    pub fn matches(&self, params: &ParameterTree) -> Result<()> {
        let prunable: Vec<(&str, &Tensor)> = params.prunable().collect();
        if prunable.len() != self.entries.len() {
            return Err(Error::MaskDomain(format!(
                "mask covers {} tensors, model has {} prunable",
                self.entries.len(),
                prunable.len()
            )));
        }
        for ((p, t), (mp, e)) in prunable.iter().zip(&self.entries) {
            if *p != mp || t.shape() != e.shape.as_slice() {
                return Err(Error::MaskDomain(format!("`{mp}` vs prunable `{p}`")));
            }
        }
        Ok(())
    }

    fn check_same_domain(&self, other: &Mask) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::MaskDomain(format!(
                "{} vs {} tensors",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((pa, a), (pb, b)) in self.entries.iter().zip(&other.entries) {
            if pa != pb || a.shape != b.shape {
                return Err(Error::MaskDomain(format!("`{pa}` vs `{pb}`")));
            }
        }
        Ok(())
    }

    fn combine(&self, other: &Mask, op: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        self.check_same_domain(other)?;
        Ok(Mask {
            entries: self
                .entries
                .iter()
                .zip(other.entries.values())
                .map(|((p, a), b)| {
                    let keep = a
                        .keep
                        .iter()
                        .zip(&b.keep)
                        .map(|(&x, &y)| op(x, y))
                        .collect();
                    (
                        p.clone(),
                        MaskEntry {
                            shape: a.shape.clone(),
                            keep,
                        },
                    )
                })
                .collect(),
        })
    }
}

/// Number of entries pruned at `sparsity` out of `n`: `floor(sparsity * n)`.
/// A 1e-9 slack absorbs binary rounding of decimal sparsities (0.29 * 100).
pub fn pruned_count(sparsity: f64, n: usize) -> usize {
    ((sparsity * n as f64 + 1e-9).floor() as usize).min(n)
}

/// One-shot global L1 pruning over all prunable tensors jointly: the
/// `floor(sparsity * N)` smallest magnitudes are pruned, ties broken by path
/// then flat index.
pub fn global_l1_prune(params: &ParameterTree, sparsity: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::OutOfRange("sparsity", sparsity));
    }
    let tensors: Vec<(&str, &Tensor)> = params.prunable().collect();
    let n: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    if n == 0 {
        return Err(Error::EmptyPrunableSet);
    }
    // (magnitude, tensor index, flat index); enumeration order is already the
    // tie-break order, so a stable sort on magnitude suffices.
    let mut order: Vec<(f32, u32, u32)> = Vec::with_capacity(n);
    for (ti, (path, t)) in tensors.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::NonFinite(path.to_string()));
        }
        order.extend(
            t.data()
                .iter()
                .enumerate()
                .map(|(i, w)| (w.abs(), ti as u32, i as u32)),
        );
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut mask = Mask::filled(params, true);
    let mut keeps: Vec<&mut Vec<bool>> = mask.entries.values_mut().map(|e| &mut e.keep).collect();
    for &(_, ti, i) in &order[..pruned_count(sparsity, n)] {
        keeps[ti as usize][i as usize] = false;
    }
    Ok(mask)
}

/// Zeroes pruned entries in place; paths outside the mask are untouched.
pub fn apply_mask_in_place(params: &mut ParameterTree, mask: &Mask) -> Result<()> {
    for (path, e) in mask.iter() {
        let t = params.get(path)?;
        if t.shape() != e.shape() {
            return Err(Error::Shape(format!(
                "mask {:?} for `{path}` {:?}",
                e.shape(),
                t.shape()
            )));
        }
    }
    for (path, e) in mask.iter() {
        let t = params.get_mut(path)?;
        t.data_mut()
            .iter_mut()
            .zip(e.keep())
            .filter(|(_, &k)| !k)
            .for_each(|(w, _)| *w = 0.0);
    }
    Ok(())
}

pub fn apply_mask(params: &ParameterTree, mask: &Mask) -> Result<ParameterTree> {
    let mut out = params.clone();
    apply_mask_in_place(&mut out, mask)?;
    Ok(out)
}

/// Intersection over union of the surviving sets.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.check_same_domain(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (ea, eb) in a.entries.values().zip(b.entries.values()) {
        for (&x, &y) in ea.keep.iter().zip(&eb.keep) {
            inter += usize::from(x && y);
            union += usize::from(x || y);
        }
    }
    if union == 0 {
        return Err(Error::EmptyUnion);
    }
    Ok(inter as f64 / union as f64)
}

pub fn union_mask(a: &Mask, b: &Mask) -> Result<Mask> {
    a.combine(b, |x, y| x || y)
}

pub fn intersection_mask(a: &Mask, b: &Mask) -> Result<Mask> {
    a.combine(b, |x, y| x && y)
}

/// Fraction of pruned entries over the mask's domain.
pub fn mask_sparsity(m: &Mask) -> f64 {
    1.0 - m.density()
}
