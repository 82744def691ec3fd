//! Dense row-major `f32` tensors and the named parameter tree of a model.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major tensor of 32-bit floats.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "dimensions must be positive"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    /// Builds a `rows x cols` matrix from row slices.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Leading dimension; 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Product of trailing dimensions.
    pub fn cols(&self) -> usize {
        self.data.len() / self.rows()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Equality of the raw bit patterns (distinguishes `-0.0` from `0.0`).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// The three parameter regions of the recognizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Region {
    FeatureProj,
    Encoder,
    CtcHead,
}

impl Region {
    pub fn of(path: &str) -> Result<Region> {
        if path.starts_with("encoder/") {
            Ok(Region::Encoder)
        } else if path.starts_with("feature_proj/") {
            Ok(Region::FeatureProj)
        } else if path.starts_with("ctc_head/") {
            Ok(Region::CtcHead)
        } else {
            Err(Error::UnknownRegion(path.to_string()))
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Region::FeatureProj => "feature_proj/",
            Region::Encoder => "encoder/",
            Region::CtcHead => "ctc_head/",
        }
    }
}

/// Prunable tensors: encoder-region weight matrices. Biases, layer norms and
/// embeddings are excluded.
pub fn is_prunable(path: &str, tensor: &Tensor) -> bool {
    path.starts_with("encoder/") && path.ends_with("/weight") && tensor.rank() == 2
}

/// Named model parameters, iterated in lexicographic path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterTree {
    params: BTreeMap<String, Tensor>,
}

impl ParameterTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; the path must name one of the three regions.
    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) -> Result<()> {
        let path = path.into();
        Region::of(&path)?;
        self.params.insert(path, tensor);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::MissingParameter(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::MissingParameter(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn region_paths(&self, region: Region) -> impl Iterator<Item = &str> {
        self.paths().filter(move |p| p.starts_with(region.prefix()))
    }

    pub fn prunable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(p, t)| is_prunable(p, t))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Same paths and shapes, all zeros.
    pub fn zeros_like(&self) -> ParameterTree {
        ParameterTree {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn bitwise_eq(&self, other: &ParameterTree) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }

    /// Whether every tensor under `region` is bitwise equal in both trees.
    pub fn region_bitwise_eq(&self, other: &ParameterTree, region: Region) -> bool {
        let a: Vec<_> = self
            .iter()
            .filter(|(p, _)| p.starts_with(region.prefix()))
            .collect();
        let b: Vec<_> = other
            .iter()
            .filter(|(p, _)| p.starts_with(region.prefix()))
            .collect();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((pa, ta), (pb, tb))| pa == pb && ta.bitwise_eq(tb))
    }
}

impl FromIterator<(String, Tensor)> for ParameterTree {
    /// Panics on paths outside the known regions.
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        let mut tree = ParameterTree::new();
        for (k, v) in iter {
            tree.insert(k, v)
                .expect("parameter path outside known regions");
        }
        tree
    }
}
