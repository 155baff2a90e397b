//! Per-slide feature matrices, the extractor dimension registry and
//! ensemble construction by per-patch concatenation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Separator joining part ids into an ensemble id, e.g. `uni+hibou-base`.
pub const ENSEMBLE_SEPARATOR: char = '+';

pub type Coord = [i32; 2];

/// One slide's `m×d` patch embeddings from a single extractor (or a fused
/// ensemble), with the level-0 origin of each patch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub extractor_id: String,
    pub values: Tensor<f32>,
    pub coords: Option<Vec<Coord>>,
}

impl FeatureMatrix {
    pub fn new(extractor_id: impl Into<String>, values: Tensor<f32>, coords: Option<Vec<Coord>>) -> Result<Self> {
        let extractor_id = extractor_id.into();
        if extractor_id.is_empty() || extractor_id.len() > u8::MAX as usize {
            return Err(Error::Contract(format!(
                "extractor id must be 1..=255 bytes, got {}",
                extractor_id.len()
            )));
        }
        if let Some(c) = &coords {
            if c.len() != values.rows() {
                return Err(Error::Contract(format!(
                    "{} coordinates for {} patches",
                    c.len(),
                    values.rows()
                )));
            }
        }
        Ok(FeatureMatrix {
            extractor_id,
            values,
            coords,
        })
    }

    /// Patch count.
    pub fn m(&self) -> usize {
        self.values.rows()
    }

    /// Embedding dimension.
    pub fn d(&self) -> usize {
        self.values.cols()
    }

    pub fn parts(&self) -> impl Iterator<Item = &str> {
        self.extractor_id.split(ENSEMBLE_SEPARATOR)
    }
}

/// Known embedding dimensions per extractor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractorRegistry {
    dims: BTreeMap<String, usize>,
}

impl Default for ExtractorRegistry {
    fn default() -> Self {
        let mut dims = BTreeMap::new();
        dims.insert("resnet50".to_string(), 1024);
        dims.insert("uni".to_string(), 1024);
        dims.insert("hibou-base".to_string(), 768);
        ExtractorRegistry { dims }
    }
}

impl ExtractorRegistry {
    pub fn empty() -> Self {
        ExtractorRegistry { dims: BTreeMap::new() }
    }

    pub fn register(&mut self, id: impl Into<String>, dim: usize) {
        self.dims.insert(id.into(), dim);
    }

    /// Registered dimension of `id`. Ensemble ids resolve to the sum of their
    /// parts when every part is known.
    pub fn expected_dim(&self, id: &str) -> Option<usize> {
        if let Some(&d) = self.dims.get(id) {
            return Some(d);
        }
        if !id.contains(ENSEMBLE_SEPARATOR) {
            return None;
        }
        id.split(ENSEMBLE_SEPARATOR)
            .map(|p| self.dims.get(p).copied())
            .sum()
    }

    pub fn validate(&self, fm: &FeatureMatrix) -> Result<()> {
        match self.expected_dim(&fm.extractor_id) {
            Some(expected) if expected != fm.d() => Err(Error::Registry {
                extractor: fm.extractor_id.clone(),
                expected,
                found: fm.d(),
            }),
            _ => Ok(()),
        }
    }
}

/// Per-patch concatenation of several extractors' features.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleFeature {
    pub parts: Vec<String>,
    /// Width of each part, in the same order as `parts`.
    pub part_dims: Vec<usize>,
    pub values: Tensor<f32>,
    pub coords: Option<Vec<Coord>>,
}

impl EnsembleFeature {
    pub fn id(&self) -> String {
        let mut s = String::new();
        for (i, p) in self.parts.iter().enumerate() {
            if i > 0 {
                s.push(ENSEMBLE_SEPARATOR);
            }
            s.push_str(p);
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Column offset of part `i`.
    pub fn offset(&self, i: usize) -> usize {
        self.part_dims[..i].iter().sum()
    }

    /// The columns belonging to part `i`.
    pub fn part_values(&self, i: usize) -> Tensor<f32> {
        let (off, w) = (self.offset(i), self.part_dims[i]);
        let mut data = Vec::with_capacity(self.values.rows() * w);
        for r in 0..self.values.rows() {
            data.extend_from_slice(&self.values.row(r)[off..off + w]);
        }
        Tensor::new(self.values.rows(), w, data).expect("part slice is non-empty")
    }

    pub fn into_feature_matrix(self) -> FeatureMatrix {
        FeatureMatrix {
            extractor_id: self.id(),
            values: self.values,
            coords: self.coords,
        }
    }
}

/// Concatenates aligned feature matrices along the feature axis, in the
/// given order. Parts must cover the same patch grid: equal patch counts
/// and identical coordinate lists.
pub fn concat_ensemble(parts: &[FeatureMatrix]) -> Result<EnsembleFeature> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one part".into()))?;

    let mut seen: Vec<&str> = Vec::new();
    for s in parts.iter().flat_map(|p| p.parts()) {
        if seen.contains(&s) {
            return Err(Error::Config(format!("extractor '{s}' appears twice in the ensemble")));
        }
        seen.push(s);
    }

    for p in &parts[1..] {
        let mismatch = |reason: String| Error::Alignment {
            left: first.extractor_id.clone(),
            right: p.extractor_id.clone(),
            reason,
        };
        if p.m() != first.m() {
            return Err(mismatch(format!("patch counts {} and {}", first.m(), p.m())));
        }
        match (&first.coords, &p.coords) {
            (Some(a), Some(b)) => {
                if let Some(i) = a.iter().zip(b).position(|(x, y)| x != y) {
                    return Err(mismatch(format!(
                        "patch {i} at {:?} vs {:?}",
                        a[i], b[i]
                    )));
                }
            }
            _ => return Err(mismatch("coordinates missing, cannot verify alignment".into())),
        }
    }

    let m = first.m();
    let total: usize = parts.iter().map(|p| p.d()).sum();
    let mut data = Vec::with_capacity(m * total);
    for r in 0..m {
        for p in parts {
            data.extend_from_slice(p.values.row(r));
        }
    }

    // Nested ensembles stay one part each: their internal split is not
    // stored in the matrix.
    let part_names = parts.iter().map(|p| p.extractor_id.clone()).collect();
    let part_dims = parts.iter().map(|p| p.d()).collect();

    Ok(EnsembleFeature {
        parts: part_names,
        part_dims,
        values: Tensor::new(m, total, data)?,
        coords: first.coords.clone(),
    })
}
