//! Residual k-means quantization of item embeddings into Semantic IDs.
//!
//! Layer `j` is a k-means codebook fit on the residuals left by layers `< j`.
//! An item's Semantic ID is the greedy per-layer nearest codeword path:
//!
//! ```text
//! r_0 = e
//! c_j = argmin_k || r_{j-1} - v_{j,k} ||^2      (ties -> smallest k)
//! r_j = r_{j-1} - v_{j,c_j}
//! ```
//!
//! Codes are reported 1-based (`1..=K`).

pub mod embed;
pub mod kmeans;

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, ItemIdx};
use crate::error::{Error, Result};
use crate::nn::Matrix;

pub use embed::{cosine, embed_items, HashingEmbedder, ItemEmbedding, TextEmbedder};
pub use kmeans::{kmeans, KMeansFit, KMeansParams};

pub const DEFAULT_LAYERS: usize = 3;
pub const DEFAULT_CODES_PER_LAYER: usize = 256;

/// Immutable per-layer codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    n_layers: usize,
    codes_per_layer: usize,
    dim: usize,
    fit_seed: u64,
    /// One `K x dim` matrix per layer.
    codewords: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookFile {
    #[serde(rename = "L")]
    pub n_layers: usize,
    #[serde(rename = "K")]
    pub codes_per_layer: usize,
    pub dim: usize,
    pub seed: u64,
    pub codewords: Vec<Vec<Vec<f64>>>,
}

impl Codebook {
    pub fn from_codewords(codewords: Vec<Matrix>, fit_seed: u64) -> Result<Self> {
        let first = codewords
            .first()
            .ok_or_else(|| Error::invalid("codebook needs at least one layer"))?;
        let (k, dim) = first.shape();
        if k == 0 {
            return Err(Error::invalid("codebook layers need at least one codeword"));
        }
        for m in &codewords {
            if m.shape() != (k, dim) {
                return Err(Error::invalid("codebook layers differ in shape"));
            }
            if !m.is_finite() {
                return Err(Error::Numerical("non-finite codeword".into()));
            }
        }
        Ok(Self {
            n_layers: codewords.len(),
            codes_per_layer: k,
            dim,
            fit_seed,
            codewords,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn codes_per_layer(&self) -> usize {
        self.codes_per_layer
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fit_seed(&self) -> u64 {
        self.fit_seed
    }

    pub fn layer(&self, j: usize) -> &Matrix {
        &self.codewords[j]
    }

    /// Codeword `v_{layer, code}` with 1-based layer and code.
    pub fn codeword(&self, layer: usize, code: u32) -> &[f64] {
        self.codewords[layer - 1].row(code as usize - 1)
    }

    pub fn to_file(&self) -> CodebookFile {
        CodebookFile {
            n_layers: self.n_layers,
            codes_per_layer: self.codes_per_layer,
            dim: self.dim,
            seed: self.fit_seed,
            codewords: self
                .codewords
                .iter()
                .map(|m| (0..m.rows()).map(|r| m.row(r).to_vec()).collect())
                .collect(),
        }
    }

    pub fn from_file(f: CodebookFile) -> Result<Self> {
        let mut layers = Vec::with_capacity(f.codewords.len());
        for layer in f.codewords {
            let mut data = Vec::with_capacity(f.codes_per_layer * f.dim);
            for row in &layer {
                if row.len() != f.dim {
                    return Err(Error::DimensionMismatch {
                        expected: f.dim,
                        actual: row.len(),
                    });
                }
                data.extend_from_slice(row);
            }
            layers.push(Matrix::from_vec(layer.len(), f.dim, data));
        }
        let cb = Self::from_codewords(layers, f.seed)?;
        if cb.n_layers != f.n_layers || cb.codes_per_layer != f.codes_per_layer {
            return Err(Error::invalid("codebook header disagrees with codewords"));
        }
        Ok(cb)
    }
}

#[derive(Clone, Debug)]
pub struct FitParams {
    pub n_layers: usize,
    pub codes_per_layer: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            n_layers: DEFAULT_LAYERS,
            codes_per_layer: DEFAULT_CODES_PER_LAYER,
            seed: 0,
            max_iters: 50,
            tol: 1e-6,
        }
    }
}

fn to_matrix(embeddings: &[ItemEmbedding]) -> Result<Matrix> {
    let dim = embeddings.first().map(|e| e.vector.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(embeddings.len() * dim);
    for e in embeddings {
        if e.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: e.vector.len(),
            });
        }
        if e.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite embedding for {}", e.item_id)));
        }
        data.extend_from_slice(&e.vector);
    }
    Ok(Matrix::from_vec(embeddings.len(), dim, data))
}

/// Fits `n_layers` k-means codebooks on successive residuals.
pub fn fit_codebooks(embeddings: &[ItemEmbedding], params: &FitParams) -> Result<Codebook> {
    if params.n_layers == 0 || params.codes_per_layer == 0 {
        return Err(Error::invalid("L and K must be at least 1"));
    }
    let mut residuals = to_matrix(embeddings)?;
    if residuals.rows() < params.codes_per_layer {
        return Err(Error::TooFewPoints {
            points: residuals.rows(),
            k: params.codes_per_layer,
        });
    }
    let mut layers = Vec::with_capacity(params.n_layers);
    for layer in 0..params.n_layers {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(layer as u64));
        let fit = kmeans(
            &residuals,
            &KMeansParams {
                k: params.codes_per_layer,
                max_iters: params.max_iters,
                tol: params.tol,
            },
            &mut rng,
        )?;
        for i in 0..residuals.rows() {
            let c = fit.assignments[i];
            let cw = fit.centroids.row(c).to_vec();
            for (r, v) in residuals.row_mut(i).iter_mut().zip(cw) {
                *r -= v;
            }
        }
        layers.push(fit.centroids);
    }
    Codebook::from_codewords(layers, params.seed)
}

/// An item's discrete code path plus an optional collision disambiguator.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticId {
    /// 1-based code per layer.
    pub codes: Vec<u32>,
    pub disambig: Option<u32>,
}

impl SemanticId {
    pub fn new(codes: Vec<u32>) -> Self {
        Self { codes, disambig: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationStep {
    pub code: u32,
    /// Norm of the residual after subtracting this layer's codeword.
    pub residual_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationTrace {
    pub steps: Vec<QuantizationStep>,
}

/// Greedy per-layer nearest-codeword assignment.
pub fn assign_sid(embedding: &[f64], codebook: &Codebook) -> Result<(SemanticId, QuantizationTrace)> {
    if embedding.len() != codebook.dim {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim,
            actual: embedding.len(),
        });
    }
    let mut residual = embedding.to_vec();
    let mut codes = Vec::with_capacity(codebook.n_layers);
    let mut steps = Vec::with_capacity(codebook.n_layers);
    for layer in &codebook.codewords {
        let (c, _) = kmeans::nearest(&residual, layer);
        for (r, v) in residual.iter_mut().zip(layer.row(c)) {
            *r -= v;
        }
        let norm = residual.iter().map(|x| x * x).sum::<f64>().sqrt();
        codes.push(c as u32 + 1);
        steps.push(QuantizationStep {
            code: c as u32 + 1,
            residual_norm: norm,
        });
    }
    Ok((SemanticId::new(codes), QuantizationTrace { steps }))
}

/// Bijection between catalog items and Semantic IDs.
#[derive(Clone, Debug, PartialEq)]
pub struct SidMap {
    n_layers: usize,
    codes_per_layer: usize,
    sids: Vec<SemanticId>,
    lookup: HashMap<SemanticId, ItemIdx>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidRecord {
    pub item_id: String,
    pub codes: Vec<u32>,
    pub disambig: Option<u32>,
}

impl SidMap {
    /// Builds the map from per-item ids indexed by [`ItemIdx`].
    pub fn new(sids: Vec<SemanticId>, n_layers: usize, codes_per_layer: usize) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(sids.len());
        for (i, s) in sids.iter().enumerate() {
            if s.codes.len() != n_layers {
                return Err(Error::invalid(format!(
                    "semantic id with {} codes, expected {n_layers}",
                    s.codes.len()
                )));
            }
            if s.codes.iter().any(|&c| c == 0 || c as usize > codes_per_layer) {
                return Err(Error::invalid(format!("code out of range in {:?}", s.codes)));
            }
            if lookup.insert(s.clone(), i).is_some() {
                return Err(Error::DuplicateSid { codes: s.codes.clone() });
            }
        }
        Ok(Self {
            n_layers,
            codes_per_layer,
            sids,
            lookup,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn codes_per_layer(&self) -> usize {
        self.codes_per_layer
    }

    pub fn len(&self) -> usize {
        self.sids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sids.is_empty()
    }

    pub fn sid(&self, item: ItemIdx) -> &SemanticId {
        &self.sids[item]
    }

    pub fn sids(&self) -> &[SemanticId] {
        &self.sids
    }

    pub fn item(&self, sid: &SemanticId) -> Option<ItemIdx> {
        self.lookup.get(sid).copied()
    }

    /// Largest collision group size (0 when there are no collisions).
    pub fn max_disambig(&self) -> u32 {
        self.sids
            .iter()
            .filter_map(|s| s.disambig.map(|d| d + 1))
            .max()
            .unwrap_or(0)
    }

    pub fn to_records(&self, catalog: &Catalog) -> Vec<SidRecord> {
        self.sids
            .iter()
            .enumerate()
            .map(|(i, s)| SidRecord {
                item_id: catalog.id(i).to_string(),
                codes: s.codes.clone(),
                disambig: s.disambig,
            })
            .collect()
    }

    pub fn from_records(
        records: &[SidRecord],
        catalog: &Catalog,
        n_layers: usize,
        codes_per_layer: usize,
    ) -> Result<Self> {
        if records.len() != catalog.len() {
            return Err(Error::invalid(format!(
                "sid map has {} entries, catalog has {} items",
                records.len(),
                catalog.len()
            )));
        }
        let mut sids = vec![None; catalog.len()];
        for r in records {
            let idx = catalog
                .idx(&r.item_id)
                .ok_or_else(|| Error::UnknownItem(r.item_id.clone()))?;
            sids[idx] = Some(SemanticId {
                codes: r.codes.clone(),
                disambig: r.disambig,
            });
        }
        let sids = sids
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| Error::UnknownItem(catalog.id(i).to_string())))
            .collect::<Result<Vec<_>>>()?;
        Self::new(sids, n_layers, codes_per_layer)
    }
}

/// Assigns every catalog item (embeddings in catalog order) a Semantic ID.
/// Items sharing all L codes get `disambig = 0, 1, ...` in catalog (item id) order.
pub fn assign_catalog(embeddings: &[ItemEmbedding], codebook: &Codebook) -> Result<SidMap> {
    let mut sids = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        sids.push(assign_sid(&e.vector, codebook)?.0);
    }
    let mut groups: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
    for (i, s) in sids.iter().enumerate() {
        groups.entry(s.codes.clone()).or_default().push(i);
    }
    for members in groups.values().filter(|m| m.len() > 1) {
        for (d, &i) in members.iter().enumerate() {
            sids[i].disambig = Some(d as u32);
        }
    }
    SidMap::new(sids, codebook.n_layers, codebook.codes_per_layer)
}
