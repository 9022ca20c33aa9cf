//! Candidate selection from five per-candidate features:
//! coherence with already-linked entities, prior, type compatibility,
//! coherence with their knowledge-graph neighbors, and the local score.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingStore;
use crate::error::{Error, Result};
use crate::nn::{Activation, DiagonalBilinear, FeedForward};
use crate::tensor::{self, Graph, ParamStore, Tensor, Var};

pub const DEFAULT_K_SEL: usize = 7;

/// Entity-table indices of each entity's knowledge-graph neighbors.
#[derive(Clone, Debug, Default)]
pub struct Adjacency(Vec<Vec<usize>>);

impl Adjacency {
    pub fn from_store(store: &EmbeddingStore) -> Self {
        let mut adj = vec![Vec::new(); store.entities.len()];
        for (from, tos) in &store.kg {
            if let Some(i) = store.entities.index_of(from) {
                adj[i] = tos.iter().filter_map(|t| store.entities.index_of(t)).collect();
            }
        }
        Self(adj)
    }

    pub fn neighbors(&self, entity: usize) -> &[usize] {
        self.0.get(entity).map_or(&[], Vec::as_slice)
    }

    /// Sorted union of the neighbors of `linked`.
    pub fn neighborhood(&self, linked: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = linked.iter().flat_map(|&e| self.neighbors(e).iter().copied()).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSet {
    pub coherence: bool,
    pub prior: bool,
    pub type_score: bool,
    pub neighborhood: bool,
    pub local: bool,
}

impl Default for FeatureSet {
    fn default() -> Self {
        Self {
            coherence: true,
            prior: true,
            type_score: true,
            neighborhood: true,
            local: true,
        }
    }
}

impl FeatureSet {
    /// Without the type and knowledge-graph features.
    pub fn without_type_and_kg() -> Self {
        Self {
            type_score: false,
            neighborhood: false,
            ..Self::default()
        }
    }

    pub fn count(&self) -> usize {
        [
            self.coherence,
            self.prior,
            self.type_score,
            self.neighborhood,
            self.local,
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }
}

/// Constant per-mention inputs.
#[derive(Clone, Debug)]
pub struct CandidateInputs {
    /// `n × d` candidate entity vectors.
    pub vectors: Tensor,
    pub priors: Tensor,
    pub type_scores: Tensor,
}

#[derive(Clone, Debug)]
pub struct Selector {
    pub b5: DiagonalBilinear,
    pub b6: DiagonalBilinear,
    pub k_sel: usize,
    pub features: FeatureSet,
    pub standardize: bool,
    pub fusion: FeedForward,
}

impl Selector {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        dim: usize,
        k_sel: usize,
        features: FeatureSet,
        hidden: usize,
    ) -> Result<Self> {
        if k_sel == 0 {
            return Err(Error::invalid("k_sel must be at least 1"));
        }
        if features.count() == 0 {
            return Err(Error::invalid("at least one selector feature must be enabled"));
        }
        let fusion = FeedForward::new(
            ps,
            rng,
            "selector.fusion",
            &[features.count(), hidden, 1],
            &[Activation::Relu, Activation::Identity],
            0.0,
        )?;
        Ok(Self {
            b5: DiagonalBilinear::identity(ps, "selector.b5", dim),
            b6: DiagonalBilinear::identity(ps, "selector.b6", dim),
            k_sel,
            features,
            standardize: false,
            fusion,
        })
    }

    /// Attention summary of `entities` (rows of `k × d`) keyed on the candidates;
    /// `None` when there are no entities.
    pub fn attend(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        bilinear: &DiagonalBilinear,
        candidates: Var,
        entities: Option<Var>,
    ) -> Result<Option<Var>> {
        let Some(entities) = entities else {
            return Ok(None);
        };
        let diag = g.param(ps, bilinear.diag);
        let weighted = g.mul_row(candidates, diag)?;
        let et = g.transpose(entities);
        let table = g.matmul(weighted, et)?;
        let scores = g.max_rows(table)?;
        let keep = tensor::top_k_indices(g.value(scores).data(), self.k_sel);
        let kept = g.select_cols(scores, &keep)?;
        let w = g.softmax(kept)?;
        let rows = g.select_rows(entities, &keep)?;
        Ok(Some(g.matmul(w, rows)?))
    }

    /// `f(Ĉ)`; `linked` holds entity-table indices of already-linked entities.
    pub fn linked_context_feature(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        store: &EmbeddingStore,
        candidates: Var,
        linked: &[usize],
    ) -> Result<Option<Var>> {
        let entities = entity_rows(g, store, linked);
        self.attend(g, ps, &self.b5, candidates, entities)
    }

    pub fn neighborhood_feature(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        store: &EmbeddingStore,
        adjacency: &Adjacency,
        candidates: Var,
        linked: &[usize],
    ) -> Result<Option<Var>> {
        let hood = adjacency.neighborhood(linked);
        let entities = entity_rows(g, store, &hood);
        self.attend(g, ps, &self.b6, candidates, entities)
    }

    /// `eᵀ·B·f` for every candidate, zero when `feature` is absent.
    pub fn bilinear_scores(
        g: &mut Graph,
        ps: &ParamStore,
        bilinear: &DiagonalBilinear,
        candidates: Var,
        feature: Option<Var>,
    ) -> Result<Var> {
        let n = g.shape(candidates).0;
        let Some(f) = feature else {
            return Ok(g.constant(Tensor::zeros(1, n)));
        };
        let diag = g.param(ps, bilinear.diag);
        let weighted = g.mul_row(candidates, diag)?;
        let ft = g.transpose(f);
        let col = g.matmul(weighted, ft)?;
        Ok(g.transpose(col))
    }

    /// The `n × F` feature matrix, columns in the order coherence, prior,
    /// type, neighborhood, local; disabled features are left out.
    #[allow(clippy::too_many_arguments)]
    pub fn features(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        store: &EmbeddingStore,
        adjacency: &Adjacency,
        inputs: &CandidateInputs,
        linked: &[usize],
        local: Var,
    ) -> Result<Var> {
        let n = inputs.vectors.rows();
        if g.shape(local) != (1, n) {
            return Err(Error::Shape {
                op: "selector local scores",
                left: g.shape(local),
                right: (1, n),
            });
        }
        let cands = g.constant(inputs.vectors.clone());
        let mut rows = Vec::with_capacity(5);
        if self.features.coherence {
            let f = self.linked_context_feature(g, ps, store, cands, linked)?;
            rows.push(Self::bilinear_scores(g, ps, &self.b5, cands, f)?);
        }
        if self.features.prior {
            rows.push(g.constant(inputs.priors.clone()));
        }
        if self.features.type_score {
            rows.push(g.constant(inputs.type_scores.clone()));
        }
        if self.features.neighborhood {
            let f = self.neighborhood_feature(g, ps, store, adjacency, cands, linked)?;
            rows.push(Self::bilinear_scores(g, ps, &self.b6, cands, f)?);
        }
        if self.features.local {
            rows.push(local);
        }
        let stacked = g.vstack(&rows)?;
        let x = g.transpose(stacked);
        if self.standardize {
            standardize_columns(g, x)
        } else {
            Ok(x)
        }
    }

    /// `P̂` over the candidates as a `1 × n` node.
    #[allow(clippy::too_many_arguments)]
    pub fn candidate_distribution(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        store: &EmbeddingStore,
        adjacency: &Adjacency,
        inputs: &CandidateInputs,
        linked: &[usize],
        local: Var,
    ) -> Result<Var> {
        let x = self.features(g, ps, store, adjacency, inputs, linked, local)?;
        let logits = self.fusion.forward(g, ps, x)?;
        let logits = g.transpose(logits);
        g.softmax(logits)
    }
}

fn entity_rows(g: &mut Graph, store: &EmbeddingStore, idx: &[usize]) -> Option<Var> {
    if idx.is_empty() {
        return None;
    }
    Some(g.constant(crate::local_attn::entity_matrix(store, idx)))
}

/// Centers each column over the candidates and divides by its standard
/// deviation; the deviation is treated as a constant.
fn standardize_columns(g: &mut Graph, x: Var) -> Result<Var> {
    let (n, f) = g.shape(x);
    let mut center = Tensor::filled(n, n, -1.0 / n as f64);
    for i in 0..n {
        center.data_mut()[i * n + i] += 1.0;
    }
    let center = g.constant(center);
    let centered = g.matmul(center, x)?;
    let vals = g.value(centered);
    let inv_std: Vec<f64> = (0..f)
        .map(|c| {
            let var = (0..n).map(|r| vals.get(r, c).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-12 {
                1.0 / var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scale = g.constant(Tensor::row(inv_std));
    g.mul_row(centered, scale)
}
