//! The full linker: a local scorer, the mention-ordering policy and the
//! candidate selector sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingStore, PreparedDoc, PreparedMention};
use crate::error::Result;
use crate::local_attn::{entity_matrix, LocalAttn, DEFAULT_TOP_R};
use crate::policy::{Policy, DEFAULT_TOP_K};
use crate::selector::{Adjacency, CandidateInputs, FeatureSet, Selector, DEFAULT_K_SEL};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::transformer::{TransformerConfig, TransformerLocal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalKind {
    Attention,
    Transformer,
}

impl std::str::FromStr for LocalKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" | "attn" => Ok(Self::Attention),
            "transformer" => Ok(Self::Transformer),
            _ => Err(crate::Error::Invalid(format!("unknown local model `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub local: LocalKind,
    pub top_r: usize,
    pub top_k: usize,
    pub k_sel: usize,
    pub fusion_hidden: usize,
    pub features: FeatureSet,
    pub standardize_features: bool,
    pub transformer: TransformerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            local: LocalKind::Attention,
            top_r: DEFAULT_TOP_R,
            top_k: DEFAULT_TOP_K,
            k_sel: DEFAULT_K_SEL,
            fusion_hidden: 16,
            features: FeatureSet::default(),
            standardize_features: false,
            transformer: TransformerConfig::default(),
        }
    }
}

/// Knowledge the linker reads but never trains.
#[derive(Clone, Debug)]
pub struct Env<'a> {
    pub store: &'a EmbeddingStore,
    pub adjacency: Adjacency,
}

impl<'a> Env<'a> {
    pub fn new(store: &'a EmbeddingStore) -> Self {
        Self {
            store,
            adjacency: Adjacency::from_store(store),
        }
    }

    pub fn candidate_inputs(&self, m: &PreparedMention) -> CandidateInputs {
        CandidateInputs {
            vectors: entity_matrix(self.store, &m.candidates),
            priors: Tensor::row(m.priors.clone()),
            type_scores: Tensor::row(m.type_scores.clone()),
        }
    }

    pub fn doc_inputs(&self, doc: &PreparedDoc) -> Vec<CandidateInputs> {
        doc.mentions.iter().map(|m| self.candidate_inputs(m)).collect()
    }

    pub fn entity(&self, g: &mut Graph, e: usize) -> Var {
        g.constant(Tensor::row(self.store.entities.row(e).to_vec()))
    }
}

/// Local-model outputs for one mention.
#[derive(Clone, Copy, Debug)]
pub struct LocalVars {
    /// Mention representation, `1 × d`.
    pub repr: Var,
    /// Local score fed to the selector, `1 × n`.
    pub score: Var,
    /// Candidate weights used by the policy, `1 × n`, summing to one.
    pub weights: Var,
}

/// Detached local outputs, reusable across graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalValues {
    pub repr: Tensor,
    pub score: Tensor,
    pub weights: Tensor,
}

impl LocalValues {
    pub fn read(g: &Graph, v: &LocalVars) -> Self {
        Self {
            repr: g.value(v.repr).clone(),
            score: g.value(v.score).clone(),
            weights: g.value(v.weights).clone(),
        }
    }

    pub fn insert(&self, g: &mut Graph) -> LocalVars {
        LocalVars {
            repr: g.constant(self.repr.clone()),
            score: g.constant(self.score.clone()),
            weights: g.constant(self.weights.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dim: usize,
    pub params: ParamStore,
    pub attn: LocalAttn,
    pub transformer: Option<TransformerLocal>,
    pub policy: Policy,
    pub selector: Selector,
}

impl Model {
    pub fn new(config: ModelConfig, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let attn = LocalAttn::new(&mut params, dim, config.top_r)?;
        let transformer = match config.local {
            LocalKind::Attention => None,
            LocalKind::Transformer => Some(TransformerLocal::new(
                &mut params,
                &mut rng,
                dim,
                config.transformer.clone(),
            )?),
        };
        let policy = Policy::new(&mut params, dim, config.top_k)?;
        let mut selector = Selector::new(
            &mut params,
            &mut rng,
            dim,
            config.k_sel,
            config.features,
            config.fusion_hidden,
        )?;
        selector.standardize = config.standardize_features;
        Ok(Self {
            config,
            dim,
            params,
            attn,
            transformer,
            policy,
            selector,
        })
    }

    pub fn local(&self, g: &mut Graph, env: &Env, m: &PreparedMention) -> Result<LocalVars> {
        let ps = &self.params;
        let repr = self.attn.context_feature(g, ps, env.store, m)?;
        match &self.transformer {
            None => {
                let score = self.attn.scores(g, ps, env.store, m, repr)?;
                let weights = g.softmax(score)?;
                Ok(LocalVars { repr, score, weights })
            }
            Some(t) => {
                let n3 = t.scores(g, ps, env.store, m)?;
                Ok(LocalVars {
                    repr,
                    score: n3,
                    weights: n3,
                })
            }
        }
    }

    pub fn locals(&self, g: &mut Graph, env: &Env, doc: &PreparedDoc) -> Result<Vec<LocalVars>> {
        doc.mentions.iter().map(|m| self.local(g, env, m)).collect()
    }

    /// Local outputs on an evaluation graph, detached.
    pub fn local_values(&self, env: &Env, doc: &PreparedDoc) -> Result<Vec<LocalValues>> {
        let mut g = Graph::new();
        let vars = self.locals(&mut g, env, doc)?;
        Ok(vars.iter().map(|v| LocalValues::read(&g, v)).collect())
    }

    /// Parameter names grouped by the component that owns them.
    pub fn component_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }
}
