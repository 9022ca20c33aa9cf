//! Transformer local scorer.
//!
//! The input sequence is `[CLS] context [SEP] e_1 [SEP] … e_n [SEP]`, where
//! the context is the left window, the mention surface and the right window.
//! Each row sums a token, type, segment and position embedding. Candidate
//! rows all reuse the position of the mention's first token.
//!
//! Three heads score candidate `i`:
//!
//! * `N1_i`: softmax over candidates of a feed-forward score of `[o_cls; o_i]`;
//! * `N2_i = e_i · o_m`, the raw entity vector against the mention output;
//! * `N3_i`: softmax over candidates of a feed-forward score of `[N1_i; N2_i]`.
//!
//! `N3` is the local score.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingStore, PreparedMention};
use crate::error::{Error, Result};
use crate::local_attn::{entity_matrix, word_matrix};
use crate::nn::{glorot, uniform, EncoderLayer, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub drop_position: bool,
    pub drop_type: bool,
    pub drop_segment: bool,
    pub drop_n1: bool,
    pub drop_n2: bool,
}

impl Ablation {
    pub fn set(&mut self, flag: &str) -> Result<()> {
        match flag {
            "drop_position" => self.drop_position = true,
            "drop_type" => self.drop_type = true,
            "drop_segment" => self.drop_segment = true,
            "drop_N1" | "drop_n1" => self.drop_n1 = true,
            "drop_N2" | "drop_n2" => self.drop_n2 = true,
            _ => return Err(Error::invalid(format!("unknown ablation flag `{flag}`"))),
        }
        Ok(())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Comma-separated flags, e.g. `drop_N1,drop_type`.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for flag in s.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            a.set(flag)?;
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub max_candidates: usize,
    pub ablation: Ablation,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            ffn_width: 32,
            head_hidden: 16,
            dropout: 0.1,
            max_positions: 128,
            max_candidates: 16,
            ablation: Ablation::default(),
        }
    }
}

/// Row roles in the input sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub len: usize,
    pub mention_row: usize,
    pub candidate_rows: Vec<usize>,
    pub sep_rows: Vec<usize>,
    pub types: Vec<usize>,
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
}

impl SequenceLayout {
    pub fn new(left: usize, surface: usize, right: usize, candidates: usize) -> Self {
        let context = left + surface + right;
        let len = 1 + context + 1 + 2 * candidates;
        let mention_row = 1 + left;
        let mut types = Vec::with_capacity(len);
        let mut segments = Vec::with_capacity(len);
        let mut positions: Vec<usize> = (0..len).collect();
        let mut candidate_rows = Vec::with_capacity(candidates);
        let mut sep_rows = Vec::with_capacity(candidates + 1);

        // [CLS] and the context.
        for _ in 0..=context {
            types.push(0);
            segments.push(0);
        }
        for i in 1..=candidates {
            // [SEP] before candidate i takes the candidate's block.
            sep_rows.push(types.len());
            types.push(1);
            segments.push(i);
            candidate_rows.push(types.len());
            positions[types.len()] = mention_row;
            types.push(1);
            segments.push(i);
        }
        sep_rows.push(types.len());
        types.push(1);
        segments.push(candidates.max(1));
        Self {
            len,
            mention_row,
            candidate_rows,
            sep_rows,
            types,
            segments,
            positions,
        }
    }
}

/// Head outputs for one mention, each `1 × n`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub n1: Var,
    pub n2: Var,
    pub n3: Var,
}

#[derive(Clone, Debug)]
pub struct TransformerLocal {
    pub config: TransformerConfig,
    pub b2: ParamId,
    pub type_embed: ParamId,
    pub segment_embed: ParamId,
    pub position_embed: ParamId,
    pub cls: ParamId,
    pub sep: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub f1: Linear,
    pub f2: Linear,
    pub f3: Linear,
    pub f4: Linear,
}

impl TransformerLocal {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize, config: TransformerConfig) -> Result<Self> {
        if config.heads == 0 || !dim.is_multiple_of(config.heads) {
            return Err(Error::invalid(format!(
                "embedding dimension {dim} is not divisible by {} heads",
                config.heads
            )));
        }
        if config.max_candidates == 0 || config.max_positions < 4 {
            return Err(Error::invalid("transformer needs room for candidates and positions"));
        }
        let d_head = dim / config.heads;
        let layers = (0..config.layers)
            .map(|i| {
                EncoderLayer::new(
                    ps,
                    rng,
                    &format!("transformer.layer{i}"),
                    config.heads,
                    d_head,
                    config.ffn_width,
                    config.dropout,
                )
            })
            .collect::<Result<_>>()?;
        let embed = |rng: &mut ChaCha8Rng, rows| uniform(rng, rows, dim, 0.1);
        let mut b2 = glorot(rng, dim, dim);
        for i in 0..dim {
            b2.data_mut()[i * dim + i] += 1.0;
        }
        let h = config.head_hidden;
        Ok(Self {
            b2: ps.add("transformer.b2", b2),
            type_embed: ps.add("transformer.type_embed", embed(rng, 2)),
            segment_embed: ps.add("transformer.segment_embed", embed(rng, config.max_candidates + 1)),
            position_embed: ps.add("transformer.position_embed", embed(rng, config.max_positions)),
            cls: ps.add("transformer.cls", embed(rng, 1)),
            sep: ps.add("transformer.sep", embed(rng, 1)),
            layers,
            f1: Linear::new(ps, rng, "transformer.f1", 2 * dim, h),
            f2: Linear::new(ps, rng, "transformer.f2", h, 1),
            f3: Linear::new(ps, rng, "transformer.f3", 2, h),
            f4: Linear::new(ps, rng, "transformer.f4", h, 1),
            config,
        })
    }

    pub fn layout(&self, m: &PreparedMention) -> Result<SequenceLayout> {
        let n = m.candidates.len();
        if n == 0 {
            return Err(Error::Empty("candidate set"));
        }
        if n > self.config.max_candidates {
            return Err(Error::invalid(format!(
                "{n} candidates exceed the transformer's {} segments",
                self.config.max_candidates
            )));
        }
        let left = m.context_split;
        let right = m.context.len() - left;
        let layout = SequenceLayout::new(left, m.surface.len(), right, n);
        if layout.len > self.config.max_positions {
            return Err(Error::invalid(format!(
                "sequence of {} rows exceeds {} positions",
                layout.len, self.config.max_positions
            )));
        }
        Ok(layout)
    }

    /// Candidate token embeddings `(w_e + e·B2)/2`, or `e·B2` without a surface form.
    fn candidate_tokens(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        store: &EmbeddingStore,
        m: &PreparedMention,
    ) -> Result<Var> {
        let dim = store.dim();
        let n = m.candidates.len();
        let mut surface = Tensor::zeros(n, dim);
        let mut coef = Tensor::zeros(n, dim);
        for (r, &e) in m.candidates.iter().enumerate() {
            let words: Vec<&[f64]> = store
                .entity_surface
                .get(store.entities.id(e))
                .map(|ws| ws.iter().filter_map(|w| store.words.get(w)).collect())
                .unwrap_or_default();
            let (c, mean) = if words.is_empty() {
                log::debug!(
                    "entity `{}` has no surface form; using its projection alone",
                    store.entities.id(e)
                );
                (1.0, vec![0.0; dim])
            } else {
                let k = words.len() as f64;
                let mean = (0..dim).map(|j| words.iter().map(|w| w[j]).sum::<f64>() / k).collect();
                (0.5, mean)
            };
            for (j, mj) in mean.iter().enumerate() {
                surface.data_mut()[r * dim + j] = c * mj;
                coef.data_mut()[r * dim + j] = c;
            }
        }
        let ents = g.constant(entity_matrix(store, &m.candidates));
        let b2 = g.param(ps, self.b2);
        let proj = g.matmul(ents, b2)?;
        let coef = g.constant(coef);
        let proj = g.mul(proj, coef)?;
        let surface = g.constant(surface);
        g.add(proj, surface)
    }

    pub fn build_input(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        store: &EmbeddingStore,
        m: &PreparedMention,
    ) -> Result<(Var, SequenceLayout)> {
        let layout = self.layout(m)?;
        let split = m.context_split;
        let words: Vec<usize> = m.context[..split]
            .iter()
            .chain(&m.surface)
            .chain(&m.context[split..])
            .copied()
            .collect();
        let cls = g.param(ps, self.cls);
        let sep = g.param(ps, self.sep);
        let cands = self.candidate_tokens(g, ps, store, m)?;
        let mut parts = vec![cls];
        if !words.is_empty() {
            parts.push(g.constant(word_matrix(store, &words)));
        }
        parts.push(sep);
        for i in 0..m.candidates.len() {
            parts.push(g.row(cands, i)?);
            parts.push(sep);
        }
        let mut x = g.vstack(&parts)?;
        let a = self.config.ablation;
        for (table, idx, dropped) in [
            (self.type_embed, &layout.types, a.drop_type),
            (self.segment_embed, &layout.segments, a.drop_segment),
            (self.position_embed, &layout.positions, a.drop_position),
        ] {
            if !dropped {
                let t = g.param(ps, table);
                let rows = g.select_rows(t, idx)?;
                x = g.add(x, rows)?;
            }
        }
        Ok((x, layout))
    }

    pub fn heads(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        store: &EmbeddingStore,
        m: &PreparedMention,
    ) -> Result<HeadOutputs> {
        let (x, layout) = self.build_input(g, ps, store, m)?;
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, ps, h)?;
        }
        let n = m.candidates.len();
        let cls = g.select_rows(h, &vec![0; n])?;
        let cand_out = g.select_rows(h, &layout.candidate_rows)?;
        let pair = g.hconcat(&[cls, cand_out])?;
        let z = self.f1.forward(g, ps, pair)?;
        let z = g.relu(z);
        let z = g.dropout(z, self.config.dropout);
        let s1 = self.f2.forward(g, ps, z)?;
        let s1 = g.transpose(s1);
        let n1 = g.softmax(s1)?;

        let o_m = g.row(h, layout.mention_row)?;
        let ents = g.constant(entity_matrix(store, &m.candidates));
        let om_t = g.transpose(o_m);
        let s2 = g.matmul(ents, om_t)?;
        let n2 = g.transpose(s2);

        let zeros = g.constant(Tensor::zeros(n, 1));
        let c1 = if self.config.ablation.drop_n1 {
            zeros
        } else {
            g.transpose(n1)
        };
        let c2 = if self.config.ablation.drop_n2 {
            zeros
        } else {
            g.transpose(n2)
        };
        let feats = g.hconcat(&[c1, c2])?;
        let z = self.f3.forward(g, ps, feats)?;
        let z = g.relu(z);
        let z = g.dropout(z, self.config.dropout);
        let s3 = self.f4.forward(g, ps, z)?;
        let s3 = g.transpose(s3);
        let n3 = g.softmax(s3)?;
        Ok(HeadOutputs { n1, n2, n3 })
    }

    /// `N3` as a `1 × n` node.
    pub fn scores(&self, g: &mut Graph, ps: &ParamStore, store: &EmbeddingStore, m: &PreparedMention) -> Result<Var> {
        self.heads(g, ps, store, m).map(|h| h.n3)
    }
}
