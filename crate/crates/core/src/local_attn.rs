//! Attention local scorer: `Ψ(e, ŵ) = eᵀ · B1 · f(ŵ)`.
//!
//! `f(ŵ)` uses hard attention over the context words. Each word is scored by
//! its best match against the mention's candidates, `max_c cᵀ·A·w`; only
//! the `R` highest-scoring words are kept, and `f(ŵ)` is their
//! softmax-weighted sum.

use crate::corpus::{EmbeddingStore, PreparedMention};
use crate::error::{Error, Result};
use crate::nn::DiagonalBilinear;
use crate::tensor::{self, Graph, ParamStore, Tensor, Var};

pub const DEFAULT_TOP_R: usize = 25;

#[derive(Clone, Debug)]
pub struct LocalAttn {
    pub b1: DiagonalBilinear,
    pub context_attn: DiagonalBilinear,
    pub top_r: usize,
}

impl LocalAttn {
    pub fn new(ps: &mut ParamStore, dim: usize, top_r: usize) -> Result<Self> {
        if top_r == 0 {
            return Err(Error::invalid("top_r must be at least 1"));
        }
        Ok(Self {
            b1: DiagonalBilinear::identity(ps, "local_attn.b1", dim),
            context_attn: DiagonalBilinear::identity(ps, "local_attn.context_attn", dim),
            top_r,
        })
    }

    /// `f(ŵ)` as a `1 × d` node.
    pub fn context_feature(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        store: &EmbeddingStore,
        m: &PreparedMention,
    ) -> Result<Var> {
        if m.context.is_empty() {
            return Err(Error::Empty("context window"));
        }
        let words = word_matrix(store, &m.context);
        let words_t = g.constant(tensor::transpose(&words));
        let words = g.constant(words);
        let cands = g.constant(entity_matrix(store, &m.candidates));
        let attn = g.param(ps, self.context_attn.diag);
        let weighted = g.mul_row(cands, attn)?;
        let table = g.matmul(weighted, words_t)?;
        let raw = g.max_rows(table)?;
        let keep = tensor::top_k_indices(g.value(raw).data(), self.top_r);
        let kept = g.select_cols(raw, &keep)?;
        let beta = g.softmax(kept)?;
        let kept_words = g.select_rows(words, &keep)?;
        g.matmul(beta, kept_words)
    }

    /// One score per candidate, aligned with `m.candidates`.
    pub fn scores(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        store: &EmbeddingStore,
        m: &PreparedMention,
        feature: Var,
    ) -> Result<Var> {
        if m.candidates.is_empty() {
            return Err(Error::Empty("candidate set"));
        }
        let cands = g.constant(entity_matrix(store, &m.candidates));
        let b1 = g.param(ps, self.b1.diag);
        let weighted = g.mul_row(cands, b1)?;
        let ft = g.transpose(feature);
        let col = g.matmul(weighted, ft)?;
        Ok(g.transpose(col))
    }
}

pub(crate) fn word_matrix(store: &EmbeddingStore, idx: &[usize]) -> Tensor {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| store.words.row(i)).collect();
    Tensor::from_rows(&rows).expect("store rows share one dimension")
}

pub(crate) fn entity_matrix(store: &EmbeddingStore, idx: &[usize]) -> Tensor {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| store.entities.row(i)).collect();
    Tensor::from_rows(&rows).expect("store rows share one dimension")
}

/// Gradient-free `f(ŵ)` on plain slices.
pub fn context_feature_values(words: &[&[f64]], candidates: &[&[f64]], attn: &[f64], top_r: usize) -> Result<Vec<f64>> {
    if words.is_empty() {
        return Err(Error::Empty("context window"));
    }
    let raw: Vec<f64> = words
        .iter()
        .map(|w| {
            candidates
                .iter()
                .map(|c| tensor::bilinear_score(c, attn, w))
                .try_fold(f64::NEG_INFINITY, |acc, s| s.map(|s| acc.max(s)))
        })
        .collect::<Result<_>>()?;
    let keep = tensor::top_k_indices(&raw, top_r);
    let kept: Vec<f64> = keep.iter().map(|&i| raw[i]).collect();
    let beta = tensor::softmax(&kept)?;
    let mut f = vec![0.0; attn.len()];
    for (b, &i) in beta.iter().zip(&keep) {
        for (fj, wj) in f.iter_mut().zip(words[i]) {
            *fj += b * wj;
        }
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EmbeddingStore;

    fn store_with(words: &[(&str, Vec<f64>)], ents: &[(&str, Vec<f64>)]) -> EmbeddingStore {
        let dim = words[0].1.len();
        let mut s = EmbeddingStore::new(dim);
        for (id, v) in words {
            s.words.insert(*id, v).unwrap();
        }
        for (id, v) in ents {
            s.entities.insert(*id, v).unwrap();
        }
        s
    }

    fn mention(s: &EmbeddingStore, ctx: &[&str], cands: &[&str]) -> PreparedMention {
        PreparedMention {
            id: "m".into(),
            context: ctx.iter().map(|w| s.words.index_of(w).unwrap()).collect(),
            context_split: 0,
            surface: vec![],
            candidates: cands.iter().map(|e| s.entities.index_of(e).unwrap()).collect(),
            priors: vec![1.0 / cands.len() as f64; cands.len()],
            type_scores: vec![0.0; cands.len()],
            gold_entity: s.entities.index_of(cands[0]).unwrap(),
            gold_index: Some(0),
        }
    }

    fn feature(model: &LocalAttn, ps: &ParamStore, s: &EmbeddingStore, m: &PreparedMention) -> Vec<f64> {
        let mut g = Graph::new();
        let f = model.context_feature(&mut g, ps, s, m).unwrap();
        g.value(f).data().to_vec()
    }

    #[test]
    fn single_word_feature_is_that_word() {
        let s = store_with(&[("a", vec![0.3, -0.2])], &[("E", vec![1.0, 0.0])]);
        let mut ps = ParamStore::default();
        let model = LocalAttn::new(&mut ps, 2, 25).unwrap();
        let m = mention(&s, &["a"], &["E"]);
        assert_eq!(feature(&model, &ps, &s, &m), vec![0.3, -0.2]);
    }

    #[test]
    fn tied_words_average() {
        let s = store_with(
            &[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])],
            &[("E", vec![1.0, 1.0])],
        );
        let mut ps = ParamStore::default();
        let model = LocalAttn::new(&mut ps, 2, 2).unwrap();
        let m = mention(&s, &["a", "b"], &["E"]);
        assert_eq!(feature(&model, &ps, &s, &m), vec![0.5, 0.5]);
    }

    #[test]
    fn top_one_selects_brute_force_argmax_word() {
        let s = store_with(
            &[
                ("a", vec![0.1, 0.9, -0.3]),
                ("b", vec![0.8, -0.1, 0.2]),
                ("c", vec![-0.5, 0.4, 0.6]),
            ],
            &[("E", vec![0.2, 0.7, 0.1]), ("F", vec![0.9, -0.4, 0.3])],
        );
        let mut ps = ParamStore::default();
        let model = LocalAttn::new(&mut ps, 3, 1).unwrap();
        ps.value_mut(model.context_attn.diag)
            .data_mut()
            .copy_from_slice(&[0.5, 2.0, -1.0]);
        let m = mention(&s, &["a", "b", "c"], &["E", "F"]);
        let attn = [0.5, 2.0, -1.0];
        let mut best = (f64::NEG_INFINITY, "");
        for w in ["a", "b", "c"] {
            let wv = s.words.get(w).unwrap();
            let score = ["E", "F"]
                .iter()
                .map(|e| {
                    let ev = s.entities.get(e).unwrap();
                    (0..3).map(|i| ev[i] * attn[i] * wv[i]).sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if score > best.0 {
                best = (score, w);
            }
        }
        assert_eq!(feature(&model, &ps, &s, &m), s.words.get(best.1).unwrap());
    }

    #[test]
    fn empty_context_is_an_error() {
        let s = store_with(&[("a", vec![1.0])], &[("E", vec![1.0])]);
        let mut ps = ParamStore::default();
        let model = LocalAttn::new(&mut ps, 1, 3).unwrap();
        let mut m = mention(&s, &["a"], &["E"]);
        m.context.clear();
        let mut g = Graph::new();
        assert!(model.context_feature(&mut g, &ps, &s, &m).is_err());
    }

    fn scores_with_feature(b1: &[f64], f: &[f64], cands: &[Vec<f64>]) -> Vec<f64> {
        let dim = f.len();
        let mut s = EmbeddingStore::new(dim);
        s.words.insert("w", &vec![0.0; dim]).unwrap();
        let names: Vec<String> = (0..cands.len()).map(|i| format!("E{i}")).collect();
        for (n, v) in names.iter().zip(cands) {
            s.entities.insert(n.clone(), v).unwrap();
        }
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let m = mention(&s, &["w"], &refs);
        let mut ps = ParamStore::default();
        let model = LocalAttn::new(&mut ps, dim, 25).unwrap();
        ps.value_mut(model.b1.diag).data_mut().copy_from_slice(b1);
        let mut g = Graph::new();
        let fv = g.constant(Tensor::row(f.to_vec()));
        let out = model.scores(&mut g, &ps, &s, &m, fv).unwrap();
        g.value(out).data().to_vec()
    }

    #[test]
    fn identity_b1_prefers_the_entity_the_context_points_at() {
        let gold = vec![0.6, 0.8, 0.0];
        let cands = vec![vec![1.0, 0.0, 0.0], gold.clone(), vec![0.0, 0.0, 1.0]];
        let s = scores_with_feature(&[1.0; 3], &gold, &cands);
        assert_eq!(tensor::argmax(&s), 1);
        assert!(s[1] > s[0] && s[1] > s[2]);
    }

    #[test]
    fn zero_b1_zeroes_scores() {
        let cands = vec![vec![1.0, 2.0], vec![-3.0, 0.5]];
        assert_eq!(scores_with_feature(&[0.0, 0.0], &[0.4, 0.1], &cands), vec![0.0, 0.0]);
    }

    #[test]
    fn scores_match_hand_arithmetic() {
        let b1 = [0.5, -1.0, 2.0];
        let f = [0.2, 0.4, -0.1];
        let cands = vec![vec![1.0, 0.0, 1.0], vec![0.5, 0.5, 0.5], vec![-1.0, 2.0, 0.0]];
        let s = scores_with_feature(&b1, &f, &cands);
        // 0.1 - 0.2 ; 0.05 - 0.2 - 0.1 ; -0.1 - 0.8
        let expected = [-0.1, -0.25, -0.9];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn candidate_permutation_permutes_scores() {
        let cands = vec![vec![1.0, 0.2], vec![-0.3, 0.9], vec![0.4, 0.4]];
        let s = scores_with_feature(&[0.7, 1.3], &[0.5, -0.2], &cands);
        let perm = vec![cands[2].clone(), cands[0].clone(), cands[1].clone()];
        let p = scores_with_feature(&[0.7, 1.3], &[0.5, -0.2], &perm);
        assert_eq!(p, vec![s[2], s[0], s[1]]);
    }

    #[test]
    fn plain_feature_matches_graph_feature() {
        let s = store_with(
            &[("a", vec![0.1, 0.9]), ("b", vec![0.8, -0.1]), ("c", vec![-0.5, 0.4])],
            &[("E", vec![0.2, 0.7]), ("F", vec![0.9, -0.4])],
        );
        let mut ps = ParamStore::default();
        let model = LocalAttn::new(&mut ps, 2, 2).unwrap();
        let m = mention(&s, &["a", "b", "c"], &["E", "F"]);
        let words: Vec<&[f64]> = m.context.iter().map(|&i| s.words.row(i)).collect();
        let cands: Vec<&[f64]> = m.candidates.iter().map(|&i| s.entities.row(i)).collect();
        let plain = context_feature_values(&words, &cands, &[1.0, 1.0], 2).unwrap();
        assert_eq!(plain, feature(&model, &ps, &s, &m));
    }
}
