//! Mention-selection policy over a sliding window of unresolved mentions.
//!
//! The state is the list of linked pairs `[m_i; e_i]`, starting with a
//! learned initial pair. Each available action `a` is summarized by
//! `D_a = Σ_j Ψ^j [m_a; e^j]`. History elements are scored by
//! `c(s) = max_a D_aᵀ·B3·s`, the top `K` are softmax-weighted, and each action
//! gets the logit `Σ_j w_j · D_aᵀ·B4·ŝ_j`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::DiagonalBilinear;
use crate::tensor::{self, Graph, ParamId, ParamStore, Tensor, Var};

pub const DEFAULT_TOP_K: usize = 7;

/// The unresolved mentions in document order; the first `size` are selectable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionWindow {
    size: usize,
    unresolved: Vec<usize>,
}

impl ActionWindow {
    pub fn new(num_mentions: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("window size must be at least 1"));
        }
        Ok(Self {
            size,
            unresolved: (0..num_mentions).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn actions(&self) -> &[usize] {
        &self.unresolved[..self.size.min(self.unresolved.len())]
    }

    pub fn unresolved(&self) -> &[usize] {
        &self.unresolved
    }

    pub fn is_done(&self) -> bool {
        self.unresolved.is_empty()
    }

    /// Removes `mention`, which must be one of the current actions.
    pub fn advance(&mut self, mention: usize) -> Result<()> {
        match self.actions().iter().position(|&a| a == mention) {
            Some(i) => {
                self.unresolved.remove(i);
                Ok(())
            }
            None => Err(Error::invalid(format!(
                "mention {mention} is not in the action window {:?}",
                self.actions()
            ))),
        }
    }
}

/// Every mention order reachable under the window rule, in lexicographic order.
pub fn feasible_orderings(num_mentions: usize, window: usize) -> Result<Vec<Vec<usize>>> {
    if num_mentions > 9 {
        return Err(Error::invalid(format!(
            "ordering enumeration is limited to 9 mentions, got {num_mentions}"
        )));
    }
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(num_mentions);
    extend_orderings(&ActionWindow::new(num_mentions, window)?, &mut prefix, &mut out);
    Ok(out)
}

fn extend_orderings(w: &ActionWindow, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if w.is_done() {
        out.push(prefix.clone());
        return;
    }
    for &a in w.actions() {
        let mut next = w.clone();
        next.advance(a).expect("action taken from the window");
        prefix.push(a);
        extend_orderings(&next, prefix, out);
        prefix.pop();
    }
}

/// Linked pairs as graph rows, the initial pair first.
#[derive(Clone, Debug)]
pub struct LinkingState {
    history: Vec<Var>,
}

impl LinkingState {
    pub fn new(initial: Var) -> Self {
        Self { history: vec![initial] }
    }

    pub fn step(&self) -> usize {
        self.history.len() - 1
    }

    pub fn history(&self) -> &[Var] {
        &self.history
    }

    /// Appends `[mention_repr; entity_vec]`.
    pub fn push(&mut self, g: &mut Graph, mention_repr: Var, entity: Var) -> Result<()> {
        let pair = g.hconcat(&[mention_repr, entity])?;
        self.history.push(pair);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug)]
pub struct ActionChoice {
    /// Index into the window's action list.
    pub index: usize,
    pub log_prob: Var,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub b3: DiagonalBilinear,
    pub b4: DiagonalBilinear,
    pub init_pair: ParamId,
    pub top_k: usize,
}

impl Policy {
    pub fn new(ps: &mut ParamStore, dim: usize, top_k: usize) -> Result<Self> {
        if top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        Ok(Self {
            b3: DiagonalBilinear::identity(ps, "policy.b3", 2 * dim),
            b4: DiagonalBilinear::identity(ps, "policy.b4", 2 * dim),
            init_pair: ps.add("policy.init_pair", Tensor::zeros(1, 2 * dim)),
            top_k,
        })
    }

    pub fn initial_state(&self, g: &mut Graph, ps: &ParamStore) -> LinkingState {
        LinkingState::new(g.param(ps, self.init_pair))
    }

    /// `D_a`: `weights` is `1 × n`, `candidates` is `n × d`, `mention_repr` is `1 × d`.
    pub fn action_representation(g: &mut Graph, mention_repr: Var, weights: Var, candidates: Var) -> Result<Var> {
        let total = g.sum(weights);
        let mention = g.matmul(total, mention_repr)?;
        let entity = g.matmul(weights, candidates)?;
        g.hconcat(&[mention, entity])
    }

    /// `c(s^i)` for every history row, as a `1 × |history|` node.
    pub fn state_relevance(&self, g: &mut Graph, ps: &ParamStore, history: Var, actions: Var) -> Result<Var> {
        let b3 = g.param(ps, self.b3.diag);
        let weighted = g.mul_row(actions, b3)?;
        let ht = g.transpose(history);
        let table = g.matmul(weighted, ht)?;
        g.max_rows(table)
    }

    /// Log-probabilities over the stacked action representations (`A × 2d`).
    pub fn log_distribution(&self, g: &mut Graph, ps: &ParamStore, state: &LinkingState, actions: Var) -> Result<Var> {
        if g.shape(actions).0 == 0 {
            return Err(Error::Empty("action set"));
        }
        let history = g.vstack(state.history())?;
        let relevance = self.state_relevance(g, ps, history, actions)?;
        let keep = tensor::top_k_indices(g.value(relevance).data(), self.top_k);
        let kept = g.select_cols(relevance, &keep)?;
        let w = g.softmax(kept)?;
        let evidence = g.select_rows(history, &keep)?;
        let b4 = g.param(ps, self.b4.diag);
        let weighted = g.mul_row(actions, b4)?;
        let et = g.transpose(evidence);
        let table = g.matmul(weighted, et)?;
        let wt = g.transpose(w);
        let logits = g.matmul(table, wt)?;
        let logits = g.transpose(logits);
        g.log_softmax(logits)
    }

    pub fn select_action(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        state: &LinkingState,
        actions: Var,
        mode: SelectMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ActionChoice> {
        let logp = self.log_distribution(g, ps, state, actions)?;
        let probs: Vec<f64> = g.value(logp).data().iter().map(|l| l.exp()).collect();
        let index = match mode {
            SelectMode::Greedy => tensor::argmax(&probs),
            SelectMode::Sample => sample_index(&probs, rng),
        };
        let log_prob = g.select_cols(logp, &[index])?;
        Ok(ActionChoice { index, log_prob, probs })
    }
}

pub fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
