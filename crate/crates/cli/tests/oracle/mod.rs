//! Brute-force reimplementations used only by tests. Nothing here imports the
//! library; every value is recomputed from plain slices.

#![allow(dead_code)]

use std::collections::BTreeSet;

/// Every order reachable when each pick comes from the `w` earliest
/// unresolved mentions.
pub fn enumerate_orderings(l: usize, w: usize) -> Vec<Vec<usize>> {
    assert!(l <= 9, "enumeration is limited to 9 mentions");
    fn go(left: &[usize], w: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for k in 0..w.min(left.len()) {
            let mut rest = left.to_vec();
            let m = rest.remove(k);
            prefix.push(m);
            go(&rest, w, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    go(&(0..l).collect::<Vec<_>>(), w, &mut Vec::new(), &mut out);
    out
}

/// Count only: with `u` unresolved mentions there are `min(w, u)` choices,
/// each leaving `u − 1`.
pub fn count_orderings(u: usize, w: usize) -> u64 {
    if u == 0 {
        1
    } else {
        w.min(u) as u64 * count_orderings(u - 1, w)
    }
}

/// Un-normalized reward values (`L · R(L)`), straight from their definitions.
pub fn first_error_value(flags: &[bool]) -> f64 {
    let l = flags.len() as f64;
    let first = flags.iter().position(|f| !f).map_or(l + 1.0, |i| i as f64 + 1.0);
    first - l
}

/// Transition counts `[TT, TF, FF, FT]` with an implicit correct step 0.
pub fn transition_counts(flags: &[bool]) -> [usize; 4] {
    let mut c = [0; 4];
    let mut prev = true;
    for &f in flags {
        let k = match (prev, f) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        c[k] += 1;
        prev = f;
    }
    c
}

pub fn error_position_value(flags: &[bool]) -> f64 {
    let l = flags.len() as f64;
    let mut total = 0.0;
    for (i, f) in flags.iter().enumerate() {
        if !f {
            total += -1.0 + ((i + 1) as f64 - l) / l;
        }
    }
    total
}

pub fn flags_from_bits(bits: u32, len: usize) -> Vec<bool> {
    (0..len).map(|i| bits >> (len - 1 - i) & 1 == 1).collect()
}

/// The constraints published for the three worked-example sequences.
pub struct Fig5Target {
    pub first_error: f64,
    pub error_position: f64,
    /// Required `[TT, TF, FF]` counts, if published.
    pub transitions: Option<[usize; 3]>,
}

pub fn fig5_targets() -> [Fig5Target; 3] {
    [
        Fig5Target {
            first_error: -6.0,
            error_position: -24.0 / 7.0,
            transitions: None,
        },
        Fig5Target {
            first_error: -3.0,
            error_position: -27.0 / 7.0,
            transitions: Some([3, 1, 2]),
        },
        Fig5Target {
            first_error: -5.0,
            error_position: -23.0 / 7.0,
            transitions: None,
        },
    ]
}

/// All length-7 flag patterns consistent with each sequence's published values.
pub fn solve_fig5() -> [Vec<Vec<bool>>; 3] {
    fig5_targets().map(|t| {
        (0..1u32 << 7)
            .map(|b| flags_from_bits(b, 7))
            .filter(|f| {
                (first_error_value(f) - t.first_error).abs() < 1e-12
                    && (error_position_value(f) - t.error_position).abs() < 1e-12
                    && t.transitions.is_none_or(|want| transition_counts(f)[..3] == want)
            })
            .collect()
    })
}

fn weighted_dot(a: &[f64], diag: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(diag).zip(b).map(|((x, d), y)| x * d * y).sum()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn largest(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
    idx.truncate(k);
    idx
}

/// `D_a = [Σ_j ψ_j · m ; Σ_j ψ_j · e_j]`.
pub fn action_representation(mention: &[f64], weights: &[f64], candidates: &[Vec<f64>]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut d: Vec<f64> = mention.iter().map(|x| total * x).collect();
    for j in 0..mention.len() {
        d.push(weights.iter().zip(candidates).map(|(w, c)| w * c[j]).sum());
    }
    d
}

/// Action distribution from the history rows `s^i` and action rows `D_a`.
pub fn policy_distribution(
    history: &[Vec<f64>],
    actions: &[Vec<f64>],
    b3: &[f64],
    b4: &[f64],
    top_k: usize,
) -> Vec<f64> {
    let relevance: Vec<f64> = history
        .iter()
        .map(|s| {
            actions
                .iter()
                .map(|d| weighted_dot(d, b3, s))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let keep = largest(&relevance, top_k);
    let w = softmax(&keep.iter().map(|&i| relevance[i]).collect::<Vec<_>>());
    let logits: Vec<f64> = actions
        .iter()
        .map(|d| {
            keep.iter()
                .zip(&w)
                .map(|(&i, wi)| wi * weighted_dot(d, b4, &history[i]))
                .sum()
        })
        .collect();
    softmax(&logits)
}

/// Attention summary of `entities` keyed on `candidates`; `None` when empty.
pub fn attend(candidates: &[Vec<f64>], entities: &[Vec<f64>], diag: &[f64], k: usize) -> Option<Vec<f64>> {
    if entities.is_empty() {
        return None;
    }
    let scores: Vec<f64> = entities
        .iter()
        .map(|e| {
            candidates
                .iter()
                .map(|c| weighted_dot(c, diag, e))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let keep = largest(&scores, k);
    let w = softmax(&keep.iter().map(|&i| scores[i]).collect::<Vec<_>>());
    let mut f = vec![0.0; entities[0].len()];
    for (&i, wi) in keep.iter().zip(&w) {
        for (fj, ej) in f.iter_mut().zip(&entities[i]) {
            *fj += wi * ej;
        }
    }
    Some(f)
}

/// Per-candidate `cᵀ·diag·f`, zero without a feature.
pub fn feature_scores(candidates: &[Vec<f64>], diag: &[f64], f: Option<&[f64]>) -> Vec<f64> {
    match f {
        None => vec![0.0; candidates.len()],
        Some(f) => candidates.iter().map(|c| weighted_dot(c, diag, f)).collect(),
    }
}

/// Union of the out-neighbors of `linked`, ascending.
pub fn neighborhood(edges: &[(usize, usize)], linked: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = edges
        .iter()
        .filter(|(a, _)| linked.contains(a))
        .map(|&(_, b)| b)
        .collect();
    set.into_iter().collect()
}
