//! Delayed episode rewards computed from per-step correctness flags.
//!
//! Step indices are 1-based. Every reward has the form
//! `R(t) = γ^{L−t} · base / L`; the `*_base` helpers return `base / L`,
//! i.e. the value at `t = L`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    /// One flag per step in selection order; `true` means the linked entity is gold.
    pub flags: Vec<bool>,
    pub gamma: f64,
}

impl EpisodeOutcome {
    pub fn new(flags: Vec<bool>, gamma: f64) -> Result<Self> {
        if flags.is_empty() {
            return Err(Error::Empty("episode flags"));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        Ok(Self { flags, gamma })
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn first_error(&self) -> usize {
        self.flags.iter().position(|f| !f).map_or(self.len() + 1, |i| i + 1)
    }

    fn discount(&self, t: usize) -> Result<f64> {
        let l = self.len();
        if t == 0 || t > l {
            return Err(Error::invalid(format!("step {t} outside 1..={l}")));
        }
        Ok(self.gamma.powi((l - t) as i32))
    }
}

/// Transition rewards indexed by (previous flag, current flag).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRewards {
    pub tt: f64,
    pub tf: f64,
    pub ff: f64,
    pub ft: f64,
}

impl TransitionRewards {
    pub const FIXED: TransitionRewards = TransitionRewards {
        tt: 0.0,
        tf: -2.0,
        ff: -1.0,
        ft: 0.0,
    };

    pub fn get(&self, prev: bool, cur: bool) -> f64 {
        match (prev, cur) {
            (true, true) => self.tt,
            (true, false) => self.tf,
            (false, false) => self.ff,
            (false, true) => self.ft,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    #[serde(alias = "r1")]
    FirstError,
    #[serde(alias = "r2-1")]
    Transition,
    /// Failing transitions cost `−L · P̂` of the failing step's linked entity.
    #[serde(alias = "r2-2")]
    TransitionProb,
    #[serde(alias = "r3")]
    ErrorPosition,
}

impl RewardKind {
    pub fn needs_probabilities(self) -> bool {
        self == RewardKind::TransitionProb
    }
}

impl std::str::FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r1" | "first-error" => Ok(Self::FirstError),
            "r2-1" | "transition" => Ok(Self::Transition),
            "r2-2" | "transition-prob" => Ok(Self::TransitionProb),
            "r3" | "error-position" => Ok(Self::ErrorPosition),
            _ => Err(Error::invalid(format!("unknown reward `{s}`"))),
        }
    }
}

pub fn r1_base(o: &EpisodeOutcome) -> f64 {
    let l = o.len() as f64;
    (-l + o.first_error() as f64) / l
}

pub fn r1(o: &EpisodeOutcome, t: usize) -> Result<f64> {
    Ok(o.discount(t)? * r1_base(o))
}

/// `per_step_prob[τ]` is the probability of the entity linked at step `τ`;
/// it replaces `λ_TF` and `λ_FF` with `−L · P̂` at each failing step.
pub fn r2_base(o: &EpisodeOutcome, lambda: &TransitionRewards, per_step_prob: Option<&[f64]>) -> Result<f64> {
    let l = o.len();
    if let Some(p) = per_step_prob {
        if p.len() != l {
            return Err(Error::invalid(format!("{} step probabilities for {l} steps", p.len())));
        }
    }
    let mut prev = true;
    let mut total = 0.0;
    for (i, &cur) in o.flags.iter().enumerate() {
        total += match (per_step_prob, cur) {
            (Some(p), false) => -(l as f64) * p[i],
            _ => lambda.get(prev, cur),
        };
        prev = cur;
    }
    Ok(total / l as f64)
}

pub fn r2(o: &EpisodeOutcome, t: usize, lambda: &TransitionRewards, per_step_prob: Option<&[f64]>) -> Result<f64> {
    Ok(o.discount(t)? * r2_base(o, lambda, per_step_prob)?)
}

pub fn r3_base(o: &EpisodeOutcome) -> f64 {
    let l = o.len() as f64;
    let total: f64 = o
        .flags
        .iter()
        .enumerate()
        .filter(|(_, f)| !**f)
        .map(|(i, _)| -1.0 + ((i + 1) as f64 - l) / l)
        .sum();
    total / l
}

pub fn r3(o: &EpisodeOutcome, t: usize) -> Result<f64> {
    Ok(o.discount(t)? * r3_base(o))
}

/// Reward at step `t` for any reward kind.
pub fn reward(
    kind: RewardKind,
    o: &EpisodeOutcome,
    t: usize,
    lambda: &TransitionRewards,
    per_step_prob: Option<&[f64]>,
) -> Result<f64> {
    match kind {
        RewardKind::FirstError => r1(o, t),
        RewardKind::Transition => r2(o, t, lambda, None),
        RewardKind::TransitionProb => {
            let p = per_step_prob
                .ok_or_else(|| Error::invalid("probability-weighted transition reward needs per-step probabilities"))?;
            r2(o, t, lambda, Some(p))
        }
        RewardKind::ErrorPosition => r3(o, t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(bits: &[u8]) -> EpisodeOutcome {
        EpisodeOutcome::new(bits.iter().map(|&b| b == 1).collect(), 0.9).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn first_error_examples() {
        let s2 = flags(&[1, 1, 1, 0, 0, 0, 1]);
        assert!(close(7.0 * r1_base(&s2), -3.0));
        assert!(close(r1(&flags(&[1; 5]), 5).unwrap(), 0.2));
        let worst = flags(&[0, 1, 1, 1]);
        assert!(close(r1_base(&worst), -3.0 / 4.0));
    }

    #[test]
    fn transition_examples() {
        let s2 = flags(&[1, 1, 1, 0, 0, 0, 1]);
        let base = r2_base(&s2, &TransitionRewards::FIXED, None).unwrap();
        assert!(close(7.0 * base, -4.0));
        let alt = flags(&[1, 0, 1, 0]);
        assert!(close(
            4.0 * r2_base(&alt, &TransitionRewards::FIXED, None).unwrap(),
            -4.0
        ));
        assert_eq!(r2_base(&flags(&[1; 6]), &TransitionRewards::FIXED, None).unwrap(), 0.0);
    }

    #[test]
    fn nonzero_false_to_true_is_counted() {
        let lambda = TransitionRewards {
            ft: 5.0,
            ..TransitionRewards::FIXED
        };
        let s2 = flags(&[1, 1, 1, 0, 0, 0, 1]);
        assert!(close(7.0 * r2_base(&s2, &lambda, None).unwrap(), 1.0));
    }

    #[test]
    fn probability_weighted_transitions() {
        let o = flags(&[1, 0, 0, 1]);
        let p = [0.9, 0.25, 0.5, 0.8];
        let base = r2_base(&o, &TransitionRewards::FIXED, Some(&p)).unwrap();
        assert!(close(4.0 * base, -4.0 * 0.25 - 4.0 * 0.5));
        let missing = reward(RewardKind::TransitionProb, &o, 4, &TransitionRewards::FIXED, None);
        assert!(missing.is_err());
        assert!(r2_base(&o, &TransitionRewards::FIXED, Some(&p[..3])).is_err());
    }

    #[test]
    fn error_position_examples() {
        assert!(close(7.0 * r3_base(&flags(&[0, 1, 0, 1, 1, 1, 1])), -24.0 / 7.0));
        assert!(close(7.0 * r3_base(&flags(&[1, 1, 1, 0, 0, 0, 1])), -27.0 / 7.0));
        assert!(close(7.0 * r3_base(&flags(&[1, 0, 0, 1, 1, 1, 1])), -23.0 / 7.0));
        assert_eq!(r3_base(&flags(&[1; 3])), 0.0);
    }

    #[test]
    fn discounting() {
        let o = flags(&[1, 0, 1, 1, 0]);
        for t in 1..=5 {
            let d = 0.9f64.powi(5 - t as i32);
            assert!(close(r1(&o, t).unwrap(), d * r1(&o, 5).unwrap()));
            assert!(close(r3(&o, t).unwrap(), d * r3(&o, 5).unwrap()));
        }
        assert!(r1(&o, 0).is_err());
        assert!(r1(&o, 6).is_err());
    }

    #[test]
    fn invalid_outcomes() {
        assert!(EpisodeOutcome::new(vec![], 0.9).is_err());
        assert!(EpisodeOutcome::new(vec![true], 0.0).is_err());
        assert!(EpisodeOutcome::new(vec![true], 1.5).is_err());
        assert!(EpisodeOutcome::new(vec![true], 1.0).is_ok());
    }

    #[test]
    fn reward_kind_parses() {
        assert_eq!("r3".parse::<RewardKind>().unwrap(), RewardKind::ErrorPosition);
        assert_eq!("r2-2".parse::<RewardKind>().unwrap(), RewardKind::TransitionProb);
        assert!("r4".parse::<RewardKind>().is_err());
    }
}
