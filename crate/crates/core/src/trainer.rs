//! Joint training: margin ranking loss on the candidate selector plus a
//! REINFORCE term on the mention-ordering policy, with gold history.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PreparedDoc;
use crate::error::{Error, Result};
use crate::eval::dynamic_f1;
use crate::model::{Env, Model};
use crate::nn::Adam;
use crate::policy::SelectMode;
use crate::rewards::{self, EpisodeOutcome, RewardKind, TransitionRewards};
use crate::rollout::{rollout, Episode, LinkMode, OrderSource};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Sliding-window size; `All` makes every unresolved mention selectable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "WindowRepr", into = "WindowRepr")]
pub enum Window {
    Fixed(usize),
    All,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WindowRepr {
    Size(usize),
    Name(String),
}

impl TryFrom<WindowRepr> for Window {
    type Error = Error;

    fn try_from(r: WindowRepr) -> Result<Self> {
        match r {
            WindowRepr::Size(n) => Window::fixed(n),
            WindowRepr::Name(s) => s.parse(),
        }
    }
}

impl From<Window> for WindowRepr {
    fn from(w: Window) -> Self {
        match w {
            Window::Fixed(n) => WindowRepr::Size(n),
            Window::All => WindowRepr::Name("L".into()),
        }
    }
}

impl Window {
    pub fn fixed(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("window size must be at least 1"));
        }
        Ok(Window::Fixed(n))
    }

    pub fn size(self, num_mentions: usize) -> usize {
        match self {
            Window::Fixed(n) => n,
            Window::All => num_mentions.max(1),
        }
    }
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "L" | "all" => Ok(Window::All),
            t => t
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("window must be a positive integer or `L`, got `{s}`")))
                .and_then(Window::fixed),
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Fixed(n) => write!(f, "{n}"),
            Window::All => f.write_str("L"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Weight of the policy-gradient term.
    pub gamma1: f64,
    /// Hinge margin.
    pub beta: f64,
    pub lr: f64,
    pub lr_after: f64,
    /// Validation micro-F1 above which `lr_after` replaces `lr`.
    pub lr_drop_threshold: f64,
    pub epochs: usize,
    pub window: Window,
    pub reward: RewardKind,
    pub lambda: TransitionRewards,
    pub episodes_per_doc: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            gamma1: 1e-4,
            beta: 0.01,
            lr: 1e-2,
            lr_after: 5e-3,
            lr_drop_threshold: 0.9,
            epochs: 20,
            window: Window::Fixed(4),
            reward: RewardKind::ErrorPosition,
            lambda: TransitionRewards::FIXED,
            episodes_per_doc: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.gamma1 > 0.0 && self.gamma1.is_finite()) {
            return Err(Error::Config(format!("gamma1 must be positive, got {}", self.gamma1)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lr > 0.0 && self.lr_after > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.epochs == 0 || self.episodes_per_doc == 0 {
            return Err(Error::Config("epochs and episodes_per_doc must be at least 1".into()));
        }
        Ok(())
    }
}

/// `Σ_t R(t) · log π(a_t | S_t)`; its gradient is the REINFORCE estimate.
pub fn reinforce_objective(g: &mut Graph, sampled: bool, log_probs: &[Var], rewards: &[f64]) -> Result<Var> {
    if !sampled {
        return Err(Error::invalid(
            "policy-gradient updates need sampled episodes, not greedy ones",
        ));
    }
    if log_probs.len() != rewards.len() {
        return Err(Error::invalid(format!(
            "{} log-probabilities for {} rewards",
            log_probs.len(),
            rewards.len()
        )));
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for (&lp, &r) in log_probs.iter().zip(rewards) {
        let term = g.scale(lp, r);
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// `Σ_e max(0, β − P̂(gold) + P̂(e))` over every candidate, gold included.
pub fn hinge(g: &mut Graph, distribution: Var, gold: usize, beta: f64) -> Result<Var> {
    let n = g.shape(distribution).1;
    let pg = g.select_cols(distribution, &[gold])?;
    let ones = g.constant(Tensor::filled(1, n, 1.0));
    let pg = g.matmul(pg, ones)?;
    let diff = g.sub(distribution, pg)?;
    let margin = g.constant(Tensor::filled(1, n, beta));
    let h = g.add(diff, margin)?;
    let h = g.relu(h);
    Ok(g.sum(h))
}

/// Margin loss over an episode's steps; mentions whose gold is not a candidate are skipped.
pub fn margin_loss(
    g: &mut Graph,
    doc: &PreparedDoc,
    episode: &Episode,
    distributions: &[Var],
    beta: f64,
) -> Result<Var> {
    let mut total = g.constant(Tensor::scalar(0.0));
    for (step, &p) in episode.steps.iter().zip(distributions) {
        match doc.mentions[step.mention].gold_index {
            Some(gold) => {
                let h = hinge(g, p, gold, beta)?;
                total = g.add(total, h)?;
            }
            None => log::debug!(
                "mention `{}` has no gold candidate; skipped",
                doc.mentions[step.mention].id
            ),
        }
    }
    Ok(total)
}

/// `R(t)` for `t = 1..=L`.
pub fn episode_rewards(episode: &Episode, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let outcome = EpisodeOutcome::new(episode.flags(), cfg.gamma)?;
    let probs = episode.probs();
    (1..=outcome.len())
        .map(|t| rewards::reward(cfg.reward, &outcome, t, &cfg.lambda, Some(&probs)))
        .collect()
}

pub struct EpisodeResult {
    pub episode: Episode,
    pub rewards: Vec<f64>,
    pub margin: f64,
    pub loss: f64,
    pub grads: Gradients,
}

/// One teacher-forced, sampled episode and the gradient of
/// `L_es − γ₁ Σ_t R(t) log π(a_t | S_t)`.
pub fn train_episode(
    model: &Model,
    env: &Env,
    doc: &PreparedDoc,
    cfg: &TrainConfig,
    rng: ChaCha8Rng,
) -> Result<EpisodeResult> {
    let mut sample_rng = rng.clone();
    sample_rng.set_stream(sample_rng.get_stream() ^ 1);
    let mut g = Graph::training(rng);
    let inputs = env.doc_inputs(doc);
    let locals = model.locals(&mut g, env, doc)?;
    let order = OrderSource::Policy {
        window: cfg.window.size(doc.len()),
        mode: SelectMode::Sample,
    };
    let (episode, vars) = rollout(
        &mut g,
        model,
        env,
        doc,
        &inputs,
        &locals,
        order,
        LinkMode::TeacherForced,
        &mut sample_rng,
    )?;
    let rewards = episode_rewards(&episode, cfg)?;
    let margin = margin_loss(&mut g, doc, &episode, &vars.distributions, cfg.beta)?;
    let j = reinforce_objective(&mut g, episode.sampled, &vars.log_probs, &rewards)?;
    let pg = g.scale(j, -cfg.gamma1);
    let loss = g.add(margin, pg)?;
    let grads = g.backward(loss)?;
    Ok(EpisodeResult {
        margin: g.scalar(margin),
        loss: g.scalar(loss),
        episode,
        rewards,
        grads,
    })
}

fn episode_rng(seed: u64, epoch: usize, doc: usize, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 40) | ((doc as u64) << 12) | ((episode as u64) << 1));
    rng
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub margin: f64,
    /// Mean of `R(L)` over training episodes.
    pub mean_reward: f64,
    pub train_accuracy: f64,
    pub valid_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_valid_f1: Option<f64>,
}

/// One optimizer step from all episodes of one document.
pub fn train_document(
    model: &mut Model,
    env: &Env,
    doc: &PreparedDoc,
    cfg: &TrainConfig,
    adam: &mut Adam,
    rngs: Vec<ChaCha8Rng>,
) -> Result<Vec<EpisodeResult>> {
    let snapshot: &Model = model;
    let results: Vec<EpisodeResult> = rngs
        .into_par_iter()
        .map(|rng| train_episode(snapshot, env, doc, cfg, rng))
        .collect::<Result<_>>()?;
    let scale = 1.0 / results.len() as f64;
    model.params.zero_grad();
    for r in &results {
        model.params.accumulate(&r.grads, scale);
    }
    adam.step(&mut model.params);
    model.params.zero_grad();
    Ok(results)
}

pub fn train(
    model: &mut Model,
    env: &Env,
    train_docs: &[PreparedDoc],
    valid_docs: &[PreparedDoc],
    cfg: &TrainConfig,
    seed: u64,
    diagnostics: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_docs.is_empty() {
        return Err(Error::Empty("training documents"));
    }
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, crate::tensor::ParamStore)> = None;
    let mut dropped = false;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_docs.len()).collect();
        order.shuffle(&mut order_rng);
        let mut stats = EpochStats {
            epoch,
            lr: adam.lr,
            ..EpochStats::default()
        };
        let (mut episodes, mut steps, mut correct) = (0usize, 0usize, 0usize);
        for &d in &order {
            let doc = &train_docs[d];
            let rngs = (0..cfg.episodes_per_doc)
                .map(|e| episode_rng(seed, epoch, d, e))
                .collect();
            let results = train_document(model, env, doc, cfg, &mut adam, rngs)?;
            for r in &results {
                if !r.loss.is_finite() || !model.params.all_finite() {
                    if let Some(dir) = diagnostics {
                        let path = dir.join("diverged.json");
                        crate::checkpoint::save_params(&path, &model.params)?;
                        log::error!("non-finite loss; parameters written to {}", path.display());
                    }
                    return Err(Error::Diverged {
                        epoch,
                        doc: doc.id.clone(),
                    });
                }
                stats.loss += r.loss;
                stats.margin += r.margin;
                stats.mean_reward += r.rewards.last().copied().unwrap_or(0.0);
                correct += r.episode.correct();
                steps += r.episode.steps.len();
                episodes += 1;
            }
        }
        stats.loss /= episodes as f64;
        stats.margin /= episodes as f64;
        stats.mean_reward /= episodes as f64;
        stats.train_accuracy = correct as f64 / steps.max(1) as f64;
        if !valid_docs.is_empty() {
            let f1 = dynamic_f1(model, env, valid_docs, cfg.window)?;
            stats.valid_f1 = Some(f1);
            if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                best = Some((f1, model.params.clone()));
                report.best_epoch = epoch;
                report.best_valid_f1 = Some(f1);
            }
            if !dropped && f1 > cfg.lr_drop_threshold {
                adam.lr = cfg.lr_after;
                dropped = true;
            }
        } else {
            report.best_epoch = epoch;
        }
        log::info!(
            "epoch {epoch}: loss {:.5} reward {:.4} train acc {:.4} valid {:?}",
            stats.loss,
            stats.mean_reward,
            stats.train_accuracy,
            stats.valid_f1
        );
        report.epochs.push(stats);
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(report)
}
