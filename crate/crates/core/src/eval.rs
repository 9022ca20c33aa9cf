//! Evaluation under different mention orderings.
//!
//! Every mention receives exactly one prediction, so micro-F1 equals
//! micro-accuracy: correct links over all mentions.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PreparedDoc;
use crate::error::{Error, Result};
use crate::model::{Env, LocalValues, Model};
use crate::policy::{feasible_orderings, SelectMode};
use crate::rollout::{eval_episode, Episode, OrderSource};
use crate::trainer::Window;

pub const MAX_EXHAUSTIVE_MENTIONS: usize = 9;

pub fn micro_f1(predictions: &[usize], golds: &[usize]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("prediction set"));
    }
    let correct = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / predictions.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub enum OrderingStrategy {
    /// Text order.
    Offset,
    /// Fewest candidates first, ties in text order.
    Size,
    Random {
        seed: u64,
    },
    /// Nearest-neighbor chain over mention representations from the first mention.
    Similarity,
    Dynamic {
        window: Window,
    },
    /// One order per document.
    Forced(Vec<Vec<usize>>),
    /// The most accurate of all orders, per document.
    ExhaustiveBest,
}

impl fmt::Display for OrderingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Offset => f.write_str("offset"),
            Self::Size => f.write_str("size"),
            Self::Random { seed } => write!(f, "random:{seed}"),
            Self::Similarity => f.write_str("similarity"),
            Self::Dynamic { window } => write!(f, "dynamic:{window}"),
            Self::Forced(_) => f.write_str("forced"),
            Self::ExhaustiveBest => f.write_str("exhaustive-best"),
        }
    }
}

impl FromStr for OrderingStrategy {
    type Err = Error;

    /// `offset`, `size`, `similarity`, `exhaustive-best`, `random[:seed]`, `dynamic[:window]`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = s.split_once(':').map_or((s, None), |(a, b)| (a, Some(b)));
        match (name, arg) {
            ("offset", None) => Ok(Self::Offset),
            ("size", None) => Ok(Self::Size),
            ("similarity", None) => Ok(Self::Similarity),
            ("exhaustive-best", None) => Ok(Self::ExhaustiveBest),
            ("random", a) => Ok(Self::Random {
                seed: a
                    .map_or(Ok(0), str::parse)
                    .map_err(|_| Error::invalid(format!("bad random seed in `{s}`")))?,
            }),
            ("dynamic", a) => Ok(Self::Dynamic {
                window: a.map_or(Ok(Window::Fixed(4)), str::parse)?,
            }),
            _ => Err(Error::invalid(format!("unknown ordering `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocResult {
    pub id: String,
    pub accuracy: f64,
    pub order: Vec<usize>,
    pub flags: Vec<bool>,
    /// Entity id linked to each mention, in text order.
    pub predictions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub micro_f1: f64,
    pub correct: usize,
    pub total: usize,
    /// Mean over mentions of `|step − text position|`.
    pub mean_displacement: f64,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub documents: Vec<DocResult>,
}

fn doc_result(env: &Env, doc: &PreparedDoc, episode: &Episode) -> DocResult {
    let mut predictions = vec![String::new(); doc.len()];
    for s in &episode.steps {
        predictions[s.mention] = env.store.entities.id(s.predicted_entity).to_string();
    }
    let flags: Vec<bool> = episode.flags();
    DocResult {
        id: doc.id.clone(),
        accuracy: episode.correct() as f64 / doc.len() as f64,
        order: episode.order(),
        flags,
        predictions,
    }
}

fn size_order(doc: &PreparedDoc) -> Vec<usize> {
    let mut order: Vec<usize> = (0..doc.len()).collect();
    order.sort_by_key(|&i| doc.mentions[i].candidates.len());
    order
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn similarity_order(locals: &[LocalValues]) -> Vec<usize> {
    let l = locals.len();
    let mut order = vec![0];
    let mut left: Vec<usize> = (1..l).collect();
    while !left.is_empty() {
        let prev = locals[*order.last().unwrap()].repr.data();
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (k, &c) in left.iter().enumerate() {
            let s = cosine(prev, locals[c].repr.data());
            if s > best_sim {
                best_sim = s;
                best = k;
            }
        }
        order.push(left.remove(best));
    }
    order
}

fn best_episode(model: &Model, env: &Env, doc: &PreparedDoc, locals: &[LocalValues]) -> Result<Episode> {
    if doc.len() > MAX_EXHAUSTIVE_MENTIONS {
        return Err(Error::invalid(format!(
            "exhaustive ordering search is limited to {MAX_EXHAUSTIVE_MENTIONS} mentions; `{}` has {}",
            doc.id,
            doc.len()
        )));
    }
    let mut best: Option<Episode> = None;
    for order in feasible_orderings(doc.len(), doc.len())? {
        let ep = eval_episode(model, env, doc, locals, OrderSource::Forced(&order))?;
        if best.as_ref().is_none_or(|b| ep.correct() > b.correct()) {
            let perfect = ep.correct() == doc.len();
            best = Some(ep);
            if perfect {
                break;
            }
        }
    }
    Ok(best.expect("at least one ordering"))
}

/// The episode a strategy produces on document `index`.
pub fn strategy_episode(
    model: &Model,
    env: &Env,
    doc: &PreparedDoc,
    index: usize,
    strategy: &OrderingStrategy,
) -> Result<Episode> {
    let locals = model.local_values(env, doc)?;
    let forced = |order: Vec<usize>| eval_episode(model, env, doc, &locals, OrderSource::Forced(&order));
    match strategy {
        OrderingStrategy::Offset => forced((0..doc.len()).collect()),
        OrderingStrategy::Size => forced(size_order(doc)),
        OrderingStrategy::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(index as u64);
            let mut order: Vec<usize> = (0..doc.len()).collect();
            order.shuffle(&mut rng);
            forced(order)
        }
        OrderingStrategy::Similarity => forced(similarity_order(&locals)),
        OrderingStrategy::Forced(orders) => {
            let order = orders
                .get(index)
                .ok_or_else(|| Error::invalid(format!("no forced order for document {index}")))?;
            forced(order.clone())
        }
        OrderingStrategy::Dynamic { window } => eval_episode(
            model,
            env,
            doc,
            &locals,
            OrderSource::Policy {
                window: window.size(doc.len()),
                mode: SelectMode::Greedy,
            },
        ),
        OrderingStrategy::ExhaustiveBest => best_episode(model, env, doc, &locals),
    }
}

pub fn evaluate(model: &Model, env: &Env, docs: &[PreparedDoc], strategy: &OrderingStrategy) -> Result<EvalReport> {
    let episodes: Vec<Episode> = docs
        .par_iter()
        .enumerate()
        .map(|(i, d)| strategy_episode(model, env, d, i, strategy))
        .collect::<Result<_>>()?;
    let mut predictions = Vec::new();
    let mut golds = Vec::new();
    let mut displacement = 0.0;
    for (doc, ep) in docs.iter().zip(&episodes) {
        for (t, s) in ep.steps.iter().enumerate() {
            predictions.push(s.predicted_entity);
            // A missing gold can never match a prediction.
            golds.push(if doc.mentions[s.mention].gold_index.is_some() {
                doc.mentions[s.mention].gold_entity
            } else {
                usize::MAX
            });
            displacement += (t as f64 - s.mention as f64).abs();
        }
    }
    let micro = micro_f1(&predictions, &golds)?;
    let correct = predictions.iter().zip(&golds).filter(|(p, g)| p == g).count();
    Ok(EvalReport {
        strategy: strategy.to_string(),
        micro_f1: micro,
        correct,
        total: predictions.len(),
        mean_displacement: displacement / predictions.len() as f64,
        config_hash: None,
        seed: None,
        documents: docs.iter().zip(&episodes).map(|(d, e)| doc_result(env, d, e)).collect(),
    })
}

/// Greedy dynamic-order micro-F1 with predicted history.
pub fn dynamic_f1(model: &Model, env: &Env, docs: &[PreparedDoc], window: Window) -> Result<f64> {
    evaluate(model, env, docs, &OrderingStrategy::Dynamic { window }).map(|r| r.micro_f1)
}
