//! Linking episodes: repeatedly pick a mention, score its candidates, link.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PreparedDoc;
use crate::error::{Error, Result};
use crate::model::{Env, LocalVars, Model};
use crate::policy::{ActionWindow, Policy, SelectMode};
use crate::selector::CandidateInputs;
use crate::tensor::{argmax, Graph, Var};

/// Where the next mention comes from.
#[derive(Clone, Copy, Debug)]
pub enum OrderSource<'a> {
    Policy {
        window: usize,
        mode: SelectMode,
    },
    /// A fixed order; the policy network is bypassed.
    Forced(&'a [usize]),
    /// A fixed order scored by the policy; each action must lie in the window.
    Replay {
        window: usize,
        actions: &'a [usize],
    },
}

/// Which entity enters the state and the linked set after each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkMode {
    /// The gold entity, whatever was predicted.
    TeacherForced,
    Predicted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub mention: usize,
    /// Selectable mentions at this step; empty for forced orders.
    pub window: Vec<usize>,
    pub action_probs: Vec<f64>,
    pub predicted: usize,
    pub predicted_entity: usize,
    pub prob: f64,
    pub correct: bool,
    /// Entity appended to the state and the linked set.
    pub linked_entity: usize,
    /// Entities linked before this step, in link order.
    pub linked_before: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub doc_id: String,
    pub sampled: bool,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn order(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.mention).collect()
    }

    pub fn flags(&self) -> Vec<bool> {
        self.steps.iter().map(|s| s.correct).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.prob).collect()
    }

    pub fn correct(&self) -> usize {
        self.steps.iter().filter(|s| s.correct).count()
    }
}

/// Graph handles produced by a rollout.
#[derive(Clone, Debug, Default)]
pub struct RolloutVars {
    /// `log π(a_t | S_t)` per step; empty for forced orders.
    pub log_probs: Vec<Var>,
    /// `P̂` per step, `1 × n`.
    pub distributions: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
pub fn rollout(
    g: &mut Graph,
    model: &Model,
    env: &Env,
    doc: &PreparedDoc,
    inputs: &[CandidateInputs],
    locals: &[LocalVars],
    order: OrderSource,
    link: LinkMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Episode, RolloutVars)> {
    let l = doc.len();
    if locals.len() != l || inputs.len() != l {
        return Err(Error::invalid("local outputs must cover every mention"));
    }
    if let OrderSource::Forced(o) | OrderSource::Replay { actions: o, .. } = order {
        let mut seen = vec![false; l];
        if o.len() != l || o.iter().any(|&i| i >= l || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::invalid(format!(
                "forced order {o:?} is not a permutation of {l} mentions"
            )));
        }
    }
    let ps = &model.params;
    let mut state = model.policy.initial_state(g, ps);
    let mut window = match order {
        OrderSource::Policy { window, .. } | OrderSource::Replay { window, .. } => Some(ActionWindow::new(l, window)?),
        OrderSource::Forced(_) => None,
    };
    let mut action_reprs: Vec<Option<Var>> = vec![None; l];
    let mut linked: Vec<usize> = Vec::with_capacity(l);
    let mut steps = Vec::with_capacity(l);
    let mut vars = RolloutVars::default();

    for t in 0..l {
        let (mention, win, action_probs) = match (&mut window, order) {
            (Some(w), OrderSource::Policy { .. } | OrderSource::Replay { .. }) => {
                let acts = w.actions().to_vec();
                let mut rows = Vec::with_capacity(acts.len());
                for &a in &acts {
                    let d = match action_reprs[a] {
                        Some(d) => d,
                        None => {
                            let cands = g.constant(inputs[a].vectors.clone());
                            let lv = locals[a];
                            let d = Policy::action_representation(g, lv.repr, lv.weights, cands)?;
                            action_reprs[a] = Some(d);
                            d
                        }
                    };
                    rows.push(d);
                }
                let stacked = g.vstack(&rows)?;
                let choice = match order {
                    OrderSource::Replay { actions, .. } => {
                        let index = acts.iter().position(|&a| a == actions[t]).ok_or_else(|| {
                            Error::invalid(format!("mention {} is outside the window {acts:?}", actions[t]))
                        })?;
                        let logp = model.policy.log_distribution(g, ps, &state, stacked)?;
                        let probs = g.value(logp).data().iter().map(|l| l.exp()).collect();
                        let log_prob = g.select_cols(logp, &[index])?;
                        crate::policy::ActionChoice { index, log_prob, probs }
                    }
                    OrderSource::Policy { mode, .. } => {
                        model.policy.select_action(g, ps, &state, stacked, mode, rng)?
                    }
                    OrderSource::Forced(_) => unreachable!("forced orders have no window"),
                };
                vars.log_probs.push(choice.log_prob);
                let mention = acts[choice.index];
                w.advance(mention)?;
                (mention, acts, choice.probs)
            }
            (_, OrderSource::Forced(o)) => (o[t], Vec::new(), Vec::new()),
            _ => unreachable!("window exists exactly for policy orders"),
        };

        let m = &doc.mentions[mention];
        let p = model.selector.candidate_distribution(
            g,
            ps,
            env.store,
            &env.adjacency,
            &inputs[mention],
            &linked,
            locals[mention].score,
        )?;
        let pv = g.value(p).data();
        let predicted = argmax(pv);
        let prob = pv[predicted];
        let predicted_entity = m.candidates[predicted];
        let correct = m.gold_index == Some(predicted);
        let linked_entity = match (link, m.gold_index) {
            (LinkMode::TeacherForced, Some(_)) => m.gold_entity,
            _ => predicted_entity,
        };
        vars.distributions.push(p);
        let ev = env.entity(g, linked_entity);
        state.push(g, locals[mention].repr, ev)?;
        steps.push(Step {
            mention,
            window: win,
            action_probs,
            predicted,
            predicted_entity,
            prob,
            correct,
            linked_entity,
            linked_before: linked.clone(),
        });
        linked.push(linked_entity);
    }
    let sampled = matches!(
        order,
        OrderSource::Policy {
            mode: SelectMode::Sample,
            ..
        }
    );
    Ok((
        Episode {
            doc_id: doc.id.clone(),
            sampled,
            steps,
        },
        vars,
    ))
}

/// Evaluation rollout with predicted history on a fresh graph.
pub fn eval_episode(
    model: &Model,
    env: &Env,
    doc: &PreparedDoc,
    locals: &[crate::model::LocalValues],
    order: OrderSource,
) -> Result<Episode> {
    let mut g = Graph::new();
    let inputs = env.doc_inputs(doc);
    let vars: Vec<LocalVars> = locals.iter().map(|v| v.insert(&mut g)).collect();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    rollout(
        &mut g,
        model,
        env,
        doc,
        &inputs,
        &vars,
        order,
        LinkMode::Predicted,
        &mut rng,
    )
    .map(|(e, _)| e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthetic::{generate_synthetic, SyntheticSpec};
    use rand::SeedableRng;

    fn setup() -> (crate::corpus::Dataset, Vec<PreparedDoc>, Model) {
        let ds = generate_synthetic(&SyntheticSpec {
            num_docs: 3,
            mentions_per_doc: 5,
            candidates_per_mention: 3,
            embedding_dim: 8,
            context_radius: 3,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .dataset;
        let docs = ds.prepare().unwrap();
        let model = Model::new(ModelConfig::default(), 8, 1).unwrap();
        (ds, docs, model)
    }

    #[test]
    fn teacher_forcing_links_gold() {
        let (ds, docs, model) = setup();
        let env = Env::new(&ds.store);
        for doc in &docs {
            let mut g = Graph::new();
            let inputs = env.doc_inputs(doc);
            let locals = model.locals(&mut g, &env, doc).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let order = OrderSource::Policy {
                window: 3,
                mode: SelectMode::Sample,
            };
            let (ep, vars) = rollout(
                &mut g,
                &model,
                &env,
                doc,
                &inputs,
                &locals,
                order,
                LinkMode::TeacherForced,
                &mut rng,
            )
            .unwrap();
            assert_eq!(vars.log_probs.len(), doc.len());
            let mut sorted = ep.order();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..doc.len()).collect::<Vec<_>>());
            for s in &ep.steps {
                assert_eq!(s.linked_entity, doc.mentions[s.mention].gold_entity);
                assert!(s.window.contains(&s.mention));
            }
        }
    }

    #[test]
    fn unit_window_matches_forced_offset() {
        let (ds, docs, model) = setup();
        let env = Env::new(&ds.store);
        for doc in &docs {
            let locals = model.local_values(&env, doc).unwrap();
            let offset: Vec<usize> = (0..doc.len()).collect();
            let a = eval_episode(&model, &env, doc, &locals, OrderSource::Forced(&offset)).unwrap();
            let b = eval_episode(
                &model,
                &env,
                doc,
                &locals,
                OrderSource::Policy {
                    window: 1,
                    mode: SelectMode::Greedy,
                },
            )
            .unwrap();
            assert_eq!(a.order(), b.order());
            for (x, y) in a.steps.iter().zip(&b.steps) {
                assert_eq!(x.prob.to_bits(), y.prob.to_bits());
                assert_eq!(x.predicted, y.predicted);
                assert_eq!(x.linked_before, y.linked_before);
            }
        }
    }

    #[test]
    fn forced_order_must_be_a_permutation() {
        let (ds, docs, model) = setup();
        let env = Env::new(&ds.store);
        let locals = model.local_values(&env, &docs[0]).unwrap();
        for bad in [vec![0, 1, 2, 3], vec![0, 0, 1, 2, 3], vec![0, 1, 2, 3, 9]] {
            assert!(eval_episode(&model, &env, &docs[0], &locals, OrderSource::Forced(&bad)).is_err());
        }
    }

    #[test]
    fn replay_scores_a_sampled_order() {
        let (ds, docs, model) = setup();
        let env = Env::new(&ds.store);
        let doc = &docs[0];
        let inputs = env.doc_inputs(doc);
        let mut g = Graph::new();
        let locals = model.locals(&mut g, &env, doc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sample = OrderSource::Policy {
            window: 2,
            mode: SelectMode::Sample,
        };
        let (ep, vars) = rollout(
            &mut g,
            &model,
            &env,
            doc,
            &inputs,
            &locals,
            sample,
            LinkMode::TeacherForced,
            &mut rng,
        )
        .unwrap();
        let order = ep.order();
        let replay = OrderSource::Replay {
            window: 2,
            actions: &order,
        };
        let (again, rvars) = rollout(
            &mut g,
            &model,
            &env,
            doc,
            &inputs,
            &locals,
            replay,
            LinkMode::TeacherForced,
            &mut rng,
        )
        .unwrap();
        assert_eq!(again.order(), order);
        for (a, b) in vars.log_probs.iter().zip(&rvars.log_probs) {
            assert_eq!(g.scalar(*a).to_bits(), g.scalar(*b).to_bits());
        }
        let mut outside = order.clone();
        outside.reverse();
        let bad = OrderSource::Replay {
            window: 2,
            actions: &outside,
        };
        assert!(rollout(
            &mut g,
            &model,
            &env,
            doc,
            &inputs,
            &locals,
            bad,
            LinkMode::TeacherForced,
            &mut rng
        )
        .is_err());
    }
}
