//! Finite-difference checks of every trainable tensor, using the fourth-order
//! central stencil at `±h` and `±2h`.
//!
//! Each seed builds a small synthetic document and a randomly perturbed
//! model, samples one episode, and freezes that order together with random
//! per-step coefficients. The checked scalar is
//!
//! ```text
//! L(θ) = Σ_t r_t · log π(a_t | S_t) + Σ_t c_t · P̂_t[j_t] + L_es(θ)
//! ```
//!
//! which touches the local scorer, the policy and the selector. Entries whose
//! perturbations land on different branches (a ReLU flipping, a different
//! top-k set, a different row maximum) are skipped and counted.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, PreparedDoc};
use crate::error::{Error, Result};
use crate::model::{Env, LocalKind, Model, ModelConfig};
use crate::policy::SelectMode;
use crate::rollout::{rollout, LinkMode, OrderSource};
use crate::synthetic::{generate_synthetic, SyntheticSpec};
use crate::tensor::{Graph, ParamId, Tensor};
use crate::trainer::margin_loss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub seeds: usize,
    pub first_seed: u64,
    pub entries_per_tensor: usize,
    pub step: f64,
    pub tolerance: f64,
    pub mentions: usize,
    pub candidates: usize,
    pub dim: usize,
    pub window: usize,
    pub perturbation: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seeds: 100,
            first_seed: 0,
            entries_per_tensor: 3,
            step: 1e-4,
            tolerance: 1e-4,
            mentions: 4,
            candidates: 3,
            dim: 8,
            window: 3,
            perturbation: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub component: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seeds: usize,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    /// Every tensor was checked at least once and stayed within tolerance.
    pub fn passed(&self) -> bool {
        !self.tensors.is_empty()
            && self
                .tensors
                .iter()
                .all(|t| t.checked > 0 && t.max_rel_error <= self.tolerance)
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped).sum()
    }

    /// Worst error per component.
    pub fn by_component(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for t in &self.tensors {
            let e = out.entry(t.component.clone()).or_insert(0.0f64);
            *e = e.max(t.max_rel_error);
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

struct Instance {
    dataset: Dataset,
    doc: PreparedDoc,
    order: Vec<usize>,
    reward_coef: Vec<f64>,
    prob_coef: Vec<f64>,
    prob_index: Vec<usize>,
}

fn instance(cfg: &GradCheckConfig, model: &Model, seed: u64) -> Result<Instance> {
    let spec = SyntheticSpec {
        num_docs: 1,
        mentions_per_doc: cfg.mentions,
        candidates_per_mention: cfg.candidates,
        embedding_dim: cfg.dim,
        anchor_fraction: 0.25,
        context_radius: 3,
        seed,
        ..SyntheticSpec::default()
    };
    let dataset = generate_synthetic(&spec)?.dataset;
    let doc = dataset
        .prepare()?
        .into_iter()
        .next()
        .ok_or(Error::Empty("grad-check corpus"))?;
    let env = Env::new(&dataset.store);
    let mut g = Graph::new();
    let inputs = env.doc_inputs(&doc);
    let locals = model.locals(&mut g, &env, &doc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let source = OrderSource::Policy {
        window: cfg.window,
        mode: SelectMode::Sample,
    };
    let (ep, _) = rollout(
        &mut g,
        model,
        &env,
        &doc,
        &inputs,
        &locals,
        source,
        LinkMode::TeacherForced,
        &mut rng,
    )?;
    let order = ep.order();
    let l = doc.len();
    let reward_coef = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let prob_coef = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let prob_index = order
        .iter()
        .map(|&m| rng.gen_range(0..doc.mentions[m].num_candidates()))
        .collect();
    Ok(Instance {
        dataset,
        doc,
        order,
        reward_coef,
        prob_coef,
        prob_index,
    })
}

/// Builds the surrogate loss on a fresh evaluation graph.
fn surrogate(model: &Model, inst: &Instance, window: usize, track: bool) -> Result<(Graph, crate::tensor::Var)> {
    let env = Env::new(&inst.dataset.store);
    let mut g = Graph::new();
    if track {
        g.track_branches();
    }
    let inputs = env.doc_inputs(&inst.doc);
    let locals = model.locals(&mut g, &env, &inst.doc)?;
    let source = OrderSource::Replay {
        window,
        actions: &inst.order,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (ep, vars) = rollout(
        &mut g,
        model,
        &env,
        &inst.doc,
        &inputs,
        &locals,
        source,
        LinkMode::TeacherForced,
        &mut rng,
    )?;
    let mut total = margin_loss(&mut g, &inst.doc, &ep, &vars.distributions, 0.3)?;
    for t in 0..ep.steps.len() {
        let lp = g.scale(vars.log_probs[t], inst.reward_coef[t]);
        total = g.add(total, lp)?;
        let p = g.select_cols(vars.distributions[t], &[inst.prob_index[t]])?;
        let p = g.scale(p, inst.prob_coef[t]);
        total = g.add(total, p)?;
    }
    Ok((g, total))
}

fn evaluate(model: &Model, inst: &Instance, window: usize) -> Result<(f64, u64)> {
    let (g, loss) = surrogate(model, inst, window, true)?;
    Ok((g.scalar(loss), g.branch_fingerprint().unwrap_or(0)))
}

fn perturbed_model(kind: LocalKind, cfg: &GradCheckConfig, seed: u64) -> Result<Model> {
    let mc = ModelConfig {
        local: kind,
        ..ModelConfig::default()
    };
    let mut model = Model::new(mc, cfg.dim, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        for v in model.params.value_mut(id).data_mut() {
            *v += rng.gen_range(-cfg.perturbation..cfg.perturbation);
        }
    }
    Ok(model)
}

/// Per-entry `(name, rel_error)` or a skip, for one seed and local model.
fn check_seed(kind: LocalKind, cfg: &GradCheckConfig, seed: u64) -> Result<Vec<(ParamId, Option<f64>)>> {
    let mut model = perturbed_model(kind, cfg, seed)?;
    let inst = instance(cfg, &model, seed)?;
    let (g, loss) = surrogate(&model, &inst, cfg.window, false)?;
    let grads = g.backward(loss)?;
    let (_, base_fp) = evaluate(&model, &inst, cfg.window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let ids: Vec<ParamId> = model.params.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let shape = model.params.value(id).shape();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
        let size = shape.0 * shape.1;
        let mut nonzero: Vec<usize> = (0..size).filter(|&i| analytic.data()[i] != 0.0).collect();
        let mut picks = Vec::with_capacity(cfg.entries_per_tensor);
        while picks.len() < cfg.entries_per_tensor && !nonzero.is_empty() {
            picks.push(nonzero.swap_remove(rng.gen_range(0..nonzero.len())));
        }
        while picks.len() < cfg.entries_per_tensor.min(size) {
            picks.push(rng.gen_range(0..size));
        }
        for i in picks {
            let x = model.params.value(id).data()[i];
            let mut f = [0.0; 4];
            let mut crossed = false;
            for (k, offset) in [-2.0, -1.0, 1.0, 2.0].into_iter().enumerate() {
                model.params.value_mut(id).data_mut()[i] = x + offset * cfg.step;
                let (value, fingerprint) = evaluate(&model, &inst, cfg.window)?;
                f[k] = value;
                crossed |= fingerprint != base_fp;
            }
            model.params.value_mut(id).data_mut()[i] = x;
            if crossed {
                out.push((id, None));
                continue;
            }
            let numeric = (8.0 * (f[2] - f[1]) - (f[3] - f[0])) / (12.0 * cfg.step);
            out.push((id, Some(relative_error(analytic.data()[i], numeric))));
        }
    }
    Ok(out)
}

/// Runs both local models over `cfg.seeds` seeds. Tensors shared by both
/// models are reported once, with results pooled.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.seeds == 0 || cfg.entries_per_tensor == 0 || cfg.step <= 0.0 {
        return Err(Error::Config(
            "grad-check needs seeds, entries and a positive step".into(),
        ));
    }
    let jobs: Vec<(LocalKind, u64)> = [LocalKind::Attention, LocalKind::Transformer]
        .into_iter()
        .flat_map(|k| (0..cfg.seeds as u64).map(move |s| (k, cfg.first_seed + s)))
        .collect();
    type SeedResult = (LocalKind, Vec<(ParamId, Option<f64>)>);
    let results: Vec<SeedResult> = jobs
        .par_iter()
        .map(|&(k, s)| check_seed(k, cfg, s).map(|r| (k, r)))
        .collect::<Result<_>>()?;

    let mut table: BTreeMap<String, TensorCheck> = BTreeMap::new();
    let names = |kind: LocalKind| -> Result<Vec<String>> {
        let m = perturbed_model(kind, cfg, 0)?;
        Ok(m.params.ids().map(|id| m.params.name(id).to_string()).collect())
    };
    let attn_names = names(LocalKind::Attention)?;
    let tf_names = names(LocalKind::Transformer)?;
    for (kind, entries) in results {
        let names = if kind == LocalKind::Attention {
            &attn_names
        } else {
            &tf_names
        };
        for (id, err) in entries {
            let name = &names[id.0];
            let t = table.entry(name.clone()).or_insert_with(|| TensorCheck {
                name: name.clone(),
                component: Model::component_of(name).to_string(),
                ..TensorCheck::default()
            });
            match err {
                Some(e) => {
                    t.checked += 1;
                    t.max_rel_error = t.max_rel_error.max(e);
                }
                None => t.skipped += 1,
            }
        }
    }
    let tensors = tf_names
        .iter()
        .chain(attn_names.iter())
        .filter_map(|n| table.remove(n))
        .collect();
    Ok(GradCheckReport {
        seeds: cfg.seeds,
        tolerance: cfg.tolerance,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-9, 2e-9) - 1e-9 / 1e-6).abs() < 1e-18);
    }

    #[test]
    fn few_seeds_pass_and_cover_every_component() {
        let cfg = GradCheckConfig {
            seeds: 3,
            ..GradCheckConfig::default()
        };
        let report = grad_check(&cfg).unwrap();
        let comps = report.by_component();
        for c in ["local_attn", "policy", "selector", "transformer"] {
            assert!(comps.contains_key(c), "{c} missing");
        }
        assert!(report.passed(), "{:#?}", report.tensors);
    }
}
