//! Synthetic corpora whose difficulty depends on linking order.
//!
//! Embedding coordinates are split into three disjoint blocks:
//!
//! * coordinate 0, "salience", carried only by topical context words;
//! * one pair coordinate per anchored mention slot;
//! * a generic block holding everything else.
//!
//! An anchored mention `a` is immediately followed by its anchor `b`. The
//! gold and decoy of `a` are `(u ± v)/√2` for a shared generic vector `u` and
//! the pair's unit coordinate `v`, so every score that ignores the pair
//! coordinate ties them exactly. The anchor's gold entity carries `+v`, which
//! makes coherence with it favor the gold of `a`. Anchored contexts are
//! filler-only; all other mentions get topical words and are solvable from
//! their context alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_document, CandidateEntity, Dataset, Document, EmbeddingStore};
use crate::error::{Error, Result};
use crate::local_attn::context_feature_values;
use crate::tensor::argmax;

const FILLER_POOL: usize = 64;
const FILLER_NORM: f64 = 0.2;
const NAME_NORM: f64 = 0.2;
const TOPICAL_SCALE: f64 = 1.5;
const MIN_GENERIC_DIMS: usize = 4;
const MAX_RESAMPLES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_docs: usize,
    pub mentions_per_doc: usize,
    pub candidates_per_mention: usize,
    pub embedding_dim: usize,
    pub anchor_fraction: f64,
    pub noise_scale: f64,
    pub seed: u64,
    /// Context words on each side of every mention.
    pub context_radius: usize,
    /// How strongly priors of ordinary mentions point at the gold entity, in `[0, 1]`.
    pub prior_strength: f64,
    /// Probability that a wrong candidate shares the mention's name as its
    /// surface form; the others get a name of their own. The gold entity, and
    /// the decoy of an anchored mention, always share it.
    pub shared_alias_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_docs: 200,
            mentions_per_doc: 8,
            candidates_per_mention: 8,
            embedding_dim: 24,
            anchor_fraction: 0.5,
            noise_scale: 0.3,
            seed: 0,
            context_radius: 10,
            prior_strength: 1.0,
            shared_alias_fraction: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn anchored_per_doc(&self) -> usize {
        (self.anchor_fraction * self.mentions_per_doc as f64 + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_docs == 0 || self.mentions_per_doc == 0 || self.candidates_per_mention == 0 {
            return Err(Error::invalid(
                "document, mention and candidate counts must be at least 1",
            ));
        }
        if self.context_radius == 0 {
            return Err(Error::invalid("context_radius must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.anchor_fraction) {
            return Err(Error::invalid(format!(
                "anchor_fraction {} outside [0, 1]",
                self.anchor_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.shared_alias_fraction) {
            return Err(Error::invalid(format!(
                "shared_alias_fraction {} outside [0, 1]",
                self.shared_alias_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.prior_strength) {
            return Err(Error::invalid(format!(
                "prior_strength {} outside [0, 1]",
                self.prior_strength
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid("noise_scale must be finite and non-negative"));
        }
        let anchored = self.anchored_per_doc();
        if anchored > 0 {
            if self.mentions_per_doc < 2 {
                return Err(Error::invalid(
                    "anchored mentions need at least 2 mentions per document",
                ));
            }
            if self.candidates_per_mention < 2 {
                return Err(Error::invalid("anchored mentions need at least 2 candidates"));
            }
            if anchored > self.mentions_per_doc / 2 {
                return Err(Error::invalid(format!(
                    "{anchored} anchored mentions need {} mentions per document, got {}",
                    2 * anchored,
                    self.mentions_per_doc
                )));
            }
        }
        if self.embedding_dim < 1 + anchored + MIN_GENERIC_DIMS {
            return Err(Error::invalid(format!(
                "embedding_dim {} too small; need at least {}",
                self.embedding_dim,
                1 + anchored + MIN_GENERIC_DIMS
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Free,
    /// Needs the mention at the given position linked first.
    Anchored {
        anchor: usize,
    },
    Anchor {
        anchored: usize,
    },
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    /// Per document, per mention position.
    pub roles: Vec<Vec<Role>>,
}

impl SyntheticCorpus {
    /// Positions of anchors first, then everything else, each in text order.
    pub fn anchors_first_order(&self, doc: usize) -> Vec<usize> {
        let roles = &self.roles[doc];
        let mut order: Vec<usize> = (0..roles.len())
            .filter(|&i| matches!(roles[i], Role::Anchor { .. }))
            .collect();
        order.extend((0..roles.len()).filter(|&i| !matches!(roles[i], Role::Anchor { .. })));
        order
    }
}

struct Layout {
    dim: usize,
    generic_start: usize,
}

impl Layout {
    fn pair_coord(&self, slot: usize) -> usize {
        1 + slot
    }

    fn generic_unit(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for x in &mut v[self.generic_start..] {
            *x = rng.sample(StandardNormal);
        }
        normalize(&mut v);
        v
    }

    fn generic_scaled(&self, rng: &mut ChaCha8Rng, norm: f64) -> Vec<f64> {
        let mut v = self.generic_unit(rng);
        v.iter_mut().for_each(|x| *x *= norm);
        v
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

struct MentionDraft {
    /// Id, vector, prior and whether the surface form is the mention's name.
    candidates: Vec<(String, Vec<f64>, f64, bool)>,
    gold: usize,
    left: Vec<String>,
    right: Vec<String>,
    name: String,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let anchored = spec.anchored_per_doc();
    let layout = Layout {
        dim: spec.embedding_dim,
        generic_start: 1 + anchored,
    };
    let mut store = EmbeddingStore::new(spec.embedding_dim);
    let fillers: Vec<String> = (0..FILLER_POOL).map(|i| format!("filler{i:02}")).collect();
    for f in &fillers {
        store
            .words
            .insert(f.clone(), &layout.generic_scaled(&mut rng, FILLER_NORM))?;
    }

    let mut docs = Vec::with_capacity(spec.num_docs);
    let mut roles = Vec::with_capacity(spec.num_docs);
    for d in 0..spec.num_docs {
        let (doc, doc_roles) = generate_document(spec, &layout, &fillers, d, &mut rng, &mut store)?;
        docs.push(doc);
        roles.push(doc_roles);
    }
    Ok(SyntheticCorpus {
        dataset: Dataset::new(docs, store)?,
        roles,
    })
}

fn assign_roles(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Vec<Role>, Vec<usize>) {
    let l = spec.mentions_per_doc;
    let mut slots: Vec<usize> = (0..l / 2).collect();
    slots.shuffle(rng);
    let mut chosen: Vec<usize> = slots[..spec.anchored_per_doc()].to_vec();
    chosen.sort_unstable();
    let mut roles = vec![Role::Free; l];
    let mut pair_slot = vec![usize::MAX; l];
    for (k, &s) in chosen.iter().enumerate() {
        let (a, b) = (2 * s, 2 * s + 1);
        roles[a] = Role::Anchored { anchor: b };
        roles[b] = Role::Anchor { anchored: a };
        pair_slot[a] = k;
        pair_slot[b] = k;
    }
    (roles, pair_slot)
}

fn generate_document(
    spec: &SyntheticSpec,
    layout: &Layout,
    fillers: &[String],
    d: usize,
    rng: &mut ChaCha8Rng,
    store: &mut EmbeddingStore,
) -> Result<(Document, Vec<Role>)> {
    let l = spec.mentions_per_doc;
    let n = spec.candidates_per_mention;
    let (roles, pair_slot) = assign_roles(spec, rng);
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;

    // The anchored mention's shared direction, fixed before either pair member is drawn.
    let mut shared = vec![Vec::new(); l];
    for (m, role) in roles.iter().enumerate() {
        if let Role::Anchored { .. } = role {
            shared[m] = layout.generic_unit(rng);
        }
    }

    let mut drafts = Vec::with_capacity(l);
    for m in 0..l {
        let prefix = format!("d{d:04}.m{m}");
        let name = format!("{prefix}.name");
        store
            .words
            .insert(name.clone(), &layout.generic_scaled(rng, NAME_NORM))?;
        let draft = match roles[m] {
            Role::Anchored { .. } => {
                let v = layout.pair_coord(pair_slot[m]);
                let u = &shared[m];
                let mut gold = u.iter().map(|x| x * inv_sqrt2).collect::<Vec<_>>();
                let mut decoy = gold.clone();
                gold[v] = inv_sqrt2;
                decoy[v] = -inv_sqrt2;
                let junk: Vec<f64> = (0..n - 2).map(|_| rng.gen_range(0.0..0.05)).collect();
                let tied = (1.0 - junk.iter().sum::<f64>()) / 2.0;
                let mut cands = vec![(gold, tied, true), (decoy, tied, true)];
                for p in junk {
                    cands.push((layout.generic_unit(rng), p, rng.gen_bool(spec.shared_alias_fraction)));
                }
                let left = (0..spec.context_radius)
                    .map(|_| fillers.choose(rng).unwrap().clone())
                    .collect();
                let right = (0..spec.context_radius)
                    .map(|_| fillers.choose(rng).unwrap().clone())
                    .collect();
                shuffle_candidates(&prefix, cands, 0, left, right, name, rng)
            }
            role => {
                let mut gold = layout.generic_unit(rng);
                let topic_dir = gold.clone();
                if let Role::Anchor { anchored } = role {
                    gold[layout.pair_coord(pair_slot[anchored])] = 1.0;
                    normalize(&mut gold);
                }
                let priors = match role {
                    Role::Anchor { .. } => anchor_priors(n, rng),
                    _ => free_priors(n, spec.prior_strength, rng),
                };
                let vectors: Vec<Vec<f64>> = std::iter::once(gold)
                    .chain((1..n).map(|_| layout.generic_unit(rng)))
                    .collect();
                let cands: Vec<(Vec<f64>, f64, bool)> = vectors
                    .into_iter()
                    .zip(priors)
                    .enumerate()
                    .map(|(i, (v, p))| (v, p, i == 0 || rng.gen_bool(spec.shared_alias_fraction)))
                    .collect();
                let (left, right) = solvable_context(spec, layout, fillers, &prefix, &topic_dir, &cands, rng, store)?;
                shuffle_candidates(&prefix, cands, 0, left, right, name, rng)
            }
        };
        drafts.push(draft);
    }

    for draft in &drafts {
        for (id, v, _, shared) in &draft.candidates {
            store.entities.insert(id.clone(), v)?;
            let surface = if *shared {
                draft.name.clone()
            } else {
                let alias = format!("{id}.alias");
                store
                    .words
                    .insert(alias.clone(), &layout.generic_scaled(rng, NAME_NORM))?;
                alias
            };
            store.entity_surface.insert(id.clone(), vec![surface]);
        }
    }
    let gold_id = |m: usize| drafts[m].candidates[drafts[m].gold].0.clone();
    for (m, role) in roles.iter().enumerate() {
        if let Role::Anchor { anchored } = role {
            store.add_edge(&gold_id(m), &gold_id(*anchored));
            store.add_edge(&gold_id(*anchored), &gold_id(m));
        }
    }
    let free: Vec<usize> = (0..l).filter(|&m| roles[m] == Role::Free).collect();
    for w in free.windows(2) {
        store.add_edge(&gold_id(w[0]), &gold_id(w[1]));
        store.add_edge(&gold_id(w[1]), &gold_id(w[0]));
    }

    let mut words = Vec::new();
    let mut mentions = Vec::with_capacity(l);
    for (m, draft) in drafts.into_iter().enumerate() {
        words.extend(draft.left);
        let start = words.len();
        words.push(draft.name);
        words.extend(draft.right);
        let gold = draft.candidates[draft.gold].0.clone();
        let cands = draft
            .candidates
            .into_iter()
            .map(|(entity, _, prior, _)| CandidateEntity { entity, prior })
            .collect();
        mentions.push((format!("d{d:04}.m{m}"), start, start + 1, cands, gold));
    }
    let doc = build_document(format!("doc{d:04}"), words, mentions, spec.context_radius)?;
    Ok((doc, roles))
}

fn shuffle_candidates(
    prefix: &str,
    cands: Vec<(Vec<f64>, f64, bool)>,
    gold: usize,
    left: Vec<String>,
    right: Vec<String>,
    name: String,
    rng: &mut ChaCha8Rng,
) -> MentionDraft {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.shuffle(rng);
    let gold = order.iter().position(|&i| i == gold).unwrap();
    let candidates = order
        .iter()
        .enumerate()
        .map(|(slot, &i)| (format!("{prefix}.e{slot}"), cands[i].0.clone(), cands[i].1, cands[i].2))
        .collect();
    MentionDraft {
        candidates,
        gold,
        left,
        right,
        name,
    }
}

fn anchor_priors(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let cap = 0.05f64.min(0.1 / (n - 1) as f64);
    let others: Vec<f64> = (1..n).map(|_| cap * rng.gen_range(0.2..1.0)).collect();
    let gold = 1.0 - others.iter().sum::<f64>();
    std::iter::once(gold).chain(others).collect()
}

fn free_priors(n: usize, strength: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let informative = |i: usize| if i == 0 { 0.7 } else { 0.3 / (n - 1) as f64 };
    (0..n)
        .map(|i| strength * informative(i) + (1.0 - strength) * raw[i] / total)
        .collect()
}

/// Draws context words until the identity-parameter local scorer ranks the
/// gold candidate (index 0 of `cands`) strictly first.
#[allow(clippy::too_many_arguments)]
fn solvable_context(
    spec: &SyntheticSpec,
    layout: &Layout,
    fillers: &[String],
    prefix: &str,
    topic_dir: &[f64],
    cands: &[(Vec<f64>, f64, bool)],
    rng: &mut ChaCha8Rng,
    store: &mut EmbeddingStore,
) -> Result<(Vec<String>, Vec<String>)> {
    let c = spec.context_radius;
    let topical = format!("{prefix}.topic");
    let ones = vec![1.0; layout.dim];
    let cand_rows: Vec<&[f64]> = cands.iter().map(|(v, _, _)| v.as_slice()).collect();
    for _ in 0..MAX_RESAMPLES {
        let mut t = topic_dir.to_vec();
        for x in &mut t[layout.generic_start..] {
            *x += spec.noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
        normalize(&mut t);
        t.iter_mut().for_each(|x| *x *= TOPICAL_SCALE);
        t[0] = 1.0;
        let copies = if 2 * c >= 2 && rng.gen_bool(0.5) { 2 } else { 1 };
        let mut slots: Vec<usize> = (0..2 * c).collect();
        slots.shuffle(rng);
        let mut ctx: Vec<Option<&str>> = vec![None; 2 * c];
        for &s in &slots[..copies] {
            ctx[s] = Some(topical.as_str());
        }
        let ctx: Vec<String> = ctx
            .into_iter()
            .map(|w| w.map_or_else(|| fillers.choose(rng).unwrap().clone(), str::to_string))
            .collect();
        let rows: Vec<&[f64]> = ctx
            .iter()
            .map(|w| {
                if *w == topical {
                    t.as_slice()
                } else {
                    store.words.get(w).unwrap()
                }
            })
            .collect();
        let f = context_feature_values(&rows, &cand_rows, &ones, crate::local_attn::DEFAULT_TOP_R)?;
        let scores: Vec<f64> = cand_rows
            .iter()
            .map(|e| e.iter().zip(&f).map(|(a, b)| a * b).sum())
            .collect();
        let best = argmax(&scores);
        if best == 0 && scores.iter().skip(1).all(|&s| s < scores[0]) {
            store.words.insert(topical, &t)?;
            let right = ctx[c..].to_vec();
            let mut left = ctx;
            left.truncate(c);
            return Ok((left, right));
        }
    }
    Err(Error::invalid(format!(
        "could not draw a locally solvable context for `{prefix}`; lower noise_scale"
    )))
}
