use proptest::prelude::*;

use seqlink::config::RunConfig;
use seqlink::eval::micro_f1;
use seqlink::model::{Env, Model, ModelConfig};
use seqlink::policy::{feasible_orderings, ActionWindow, SelectMode};
use seqlink::rewards::{r1, r1_base, r2, r2_base, r3, r3_base, EpisodeOutcome, TransitionRewards};
use seqlink::rollout::{eval_episode, OrderSource};
use seqlink::synthetic::{generate_synthetic, SyntheticSpec};
use seqlink::tensor::{softmax, top_k_indices};
use seqlink::trainer::Window;

fn flags() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 1..=10)
}

fn errors(f: &[bool]) -> Vec<usize> {
    (0..f.len()).filter(|&i| !f[i]).collect()
}

proptest! {
    #[test]
    fn rewards_discount_geometrically(f in flags(), gamma in 0.05f64..=1.0) {
        let o = EpisodeOutcome::new(f.clone(), gamma).unwrap();
        let l = f.len();
        let lam = TransitionRewards::FIXED;
        for t in 1..=l {
            let d = gamma.powi((l - t) as i32);
            prop_assert!((r1(&o, t).unwrap() - d * r1_base(&o)).abs() < 1e-12);
            prop_assert!((r2(&o, t, &lam, None).unwrap() - d * r2_base(&o, &lam, None).unwrap()).abs() < 1e-12);
            prop_assert!((r3(&o, t).unwrap() - d * r3_base(&o)).abs() < 1e-12);
        }
        prop_assert!(r1(&o, 0).is_err());
        prop_assert!(r3(&o, l + 1).is_err());
    }

    #[test]
    fn perfect_episodes_score_highest(f in flags()) {
        let l = f.len();
        let perfect = EpisodeOutcome::new(vec![true; l], 0.9).unwrap();
        let o = EpisodeOutcome::new(f, 0.9).unwrap();
        prop_assert!(r1_base(&o) <= r1_base(&perfect));
        prop_assert!(r3_base(&o) <= r3_base(&perfect));
        prop_assert_eq!(r3_base(&perfect), 0.0);
        prop_assert_eq!(r2_base(&perfect, &TransitionRewards::FIXED, None).unwrap(), 0.0);
        prop_assert!((r1_base(&perfect) - 1.0 / l as f64).abs() < 1e-15);
    }

    #[test]
    fn another_error_lowers_error_position_reward(f in flags(), pick in any::<prop::sample::Index>()) {
        let correct: Vec<usize> = (0..f.len()).filter(|&i| f[i]).collect();
        prop_assume!(!correct.is_empty());
        let mut worse = f.clone();
        worse[correct[pick.index(correct.len())]] = false;
        let a = r3_base(&EpisodeOutcome::new(f, 0.9).unwrap());
        let b = r3_base(&EpisodeOutcome::new(worse, 0.9).unwrap());
        prop_assert!(b < a);
    }

    #[test]
    fn later_errors_score_higher(f in flags(), pick in any::<prop::sample::Index>()) {
        let errs = errors(&f);
        prop_assume!(!errs.is_empty());
        let e = errs[pick.index(errs.len())];
        prop_assume!(e + 1 < f.len() && f[e + 1]);
        let mut later = f.clone();
        later.swap(e, e + 1);
        let a = r3_base(&EpisodeOutcome::new(f, 0.9).unwrap());
        let b = r3_base(&EpisodeOutcome::new(later, 0.9).unwrap());
        prop_assert!(b > a);
    }

    #[test]
    fn window_offers_the_earliest_unresolved(l in 1usize..=9, w in 1usize..=5, picks in prop::collection::vec(any::<prop::sample::Index>(), 9)) {
        let mut win = ActionWindow::new(l, w).unwrap();
        let mut unresolved: Vec<usize> = (0..l).collect();
        let mut order = Vec::new();
        for p in picks.iter().take(l) {
            prop_assert_eq!(win.actions(), &unresolved[..w.min(unresolved.len())]);
            let a = win.actions()[p.index(win.actions().len())];
            prop_assert!(win.advance(l + 1).is_err());
            win.advance(a).unwrap();
            unresolved.retain(|&m| m != a);
            order.push(a);
        }
        prop_assert!(win.is_done());
        order.sort_unstable();
        prop_assert_eq!(order, (0..l).collect::<Vec<_>>());
    }

    #[test]
    fn feasible_orderings_are_distinct_permutations(l in 0usize..=6, w in 1usize..=7) {
        let all = feasible_orderings(l, w).unwrap();
        let expected: usize = (1..=l).map(|u| w.min(u)).product();
        prop_assert_eq!(all.len(), expected);
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), all.len());
        for o in &all {
            let mut s = o.clone();
            s.sort_unstable();
            prop_assert_eq!(s, (0..l).collect::<Vec<_>>());
        }
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn top_k_keeps_the_largest(v in prop::collection::vec(-5.0f64..5.0, 1..20), k in 0usize..25) {
        let idx = top_k_indices(&v, k);
        prop_assert_eq!(idx.len(), k.min(v.len()));
        let floor = idx.iter().map(|&i| v[i]).fold(f64::INFINITY, f64::min);
        for i in (0..v.len()).filter(|i| !idx.contains(i)) {
            prop_assert!(v[i] <= floor);
        }
        prop_assert!(idx.windows(2).all(|p| v[p[0]] >= v[p[1]]));
    }

    #[test]
    fn micro_f1_is_accuracy(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40)) {
        let (p, g): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let hits = pairs.iter().filter(|(a, b)| a == b).count();
        prop_assert_eq!(micro_f1(&p, &g).unwrap(), hits as f64 / pairs.len() as f64);
    }

    #[test]
    fn window_parses_back(n in 1usize..100) {
        let w = Window::Fixed(n);
        prop_assert_eq!(w.to_string().parse::<Window>().unwrap(), w);
        prop_assert_eq!(Window::All.size(n), n);
        prop_assert_eq!(w.size(n + 5), n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn unit_window_replays_text_order(seed in 0u64..1000, mentions in 1usize..=6) {
        let ds = generate_synthetic(&SyntheticSpec {
            num_docs: 2,
            mentions_per_doc: mentions,
            candidates_per_mention: 3,
            embedding_dim: 8,
            context_radius: 3,
            anchor_fraction: if mentions > 1 { 0.5 } else { 0.0 },
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .dataset;
        let env = Env::new(&ds.store);
        let model = Model::new(ModelConfig::default(), 8, seed).unwrap();
        for doc in ds.prepare().unwrap() {
            let locals = model.local_values(&env, &doc).unwrap();
            let offset: Vec<usize> = (0..doc.len()).collect();
            let a = eval_episode(&model, &env, &doc, &locals, OrderSource::Forced(&offset)).unwrap();
            let b = eval_episode(&model, &env, &doc, &locals, OrderSource::Policy { window: 1, mode: SelectMode::Greedy }).unwrap();
            prop_assert_eq!(a.order(), offset);
            prop_assert_eq!(a.order(), b.order());
            for (x, y) in a.steps.iter().zip(&b.steps) {
                prop_assert_eq!(x.prob.to_bits(), y.prob.to_bits());
                prop_assert_eq!(x.predicted_entity, y.predicted_entity);
            }
        }
    }

    #[test]
    fn config_survives_toml(seed in 0..=i64::MAX as u64, window in 1usize..10, gamma1 in 1e-6f64..1e-2) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.train.window = Window::Fixed(window);
        cfg.train.gamma1 = gamma1;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn seeds_past_the_toml_range_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        prop_assert!(cfg.to_toml().is_err());
        prop_assert!(cfg.validate().is_err());
    }
}
