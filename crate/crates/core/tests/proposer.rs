use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unlearn_search::dsl::{
    builtin, builtin_library, canonicalize, parse, render, standard_probes, validate, CandidateLoss, Expr, Input, Loss,
    Source, MAX_DEPTH, MAX_NODES,
};
use unlearn_search::metrics::{MetricsReport, SelectionScore};
use unlearn_search::proposer::mutate::{
    apply, epoch_delta, jitter_at, kind_weights, sample_kind, toggle_reference, MutationKind, JITTER_FACTORS,
};
use unlearn_search::proposer::{Feedback, GrammarProposer, Proposer, ProposerKind};

fn feedback(loss: Loss, id: u64, utility: f64, forget: f64) -> Feedback {
    Feedback {
        parent: CandidateLoss::new(id, loss, Source::Grammar),
        history: vec![0.5, 0.2],
        metrics: MetricsReport::failed(),
        score: SelectionScore::new(utility, forget),
    }
}

fn kind_counts(fb: &Feedback, draws: usize) -> BTreeMap<MutationKind, usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts = BTreeMap::new();
    for _ in 0..draws {
        *counts.entry(sample_kind(&mut rng, Some(fb))).or_insert(0) += 1;
    }
    counts
}

#[test]
fn feedback_shifts_mutation_weights() {
    let tofu = builtin("tofu5").unwrap();
    let weak_forget = kind_counts(&feedback(tofu.clone(), 0, 0.8, 0.3), 1000);
    let low_utility = kind_counts(&feedback(tofu.clone(), 0, 0.3, 0.8), 1000);
    let neutral = kind_counts(&feedback(tofu, 0, 0.8, 0.8), 1000);
    let get = |m: &BTreeMap<MutationKind, usize>, k| m.get(&k).copied().unwrap_or(0);

    assert!(get(&weak_forget, MutationKind::IncreaseForget) > 2 * get(&neutral, MutationKind::IncreaseForget));
    assert!(get(&weak_forget, MutationKind::IncreaseForget) > 3 * get(&weak_forget, MutationKind::ProtectRetain));
    assert!(get(&low_utility, MutationKind::ProtectRetain) > 2 * get(&neutral, MutationKind::ProtectRetain));
    assert!(get(&low_utility, MutationKind::ProtectRetain) > 3 * get(&low_utility, MutationKind::IncreaseForget));

    // the weights themselves are symmetric between the two regimes
    let w = |u, f| kind_weights(Some(&feedback(builtin("ga").unwrap(), 0, u, f)));
    let (a, b) = (w(0.8, 0.3), w(0.3, 0.8));
    assert_eq!(a[5].1, b[6].1);
    assert_eq!(a[6].1, b[5].1);
    assert_eq!(kind_weights(None), w(0.8, 0.8));
}

#[test]
fn jitter_of_tofu5_coefficient() {
    let loss = builtin("tofu5").unwrap();
    let body = loss.expr.body();
    let mut site = None;
    let mut i = 0;
    body.walk(&mut |n| {
        if matches!(n, Expr::Const(c) if *c == 1.2) {
            site = Some(i);
        }
        i += 1;
    });
    let site = site.unwrap();
    let mut betas = Vec::new();
    for f in JITTER_FACTORS {
        let child = jitter_at(body, site, f).unwrap();
        let text = render(&Loss { expr: unlearn_search::dsl::LossExpr::new(child).unwrap(), epochs: loss.epochs });
        let beta = 1.2 * f;
        // identical apart from the coefficient
        let expect = render(&loss).replace("1.2", &format!("{}", (beta * 1e9).round() / 1e9));
        assert_eq!(text, expect);
        betas.push(beta);
    }
    let oracle = [0.6, 0.96, 1.5, 2.4];
    for (b, o) in betas.iter().zip(oracle) {
        assert!((b - o).abs() < 1e-12);
    }
}

#[test]
fn reference_insertion_adds_a_reference_leaf() {
    let no_refs = ["(mean zf)", "(mean (add zf (scale 0.5 (neg zr))))", "(mean (softplus (add zf zr)))"];
    for (k, text) in no_refs.iter().enumerate() {
        let loss = parse(&format!("epochs: 3\n{text}")).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + k as u64);
            let child = toggle_reference(loss.expr.body(), &mut rng).unwrap();
            assert!(child.uses(Input::ForgetRef) || child.uses(Input::RetainRef), "{text} -> {child}");
        }
    }
    // a pure reference delta toggles back off
    let pair = parse("epochs: 3\n(mean (sub zf zf_ref))").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let back = toggle_reference(pair.expr.body(), &mut rng).unwrap();
    assert!(!back.uses(Input::ForgetRef));
}

#[test]
fn epoch_mutation_clamps() {
    assert_eq!(epoch_delta(10, 2), 10);
    assert_eq!(epoch_delta(9, 2), 10);
    assert_eq!(epoch_delta(1, -2), 1);
    assert_eq!(epoch_delta(4, -2), 2);
    let loss = parse("epochs: 10\n(mean zf)").unwrap();
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, e) = apply(MutationKind::EpochDelta, &loss, &mut rng).unwrap();
        assert!((8..=10).contains(&e));
    }
}

#[test]
fn initial_proposals_are_deterministic_distinct_and_valid() {
    let probes = standard_probes();
    let g = GrammarProposer::new(1);
    let a = g.propose_initial(10, 0);
    assert_eq!(a, g.propose_initial(10, 0));
    assert_ne!(a, GrammarProposer::new(2).propose_initial(10, 0));
    let keys: std::collections::BTreeSet<String> = a.iter().map(|l| render(l.as_ref().unwrap())).collect();
    assert_eq!(keys.len(), 10);
    for l in &a {
        let l = l.as_ref().unwrap();
        assert!(validate(l, &probes).is_valid());
        assert!((1..=10).contains(&l.epochs));
    }
    assert_eq!(g.propose_initial(1, 0).len(), 1);

    let p = Proposer::new(ProposerKind::Grammar { seed: 1 }).unwrap();
    assert_eq!(p.propose_initial(10, 0).unwrap(), a);
}

#[test]
fn mutation_is_deterministic_in_seed_parent_and_count() {
    let fb = feedback(builtin("tofu5").unwrap(), 3, 0.7, 0.5);
    let g = GrammarProposer::new(5);
    let a = g.mutate(&fb, 5, 1);
    assert_eq!(a, g.mutate(&fb, 5, 1));
    assert_ne!(a, GrammarProposer::new(6).mutate(&fb, 5, 1));
    let parent = render(&canonicalize(&fb.parent.loss));
    let mut keys = std::collections::BTreeSet::new();
    for c in a.iter().flatten() {
        let key = render(c);
        assert_ne!(key, parent);
        assert!(keys.insert(key));
    }
}

#[test]
fn mutations_cover_every_builtin_parent() {
    let probes = standard_probes();
    let g = GrammarProposer::new(0);
    for (name, loss) in builtin_library() {
        let kids = g.mutate(&feedback(loss, 1, 0.6, 0.6), 4, 0);
        assert_eq!(kids.len(), 4);
        let ok: Vec<_> = kids.into_iter().flatten().collect();
        assert!(!ok.is_empty(), "{name}");
        for k in ok {
            assert!(validate(&k, &probes).is_valid(), "{name}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn children_stay_inside_the_dsl(seed in any::<u64>(), parent_seed in 0u64..1000, u in 0.0f64..1.0, f in 0.0f64..1.0) {
        let parent = GrammarProposer::new(parent_seed).propose_initial(1, 0).remove(0).unwrap();
        let fb = feedback(parent, 0, u, f);
        for child in GrammarProposer::new(seed).mutate(&fb, 3, 1).into_iter().flatten() {
            prop_assert!(child.expr.depth() <= MAX_DEPTH);
            prop_assert!(child.expr.size() <= MAX_NODES);
            prop_assert!((1..=10).contains(&child.epochs));
            prop_assert_eq!(parse(&render(&child)).unwrap(), child);
        }
    }
}
