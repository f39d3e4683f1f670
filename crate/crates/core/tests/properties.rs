use facename_core::alignment::{align_pair, Link, LinkSet, ScoredLink};
use facename_core::eval::{precision_recall_f1, score_links, EvalCounts, GtLinks};
use facename_core::losses::{agreement_loss, contrastive, dense_similarity, Direction};
use facename_core::numerics::{dot, relu, Matrix, Mlp};
use facename_core::seed::rng_for;
use proptest::prelude::*;
use rand::Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn square() -> impl Strategy<Value = Matrix> {
    (1usize..=8).prop_flat_map(|b| matrix(b, b))
}

fn sim_with_flags() -> impl Strategy<Value = (Matrix, Vec<bool>)> {
    (1usize..=5, 1usize..=5).prop_flat_map(|(n, m)| {
        (matrix(n, m + 1), Just((0..=m).map(|j| j == m).collect::<Vec<_>>()))
    })
}

proptest! {
    #[test]
    fn relu_is_idempotent(x in prop::collection::vec(-10.0f64..10.0, 0..16)) {
        let once = relu(&x);
        prop_assert_eq!(relu(&once), once.clone());
        prop_assert!(once.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn mlp_backward_matches_finite_differences(
        seed in any::<u64>(),
        widths in prop::collection::vec(1usize..=8, 2..=4),
    ) {
        let mut rng = rng_for(seed, "prop-mlp");
        let mlp = Mlp::init(&widths, &mut rng).unwrap();
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..*widths.last().unwrap()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, cache) = mlp.forward(&x).unwrap();
        let pre = cache.pre_activations();
        // central differences are meaningless across a ReLU kink
        prop_assume!(pre[..pre.len() - 1].iter().flatten().all(|v| v.abs() > 1e-4));
        let (dx, grads) = mlp.backward(&cache, &c).unwrap();
        let h = 1e-5;
        let objective = |m: &Mlp, x: &[f64]| dot(&m.apply(x).unwrap(), &c);
        let close = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6) < 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let num = (objective(&mlp, &xp) - objective(&mlp, &xm)) / (2.0 * h);
            prop_assert!(close(dx[i], num) || (dx[i] - num).abs() < 1e-9, "dx[{}]: {} vs {}", i, dx[i], num);
        }
        for (l, g) in grads.layers.iter().enumerate() {
            for k in 0..g.weight.as_slice().len() {
                let mut p = mlp.clone();
                p.layers_mut()[l].weight.as_mut_slice()[k] += h;
                let mut m = mlp.clone();
                m.layers_mut()[l].weight.as_mut_slice()[k] -= h;
                let num = (objective(&p, &x) - objective(&m, &x)) / (2.0 * h);
                let a = g.weight.as_slice()[k];
                prop_assert!(close(a, num) || (a - num).abs() < 1e-9, "W{}[{}]: {} vs {}", l, k, a, num);
            }
            for k in 0..g.bias.len() {
                let mut p = mlp.clone();
                p.layers_mut()[l].bias[k] += h;
                let mut m = mlp.clone();
                m.layers_mut()[l].bias[k] -= h;
                let num = (objective(&p, &x) - objective(&m, &x)) / (2.0 * h);
                let a = g.bias[k];
                prop_assert!(close(a, num) || (a - num).abs() < 1e-9, "b{}[{}]: {} vs {}", l, k, a, num);
            }
        }
    }

    #[test]
    fn contrastive_ignores_constant_shift(d in square(), shift in -20.0f64..20.0) {
        let shifted = d.map(|v| v + shift);
        prop_assert!((contrastive(&d).unwrap() - contrastive(&shifted).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn contrastive_of_constant_batch_is_log_b(b in 1usize..=8, v in -10.0f64..10.0) {
        let d = Matrix::from_fn(b, b, |_, _| v);
        prop_assert!((contrastive(&d).unwrap() - (b as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn agreement_is_symmetric_and_nonnegative(a in square(), seed in any::<u64>()) {
        let mut rng = rng_for(seed, "prop-agree");
        let b = Matrix::from_fn(a.rows(), a.cols(), |_, _| rng.gen_range(-5.0..5.0));
        let ab = agreement_loss(&a, &b).unwrap();
        prop_assert_eq!(ab, agreement_loss(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(agreement_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn dense_similarity_is_bounded_by_extremes(a in (1usize..=4, 1usize..=4).prop_flat_map(|(n, m)| matrix(n, m))) {
        let lo = a.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = a.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for dir in [Direction::FaceToName, Direction::NameToFace] {
            let s = dense_similarity(&a, dir).unwrap();
            prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        }
    }

    #[test]
    fn alignment_is_invariant_under_monotone_maps((sim, flags) in sim_with_flags(), scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let links = |m: &Matrix| align_pair(m, &flags, true).unwrap().into_iter().map(|l| l.link).collect::<Vec<_>>();
        let base = links(&sim);
        prop_assert_eq!(&links(&sim.map(|v| scale * v + shift)), &base);
        prop_assert_eq!(&links(&sim.map(|v| v.powi(3))), &base);
        prop_assert_eq!(&links(&sim.map(f64::exp)), &base);
    }

    #[test]
    fn alignment_is_equivariant_under_face_permutation((sim, flags) in sim_with_flags(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let n = sim.rows();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng_for(seed, "prop-perm"));
        // row r of the permuted matrix is face perm[r] of the original
        let permuted = Matrix::from_fn(n, sim.cols(), |r, c| sim.get(perm[r], c));
        let original: std::collections::HashSet<Link> =
            align_pair(&sim, &flags, true).unwrap().into_iter().map(|l| l.link).collect();
        let mapped: std::collections::HashSet<Link> = align_pair(&permuted, &flags, true)
            .unwrap()
            .into_iter()
            .map(|l| match l.link {
                Link::FaceName { face, name } => Link::FaceName { face: perm[face], name },
                Link::FaceNoName { face } => Link::FaceNoName { face: perm[face] },
                other => other,
            })
            .collect();
        prop_assert_eq!(original, mapped);
    }

    #[test]
    fn every_face_is_linked_exactly_once((sim, flags) in sim_with_flags()) {
        let links = align_pair(&sim, &flags, true).unwrap();
        for i in 0..sim.rows() {
            prop_assert_eq!(links.iter().filter(|l| l.link.face() == Some(i)).count(), 1);
        }
        let real = flags.iter().filter(|f| !**f).count();
        for j in 0..real {
            let roles = links.iter().filter(|l| matches!(l.link,
                Link::FaceName { name, .. } | Link::NameNoFace { name } if name == j)).count();
            prop_assert!(roles >= 1);
        }
    }

    #[test]
    fn f1_lies_between_precision_and_recall(correct in 1usize..50, extra_found in 0usize..50, extra_gt in 0usize..50) {
        let c = EvalCounts { correct, found: correct + extra_found, gt: correct + extra_gt };
        let prf = precision_recall_f1(&c);
        prop_assert!(prf.f1 >= prf.precision.min(prf.recall) - 1e-12);
        prop_assert!(prf.f1 <= prf.precision.max(prf.recall) + 1e-12);
    }

    #[test]
    fn scoring_ignores_order(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = rng_for(seed, "prop-score");
        let mut gt_store = Vec::new();
        let mut pred = Vec::new();
        for p in 0..4 {
            let n = rng.gen_range(1..4);
            let truth: Vec<Link> = (0..n).map(|face| Link::FaceName { face, name: rng.gen_range(0..3) }).collect();
            let guess: Vec<ScoredLink> = (0..n)
                .map(|face| ScoredLink { link: Link::FaceName { face, name: rng.gen_range(0..3) }, score: None })
                .collect();
            gt_store.push((format!("p{p}"), truth));
            pred.push(LinkSet { pair_id: format!("p{p}"), links: guess });
        }
        let gt: Vec<GtLinks> = gt_store.iter().map(|(id, l)| GtLinks { pair_id: id, links: l }).collect();
        let before = score_links(&pred, &gt, true).unwrap();
        pred.shuffle(&mut rng);
        for p in &mut pred {
            p.links.shuffle(&mut rng);
        }
        prop_assert_eq!(before, score_links(&pred, &gt, true).unwrap());
    }
}
