use proptest::prelude::*;

use splitpu::autodiff::{Graph, Tensor};
use splitpu::data::{make_pu_split, synth_two_gaussians, Label, LabeledSet, Samples};
use splitpu::harness::{mean_std, summarize, RawRow};
use splitpu::losses::djs_loss;
use splitpu::risk::{pu_risk, PosNegNorm, RiskEstimator};
use splitpu::splitter::{agreement, PseudoLabels, SplitResult};

fn risk(
    pos: &[f64],
    unl: &[f64],
    prior: f64,
    est: RiskEstimator,
    norm: PosNegNorm,
) -> (f64, splitpu::risk::RiskComponents) {
    let mut g = Graph::new();
    let zp = g.constant(Tensor::vector(pos.to_vec()));
    let zu = g.constant(Tensor::vector(unl.to_vec()));
    let (r, c) = pu_risk(&mut g, zp, zu, prior, est, norm).unwrap();
    (g.item(r), c)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logits(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0..8.0f64, 1..max)
}

fn dist_rows(max: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((0.0..=1.0f64).prop_map(|a| [a, 1.0 - a]), 1..max)
}

fn djs(p: &[[f64; 2]], y: &[[f64; 2]], rho: f64) -> f64 {
    let mut g = Graph::new();
    let flat = |r: &[[f64; 2]]| {
        Tensor::new(vec![r.len(), 2], r.iter().flatten().copied().collect()).unwrap()
    };
    let pn = g.constant(flat(p));
    let yn = g.constant(flat(y));
    let l = djs_loss(&mut g, pn, yn, rho).unwrap();
    g.item(l)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn nnpu_equals_upu_when_correction_nonnegative(pos in logits(12), unl in logits(24), prior in 0.05..0.95f64) {
        let (nn, c) = risk(&pos, &unl, prior, RiskEstimator::Nnpu, PosNegNorm::Positives);
        let (u, _) = risk(&pos, &unl, prior, RiskEstimator::Upu, PosNegNorm::Positives);
        if c.correction() >= 0.0 {
            prop_assert_eq!(nn, u);
            prop_assert!(!c.clamp_engaged());
        } else {
            prop_assert!(c.clamp_engaged());
            prop_assert!(nn > u);
        }
    }

    #[test]
    fn nnpu_bounded_below_by_weighted_positive_risk(pos in logits(12), unl in logits(24), prior in 0.05..0.95f64) {
        let (nn, c) = risk(&pos, &unl, prior, RiskEstimator::Nnpu, PosNegNorm::Positives);
        prop_assert!(nn >= prior * c.pos_risk);
        prop_assert!(nn >= 0.0);
    }

    #[test]
    fn risk_matches_raw_logit_recomputation(pos in logits(12), unl in logits(24), prior in 0.05..0.95f64, literal in any::<bool>()) {
        let norm = if literal { PosNegNorm::Unlabeled } else { PosNegNorm::Positives };
        let (nn, _) = risk(&pos, &unl, prior, RiskEstimator::Nnpu, norm);
        let (u, _) = risk(&pos, &unl, prior, RiskEstimator::Upu, norm);
        let np = pos.len() as f64;
        let nu = unl.len() as f64;
        let pos_risk = pos.iter().map(|&z| sigmoid(-z)).sum::<f64>() / np;
        let unl_neg = unl.iter().map(|&z| sigmoid(z)).sum::<f64>() / nu;
        let pos_neg = pos.iter().map(|&z| sigmoid(z)).sum::<f64>() / if literal { nu } else { np };
        let corr = unl_neg - prior * pos_neg;
        prop_assert!((u - (prior * pos_risk + corr)).abs() < 1e-12);
        prop_assert!((nn - (prior * pos_risk + corr.max(0.0))).abs() < 1e-12);
    }

    #[test]
    fn djs_nonnegative_and_zero_on_match(p in dist_rows(10), rho in 0.01..0.99f64) {
        let y: Vec<[f64; 2]> = p.iter().rev().copied().collect();
        prop_assert!(djs(&p, &y, rho) >= -1e-12);
        prop_assert!(djs(&p, &p, rho).abs() < 1e-12);
    }

    #[test]
    fn djs_invariant_under_row_permutation(rows in prop::collection::vec(((0.0..=1.0f64), (0.0..=1.0f64)), 2..10), rho in 0.01..0.99f64, shift in 1usize..9) {
        let p: Vec<[f64; 2]> = rows.iter().map(|r| [r.0, 1.0 - r.0]).collect();
        let y: Vec<[f64; 2]> = rows.iter().map(|r| [r.1, 1.0 - r.1]).collect();
        let k = shift % p.len();
        let mut pp = p.clone();
        let mut yy = y.clone();
        pp.rotate_left(k);
        yy.rotate_left(k);
        prop_assert!((djs(&p, &y, rho) - djs(&pp, &yy, rho)).abs() < 1e-12);
    }

    #[test]
    fn djs_bounded_by_disjoint_case(p in dist_rows(10), y in dist_rows(10), rho in 0.01..0.99f64) {
        // Disjoint one-hots maximise the mixture divergence at the binary
        // entropy of rho.
        let n = p.len().min(y.len());
        let h = -rho * rho.ln() - (1.0 - rho) * (1.0 - rho).ln();
        let z = -(1.0 - rho) * (1.0 - rho).ln();
        prop_assert!(djs(&p[..n], &y[..n], rho) <= h / z + 1e-9);
    }

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0..30.0f64, 2..24)) {
        let n = v.len() / 2;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![n, 2], v[..2 * n].to_vec()).unwrap());
        let p = g.softmax(x);
        for row in g.value(p).data().chunks(2) {
            prop_assert!(row.iter().all(|&t| (0.0..=1.0).contains(&t)));
            prop_assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_nonnegative_and_zero_on_self(a in dist_rows(8), b in dist_rows(8)) {
        let n = a.len().min(b.len());
        let t = |r: &[[f64; 2]]| Tensor::new(vec![n, 2], r[..n].iter().flatten().copied().collect()).unwrap();
        let mut g = Graph::new();
        let pa = g.constant(t(&a));
        let pb = g.constant(t(&b));
        let k = g.kl(pa, pb).unwrap();
        prop_assert!(g.value(k).data().iter().all(|&v| v >= -1e-12));
        let s = g.kl(pa, pa).unwrap();
        prop_assert!(g.value(s).data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn split_is_disjoint_exhaustive_partition(z in prop::collection::vec(-4.0..4.0f64, 1..200), temp in prop::collection::vec(-4.0..4.0f64, 200)) {
        let pseudo = PseudoLabels::from_logits(&z);
        let (acc, mask) = agreement(&temp[..z.len()], &pseudo);
        let s = SplitResult::from_mask(&mask, 3, acc > 0.9);
        let mut all: Vec<usize> = s.easy.iter().chain(&s.hard).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..z.len()).collect::<Vec<_>>());
        prop_assert!(s.easy.iter().all(|i| !s.hard.contains(i)));
        let expect = (1.0 - s.stop_accuracy) * z.len() as f64;
        prop_assert!((s.hard.len() as f64 - expect).abs() <= 0.5 + 1e-9);
        prop_assert_eq!(s.stop_accuracy, acc);
        if s.reached_tau {
            prop_assert!(s.hard.len() as f64 <= (1.0 - 0.9) * z.len() as f64 + 1e-9);
        }
    }

    #[test]
    fn pu_split_partitions_training_pool(seed in 0u64..1000, n_p in 1usize..40) {
        let full = synth_two_gaussians(40, 60, 2, 2.0, seed).unwrap();
        let test = LabeledSet::new(Samples::empty(vec![2]), vec![]).unwrap();
        let ds = make_pu_split(&full, test, n_p, seed).unwrap();
        let mut all: Vec<usize> = ds.positive_indices.iter().chain(&ds.unlabeled_indices).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..100).collect::<Vec<_>>());
        prop_assert!(ds.positive_indices.iter().all(|&i| full.labels[i] == Label::Positive));
        prop_assert_eq!(ds.train.unlabeled.len(), 100 - n_p);
        prop_assert!((ds.train.prior - 0.4).abs() < 1e-15);
    }

    #[test]
    fn summary_matches_direct_statistics(accs in prop::collection::vec(0.0..=1.0f64, 1..12)) {
        let raw: Vec<RawRow> = accs
            .iter()
            .enumerate()
            .flat_map(|(s, &a)| {
                [
                    RawRow { cell: "c".into(), seed: s as u64, iteration: 0, accuracy: 0.5 },
                    RawRow { cell: "c".into(), seed: s as u64, iteration: 2, accuracy: a },
                ]
            })
            .collect();
        let s = summarize(&raw);
        let n = accs.len() as f64;
        let m = accs.iter().sum::<f64>() / n;
        let sd = (accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert_eq!(s.len(), 1);
        prop_assert_eq!(s[0].n, Some(accs.len()));
        prop_assert!((s[0].mean.unwrap() - m).abs() < 1e-12);
        prop_assert!((s[0].std.unwrap() - sd).abs() < 1e-12);
        prop_assert_eq!(mean_std(&accs), (s[0].mean.unwrap(), s[0].std.unwrap()));
    }
}
