//! Property tests across module boundaries, checked against independent
//! oracles.

use duplex_core::bleu::corpus_bleu;
use duplex_core::decode::{ctc_beam, ctc_greedy};
use duplex_core::gradcheck::rand_tensor;
use duplex_core::losses::ctc_oracle::labeling_marginals;
use duplex_core::losses::{ctc_nll, fba_loss, required_frames};
use duplex_core::params::{perturb, Ctx, ParamStore};
use duplex_core::rdc::{Direction, DuplexStack, RdcConfig, SplitState};
use duplex_core::rng::RngStreams;
use duplex_core::selftest::random_log_probs;
use duplex_core::Tensor;
use proptest::prelude::*;

/// Corpus BLEU written out the slow way: list every n-gram, clip by
/// counting occurrences in the reference one at a time.
fn bleu_by_hand(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            let grams: Vec<&[usize]> = h.windows(n).collect();
            totals[n - 1] += grams.len();
            let mut seen: Vec<&[usize]> = Vec::new();
            for g in &grams {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let in_h = grams.iter().filter(|x| x == &g).count();
                let in_r = if r.len() >= n { r.windows(n).filter(|x| x == g).count() } else { 0 };
                matches[n - 1] += in_h.min(in_r);
            }
        }
    }
    let used: Vec<usize> = (0..4).filter(|&n| totals[n] > 0).collect();
    if used.is_empty() || used.iter().any(|&n| matches[n] == 0) {
        return 0.0;
    }
    let mut log_p = 0.0;
    for &n in &used {
        log_p += (matches[n] as f64 / totals[n] as f64).ln();
    }
    log_p /= used.len() as f64;
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    100.0 * bp * log_p.exp()
}

fn seqs(max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(0usize..4, 0..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bleu_matches_hand_oracle(pairs in proptest::collection::vec((seqs(9), seqs(9)), 1..6)) {
        let (hyps, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let got = corpus_bleu(&hyps, &refs).unwrap();
        let want = bleu_by_hand(&hyps, &refs);
        prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ctc_is_label_permutation_covariant(
        frames in 1usize..7,
        target in proptest::collection::vec(0usize..3, 0..4),
        seed in 0u64..1000,
        rot in 1usize..3,
    ) {
        prop_assume!(required_frames(&target) <= frames);
        let classes = 4;
        let lp = random_log_probs(frames, classes, seed);
        // Rotate the three labels; the blank (3) stays put.
        let perm = |k: usize| if k == 3 { 3 } else { (k + rot) % 3 };
        let mut permuted = vec![0.0; lp.len()];
        for t in 0..frames {
            for k in 0..classes {
                permuted[t * classes + perm(k)] = lp[t * classes + k];
            }
        }
        let moved: Vec<usize> = target.iter().map(|&k| perm(k)).collect();
        let a = ctc_nll(&lp, frames, classes, &target, 3).unwrap();
        let b = ctc_nll(&permuted, frames, classes, &moved, 3).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn wide_beam_finds_the_most_probable_labeling(frames in 1usize..6, seed in 0u64..1000) {
        let classes = 3;
        let lp = random_log_probs(frames, classes, seed);
        let marginals = labeling_marginals(&lp, frames, classes, 2);
        let best = marginals.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        // Exact search: the beam never needs more prefixes than exist.
        let hyps = ctc_beam(&lp, classes, 2, 1 << 12).unwrap();
        prop_assert!((hyps[0].score - best).abs() < 1e-9);
        // Greedy picks a labeling no more probable than beam's.
        let greedy = ctc_greedy(&lp, classes, 2);
        let g = marginals.iter().find(|(u, _)| *u == greedy).unwrap().1;
        prop_assert!(g <= hyps[0].score + 1e-12);
    }

    #[test]
    fn fba_is_bounded(seed in 0u64..1000, layers in 1usize..4) {
        let mut rng = RngStreams::new(seed).stream("fba");
        let f: Vec<Tensor<f64>> = (0..layers).map(|_| rand_tensor(&[3, 2], &mut rng)).collect();
        let r: Vec<Tensor<f64>> = (0..layers).map(|_| rand_tensor(&[3, 2], &mut rng)).collect();
        let v = fba_loss(&f, &r).unwrap().item();
        prop_assert!((0.0..=2.0).contains(&v));
        prop_assert!(fba_loss(&f, &f).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn packed_stack_round_trips(
        lengths in proptest::collection::vec(1usize..6, 1..4),
        layers in prop_oneof![Just(2usize), Just(4)],
        seed in 0u64..1000,
    ) {
        let cfg = RdcConfig { hidden: 8, layers, heads: 2, kernel: 3, ffn_mult: 2, dropout: 0.0, max_rel: 8 };
        let streams = RngStreams::new(seed);
        let mut store = ParamStore::<f64>::new();
        let stack = DuplexStack::new(&mut store, &mut streams.stream("init"), "s", &cfg).unwrap();
        perturb(&mut store, seed, 0.2);
        let rows: usize = lengths.iter().sum();
        let x = rand_tensor(&[rows, 8], &mut streams.stream("x"));
        let input = SplitState::split_packed(&x, lengths.into()).unwrap();
        let b = store.bind_frozen();
        let ctx = Ctx::eval();
        for dir in [Direction::Forward, Direction::Reverse] {
            let y = stack.map(&b, &ctx, input.clone(), dir).unwrap();
            let back = stack.map(&b, &ctx, y, dir.flip()).unwrap();
            prop_assert!(back.max_abs_diff(&input) < 1e-10);
        }
    }
}
