//! Invariants over random inputs.

use proptest::prelude::*;

use maskdec::decoder::MaskPrediction;
use maskdec::loss::{bce_loss, dice_loss};
use maskdec::metrics::{EvalRecord, Mask, MetricsReport};
use maskdec::nn::{AttentionParams, Binder, Params};
use maskdec::synth::{sample_at, GenConfig, REJ_ID, SEG_ID};
use maskdec::train::rej_flags;
use maskdec::{Rng, Tape, Tensor};

fn tensor(dims: Vec<usize>, seed: u64) -> Tensor {
    Tensor::uniform(dims, -3.0, 3.0, &mut Rng::new(seed))
}

fn mask(h: usize, w: usize, seed: u64, density: f64) -> Mask {
    let mut rng = Rng::new(seed);
    Mask::from_fn(h, w, |_, _| rng.bernoulli(density))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(n in 1usize..6, m in 1usize..7, seed: u64) {
        let tape = Tape::new();
        let s = tape.constant(tensor(vec![n, m], seed)).softmax_rows().unwrap().value();
        for row in s.data().chunks(m) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn attention_rows_sum_to_one(nq in 1usize..6, nk in 1usize..6, seed: u64) {
        let mut rng = Rng::new(seed);
        let p = AttentionParams::init(4, 3, &mut rng);
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let att = p.bind(&mut b);
        let q = tape.constant(Tensor::uniform(vec![nq, 4], -1.0, 1.0, &mut rng));
        let kv = tape.constant(Tensor::uniform(vec![nk, 4], -1.0, 1.0, &mut rng));
        let (_, a) = att.forward(&q, &kv).unwrap();
        for row in a.value().data().chunks(nk) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_stays_within_the_source_range(seed: u64, ho in 1usize..6, wo in 1usize..6) {
        let x = tensor(vec![2, 3, 4], seed);
        let mut grid = Tensor::zeros(vec![2, ho, wo]);
        let mut rng = Rng::new(seed ^ 1);
        for g in grid.data_mut() {
            *g = rng.uniform(-3.0, 6.0);
        }
        let tape = Tape::new();
        let y = tape.constant(x.clone()).bilinear_sample(&tape.constant(grid)).unwrap().value();
        for c in 0..2 {
            let src = &x.data()[c * 12..(c + 1) * 12];
            let lo = src.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in &y.data()[c * ho * wo..(c + 1) * ho * wo] {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn pixel_shuffle_permutes_values(c in 1usize..3, r in 1usize..4, h in 1usize..4, w in 1usize..4, seed: u64) {
        let x = tensor(vec![c * r * r, h, w], seed);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).pixel_shuffle(r).unwrap().value();
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dsft_round_trips(dims in prop::collection::vec(1usize..5, 0..4), seed: u64) {
        let t = tensor(dims, seed);
        let back = Tensor::read_dsft(&mut t.to_dsft_bytes().as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn mask_losses_are_bounded(seed: u64, n in 1usize..20) {
        let mut rng = Rng::new(seed);
        let p = Tensor::uniform(vec![1, n], 0.0, 1.0, &mut rng);
        let g = Tensor::uniform(vec![1, n], 0.0, 1.0, &mut rng).map(f64::round);
        let tape = Tape::new();
        let pv = tape.constant(p);
        let dice = dice_loss(&pv, &g, 1.0).unwrap().value().item();
        let bce = bce_loss(&pv, &g, 1e-7).unwrap().value().item();
        prop_assert!((0.0..=1.0).contains(&dice));
        prop_assert!(bce >= 0.0 && bce.is_finite());
    }

    #[test]
    fn overlap_is_symmetric_and_ordered(h in 1usize..9, w in 1usize..9, seed: u64) {
        let (a, b) = (mask(h, w, seed, 0.4), mask(h, w, seed ^ 7, 0.6));
        let (i, u) = a.overlap(&b).unwrap();
        prop_assert_eq!((i, u), b.overlap(&a).unwrap());
        prop_assert!(i <= a.count().min(b.count()) && u >= a.count().max(b.count()));
        prop_assert_eq!(i + u, a.count() + b.count());
    }

    #[test]
    fn metrics_lie_in_the_unit_interval(seed: u64, n in 1usize..6) {
        let mut rng = Rng::new(seed);
        let records: Vec<EvalRecord> = (0..n)
            .map(|k| {
                let gt_no_target = rng.bernoulli(0.3);
                let gt = if gt_no_target { Mask::empty(5, 5) } else { Mask::from_fn(5, 5, |y, x| y < 2 + k % 3 && x < 3) };
                let pred = mask(5, 5, seed.wrapping_add(k as u64), 0.3);
                EvalRecord { pred_no_target: pred.is_empty(), pred_mask: pred, gt_mask: gt, gt_no_target }
            })
            .collect();
        let r = MetricsReport::from_records(&records).unwrap();
        for v in [r.ciou, r.giou, r.prec05, r.n_acc].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(r.n_acc.is_some(), records.iter().any(|r| r.gt_no_target));
    }

    #[test]
    fn samples_satisfy_their_invariants(seed: u64, index in 0u64..1000) {
        let cfg = GenConfig::default();
        let s = sample_at(seed, index, &cfg).unwrap();
        prop_assert_eq!(&s, &sample_at(seed, index, &cfg).unwrap());
        prop_assert!(!s.objects.is_empty());
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let matching: Vec<&Mask> = s
            .objects
            .iter()
            .filter(|o| o.color == s.expression.color && o.shape == s.expression.shape)
            .map(|o| &o.mask)
            .collect();
        prop_assert_eq!(matching, s.gt_masks.iter().collect::<Vec<_>>());
        if s.no_target {
            prop_assert!(s.gt_masks.is_empty());
            prop_assert_eq!(&s.text_target_ids, &vec![REJ_ID]);
        } else {
            prop_assert!(s.gt_masks.iter().all(|m| !m.is_empty()));
            prop_assert!(s.text_target_ids.iter().all(|&t| t == SEG_ID));
            prop_assert_eq!(s.text_target_ids.len(), s.gt_masks.len());
        }
    }

    #[test]
    fn rejected_tokens_never_reach_the_merged_mask(seed: u64, s in 1usize..4) {
        let mut rng = Rng::new(seed);
        let logits: Vec<Tensor> = (0..s).map(|_| Tensor::uniform(vec![4, 4], -2.0, 2.0, &mut rng)).collect();
        let flags: Vec<bool> = (0..s).map(|_| rng.bernoulli(0.5)).collect();
        let p = MaskPrediction::from_logits(logits.clone(), flags.clone(), None);
        let mut want = Mask::empty(4, 4);
        for (l, &rej) in logits.iter().zip(&flags) {
            if !rej {
                want.union_with(&Mask::from_fn(4, 4, |y, x| l.data()[y * 4 + x] > 0.0));
            }
        }
        prop_assert_eq!(p.merged_binary, want);
    }

    #[test]
    fn rej_argmax_breaks_ties_towards_seg(a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let t = Tensor::new(vec![3, 2], vec![a, b, a, a, b, a]).unwrap();
        prop_assert_eq!(rej_flags(&t), vec![a > b, false, b > a]);
    }
}
