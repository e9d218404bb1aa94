use candle_core::Device;
use promptseg_core::conditioning::{interpolate, ConditionalVector};
use promptseg_core::evalharness::argmax_labels;
use promptseg_core::imaging::{dequantize, quantize_probabilities, BinaryMask};
use promptseg_core::metrics::{binarize, iou_bin, iou_fg, ApAccumulator, Confusion, ProbabilityMap};
use proptest::prelude::*;

fn vec_pair(n: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (
        prop::collection::vec(-10.0f32..10.0, n),
        prop::collection::vec(-10.0f32..10.0, n),
    )
}

fn mask(w: u32, h: u32) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), (w * h) as usize)
        .prop_map(move |v| BinaryMask::from_bools(w, h, v).unwrap())
}

fn prob_and_gt(n: usize) -> impl Strategy<Value = (ProbabilityMap, BinaryMask)> {
    (prop::collection::vec(0.0f32..=1.0, n), prop::collection::vec(any::<bool>(), n)).prop_map(move |(p, g)| {
        (
            ProbabilityMap::new(n as u32, 1, p).unwrap(),
            BinaryMask::from_bools(n as u32, 1, g).unwrap(),
        )
    })
}

fn counts(acc: &ApAccumulator) -> Vec<Confusion> {
    acc.counts().to_vec()
}

proptest! {
    #[test]
    fn interpolation_stays_in_the_hull((s, t) in vec_pair(12), a in 0.0f64..=1.0) {
        let sv = ConditionalVector::from_vec(s.clone(), &Device::Cpu).unwrap();
        let tv = ConditionalVector::from_vec(t.clone(), &Device::Cpu).unwrap();
        let mixed = interpolate(&sv, &tv, a).unwrap().to_vec().unwrap();
        for ((m, x), y) in mixed.iter().zip(&s).zip(&t) {
            let (lo, hi) = (x.min(*y) as f64, x.max(*y) as f64);
            prop_assert!(*m >= lo && *m <= hi, "{m} not in [{lo}, {hi}]");
        }
    }

    #[test]
    fn interpolation_endpoints_are_exact((s, t) in vec_pair(8)) {
        let sv = ConditionalVector::from_vec(s.clone(), &Device::Cpu).unwrap();
        let tv = ConditionalVector::from_vec(t.clone(), &Device::Cpu).unwrap();
        let one = interpolate(&sv, &tv, 1.0).unwrap().to_vec().unwrap();
        let zero = interpolate(&sv, &tv, 0.0).unwrap().to_vec().unwrap();
        prop_assert_eq!(one, sv.to_vec().unwrap());
        prop_assert_eq!(zero, tv.to_vec().unwrap());
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in mask(6, 5), b in mask(6, 5)) {
        let ab = iou_fg(&a, &b).unwrap();
        prop_assert_eq!(ab, iou_fg(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou_fg(&a, &a).unwrap(), 1.0);
        let bin = iou_bin(&a, &b).unwrap();
        prop_assert_eq!(bin, iou_bin(&b, &a).unwrap());
        // complementing both swaps foreground and background
        prop_assert!((bin - iou_bin(&a.complement(), &b.complement()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ap_merge_is_order_independent(x in prob_and_gt(40), y in prob_and_gt(40), z in prob_and_gt(40)) {
        let single = |(p, g): &(ProbabilityMap, BinaryMask)| {
            let mut acc = ApAccumulator::default();
            acc.accumulate(p, g).unwrap();
            acc
        };
        let (a, b, c) = (single(&x), single(&y), single(&z));
        let mut left = a.clone();
        left.merge(&b).unwrap();
        left.merge(&c).unwrap();
        let mut bc = b.clone();
        bc.merge(&c).unwrap();
        let mut right = a.clone();
        right.merge(&bc).unwrap();
        let mut reversed = c.clone();
        reversed.merge(&b).unwrap();
        reversed.merge(&a).unwrap();
        let mut streamed = ApAccumulator::default();
        for s in [&x, &y, &z] {
            streamed.accumulate(&s.0, &s.1).unwrap();
        }
        prop_assert_eq!(counts(&left), counts(&right));
        prop_assert_eq!(counts(&left), counts(&reversed));
        prop_assert_eq!(counts(&left), counts(&streamed));
        if let Some(ap) = left.finalize() {
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }

    #[test]
    fn perfect_separation_has_unit_ap(g in prop::collection::vec(any::<bool>(), 2..60)) {
        prop_assume!(g.iter().any(|v| *v));
        let p: Vec<f32> = g.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let n = g.len() as u32;
        let mut acc = ApAccumulator::default();
        acc.accumulate(&ProbabilityMap::new(n, 1, p).unwrap(), &BinaryMask::from_bools(n, 1, g).unwrap()).unwrap();
        prop_assert!((acc.finalize().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn argmax_ignores_uniform_positive_scaling(
        maps in prop::collection::vec(prop::collection::vec(0.0f32..1.0, 20), 2..5),
        scale in 0.01f32..=1.0,
    ) {
        let pm: Vec<ProbabilityMap> = maps.iter().map(|v| ProbabilityMap::new(5, 4, v.clone()).unwrap()).collect();
        let scaled: Vec<ProbabilityMap> = maps
            .iter()
            .map(|v| ProbabilityMap::new(5, 4, v.iter().map(|x| x * scale).collect()).unwrap())
            .collect();
        let a = argmax_labels(&pm).unwrap();
        let b = argmax_labels(&scaled).unwrap();
        // scaling can merge near-ties through rounding; compare only clear winners
        for (p, (x, y)) in a.iter().zip(&b).enumerate() {
            let top = maps[*x][p];
            let clear = maps.iter().enumerate().all(|(c, m)| c == *x || top - m[p] > 1e-4);
            if clear {
                prop_assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn quantization_is_within_half_a_step(p in prop::collection::vec(0.0f32..=1.0, 1..50)) {
        let q = quantize_probabilities(p.len() as u32, 1, &p);
        for (v, q) in p.iter().zip(q.pixels()) {
            prop_assert!((dequantize(q[0]) as f64 - *v as f64).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }

    #[test]
    fn binarize_is_monotone_in_threshold((p, _) in prob_and_gt(30), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = binarize(&p, lo).unwrap();
        let b = binarize(&p, hi).unwrap();
        prop_assert!(b.as_slice().iter().zip(a.as_slice()).all(|(hi, lo)| !hi || *lo));
    }
}
