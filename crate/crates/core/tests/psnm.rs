mod support;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use spsn_core::nn::{Graph, Mode};
use spsn_core::pipeline::synth::{generate_sample, SynthOptions};
use spsn_core::psnm::{am_gt, am_pred, batch_knn, correlation_map};
use spsn_core::superpixel::{slic_segment, SlicParams, Source, SuperpixelLabelMap};
use spsn_core::{Tape, Tensor};
use support::*;

const ORACLE_TOL: f64 = 1e-5;

fn attention_against_oracle(n_heads: usize, valid: Vec<bool>, seed: u64) {
    let (psnm, store) = psnm_fixture(3, n_heads, seed);
    let rows = uniform(&[valid.len(), C], -1.0, 1.0, seed + 7);
    let mut g: Graph<f64> = Graph::new(&store, Mode::Eval);
    let x = g.constant(rows.clone());
    let out = psnm.attention(&mut g, &batched_block(x, valid.clone(), valid.len())).unwrap();
    let got = g.tape.value(out.rows).data().to_vec();
    let want = attention_oracle(&store, rows.data(), &valid, n_heads);
    let err = max_abs_diff(&got, &want);
    assert!(err <= ORACLE_TOL, "heads {n_heads}: {err:.3e}");
}

#[test]
fn attention_matches_oracle() {
    attention_against_oracle(1, vec![true; 7], 1);
    attention_against_oracle(2, vec![true, true, false, true, true, true], 2);
    attention_against_oracle(4, vec![true, false, true, true, false, true, true, true], 3);
}

#[test]
fn attention_is_permutation_equivariant() {
    let (psnm, store) = psnm_fixture(3, 1, 9);
    let n = 8;
    let rows = uniform(&[n, C], -1.0, 1.0, 10);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng(11));
    let permuted = Tensor::from_fn(&[n, C], |i| rows.data()[perm[i / C] * C + i % C]);
    let run = |r: &Tensor<f64>| {
        let mut g: Graph<f64> = Graph::new(&store, Mode::Eval);
        let x = g.constant(r.clone());
        let out = psnm.attention(&mut g, &batched_block(x, vec![true; n], n)).unwrap();
        g.tape.value(out.rows).data().to_vec()
    };
    let (a, b) = (run(&rows), run(&permuted));
    for i in 0..n {
        let err = max_abs_diff(&b[i * C..(i + 1) * C], &a[perm[i] * C..(perm[i] + 1) * C]);
        assert!(err < 1e-12, "row {i}: {err:.3e}");
    }
}

#[test]
fn knn_matches_oracle_per_sample() {
    let n = 9;
    let x = uniform(&[2 * n, C], -1.0, 1.0, 20);
    let mut valid = vec![true; 2 * n];
    valid[3] = false;
    valid[n + 1] = false;
    valid[n + 8] = false;
    let mut t: Tape<f64> = Tape::new();
    let rows = t.constant(x.clone());
    let pb = batched_block(rows, valid.clone(), n);
    let got = batch_knn(&x, &pb, 4).unwrap();
    for b in 0..2 {
        let part = &x.data()[b * n * C..(b + 1) * n * C];
        let want = knn_oracle(part, C, &valid[b * n..(b + 1) * n], 4);
        for i in 0..n {
            let shifted: Vec<usize> = want[i].iter().map(|j| j + b * n).collect();
            assert_eq!(got[b * n + i], shifted, "row {}", b * n + i);
        }
    }
}

#[test]
fn edgeconv_matches_oracle() {
    let (layer, store) = edgeconv_fixture(30);
    let n = 7;
    let x = uniform(&[n, C], -1.0, 1.0, 31);
    let mut valid = vec![true; n];
    valid[2] = false;
    let nb = knn_oracle(x.data(), C, &valid, 3);
    for mode in [Mode::Train, Mode::Eval] {
        let mut g: Graph<f64> = Graph::new(&store, mode);
        let v = g.constant(x.clone());
        let y = layer.forward(&mut g, v, &nb).unwrap();
        let got = g.tape.value(y).data().to_vec();
        let want = edgeconv_oracle(&store, "ec", x.data(), &nb, mode == Mode::Train);
        let err = max_abs_diff(&got, &want);
        assert!(err <= ORACLE_TOL, "{mode:?}: {err:.3e}");
        assert!(got[2 * C..3 * C].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn correlation_matches_oracle() {
    let (n, c, h, w) = (5, 16, 6, 4);
    let p = uniform(&[2 * n, c], -1.0, 1.0, 40);
    let e = uniform(&[2, c, h, w], -1.0, 1.0, 41);
    let mut t: Tape<f64> = Tape::new();
    let pv = t.constant(p.clone());
    let ev = t.constant(e.clone());
    let map = correlation_map(&mut t, &batched_block(pv, vec![true; 2 * n], n), ev).unwrap();
    assert_eq!(t.shape(map), &[2, n, h, w]);
    let got = t.value(map).data();
    for b in 0..2 {
        let want = correlation_oracle(
            &p.data()[b * n * c..(b + 1) * n * c],
            &e.data()[b * c * h * w..(b + 1) * c * h * w],
            n,
            c,
            h * w,
        );
        let err = max_abs_diff(&got[b * n * h * w..(b + 1) * n * h * w], &want);
        assert!(err <= ORACLE_TOL, "sample {b}: {err:.3e}");
    }
}

#[test]
fn correlation_is_bilinear() {
    let (n, c) = (4, 8);
    let p = uniform(&[n, c], -1.0, 1.0, 50);
    let e1 = uniform(&[1, c, 3, 3], -1.0, 1.0, 51);
    let e2 = uniform(&[1, c, 3, 3], -1.0, 1.0, 52);
    let corr = |e: &Tensor<f64>| {
        let mut t: Tape<f64> = Tape::new();
        let pv = t.constant(p.clone());
        let ev = t.constant(e.clone());
        let m = correlation_map(&mut t, &batched_block(pv, vec![true; n], n), ev).unwrap();
        t.value(m).data().to_vec()
    };
    let sum = Tensor::from_fn(&[1, c, 3, 3], |i| 2.0 * e1.data()[i] - e2.data()[i]);
    let lhs = corr(&sum);
    let rhs: Vec<f64> = corr(&e1).iter().zip(corr(&e2)).map(|(a, b)| 2.0 * a - b).collect();
    assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn sample_scores_commute_with_permutation(seed in 0u64..1_000_000) {
        let (plain, permuted, perm) = permuted_scores(seed);
        for (i, &j) in perm.iter().enumerate() {
            prop_assert_eq!(permuted[i].to_bits(), plain[j].to_bits(), "row {} <- {}", i, j);
        }
    }
}

fn synthetic_labels(index: usize, n: usize) -> (SuperpixelLabelMap, Vec<f32>) {
    let s = generate_sample(index, 5, &SynthOptions::new(96));
    let labels = slic_segment(&s.rgb, Source::Rgb, &SlicParams::new(n)).unwrap();
    (labels, s.gt.unwrap())
}

#[test]
fn am_gt_matches_overlap_oracle_on_synthetic_images() {
    for i in 0..100 {
        let (labels, gt) = synthetic_labels(i, 25);
        assert_eq!(am_gt(&labels, &gt).unwrap(), am_gt_oracle(&labels, &gt), "sample {i}");
    }
}

#[test]
fn am_gt_half_overlap_is_not_salient() {
    let labels = SuperpixelLabelMap::from_labels(2, 4, vec![0, 0, 1, 1, 0, 0, 1, 1], Source::Rgb).unwrap();
    let gt = [1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    let got = am_gt(&labels, &gt).unwrap();
    assert_eq!(got, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    assert_eq!(got, am_gt_oracle(&labels, &gt));
}

#[test]
fn am_pred_is_constant_per_superpixel() {
    let n_slots = 30;
    for i in 0..10 {
        let (labels, _) = synthetic_labels(i, 25);
        let scores: Vec<f64> = uniform(&[n_slots], 0.0, 1.0, i as u64).into_data();
        let mut t: Tape<f64> = Tape::new();
        let s = t.constant(Tensor::new(&[n_slots], scores.clone()).unwrap());
        let m = am_pred(&mut t, s, &[&labels], n_slots).unwrap();
        for (&l, &v) in labels.labels().iter().zip(t.value(m).data()) {
            assert_eq!(v, scores[l as usize]);
        }
    }
}
