//! Shared fixtures, brute-force oracles and gradient-check cases.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spsn_core::decoder::Decoder;
use spsn_core::losses::{iou_loss, psnm_loss, rsm_loss};
use spsn_core::nn::{Graph, Mode, BN_EPS, LEAKY_SLOPE};
use spsn_core::params::ParamStore;
use spsn_core::pgm::{build_prototype_block, Modality, PrototypeBlock};
use spsn_core::psnm::{correlation_maps, EdgeConv, Psnm, ATTENTION_DIM};
use spsn_core::rsm::{apply_reliance, RelianceTarget, Rsm};
use spsn_core::superpixel::{
    build_mask_group, downsample_mask_group, slic_segment, MaskGroup, SlicParams, Source, SuperpixelLabelMap,
};
use spsn_core::tensor::grad_check;
use spsn_core::{Result, Tape, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_EPS: f64 = 1e-6;
pub const N_S: usize = 6;
pub const C: usize = 128;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// `sum(v * R)` for a fixed random `R`, so every output coordinate matters.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let r = uniform(tape.shape(v), -1.0, 1.0, seed);
    let r = tape.constant(r);
    let p = tape.mul(v, r)?;
    Ok(tape.sum(p))
}

/// Runs `f` on a graph that shares the grad-check tape.
pub fn on_graph<F>(store: &ParamStore, mode: Mode, tape: &mut Tape<f64>, f: F) -> Result<Var>
where
    F: FnOnce(&mut Graph<f64>) -> Result<Var>,
{
    let mut g: Graph<f64> = Graph::new(store, mode);
    g.tape = std::mem::take(tape);
    let out = f(&mut g);
    *tape = std::mem::take(&mut g.tape);
    out
}

/// Random running statistics so eval-mode batch norm is not the identity.
pub fn randomise_bn(store: &mut ParamStore, seed: u64) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut r = rng(seed);
    for n in names {
        let t = store.get(&n).unwrap().clone();
        let v = if n.ends_with("running_var") {
            Tensor::from_fn(t.shape(), |_| r.random_range(0.5f32..2.0))
        } else if n.ends_with("running_mean") || n.ends_with(".beta") {
            Tensor::from_fn(t.shape(), |_| r.random_range(-0.3f32..0.3))
        } else if n.ends_with(".gamma") {
            Tensor::from_fn(t.shape(), |_| r.random_range(0.7f32..1.3))
        } else {
            continue;
        };
        store.set(&n, v).unwrap();
    }
}

pub fn psnm_fixture(a_k: usize, n_heads: usize, seed: u64) -> (Psnm, ParamStore) {
    let psnm = Psnm::new("psnm", a_k, n_heads, true);
    let mut store = ParamStore::new();
    psnm.declare(&mut store, &mut rng(seed)).unwrap();
    randomise_bn(&mut store, seed + 1);
    (psnm, store)
}

/// Batched block of `batch` samples with `n_slots` rows each.
pub fn batched_block(rows: Var, valid: Vec<bool>, n_slots: usize) -> PrototypeBlock {
    PrototypeBlock {
        rows,
        valid,
        n_slots,
        modality: Modality::Rgb,
    }
}

/// A small textured two-region image and its SLIC mask group.
pub fn mask_fixture(side: usize, n: usize, seed: u64) -> (SuperpixelLabelMap, MaskGroup) {
    let mut r = rng(seed);
    let img = Tensor::from_fn(&[3, side, side], |i| {
        let x = i % side;
        let base = if x < side / 2 { 0.2 } else { 0.8 };
        base + r.random_range(-0.05f32..0.05)
    });
    let labels = slic_segment(&img, Source::Rgb, &SlicParams::new(n)).unwrap();
    let mg = build_mask_group(&labels, n).unwrap();
    (labels, mg)
}

// ---------------------------------------------------------------- oracles

fn param64(store: &ParamStore, name: &str) -> Vec<f64> {
    store
        .get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect()
}

/// `x [n, i] @ W [i, o] + b` with plain loops.
pub fn linear_oracle(store: &ParamStore, name: &str, x: &[f64], n: usize, i: usize, o: usize) -> Vec<f64> {
    let w = param64(store, &format!("{name}.weight"));
    let b = param64(store, &format!("{name}.bias"));
    let mut y = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let mut acc = b[c];
            for k in 0..i {
                acc += x[r * i + k] * w[k * o + c];
            }
            y[r * o + c] = acc;
        }
    }
    y
}

pub fn mlp_oracle(store: &ParamStore, name: &str, x: &[f64], n: usize, dims: [usize; 3]) -> Vec<f64> {
    let h: Vec<f64> = linear_oracle(store, &format!("{name}.fc1"), x, n, dims[0], dims[1])
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    linear_oracle(store, &format!("{name}.fc2"), &h, n, dims[1], dims[2])
}

/// Single-sample prototype attention, written out element by element.
pub fn attention_oracle(store: &ParamStore, rows: &[f64], valid: &[bool], n_heads: usize) -> Vec<f64> {
    let n = valid.len();
    let d = ATTENTION_DIM;
    let q = mlp_oracle(store, "psnm.mlp_q", rows, n, [C, d, d]);
    let k = mlp_oracle(store, "psnm.mlp_k", rows, n, [C, d, d]);
    let v = mlp_oracle(store, "psnm.mlp_v", rows, n, [C, d, d]);
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut mixed = vec![0.0; n * d];
    for h in 0..n_heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() * scale)
                .collect();
            let max = (0..n).filter(|&j| valid[j]).map(|j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = (0..n)
                .map(|j| if valid[j] { (logits[j] - max).exp() } else { 0.0 })
                .collect();
            let z: f64 = w.iter().sum();
            for c in 0..dh {
                mixed[i * d + h * dh + c] = (0..n).map(|j| w[j] / z * v[j * d + h * dh + c]).sum();
            }
        }
    }
    let out = mlp_oracle(store, "psnm.mlp_w", &mixed, n, [d, C, C]);
    (0..n * C)
        .map(|idx| if valid[idx / C] { rows[idx] + out[idx] } else { 0.0 })
        .collect()
}

/// Brute-force k nearest valid rows (self excluded, ties to lower index).
pub fn knn_oracle(x: &[f64], c: usize, valid: &[bool], k: usize) -> Vec<Vec<usize>> {
    let n = valid.len();
    (0..n)
        .map(|i| {
            if !valid[i] {
                return Vec::new();
            }
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i && valid[j])
                .map(|j| ((0..c).map(|t| (x[i * c + t] - x[j * c + t]).powi(2)).sum(), j))
                .collect();
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            cand.into_iter().take(k).map(|p| p.1).collect()
        })
        .collect()
}

/// One EdgeConv layer. Train mode normalises with the biased statistics of
/// all edges; eval mode uses the stored running statistics.
pub fn edgeconv_oracle(store: &ParamStore, name: &str, x: &[f64], neighbors: &[Vec<usize>], train: bool) -> Vec<f64> {
    let n = neighbors.len();
    let mut edges = Vec::new();
    let mut owner = Vec::new();
    for (i, nb) in neighbors.iter().enumerate() {
        for &j in nb {
            let mut e = x[i * C..(i + 1) * C].to_vec();
            e.extend((0..C).map(|t| x[j * C + t] - x[i * C + t]));
            edges.extend(e);
            owner.push(i);
        }
    }
    let m = owner.len();
    let h = linear_oracle(store, &format!("{name}.linear"), &edges, m, 2 * C, C);
    let gamma = param64(store, &format!("{name}.bn.gamma"));
    let beta = param64(store, &format!("{name}.bn.beta"));
    let (mean, var) = if train {
        let mean: Vec<f64> = (0..C).map(|c| (0..m).map(|r| h[r * C + c]).sum::<f64>() / m as f64).collect();
        let var = (0..C)
            .map(|c| (0..m).map(|r| (h[r * C + c] - mean[c]).powi(2)).sum::<f64>() / m as f64)
            .collect();
        (mean, var)
    } else {
        (
            param64(store, &format!("{name}.bn.running_mean")),
            param64(store, &format!("{name}.bn.running_var")),
        )
    };
    let mut out = vec![0.0; n * C];
    let mut seen = vec![false; n];
    for (r, &i) in owner.iter().enumerate() {
        for c in 0..C {
            let z = gamma[c] * (h[r * C + c] - mean[c]) / (var[c] + BN_EPS).sqrt() + beta[c];
            let z = if z > 0.0 { z } else { LEAKY_SLOPE * z };
            let prev: f64 = out[i * C + c];
            out[i * C + c] = if seen[i] { prev.max(z) } else { z };
        }
        seen[i] = true;
    }
    out
}

/// `corr[n, y, x] = sum_c P[n, c] * E[c, y, x]` for one sample.
pub fn correlation_oracle(p: &[f64], e: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * hw];
    for i in 0..n {
        for px in 0..hw {
            out[i * hw + px] = (0..c).map(|k| p[i * c + k] * e[k * hw + px]).sum();
        }
    }
    out
}

/// Superpixel is salient when strictly more than half its pixels are.
pub fn am_gt_oracle(labels: &SuperpixelLabelMap, gt: &[f32]) -> Vec<f32> {
    let lab = labels.labels();
    let mut out = vec![0.0; lab.len()];
    for l in 0..labels.n_actual() as u32 {
        let members: Vec<usize> = (0..lab.len()).filter(|&p| lab[p] == l).collect();
        let hits = members.iter().filter(|&&p| gt[p] == 1.0).count();
        if hits * 2 > members.len() {
            for p in members {
                out[p] = 1.0;
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Scores of a block and of its row permutation, in eval mode.
pub fn permuted_scores(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut r = rng(seed);
    let n = r.random_range(6..=14);
    let a_k = r.random_range(1..=4);
    let (psnm, store) = psnm_fixture(a_k, 1, seed);
    let rows = uniform(&[n, C], -1.0, 1.0, seed + 1);
    let mut valid: Vec<bool> = (0..n).map(|_| r.random_bool(0.85)).collect();
    valid[0] = true;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let p_rows = Tensor::from_fn(&[n, C], |i| rows.data()[perm[i / C] * C + i % C]);
    let p_valid: Vec<bool> = perm.iter().map(|&j| valid[j]).collect();
    let run = |x: &Tensor<f64>, v: Vec<bool>| {
        let mut g: Graph<f64> = Graph::new(&store, Mode::Eval);
        let xv = g.constant(x.clone());
        let s = psnm.sample_scores(&mut g, &batched_block(xv, v, n)).unwrap();
        g.tape.value(s).data().to_vec()
    };
    (run(&rows, valid), run(&p_rows, p_valid), perm)
}

// ------------------------------------------------------- gradient checks

pub struct GradCase {
    pub name: &'static str,
    pub run: fn() -> Result<f64>,
}

fn pgm_case() -> Result<f64> {
    let (_, mg) = mask_fixture(16, N_S, 11);
    let mg = downsample_mask_group(&mg, 8, 8)?;
    let f = uniform(&[1, 8, 8, 8], -1.0, 1.0, 12);
    grad_check(
        |t, x| {
            let pb = build_prototype_block(t, x, &[&mg], Modality::Rgb)?;
            project(t, pb.rows, 13)
        },
        &f,
        GRAD_EPS,
    )
}

/// Six prototypes, the last one invalid.
fn psnm_valid() -> Vec<bool> {
    (0..N_S).map(|i| i + 1 < N_S).collect()
}

fn psnm_attention_case() -> Result<f64> {
    let (psnm, store) = psnm_fixture(3, 2, 21);
    let rows = uniform(&[N_S, C], -1.0, 1.0, 22);
    grad_check(
        |t, x| {
            on_graph(&store, Mode::Eval, t, |g| {
                let pb = batched_block(x, psnm_valid(), N_S);
                let out = psnm.attention(g, &pb)?;
                project(&mut g.tape, out.rows, 23)
            })
        },
        &rows,
        GRAD_EPS,
    )
}

fn psnm_sampler_case() -> Result<f64> {
    let (psnm, store) = psnm_fixture(3, 1, 31);
    let rows = uniform(&[N_S, C], -1.0, 1.0, 32);
    grad_check(
        |t, x| {
            on_graph(&store, Mode::Train, t, |g| {
                let pb = batched_block(x, psnm_valid(), N_S);
                let s = psnm.sample_scores(g, &pb)?;
                project(&mut g.tape, s, 33)
            })
        },
        &rows,
        GRAD_EPS,
    )
}

fn psnm_edgeconv_weight_case() -> Result<f64> {
    let (psnm, store) = psnm_fixture(3, 1, 41);
    let rows = uniform(&[N_S, C], -1.0, 1.0, 42);
    let name = psnm.mlp_f.first.bias_name();
    let point: Tensor<f64> = store.get(&name).unwrap().cast();
    grad_check(
        |t, b| {
            on_graph(&store, Mode::Train, t, |g| {
                g.bind(&name, b)?;
                let x = g.constant(rows.clone());
                let pb = batched_block(x, psnm_valid(), N_S);
                let s = psnm.sample_scores(g, &pb)?;
                project(&mut g.tape, s, 43)
            })
        },
        &point,
        GRAD_EPS,
    )
}

fn psnm_correlation_case() -> Result<f64> {
    let rows = uniform(&[N_S, 16], -1.0, 1.0, 51);
    let ecr: Vec<Tensor<f64>> = [8, 4, 2]
        .iter()
        .enumerate()
        .map(|(i, &s)| uniform(&[1, 16, s, s], -1.0, 1.0, 52 + i as u64))
        .collect();
    let by_rows = grad_check(
        |t, x| {
            let pb = batched_block(x, vec![true; N_S], N_S);
            let e = [0, 1, 2].map(|i| t.constant(ecr[i].clone()));
            let maps = correlation_maps(t, &pb, e)?;
            let mut total = project(t, maps[0], 55)?;
            for (i, m) in maps.iter().enumerate().skip(1) {
                let p = project(t, *m, 55 + i as u64)?;
                total = t.add(total, p)?;
            }
            Ok(total)
        },
        &rows,
        GRAD_EPS,
    )?;
    let by_features = grad_check(
        |t, e| {
            let r = t.constant(rows.clone());
            let pb = batched_block(r, vec![true; N_S], N_S);
            let e1 = t.constant(ecr[1].clone());
            let e2 = t.constant(ecr[2].clone());
            let maps = correlation_maps(t, &pb, [e, e1, e2])?;
            project(t, maps[0], 58)
        },
        &ecr[0],
        GRAD_EPS,
    )?;
    Ok(by_rows.max(by_features))
}

fn rsm_fixture() -> (Rsm, ParamStore, Vec<Tensor<f64>>) {
    let rsm = Rsm::new("rsm", N_S, 8).unwrap();
    let mut store = ParamStore::new();
    rsm.declare(&mut store, &mut rng(61)).unwrap();
    randomise_bn(&mut store, 62);
    let maps = (0..6)
        .map(|i| {
            let s = [8, 4, 2][i % 3];
            uniform(&[1, N_S, s, s], -1.0, 1.0, 63 + i as u64)
        })
        .collect();
    (rsm, store, maps)
}

fn rsm_case() -> Result<f64> {
    let (rsm, store, maps) = rsm_fixture();
    let through_maps = grad_check(
        |t, x| {
            on_graph(&store, Mode::Eval, t, |g| {
                let c: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
                let f = rsm.fuse_rgbd(g, &[c[0], c[1], c[2]], &[x, c[4], c[5]])?;
                let w = rsm.rely_weights(g, f)?;
                let weighted = apply_reliance(g, f, w)?;
                let a = project(&mut g.tape, w, 70)?;
                let b = project(&mut g.tape, weighted, 71)?;
                g.tape.add(a, b)
            })
        },
        &maps[3],
        GRAD_EPS,
    )?;
    let name = rsm.fuse_weight_names()[1][0].clone();
    let point: Tensor<f64> = store.get(&name).unwrap().cast();
    let through_fuse = grad_check(
        |t, wt| {
            on_graph(&store, Mode::Eval, t, |g| {
                g.bind(&name, wt)?;
                let c: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
                let f = rsm.fuse_rgbd(g, &[c[0], c[1], c[2]], &[c[3], c[4], c[5]])?;
                let w = rsm.rely_weights(g, f)?;
                project(&mut g.tape, w, 72)
            })
        },
        &point,
        GRAD_EPS,
    )?;
    Ok(through_maps.max(through_fuse))
}

fn decoder_case() -> Result<f64> {
    let dec = Decoder::new("dec", 2 * N_S);
    let mut store = ParamStore::new();
    dec.declare(&mut store, &mut rng(81))?;
    randomise_bn(&mut store, 82);
    let x = uniform(&[1, 2 * N_S, 8, 8], -1.0, 1.0, 83);
    let eval = grad_check(
        |t, v| on_graph(&store, Mode::Eval, t, |g| {
            let y = dec.decode(g, v, 16, 16)?;
            project(&mut g.tape, y, 84)
        }),
        &x,
        GRAD_EPS,
    )?;
    let x2 = uniform(&[2, 2 * N_S, 8, 8], -1.0, 1.0, 85);
    let point: Tensor<f64> = store.get("dec.out.weight").unwrap().cast();
    let train = grad_check(
        |t, wt| on_graph(&store, Mode::Train, t, |g| {
            g.bind("dec.out.weight", wt)?;
            let v = g.constant(x2.clone());
            let y = dec.decode(g, v, 16, 16)?;
            project(&mut g.tape, y, 86)
        }),
        &point,
        GRAD_EPS,
    )?;
    Ok(eval.max(train))
}

fn binary(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect()
}

fn iou_case() -> Result<f64> {
    let gt = binary(256, 91);
    let pred = uniform(&[16, 16], 0.05, 0.95, 92);
    grad_check(|t, p| iou_loss(t, p, &gt), &pred, GRAD_EPS)
}

fn bce_case() -> Result<f64> {
    let gt = binary(256, 93);
    let pred = uniform(&[256], 0.05, 0.95, 94);
    grad_check(|t, p| psnm_loss(t, p, &gt), &pred, GRAD_EPS)
}

fn rsm_loss_case() -> Result<f64> {
    let targets = [
        RelianceTarget { gt_r: 0.75, gt_d: 0.25 },
        RelianceTarget { gt_r: 0.1, gt_d: 0.9 },
    ];
    let rely = Tensor::new(&[2, 2], vec![0.4, 0.6, 0.3, 0.55])?;
    grad_check(|t, r| rsm_loss(t, r, &targets), &rely, GRAD_EPS)
}

pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "pgm", run: pgm_case },
        GradCase { name: "psnm_attention", run: psnm_attention_case },
        GradCase { name: "psnm_sampler", run: psnm_sampler_case },
        GradCase { name: "psnm_sampler_weights", run: psnm_edgeconv_weight_case },
        GradCase { name: "psnm_correlation", run: psnm_correlation_case },
        GradCase { name: "rsm", run: rsm_case },
        GradCase { name: "decoder", run: decoder_case },
        GradCase { name: "iou_loss", run: iou_case },
        GradCase { name: "bce_loss", run: bce_case },
        GradCase { name: "rsm_loss", run: rsm_loss_case },
    ]
}

pub fn edgeconv_fixture(seed: u64) -> (EdgeConv, ParamStore) {
    let layer = EdgeConv::new("ec", C);
    let mut store = ParamStore::new();
    layer.declare(&mut store, &mut rng(seed)).unwrap();
    randomise_bn(&mut store, seed + 1);
    (layer, store)
}
