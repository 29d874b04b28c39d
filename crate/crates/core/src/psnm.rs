//! Prototype sampling network.
//!
//! Attention over prototypes, a dynamic-graph EdgeConv sampler that scores
//! every prototype, the auxiliary superpixel maps used for supervision, and
//! the correlation maps obtained by using prototypes as 1x1 kernels.

use rand::Rng;

use crate::encoder::FUSION_CHANNELS;
use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm, Graph, Linear, Mlp, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::pgm::PrototypeBlock;
use crate::superpixel::SuperpixelLabelMap;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Length of the key/query/value projections.
pub const ATTENTION_DIM: usize = 64;
/// Hidden width of the scoring MLP.
pub const SCORE_HIDDEN: usize = 64;
pub const EDGECONV_LAYERS: usize = 3;

/// For every row of `feats` listed in `rows`, the `a_k` other listed rows at
/// the smallest Euclidean distance, nearest first. Ties go to the lower index.
///
/// Returned indices are row numbers of `feats`.
pub fn knn_graph<T: Real>(feats: &Tensor<T>, rows: &[usize], a_k: usize) -> Result<Vec<Vec<usize>>> {
    if feats.rank() != 2 {
        return Err(shape_err("knn_graph", format!("expected a matrix, got {:?}", feats.shape())));
    }
    if a_k == 0 || a_k >= rows.len() {
        return Err(Error::TooFewPrototypes {
            required: a_k.max(1) + 1,
            available: rows.len(),
        });
    }
    let c = feats.dim(1);
    let d = feats.data();
    let row = |i: usize| &d[i * c..(i + 1) * c];
    Ok(rows
        .iter()
        .map(|&i| {
            let mut cand: Vec<(T, usize)> = rows
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| {
                    let dist = row(i)
                        .iter()
                        .zip(row(j))
                        .fold(T::zero(), |a, (&x, &y)| a + (x - y) * (x - y));
                    (dist, j)
                })
                .collect();
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
            cand.truncate(a_k);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

/// `a_k` clamped to what a sample with `n_valid` prototypes supports.
/// Zero means the sample gets a single self-edge.
pub fn effective_k(a_k: usize, n_valid: usize) -> usize {
    a_k.min(n_valid.saturating_sub(1))
}

/// Neighbour table for a whole batch: entry `i` lists the neighbours of row
/// `i` (empty for invalid rows).
pub fn batch_knn<T: Real>(feats: &Tensor<T>, pb: &PrototypeBlock, a_k: usize) -> Result<Vec<Vec<usize>>> {
    let mut table = vec![Vec::new(); pb.valid.len()];
    for b in 0..pb.batch() {
        let rows = pb.valid_rows(b);
        match effective_k(a_k, rows.len()) {
            0 => {
                for &i in &rows {
                    table[i] = vec![i];
                }
            }
            k => {
                for (&i, nb) in rows.iter().zip(knn_graph(feats, &rows, k)?) {
                    table[i] = nb;
                }
            }
        }
    }
    Ok(table)
}

/// `h([P_i, P_j - P_i])` followed by batch norm, leaky ReLU and a max over
/// each row's neighbours.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl EdgeConv {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            linear: Linear::new(format!("{name}.linear"), 2 * channels, channels),
            bn: BatchNorm::new(format!("{name}.bn"), channels),
        }
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.linear.declare(store, rng)?;
        self.bn.declare(store)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, neighbors: &[Vec<usize>]) -> Result<Var> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 2 || s[0] != neighbors.len() {
            return Err(shape_err(
                "edgeconv",
                format!("{} neighbour lists for prototypes {s:?}", neighbors.len()),
            ));
        }
        let (mut centre, mut other) = (Vec::new(), Vec::new());
        let active: Vec<usize> = (0..s[0]).filter(|&i| !neighbors[i].is_empty()).collect();
        if active.is_empty() {
            return Err(Error::NoValidPrototypes);
        }
        for &i in &active {
            for &j in &neighbors[i] {
                centre.push(i);
                other.push(j);
            }
        }
        let xi = g.tape.gather_rows(x, &centre)?;
        let xj = g.tape.gather_rows(x, &other)?;
        let diff = g.tape.sub(xj, xi)?;
        let edges = g.tape.concat(&[xi, diff], 1)?;
        let e = self.linear.forward(g, edges)?;
        let e = self.bn.forward(g, e)?;
        let e = g.tape.leaky_relu(e, T::of(LEAKY_SLOPE));

        // Max over neighbours, in runs of rows sharing a neighbour count.
        let c = self.linear.out_dim;
        let mut pooled = Vec::new();
        let (mut start, mut edge) = (0, 0);
        while start < active.len() {
            let k = neighbors[active[start]].len();
            let mut end = start;
            while end < active.len() && neighbors[active[end]].len() == k {
                end += 1;
            }
            let n = end - start;
            let block = g.tape.narrow(e, 0, edge, n * k)?;
            let block = g.tape.reshape(block, &[n, k, c])?;
            pooled.push(g.tape.max_axis(block, 1)?);
            edge += n * k;
            start = end;
        }
        let pooled = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.tape.concat(&pooled, 0)?
        };
        g.tape.scatter_rows(pooled, &active, s[0])
    }
}

#[derive(Clone, Debug)]
pub struct Psnm {
    pub mlp_k: Mlp,
    pub mlp_q: Mlp,
    pub mlp_v: Mlp,
    pub mlp_w: Mlp,
    pub edgeconv: Vec<EdgeConv>,
    pub mlp_f: Mlp,
    pub n_heads: usize,
    pub a_k: usize,
    pub dynamic_graph: bool,
}

impl Psnm {
    pub fn new(name: &str, a_k: usize, n_heads: usize, dynamic_graph: bool) -> Self {
        let c = FUSION_CHANNELS;
        let d = ATTENTION_DIM;
        Self {
            mlp_k: Mlp::new(&format!("{name}.mlp_k"), c, d),
            mlp_q: Mlp::new(&format!("{name}.mlp_q"), c, d),
            mlp_v: Mlp::new(&format!("{name}.mlp_v"), c, d),
            mlp_w: Mlp::new(&format!("{name}.mlp_w"), d, c),
            edgeconv: (0..EDGECONV_LAYERS)
                .map(|i| EdgeConv::new(&format!("{name}.edgeconv{i}"), c))
                .collect(),
            mlp_f: Mlp::with_hidden(&format!("{name}.mlp_f"), c, SCORE_HIDDEN, 1),
            n_heads,
            a_k,
            dynamic_graph,
        }
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        if self.n_heads == 0 || ATTENTION_DIM % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads = {} does not divide the attention width {ATTENTION_DIM}",
                self.n_heads
            )));
        }
        for m in [&self.mlp_k, &self.mlp_q, &self.mlp_v, &self.mlp_w] {
            m.declare(store, rng)?;
        }
        for e in &self.edgeconv {
            e.declare(store, rng)?;
        }
        self.mlp_f.declare(store, rng)
    }

    /// `PB + MLP_W(softmax(Q K^T / sqrt(d)) V)` per sample, with invalid
    /// prototypes masked out as keys and zeroed in the output.
    pub fn attention<T: Real>(&self, g: &mut Graph<T>, pb: &PrototypeBlock) -> Result<PrototypeBlock> {
        let k = self.mlp_k.forward(g, pb.rows)?;
        let q = self.mlp_q.forward(g, pb.rows)?;
        let v = self.mlp_v.forward(g, pb.rows)?;
        let n = pb.n_slots;
        let dh = ATTENTION_DIM / self.n_heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut samples = Vec::with_capacity(pb.batch());
        for b in 0..pb.batch() {
            let mask = &pb.valid[b * n..(b + 1) * n];
            if !mask.iter().any(|&m| m) {
                return Err(Error::NoValidPrototypes);
            }
            let mut heads = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let part = |g: &mut Graph<T>, x: Var| -> Result<Var> {
                    let rows = g.tape.narrow(x, 0, b * n, n)?;
                    g.tape.narrow(rows, 1, h * dh, dh)
                };
                let (qb, kb, vb) = (part(g, q)?, part(g, k)?, part(g, v)?);
                let kt = g.tape.transpose(kb)?;
                let logits = g.tape.matmul(qb, kt)?;
                let logits = g.tape.scale(logits, scale);
                let attn = g.tape.softmax_rows(logits, Some(mask))?;
                heads.push(g.tape.matmul(attn, vb)?);
            }
            samples.push(if heads.len() == 1 {
                heads[0]
            } else {
                g.tape.concat(&heads, 1)?
            });
        }
        let mixed = if samples.len() == 1 {
            samples[0]
        } else {
            g.tape.concat(&samples, 0)?
        };
        let out = self.mlp_w.forward(g, mixed)?;
        let out = g.tape.add(pb.rows, out)?;
        let valid = g.constant(pb.valid_mask());
        Ok(pb.with_rows(g.tape.mul_prefix(out, valid)?))
    }

    /// Three EdgeConv layers then `sigmoid(MLP_F(.))` per prototype. Returns
    /// `[rows]` scores, exactly zero for invalid prototypes.
    pub fn sample_scores<T: Real>(&self, g: &mut Graph<T>, pb: &PrototypeBlock) -> Result<Var> {
        let mut x = pb.rows;
        let mut table = batch_knn(g.tape.value(x), pb, self.a_k)?;
        for (i, layer) in self.edgeconv.iter().enumerate() {
            if i > 0 && self.dynamic_graph {
                table = batch_knn(g.tape.value(x), pb, self.a_k)?;
            }
            x = layer.forward(g, x, &table)?;
        }
        let logits = self.mlp_f.forward(g, x)?;
        let s = g.tape.sigmoid(logits);
        let s = g.tape.reshape(s, &[pb.valid.len()])?;
        let valid = g.constant(pb.valid_mask());
        g.tape.mul(s, valid)
    }
}

/// Scales prototype row `i` by `scores[i]`.
pub fn apply_sampler<T: Real>(tape: &mut Tape<T>, pb: &PrototypeBlock, scores: Var) -> Result<PrototypeBlock> {
    Ok(pb.with_rows(tape.mul_prefix(pb.rows, scores)?))
}

/// Per-pixel score of the pixel's superpixel, `[B * H * W]`.
pub fn am_pred<T: Real>(tape: &mut Tape<T>, scores: Var, labels: &[&SuperpixelLabelMap], n_slots: usize) -> Result<Var> {
    if tape.shape(scores) != [labels.len() * n_slots] {
        return Err(shape_err(
            "am_pred",
            format!("scores {:?} for {} samples of {n_slots}", tape.shape(scores), labels.len()),
        ));
    }
    let idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .flat_map(|(b, lm)| lm.labels().iter().map(move |&l| b * n_slots + l as usize))
        .collect();
    let col = tape.reshape(scores, &[labels.len() * n_slots, 1])?;
    let px = tape.gather_rows(col, &idx)?;
    tape.reshape(px, &[idx.len()])
}

/// Union of the superpixels whose overlap with `gt` exceeds half their area.
pub fn am_gt(labels: &SuperpixelLabelMap, gt: &[f32]) -> Result<Vec<f32>> {
    if gt.len() != labels.labels().len() {
        return Err(shape_err(
            "am_gt",
            format!("{} gt pixels for a {}x{} label map", gt.len(), labels.height, labels.width),
        ));
    }
    if let Some(&bad) = gt.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryMask(bad));
    }
    let mut overlap = vec![0usize; labels.n_actual()];
    let sizes = labels.sizes();
    for (&l, &v) in labels.labels().iter().zip(gt) {
        if v == 1.0 {
            overlap[l as usize] += 1;
        }
    }
    let salient: Vec<bool> = overlap.iter().zip(&sizes).map(|(&o, &s)| 2 * o > s).collect();
    Ok(labels
        .labels()
        .iter()
        .map(|&l| if salient[l as usize] { 1.0 } else { 0.0 })
        .collect())
}

/// Every sample's prototypes used as 1x1 kernels over `ecr` (`[B, C, h, w]`),
/// giving `[B, n_slots, h, w]`.
pub fn correlation_map<T: Real>(tape: &mut Tape<T>, pb: &PrototypeBlock, ecr: Var) -> Result<Var> {
    let s = tape.shape(ecr).to_vec();
    let ps = tape.shape(pb.rows).to_vec();
    if s.len() != 4 || s[0] != pb.batch() || ps[1] != s[1] {
        return Err(shape_err(
            "correlation_map",
            format!("prototypes {ps:?} against features {s:?}"),
        ));
    }
    let (c, hw) = (s[1], s[2] * s[3]);
    let n = pb.n_slots;
    let mut maps = Vec::with_capacity(s[0]);
    for b in 0..s[0] {
        let p = tape.narrow(pb.rows, 0, b * n, n)?;
        let e = tape.narrow(ecr, 0, b, 1)?;
        let e = tape.reshape(e, &[c, hw])?;
        maps.push(tape.matmul(p, e)?);
    }
    let cat = if maps.len() == 1 {
        maps[0]
    } else {
        tape.concat(&maps, 0)?
    };
    tape.reshape(cat, &[s[0], n, s[2], s[3]])
}

/// Correlation maps at every scale of the `ecr` pyramid.
pub fn correlation_maps<T: Real>(tape: &mut Tape<T>, pb: &PrototypeBlock, ecr: [Var; 3]) -> Result<[Var; 3]> {
    Ok([
        correlation_map(tape, pb, ecr[0])?,
        correlation_map(tape, pb, ecr[1])?,
        correlation_map(tape, pb, ecr[2])?,
    ])
}
