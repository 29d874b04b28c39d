//! Reliance selection: fuse the RGB and depth correlation pyramids, predict
//! one reliance weight per modality and derive the self-supervised target
//! those weights are trained towards.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, Graph, Linear};
use crate::params::ParamStore;
use crate::tensor::{ConvGeom, Real, Tensor, Var};

const RELY_WIDTHS: [usize; 3] = [64, 32, 16];
/// Smallest 1/8-scale feature side the reliance network accepts.
pub const MIN_FEATURE_SIDE: usize = 8;
const DEGENERATE: f64 = 1e-8;

/// Output side of one stride-2, pad-1, 3x3 conv.
fn halve(n: usize) -> usize {
    (n - 1) / 2 + 1
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelianceTarget {
    pub gt_r: f64,
    pub gt_d: f64,
}

#[derive(Clone, Debug)]
pub struct Rsm {
    /// One channel-preserving 1x1 conv per (scale, modality).
    fuse: Vec<[Conv2d; 2]>,
    rely: Vec<ConvBnRelu>,
    head: Linear,
    n_slots: usize,
    feature_side: usize,
}

impl Rsm {
    /// `feature_side` is the 1/8-scale side length the network is bound to.
    pub fn new(name: &str, n_slots: usize, feature_side: usize) -> Result<Self> {
        if feature_side < MIN_FEATURE_SIDE {
            return Err(Error::TooSmall {
                height: feature_side,
                width: feature_side,
                min: MIN_FEATURE_SIDE,
            });
        }
        let fuse = (0..3)
            .map(|s| {
                [0, 1].map(|m| {
                    let tag = if m == 0 { "rgb" } else { "depth" };
                    Conv2d::new(format!("{name}.fuse{s}_{tag}"), n_slots, n_slots, 1)
                })
            })
            .collect();
        let geom = ConvGeom {
            stride: 2,
            padding: 1,
            ..ConvGeom::default()
        };
        let chans = [2 * n_slots, RELY_WIDTHS[0], RELY_WIDTHS[1], RELY_WIDTHS[2]];
        let rely = (0..3)
            .map(|i| ConvBnRelu::new(&format!("{name}.rely{i}"), chans[i], chans[i + 1], 3, geom))
            .collect();
        let side = halve(halve(halve(feature_side)));
        Ok(Self {
            fuse,
            rely,
            head: Linear::new(format!("{name}.head"), RELY_WIDTHS[2] * side * side, 2),
            n_slots,
            feature_side,
        })
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for pair in &self.fuse {
            for conv in pair {
                conv.declare(store, rng)?;
            }
        }
        for b in &self.rely {
            b.declare(store, rng)?;
        }
        self.head.declare(store, rng)
    }

    /// Names of the fusion convs, as `[scale][modality]` weight names.
    pub fn fuse_weight_names(&self) -> Vec<[String; 2]> {
        self.fuse
            .iter()
            .map(|p| [p[0].weight_name(), p[1].weight_name()])
            .collect()
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Per-scale `[rgb, depth]` correlation maps to `F_RSM`, `[B, 2N, h, w]`
    /// at the 1/8 scale. Channels `0..N` derive from RGB only.
    pub fn fuse_rgbd<T: Real>(&self, g: &mut Graph<T>, rgb: &[Var; 3], depth: &[Var; 3]) -> Result<Var> {
        let base = g.tape.shape(rgb[0]).to_vec();
        if base.len() != 4 || base[1] != self.n_slots {
            return Err(shape_err(
                "fuse_rgbd",
                format!("expected {} correlation channels, got {base:?}", self.n_slots),
            ));
        }
        let (h, w) = (base[2], base[3]);
        let mut total: Option<Var> = None;
        for s in 0..3 {
            if g.tape.shape(rgb[s]) != g.tape.shape(depth[s]) {
                return Err(shape_err(
                    "fuse_rgbd",
                    format!(
                        "scale {s}: rgb {:?} vs depth {:?}",
                        g.tape.shape(rgb[s]),
                        g.tape.shape(depth[s])
                    ),
                ));
            }
            let r = self.fuse[s][0].forward(g, rgb[s])?;
            let d = self.fuse[s][1].forward(g, depth[s])?;
            let cat = g.tape.concat(&[r, d], 1)?;
            let up = if s == 0 {
                cat
            } else {
                g.tape.upsample_bilinear(cat, h, w)?
            };
            total = Some(match total {
                None => up,
                Some(t) => g.tape.add(t, up)?,
            });
        }
        Ok(total.expect("three scales"))
    }

    /// `[B, 2]` sigmoid reliance weights `(rely_r, rely_d)`.
    pub fn rely_weights<T: Real>(&self, g: &mut Graph<T>, f: Var) -> Result<Var> {
        let s = g.tape.shape(f).to_vec();
        if s.len() != 4 || s[1] != 2 * self.n_slots {
            return Err(shape_err("rely_weights", format!("unexpected F_RSM {s:?}")));
        }
        if s[2] < MIN_FEATURE_SIDE || s[3] < MIN_FEATURE_SIDE {
            return Err(Error::TooSmall {
                height: s[2],
                width: s[3],
                min: MIN_FEATURE_SIDE,
            });
        }
        if s[2] != self.feature_side || s[3] != self.feature_side {
            return Err(Error::ResolutionMismatch {
                saved: self.feature_side * 8,
                requested: s[2] * 8,
            });
        }
        let mut x = f;
        for b in &self.rely {
            x = b.forward(g, x)?;
        }
        let n = g.tape.value(x).numel() / s[0];
        let x = g.tape.reshape(x, &[s[0], n])?;
        let x = self.head.forward(g, x)?;
        Ok(g.tape.sigmoid(x))
    }
}

/// Channel sum of one sample of `F_RSM` (`[C, h, w]`), min-max normalised.
/// A constant sum maps to all zeros.
pub fn pseudo_gt<T: Real>(f: &Tensor<T>) -> Result<Vec<f64>> {
    let s = f.shape();
    if s.len() != 3 {
        return Err(shape_err("pseudo_gt", format!("expected [C,h,w], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let mut sum = vec![0.0f64; plane];
    for ch in f.data().chunks(plane) {
        for (acc, &v) in sum.iter_mut().zip(ch) {
            *acc += v.as_f64();
        }
    }
    let lo = sum.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(vec![0.0; plane]);
    }
    Ok(sum.iter().map(|&v| (v - lo) / (hi - lo)).collect())
}

/// Reliance target of one sample: each modality's weight is the other
/// modality's share of the total mean L1 distance to the pseudo GT.
pub fn rsm_ground_truth<T: Real>(f: &Tensor<T>) -> Result<RelianceTarget> {
    let pgt = pseudo_gt(f)?;
    let s = f.shape();
    if s[0] % 2 != 0 || s[0] == 0 {
        return Err(shape_err("rsm_ground_truth", format!("odd channel count in {s:?}")));
    }
    let n = s[0] / 2;
    let plane = pgt.len();
    let block_mean = |block: usize| {
        let data = &f.data()[block * n * plane..(block + 1) * n * plane];
        let total: f64 = data
            .iter()
            .enumerate()
            .map(|(i, &v)| (pgt[i % plane] - v.as_f64()).abs())
            .sum();
        total / (n * plane) as f64
    };
    Ok(target_from_distances(block_mean(0), block_mean(1)))
}

/// `(D_D, D_R) / (D_R + D_D)`, or `(0.5, 0.5)` when both are ~0.
pub fn target_from_distances(d_r: f64, d_d: f64) -> RelianceTarget {
    let total = d_r + d_d;
    if total < DEGENERATE {
        return RelianceTarget { gt_r: 0.5, gt_d: 0.5 };
    }
    RelianceTarget {
        gt_r: d_d / total,
        gt_d: d_r / total,
    }
}

/// Scales channels `0..N` of `f` (`[B, 2N, h, w]`) by `w[b, 0]` and channels
/// `N..2N` by `w[b, 1]`.
pub fn apply_reliance<T: Real>(g: &mut Graph<T>, f: Var, w: Var) -> Result<Var> {
    let s = g.tape.shape(f).to_vec();
    if s.len() != 4 || s[1] % 2 != 0 || g.tape.shape(w) != [s[0], 2] {
        return Err(shape_err(
            "apply_reliance",
            format!("weights {:?} for features {s:?}", g.tape.shape(w)),
        ));
    }
    let n = s[1] / 2;
    let expand = Tensor::from_fn(&[2, 2 * n], |i| {
        let (row, col) = (i / (2 * n), i % (2 * n));
        if (col < n) == (row == 0) {
            T::one()
        } else {
            T::zero()
        }
    });
    let expand = g.constant(expand);
    let per_channel = g.tape.matmul(w, expand)?;
    g.tape.mul_prefix(f, per_channel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_gt_arithmetic() {
        let f = Tensor::new(&[2, 2, 2], vec![0.0f64, 1.0, 2.0, 4.0, 0.0, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(pseudo_gt(&f).unwrap(), vec![0.0, 0.25, 0.5, 1.0]);
        let c = Tensor::full(&[2, 3, 3], 0.7f32);
        assert!(pseudo_gt(&c).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_arithmetic() {
        assert_eq!(target_from_distances(1.0, 3.0), RelianceTarget { gt_r: 0.75, gt_d: 0.25 });
        assert_eq!(target_from_distances(0.0, 0.0), RelianceTarget { gt_r: 0.5, gt_d: 0.5 });
        assert_eq!(target_from_distances(2.0, 2.0), RelianceTarget { gt_r: 0.5, gt_d: 0.5 });
    }

    #[test]
    fn too_small_feature() {
        assert!(matches!(Rsm::new("rsm", 4, 4), Err(Error::TooSmall { min: 8, .. })));
    }
}
