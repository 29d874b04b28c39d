//! Procedural RGB-D saliency samples: one to three flat-coloured shapes over
//! a textured background, with the shapes nearer in depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::model::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a depth map is spoiled when degradation is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Degradation {
    /// Heavy additive Gaussian noise.
    Noise,
    /// All structure removed; depth is the map mean plus faint noise.
    Flattened,
    /// `1 - depth`, so the object appears farther than the background.
    Inverted,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub size: usize,
    /// Probability that a sample's depth map is degraded.
    pub depth_degrade: f64,
    /// Allowed salient area as a fraction of the image.
    pub area: (f64, f64),
}

impl SynthOptions {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            depth_degrade: 0.0,
            area: (0.06, 0.4),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
        }
    }

    fn random(rng: &mut impl Rng, size: f64) -> Self {
        let cy = rng.random_range(0.2..0.8) * size;
        let cx = rng.random_range(0.2..0.8) * size;
        let ry = rng.random_range(0.08..0.3) * size;
        let rx = rng.random_range(0.08..0.3) * size;
        if rng.random_bool(0.5) {
            Shape::Ellipse { cy, cx, ry, rx, angle: rng.random_range(0.0..std::f64::consts::PI) }
        } else {
            Shape::Rect { y0: cy - ry, x0: cx - rx, y1: cy + ry, x1: cx + rx }
        }
    }
}

fn rasterise(shapes: &[Shape], size: usize) -> Vec<Option<usize>> {
    let mut owner = vec![None; size * size];
    for (k, s) in shapes.iter().enumerate() {
        for y in 0..size {
            for x in 0..size {
                if s.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    owner[y * size + x] = Some(k);
                }
            }
        }
    }
    owner
}

/// Sample `index` of the stream seeded by `seed`. Any prefix of a dataset is
/// independent of its total length.
pub fn generate_sample(index: usize, seed: u64, opts: &SynthOptions) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let n = opts.size;
    let size = n as f64;
    let plane = n * n;

    let (lo, hi) = opts.area;
    let mut owner = None;
    for _ in 0..64 {
        let k = rng.random_range(1..=3);
        let shapes: Vec<Shape> = (0..k).map(|_| Shape::random(&mut rng, size)).collect();
        let o = rasterise(&shapes, n);
        let frac = o.iter().filter(|v| v.is_some()).count() as f64 / plane as f64;
        if frac >= lo && frac <= hi {
            owner = Some((o, k));
            break;
        }
    }
    let (owner, n_shapes) = owner.unwrap_or_else(|| {
        // An ellipse whose area is the midpoint of the allowed range.
        let r = ((lo + hi) / 2.0 * size * size / std::f64::consts::PI).sqrt();
        let s = Shape::Ellipse { cy: size / 2.0, cx: size / 2.0, ry: r, rx: r, angle: 0.0 };
        (rasterise(&[s], n), 1)
    });

    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let mut fg = [0.0; 3];
    for attempt in 0..32 {
        fg = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let dist = fg.iter().zip(&bg).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist >= 0.45 {
            break;
        }
        if attempt == 31 {
            fg = bg.map(|c| 1.0 - c);
        }
    }
    let freq: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.05..0.35));
    let phase: [f64; 2] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let mut rgb = vec![0.0f32; 3 * plane];
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            let (yf, xf) = (y as f64, x as f64);
            let texture = 0.07 * (freq[0] * xf + freq[1] * yf + phase[0]).sin()
                + 0.05 * (freq[2] * xf - freq[3] * yf + phase[1]).sin();
            for c in 0..3 {
                let base = match owner[p] {
                    Some(_) => fg[c],
                    None => bg[c] + texture,
                };
                rgb[c * plane + p] = (base + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let near: Vec<f64> = (0..n_shapes).map(|_| rng.random_range(0.65..0.9)).collect();
    let tilt = rng.random_range(-0.1..0.1);
    let fine = Normal::new(0.0, 0.01).expect("valid std");
    let mut depth: Vec<f64> = (0..plane)
        .map(|p| {
            let (y, x) = ((p / n) as f64 / size, (p % n) as f64 / size);
            let v = match owner[p] {
                Some(k) => near[k] + 0.05 * (0.5 - y),
                None => 0.15 + 0.3 * y + tilt * (x - 0.5),
            };
            v + fine.sample(&mut rng)
        })
        .collect();
    if rng.random_bool(opts.depth_degrade.clamp(0.0, 1.0)) {
        let mode = match rng.random_range(0..3) {
            0 => Degradation::Noise,
            1 => Degradation::Flattened,
            _ => Degradation::Inverted,
        };
        degrade(&mut depth, mode, &mut rng);
    }

    let gt = owner.iter().map(|o| if o.is_some() { 1.0 } else { 0.0 }).collect();
    Sample {
        name: format!("synth_{index:05}"),
        rgb: Tensor::new(&[3, n, n], rgb).expect("sized"),
        depth: Tensor::new(&[1, n, n], depth.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())
            .expect("sized"),
        gt: Some(gt),
    }
}

fn degrade(depth: &mut [f64], mode: Degradation, rng: &mut impl Rng) {
    match mode {
        Degradation::Noise => {
            let heavy = Normal::new(0.0, 0.25).expect("valid std");
            for v in depth.iter_mut() {
                *v += heavy.sample(rng);
            }
        }
        Degradation::Flattened => {
            let mean = depth.iter().sum::<f64>() / depth.len() as f64;
            let faint = Normal::new(0.0, 0.01).expect("valid std");
            for v in depth.iter_mut() {
                *v = mean + faint.sample(rng);
            }
        }
        Degradation::Inverted => {
            for v in depth.iter_mut() {
                *v = 1.0 - *v;
            }
        }
    }
}

pub fn generate_synthetic(n: usize, seed: u64, opts: &SynthOptions) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if opts.size == 0 || !(0.0..=1.0).contains(&opts.depth_degrade) {
        return Err(Error::Param(format!(
            "synthetic size {} / degradation probability {} out of range",
            opts.size, opts.depth_degrade
        )));
    }
    Ok((0..n).map(|i| generate_sample(i, seed, opts)).collect())
}
