use serde::{Deserialize, Serialize};

use super::lab::rgb_to_lab;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Depth in `[0,1]` is stretched to this range so that compactness has the
/// same meaning as for the CIELAB lightness channel.
const DEPTH_SCALE: f32 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Rgb,
    Depth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicParams {
    pub n_superpixels: usize,
    pub compactness: f32,
    pub iterations: usize,
}

impl SlicParams {
    pub fn new(n_superpixels: usize) -> Self {
        Self {
            n_superpixels,
            ..Self::default()
        }
    }
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            n_superpixels: 100,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

/// Per-pixel superpixel index in `[0, n_actual)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelLabelMap {
    pub height: usize,
    pub width: usize,
    labels: Vec<u32>,
    n_actual: usize,
    pub source: Source,
}

impl SuperpixelLabelMap {
    /// Builds a map from raw labels, compacting them to `[0, n)` by
    /// increasing original id.
    pub fn from_labels(height: usize, width: usize, labels: Vec<u32>, source: Source) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::Param(format!(
                "{} labels for a {height}x{width} image",
                labels.len()
            )));
        }
        let mut ids: Vec<u32> = labels.clone();
        ids.sort_unstable();
        ids.dedup();
        let labels = labels
            .iter()
            .map(|l| ids.binary_search(l).expect("label present") as u32)
            .collect();
        Ok(Self {
            height,
            width,
            labels,
            n_actual: ids.len(),
            source,
        })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn n_actual(&self) -> usize {
        self.n_actual
    }

    /// Pixel count of every superpixel.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_actual];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

/// Per-pixel feature vectors (CIELAB or scaled depth) in row-major order.
struct Features {
    h: usize,
    w: usize,
    dims: usize,
    data: Vec<f32>,
}

impl Features {
    fn from_image(image: &Tensor<f32>, source: Source) -> Result<Self> {
        let s = image.shape();
        let (channels, h, w) = match *s {
            [c, h, w] => (c, h, w),
            [h, w] => (1, h, w),
            _ => {
                return Err(Error::Param(format!(
                    "SLIC expects a [C,H,W] or [H,W] image, got {s:?}"
                )))
            }
        };
        if h == 0 || w == 0 {
            return Err(Error::Param("SLIC on an empty image".into()));
        }
        let plane = h * w;
        let d = image.data();
        let data = match (source, channels) {
            (Source::Rgb, 3) => (0..plane)
                .flat_map(|i| rgb_to_lab(d[i], d[plane + i], d[2 * plane + i]))
                .collect(),
            (Source::Depth, 1) => d.iter().map(|&v| v * DEPTH_SCALE).collect(),
            _ => {
                return Err(Error::Param(format!(
                    "{source:?} SLIC input has {channels} channels"
                )))
            }
        };
        let dims = if source == Source::Rgb { 3 } else { 1 };
        Ok(Self { h, w, dims, data })
    }

    fn pixel(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.dims..(idx + 1) * self.dims]
    }
}

#[derive(Clone, Debug)]
struct Center {
    y: f32,
    x: f32,
    feat: Vec<f32>,
}

/// Seed grid: `cols = ceil(sqrt(n * W / H))`, `rows = n / cols`, so the
/// number of seeds never exceeds `n`.
fn grid(n: usize, h: usize, w: usize) -> (usize, usize) {
    let cols = ((n as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, w.min(n));
    let rows = (n / cols).clamp(1, h);
    (rows, cols)
}

/// SLIC: local k-means over (feature, position) seeded on a regular grid,
/// followed by connectivity enforcement.
///
/// `image` is `[3,H,W]` sRGB in `[0,1]` for [`Source::Rgb`] or `[1,H,W]` /
/// `[H,W]` in `[0,1]` for [`Source::Depth`].
pub fn slic_segment(image: &Tensor<f32>, source: Source, params: &SlicParams) -> Result<SuperpixelLabelMap> {
    let feats = Features::from_image(image, source)?;
    let (h, w) = (feats.h, feats.w);
    let n = params.n_superpixels;
    if n == 0 {
        return Err(Error::Param("n_superpixels must be >= 1".into()));
    }
    if n > h * w {
        return Err(Error::Param(format!(
            "{n} superpixels requested for only {} pixels",
            h * w
        )));
    }
    if params.compactness.is_nan() || params.compactness <= 0.0 {
        return Err(Error::Param(format!(
            "compactness must be > 0, got {}",
            params.compactness
        )));
    }

    let (rows, cols) = grid(n, h, w);
    let (step_y, step_x) = (h as f32 / rows as f32, w as f32 / cols as f32);
    let step = (step_y * step_x).sqrt();
    let spatial_weight = (params.compactness / step).powi(2);

    let mut centers: Vec<Center> = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let y = (r as f32 + 0.5) * step_y - 0.5;
            let x = (c as f32 + 0.5) * step_x - 0.5;
            let py = (y.round() as usize).min(h - 1);
            let px = (x.round() as usize).min(w - 1);
            centers.push(Center {
                y,
                x,
                feat: feats.pixel(py * w + px).to_vec(),
            });
        }
    }

    let mut labels = vec![u32::MAX; h * w];
    let mut dist = vec![f32::INFINITY; h * w];
    for iter in 0..=params.iterations {
        labels.fill(u32::MAX);
        dist.fill(f32::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let y0 = (c.y - step_y).floor().max(0.0) as usize;
            let y1 = ((c.y + step_y).ceil() as usize).min(h - 1);
            let x0 = (c.x - step_x).floor().max(0.0) as usize;
            let x1 = ((c.x + step_x).ceil() as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let idx = y * w + x;
                    let d = distance(feats.pixel(idx), c, y, x, spatial_weight);
                    if d < dist[idx] {
                        dist[idx] = d;
                        labels[idx] = k as u32;
                    }
                }
            }
        }
        // Pixels outside every window fall back to a global nearest search.
        for idx in 0..h * w {
            if labels[idx] == u32::MAX {
                let (y, x) = (idx / w, idx % w);
                let best = centers
                    .iter()
                    .enumerate()
                    .map(|(k, c)| (k, distance(feats.pixel(idx), c, y, x, spatial_weight)))
                    .fold((0, f32::INFINITY), |b, (k, d)| if d < b.1 { (k, d) } else { b });
                labels[idx] = best.0 as u32;
            }
        }
        if iter == params.iterations {
            break;
        }
        update_centers(&feats, &labels, &mut centers);
    }

    let min_size = (h * w) as f64 / (4.0 * n as f64);
    enforce_connectivity(&mut labels, h, w, min_size);
    SuperpixelLabelMap::from_labels(h, w, labels, source)
}

#[inline]
fn distance(feat: &[f32], c: &Center, y: usize, x: usize, spatial_weight: f32) -> f32 {
    let dc: f32 = feat.iter().zip(&c.feat).map(|(a, b)| (a - b) * (a - b)).sum();
    let dy = y as f32 - c.y;
    let dx = x as f32 - c.x;
    dc + (dy * dy + dx * dx) * spatial_weight
}

fn update_centers(feats: &Features, labels: &[u32], centers: &mut [Center]) {
    let dims = feats.dims;
    let k = centers.len();
    let mut sums = vec![0.0f64; k * (dims + 2)];
    let mut counts = vec![0usize; k];
    for (idx, &l) in labels.iter().enumerate() {
        let l = l as usize;
        let s = &mut sums[l * (dims + 2)..(l + 1) * (dims + 2)];
        s[0] += (idx / feats.w) as f64;
        s[1] += (idx % feats.w) as f64;
        for (acc, &f) in s[2..].iter_mut().zip(feats.pixel(idx)) {
            *acc += f as f64;
        }
        counts[l] += 1;
    }
    for (i, c) in centers.iter_mut().enumerate() {
        if counts[i] == 0 {
            continue;
        }
        let n = counts[i] as f64;
        let s = &sums[i * (dims + 2)..(i + 1) * (dims + 2)];
        c.y = (s[0] / n) as f32;
        c.x = (s[1] / n) as f32;
        for (f, &acc) in c.feat.iter_mut().zip(&s[2..]) {
            *f = (acc / n) as f32;
        }
    }
}

/// 4-connected components: per-pixel component id plus `(label, size)` of
/// each component in scan order.
fn components(labels: &[u32], h: usize, w: usize) -> (Vec<usize>, Vec<(u32, usize)>) {
    let mut comp = vec![usize::MAX; h * w];
    let mut info = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = info.len();
        let label = labels[start];
        let mut size = 0;
        comp[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labels[q] == label {
                    comp[q] = id;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        info.push((label, size));
    }
    (comp, info)
}

/// Keeps the largest component of every label and merges every other
/// component, and any component smaller than `min_size`, into the adjacent
/// label sharing the longest border (ties to the lower label).
fn enforce_connectivity(labels: &mut [u32], h: usize, w: usize, min_size: f64) {
    for _ in 0..64 {
        let (comp, info) = components(labels, h, w);
        let mut primary: std::collections::HashMap<u32, usize> = Default::default();
        for (id, &(label, size)) in info.iter().enumerate() {
            let best = primary.entry(label).or_insert(id);
            if size > info[*best].1 {
                *best = id;
            }
        }
        let doomed: Vec<usize> = (0..info.len())
            .filter(|&id| primary[&info[id].0] != id || (info[id].1 as f64) < min_size)
            .collect();
        let mut changed = false;
        for id in doomed {
            // border length to each neighbouring label
            let mut border: std::collections::BTreeMap<u32, usize> = Default::default();
            let members: Vec<usize> = (0..h * w).filter(|&p| comp[p] == id).collect();
            let own = labels[members[0]];
            for &p in &members {
                let (y, x) = (p / w, p % w);
                let mut neighbours = Vec::with_capacity(4);
                if y > 0 {
                    neighbours.push(p - w);
                }
                if y + 1 < h {
                    neighbours.push(p + w);
                }
                if x > 0 {
                    neighbours.push(p - 1);
                }
                if x + 1 < w {
                    neighbours.push(p + 1);
                }
                for q in neighbours {
                    if labels[q] != own {
                        *border.entry(labels[q]).or_default() += 1;
                    }
                }
            }
            let target = border
                .iter()
                .fold(None, |best: Option<(u32, usize)>, (&l, &n)| match best {
                    Some((_, bn)) if bn >= n => best,
                    _ => Some((l, n)),
                });
            if let Some((target, _)) = target {
                for p in members {
                    labels[p] = target;
                }
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}
