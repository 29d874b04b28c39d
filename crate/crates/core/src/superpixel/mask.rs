use super::slic::SuperpixelLabelMap;
use crate::error::{Error, Result};
use crate::tensor::kernels::adaptive_bin;
use crate::tensor::Tensor;

/// Superpixel mask group for one image.
///
/// The binary stack is stored implicitly as the label map; `soft` holds the
/// fractional coverage of each superpixel at feature resolution once
/// [`downsample_mask_group`] has been applied.
#[derive(Clone, Debug)]
pub struct MaskGroup {
    labels: SuperpixelLabelMap,
    n_slots: usize,
    soft: Option<Tensor<f32>>,
}

impl MaskGroup {
    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    pub fn n_actual(&self) -> usize {
        self.labels.n_actual()
    }

    pub fn labels(&self) -> &SuperpixelLabelMap {
        &self.labels
    }

    /// `valid[i]` is true for channels backed by a real superpixel.
    pub fn valid(&self) -> Vec<bool> {
        (0..self.n_slots).map(|i| i < self.n_actual()).collect()
    }

    /// Dense `[n_slots, H, W]` binary stack.
    pub fn binary(&self) -> Tensor<f32> {
        let (h, w) = (self.labels.height, self.labels.width);
        let mut out = Tensor::zeros(&[self.n_slots, h, w]);
        let data = out.data_mut();
        for (p, &l) in self.labels.labels().iter().enumerate() {
            data[l as usize * h * w + p] = 1.0;
        }
        out
    }

    /// `[n_slots, h, w]` fractional coverage, if downsampled.
    pub fn soft(&self) -> Option<&Tensor<f32>> {
        self.soft.as_ref()
    }
}

pub fn build_mask_group(labels: &SuperpixelLabelMap, n_slots: usize) -> Result<MaskGroup> {
    if n_slots < labels.n_actual() {
        return Err(Error::TooFewPrototypes {
            required: labels.n_actual(),
            available: n_slots,
        });
    }
    Ok(MaskGroup {
        labels: labels.clone(),
        n_slots,
        soft: None,
    })
}

/// Average-pools every binary channel to `target_h x target_w` using the
/// same bins as adaptive average pooling.
pub fn downsample_mask_group(mg: &MaskGroup, target_h: usize, target_w: usize) -> Result<MaskGroup> {
    let (h, w) = (mg.labels.height, mg.labels.width);
    if target_h == 0 || target_w == 0 || target_h > h || target_w > w {
        return Err(Error::Param(format!(
            "cannot downsample a {h}x{w} mask group to {target_h}x{target_w}"
        )));
    }
    let labels = mg.labels.labels();
    let plane = target_h * target_w;
    let mut soft = Tensor::zeros(&[mg.n_slots, target_h, target_w]);
    let data = soft.data_mut();
    for oy in 0..target_h {
        let (y0, y1) = adaptive_bin(oy, h, target_h);
        for ox in 0..target_w {
            let (x0, x1) = adaptive_bin(ox, w, target_w);
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f32;
            for y in y0..y1 {
                for x in x0..x1 {
                    let l = labels[y * w + x] as usize;
                    data[l * plane + oy * target_w + ox] += inv;
                }
            }
        }
    }
    Ok(MaskGroup {
        labels: mg.labels.clone(),
        n_slots: mg.n_slots,
        soft: Some(soft),
    })
}
