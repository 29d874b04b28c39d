use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Lambdas;
use crate::optim::Adam;
use crate::psnm::ATTENTION_DIM;
use crate::rsm::MIN_FEATURE_SIDE;
use crate::superpixel::SlicParams;

/// Which streams contribute an auxiliary superpixel loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnmStreams {
    Both,
    RgbOnly,
}

/// Every knob of the model, the optimiser and the data pipeline.
///
/// Missing keys take their default; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub image_size: usize,
    pub n_superpixels: usize,
    pub a_k: usize,
    /// `(mask, psnm, rsm)` loss weights.
    pub lambdas: [f64; 3],
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub stem_widths: [usize; 2],
    pub encoder_widths: [usize; 3],
    pub aspp_width: usize,
    pub n_heads: usize,
    pub dynamic_graph: bool,
    pub psnm_streams: PsnmStreams,
    pub slic_compactness: f32,
    pub slic_iterations: usize,
    /// `beta^2` of the F-measure.
    pub beta_sq: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            image_size: 352,
            n_superpixels: 100,
            a_k: 10,
            lambdas: [1.0, 1.0, 10.0],
            lr_max: 8e-5,
            lr_min: 8e-6,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            epochs: 200,
            batch_size: 16,
            seed: 0,
            stem_widths: [16, 32],
            encoder_widths: [64, 128, 256],
            aspp_width: 64,
            n_heads: 1,
            dynamic_graph: true,
            psnm_streams: PsnmStreams::Both,
            slic_compactness: 10.0,
            slic_iterations: 10,
            beta_sq: 0.3,
        }
    }
}

impl Config {
    /// Small-image profile that trains on a laptop CPU in minutes.
    pub fn desk() -> Self {
        Self {
            image_size: 96,
            n_superpixels: 25,
            a_k: 5,
            epochs: 30,
            batch_size: 4,
            lr_max: 2e-3,
            lr_min: 2e-4,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            "desk64" => Ok(Self {
                image_size: 64,
                ..Self::desk()
            }),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (expected default, desk or desk64)"
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Compact JSON with fields in declaration order.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return fail(format!("image_size {} must be a positive multiple of 32", self.image_size));
        }
        if self.feature_side() < MIN_FEATURE_SIDE {
            return fail(format!(
                "image_size {} is below the minimum of {}",
                self.image_size,
                MIN_FEATURE_SIDE * 8
            ));
        }
        if self.n_superpixels < 2 {
            return fail(format!("n_superpixels {} must be >= 2", self.n_superpixels));
        }
        if self.n_superpixels > self.image_size * self.image_size {
            return fail(format!("n_superpixels {} exceeds the pixel count", self.n_superpixels));
        }
        if self.a_k == 0 || self.a_k >= self.n_superpixels {
            return fail(format!(
                "a_k {} must be in 1..{}",
                self.a_k, self.n_superpixels
            ));
        }
        if self.n_heads == 0 || ATTENTION_DIM % self.n_heads != 0 {
            return fail(format!("n_heads {} must divide {ATTENTION_DIM}", self.n_heads));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be >= 1".into());
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return fail(format!("need 0 <= lr_min <= lr_max and lr_max > 0, got {} / {}", self.lr_min, self.lr_max));
        }
        let betas_ok = self.adam_betas.iter().all(|b| (0.0..1.0).contains(b));
        if !betas_ok || self.adam_eps <= 0.0 {
            return fail("adam betas must lie in [0,1) and eps must be > 0".into());
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return fail("lambdas must be finite and non-negative".into());
        }
        if [self.stem_widths.as_slice(), self.encoder_widths.as_slice(), &[self.aspp_width]]
            .concat()
            .contains(&0)
        {
            return fail("layer widths must be >= 1".into());
        }
        if self.slic_compactness.is_nan() || self.slic_compactness <= 0.0 || self.slic_iterations == 0 {
            return fail("slic_compactness must be > 0 and slic_iterations >= 1".into());
        }
        if self.beta_sq <= 0.0 {
            return fail("beta_sq must be > 0".into());
        }
        Ok(())
    }

    /// Side of the 1/8-scale feature maps.
    pub fn feature_side(&self) -> usize {
        self.image_size / 8
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            mask: self.lambdas[0],
            psnm: self.lambdas[1],
            rsm: self.lambdas[2],
        }
    }

    pub fn adam(&self) -> Adam {
        Adam {
            beta1: self.adam_betas[0],
            beta2: self.adam_betas[1],
            eps: self.adam_eps,
        }
    }

    pub fn slic(&self) -> SlicParams {
        SlicParams {
            n_superpixels: self.n_superpixels,
            compactness: self.slic_compactness,
            iterations: self.slic_iterations,
        }
    }

    /// Two checkpoints are interchangeable when every architecture field
    /// matches. Returns the first differing field.
    pub fn architecture_mismatch(&self, other: &Self) -> Option<&'static str> {
        let checks: [(&'static str, bool); 7] = [
            ("n_superpixels", self.n_superpixels == other.n_superpixels),
            ("a_k", self.a_k == other.a_k),
            ("stem_widths", self.stem_widths == other.stem_widths),
            ("encoder_widths", self.encoder_widths == other.encoder_widths),
            ("aspp_width", self.aspp_width == other.aspp_width),
            ("n_heads", self.n_heads == other.n_heads),
            ("dynamic_graph", self.dynamic_graph == other.dynamic_graph),
        ];
        checks.iter().find(|(_, ok)| !ok).map(|(name, _)| *name)
    }
}
