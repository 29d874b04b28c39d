//! Saliency decoder: a short conv stack on the reliance-weighted features,
//! upsampled to input resolution.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, ConvBnRelu, Graph};
use crate::params::ParamStore;
use crate::tensor::{ConvGeom, Real, Var};

const WIDTHS: [usize; 3] = [128, 64, 32];

#[derive(Clone, Debug)]
pub struct Decoder {
    blocks: Vec<ConvBnRelu>,
    out: Conv2d,
}

impl Decoder {
    pub fn new(name: &str, in_ch: usize) -> Self {
        let geom = ConvGeom {
            padding: 1,
            ..ConvGeom::default()
        };
        let chans = [in_ch, WIDTHS[0], WIDTHS[1], WIDTHS[2]];
        Self {
            blocks: (0..3)
                .map(|i| ConvBnRelu::new(&format!("{name}.block{i}"), chans[i], chans[i + 1], 3, geom))
                .collect(),
            out: Conv2d::new(format!("{name}.out"), WIDTHS[2], 1, 1),
        }
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for b in &self.blocks {
            b.declare(store, rng)?;
        }
        self.out.declare(store, rng)
    }

    /// `[B, C, h, w]` to a `[B, H, W]` saliency map in `(0, 1)`.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, x: Var, height: usize, width: usize) -> Result<Var> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("decode", format!("expected [B,C,h,w], got {s:?}")));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        let logits = self.out.forward(g, h)?;
        let logits = g.tape.upsample_bilinear(logits, height, width)?;
        let logits = g.tape.reshape(logits, &[s[0], height, width])?;
        Ok(g.tape.sigmoid(logits))
    }
}
