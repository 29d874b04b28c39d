//! Convolutional encoder and the feature fusion module (FFM).
//!
//! The encoder is a compact stack of stride-2 conv blocks. Its three deepest
//! outputs, at 1/8, 1/16 and 1/32 of the input, are reduced to 128 channels
//! (the `ecr` pyramid), merged at 1/8 and passed through an ASPP head to give
//! the fusion feature `f`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, Graph};
use crate::params::ParamStore;
use crate::tensor::{ConvGeom, PadMode, Real, Var};

/// Width of the fusion feature and of every `ecr` level.
pub const FUSION_CHANNELS: usize = 128;

const ASPP_DILATIONS: [usize; 3] = [1, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderFeatures {
    pub e1: Var,
    pub e2: Var,
    pub e3: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionOutputs {
    pub f: Var,
    pub ecr_8: Var,
    pub ecr_16: Var,
    pub ecr_32: Var,
}

impl FusionOutputs {
    pub fn ecr(&self) -> [Var; 3] {
        [self.ecr_8, self.ecr_16, self.ecr_32]
    }
}

fn stride2() -> ConvGeom {
    ConvGeom {
        stride: 2,
        padding: 1,
        ..ConvGeom::default()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    in_ch: usize,
    blocks: Vec<ConvBnRelu>,
}

impl Encoder {
    /// Five stride-2 blocks: two stem blocks then the three output stages.
    /// `in_ch` is 3 for RGB; 1-channel depth is replicated to 3 channels.
    pub fn new(name: &str, in_ch: usize, stem: [usize; 2], widths: [usize; 3]) -> Self {
        let chans = [3, stem[0], stem[1], widths[0], widths[1], widths[2]];
        let blocks = (0..5)
            .map(|i| ConvBnRelu::new(&format!("{name}.block{i}"), chans[i], chans[i + 1], 3, stride2()))
            .collect();
        Self { in_ch, blocks }
    }

    pub fn widths(&self) -> [usize; 3] {
        [
            self.blocks[2].conv.out_ch,
            self.blocks[3].conv.out_ch,
            self.blocks[4].conv.out_ch,
        ]
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.blocks.iter().try_for_each(|b| b.declare(store, rng))
    }

    /// `x` is `[N, in_ch, H, W]` with `H` and `W` divisible by 32.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<EncoderFeatures> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_ch {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("expected [N,{},H,W], got {s:?}", self.in_ch),
            });
        }
        if s[2] % 32 != 0 || s[3] % 32 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::NotDivisible {
                height: s[2],
                width: s[3],
            });
        }
        let mut h = if self.in_ch == 1 {
            g.tape.concat(&[x, x, x], 1)?
        } else {
            x
        };
        let mut outs = Vec::with_capacity(3);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, h)?;
            if i >= 2 {
                outs.push(h);
            }
        }
        Ok(EncoderFeatures {
            e1: outs[0],
            e2: outs[1],
            e3: outs[2],
        })
    }
}

#[derive(Clone, Debug)]
pub struct Ffm {
    lateral: [Conv2d; 3],
    branches: Vec<ConvBnRelu>,
    global: Conv2d,
    merge: Conv2d,
}

impl Ffm {
    pub fn new(name: &str, widths: [usize; 3], aspp_width: usize) -> Self {
        let c = FUSION_CHANNELS;
        let lateral = [0, 1, 2].map(|i| Conv2d::new(format!("{name}.lateral{i}"), widths[i], c, 1));
        let branches = ASPP_DILATIONS
            .iter()
            .map(|&d| {
                let geom = ConvGeom {
                    dilation: d,
                    padding: d,
                    pad_mode: PadMode::Replicate,
                    ..ConvGeom::default()
                };
                ConvBnRelu::new(&format!("{name}.aspp_d{d}"), c, aspp_width, 3, geom)
            })
            .collect();
        Self {
            lateral,
            branches,
            global: Conv2d::new(format!("{name}.aspp_global"), c, aspp_width, 1),
            merge: Conv2d::new(format!("{name}.aspp_merge"), 4 * aspp_width, c, 1),
        }
    }

    pub fn declare(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for conv in &self.lateral {
            conv.declare(store, rng)?;
        }
        for b in &self.branches {
            b.declare(store, rng)?;
        }
        self.global.declare(store, rng)?;
        self.merge.declare(store, rng)
    }

    pub fn fuse<T: Real>(&self, g: &mut Graph<T>, ef: &EncoderFeatures) -> Result<FusionOutputs> {
        let ecr_8 = self.lateral[0].forward(g, ef.e1)?;
        let ecr_16 = self.lateral[1].forward(g, ef.e2)?;
        let ecr_32 = self.lateral[2].forward(g, ef.e3)?;
        let s = g.tape.shape(ecr_8).to_vec();
        let (h, w) = (s[2], s[3]);
        let up16 = g.tape.upsample_bilinear(ecr_16, h, w)?;
        let up32 = g.tape.upsample_bilinear(ecr_32, h, w)?;
        let sum = g.tape.add(ecr_8, up16)?;
        let sum = g.tape.add(sum, up32)?;

        let mut parts = Vec::with_capacity(4);
        for b in &self.branches {
            parts.push(b.forward(g, sum)?);
        }
        let pooled = g.tape.adaptive_avg_pool(sum, 1, 1)?;
        let pooled = self.global.forward(g, pooled)?;
        let pooled = g.tape.relu(pooled);
        parts.push(g.tape.upsample_bilinear(pooled, h, w)?);
        let cat = g.tape.concat(&parts, 1)?;
        let f = self.merge.forward(g, cat)?;
        Ok(FusionOutputs {
            f,
            ecr_8,
            ecr_16,
            ecr_32,
        })
    }
}
