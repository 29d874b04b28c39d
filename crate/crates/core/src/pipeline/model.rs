use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Config, PsnmStreams};
use crate::decoder::Decoder;
use crate::encoder::{Encoder, Ffm, FusionOutputs};
use crate::error::{shape_err, Error, Result};
use crate::losses::{self, LossReport};
use crate::nn::Graph;
use crate::params::ParamStore;
use crate::pgm::{build_prototype_block, Modality, PrototypeBlock};
use crate::psnm::{self, Psnm};
use crate::rsm::{self, RelianceTarget, Rsm};
use crate::superpixel::{
    build_mask_group, downsample_mask_group, slic_segment, MaskGroup, Source,
};
use crate::tensor::{Real, Tensor, Var};

/// One aligned RGB-D pair, optionally with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `[1, H, W]` in `[0, 1]`, larger is nearer.
    pub depth: Tensor<f32>,
    /// `H * W` binary mask.
    pub gt: Option<Vec<f32>>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.rgb.dim(1), self.rgb.dim(2))
    }
}

/// A sample with its superpixel mask groups computed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample: Sample,
    pub sp_rgb: MaskGroup,
    pub sp_depth: MaskGroup,
}

/// Runs SLIC on both modalities and downsamples the masks to the 1/8 scale.
pub fn prepare(sample: Sample, cfg: &Config) -> Result<Prepared> {
    let (h, w) = sample.size();
    if h != cfg.image_size || w != cfg.image_size || sample.depth.shape() != [1, h, w] {
        return Err(shape_err(
            "prepare",
            format!(
                "sample `{}` is rgb {:?} / depth {:?}, config wants {}x{}",
                sample.name,
                sample.rgb.shape(),
                sample.depth.shape(),
                cfg.image_size,
                cfg.image_size
            ),
        ));
    }
    let side = cfg.feature_side();
    let group = |img: &Tensor<f32>, src| -> Result<MaskGroup> {
        let labels = slic_segment(img, src, &cfg.slic())?;
        let mg = build_mask_group(&labels, cfg.n_superpixels)?;
        downsample_mask_group(&mg, side, side)
    };
    let sp_rgb = group(&sample.rgb, Source::Rgb)?;
    let sp_depth = group(&sample.depth, Source::Depth)?;
    Ok(Prepared {
        sample,
        sp_rgb,
        sp_depth,
    })
}

#[derive(Clone, Debug)]
struct Stream {
    encoder: Encoder,
    ffm: Ffm,
    psnm: Psnm,
    modality: Modality,
}

/// Intermediate values of one modality stream.
#[derive(Clone, Debug)]
pub struct StreamOutputs {
    pub fusion: FusionOutputs,
    pub prototypes: PrototypeBlock,
    pub attended: PrototypeBlock,
    /// `[B * N_S]` sampler scores.
    pub scores: Var,
    pub sampled: PrototypeBlock,
    pub correlation: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct Outputs {
    pub rgb: StreamOutputs,
    pub depth: StreamOutputs,
    /// `[B, 2N_S, h, w]`, RGB channels first.
    pub f_rsm: Var,
    /// `[B, 2]` `(rely_r, rely_d)`.
    pub rely: Var,
    pub weighted: Var,
    /// `[B, H, W]` saliency.
    pub pred: Var,
}

/// The full two-stream network.
#[derive(Clone, Debug)]
pub struct Spsn {
    cfg: Config,
    rgb: Stream,
    depth: Stream,
    rsm: Rsm,
    decoder: Decoder,
}

impl Spsn {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let stream = |name: &str, in_ch, modality| Stream {
            encoder: Encoder::new(&format!("{name}.encoder"), in_ch, cfg.stem_widths, cfg.encoder_widths),
            ffm: Ffm::new(&format!("{name}.ffm"), cfg.encoder_widths, cfg.aspp_width),
            psnm: Psnm::new(&format!("{name}.psnm"), cfg.a_k, cfg.n_heads, cfg.dynamic_graph),
            modality,
        };
        Ok(Self {
            cfg: cfg.clone(),
            rgb: stream("rgb", 3, Modality::Rgb),
            depth: stream("depth", 1, Modality::Depth),
            rsm: Rsm::new("rsm", cfg.n_superpixels, cfg.feature_side())?,
            decoder: Decoder::new("decoder", 2 * cfg.n_superpixels),
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn rsm(&self) -> &Rsm {
        &self.rsm
    }

    /// Freshly initialised parameters, deterministic in `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for s in [&self.rgb, &self.depth] {
            s.encoder.declare(&mut store, &mut rng)?;
            s.ffm.declare(&mut store, &mut rng)?;
            s.psnm.declare(&mut store, &mut rng)?;
        }
        self.rsm.declare(&mut store, &mut rng)?;
        self.decoder.declare(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Checks that `store` holds exactly the parameters this model declares.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        let reference = self.init(0)?;
        if reference.len() != store.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameters, found {}",
                reference.len(),
                store.len()
            )));
        }
        for (name, p) in reference.iter() {
            match store.get(name) {
                None => return Err(Error::Incompatible(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != p.value.shape() => {
                    return Err(Error::Incompatible(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        p.value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn run_stream<T: Real>(
        &self,
        g: &mut Graph<T>,
        stream: &Stream,
        input: Var,
        groups: &[&MaskGroup],
    ) -> Result<StreamOutputs> {
        let feats = stream.encoder.encode(g, input)?;
        let fusion = stream.ffm.fuse(g, &feats)?;
        let prototypes = build_prototype_block(&mut g.tape, fusion.f, groups, stream.modality)?;
        let attended = stream.psnm.attention(g, &prototypes)?;
        let scores = stream.psnm.sample_scores(g, &attended)?;
        let sampled = psnm::apply_sampler(&mut g.tape, &attended, scores)?;
        let correlation = psnm::correlation_maps(&mut g.tape, &sampled, fusion.ecr())?;
        Ok(StreamOutputs {
            fusion,
            prototypes,
            attended,
            scores,
            sampled,
            correlation,
        })
    }

    /// Forward pass over a batch of prepared samples. Never reads the
    /// ground truth.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, batch: &[&Prepared]) -> Result<Outputs> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = self.cfg.image_size;
        let stack = |sel: &dyn Fn(&Sample) -> &Tensor<f32>, ch: usize| -> Result<Tensor<T>> {
            let data: Vec<T> = batch
                .iter()
                .flat_map(|p| sel(&p.sample).data().iter().map(|&v| T::from_f32(v)))
                .collect();
            Tensor::new(&[batch.len(), ch, n, n], data)
        };
        let rgb_in = stack(&|s| &s.rgb, 3)?;
        let depth_in = stack(&|s| &s.depth, 1)?;
        let rgb_in = g.constant(rgb_in);
        let depth_in = g.constant(depth_in);
        let rgb_groups: Vec<&MaskGroup> = batch.iter().map(|p| &p.sp_rgb).collect();
        let depth_groups: Vec<&MaskGroup> = batch.iter().map(|p| &p.sp_depth).collect();

        let rgb = self.run_stream(g, &self.rgb, rgb_in, &rgb_groups)?;
        let depth = self.run_stream(g, &self.depth, depth_in, &depth_groups)?;
        let f_rsm = self.rsm.fuse_rgbd(g, &rgb.correlation, &depth.correlation)?;
        let rely = self.rsm.rely_weights(g, f_rsm)?;
        let weighted = rsm::apply_reliance(g, f_rsm, rely)?;
        let pred = self.decoder.decode(g, weighted, n, n)?;
        Ok(Outputs {
            rgb,
            depth,
            f_rsm,
            rely,
            weighted,
            pred,
        })
    }

    /// Builds the training objective on top of `out`. Every sample in
    /// `batch` must carry a ground-truth mask.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        out: &Outputs,
        batch: &[&Prepared],
    ) -> Result<(Var, LossReport)> {
        let mut gt: Vec<T> = Vec::new();
        for p in batch {
            let mask = p.sample.gt.as_ref().ok_or_else(|| {
                Error::Param(format!("sample `{}` has no ground truth", p.sample.name))
            })?;
            if let Some(&bad) = mask.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::NonBinaryMask(bad));
            }
            gt.extend(mask.iter().map(|&v| T::from_f32(v)));
        }
        let l_mask = losses::batch_iou_loss(&mut g.tape, out.pred, &gt)?;

        let n_slots = self.cfg.n_superpixels;
        let aux = |g: &mut Graph<T>, scores: Var, pick: fn(&Prepared) -> &MaskGroup| -> Result<Var> {
            let labels: Vec<_> = batch.iter().map(|p| pick(p).labels()).collect();
            let am_pred = psnm::am_pred(&mut g.tape, scores, &labels, n_slots)?;
            let mut am_gt = Vec::with_capacity(gt.len());
            for (p, lm) in batch.iter().zip(&labels) {
                let mask = p.sample.gt.as_deref().unwrap_or_default();
                am_gt.extend(psnm::am_gt(lm, mask)?.into_iter().map(T::from_f32));
            }
            losses::psnm_loss(&mut g.tape, am_pred, &am_gt)
        };
        let l_rgb = aux(g, out.rgb.scores, |p| &p.sp_rgb)?;
        let l_depth = aux(g, out.depth.scores, |p| &p.sp_depth)?;

        let targets = self.rsm_targets(g, out)?;
        let l_rsm = losses::rsm_loss(&mut g.tape, out.rely, &targets)?;

        let psnm_terms: Vec<Var> = match self.cfg.psnm_streams {
            PsnmStreams::Both => vec![l_rgb, l_depth],
            PsnmStreams::RgbOnly => vec![l_rgb],
        };
        let total = losses::total_loss(&mut g.tape, l_mask, &psnm_terms, l_rsm, self.cfg.lambdas())?;
        let v = |x: Var| g.tape.value(x).item().as_f64();
        let report = LossReport {
            l_mask: v(l_mask),
            l_psnm_rgb: v(l_rgb),
            l_psnm_depth: v(l_depth),
            l_rsm: v(l_rsm),
            total: v(total),
        };
        Ok((total, report))
    }

    /// Reliance targets of every sample, from the detached `F_RSM`.
    pub fn rsm_targets<T: Real>(&self, g: &Graph<T>, out: &Outputs) -> Result<Vec<RelianceTarget>> {
        let f = g.tape.value(out.f_rsm);
        let s = f.shape();
        let per = s[1] * s[2] * s[3];
        f.data()
            .chunks(per)
            .map(|chunk| {
                let t = Tensor::new(&s[1..], chunk.to_vec())?;
                rsm::rsm_ground_truth(&t)
            })
            .collect()
    }
}
