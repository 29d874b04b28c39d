//! Training loop and batched inference.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{evaluate, MetricsReport};
use super::model::{Prepared, Spsn};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::nn::{apply_bn_updates, Graph, Mode};
use crate::optim::cosine_lr;
use crate::params::ParamStore;
use crate::psnm;
use crate::rsm;

pub const LOSS_CSV_HEADER: &str = "step,epoch,lr,l_mask,l_psnm_rgb,l_psnm_depth,l_rsm,total";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, l.l_mask, l.l_psnm_rgb, l.l_psnm_depth, l.l_rsm, l.total
        )
    }
}

/// Learning rate of `epoch`: `lr_max` at the first epoch, `lr_min` at the
/// last.
pub fn epoch_lr(model: &Spsn, epoch: usize) -> f64 {
    let cfg = model.config();
    cosine_lr(cfg.lr_max, cfg.lr_min, epoch, cfg.epochs.saturating_sub(1))
}

/// Sample order of every epoch, fixed by the config seed.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One optimisation step on `batch`.
pub fn train_step(
    model: &Spsn,
    store: &mut ParamStore,
    batch: &[&Prepared],
    step: usize,
    lr: f64,
) -> Result<LossReport> {
    let (grads, updates, report) = {
        let mut g: Graph<f32> = Graph::new(store, Mode::Train);
        let out = model.forward(&mut g, batch)?;
        let (loss, report) = model.loss(&mut g, &out, batch)?;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{report:?}"),
            });
        }
        g.tape.backward(loss)?;
        let grads = g.gradients();
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("gradient of `{name}` is not finite"),
            });
        }
        (grads, g.take_bn_updates(), report)
    };
    model.config().adam().step(store, &grads, lr)?;
    apply_bn_updates(store, &updates)?;
    Ok(report)
}

/// Runs the configured number of epochs, writing one CSV row per step to
/// `log` if given.
pub fn train(
    model: &Spsn,
    store: &mut ParamStore,
    data: &[Prepared],
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepLog>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = model.config();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOSS_CSV_HEADER}")?;
    }
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = epoch_lr(model, epoch);
        let order = epoch_order(cfg.seed, epoch, data.len());
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let loss = train_step(model, store, &batch, step, lr)?;
            let entry = StepLog { step, epoch, lr, loss };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", entry.csv_row())?;
            }
            log::debug!("step {step} epoch {epoch} lr {lr:.3e} {loss:?}");
            history.push(entry);
            step += 1;
        }
        if let Some(last) = history.last() {
            log::info!(
                "epoch {}/{} l_mask {:.4} total {:.4}",
                epoch + 1,
                cfg.epochs,
                last.loss.l_mask,
                last.loss.total
            );
        }
    }
    Ok(history)
}

/// Everything inference produces for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub name: String,
    /// `H * W` saliency in `(0, 1)`.
    pub pred: Vec<f32>,
    pub rely_r: f32,
    pub rely_d: f32,
    pub scores_rgb: Vec<f32>,
    pub scores_depth: Vec<f32>,
    pub am_pred_rgb: Vec<f32>,
    pub am_pred_depth: Vec<f32>,
    /// Pseudo GT at the 1/8 scale.
    pub pseudo_gt: Vec<f32>,
}

/// Eval-mode forward over `data` in batches of the configured size.
pub fn predict(model: &Spsn, store: &ParamStore, data: &[Prepared]) -> Result<Vec<Prediction>> {
    let cfg = model.config();
    let n_slots = cfg.n_superpixels;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(cfg.batch_size) {
        let batch: Vec<&Prepared> = chunk.iter().collect();
        let mut g: Graph<f32> = Graph::new(store, Mode::Eval);
        let fwd = model.forward(&mut g, &batch)?;
        let pred = g.tape.value(fwd.pred).data().to_vec();
        let rely = g.tape.value(fwd.rely).data().to_vec();
        let s_rgb = g.tape.value(fwd.rgb.scores).data().to_vec();
        let s_depth = g.tape.value(fwd.depth.scores).data().to_vec();
        let f = g.tape.value(fwd.f_rsm).clone();
        let per = f.numel() / batch.len();
        let plane = pred.len() / batch.len();
        for (b, p) in batch.iter().enumerate() {
            let scores_rgb = s_rgb[b * n_slots..(b + 1) * n_slots].to_vec();
            let scores_depth = s_depth[b * n_slots..(b + 1) * n_slots].to_vec();
            let expand = |scores: &[f32], labels: &[u32]| -> Vec<f32> {
                labels.iter().map(|&l| scores[l as usize]).collect()
            };
            let fb = crate::Tensor::new(&f.shape()[1..], f.data()[b * per..(b + 1) * per].to_vec())?;
            out.push(Prediction {
                name: p.sample.name.clone(),
                pred: pred[b * plane..(b + 1) * plane].to_vec(),
                rely_r: rely[2 * b],
                rely_d: rely[2 * b + 1],
                am_pred_rgb: expand(&scores_rgb, p.sp_rgb.labels().labels()),
                am_pred_depth: expand(&scores_depth, p.sp_depth.labels().labels()),
                scores_rgb,
                scores_depth,
                pseudo_gt: rsm::pseudo_gt(&fb)?.into_iter().map(|v| v as f32).collect(),
            });
        }
    }
    Ok(out)
}

/// Auxiliary ground-truth maps `(rgb, depth)` of a sample with a mask.
pub fn am_gt_maps(p: &Prepared) -> Result<Option<(Vec<f32>, Vec<f32>)>> {
    match &p.sample.gt {
        None => Ok(None),
        Some(gt) => Ok(Some((
            psnm::am_gt(p.sp_rgb.labels(), gt)?,
            psnm::am_gt(p.sp_depth.labels(), gt)?,
        ))),
    }
}

/// Metrics of `model` on samples that carry ground truth.
pub fn evaluate_model(model: &Spsn, store: &ParamStore, data: &[Prepared]) -> Result<(MetricsReport, Vec<Prediction>)> {
    let preds = predict(model, store, data)?;
    let gts: Vec<Vec<f32>> = data
        .iter()
        .map(|p| {
            p.sample
                .gt
                .clone()
                .ok_or_else(|| Error::Param(format!("sample `{}` has no ground truth", p.sample.name)))
        })
        .collect::<Result<_>>()?;
    let maps: Vec<Vec<f32>> = preds.iter().map(|p| p.pred.clone()).collect();
    Ok((evaluate(&maps, &gts, model.config().beta_sq)?, preds))
}
