//! Superpixel-count sweep.

use std::path::Path;

use super::config::Config;
use super::model::{prepare, Prepared, Sample, Spsn};
use super::plot::{line_plot, Series};
use super::train::{evaluate_model, train};
use crate::error::{Error, Result};

pub const ABLATION_CSV_HEADER: &str = "n_superpixels,a_k,mae,f_beta,final_l_mask";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub n_superpixels: usize,
    pub a_k: usize,
    pub mae: f64,
    pub f_beta: f64,
    pub final_l_mask: f64,
}

/// `base` with `n` superpixels and `a_k` clamped below `n`.
pub fn config_for(base: &Config, n: usize) -> Result<Config> {
    let cfg = Config {
        n_superpixels: n,
        a_k: base.a_k.min(n.saturating_sub(1)),
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_all(samples: &[Sample], cfg: &Config) -> Result<Vec<Prepared>> {
    samples.iter().map(|s| prepare(s.clone(), cfg)).collect()
}

/// Trains one model per entry of `ns` from the same seed and evaluates it
/// on `eval`.
pub fn ablation_sweep(base: &Config, ns: &[usize], train_set: &[Sample], eval: &[Sample]) -> Result<Vec<AblationRow>> {
    if ns.is_empty() {
        return Err(Error::Config("empty superpixel sweep".into()));
    }
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let cfg = config_for(base, n)?;
        log::info!("sweep: n_superpixels = {n}, a_k = {}", cfg.a_k);
        let model = Spsn::new(&cfg)?;
        let mut store = model.init(cfg.seed)?;
        let history = train(&model, &mut store, &prepare_all(train_set, &cfg)?, None)?;
        let (metrics, _) = evaluate_model(&model, &store, &prepare_all(eval, &cfg)?)?;
        rows.push(AblationRow {
            n_superpixels: n,
            a_k: cfg.a_k,
            mae: metrics.mae,
            f_beta: metrics.f_beta,
            final_l_mask: history.last().map_or(f64::NAN, |h| h.loss.l_mask),
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.n_superpixels, r.a_k, r.mae, r.f_beta, r.final_l_mask
        ));
    }
    s
}

/// MAE (red) and F-measure (blue) against `log(N_S)`.
pub fn plot_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let x = |r: &AblationRow| (r.n_superpixels as f64).ln();
    let mae: Vec<(f64, f64)> = rows.iter().map(|r| (x(r), r.mae)).collect();
    let fb: Vec<(f64, f64)> = rows.iter().map(|r| (x(r), r.f_beta)).collect();
    line_plot(
        path,
        &[
            Series { points: &mae, color: [200, 40, 40] },
            Series { points: &fb, color: [40, 80, 200] },
        ],
        480,
        320,
    )
}
