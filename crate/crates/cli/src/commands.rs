use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use spsn_core::pipeline::ablation::{ablation_csv, ablation_sweep, plot_ablation};
use spsn_core::pipeline::checkpoint::{load_checkpoint, save_checkpoint};
use spsn_core::pipeline::io::{
    dimensions, load_dataset, load_depth, load_rgb, resize_map, save_gray, save_rgb_u8, write_dataset,
};
use spsn_core::pipeline::synth::{generate_synthetic, SynthOptions};
use spsn_core::pipeline::train::{am_gt_maps, evaluate_model, predict, train as run_training, Prediction};
use spsn_core::pipeline::{prepare, Config, Prepared, Sample, Spsn};
use spsn_core::superpixel::{label_visualization, slic_segment, SlicParams, Source, SuperpixelLabelMap};

use crate::{ConfigArgs, DataArgs};

pub const REPORT_CSV_HEADER: &str = "name,mae,f_beta,rely_r,rely_d";
pub const PR_CSV_HEADER: &str = "threshold,precision,recall";

fn resolve_config(args: &ConfigArgs) -> Result<Config> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => Config::load(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(name)) => Config::preset(name)?,
        (None, None) => Config::default(),
    };
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_samples(args: &DataArgs, cfg: &Config) -> Result<Vec<Sample>> {
    match (&args.data, args.synthetic) {
        (Some(dir), _) => {
            Ok(load_dataset(dir, cfg.image_size, true).with_context(|| format!("loading {}", dir.display()))?)
        }
        (None, Some(n)) => {
            let opts = SynthOptions {
                depth_degrade: args.depth_degrade,
                ..SynthOptions::new(cfg.image_size)
            };
            Ok(generate_synthetic(n, args.synth_seed.unwrap_or(cfg.seed), &opts)?)
        }
        (None, None) => bail!("either --data or --synthetic is required"),
    }
}

fn prepare_all(samples: Vec<Sample>, cfg: &Config) -> Result<Vec<Prepared>> {
    Ok(samples.into_iter().map(|s| prepare(s, cfg)).collect::<Result<_, _>>()?)
}

fn default_loss_csv(out: &Path) -> PathBuf {
    out.with_extension("loss.csv")
}

pub fn train(config: &ConfigArgs, data: &DataArgs, out: &Path, loss_csv: Option<PathBuf>) -> Result<()> {
    let cfg = resolve_config(config)?;
    let prepared = prepare_all(load_samples(data, &cfg)?, &cfg)?;
    log::info!(
        "training on {} samples at {}px, {} epochs of batch {}",
        prepared.len(),
        cfg.image_size,
        cfg.epochs,
        cfg.batch_size
    );
    let model = Spsn::new(&cfg)?;
    let mut store = model.init(cfg.seed)?;
    let csv_path = loss_csv.unwrap_or_else(|| default_loss_csv(out));
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut csv = BufWriter::new(File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?);
    let history = run_training(&model, &mut store, &prepared, Some(&mut csv))?;
    csv.flush()?;
    save_checkpoint(out, &cfg, &store)?;

    let last_epoch = cfg.epochs - 1;
    let tail: Vec<f64> = history.iter().filter(|h| h.epoch == last_epoch).map(|h| h.loss.l_mask).collect();
    let final_l_mask = tail.iter().sum::<f64>() / tail.len() as f64;
    let (metrics, _) = evaluate_model(&model, &store, &prepared)?;
    println!("steps {}", history.len());
    println!("final_epoch_l_mask {final_l_mask:.6}");
    println!("train_mae {:.6}", metrics.mae);
    println!("train_f_beta {:.6}", metrics.f_beta);
    println!("checkpoint {}", out.display());
    println!("loss_csv {}", csv_path.display());
    Ok(())
}

fn scores_csv(p: &Prediction) -> String {
    let mut s = String::from("slot,s_pred_rgb,s_pred_depth\n");
    for (i, (r, d)) in p.scores_rgb.iter().zip(&p.scores_depth).enumerate() {
        writeln!(s, "{i},{r},{d}").expect("string write");
    }
    s
}

fn save_labels(path: &Path, map: &SuperpixelLabelMap) -> Result<()> {
    save_rgb_u8(path, map.width, map.height, label_visualization(map))?;
    Ok(())
}

/// Writes every intermediate of one prediction into `dir`.
fn dump_debug(dir: &Path, p: &Prepared, pred: &Prediction, feature_side: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = p.sample.size();
    save_gray(&dir.join("pred.png"), &pred.pred, h, w)?;
    save_labels(&dir.join("superpixels_rgb.png"), p.sp_rgb.labels())?;
    save_labels(&dir.join("superpixels_depth.png"), p.sp_depth.labels())?;
    save_gray(&dir.join("am_pred_rgb.png"), &pred.am_pred_rgb, h, w)?;
    save_gray(&dir.join("am_pred_depth.png"), &pred.am_pred_depth, h, w)?;
    if let Some((gt_rgb, gt_depth)) = am_gt_maps(p)? {
        save_gray(&dir.join("am_gt_rgb.png"), &gt_rgb, h, w)?;
        save_gray(&dir.join("am_gt_depth.png"), &gt_depth, h, w)?;
    }
    save_gray(&dir.join("pseudo_gt.png"), &pred.pseudo_gt, feature_side, feature_side)?;
    std::fs::write(dir.join("scores.csv"), scores_csv(pred))?;
    std::fs::write(
        dir.join("reliance.csv"),
        format!("name,rely_r,rely_d\n{},{},{}\n", pred.name, pred.rely_r, pred.rely_d),
    )?;
    Ok(())
}

pub fn infer(ckpt: &Path, rgb: &Path, depth: &Path, out: &Path, debug: Option<&Path>) -> Result<()> {
    let (model, store) = load_checkpoint(ckpt, None).with_context(|| format!("loading {}", ckpt.display()))?;
    let cfg = model.config().clone();
    let (orig_h, orig_w) = dimensions(rgb)?;
    let name = rgb.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
    let sample = Sample {
        name,
        rgb: load_rgb(rgb, Some(cfg.image_size))?,
        depth: load_depth(depth, Some(cfg.image_size))?,
        gt: None,
    };
    let prepared = prepare(sample, &cfg)?;
    let pred = predict(&model, &store, std::slice::from_ref(&prepared))?
        .pop()
        .context("no prediction produced")?;
    let mask = resize_map(&pred.pred, cfg.image_size, cfg.image_size, orig_h, orig_w)?;
    save_gray(out, &mask, orig_h, orig_w)?;
    if let Some(dir) = debug {
        dump_debug(dir, &prepared, &pred, cfg.feature_side())?;
    }
    println!("rely_r {} rely_d {}", pred.rely_r, pred.rely_d);
    Ok(())
}

pub fn eval(ckpt: &Path, data: &Path, report: &Path, pr: Option<&Path>, debug: Option<&Path>) -> Result<()> {
    let (model, store) = load_checkpoint(ckpt, None).with_context(|| format!("loading {}", ckpt.display()))?;
    let cfg = model.config().clone();
    let samples = load_dataset(data, cfg.image_size, true).with_context(|| format!("loading {}", data.display()))?;
    let prepared = prepare_all(samples, &cfg)?;
    let (metrics, preds) = evaluate_model(&model, &store, &prepared)?;

    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    let (mut sum_r, mut sum_d) = (0.0f64, 0.0f64);
    for (p, pred) in prepared.iter().zip(&preds) {
        let gt = p.sample.gt.as_deref().context("sample without ground truth")?;
        let single = spsn_core::pipeline::metrics::evaluate(&[pred.pred.clone()], &[gt.to_vec()], cfg.beta_sq)?;
        writeln!(csv, "{},{},{},{},{}", pred.name, single.mae, single.f_beta, pred.rely_r, pred.rely_d)?;
        sum_r += pred.rely_r as f64;
        sum_d += pred.rely_d as f64;
        if let Some(dir) = debug {
            dump_debug(&dir.join(&pred.name), p, pred, cfg.feature_side())?;
        }
    }
    let n = preds.len() as f64;
    writeln!(csv, "mean,{},{},{},{}", metrics.mae, metrics.f_beta, sum_r / n, sum_d / n)?;
    write_file(report, &csv)?;
    if let Some(path) = pr {
        let mut s = format!("{PR_CSV_HEADER}\n");
        for (i, (p, r)) in metrics.pr_curve.iter().enumerate() {
            writeln!(s, "{i},{p},{r}")?;
        }
        write_file(path, &s)?;
    }
    println!("images {}", preds.len());
    println!("mae {:.6}", metrics.mae);
    println!("f_beta {:.6}", metrics.f_beta);
    println!("mean_rely_r {:.6}", sum_r / n);
    println!("mean_rely_d {:.6}", sum_d / n);
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn synth(n: usize, out: &Path, seed: u64, depth_degrade: f64, size: usize) -> Result<()> {
    let opts = SynthOptions {
        depth_degrade,
        ..SynthOptions::new(size)
    };
    let samples = generate_synthetic(n, seed, &opts)?;
    write_dataset(out, &samples)?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

pub fn superpixels(image: &Path, n: usize, out: &Path, depth: bool, compactness: f32, iterations: usize) -> Result<()> {
    let (tensor, source) = if depth {
        (load_depth(image, None)?, Source::Depth)
    } else {
        (load_rgb(image, None)?, Source::Rgb)
    };
    let params = SlicParams {
        compactness,
        iterations,
        ..SlicParams::new(n)
    };
    let map = slic_segment(&tensor, source, &params)?;
    save_labels(out, &map)?;
    println!("superpixels {}", map.n_actual());
    Ok(())
}

pub fn ablate(
    ns: &[usize],
    config: &ConfigArgs,
    data: &DataArgs,
    eval_data: Option<&Path>,
    eval_synthetic: usize,
    out: &Path,
) -> Result<()> {
    let cfg = resolve_config(config)?;
    let train_set = load_samples(data, &cfg)?;
    let eval_set = match eval_data {
        Some(dir) => load_dataset(dir, cfg.image_size, true)?,
        None => {
            // Held-out samples come from a different generator seed.
            let opts = SynthOptions {
                depth_degrade: data.depth_degrade,
                ..SynthOptions::new(cfg.image_size)
            };
            let seed = data.synth_seed.unwrap_or(cfg.seed).wrapping_add(1_000_003);
            generate_synthetic(eval_synthetic, seed, &opts)?
        }
    };
    let rows = ablation_sweep(&cfg, ns, &train_set, &eval_set)?;
    std::fs::create_dir_all(out)?;
    let csv = ablation_csv(&rows);
    write_file(&out.join("ablation.csv"), &csv)?;
    plot_ablation(&out.join("ablation.png"), &rows)?;
    print!("{csv}");
    Ok(())
}
