//! Training loop, validation, u-head curves and gradient-norm probes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerSnapshot};
use crate::diffusion::{perturb, sample_noise_level, valid_noise, Preconditioner};
use crate::error::{Error, Result};
use crate::layout::{column_weights, fit_stats, group_weights, normalize, overall_magnitude, FeatureLayout, NormStats};
use crate::losses::{breakdown, masked_residuals, residual_gradient, LossBreakdown, LossMode, SampleLoss};
use crate::model::Model;
use crate::motion::{augment, MotionSample};
use crate::net::{DenoiserNet, HeadConfig, HeadTape, NetConfig, UncertaintyHead};
use crate::optim::{adam_step, lr_schedule, AdamConfig, AdamState};
use crate::par::{self, Exec};
use crate::seeding::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub max_lr: f64,
    pub warmup_epochs: usize,
    pub adam: AdamConfig,
    pub mode: LossMode,
    pub seed: u64,
    pub net: NetConfig,
    pub head: HeadConfig,
    pub p_mean: f64,
    pub p_std: f64,
    pub augment: bool,
    /// Number of trailing epochs that write a checkpoint.
    pub keep_last: usize,
    /// Validation samples scored after every epoch (0 disables).
    pub val_samples: usize,
    /// Epochs (1-based, after the update) at which gradient norms are probed.
    pub probe_epochs: Vec<usize>,
    pub probe_samples: usize,
    pub u_grid: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 200,
            max_lr: 1e-2,
            warmup_epochs: 10,
            adam: AdamConfig::default(),
            mode: LossMode::Final,
            seed: 0,
            net: NetConfig::default(),
            head: HeadConfig::default(),
            p_mean: -1.2,
            p_std: 1.2,
            augment: true,
            keep_last: 10,
            val_samples: 64,
            probe_epochs: Vec::new(),
            probe_samples: 64,
            u_grid: 33,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidConfig("warmup must be shorter than training".into()));
        }
        if !(self.max_lr > 0.0) {
            return Err(Error::InvalidConfig("max_lr must be positive".into()));
        }
        if !(self.p_std > 0.0) {
            return Err(Error::InvalidConfig("p_std must be positive".into()));
        }
        self.net.validate()
    }

    /// Log-spaced grid covering ±3 standard deviations of the training
    /// noise distribution.
    pub fn t_grid(&self, points: usize) -> Vec<f64> {
        log_grid(self.p_mean - 3.0 * self.p_std, self.p_mean + 3.0 * self.p_std, points)
    }
}

pub fn log_grid(ln_lo: f64, ln_hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![(0.5 * (ln_lo + ln_hi)).exp()],
        _ => (0..points).map(|i| (ln_lo + (ln_hi - ln_lo) * i as f64 / (points - 1) as f64).exp()).collect(),
    }
}

/// Everything a training run starts from.
pub struct Setup {
    pub layout: FeatureLayout,
    pub stats: NormStats,
    pub model: Model,
    pub group_w: Vec<f64>,
}

/// Fits statistics for the mode's normalization scheme and builds a fresh
/// model. `σ_data` is the measured magnitude of the normalized fit set.
pub fn setup(cfg: &TrainConfig, layout: &FeatureLayout, train: &[MotionSample]) -> Result<Setup> {
    cfg.validate()?;
    let stats = fit_stats(train, layout, cfg.mode.norm_scheme())?;
    let normalized = train.iter().map(|s| normalize(s, &stats)).collect::<Result<Vec<_>>>()?;
    let sigma_data = overall_magnitude(&normalized);
    let precond = Preconditioner::new(sigma_data, cfg.p_mean, cfg.p_std)?;
    let g = layout.num_groups();
    let group_w = if cfg.mode.uses_group_weights() { group_weights(layout) } else { vec![1.0; g] };
    let input_weights = column_weights(layout, &group_w)?;
    let net = DenoiserNet::new(cfg.net.clone(), layout.n(), cfg.seed)?;
    let heads = (0..cfg.mode.num_heads(g))
        .map(|i| UncertaintyHead::new(cfg.head.clone(), cfg.seed, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let model = Model::new(net, heads, precond, input_weights)?;
    Ok(Setup { layout: layout.clone(), stats, model, group_w })
}

struct Forward {
    x0: MotionSample,
    xt: MotionSample,
    eval: crate::model::Evaluation,
    tapes: Vec<HeadTape>,
    loss: SampleLoss,
}

fn forward_at(model: &Model, layout: &FeatureLayout, x0: MotionSample, t: f64, eps: &[f64]) -> Result<Forward> {
    let xt = perturb(&x0, t, eps)?;
    let eval = model.evaluate(&xt, t)?;
    let residuals = masked_residuals(&eval.d, &x0, layout)?;
    let (u, tapes): (Vec<f64>, Vec<HeadTape>) = model.heads.iter().map(|h| h.forward(t)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let loss = SampleLoss { t, lambda: eval.coeffs.lambda, residuals, u };
    Ok(Forward { x0, xt, eval, tapes, loss })
}

/// Summed parameter gradients of one mini-batch.
pub struct BatchGrads {
    pub net: Vec<f64>,
    pub heads: Vec<Vec<f64>>,
    pub breakdown: LossBreakdown,
    pub samples: Vec<SampleLoss>,
}

/// Forward and backward over `x0s` with per-sample noise levels and noise.
pub fn batch_gradients(
    model: &Model,
    layout: &FeatureLayout,
    mode: LossMode,
    group_w: &[f64],
    inputs: Vec<(MotionSample, f64, Vec<f64>)>,
    exec: Exec,
) -> Result<BatchGrads> {
    let fwd: Vec<Forward> = par::map_indexed(exec, inputs.len(), |i| {
        let (x0, t, eps) = &inputs[i];
        forward_at(model, layout, x0.clone(), *t, eps)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let samples: Vec<SampleLoss> = fwd.iter().map(|f| f.loss.clone()).collect();
    let (bd, weights) = breakdown(mode, &samples, group_w)?;
    let parts: Vec<(Vec<f64>, Vec<Vec<f64>>)> = par::map_indexed(exec, fwd.len(), |i| {
        let f = &fwd[i];
        let w = &weights[i];
        let dd = residual_gradient(&f.eval.d, &f.x0, layout, &w.a);
        let (g, _) = model.backward(&f.xt, &f.eval, &dd)?;
        let hg = model.heads.iter().zip(&f.tapes).zip(&w.du).map(|((h, tp), du)| h.backward(tp, *du)).collect();
        Ok((g, hg))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let net_parts: Vec<Vec<f64>> = parts.iter().map(|p| p.0.clone()).collect();
    let net = par::sum_vectors(&net_parts);
    let heads = (0..model.heads.len())
        .map(|h| par::sum_vectors(&parts.iter().map(|p| p.1[h].clone()).collect::<Vec<_>>()))
        .collect();
    Ok(BatchGrads { net, heads, breakdown: bd, samples })
}

/// Loss breakdown on fixed noise draws, without augmentation.
pub fn validation_breakdown(
    model: &Model,
    layout: &FeatureLayout,
    mode: LossMode,
    group_w: &[f64],
    normalized: &[MotionSample],
    seed: u64,
    exec: Exec,
) -> Result<LossBreakdown> {
    let samples: Vec<SampleLoss> = par::map_indexed(exec, normalized.len(), |i| {
        let mut rng = seeding::stream(seed, &[tag::VALIDATE, i as u64]);
        let x0 = normalized[i].clone();
        let t = sample_noise_level(&mut rng, model.precond.p_mean, model.precond.p_std);
        let eps = valid_noise(&mut rng, &x0);
        Ok(forward_at(model, layout, x0, t, &eps)?.loss)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(breakdown(mode, &samples, group_w)?.0)
}

/// One row of a gradient-norm probe: mean per-sample `‖∂L/∂F‖` per group
/// and over all elements, at a fixed noise level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub t: f64,
    pub groups: Vec<f64>,
    pub overall: f64,
}

pub const PROBE_BATCH: usize = 32;

/// Average L2 norm of the loss gradient with respect to the network output,
/// over consecutive batches of [`PROBE_BATCH`] samples at each fixed `t`.
pub fn probe_gradient_norms(
    model: &Model,
    layout: &FeatureLayout,
    mode: LossMode,
    group_w: &[f64],
    normalized: &[MotionSample],
    t_grid: &[f64],
    seed: u64,
    exec: Exec,
) -> Result<Vec<ProbeRow>> {
    let batches = normalized.len() / PROBE_BATCH;
    if batches == 0 {
        return Err(Error::InsufficientSamples { need: PROBE_BATCH, have: normalized.len() });
    }
    let g = layout.num_groups();
    let cols = layout.column_groups();
    let n = layout.n();
    t_grid
        .iter()
        .enumerate()
        .map(|(ti, &t)| {
            let mut groups = vec![0.0; g];
            let mut overall = 0.0;
            for b in 0..batches {
                let chunk = &normalized[b * PROBE_BATCH..(b + 1) * PROBE_BATCH];
                let fwd: Vec<Forward> = par::map_indexed(exec, chunk.len(), |i| {
                    let mut rng = seeding::stream(seed, &[tag::PROBE, ti as u64, (b * PROBE_BATCH + i) as u64]);
                    let eps = valid_noise(&mut rng, &chunk[i]);
                    forward_at(model, layout, chunk[i].clone(), t, &eps)
                })
                .into_iter()
                .collect::<Result<_>>()?;
                let samples: Vec<SampleLoss> = fwd.iter().map(|f| f.loss.clone()).collect();
                let (_, weights) = breakdown(mode, &samples, group_w)?;
                for (f, w) in fwd.iter().zip(&weights) {
                    let dd = residual_gradient(&f.eval.d, &f.x0, layout, &w.a);
                    let c_out = f.eval.coeffs.c_out;
                    let mut sq = vec![0.0; g];
                    for (i, v) in dd[..f.x0.valid_elements()].iter().enumerate() {
                        sq[cols[i % n]] += (c_out * v).powi(2);
                    }
                    for k in 0..g {
                        groups[k] += sq[k].sqrt();
                    }
                    overall += sq.iter().sum::<f64>().sqrt();
                }
            }
            let count = (batches * PROBE_BATCH) as f64;
            Ok(ProbeRow { t, groups: groups.iter().map(|v| v / count).collect(), overall: overall / count })
        })
        .collect()
}

/// Per-head target of the `u` optimum at each `t`: the pooled mean squared
/// residual of the head's groups (times `λ(t)` for the joint baseline loss).
pub fn empirical_u_targets(
    model: &Model,
    layout: &FeatureLayout,
    mode: LossMode,
    normalized: &[MotionSample],
    t_grid: &[f64],
    seed: u64,
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    let g = layout.num_groups();
    let heads = mode.num_heads(g);
    t_grid
        .iter()
        .enumerate()
        .map(|(ti, &t)| {
            let res: Vec<SampleLoss> = par::map_indexed(exec, normalized.len(), |i| {
                let mut rng = seeding::stream(seed, &[tag::PROBE, 1 << 32 | ti as u64, i as u64]);
                let eps = valid_noise(&mut rng, &normalized[i]);
                Ok(forward_at(model, layout, normalized[i].clone(), t, &eps)?.loss)
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let mut sums = vec![0.0; heads];
            let mut counts = vec![0usize; heads];
            for s in &res {
                for k in 0..g {
                    sums[mode.head_for(k)] += s.residuals.sums[k];
                    counts[mode.head_for(k)] += s.residuals.counts[k];
                }
            }
            let lambda = model.precond.coeffs(t)?.lambda;
            let scale = if mode == LossMode::Baseline { lambda } else { 1.0 };
            Ok(sums.iter().zip(&counts).map(|(s, c)| scale * s / *c as f64).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Weights after the final epoch.
    pub model: Model,
    /// Among the last `keep_last` epochs, the weights with the lowest mean
    /// validation group error (the final weights without validation data).
    pub selected: Model,
    pub selected_epoch: usize,
    pub stats: NormStats,
    pub group_w: Vec<f64>,
    pub log: Vec<EpochLog>,
    /// `(epoch, t, u per head)`.
    pub u_curves: Vec<(usize, f64, Vec<f64>)>,
    /// `(epoch, rows)`.
    pub probes: Vec<(usize, Vec<ProbeRow>)>,
    pub checkpoints: Vec<(PathBuf, [u8; 32])>,
}

fn accumulate(acc: &mut Option<(Vec<f64>, Vec<usize>, Vec<f64>, f64, f64, usize)>, g: &BatchGrads) {
    let k = g.breakdown.group_mse.len();
    let a = acc.get_or_insert_with(|| (vec![0.0; k], vec![0; k], vec![0.0; g.breakdown.u_mean.len()], 0.0, 0.0, 0));
    for s in &g.samples {
        for i in 0..k {
            a.0[i] += s.residuals.sums[i];
            a.1[i] += s.residuals.counts[i];
        }
        for (m, u) in a.2.iter_mut().zip(&s.u) {
            *m += u;
        }
    }
    a.3 += g.breakdown.theta;
    a.4 += g.breakdown.psi;
    a.5 += 1;
}

/// Trains from `setup` on raw (unnormalized) training samples.
pub fn train(
    cfg: &TrainConfig,
    setup: Setup,
    train_raw: &[MotionSample],
    val_raw: &[MotionSample],
    out_dir: Option<&Path>,
    exec: Exec,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let Setup { layout, stats, mut model, group_w } = setup;
    let mode = cfg.mode;
    let val_norm: Vec<MotionSample> =
        val_raw.iter().take(cfg.val_samples).map(|s| normalize(s, &stats)).collect::<Result<_>>()?;
    let train_norm: Vec<MotionSample> = train_raw.iter().map(|s| normalize(s, &stats)).collect::<Result<_>>()?;
    let probe_set = &train_norm[..cfg.probe_samples.min(train_norm.len())];
    let steps_per_epoch = train_raw.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut net_opt = AdamState::new(model.net.num_params());
    let mut head_opts: Vec<AdamState> = model.heads.iter().map(|h| AdamState::new(h.num_params())).collect();
    let u_grid = cfg.t_grid(cfg.u_grid);
    let probe_grid = cfg.t_grid(25);
    let mut out = TrainOutput {
        model: model.clone(),
        selected: model.clone(),
        selected_epoch: 0,
        stats: stats.clone(),
        group_w: group_w.clone(),
        log: Vec::new(),
        u_curves: Vec::new(),
        probes: Vec::new(),
        checkpoints: Vec::new(),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut step = 0usize;
    let mut best = f64::INFINITY;
    if cfg.probe_epochs.contains(&0) {
        out.probes.push((0, probe_gradient_norms(&model, &layout, mode, &group_w, probe_set, &probe_grid, cfg.seed, exec)?));
    }
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_raw.len()).collect();
        order.shuffle(&mut seeding::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut acc = None;
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<(MotionSample, f64, Vec<f64>)> = par::map_indexed(exec, chunk.len(), |i| {
                let pos = (b * cfg.batch_size + i) as u64;
                let mut rng = seeding::stream(cfg.seed, &[tag::SAMPLE, epoch as u64, pos]);
                let raw = &train_raw[chunk[i]];
                let x0 = if cfg.augment { normalize(&augment(raw, &layout, &mut rng), &stats)? } else { train_norm[chunk[i]].clone() };
                let t = sample_noise_level(&mut rng, cfg.p_mean, cfg.p_std);
                let eps = valid_noise(&mut rng, &x0);
                Ok((x0, t, eps))
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let grads = batch_gradients(&model, &layout, mode, &group_w, inputs, exec).map_err(|e| {
                Error::NonFinite(format!("epoch {epoch} batch {b}: {e}"))
            })?;
            lr = lr_schedule(step, warmup, total, cfg.max_lr);
            adam_step(&mut model.net.params, &grads.net, &mut net_opt, lr, &cfg.adam)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch} batch {b}: {e}")))?;
            model.net.renormalize();
            for ((h, g), st) in model.heads.iter_mut().zip(&grads.heads).zip(head_opts.iter_mut()) {
                adam_step(&mut h.params, g, st, lr, &cfg.adam)?;
                h.renormalize();
            }
            accumulate(&mut acc, &grads);
            step += 1;
        }
        let (sums, counts, u_sum, theta, psi, batches) = acc.expect("non-empty training set");
        let n_samples = train_raw.len() as f64;
        let train_bd = LossBreakdown {
            group_mse: sums.iter().zip(&counts).map(|(s, c)| s / *c as f64).collect(),
            u_mean: u_sum.iter().map(|u| u / n_samples).collect(),
            theta: theta / batches as f64,
            psi: psi / batches as f64,
        };
        let val = if val_norm.is_empty() {
            None
        } else {
            Some(validation_breakdown(&model, &layout, mode, &group_w, &val_norm, cfg.seed, exec)?)
        };
        let done = epoch + 1;
        log::info!("epoch {done}/{} lr {lr:.3e} theta {:.5} psi {:.5}", cfg.epochs, train_bd.theta, train_bd.psi);
        out.log.push(EpochLog { epoch: done, lr, train: train_bd, val });
        for &t in &u_grid {
            out.u_curves.push((done, t, model.u_values(t)?));
        }
        if cfg.probe_epochs.contains(&done) {
            out.probes.push((done, probe_gradient_norms(&model, &layout, mode, &group_w, probe_set, &probe_grid, cfg.seed, exec)?));
        }
        let in_window = done + cfg.keep_last.max(1) > cfg.epochs;
        if in_window {
            // without validation data the latest epoch wins
            let score = out.log.last().and_then(|e| e.val.as_ref()).map_or(f64::NEG_INFINITY, |v| {
                v.group_mse.iter().sum::<f64>() / v.group_mse.len() as f64
            });
            if score <= best || score == f64::NEG_INFINITY {
                best = score;
                out.selected = model.clone();
                out.selected_epoch = done;
            }
        }
        if let Some(dir) = out_dir {
            if done + cfg.keep_last > cfg.epochs {
                let ckpt = Checkpoint {
                    model: model.clone(),
                    layout: layout.clone(),
                    stats: stats.clone(),
                    mode,
                    epoch: done,
                    optimizer: Some(OptimizerSnapshot { net: net_opt.clone(), heads: head_opts.clone() }),
                };
                let path = dir.join(format!("ckpt_epoch{done:04}.gdkw"));
                let hash = ckpt.save(&path)?;
                out.checkpoints.push((path, hash));
            }
        }
    }
    if cfg.epochs == 0 {
        out.selected = model.clone();
    }
    out.model = model;
    if let Some(dir) = out_dir {
        write_outputs(dir, &layout, &out)?;
    }
    Ok(out)
}

fn write_outputs(dir: &Path, layout: &FeatureLayout, out: &TrainOutput) -> Result<()> {
    let names: Vec<&str> = layout.groups.iter().map(|g| g.name.as_str()).collect();
    let heads = out.model.heads.len();
    let mut s = String::from("epoch,split,lr,theta,psi");
    for n in &names {
        write!(s, ",loss_{n}").unwrap();
    }
    for h in 0..heads {
        write!(s, ",u_mean_{h}").unwrap();
    }
    s.push('\n');
    for e in &out.log {
        for (split, bd) in [("train", Some(&e.train)), ("val", e.val.as_ref())] {
            if let Some(bd) = bd {
                write!(s, "{},{split},{:e},{:e},{:e}", e.epoch, e.lr, bd.theta, bd.psi).unwrap();
                for v in bd.group_mse.iter().chain(&bd.u_mean) {
                    write!(s, ",{v:e}").unwrap();
                }
                s.push('\n');
            }
        }
    }
    fs::write(dir.join("train_log.csv"), s)?;
    fs::write(dir.join("u_curves.csv"), u_curves_csv(&out.u_curves, heads))?;
    if !out.probes.is_empty() {
        fs::write(dir.join("grad_probe.csv"), probe_csv(&out.probes, &names))?;
    }
    Ok(())
}

pub fn u_curves_csv(rows: &[(usize, f64, Vec<f64>)], heads: usize) -> String {
    let mut s = String::from("epoch,t");
    for h in 0..heads {
        write!(s, ",u_{h}").unwrap();
    }
    s.push('\n');
    for (e, t, us) in rows {
        write!(s, "{e},{t:e}").unwrap();
        for u in us {
            write!(s, ",{u:e}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn probe_csv(probes: &[(usize, Vec<ProbeRow>)], names: &[&str]) -> String {
    let mut s = String::from("epoch,t");
    for n in names {
        write!(s, ",norm_{n}").unwrap();
    }
    s.push_str(",overall\n");
    for (e, rows) in probes {
        for r in rows {
            write!(s, "{e},{:e}", r.t).unwrap();
            for v in &r.groups {
                write!(s, ",{v:e}").unwrap();
            }
            writeln!(s, ",{:e}", r.overall).unwrap();
        }
    }
    s
}
