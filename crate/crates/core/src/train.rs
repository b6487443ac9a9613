//! MultiBox loss, SGD with momentum, cosine decay, global gradient clipping and the training loop.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::anchors::{generate_anchors, hard_negative_mine, match_anchors, AnchorConfig, AnchorSet, MatchResult};
use crate::checkpoint;
use crate::config::{Getter, KvMap};
use crate::data::{augment, stack_images, Sample};
use crate::error::{Error, Result};
use crate::model::CvtAssd;
use crate::nn::{Module, Slot};
use crate::tensor::init::Rng64;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f32,
    pub total_iters: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub clip_norm: f32,
    /// Weight of the localization term.
    pub loc_weight: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub match_threshold: f32,
    pub mine_ratio: usize,
    /// Checkpoint interval in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-4,
            total_iters: 1000,
            momentum: 0.9,
            weight_decay: 0.0,
            clip_norm: 0.05,
            loc_weight: 1.0,
            batch_size: 8,
            seed: 0,
            augment: true,
            match_threshold: 0.5,
            mine_ratio: 3,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.initial_lr)));
        }
        if self.mine_ratio == 0 {
            return Err(Error::Config("mine_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Reads `train.*` keys, falling back to the defaults.
    pub fn from_map(map: &KvMap) -> Result<Self> {
        let d = Self::default();
        let g = Getter { map };
        let cfg = Self {
            initial_lr: g.f32("train.lr", d.initial_lr)?,
            total_iters: g.usize("train.iters", d.total_iters)?,
            momentum: g.f32("train.momentum", d.momentum)?,
            weight_decay: g.f32("train.weight_decay", d.weight_decay)?,
            clip_norm: g.f32("train.clip_norm", d.clip_norm)?,
            loc_weight: g.f32("train.loc_weight", d.loc_weight)?,
            batch_size: g.usize("train.batch_size", d.batch_size)?,
            seed: g.u64("train.seed", d.seed)?,
            augment: g.bool("train.augment", d.augment)?,
            match_threshold: g.f32("train.match_threshold", d.match_threshold)?,
            mine_ratio: g.usize("train.mine_ratio", d.mine_ratio)?,
            checkpoint_every: g.usize("train.checkpoint_every", d.checkpoint_every)?,
        };
        for key in map.keys().filter(|k| k.starts_with("train.")) {
            const KNOWN: [&str; 12] = [
                "lr", "iters", "momentum", "weight_decay", "clip_norm", "loc_weight", "batch_size", "seed", "augment",
                "match_threshold", "mine_ratio", "checkpoint_every",
            ];
            if !KNOWN.contains(&&key["train.".len()..]) {
                return Err(Error::Config(format!("unknown configuration key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss value with its unnormalized parts, for logging.
pub struct LossOutput {
    pub total: Tensor,
    pub loc: f32,
    pub conf: f32,
    pub num_positives: usize,
}

/// Per-anchor cross-entropy against the background class, used to rank negatives.
fn background_loss(conf: &[f32], classes: usize) -> Vec<f32> {
    conf.chunks_exact(classes)
        .map(|row| {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln() - row[0]
        })
        .collect()
}

/// `(L_conf + alpha * L_loc) / max(1, P)` over a batch, with `matches[n]` describing image `n`.
/// Accepts `[A, 4]`/`[A, C]` for a single image or `[N, A, 4]`/`[N, A, C]` for a batch.
pub fn multibox_loss(
    loc: &Tensor,
    conf: &Tensor,
    matches: &[MatchResult],
    loc_weight: f32,
    mine_ratio: usize,
) -> Result<LossOutput> {
    let (loc, conf) = if loc.rank() == 2 {
        (tensor::reshape(loc, &[1, loc.dim(0), loc.dim(1)])?, tensor::reshape(conf, &[1, conf.dim(0), conf.dim(1)])?)
    } else {
        (loc.clone(), conf.clone())
    };
    if loc.rank() != 3 || conf.rank() != 3 || loc.dim(2) != 4 {
        return Err(Error::Shape(format!("multibox_loss got loc {:?}, conf {:?}", loc.shape(), conf.shape())));
    }
    let (n, a, c) = (conf.dim(0), conf.dim(1), conf.dim(2));
    if loc.dim(0) != n || matches.len() != n {
        return Err(Error::dim("batch", n, matches.len(), "multibox_loss matches"));
    }
    if loc.dim(1) != a {
        return Err(Error::dim("anchors", a, loc.dim(1), "multibox_loss loc"));
    }
    for m in matches {
        if m.labels.len() != a {
            return Err(Error::dim("anchors", a, m.labels.len(), "multibox_loss match result"));
        }
    }
    let mut pos_rows = Vec::new();
    let mut pos_targets = Vec::new();
    let mut conf_rows = Vec::new();
    let mut conf_targets = Vec::new();
    for (img, m) in matches.iter().enumerate() {
        let ranking = background_loss(&conf.data()[img * a * c..(img + 1) * a * c], c);
        let negatives = hard_negative_mine(&ranking, m, mine_ratio)?;
        for i in 0..a {
            let row = img * a + i;
            if m.is_positive(i) {
                pos_rows.push(row);
                pos_targets.extend_from_slice(&m.loc_targets[i]);
                conf_rows.push(row);
                conf_targets.push(m.labels[i]);
            } else if negatives[i] {
                conf_rows.push(row);
                conf_targets.push(0);
            }
        }
    }
    let num_positives = pos_rows.len();
    let denom = num_positives.max(1) as f32;
    let conf_flat = tensor::reshape(&conf, &[n * a, c])?;
    let conf_sum = if conf_rows.is_empty() {
        tensor::scale(&tensor::sum(&conf_flat), 0.0)
    } else {
        tensor::sum(&tensor::cross_entropy(&tensor::gather_rows(&conf_flat, &conf_rows)?, &conf_targets)?)
    };
    let conf_value = conf_sum.item();
    let (total, loc_value) = if num_positives == 0 {
        (tensor::scale(&conf_sum, 1.0 / denom), 0.0)
    } else {
        let loc_flat = tensor::reshape(&loc, &[n * a, 4])?;
        let picked = tensor::gather_rows(&loc_flat, &pos_rows)?;
        let target = Tensor::new(&[num_positives, 4], pos_targets)?;
        let loc_sum = tensor::sum(&tensor::smooth_l1(&tensor::sub(&picked, &target)?));
        let v = loc_sum.item();
        let combined = tensor::add(&conf_sum, &tensor::scale(&loc_sum, loc_weight))?;
        (tensor::scale(&combined, 1.0 / denom), v)
    };
    Ok(LossOutput { total, loc: loc_value, conf: conf_value, num_positives })
}

/// `lr0 * (1 + cos(pi * iter / total)) / 2`.
pub fn cosine_lr(iter: usize, cfg: &TrainConfig) -> f32 {
    let t = iter.min(cfg.total_iters) as f64 / cfg.total_iters as f64;
    (cfg.initial_lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`; returns the factor.
pub fn clip_gradients(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let norm = global_norm(grads);
    if norm <= max_norm as f64 || norm == 0.0 {
        return 1.0;
    }
    let scale = (max_norm as f64 / norm) as f32;
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|v| *v *= scale);
    }
    scale
}

/// SGD with momentum and L2 weight decay over trainable slots.
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    /// `v = momentum * v + g + wd * p; p -= lr * v`. The slots get fresh leaves, which clears their gradients.
    pub fn step(&mut self, params: &[&Slot], grads: &[Vec<f32>], lr: f32) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("parameters", params.len(), grads.len(), "sgd gradients"));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((slot, g), v) in params.iter().zip(grads).zip(&mut self.velocity) {
            let p = slot.get();
            let mut data = p.to_vec();
            for ((w, &gi), vi) in data.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= lr * *vi;
            }
            slot.set(Tensor::new(p.shape(), data)?);
        }
        Ok(())
    }
}

/// Single-step convenience over standalone tensors, used by tests and small examples.
pub fn sgd_step(params: &[&Slot], lr: f32, momentum: f32, weight_decay: f32, opt: &mut Sgd) -> Result<()> {
    opt.momentum = momentum;
    opt.weight_decay = weight_decay;
    let grads: Vec<Vec<f32>> = params
        .iter()
        .map(|s| s.get().grad().unwrap_or_else(|| vec![0.0; s.numel()]))
        .collect();
    opt.step(params, &grads, lr)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f32,
    pub lr: f32,
    pub grad_scale: f32,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// `%g`-style formatting with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{x:.5e}");
        let (m, e) = s.split_once('e').unwrap();
        let m = if m.contains('.') { m.trim_end_matches('0').trim_end_matches('.') } else { m };
        format!("{m}e{e}")
    }
}

impl IterRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{} {} {} {}",
            self.iter,
            sig6(self.loss as f64),
            sig6(self.lr as f64),
            sig6(self.grad_scale as f64)
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(s, "{}", r.log_line());
        }
        s
    }

    /// Mean loss of the first and last `window` iterations.
    pub fn smoothed_endpoints(&self, window: usize) -> Option<(f32, f32)> {
        if self.records.len() < window || window == 0 {
            return None;
        }
        let mean = |rs: &[IterRecord]| rs.iter().map(|r| r.loss).sum::<f32>() / rs.len() as f32;
        let n = self.records.len();
        Some((mean(&self.records[..window]), mean(&self.records[n - window..])))
    }
}

/// Where the loop writes its log and checkpoints.
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
}

fn trainable(model: &CvtAssd) -> Vec<&Slot> {
    model.slots().into_iter().filter(|(_, s)| s.is_trainable()).map(|(_, s)| s).collect()
}

fn per_batch_rng(seed: u64, iter: usize) -> Rng64 {
    let mut r = Rng64::seed_from_u64(seed);
    r.set_stream(iter as u64 + 1);
    r
}

/// Matches every sample's ground truths against the anchors.
pub fn match_batch(anchors: &AnchorSet, samples: &[&Sample], threshold: f32, variances: (f32, f32)) -> Result<Vec<MatchResult>> {
    samples.iter().map(|s| match_anchors(anchors, &s.gts, threshold, variances)).collect()
}

/// Runs `cfg.total_iters` SGD iterations. Batches are drawn from per-epoch shuffles;
/// augmentation draws from a stream seeded by the iteration, so runs are reproducible.
pub fn train_loop(model: &CvtAssd, dataset: &[Sample], cfg: &TrainConfig, out: Option<TrainOutput>) -> Result<TrainLog> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mcfg = &model.cfg;
    let anchors = generate_anchors(&AnchorConfig::from_model(mcfg)?)?;
    let params = trainable(model);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order_rng = Rng64::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = TrainLog::default();
    let mut log_file = match &out {
        Some(o) => {
            std::fs::create_dir_all(o.dir).map_err(|e| Error::io(o.dir, e))?;
            let path = o.dir.join("train.log");
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    for iter in 0..cfg.total_iters {
        let mut batch_idx = Vec::with_capacity(cfg.batch_size);
        while batch_idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let mut aug_rng = per_batch_rng(cfg.seed, iter);
        let batch: Vec<Sample> = batch_idx
            .iter()
            .map(|&i| {
                if cfg.augment {
                    augment(&dataset[i], &mut aug_rng, mcfg.input_size)
                } else {
                    Ok(dataset[i].clone())
                }
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Sample> = batch.iter().collect();
        let images = stack_images(&refs)?;
        let matches = match_batch(&anchors, &refs, cfg.match_threshold, mcfg.variances)?;
        let (loc, conf) = model.forward(&images, true)?;
        let loss = multibox_loss(&loc, &conf, &matches, cfg.loc_weight, cfg.mine_ratio)?;
        let value = loss.total.item();
        if !value.is_finite() {
            return Err(Error::NonFinite { iter, loss: value });
        }
        loss.total.backward()?;
        let mut grads: Vec<Vec<f32>> = params
            .iter()
            .map(|s| s.get().grad().unwrap_or_else(|| vec![0.0; s.numel()]))
            .collect();
        let grad_norm = global_norm(&grads);
        let grad_scale = clip_gradients(&mut grads, cfg.clip_norm);
        let clipped_norm = global_norm(&grads);
        let lr = cosine_lr(iter, cfg);
        opt.step(&params, &grads, lr)?;
        let rec = IterRecord { iter, loss: value, lr, grad_scale, grad_norm, clipped_norm };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", rec.log_line()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.records.push(rec);
        if let Some(o) = &out {
            let done = iter + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.total_iters {
                let path = o.dir.join(format!("ckpt_{done:06}.cvta"));
                checkpoint::save(model, &path)?;
                log.checkpoints.push(path);
            }
        }
    }
    if let Some(o) = &out {
        let path = o.dir.join("final.cvta");
        checkpoint::save(model, &path)?;
        log.checkpoints.push(path);
    }
    Ok(log)
}
