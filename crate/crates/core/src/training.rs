//! Self-supervised detector training from a delayed matching reward.
//!
//! Each step synthesizes image pairs related by a known homography, runs
//! the detector on both images, extracts and describes keypoints, matches
//! them, and labels every match against the ground truth. True-positive
//! keypoints get reward 1; the backprop mask covers all true positives
//! plus an equal number of sampled false positives. Only the score-map
//! stage is differentiable, so gradients flow through the network output
//! at the masked pixels alone.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{describe_all, nms_with, Keypoint, NmsConfig, ScoreMap};
use crate::geometry::{compose_pair, sample_homography, warp_image, Homography, HomographySampleRanges, Point};
use crate::imaging::{augment, AugmentationConfig, GrayImage};
use crate::matching::{cross_check_match, verify, Verdict};
use crate::net::{
    adam_step, images_to_tensor, tensor_to_maps, AdamConfig, AdamState, ChannelPlan, Checkpoint, Grads, Mode, NamedTensor,
    Tensor4, UnetParams, DIVISOR,
};
use crate::rng::{indexed_stream, stream};

/// Which image of a pair a keypoint set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

impl Side {
    fn index_of(self, v: &Verdict) -> usize {
        match self {
            Side::A => v.m.idx_a,
            Side::B => v.m.idx_b,
        }
    }
}

/// Per-pixel reward: 1 at true-positive keypoints, 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Binary backprop mask over true positives and mined false positives.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl MiningMask {
    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct PairSample {
    pub a: GrayImage,
    pub b: GrayImage,
    /// Maps pixel coordinates of `a` to those of `b`.
    pub h: Homography,
    pub base_id: usize,
    pub stream_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub crop: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub nms_window: usize,
    pub nms_threshold: f64,
    pub max_keypoints: usize,
    pub eps: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables intermediates).
    pub checkpoint_every: usize,
    pub channel_plan: ChannelPlan,
    pub ranges: HomographySampleRanges,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 5,
            crop: 256,
            epochs: 35,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            nms_window: 10,
            nms_threshold: 0.0,
            max_keypoints: 1000,
            eps: 3.0,
            seed: 0,
            checkpoint_every: 0,
            channel_plan: ChannelPlan::default(),
            ranges: HomographySampleRanges::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.crop == 0 || self.crop % DIVISOR != 0 {
            return Err(Error::invalid(format!("crop must be a positive multiple of {DIVISOR}")));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::invalid("eps must be >= 0"));
        }
        self.channel_plan.validate()?;
        self.ranges.validate()?;
        self.augmentation.validate()
    }

    pub fn nms(&self) -> NmsConfig {
        NmsConfig {
            window: self.nms_window,
            threshold: self.nms_threshold,
            max_keypoints: self.max_keypoints,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Warps `base` by two random homographies, crops the same `crop × crop`
/// window from both, and augments each independently. The returned
/// homography maps crop `a` onto crop `b`.
pub fn generate_pair<R: Rng + ?Sized>(
    base: &GrayImage,
    ranges: &HomographySampleRanges,
    aug: &AugmentationConfig,
    crop: usize,
    rng: &mut R,
) -> Result<PairSample> {
    let (w, h) = (base.width(), base.height());
    if crop == 0 || crop > w.min(h) {
        return Err(Error::invalid(format!("crop {crop} does not fit base image {w}x{h}")));
    }
    let center = Point::new((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let g = sample_homography(ranges, center, rng)?;
    let g_prime = sample_homography(ranges, center, rng)?;
    let h_full = compose_pair(&g_prime, &g)?;
    let warped_a = warp_image(base, &g, w, h)?;
    let warped_b = warp_image(base, &g_prime, w, h)?;
    let ox = rng.random_range(0..=w - crop);
    let oy = rng.random_range(0..=h - crop);
    let offset = Point::new(ox as f64, oy as f64);
    let h_crop = h_full.reframe(offset, offset)?;
    let a = augment(&warped_a.crop(ox, oy, crop, crop)?, aug, rng)?;
    let b = augment(&warped_b.crop(ox, oy, crop, crop)?, aug, rng)?;
    Ok(PairSample {
        a,
        b,
        h: h_crop,
        base_id: 0,
        stream_index: 0,
    })
}

fn pixel_index(kp: &Keypoint, w: usize, h: usize) -> Result<usize> {
    if kp.x >= w || kp.y >= h {
        return Err(Error::dim(format!("keypoint ({}, {}) outside {w}x{h}", kp.x, kp.y)));
    }
    Ok(kp.y * w + kp.x)
}

/// Reward indicator over this side's true-positive keypoints.
pub fn build_reward(kps: &[Keypoint], verdicts: &[Verdict], side: Side, w: usize, h: usize) -> Result<RewardMap> {
    let mut data = vec![0.0; w * h];
    for v in verdicts.iter().filter(|v| v.is_tp()) {
        data[pixel_index(&kps[side.index_of(v)], w, h)?] = 1.0;
    }
    Ok(RewardMap { width: w, height: h, data })
}

/// All `n` true-positive pixels plus `n` false-positive pixels sampled
/// without replacement; every false positive when there are at most `n`.
pub fn build_mask<R: Rng + ?Sized>(
    kps: &[Keypoint],
    verdicts: &[Verdict],
    side: Side,
    w: usize,
    h: usize,
    rng: &mut R,
) -> Result<MiningMask> {
    let mut data = vec![0.0; w * h];
    let (tps, fps): (Vec<&Verdict>, Vec<&Verdict>) = verdicts.iter().partition(|v| v.is_tp());
    for v in &tps {
        data[pixel_index(&kps[side.index_of(v)], w, h)?] = 1.0;
    }
    let n = tps.len();
    let mined: Vec<&Verdict> = if fps.len() > n {
        index::sample(rng, fps.len(), n).into_iter().map(|i| fps[i]).collect()
    } else {
        fps
    };
    for v in mined {
        data[pixel_index(&kps[side.index_of(v)], w, h)?] = 1.0;
    }
    Ok(MiningMask { width: w, height: h, data })
}

/// `Σ((S − R)² · M) / ΣM` and its gradient `2 (S − R) · M / ΣM`.
pub fn masked_loss(scores: &[f64], reward: &RewardMap, mask: &MiningMask) -> Result<(f64, Vec<f64>)> {
    if scores.len() != reward.data.len() || scores.len() != mask.data.len() {
        return Err(Error::dim("score, reward and mask sizes differ"));
    }
    let total = mask.total();
    if total <= 0.0 {
        return Err(Error::NoTrainablePoints);
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for i in 0..scores.len() {
        let m = mask.data[i];
        if m == 0.0 {
            continue;
        }
        let d = scores[i] - reward.data[i];
        loss += d * d * m;
        grad[i] = 2.0 * d * m / total;
    }
    Ok((loss / total, grad))
}

/// Per-step diagnostics, also the metrics log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub loss: Option<f64>,
    pub n_kp_a: usize,
    pub n_kp_b: usize,
    pub n_matches: usize,
    pub n_tp: usize,
    pub n_fp: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub loss: Option<f64>,
    pub n_kp_a: usize,
    pub n_kp_b: usize,
    pub n_matches: usize,
    pub n_tp: usize,
    pub n_fp: usize,
}

/// Everything the loss needs for one pair, with the keypoint selection frozen.
#[derive(Debug, Clone)]
pub struct PairTargets {
    pub kps_a: Vec<Keypoint>,
    pub kps_b: Vec<Keypoint>,
    pub verdicts: Vec<Verdict>,
    pub reward: [RewardMap; 2],
    pub mask: [MiningMask; 2],
}

/// Non-differentiable stages for one pair: NMS, description, matching,
/// verification, reward and mask.
pub fn pair_targets<R: Rng + ?Sized>(
    pair: &PairSample,
    maps: &[ScoreMap; 2],
    nms: &NmsConfig,
    eps: f64,
    rng: &mut R,
) -> Result<PairTargets> {
    let (w, h) = (pair.a.width(), pair.a.height());
    let kps_a = nms_with(&maps[0], nms);
    let kps_b = nms_with(&maps[1], nms);
    let desc_a = describe_all(&pair.a, &kps_a);
    let desc_b = describe_all(&pair.b, &kps_b);
    let matches = cross_check_match(&desc_a, &desc_b);
    let verdicts = verify(&matches, &kps_a, &kps_b, &pair.h, eps);
    let reward = [
        build_reward(&kps_a, &verdicts, Side::A, w, h)?,
        build_reward(&kps_b, &verdicts, Side::B, w, h)?,
    ];
    let mask = [
        build_mask(&kps_a, &verdicts, Side::A, w, h, rng)?,
        build_mask(&kps_b, &verdicts, Side::B, w, h, rng)?,
    ];
    Ok(PairTargets {
        kps_a,
        kps_b,
        verdicts,
        reward,
        mask,
    })
}

/// Symmetric pair loss over the score tensor (`2 × 1 × h × w`): the mean of
/// the per-image masked losses over images with a non-empty mask. `None`
/// when both masks are empty.
pub fn pair_loss(scores: &Tensor4, targets: &PairTargets) -> Result<Option<(f64, Tensor4)>> {
    let mut parts = Vec::new();
    for i in 0..2 {
        match masked_loss(scores.plane(i, 0), &targets.reward[i], &targets.mask[i]) {
            Ok((l, g)) => parts.push((i, l, g)),
            Err(Error::NoTrainablePoints) => {}
            Err(e) => return Err(e),
        }
    }
    if parts.is_empty() {
        return Ok(None);
    }
    let k = 1.0 / parts.len() as f64;
    let mut grad = Tensor4::zeros(scores.n, scores.c, scores.h, scores.w);
    let mut loss = 0.0;
    for (i, l, g) in parts {
        loss += k * l;
        for (dst, v) in grad.plane_mut(i, 0).iter_mut().zip(g) {
            *dst = k * v;
        }
    }
    Ok(Some((loss, grad)))
}

/// One optimizer step over a batch of pairs. Gradients of the pairs that
/// produced a trainable mask are averaged; the step is skipped (loss
/// `None`) when no pair did.
pub fn train_step<R: Rng + ?Sized>(
    net: &mut UnetParams,
    adam: &mut AdamState,
    pairs: &[PairSample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepReport> {
    let nms = cfg.nms();
    let mut report = StepReport::default();
    let mut acc: Option<Grads> = None;
    let mut losses = Vec::new();
    for pair in pairs {
        let x = images_to_tensor(&[pair.a.clone(), pair.b.clone()], false)?;
        let (s, cache) = net.forward(&x, Mode::Train)?;
        let cache = cache.expect("train mode returns a cache");
        let maps = tensor_to_maps(&s, pair.a.width(), pair.a.height());
        let maps: [ScoreMap; 2] = [maps[0].clone(), maps[1].clone()];
        let targets = pair_targets(pair, &maps, &nms, cfg.eps, rng)?;
        report.n_kp_a += targets.kps_a.len();
        report.n_kp_b += targets.kps_b.len();
        report.n_matches += targets.verdicts.len();
        report.n_tp += targets.verdicts.iter().filter(|v| v.is_tp()).count();
        report.n_fp += targets.verdicts.iter().filter(|v| !v.is_tp()).count();
        if let Some((loss, d_s)) = pair_loss(&s, &targets)? {
            let g = net.backward(&cache, &d_s)?;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => {
                    for (dst, src) in a.iter_mut().flatten().zip(g.iter().flatten()) {
                        *dst += src;
                    }
                }
            }
            losses.push(loss);
        }
        net.update_running_stats(&cache);
    }
    if let Some(mut grads) = acc {
        let k = 1.0 / losses.len() as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
        adam_step(&mut net.params, &grads, adam, &cfg.adam())?;
        report.loss = Some(losses.iter().sum::<f64>() * k);
    }
    Ok(report)
}

/// Training loop state; resumable from a checkpoint.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: UnetParams,
    pub adam: AdamState,
    /// Number of completed steps.
    pub step: u64,
}

pub const STEP_KEY: &str = "train.step";

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = UnetParams::new(cfg.channel_plan, &mut stream(cfg.seed, "init"))?;
        let adam = AdamState::new(&net.params);
        Ok(Trainer { cfg, net, adam, step: 0 })
    }

    pub fn resume(cfg: TrainConfig, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ck.net.plan() != cfg.channel_plan {
            return Err(Error::invalid("checkpoint channel plan differs from configuration"));
        }
        let step = ck.extra_scalar(STEP_KEY).unwrap_or(0.0) as u64;
        let adam = ck.adam.unwrap_or_else(|| AdamState::new(&ck.net.params));
        Ok(Trainer {
            cfg,
            net: ck.net,
            adam,
            step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            adam: Some(self.adam.clone()),
            extras: vec![NamedTensor::scalar(STEP_KEY, self.step as f64)],
        }
    }

    pub fn steps_per_epoch(&self, n_bases: usize) -> u64 {
        n_bases.div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self, n_bases: usize) -> u64 {
        self.steps_per_epoch(n_bases) * self.cfg.epochs as u64
    }

    /// Base-image indices used by global step `step`.
    fn batch_indices(&self, n_bases: usize, step: u64) -> Vec<usize> {
        let per_epoch = self.steps_per_epoch(n_bases);
        let epoch = step / per_epoch;
        let pos = (step % per_epoch) as usize;
        let mut order: Vec<usize> = (0..n_bases).collect();
        order.shuffle(&mut indexed_stream(self.cfg.seed, "shuffle", epoch));
        let start = pos * self.cfg.batch_size;
        order[start..(start + self.cfg.batch_size).min(n_bases)].to_vec()
    }

    /// Synthesizes the pairs for global step `step`.
    pub fn make_pairs(&self, bases: &[GrayImage], step: u64) -> Result<Vec<PairSample>> {
        self.batch_indices(bases.len(), step)
            .into_iter()
            .enumerate()
            .map(|(k, base_id)| {
                let idx = step * self.cfg.batch_size as u64 + k as u64;
                let mut rng = indexed_stream(self.cfg.seed, "pair", idx);
                let mut p = generate_pair(&bases[base_id], &self.cfg.ranges, &self.cfg.augmentation, self.cfg.crop, &mut rng)?;
                p.base_id = base_id;
                p.stream_index = idx;
                Ok(p)
            })
            .collect()
    }

    /// Runs one step and returns its log record.
    pub fn step_once(&mut self, bases: &[GrayImage]) -> Result<StepLog> {
        let step = self.step;
        let pairs = self.make_pairs(bases, step)?;
        let mut rng = indexed_stream(self.cfg.seed, "mining", step);
        let r = train_step(&mut self.net, &mut self.adam, &pairs, &self.cfg, &mut rng)?;
        self.step += 1;
        Ok(StepLog {
            step,
            epoch: step / self.steps_per_epoch(bases.len()),
            loss: r.loss,
            n_kp_a: r.n_kp_a,
            n_kp_b: r.n_kp_b,
            n_matches: r.n_matches,
            n_tp: r.n_tp,
            n_fp: r.n_fp,
            seed: self.cfg.seed,
        })
    }

    /// Runs every remaining step; `on_step` sees each record after it completes.
    pub fn run(&mut self, bases: &[GrayImage], mut on_step: impl FnMut(&StepLog, &Trainer) -> Result<()>) -> Result<()> {
        if bases.is_empty() {
            return Err(Error::invalid("training needs at least one base image"));
        }
        let total = self.total_steps(bases.len());
        while self.step < total {
            let rec = self.step_once(bases)?;
            on_step(&rec, self)?;
        }
        Ok(())
    }
}

/// Files produced by [`train`] in its output directory.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:06}.glam")
}

/// Drops log records at or after `step` so a resumed run continues the log
/// exactly where the checkpoint left off.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::new();
    for line in text.lines() {
        let rec: StepLog = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}: bad log record: {e}", path.display())))?;
        if rec.step < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    crate::io_util::write_atomic(path, kept.as_bytes())
}

/// Full training run writing checkpoints and a JSON-lines metrics log into
/// `out_dir`. A checkpoint is written before the first step, every
/// `checkpoint_every` steps, and at the end (`final.glam`).
pub fn train(bases: &[GrayImage], trainer: &mut Trainer, out_dir: &Path) -> Result<TrainOutputs> {
    if bases.is_empty() {
        return Err(Error::invalid("training needs at least one base image"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("metrics.jsonl");
    if trainer.step > 0 {
        truncate_log(&log_path, trainer.step)?;
    }
    let file = if trainer.step == 0 {
        File::create(&log_path)
    } else {
        OpenOptions::new().create(true).append(true).open(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut checkpoints = Vec::new();

    if trainer.step == 0 {
        let p = out_dir.join(checkpoint_name(0));
        trainer.checkpoint().save(&p)?;
        checkpoints.push(p);
    }
    let every = trainer.cfg.checkpoint_every as u64;
    trainer.run(bases, |rec, t| {
        let line = serde_json::to_string(rec).expect("log record serializes");
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && t.step % every == 0 {
            let p = out_dir.join(checkpoint_name(t.step));
            t.checkpoint().save(&p)?;
            checkpoints.push(p);
        }
        Ok(())
    })?;
    let final_checkpoint = out_dir.join("final.glam");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutputs {
        checkpoints,
        final_checkpoint,
        log: log_path,
    })
}
