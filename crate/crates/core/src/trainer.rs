//! SGDM training with cosine warm restarts, and binary checkpoints.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Tensor};
use crate::error::{Error, Result};
use crate::evalmetrics::{argmax_map, evaluate, predict_scene, MetricsReport};
use crate::icechart::{ChartEntry, DEFAULT_DOMINANCE_THRESHOLD};
use crate::regionloss::{
    batch_region_loss_on_tape, derive_pixel_labels, pixel_ce_masked_on_tape, ImageRegions,
    PixelLabelMap, IGNORE_LABEL,
};
use crate::scene_io::{
    compute_stats, crop, downscale_scene, normalize, ChannelStats, Patch, PatchSampler, Scene,
    NUM_CHANNELS,
};
use crate::unet::{forward, init_params, UNetConfig, UNetParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Regional loss on every labelled polygon.
    Weak,
    /// Pixel cross-entropy on dominant polygons only.
    Baseline,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(Mode::Weak),
            "baseline" => Ok(Mode::Baseline),
            _ => Err(Error::arg(format!("unknown mode {s:?} (expected weak or baseline)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Weak => "weak",
            Mode::Baseline => "baseline",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations_per_epoch: usize,
    pub epochs: usize,
    pub restart_t0_epochs: usize,
    pub eta_min: f64,
    pub patch_size: usize,
    pub downscale_ratio: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Scenes held out for per-epoch validation by [`Trainer::new`].
    pub val_scenes: usize,
    pub encoder_filters: [usize; 4],
    pub dominance_threshold: f64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 0.001,
            momentum: 0.9,
            weight_decay: 0.01,
            batch_size: 8,
            iterations_per_epoch: 100,
            epochs: 50,
            restart_t0_epochs: 50,
            eta_min: 0.0,
            patch_size: 64,
            downscale_ratio: 1,
            seed: 0,
            mode: Mode::Weak,
            val_scenes: 2,
            encoder_filters: UNetConfig::default().encoder_filters,
            dominance_threshold: DEFAULT_DOMINANCE_THRESHOLD,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::arg(msg)) };
        check(self.lr_max > 0.0 && self.lr_max.is_finite(), "lr must be positive")?;
        check((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)")?;
        check(self.weight_decay >= 0.0, "weight decay must be non-negative")?;
        check(self.batch_size > 0, "batch size must be positive")?;
        check(self.iterations_per_epoch > 0, "iterations per epoch must be positive")?;
        check(self.restart_t0_epochs > 0, "t0 must be positive")?;
        check(
            (0.0..=self.lr_max).contains(&self.eta_min),
            "eta_min must be in [0, lr]",
        )?;
        check(
            self.patch_size >= 16 && self.patch_size.is_multiple_of(16),
            "patch size must be a positive multiple of 16",
        )?;
        check(self.downscale_ratio > 0, "downscale ratio must be positive")?;
        check(
            self.dominance_threshold > 0.0 && self.dominance_threshold < 1.0,
            "dominance threshold must be in (0, 1)",
        )?;
        self.unet_config().validate()
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            encoder_filters: self.encoder_filters,
            seed: self.seed,
            ..UNetConfig::default()
        }
    }
}

/// Cosine annealing within one cycle of length `t0`; `t` wraps at every
/// restart, and a positive exact multiple of `t0` is the end of a cycle.
pub fn cosine_lr(t: f64, t0: f64, lr_max: f64, eta_min: f64) -> f64 {
    let mut tc = t.rem_euclid(t0);
    if tc == 0.0 && t > 0.0 {
        tc = t0;
    }
    eta_min + 0.5 * (lr_max - eta_min) * (1.0 + (std::f64::consts::PI * tc / t0).cos())
}

/// Learning rate used for iteration `iter` of epoch `epoch`; a new cycle
/// starts at `lr_max`.
pub fn scheduled_lr(cfg: &TrainConfig, epoch: usize, iter: usize) -> f64 {
    let t0 = cfg.restart_t0_epochs as f64;
    let t = epoch as f64 + iter as f64 / cfg.iterations_per_epoch as f64;
    cosine_lr(t - t0 * (t / t0).floor(), t0, cfg.lr_max, cfg.eta_min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn zeros_like(params: &[Parameter]) -> Self {
        OptimizerState {
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }
}

/// One SGDM update from the gradients stored in `params`.
///
/// Weight decay is added to the gradient: `g' = g + wd*w`, `v = m*v + g'`,
/// `w -= lr*v`.
pub fn sgdm_step(
    params: &mut [Parameter],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != state.velocity.len() {
        return Err(Error::arg("sgdm_step: parameter count mismatch"));
    }
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        if p.value.shape() != v.shape() || p.grad.shape() != v.shape() {
            return Err(Error::arg("sgdm_step: shape mismatch"));
        }
        let grad = p.grad.data();
        for ((w, vel), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(grad) {
            *vel = momentum * *vel + (g + weight_decay * *w);
            *w -= lr * *vel;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's first iteration.
    pub lr: f64,
    pub mean_loss: f64,
    pub validation: Option<MetricsReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// One row per iteration: `iteration,epoch,lr,loss`.
    pub fn to_csv(&self, iterations_per_epoch: usize) -> String {
        let mut s = String::from("iteration,epoch,lr,loss\n");
        for (i, (l, lr)) in self.losses.iter().zip(&self.lrs).enumerate() {
            writeln!(s, "{i},{},{lr},{l}", i / iterations_per_epoch).unwrap();
        }
        s
    }

    /// One row per epoch with validation metrics where available.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from(
            "epoch,lr,mean_loss,val_accuracy,val_polygons,r2_water,r2_young,r2_fyi,r2_myi\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for e in &self.epochs {
            write!(s, "{},{},{}", e.epoch, e.lr, e.mean_loss).unwrap();
            match &e.validation {
                Some(v) => {
                    write!(s, ",{},{}", opt(v.pixel_accuracy), v.n_poly).unwrap();
                    for r in v.r2 {
                        write!(s, ",{}", opt(r)).unwrap();
                    }
                }
                None => s.push_str(",,,,,,"),
            }
            s.push('\n');
        }
        s
    }
}

/// Serialisable position of the sampling generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Seeded partition of scene indices into (train, validation).
pub fn split_indices(n: usize, n_val: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = n_val.min(n.saturating_sub(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut sub_rng(seed, 1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Downscales and normalises a raw scene the way the model expects.
pub fn prepare_scene(s: &Scene, downscale: usize, stats: &ChannelStats) -> Result<Scene> {
    Ok(normalize(&downscale_scene(s, downscale)?, stats))
}

fn batch_input(patches: &[Patch<'_>]) -> Result<Tensor> {
    let p = patches[0].size;
    let mut data = Vec::with_capacity(patches.len() * NUM_CHANNELS * p * p);
    for patch in patches {
        data.extend(patch.channels.iter().map(|&v| v as f64));
    }
    Tensor::new(&[patches.len(), NUM_CHANNELS, p, p], data)
}

fn crop_labels(map: &PixelLabelMap, origin: (usize, usize), size: usize) -> PixelLabelMap {
    let labels = (0..size)
        .flat_map(|i| {
            let start = (origin.0 + i) * map.width + origin.1;
            map.labels[start..start + size].iter().copied()
        })
        .collect();
    PixelLabelMap {
        height: size,
        width: size,
        labels,
    }
}

/// Resumable training state.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    stats: ChannelStats,
    params: UNetParams,
    opt: OptimizerState,
    rng: ChaCha8Rng,
    epoch: usize,
    history: History,
    train: Vec<Scene>,
    val: Vec<Scene>,
    pixel_labels: Vec<PixelLabelMap>,
}

impl Trainer {
    /// Seeded train/validation split of `dataset`, then fresh parameters.
    pub fn new(dataset: &[Scene], cfg: TrainConfig) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::arg("training dataset is empty"));
        }
        let (t, v) = split_indices(dataset.len(), cfg.val_scenes, cfg.seed);
        let train: Vec<Scene> = t.iter().map(|&i| dataset[i].clone()).collect();
        let val: Vec<Scene> = v.iter().map(|&i| dataset[i].clone()).collect();
        Self::with_split(&train, &val, cfg)
    }

    /// Explicit train and validation scenes, fresh parameters.
    pub fn with_split(train: &[Scene], val: &[Scene], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::arg("training dataset is empty"));
        }
        let down: Vec<Scene> = train
            .iter()
            .map(|s| downscale_scene(s, cfg.downscale_ratio))
            .collect::<Result<_>>()?;
        let stats = compute_stats(&down.iter().collect::<Vec<_>>())?;
        let params = init_params(&cfg.unet_config())?;
        let opt = OptimizerState::zeros_like(&params.params);
        Self::assemble(cfg, stats, params, opt, sub_rng(0, 0), 0, History::default(), train, val, true)
    }

    /// Continues the run saved in `ck` on the same data it was started with.
    pub fn resume(ck: Checkpoint, dataset: &[Scene]) -> Result<Self> {
        let (t, v) = split_indices(dataset.len(), ck.config.val_scenes, ck.config.seed);
        let train: Vec<Scene> = t.iter().map(|&i| dataset[i].clone()).collect();
        let val: Vec<Scene> = v.iter().map(|&i| dataset[i].clone()).collect();
        Self::resume_with_split(ck, &train, &val)
    }

    pub fn resume_with_split(ck: Checkpoint, train: &[Scene], val: &[Scene]) -> Result<Self> {
        ck.config.validate()?;
        let rng = ck.rng.restore();
        Self::assemble(ck.config, ck.stats, ck.params, ck.opt, rng, ck.epoch, ck.history, train, val, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: TrainConfig,
        stats: ChannelStats,
        params: UNetParams,
        opt: OptimizerState,
        rng: ChaCha8Rng,
        epoch: usize,
        history: History,
        train: &[Scene],
        val: &[Scene],
        fresh: bool,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::arg("training dataset is empty"));
        }
        let prep = |s: &Scene| prepare_scene(s, cfg.downscale_ratio, &stats);
        let train: Vec<Scene> = train.iter().map(prep).collect::<Result<_>>()?;
        let val: Vec<Scene> = val.iter().map(prep).collect::<Result<_>>()?;
        for s in train.iter().chain(&val) {
            if s.height < cfg.patch_size || s.width < cfg.patch_size {
                return Err(Error::arg(format!(
                    "scene {} is {}x{} after downscaling, smaller than patch {}",
                    s.meta.scene_id, s.height, s.width, cfg.patch_size
                )));
            }
        }
        let pixel_labels = match cfg.mode {
            Mode::Baseline => train
                .iter()
                .map(|s| derive_pixel_labels(&s.chart, &s.polygon_map, s.height, s.width, cfg.dominance_threshold))
                .collect::<Result<_>>()?,
            Mode::Weak => Vec::new(),
        };
        let usable = match cfg.mode {
            Mode::Weak => train.iter().any(|s| {
                s.polygon_map.iter().zip(&s.land_mask).any(|(&p, &l)| {
                    l == 0 && p >= 0 && matches!(s.chart.get(p as u32), Some(ChartEntry::Coded(_)))
                })
            }),
            Mode::Baseline => pixel_labels.iter().zip(&train).any(|(m, s)| {
                m.labels.iter().zip(&s.land_mask).any(|(&c, &l)| c != IGNORE_LABEL && l == 0)
            }),
        };
        if !usable {
            return Err(Error::arg(format!(
                "dataset has no usable polygon for {} training",
                cfg.mode
            )));
        }
        let rng = if fresh { sub_rng(cfg.seed, 2) } else { rng };
        Ok(Trainer {
            cfg,
            stats,
            params,
            opt,
            rng,
            epoch,
            history,
            train,
            val,
            pixel_labels,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &UNetParams {
        &self.params
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Changes the total epoch budget, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.cfg.epochs = epochs;
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let cfg = &self.cfg;
        let samplers: Vec<PatchSampler<'_>> = self
            .train
            .iter()
            .map(|s| PatchSampler::new(s, cfg.patch_size))
            .collect::<Result<_>>()?;
        let mut loss_sum = 0.0;
        let first_lr = scheduled_lr(cfg, self.epoch, 0);
        for iter in 0..cfg.iterations_per_epoch {
            let lr = scheduled_lr(cfg, self.epoch, iter);
            let mut picks = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let si = self.rng.random_range(0..self.train.len());
                picks.push((si, samplers[si].sample_origin(&mut self.rng)));
            }
            let patches: Vec<Patch<'_>> = picks
                .iter()
                .map(|&(si, o)| crop(&self.train[si], o, cfg.patch_size))
                .collect();
            let loss = step_loss(
                &mut self.params,
                &patches,
                &picks,
                cfg,
                &self.pixel_labels,
            )?;
            sgdm_step(&mut self.params.params, &mut self.opt, lr, cfg.momentum, cfg.weight_decay)?;
            log::debug!("epoch {} iter {iter} lr {lr:.3e} loss {loss:.6}", self.epoch);
            self.history.losses.push(loss);
            self.history.lrs.push(lr);
            loss_sum += loss;
        }
        let validation = if self.val.is_empty() {
            None
        } else {
            Some(evaluate(&self.params, &self.val, cfg.patch_size)?)
        };
        let mean_loss = loss_sum / cfg.iterations_per_epoch as f64;
        log::info!(
            "epoch {} mean loss {mean_loss:.5} val accuracy {:?}",
            self.epoch,
            validation.as_ref().and_then(|v| v.pixel_accuracy)
        );
        self.history.epochs.push(EpochRecord {
            epoch: self.epoch,
            lr: first_lr,
            mean_loss,
            validation,
        });
        self.epoch += 1;
        Ok(())
    }

    /// Snapshot of everything needed to continue bit-exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            stats: self.stats.clone(),
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
            history: self.history.clone(),
            params: self.params.clone(),
            opt: self.opt.clone(),
        }
    }

    pub fn into_parts(self) -> (UNetParams, History) {
        (self.params, self.history)
    }
}

/// Forward, loss and backward for one batch; leaves gradients in `params`.
fn step_loss(
    params: &mut UNetParams,
    patches: &[Patch<'_>],
    picks: &[(usize, (usize, usize))],
    cfg: &TrainConfig,
    pixel_labels: &[PixelLabelMap],
) -> Result<f64> {
    params.zero_grad();
    let mut tape = Tape::new();
    let x = tape.constant(batch_input(patches)?);
    let fwd = forward(&mut tape, params, x)?;
    let loss = match cfg.mode {
        Mode::Weak => {
            let images: Vec<ImageRegions<'_>> = patches
                .iter()
                .map(|p| ImageRegions {
                    polygon_map: &p.polygon_map,
                    land_mask: &p.land_mask,
                    chart: p.chart,
                })
                .collect();
            Some(batch_region_loss_on_tape(&mut tape, fwd.probs, &images)?.0)
        }
        Mode::Baseline => {
            let labels: Vec<PixelLabelMap> = picks
                .iter()
                .map(|&(si, o)| crop_labels(&pixel_labels[si], o, cfg.patch_size))
                .collect();
            let label_refs: Vec<&PixelLabelMap> = labels.iter().collect();
            let land: Vec<&[u8]> = patches.iter().map(|p| p.land_mask.as_slice()).collect();
            pixel_ce_masked_on_tape(&mut tape, fwd.probs, &label_refs, &land)?
        }
    };
    let Some(loss) = loss else { return Ok(0.0) };
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let mut refs: Vec<&mut Parameter> = params.params.iter_mut().collect();
    grads.accumulate_into(&mut refs, &fwd.param_vars);
    Ok(value)
}

/// Trains from scratch with a seeded validation split.
pub fn train(dataset: &[Scene], cfg: TrainConfig) -> Result<(UNetParams, History)> {
    let mut t = Trainer::new(dataset, cfg)?;
    t.run()?;
    Ok(t.into_parts())
}

/// Class value written for land pixels in predicted maps.
pub const NO_CLASS: u8 = 255;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FLOEBRG1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub stats: ChannelStats,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub history: History,
    pub params: UNetParams,
    pub opt: OptimizerState,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    config: TrainConfig,
    unet: UNetConfig,
    shapes: Vec<(String, Vec<usize>)>,
    stats: ChannelStats,
    epoch: usize,
    rng: RngState,
    history: History,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            unet: self.params.config.clone(),
            shapes: self.params.config.layout(),
            stats: self.stats.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&manifest)
            .map_err(|e| Error::format(format!("checkpoint manifest: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + 16 * self.params.count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.params.iter().map(|p| &p.value).chain(&self.opt.velocity) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format("not a floeberg checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| Error::format("checkpoint truncated in manifest"))?;
        let m: CheckpointManifest = serde_json::from_slice(body)
            .map_err(|e| Error::format(format!("checkpoint manifest: {e}")))?;
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                m.version
            )));
        }
        m.unet.validate()?;
        if m.shapes != m.unet.layout() {
            return Err(Error::format("checkpoint shapes do not match the model layout"));
        }
        let mut params = UNetParams::zeros(&m.unet)?;
        let n = params.count();
        let data = &bytes[16 + len..];
        if data.len() != 2 * n * 8 {
            return Err(Error::format(format!(
                "checkpoint holds {} bytes of tensors, expected {}",
                data.len(),
                2 * n * 8
            )));
        }
        let mut values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for p in &mut params.params {
            for v in p.value.data_mut() {
                *v = values.next().expect("length checked");
            }
        }
        let mut opt = OptimizerState::zeros_like(&params.params);
        for t in &mut opt.velocity {
            for v in t.data_mut() {
                *v = values.next().expect("length checked");
            }
        }
        Ok(Checkpoint {
            config: m.config,
            stats: m.stats,
            epoch: m.epoch,
            rng: m.rng,
            history: m.history,
            params,
            opt,
        })
    }

    pub fn prepare_scene(&self, s: &Scene) -> Result<Scene> {
        prepare_scene(s, self.config.downscale_ratio, &self.stats)
    }

    /// Per-pixel class map of a raw scene at the model's working resolution,
    /// with land set to `NO_CLASS`. Returns the map and its height and width.
    pub fn predict_classes(&self, s: &Scene) -> Result<(Vec<u8>, usize, usize)> {
        let scene = self.prepare_scene(s)?;
        let probs = predict_scene(&self.params, &scene, self.config.patch_size)?;
        let mut classes = argmax_map(&probs)?;
        for (c, &l) in classes.iter_mut().zip(&scene.land_mask) {
            if l == 1 {
                *c = NO_CLASS;
            }
        }
        Ok((classes, scene.height, scene.width))
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ck.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{gen_scene, SynthConfig};

    fn tiny_cfg(mode: Mode) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            iterations_per_epoch: 3,
            epochs: 2,
            restart_t0_epochs: 2,
            patch_size: 32,
            encoder_filters: [2, 4, 4, 4],
            val_scenes: 1,
            seed: 3,
            mode,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> Vec<Scene> {
        let cfg = SynthConfig {
            height: 48,
            width: 48,
            ..SynthConfig::preset("separable-v1").unwrap()
        };
        (0..3).map(|s| gen_scene(&cfg, s).unwrap()).collect()
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.0, 50.0, 0.001, 0.0), 0.001);
        assert!((cosine_lr(25.0, 50.0, 0.001, 0.0) - 0.0005).abs() < 1e-18);
        assert_eq!(cosine_lr(50.0, 50.0, 0.001, 1e-5), 1e-5);
        assert_eq!(cosine_lr(100.0, 50.0, 0.001, 1e-5), 1e-5);
    }

    #[test]
    fn schedule_golden_two_cycles() {
        let cfg = TrainConfig {
            lr_max: 1.0,
            iterations_per_epoch: 2,
            restart_t0_epochs: 2,
            ..TrainConfig::default()
        };
        // (1 + cos(pi x / 2)) / 2 for x = 0, 0.5, 1, 1.5
        let cycle = [1.0, 0.8535533905932737, 0.5, 0.14644660940672624];
        let mut got = Vec::new();
        for e in 0..4 {
            for i in 0..2 {
                got.push(scheduled_lr(&cfg, e, i));
            }
        }
        for (g, w) in got.iter().zip(cycle.iter().chain(&cycle)) {
            assert!((g - w).abs() < 1e-15, "{got:?}");
        }
    }

    fn param(w: f64, g: f64) -> Vec<Parameter> {
        let mut p = Parameter::new(Tensor::scalar(w));
        p.grad = Tensor::scalar(g);
        vec![p]
    }

    #[test]
    fn sgdm_fixture() {
        let mut p = param(1.0, 0.1);
        let mut st = OptimizerState::zeros_like(&p);
        sgdm_step(&mut p, &mut st, 0.001, 0.9, 0.01).unwrap();
        assert!((st.velocity[0].item() - 0.11).abs() < 1e-15);
        assert!((p[0].value.item() - 0.99989).abs() < 1e-15);
    }

    #[test]
    fn sgdm_zero_gradient_no_decay_is_identity() {
        let mut p = param(0.37, 0.0);
        let mut st = OptimizerState::zeros_like(&p);
        sgdm_step(&mut p, &mut st, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(p[0].value.item(), 0.37);
    }

    #[test]
    fn sgdm_momentum_decay() {
        let mut p = param(5.0, 0.0);
        let mut st = OptimizerState {
            velocity: vec![Tensor::scalar(1.0)],
        };
        // The velocity decays before it is applied: steps of 0.9 then 0.81.
        sgdm_step(&mut p, &mut st, 1.0, 0.9, 0.0).unwrap();
        let d1 = 5.0 - p[0].value.item();
        sgdm_step(&mut p, &mut st, 1.0, 0.9, 0.0).unwrap();
        let d2 = 5.0 - d1 - p[0].value.item();
        assert!((d1 - 0.9).abs() < 1e-15);
        assert!((d2 - 0.81).abs() < 1e-14);
        assert!((d2 / d1 - 0.9).abs() < 1e-14);
    }

    #[test]
    fn sgdm_shape_mismatch() {
        let mut p = param(1.0, 0.1);
        let mut st = OptimizerState {
            velocity: vec![Tensor::zeros(&[2])],
        };
        assert!(sgdm_step(&mut p, &mut st, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg(Mode::Weak) };
        let (p, h) = train(&tiny_data(), cfg.clone()).unwrap();
        assert_eq!(p, init_params(&cfg.unet_config()).unwrap());
        assert!(h.losses.is_empty() && h.epochs.is_empty());
    }

    #[test]
    fn identical_seeds_identical_losses() {
        let data = tiny_data();
        let (_, a) = train(&data, tiny_cfg(Mode::Weak)).unwrap();
        let (_, b) = train(&data, tiny_cfg(Mode::Weak)).unwrap();
        assert_eq!(a.losses.len(), 6);
        let bits = |h: &History| h.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.epochs.len(), 2);
        assert!(a.epochs[0].validation.is_some());
    }

    #[test]
    fn modes_differ_only_in_loss() {
        let data = tiny_data();
        let (_, w) = train(&data, tiny_cfg(Mode::Weak)).unwrap();
        let (_, b) = train(&data, tiny_cfg(Mode::Baseline)).unwrap();
        assert_ne!(w.losses, b.losses);
        assert_eq!(w.lrs, b.lrs);
    }

    #[test]
    fn resume_matches_straight_run() {
        let data = tiny_data();
        let cfg = TrainConfig { epochs: 3, ..tiny_cfg(Mode::Weak) };
        let mut straight = Trainer::new(&data, cfg.clone()).unwrap();
        straight.run().unwrap();

        let mut first = Trainer::new(&data, cfg).unwrap();
        first.run_epoch().unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        let mut resumed = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), &data).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.params(), straight.params());
        assert_eq!(resumed.history(), straight.history());
        assert_eq!(
            resumed.checkpoint().to_bytes().unwrap(),
            straight.checkpoint().to_bytes().unwrap()
        );
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let t = Trainer::new(&tiny_data(), tiny_cfg(Mode::Baseline)).unwrap();
        let ck = t.checkpoint();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"FLOEBRG1");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..12]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let ck = Trainer::new(&tiny_data(), tiny_cfg(Mode::Weak)).unwrap().checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[16..16 + len].to_vec()).unwrap();
        let edited = json.replacen("\"encoder_filters\":[2,4,4,4]", "\"encoder_filters\":[2,4,4,8]", 2);
        assert_ne!(edited, json);
        let mut out = b"FLOEBRG1".to_vec();
        out.extend_from_slice(&(edited.len() as u64).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[16 + len..]);
        assert!(Checkpoint::from_bytes(&out).is_err());
    }

    #[test]
    fn unusable_dataset_is_rejected() {
        let mut data = tiny_data();
        for s in &mut data {
            let mut chart = crate::icechart::ChartTable::new();
            for (id, _) in s.chart.iter() {
                chart.insert(id, ChartEntry::Excluded).unwrap();
            }
            s.chart = chart;
        }
        let err = Trainer::new(&data, tiny_cfg(Mode::Weak)).unwrap_err();
        assert!(err.to_string().contains("no usable polygon"));
        assert!(Trainer::new(&[], tiny_cfg(Mode::Weak)).is_err());
    }

    #[test]
    fn matched_polygon_has_no_gradient() {
        use crate::icechart::{ChartTable, EggCode, StageEntry};
        let target = [0.1, 0.2, 0.3, 0.4];
        let egg = EggCode::new(
            9,
            [4, 3, 2],
            [StageEntry::MULTIYEAR_ICE, StageEntry::FIRST_YEAR_ICE, StageEntry::YOUNG_ICE],
        )
        .unwrap();
        assert_eq!(egg.to_label().conc(), target);

        // Random features, but a head that ignores them and emits ln(target),
        // so every pixel predicts the label exactly.
        let cfg = TrainConfig { weight_decay: 0.0, ..tiny_cfg(Mode::Weak) };
        let mut params = init_params(&cfg.unet_config()).unwrap();
        let n = params.params.len();
        params.params[n - 2].value = Tensor::zeros(params.params[n - 2].value.shape());
        params.params[n - 1].value = Tensor::new(&[4], target.map(f64::ln).to_vec()).unwrap();

        let s = &tiny_data()[0];
        let mut chart = ChartTable::new();
        for (id, _) in s.chart.iter() {
            chart.insert(id, ChartEntry::Coded(egg)).unwrap();
        }
        let patch = Patch { chart: &chart, ..crop(s, (0, 0), 32) };
        let loss = step_loss(&mut params, &[patch], &[(0, (0, 0))], &cfg, &[]).unwrap();
        assert!(loss > 0.0);
        let norm: f64 = params
            .params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-8, "gradient norm {norm}");
    }
}
