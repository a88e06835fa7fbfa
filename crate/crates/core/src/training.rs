//! Joint training of all decoders: summed per-decoder L1 loss, one backward
//! pass, Adam with step-wise learning-rate halving.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WbError};
use crate::model::{DecoderId, NetConfig, TrainProgress, WbNet};
use crate::synthdata::{augment, sample_patches, PatchSet, TrainExample};
use crate::tensor::{Adam, Graph, Reduction, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_halving_epochs: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub patch: usize,
    pub patches_per_image: usize,
    pub seed: u64,
    pub loss_reduction: Reduction,
    /// Random dihedral transform per patch.
    pub augment: bool,
    /// Save a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            lr_halving_epochs: 25,
            batch_size: 32,
            iterations: 165_000,
            patch: 128,
            patches_per_image: 4,
            seed: 0,
            loss_reduction: Reduction::Mean,
            augment: true,
            checkpoint_every: 0,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-size network and schedule.
    pub fn full() -> Self {
        TrainConfig::default()
    }

    /// Small network and patches that train in minutes on one core.
    pub fn desk() -> Self {
        TrainConfig {
            lr0: 1e-3,
            // With 16 scenes an epoch is only 8 iterations.
            lr_halving_epochs: 125,
            batch_size: 8,
            iterations: 1_000,
            patch: 64,
            net: NetConfig {
                base_channels: 8,
                ..NetConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(WbError::Config(format!("unknown profile `{other}` (expected desk or full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(WbError::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        for (name, v) in [
            ("lr_halving_epochs", self.lr_halving_epochs),
            ("batch_size", self.batch_size),
            ("patch", self.patch),
            ("patches_per_image", self.patches_per_image),
        ] {
            if v == 0 {
                return Err(WbError::Config(format!("{name} must be positive")));
            }
        }
        let m = self.net.required_multiple();
        if !self.patch.is_multiple_of(m) {
            return Err(WbError::Config(format!("patch {} is not a multiple of {m}", self.patch)));
        }
        Ok(())
    }
}

/// `lr0 * 0.5^floor(epoch / lr_halving_epochs)`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    let halvings = (epoch / cfg.lr_halving_epochs.max(1)).min(1074) as i32;
    cfg.lr0 * 0.5f64.powi(halvings)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Iteration count after the step, starting at 1.
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub per_decoder: BTreeMap<DecoderId, f64>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: WbNet,
    pub iteration: usize,
    pub epoch: usize,
    pub loss_history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(net: WbNet) -> Self {
        TrainState {
            net,
            iteration: 0,
            epoch: 0,
            loss_history: Vec::new(),
        }
    }

    /// Weights plus optimizer moments and position.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.net.save_checkpoint(self.progress(), path)
    }

    /// Resumes from a checkpoint. Loss history is not stored and starts empty.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let (net, progress) = WbNet::load_checkpoint(path)?;
        let p = progress.unwrap_or_default();
        Ok(TrainState {
            net,
            iteration: p.iteration as usize,
            epoch: p.epoch as usize,
            loss_history: Vec::new(),
        })
    }

    pub fn progress(&self) -> TrainProgress {
        TrainProgress {
            iteration: self.iteration as u64,
            epoch: self.epoch as u64,
        }
    }

    /// `iteration,lr,loss_total,loss_<id>...` with one column per decoder.
    pub fn loss_csv(&self) -> String {
        let ids = self.net.decoder_ids();
        let mut s = String::from("iteration,lr,loss_total");
        for id in ids {
            let _ = write!(s, ",loss_{id}");
        }
        s.push('\n');
        for r in &self.loss_history {
            let _ = write!(s, "{},{:e},{:.8}", r.iteration, r.lr, r.total);
            for id in ids {
                let _ = write!(s, ",{:.8}", r.per_decoder.get(id).copied().unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }
}

/// Stacks a batch of patch sets into `[B, 3, H, W]` inputs and per-decoder
/// targets.
pub fn stack_batch(batch: &[PatchSet], ids: &[DecoderId]) -> Result<(Tensor4, BTreeMap<DecoderId, Tensor4>)> {
    if batch.is_empty() {
        return Err(WbError::Config("empty batch".into()));
    }
    let inputs: Vec<Tensor4> = batch.iter().map(|p| p.input.to_tensor()).collect();
    let mut targets = BTreeMap::new();
    for &id in ids {
        let parts = batch
            .iter()
            .map(|p| {
                p.targets
                    .get(&id)
                    .map(|t| t.to_tensor())
                    .ok_or_else(|| WbError::MissingGroundTruth(format!("patch has no `{id}` target")))
            })
            .collect::<Result<Vec<_>>>()?;
        targets.insert(id, Tensor4::stack(&parts)?);
    }
    Ok((Tensor4::stack(&inputs)?, targets))
}

/// One optimizer step on `batch`. On a non-finite loss the state is left
/// untouched and the error carries the per-decoder losses.
pub fn train_step(state: &mut TrainState, batch: &[PatchSet], cfg: &TrainConfig) -> Result<LossRecord> {
    let ids = state.net.decoder_ids().to_vec();
    let (x, targets) = stack_batch(batch, &ids)?;
    let lr = lr_schedule(cfg, state.epoch);

    let mut g = Graph::new();
    let pv = state.net.bind(&mut g, true);
    let xv = g.constant(x);
    let outs = state.net.forward_all_graph(&mut g, &pv, xv)?;
    let mut losses = Vec::with_capacity(outs.len());
    let mut per_decoder = BTreeMap::new();
    for (id, y) in outs {
        let t = g.constant(targets[&id].clone());
        let l = g.l1_loss(y, t, cfg.loss_reduction)?;
        per_decoder.insert(id, g.scalar(l).expect("loss is scalar"));
        losses.push(l);
    }
    let total = g.sum_all(&losses)?;
    let total_value = g.scalar(total).expect("loss is scalar");
    if !total_value.is_finite() {
        return Err(WbError::NonFiniteLoss {
            iteration: state.iteration,
            lr,
            per_decoder: per_decoder.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        });
    }

    let mut grads = g.backward(total)?;
    let grads: Vec<Vec<f32>> = pv
        .iter()
        .zip(state.net.params())
        .map(|(&v, p)| grads.take(v).map(Tensor4::into_data).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    drop(g);
    Adam::default().step(state.net.params_mut(), &grads, lr)?;

    state.iteration += 1;
    let record = LossRecord {
        iteration: state.iteration,
        lr,
        total: total_value,
        per_decoder,
    };
    state.loss_history.push(record.clone());
    Ok(record)
}

/// Endless, seeded stream of (optionally augmented) training patches. Each
/// epoch visits every (image, patch slot) pair once in shuffled order, so
/// one mini-batch mixes images and WB settings.
pub struct PatchStream<'a> {
    examples: &'a [TrainExample],
    patch: usize,
    augment: bool,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    slots_per_image: usize,
}

impl<'a> PatchStream<'a> {
    pub fn new(examples: &'a [TrainExample], cfg: &TrainConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(WbError::Config("dataset is empty".into()));
        }
        for ex in examples {
            let (w, h) = ex.dims();
            if cfg.patch > w || cfg.patch > h {
                return Err(WbError::OutOfRange {
                    what: "patch size",
                    detail: format!("{} for image {} of {w}x{h}", cfg.patch, ex.id),
                });
            }
        }
        let mut s = PatchStream {
            examples,
            patch: cfg.patch,
            augment: cfg.augment,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0005_eed0_f9a7_c4e5),
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            slots_per_image: cfg.patches_per_image,
        };
        s.reshuffle();
        Ok(s)
    }

    pub fn epoch_len(&self) -> usize {
        self.examples.len() * self.slots_per_image
    }

    /// Epoch of the next patch to be drawn.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.epoch_len()).map(|i| i / self.slots_per_image).collect();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_patch(&mut self) -> Result<PatchSet> {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let ex = &self.examples[self.order[self.pos]];
        self.pos += 1;
        let set = sample_patches(ex, self.patch, 1, &mut self.rng)?.pop().expect("one patch");
        if self.augment {
            augment(&set, &mut self.rng)
        } else {
            Ok(set)
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Vec<PatchSet>> {
        (0..size).map(|_| self.next_patch()).collect()
    }
}

/// Trains a freshly initialized network for `cfg.iterations` steps.
pub fn fit(dataset: &[TrainExample], cfg: &TrainConfig) -> Result<TrainState> {
    let net = WbNet::build(cfg.net.clone(), cfg.seed)?;
    fit_from(TrainState::new(net), dataset, cfg, |_| Ok(()))
}

/// Continues `state` until `cfg.iterations` total steps. The patch stream is
/// replayed up to the state's position, so resuming from a checkpoint yields
/// the same batches an uninterrupted run would have seen. `on_checkpoint`
/// runs every `cfg.checkpoint_every` steps.
pub fn fit_from(
    mut state: TrainState,
    dataset: &[TrainExample],
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    if state.net.config() != &cfg.net {
        return Err(WbError::Config("network config differs from the training config".into()));
    }
    let mut stream = PatchStream::new(dataset, cfg)?;
    for _ in 0..state.iteration * cfg.batch_size {
        stream.next_patch()?;
    }
    while state.iteration < cfg.iterations {
        state.epoch = stream.epoch();
        let batch = stream.next_batch(cfg.batch_size)?;
        train_step(&mut state, &batch, cfg)?;
        if cfg.checkpoint_every > 0 && state.iteration.is_multiple_of(cfg.checkpoint_every) {
            on_checkpoint(&state)?;
        }
    }
    state.epoch = stream.epoch();
    Ok(state)
}

/// Trailing moving average of the total loss with the given window.
pub fn smoothed_losses(history: &[LossRecord], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(history.len());
    let mut acc = 0.0;
    for (i, r) in history.iter().enumerate() {
        acc += r.total;
        if i >= window {
            acc -= history[i - window].total;
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}
