use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{CuboidNet, NetworkConfig};
use crate::tensor::Tape;
use crate::train::{adam_step, l2_loss, lr_at_epoch, Checkpoint, OptimizerState, Progress, TrainConfig};
use crate::video::{PatchPair, PatchSampler, VideoCuboid};

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,epoch,batch,lr,loss";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:e},{:e}", self.step, self.epoch, self.batch, self.lr, self.loss)
    }
}

pub fn loss_trace_csv(records: &[StepRecord]) -> String {
    let mut s = format!("{}\n", StepRecord::CSV_HEADER);
    for r in records {
        writeln!(s, "{}", r.csv_row()).unwrap();
    }
    s
}

/// Mini-batch trainer over a fixed list of high-resolution clips.
///
/// Each epoch draws `patches_per_clip` crops per clip from a generator
/// seeded by `(seed, epoch)` and shuffles them, so training can resume
/// mid-epoch from a checkpoint.
pub struct Trainer {
    pub net: CuboidNet,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub progress: Progress,
    clips: Vec<VideoCuboid>,
    plan: Option<(usize, Vec<PatchPair>)>,
    grad_peak: Option<(String, f64)>,
}

impl Trainer {
    pub fn new(network: NetworkConfig, config: TrainConfig, clips: Vec<VideoCuboid>) -> Result<Self> {
        let net = CuboidNet::new(network, config.seed)?;
        Self::with_state(net, config, OptimizerState::default(), Progress::default(), clips)
    }

    pub fn resume(ck: Checkpoint, clips: Vec<VideoCuboid>) -> Result<Self> {
        let config = ck
            .train
            .ok_or_else(|| Error::Config("checkpoint carries no training configuration".into()))?;
        let net = CuboidNet::from_parts(ck.network, ck.params)?;
        Self::with_state(net, config, ck.optimizer.unwrap_or_default(), ck.progress, clips)
    }

    fn with_state(
        net: CuboidNet,
        config: TrainConfig,
        optimizer: OptimizerState,
        progress: Progress,
        clips: Vec<VideoCuboid>,
    ) -> Result<Self> {
        config.validate()?;
        if clips.is_empty() {
            return Err(Error::contract("training needs at least one clip"));
        }
        let f = net.config.spatial_factor;
        if !config.label_extent.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "label_extent {} is not a multiple of the spatial factor {f}",
                config.label_extent
            )));
        }
        for (i, c) in clips.iter().enumerate() {
            let (n, h, w) = c.dims();
            if n < config.label_frames || h < config.label_extent || w < config.label_extent {
                return Err(Error::contract(format!(
                    "clip {i} is {n}x{h}x{w}, smaller than the {}x{e}x{e} label patch",
                    config.label_frames,
                    e = config.label_extent
                )));
            }
        }
        Ok(Self {
            net,
            config,
            optimizer,
            progress,
            clips,
            plan: None,
            grad_peak: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.net.config.clone(),
            train: Some(self.config.clone()),
            progress: self.progress,
            params: self.net.params.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.clips.len() * self.config.patches_per_clip).div_ceil(self.config.batch_size)
    }

    pub fn is_finished(&self) -> bool {
        self.progress.epoch >= self.config.max_epochs
    }

    /// Shuffled patch list of `epoch`.
    pub fn epoch_plan(&self, epoch: usize) -> Result<Vec<PatchPair>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut sampler = PatchSampler::new(rng.random(), self.net.config.spatial_factor);
        let mut pairs = Vec::with_capacity(self.clips.len() * self.config.patches_per_clip);
        for clip in &self.clips {
            for _ in 0..self.config.patches_per_clip {
                pairs.push(sampler.sample(clip, self.config.label_frames, self.config.label_extent)?);
            }
        }
        pairs.shuffle(&mut rng);
        Ok(pairs)
    }

    /// Loss of the current network on one pair, without a gradient.
    pub fn pair_loss(&self, pair: &PatchPair) -> Result<f64> {
        let tape = Tape::inference();
        self.sample_loss(&tape, pair).map(|(_, l)| l)
    }

    fn sample_loss(
        &self,
        tape: &Tape,
        pair: &PatchPair,
    ) -> Result<(Option<BTreeMap<String, Vec<f64>>>, f64)> {
        let (p, out) = self.net.forward(tape, &pair.input_patch)?;
        let max = pair.label_patch.value_max();
        let label = pair.label_patch.clone().map(|x| x / max).to_tensor();
        let loss = l2_loss(tape, &out, &tape.constant(label))?;
        let value = loss.value().item()?;
        if !tape.is_recording() {
            return Ok((None, value));
        }
        let grads = tape.backward(&loss)?;
        Ok((Some(p.gradients(&grads)), value))
    }

    fn describe_peak(&self) -> String {
        match &self.grad_peak {
            Some((name, g)) => format!("largest gradient in the previous step: {name} (|g| = {g:e})"),
            None => "no earlier gradient recorded".into(),
        }
    }

    /// One optimizer step on the next mini-batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let Progress { epoch, batch_in_epoch: batch, step } = self.progress;
        if self.plan.as_ref().map(|p| p.0) != Some(epoch) {
            self.plan = Some((epoch, self.epoch_plan(epoch)?));
        }
        let plan = &self.plan.as_ref().expect("plan").1;
        let bs = self.config.batch_size;
        let samples: Vec<PatchPair> = plan[batch * bs..((batch + 1) * bs).min(plan.len())].to_vec();
        let scale = 1.0 / samples.len() as f64;
        let lr = lr_at_epoch(epoch, &self.config);
        let where_ = |detail: String, peak: String| {
            Error::NonFinite(format!(
                "epoch {epoch} batch {batch} (step {}): {detail}; {peak}",
                step + 1
            ))
        };

        let mut total: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut loss = 0.0;
        for pair in &samples {
            let tape = Tape::new();
            let (grads, l) = self.sample_loss(&tape, pair).map_err(|e| match e {
                Error::NonFinite(m) => where_(m, self.describe_peak()),
                other => other,
            })?;
            loss += l * scale;
            for (name, g) in grads.expect("recording tape") {
                let acc = total.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b * scale);
            }
        }

        let mut peak: Option<(String, f64)> = None;
        let mut sq = 0.0;
        for (name, g) in &total {
            for &x in g {
                sq += x * x;
                let a = if x.is_finite() { x.abs() } else { f64::INFINITY };
                if peak.as_ref().is_none_or(|p| a > p.1) {
                    peak = Some((name.clone(), a));
                }
            }
        }
        if !loss.is_finite() || !sq.is_finite() {
            let (n, g) = peak.unwrap_or_default();
            return Err(where_(
                format!("loss = {loss}"),
                format!("largest gradient: {n} (|g| = {g:e})"),
            ));
        }
        self.grad_peak = peak;
        if let Some(clip) = self.config.grad_clip {
            let norm = sq.sqrt();
            if norm > clip {
                let s = clip / norm;
                total.values_mut().flatten().for_each(|x| *x *= s);
            }
        }
        adam_step(&mut self.net.params, &total, &mut self.optimizer, lr, &self.config.adam())?;

        let mut next = Progress {
            epoch,
            batch_in_epoch: batch + 1,
            step: step + 1,
        };
        if next.batch_in_epoch == self.batches_per_epoch() {
            next.epoch += 1;
            next.batch_in_epoch = 0;
        }
        self.progress = next;
        Ok(StepRecord {
            step: step + 1,
            epoch,
            batch,
            lr,
            loss,
        })
    }

    /// Trains until `max_epochs`, calling `on_step` after every batch.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord, &Trainer) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        while !self.is_finished() {
            let r = self.step()?;
            on_step(&r, self)?;
            out.push(r);
        }
        Ok(out)
    }
}
