//! Single-model training: epoch loop over shuffled, flip-augmented slice
//! batches, periodic validation, and lowest-validation-loss checkpointing.
//!
//! The `Trainer` engine is also the building block of the competitive
//! scheme: it exposes "run n epochs" and "validate" separately so stages
//! can interleave training with winner selection.

use crate::data::{augment_flip, normalize_slice, VolumeCase};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossMode};
use crate::network::{Checkpoint, Model, NetworkConfig};
use crate::optim::{zero_grads, Adam};
use crate::rng::{
    RngStream, STREAM_AUGMENT, STREAM_DROPOUT, STREAM_INIT, STREAM_SHUFFLE,
};

pub const DEFAULT_BATCH_SIZE: usize = 2;
pub const DEFAULT_LEARNING_RATE: f32 = 1e-3;
pub const DEFAULT_EPOCHS: usize = 180;
pub const DEFAULT_VALIDATE_EVERY: usize = 30;
pub const DEFAULT_FLIP_PROBABILITY: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    pub validate_every: usize,
    pub loss_mode: LossMode,
    pub aux_weight: f32,
    pub ohnem_floor: usize,
    pub seed: u64,
    pub flip_probability: f32,
}

impl TrainConfig {
    pub fn defaults() -> TrainConfig {
        TrainConfig {
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            validate_every: DEFAULT_VALIDATE_EVERY,
            loss_mode: LossMode::Ohnem,
            aux_weight: crate::loss::DEFAULT_AUX_WEIGHT,
            ohnem_floor: crate::loss::DEFAULT_OHNEM_FLOOR,
            seed: 0,
            flip_probability: DEFAULT_FLIP_PROBABILITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "train: learning_rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.validate_every == 0 {
            return Err(Error::Config("train: epochs and validate_every must be >= 1".into()));
        }
        if self.epochs % self.validate_every != 0 {
            return Err(Error::Config(format!(
                "train: epochs {} not divisible by validate_every {}",
                self.epochs, self.validate_every
            )));
        }
        if !self.aux_weight.is_finite() || self.aux_weight < 0.0 {
            return Err(Error::Config(format!(
                "train: aux_weight {} must be finite and >= 0",
                self.aux_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "train: flip_probability {} must be in [0, 1]",
                self.flip_probability
            )));
        }
        Ok(())
    }
}

/// In-memory training corpus: per-slice normalized images and labels,
/// all sharing one in-plane shape.
#[derive(Clone, Debug)]
pub struct SliceSet {
    pub height: usize,
    pub width: usize,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<Vec<u8>>,
}

impl SliceSet {
    /// Slices every volume along z and normalizes each plane.
    pub fn from_volumes<'a, I>(volumes: I) -> Result<SliceSet>
    where
        I: IntoIterator<Item = &'a VolumeCase>,
    {
        let mut out: Option<SliceSet> = None;
        for v in volumes {
            v.validate()?;
            let label = v.label.as_ref().ok_or_else(|| {
                Error::Config(format!("volume {} has no label; cannot train on it", v.id))
            })?;
            let (w, h) = (v.dims[0], v.dims[1]);
            let set = out.get_or_insert_with(|| SliceSet {
                height: h,
                width: w,
                images: Vec::new(),
                labels: Vec::new(),
            });
            if set.height != h || set.width != w {
                return Err(Error::Shape(format!(
                    "volume {} slices are {w}x{h}, earlier volumes were {}x{}",
                    v.id, set.width, set.height
                )));
            }
            let plane = w * h;
            for k in 0..v.num_slices() {
                set.images.push(normalize_slice(v.image_slice(k)));
                set.labels.push(label[k * plane..(k + 1) * plane].to_vec());
            }
        }
        out.ok_or_else(|| Error::Config("no volumes given".into()))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationRecord {
    pub epoch: usize,
    /// Mean training loss over the epochs since the previous validation.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<ValidationRecord>,
    /// Mean training loss of every epoch, in order.
    pub epoch_train_loss: Vec<f64>,
}

pub fn history_to_csv(history: &[ValidationRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.epoch, r.train_loss, r.val_loss));
    }
    out
}

/// One model with its optimizer state and private RNG streams. Stream
/// seeds may differ from the parameter-init seed so that competitors can
/// share an initialization while following different data orders.
pub struct Trainer {
    pub model: Model,
    adam: Adam,
    shuffle: RngStream,
    augment: RngStream,
    dropout: RngStream,
    epoch: usize,
}

impl Trainer {
    pub fn new(net: &NetworkConfig, init_seed: u64, stream_seed: u64) -> Result<Trainer> {
        let mut init = RngStream::new(init_seed, STREAM_INIT);
        let model = Model::build(net, &mut init)?;
        let adam = Adam::new(&model.graph, model.num_param_tensors());
        Ok(Trainer {
            model,
            adam,
            shuffle: RngStream::new(stream_seed, STREAM_SHUFFLE),
            augment: RngStream::new(stream_seed, STREAM_AUGMENT),
            dropout: RngStream::new(stream_seed, STREAM_DROPOUT),
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn check_set(&self, set: &SliceSet, what: &str) -> Result<()> {
        if set.is_empty() {
            return Err(Error::Config(format!("{what} set is empty")));
        }
        let (h, w) = self.model.config.input_size;
        if (set.height, set.width) != (h, w) {
            return Err(Error::Shape(format!(
                "{what} slices are {}x{}, network wants {h}x{w}",
                set.height, set.width
            )));
        }
        Ok(())
    }

    /// Trains for `epochs` epochs; returns the mean training loss of each.
    pub fn run_epochs(&mut self, set: &SliceSet, cfg: &TrainConfig, epochs: usize) -> Result<Vec<f64>> {
        self.check_set(set, "training")?;
        let plane = set.height * set.width;
        let mut means = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            self.epoch += 1;
            let mut order: Vec<usize> = (0..set.len()).collect();
            self.shuffle.shuffle(&mut order);
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let n = chunk.len();
                let mut batch = Vec::with_capacity(n * plane);
                let mut labels = Vec::with_capacity(n * plane);
                for &i in chunk {
                    batch.extend_from_slice(&set.images[i]);
                    labels.extend_from_slice(&set.labels[i]);
                    let start = batch.len() - plane;
                    augment_flip(
                        &mut batch[start..],
                        &mut labels[start..],
                        set.height,
                        set.width,
                        &mut self.augment,
                        cfg.flip_probability,
                    )?;
                }
                let loss = self
                    .step(&batch, &labels, n, cfg)
                    .map_err(|e| Error::Numeric(format!("epoch {}, batch {b}: {e}", self.epoch)))?;
                sum += loss * n as f64;
                count += n;
            }
            means.push(sum / count as f64);
        }
        Ok(means)
    }

    fn step(&mut self, batch: &[f32], labels: &[u8], n: usize, cfg: &TrainConfig) -> Result<f64> {
        self.model.reset();
        let np = self.model.num_param_tensors();
        zero_grads(&mut self.model.graph, np);
        let fwd = self.model.forward(batch, n, true, &mut self.dropout)?;
        let loss = total_loss(
            &mut self.model.graph,
            fwd.main,
            fwd.aux,
            labels,
            cfg.loss_mode,
            cfg.aux_weight,
            cfg.ohnem_floor,
        )?;
        let value = self.model.graph.value64(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss is {value}")));
        }
        self.model.graph.backward(loss)?;
        self.adam.step(&mut self.model.graph, cfg.learning_rate)?;
        Ok(value)
    }

    /// Mean loss over the full validation set: no augmentation, no dropout.
    pub fn validate(&mut self, set: &SliceSet, cfg: &TrainConfig) -> Result<f64> {
        self.check_set(set, "validation")?;
        let plane = set.height * set.width;
        let mut sum = 0.0f64;
        let mut count = 0usize;
        let order: Vec<usize> = (0..set.len()).collect();
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            let mut batch = Vec::with_capacity(n * plane);
            let mut labels = Vec::with_capacity(n * plane);
            for &i in chunk {
                batch.extend_from_slice(&set.images[i]);
                labels.extend_from_slice(&set.labels[i]);
            }
            self.model.reset();
            let mut unused = RngStream::new(0, STREAM_DROPOUT);
            let fwd = self.model.forward(&batch, n, false, &mut unused)?;
            let loss = total_loss(
                &mut self.model.graph,
                fwd.main,
                fwd.aux,
                &labels,
                cfg.loss_mode,
                cfg.aux_weight,
                cfg.ohnem_floor,
            )?;
            let value = self.model.graph.value64(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("validation loss is {value}")));
            }
            sum += value * n as f64;
            count += n;
        }
        self.model.reset();
        Ok(sum / count as f64)
    }

    pub fn snapshot(&self, val_loss: f64) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.epoch as u64, val_loss as f32)
    }

    /// Copies parameters and optimizer state from another trainer.
    pub fn adopt(&mut self, other: &Trainer) {
        self.model.copy_params_from(&other.model);
        self.adam = other.adam.clone();
    }

    pub fn param_hash(&self) -> u64 {
        self.model.param_hash()
    }
}

/// Full training run: every `validate_every` epochs the validation loss is
/// recorded and the lowest one (earliest on ties) defines the returned
/// checkpoint.
pub fn train(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    train_set: &SliceSet,
    val_set: &SliceSet,
) -> Result<TrainOutcome> {
    net.validate()?;
    cfg.validate()?;
    let mut t = Trainer::new(net, cfg.seed, cfg.seed)?;
    t.check_set(train_set, "training")?;
    t.check_set(val_set, "validation")?;

    let mut history = Vec::new();
    let mut epoch_train_loss = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    while t.epoch() < cfg.epochs {
        let window = t.run_epochs(train_set, cfg, cfg.validate_every)?;
        let train_loss = window.iter().sum::<f64>() / window.len() as f64;
        epoch_train_loss.extend_from_slice(&window);
        let val_loss = t.validate(val_set, cfg)?;
        history.push(ValidationRecord { epoch: t.epoch(), train_loss, val_loss });
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, t.snapshot(val_loss)));
        }
    }
    let (_, checkpoint) = best.expect("at least one validation ran");
    Ok(TrainOutcome { checkpoint, history, epoch_train_loss })
}
