//! SGD with momentum and weight decay, the teacher-forced training loop and
//! checkpoint files.

mod checkpoint;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{CaptionSample, FeatureRecord, FeatureSet, Vocabulary};
use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::models::{Arch, CaptionModel, ModelConfig, TeacherBatch};
use crate::numerics::{Scalar, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl OptimizerConfig {
    /// Defaults: lr 0.1, momentum 0.9, weight decay 1e-4, batch 32, and 10
    /// epochs for the specimen decoder or 25 for the top-down one.
    pub fn for_arch(arch: Arch, seed: u64) -> Self {
        OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: match arch {
                Arch::Specimen => 10,
                Arch::TopDownLstmGru => 25,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay {} must be finite and >= 0",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One momentum-SGD update from the gradients stored on `params`:
/// `g' = g + wd·w; v = m·v + g'; w = w - lr·v`.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, velocities: &mut ParamSet<T>, opt: &OptimizerConfig) -> Result<()> {
    let (lr, m, wd) = (T::from_f64(opt.lr), T::from_f64(opt.momentum), T::from_f64(opt.weight_decay));
    for (name, w) in params.iter_mut() {
        let g = w.grad().ok_or_else(|| Error::MissingGradient(name.clone()))?.to_vec();
        let v = velocities.get_mut(name)?;
        if v.shape() != w.shape() {
            return Err(Error::shape("sgd_step velocity", v.shape(), w.shape()));
        }
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
            let decayed = gi + wd * *wi;
            *vi = m * *vi + decayed;
            *wi = *wi - lr * *vi;
        }
    }
    Ok(())
}

/// Training pairs: every reference caption of every image, in file order.
#[derive(Clone, Debug)]
pub struct TrainingSet<'a> {
    pairs: Vec<(&'a FeatureRecord, &'a [usize])>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(features: &'a FeatureSet, samples: &'a [CaptionSample]) -> Result<Self> {
        let mut pairs = Vec::new();
        for s in samples {
            let record = features.find(s.image_id).ok_or_else(|| {
                Error::InvalidArgument(format!("no features for captioned image {}", s.image_id))
            })?;
            pairs.extend(s.references.iter().map(|r| (record, r.as_slice())));
        }
        if pairs.is_empty() {
            return Err(Error::Empty("training set"));
        }
        Ok(TrainingSet { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `latest.ckpt`, `model.ckpt` and `loss.csv` go; nothing is
    /// written when unset.
    pub checkpoint_dir: Option<PathBuf>,
    /// Also keep `epoch-NNNN.ckpt` every this many epochs (0 = never).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    /// Mean minibatch loss of each epoch run by this call.
    pub epoch_losses: Vec<f64>,
}

/// Loss and parameter gradients of one teacher-forced batch.
pub fn loss_and_gradients(
    model: &CaptionModel,
    params: &ParamSet<f32>,
    batch: &TeacherBatch<f32>,
) -> Result<(f32, Vec<(String, Vec<f32>)>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let loss = model.loss_vars(&mut tape, &p, batch)?;
    tape.backward(loss)?;
    Ok((tape.value(loss)[0], p.gradients(&tape)))
}

fn check_compatible(config: &ModelConfig, vocab: &Vocabulary, data: &TrainingSet<'_>) -> Result<()> {
    if config.vocab_size != vocab.len() {
        return Err(Error::ConfigMismatch(format!(
            "model vocabulary size {} but vocabulary has {} tokens",
            config.vocab_size,
            vocab.len()
        )));
    }
    let (record, _) = data.pairs[0];
    if record.global.len() != config.feature_dim || record.regions.len() != config.region_count * config.region_dim {
        return Err(Error::ConfigMismatch(format!(
            "features of image {} do not match D_f={}, R={}, D_a={}",
            record.image_id, config.feature_dim, config.region_count, config.region_dim
        )));
    }
    Ok(())
}

/// Runs epochs `resume.epoch + 1 ..= opt.epochs` (or `1 ..= opt.epochs`
/// from a fresh seeded initialization).
///
/// A resumed run keeps the checkpoint's model, optimizer settings and RNG
/// state; only the epoch budget comes from `opt`.
pub fn train(
    data: &TrainingSet<'_>,
    vocab: &Vocabulary,
    config: &ModelConfig,
    opt: &OptimizerConfig,
    options: &TrainOptions,
    resume: Option<Checkpoint>,
) -> Result<TrainReport> {
    opt.validate()?;
    let model = CaptionModel::new(config.clone())?;
    check_compatible(config, vocab, data)?;

    let mut ckpt = match resume {
        Some(c) => {
            if &c.config != config {
                return Err(Error::ConfigMismatch("checkpoint was trained with a different model configuration".into()));
            }
            if &c.vocab != vocab {
                return Err(Error::ConfigMismatch("checkpoint was trained with a different vocabulary".into()));
            }
            Checkpoint {
                optimizer: OptimizerConfig {
                    epochs: opt.epochs,
                    ..c.optimizer
                },
                ..c
            }
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
            let params: ParamSet<f32> = model.init_params(&mut rng);
            Checkpoint {
                config: config.clone(),
                optimizer: opt.clone(),
                vocab: vocab.clone(),
                velocities: params.zeros_like(),
                params,
                epoch: 0,
                rng: RngState::capture(&rng),
            }
        }
    };
    let opt = ckpt.optimizer.clone();
    let mut rng = ckpt.rng.restore();

    let mut log = match &options.checkpoint_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("loss.csv");
            let fresh = ckpt.epoch == 0 || !path.exists();
            let mut file = OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(path)?;
            if fresh {
                writeln!(file, "epoch,step,loss")?;
            }
            Some(file)
        }
        None => None,
    };

    let batches_per_epoch = data.len().div_ceil(opt.batch_size);
    let mut step = ckpt.epoch * batches_per_epoch;
    let mut epoch_losses = Vec::new();
    for epoch in ckpt.epoch + 1..=opt.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(opt.batch_size) {
            step += 1;
            let records: Vec<&FeatureRecord> = chunk.iter().map(|&i| data.pairs[i].0).collect();
            let captions: Vec<&[usize]> = chunk.iter().map(|&i| data.pairs[i].1).collect();
            let batch = TeacherBatch::new(&records, &captions, config)?;
            let (loss, grads) = loss_and_gradients(&model, &ckpt.params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            ckpt.params.zero_grad();
            ckpt.params.accumulate_grads(grads)?;
            sgd_step(&mut ckpt.params, &mut ckpt.velocities, &opt)?;
            total += loss as f64;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{epoch},{step},{loss}")?;
            }
        }
        ckpt.params.zero_grad();
        ckpt.epoch = epoch;
        ckpt.rng = RngState::capture(&rng);
        let mean = total / batches_per_epoch as f64;
        epoch_losses.push(mean);
        info!("epoch {epoch}/{}: mean loss {mean:.6}", opt.epochs);

        if let Some(dir) = &options.checkpoint_dir {
            ckpt.save(dir.join("latest.ckpt"))?;
            if options.checkpoint_every > 0 && epoch % options.checkpoint_every == 0 {
                ckpt.save(dir.join(format!("epoch-{epoch:04}.ckpt")))?;
            }
        }
    }
    if let Some(dir) = &options.checkpoint_dir {
        ckpt.save(dir.join("model.ckpt"))?;
    }
    Ok(TrainReport {
        checkpoint: ckpt,
        epoch_losses,
    })
}

/// Path of the final checkpoint written by [`train`].
pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("model.ckpt")
}

#[cfg(test)]
mod tests;
