//! The two captioning decoders behind one step interface.
//!
//! * `specimen`: image feature → trainable FC layer → initial hidden state
//!   of a 1- or 2-layer LSTM stack fed with word embeddings; the top
//!   layer's hidden state goes to the classifier.
//! * `topdown-lstmgru`: an attention LSTM→GRU pair and a language
//!   LSTM→GRU pair. The attention pair reads `[previous language output;
//!   word embedding; mean region vector]`, its output queries additive
//!   attention over the regions, the language pair reads `[attended
//!   context; attention output]`, and the classifier reads the
//!   concatenated attention and language outputs.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureRecord, END, PAD, START};
use crate::error::{Error, Result};
use crate::layers::{
    Attention, Bound, Classifier, Embedding, GruCell, Linear, LstmCell, LstmState, ParamSet,
};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Decoder architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "specimen")]
    Specimen,
    #[serde(rename = "topdown-lstmgru")]
    TopDownLstmGru,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Specimen => "specimen",
            Arch::TopDownLstmGru => "topdown-lstmgru",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "specimen" => Ok(Arch::Specimen),
            "topdown-lstmgru" => Ok(Arch::TopDownLstmGru),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture `{other}` (expected specimen or topdown-lstmgru)"
            ))),
        }
    }
}

pub const DEFAULT_EMBED_SIZE: usize = 256;
pub const DEFAULT_HIDDEN_SIZE: usize = 256;
pub const DEFAULT_MAX_CAPTION_LEN: usize = 30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    pub embed_size: usize,
    pub hidden_size: usize,
    /// Stacked LSTM layers; only the specimen decoder uses more than one.
    pub lstm_layers: usize,
    pub attention_size: usize,
    pub feature_dim: usize,
    pub region_dim: usize,
    pub region_count: usize,
    pub max_caption_len: usize,
}

impl ModelConfig {
    /// Default sizes for a dataset with the given vocabulary and feature shapes.
    pub fn new(arch: Arch, vocab_size: usize, feature_dim: usize, region_count: usize, region_dim: usize) -> Self {
        ModelConfig {
            arch,
            vocab_size,
            embed_size: DEFAULT_EMBED_SIZE,
            hidden_size: DEFAULT_HIDDEN_SIZE,
            lstm_layers: 1,
            attention_size: DEFAULT_HIDDEN_SIZE,
            feature_dim,
            region_dim,
            region_count,
            max_caption_len: DEFAULT_MAX_CAPTION_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("embed_size", self.embed_size),
            ("hidden_size", self.hidden_size),
            ("attention_size", self.attention_size),
            ("feature_dim", self.feature_dim),
            ("region_dim", self.region_dim),
            ("region_count", self.region_count),
            ("max_caption_len", self.max_caption_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.vocab_size <= END {
            return Err(Error::InvalidArgument(format!(
                "vocab_size {} leaves no room for the reserved tokens",
                self.vocab_size
            )));
        }
        if !(1..=2).contains(&self.lstm_layers) {
            return Err(Error::InvalidArgument(format!(
                "lstm_layers must be 1 or 2, got {}",
                self.lstm_layers
            )));
        }
        if self.arch == Arch::TopDownLstmGru && self.lstm_layers != 1 {
            return Err(Error::InvalidArgument(
                "topdown-lstmgru has a fixed layout; lstm_layers must be 1".into(),
            ));
        }
        Ok(())
    }
}

/// Recurrent state of either decoder, generic over the handle type so the
/// same layout serves tape values (`Var`) and standalone tensors.
///
/// The top-down variant also carries the per-image attention inputs so a
/// beam reorder moves them together with the hidden states.
#[derive(Clone, Debug, PartialEq)]
pub enum DecoderState<H> {
    Specimen {
        layers: Vec<LstmState<H>>,
    },
    TopDown {
        attention: LstmState<H>,
        attention_out: H,
        language: LstmState<H>,
        language_out: H,
        regions: H,
        projected: H,
        pooled: H,
    },
}

impl<H> DecoderState<H> {
    /// Applies `f` to every handle in a fixed order.
    pub fn try_map<U>(&self, mut f: impl FnMut(&H) -> Result<U>) -> Result<DecoderState<U>> {
        let lstm = |s: &LstmState<H>, f: &mut dyn FnMut(&H) -> Result<U>| -> Result<LstmState<U>> {
            Ok(LstmState { h: f(&s.h)?, c: f(&s.c)? })
        };
        Ok(match self {
            DecoderState::Specimen { layers } => DecoderState::Specimen {
                layers: layers.iter().map(|s| lstm(s, &mut f)).collect::<Result<_>>()?,
            },
            DecoderState::TopDown {
                attention,
                attention_out,
                language,
                language_out,
                regions,
                projected,
                pooled,
            } => DecoderState::TopDown {
                attention: lstm(attention, &mut f)?,
                attention_out: f(attention_out)?,
                language: lstm(language, &mut f)?,
                language_out: f(language_out)?,
                regions: f(regions)?,
                projected: f(projected)?,
                pooled: f(pooled)?,
            },
        })
    }
}

impl<T: Scalar> DecoderState<Tensor<T>> {
    /// Keeps the batch rows named by `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        self.try_map(|t| t.select_rows(indices))
    }

    pub fn batch_size(&self) -> usize {
        match self {
            DecoderState::Specimen { layers } => layers[0].h.rows(),
            DecoderState::TopDown { attention, .. } => attention.h.rows(),
        }
    }
}

/// Per-step result of [`CaptionModel::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T: Scalar> {
    pub logprobs: Tensor<T>,
    pub next_state: DecoderState<Tensor<T>>,
    pub attention_weights: Option<Tensor<T>>,
}

/// Batched image features: global `[B×D_f]` and regions `[B×R×D_a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch<T: Scalar> {
    pub global: Tensor<T>,
    pub regions: Tensor<T>,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn from_records(records: &[&FeatureRecord], config: &ModelConfig) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("feature batch"));
        }
        let (df, r, da) = (config.feature_dim, config.region_count, config.region_dim);
        let mut global = Vec::with_capacity(records.len() * df);
        let mut regions = Vec::with_capacity(records.len() * r * da);
        for rec in records {
            if rec.global.len() != df || rec.regions.len() != r * da {
                return Err(Error::ConfigMismatch(format!(
                    "image {} has features {}+{} but the model expects D_f={df}, R={r}, D_a={da}",
                    rec.image_id,
                    rec.global.len(),
                    rec.regions.len()
                )));
            }
            global.extend(rec.global.iter().map(|&x| T::from_f64(x as f64)));
            regions.extend(rec.regions.iter().map(|&x| T::from_f64(x as f64)));
        }
        Ok(FeatureBatch {
            global: Tensor::new(vec![records.len(), df], global)?,
            regions: Tensor::new(vec![records.len(), r, da], regions)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.global.rows()
    }

    /// Mean of the region vectors of each image, `[B×D_a]`.
    pub fn pooled_regions(&self) -> Tensor<T> {
        let s = self.regions.shape();
        let (b, r, d) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(&[b, d]);
        let scale = T::from_f64(1.0 / r as f64);
        for i in 0..b {
            let rows = self.regions.row(i);
            for (j, acc) in out.data_mut()[i * d..(i + 1) * d].iter_mut().enumerate() {
                let total = (0..r).fold(T::zero(), |s, k| s + rows[k * d + j]);
                *acc = total * scale;
            }
        }
        out
    }
}

/// A teacher-forced minibatch laid out time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherBatch<T: Scalar> {
    pub features: FeatureBatch<T>,
    /// `inputs[t][b]`: token fed at step `t` (`<start>`, words, then `<pad>`).
    pub inputs: Vec<Vec<usize>>,
    /// `targets[t][b]`: next ground-truth token, `None` past `<end>`.
    pub targets: Vec<Vec<Option<usize>>>,
}

impl<T: Scalar> TeacherBatch<T> {
    /// Frames each caption as `<start> w… <end>`; captions whose framed
    /// target sequence exceeds `max_caption_len` lose their trailing words.
    pub fn new(records: &[&FeatureRecord], captions: &[&[usize]], config: &ModelConfig) -> Result<Self> {
        if records.len() != captions.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature records for {} captions",
                records.len(),
                captions.len()
            )));
        }
        let features = FeatureBatch::from_records(records, config)?;
        let keep = config.max_caption_len - 1;
        let words: Vec<&[usize]> = captions
            .iter()
            .zip(records)
            .map(|(c, r)| {
                if c.len() > keep {
                    warn!(
                        "caption for image {} has {} tokens; truncating to {keep}",
                        r.image_id,
                        c.len()
                    );
                    &c[..keep]
                } else {
                    c
                }
            })
            .collect();
        for &id in words.iter().flat_map(|w| w.iter()) {
            if id >= config.vocab_size {
                return Err(Error::UnknownToken {
                    id,
                    vocab_size: config.vocab_size,
                });
            }
        }
        let steps = words.iter().map(|w| w.len() + 1).max().unwrap_or(1);
        let inputs = (0..steps)
            .map(|t| {
                words
                    .iter()
                    .map(|w| match t {
                        0 => START,
                        t if t <= w.len() => w[t - 1],
                        _ => PAD,
                    })
                    .collect()
            })
            .collect();
        let targets = (0..steps)
            .map(|t| {
                words
                    .iter()
                    .map(|w| match t.cmp(&w.len()) {
                        std::cmp::Ordering::Less => Some(w[t]),
                        std::cmp::Ordering::Equal => Some(END),
                        std::cmp::Ordering::Greater => None,
                    })
                    .collect()
            })
            .collect();
        Ok(TeacherBatch {
            features,
            inputs,
            targets,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layers {
    Specimen {
        image_fc: Linear,
        lstms: Vec<LstmCell>,
    },
    TopDown {
        attention_lstm: LstmCell,
        attention_gru: GruCell,
        attention: Attention,
        language_lstm: LstmCell,
        language_gru: GruCell,
    },
}

/// A decoder architecture instantiated for one [`ModelConfig`].
///
/// The model holds no weights; every method takes a [`ParamSet`] (or its
/// tape binding), so one model serves training, checking and decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionModel {
    config: ModelConfig,
    embed: Embedding,
    layers: Layers,
    classifier: Classifier,
}

/// Tape handles produced by one decoder step.
pub struct StepVars {
    pub logprobs: Var,
    pub state: DecoderState<Var>,
    pub attention_weights: Option<Var>,
}

impl CaptionModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (e, h) = (config.embed_size, config.hidden_size);
        let embed = Embedding::new("embed", config.vocab_size, e);
        let (layers, classifier_in) = match config.arch {
            Arch::Specimen => {
                let lstms = (0..config.lstm_layers)
                    .map(|l| LstmCell::new(format!("lstm{l}"), if l == 0 { e } else { h }, h))
                    .collect();
                (
                    Layers::Specimen {
                        image_fc: Linear::new("image_fc", config.feature_dim, h),
                        lstms,
                    },
                    h,
                )
            }
            Arch::TopDownLstmGru => {
                let da = config.region_dim;
                (
                    Layers::TopDown {
                        attention_lstm: LstmCell::new("att_lstm", h + e + da, h),
                        attention_gru: GruCell::new("att_gru", h, h),
                        attention: Attention::new("attention", da, h, config.attention_size),
                        language_lstm: LstmCell::new("lang_lstm", da + h, h),
                        language_gru: GruCell::new("lang_gru", h, h),
                    },
                    2 * h,
                )
            }
        };
        let classifier = Classifier::new("classifier", classifier_in, config.vocab_size)?;
        Ok(CaptionModel {
            config,
            embed,
            layers,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embed
    }

    /// Fresh parameters drawn from `rng`.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut params = ParamSet::new();
        self.embed.init(&mut params, rng);
        match &self.layers {
            Layers::Specimen { image_fc, lstms } => {
                image_fc.init(&mut params, rng);
                for l in lstms {
                    l.init(&mut params, rng);
                }
            }
            Layers::TopDown {
                attention_lstm,
                attention_gru,
                attention,
                language_lstm,
                language_gru,
            } => {
                attention_lstm.init(&mut params, rng);
                attention_gru.init(&mut params, rng);
                attention.init(&mut params, rng);
                language_lstm.init(&mut params, rng);
                language_gru.init(&mut params, rng);
            }
        }
        self.classifier.init(&mut params, rng);
        params
    }

    /// Checks that `params` has exactly the tensors this model needs.
    pub fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        let expected: ParamSet<T> = self.init_params(&mut rand::rngs::mock::StepRng::new(0, 0));
        let mismatch = expected.len() != params.len()
            || expected
                .iter()
                .any(|(name, t)| params.get(name).map(|p| p.shape() != t.shape()).unwrap_or(true));
        if mismatch {
            return Err(Error::ConfigMismatch(format!(
                "parameter set does not match a {} model with this configuration",
                self.config.arch
            )));
        }
        Ok(())
    }

    fn zeros<T: Scalar>(tape: &mut Tape<'_, T>, rows: usize, cols: usize) -> Var {
        tape.constant(Tensor::zeros(&[rows, cols]))
    }

    /// Initial decoder state on the tape.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &Bound, features: &FeatureBatch<T>) -> Result<DecoderState<Var>> {
        let b = features.batch_size();
        let h = self.config.hidden_size;
        let (gs, rs) = (features.global.shape(), features.regions.shape());
        if gs[1] != self.config.feature_dim || rs[1] != self.config.region_count || rs[2] != self.config.region_dim {
            return Err(Error::ConfigMismatch(format!(
                "features {gs:?}/{rs:?} do not match the model configuration"
            )));
        }
        match &self.layers {
            Layers::Specimen { image_fc, lstms } => {
                let image = tape.constant(features.global.clone());
                let h0 = image_fc.forward(tape, p, image)?;
                let mut layers = vec![LstmState {
                    h: h0,
                    c: Self::zeros(tape, b, h),
                }];
                for _ in 1..lstms.len() {
                    layers.push(LstmState {
                        h: Self::zeros(tape, b, h),
                        c: Self::zeros(tape, b, h),
                    });
                }
                Ok(DecoderState::Specimen { layers })
            }
            Layers::TopDown { attention, .. } => {
                let regions = tape.constant(features.regions.clone());
                let projected = attention.project(tape, p, regions)?;
                let pooled = tape.constant(features.pooled_regions());
                let mut zero = || Self::zeros(tape, b, h);
                Ok(DecoderState::TopDown {
                    attention: LstmState { h: zero(), c: zero() },
                    attention_out: zero(),
                    language: LstmState { h: zero(), c: zero() },
                    language_out: zero(),
                    regions,
                    projected,
                    pooled,
                })
            }
        }
    }

    /// One decoder step on the tape.
    pub fn step_vars<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        token_ids: &[usize],
        state: &DecoderState<Var>,
    ) -> Result<StepVars> {
        let words = self.embed.lookup(tape, p, token_ids)?;
        match (&self.layers, state) {
            (Layers::Specimen { lstms, .. }, DecoderState::Specimen { layers }) => {
                if layers.len() != lstms.len() {
                    return Err(Error::ConfigMismatch(format!(
                        "state has {} LSTM layers, model has {}",
                        layers.len(),
                        lstms.len()
                    )));
                }
                let mut x = words;
                let mut next = Vec::with_capacity(lstms.len());
                for (cell, s) in lstms.iter().zip(layers) {
                    let out = cell.forward(tape, p, x, s)?;
                    x = out.h;
                    next.push(out);
                }
                Ok(StepVars {
                    logprobs: self.classifier.classify(tape, p, x)?,
                    state: DecoderState::Specimen { layers: next },
                    attention_weights: None,
                })
            }
            (
                Layers::TopDown {
                    attention_lstm,
                    attention_gru,
                    attention,
                    language_lstm,
                    language_gru,
                },
                DecoderState::TopDown {
                    attention: att_state,
                    attention_out,
                    language: lang_state,
                    language_out,
                    regions,
                    projected,
                    pooled,
                },
            ) => {
                let att_in = tape.concat(&[*language_out, words, *pooled], 1)?;
                let att = attention_lstm.forward(tape, p, att_in, att_state)?;
                let att_out = attention_gru.forward(tape, p, att.h, *attention_out)?;

                let (weights, context) = attention.attend(tape, p, *regions, *projected, att_out)?;

                let lang_in = tape.concat(&[context, att_out], 1)?;
                let lang = language_lstm.forward(tape, p, lang_in, lang_state)?;
                let lang_out = language_gru.forward(tape, p, lang.h, *language_out)?;

                let stacked = tape.concat(&[att_out, lang_out], 1)?;
                Ok(StepVars {
                    logprobs: self.classifier.classify(tape, p, stacked)?,
                    state: DecoderState::TopDown {
                        attention: att,
                        attention_out: att_out,
                        language: lang,
                        language_out: lang_out,
                        regions: *regions,
                        projected: *projected,
                        pooled: *pooled,
                    },
                    attention_weights: Some(weights),
                })
            }
            _ => Err(Error::ConfigMismatch(
                "decoder state belongs to a different architecture".into(),
            )),
        }
    }

    /// Mean cross-entropy over every non-pad target of a teacher-forced batch.
    pub fn loss_vars<T: Scalar>(&self, tape: &mut Tape<'_, T>, p: &Bound, batch: &TeacherBatch<T>) -> Result<Var> {
        let mut state = self.encode(tape, p, &batch.features)?;
        let count = batch.targets.iter().flatten().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Empty("caption targets"));
        }
        let mut total: Option<Var> = None;
        for (inputs, targets) in batch.inputs.iter().zip(&batch.targets) {
            let out = self.step_vars(tape, p, inputs, &state)?;
            if targets.iter().any(Option::is_some) {
                let nll = tape.nll(out.logprobs, targets)?;
                total = Some(match total {
                    Some(t) => tape.add(t, nll)?,
                    None => nll,
                });
            }
            state = out.state;
        }
        let total = total.expect("count > 0 implies at least one step");
        Ok(tape.scale(total, 1.0 / count as f64))
    }

    /// Teacher-forced loss value.
    pub fn forward_teacher_forced<T: Scalar>(&self, params: &ParamSet<T>, batch: &TeacherBatch<T>) -> Result<T> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let loss = self.loss_vars(&mut tape, &p, batch)?;
        Ok(tape.value(loss)[0])
    }

    /// Initial decoder state as standalone tensors.
    pub fn init_state<T: Scalar>(&self, params: &ParamSet<T>, features: &FeatureBatch<T>) -> Result<DecoderState<Tensor<T>>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let state = self.encode(&mut tape, &p, features)?;
        state.try_map(|&v| Ok(tape.tensor(v)))
    }

    /// Advances every row of `state` by one token.
    pub fn step<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        token_ids: &[usize],
        state: &DecoderState<Tensor<T>>,
    ) -> Result<StepOutput<T>> {
        if token_ids.len() != state.batch_size() {
            return Err(Error::InvalidArgument(format!(
                "{} token ids for a state of batch size {}",
                token_ids.len(),
                state.batch_size()
            )));
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let vars = state.try_map(|t| Ok(tape.constant(t.clone())))?;
        let out = self.step_vars(&mut tape, &p, token_ids, &vars)?;
        Ok(StepOutput {
            logprobs: tape.tensor(out.logprobs),
            next_state: out.state.try_map(|&v| Ok(tape.tensor(v)))?,
            attention_weights: out.attention_weights.map(|v| tape.tensor(v)),
        })
    }

    /// Image embedding used by the neighbor study: the trained FC output for
    /// the specimen decoder, the raw global feature otherwise.
    pub fn image_embedding<T: Scalar>(&self, params: &ParamSet<T>, features: &FeatureBatch<T>) -> Result<Tensor<T>> {
        match &self.layers {
            Layers::Specimen { image_fc, .. } => {
                let mut tape = Tape::new();
                let p = params.bind(&mut tape, false);
                let image = tape.constant(features.global.clone());
                let v = image_fc.forward(&mut tape, &p, image)?;
                Ok(tape.tensor(v))
            }
            Layers::TopDown { .. } => Ok(features.global.clone()),
        }
    }
}
