//! Greedy and beam-search caption generation.
//!
//! Scores are raw sums of per-step log-probabilities accumulated in f64.
//! `<pad>`, `<start>` and `<unk>` are never generated. Equal scores are
//! ordered by token sequence, where content tokens rank by id and `<end>`
//! ranks after every content token; with uniform outputs this makes the
//! decoders prefer the lowest-id word and keep going.

use std::cmp::Ordering;

use crate::data::{FeatureRecord, END, PAD, START, UNK};
use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::models::{CaptionModel, DecoderState, FeatureBatch};
use crate::numerics::{Scalar, Tensor};

/// A partial or complete caption during beam search.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis<T: Scalar = f32> {
    /// Generated ids, without the leading `<start>`.
    pub tokens: Vec<usize>,
    pub logprob_sum: f64,
    /// Decoder state after consuming `tokens` (batch of one).
    pub state: DecoderState<Tensor<T>>,
    pub finished: bool,
}

/// A decoded caption and its score.
#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    pub tokens: Vec<usize>,
    pub logprob_sum: f64,
}

/// Whether the decoders may emit `id`.
pub fn is_generable(id: usize) -> bool {
    id != PAD && id != START && id != UNK
}

fn tie_rank(id: usize, vocab_size: usize) -> usize {
    if id == END {
        vocab_size
    } else {
        id
    }
}

fn compare_tokens(a: &[usize], b: &[usize], vocab_size: usize) -> Ordering {
    a.iter()
        .map(|&t| tie_rank(t, vocab_size))
        .cmp(b.iter().map(|&t| tie_rank(t, vocab_size)))
}

/// Best-first order: higher score, then the tie-breaking token order.
fn rank(a: (f64, &[usize]), b: (f64, &[usize]), vocab_size: usize) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| compare_tokens(a.1, b.1, vocab_size))
}

fn initial_state<T: Scalar>(
    model: &CaptionModel,
    params: &ParamSet<T>,
    record: &FeatureRecord,
) -> Result<DecoderState<Tensor<T>>> {
    let features = FeatureBatch::from_records(&[record], model.config())?;
    model.init_state(params, &features)
}

/// Picks the best generable token at every step until `<end>` or the
/// maximum caption length.
pub fn greedy_decode<T: Scalar>(
    model: &CaptionModel,
    params: &ParamSet<T>,
    record: &FeatureRecord,
) -> Result<Caption> {
    let vocab = model.config().vocab_size;
    let max_len = model.config().max_caption_len;
    let mut state = initial_state(model, params, record)?;
    let mut tokens = Vec::new();
    let mut total = 0.0f64;
    let mut last = START;
    while tokens.len() < max_len {
        let out = model.step(params, &[last], &state)?;
        let row = out.logprobs.row(0);
        let (best, score) = (0..vocab)
            .filter(|&id| is_generable(id))
            .map(|id| (id, total + row[id].to_f64()))
            .min_by(|a, b| rank((a.1, &[a.0]), (b.1, &[b.0]), vocab))
            .expect("vocabulary has generable tokens");
        tokens.push(best);
        total = score;
        state = out.next_state;
        last = best;
        if best == END {
            break;
        }
    }
    Ok(Caption {
        tokens,
        logprob_sum: total,
    })
}

/// Tensors of a state in the order `try_map` visits them.
fn flatten<T: Scalar>(state: &DecoderState<Tensor<T>>) -> Vec<&Tensor<T>> {
    let mut out = Vec::new();
    match state {
        DecoderState::Specimen { layers } => {
            for l in layers {
                out.push(&l.h);
                out.push(&l.c);
            }
        }
        DecoderState::TopDown {
            attention,
            attention_out,
            language,
            language_out,
            regions,
            projected,
            pooled,
        } => {
            out.extend([&attention.h, &attention.c, attention_out]);
            out.extend([&language.h, &language.c, language_out]);
            out.extend([regions, projected, pooled]);
        }
    }
    out
}

/// Stacks batch-of-one states into one batched state.
fn stack_states<T: Scalar>(states: &[&DecoderState<Tensor<T>>]) -> Result<DecoderState<Tensor<T>>> {
    let flat: Vec<Vec<&Tensor<T>>> = states.iter().map(|s| flatten(s)).collect();
    let mut slot = 0;
    states[0].try_map(|_| {
        let parts: Vec<&Tensor<T>> = flat.iter().map(|f| f[slot]).collect();
        slot += 1;
        Tensor::cat_rows(&parts)
    })
}

/// Beam search returning every completed hypothesis, best first.
///
/// At each step all live hypotheses are expanded over every generable
/// token. Expansions that end with `<end>` or reach the maximum length and
/// fall within the best `beam_size` go to the completed pool; the best
/// `beam_size` unfinished expansions stay live. Search ends when nothing is
/// live.
pub fn beam_decode<T: Scalar>(
    model: &CaptionModel,
    params: &ParamSet<T>,
    record: &FeatureRecord,
    beam_size: usize,
) -> Result<Vec<Caption>> {
    if beam_size == 0 {
        return Err(Error::InvalidArgument("beam size must be at least 1".into()));
    }
    let vocab = model.config().vocab_size;
    let max_len = model.config().max_caption_len;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logprob_sum: 0.0,
        state: initial_state(model, params, record)?,
        finished: false,
    }];
    let mut pool: Vec<Caption> = Vec::new();

    while !live.is_empty() {
        let states: Vec<_> = live.iter().map(|h| &h.state).collect();
        let batched = stack_states(&states)?;
        let ids: Vec<usize> = live
            .iter()
            .map(|h| h.tokens.last().copied().unwrap_or(START))
            .collect();
        let out = model.step(params, &ids, &batched)?;

        let mut expansions: Vec<(usize, Vec<usize>, f64)> = Vec::with_capacity(live.len() * vocab);
        for (parent, hyp) in live.iter().enumerate() {
            let row = out.logprobs.row(parent);
            for id in (0..vocab).filter(|&id| is_generable(id)) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(id);
                expansions.push((parent, tokens, hyp.logprob_sum + row[id].to_f64()));
            }
        }
        expansions.sort_by(|a, b| rank((a.2, &a.1), (b.2, &b.1), vocab));

        let mut next = Vec::with_capacity(beam_size);
        for (position, (parent, tokens, score)) in expansions.into_iter().enumerate() {
            let finished = tokens.last() == Some(&END) || tokens.len() >= max_len;
            if finished {
                if position < beam_size {
                    pool.push(Caption {
                        tokens,
                        logprob_sum: score,
                    });
                }
            } else if next.len() < beam_size {
                next.push(Hypothesis {
                    tokens,
                    logprob_sum: score,
                    state: out.next_state.select_rows(&[parent])?,
                    finished: false,
                });
            }
            if position + 1 >= beam_size && next.len() >= beam_size {
                break;
            }
        }
        live = next;
    }

    pool.sort_by(|a, b| rank((a.logprob_sum, &a.tokens), (b.logprob_sum, &b.tokens), vocab));
    Ok(pool)
}

/// Log-probability of `tokens` re-computed one step at a time.
pub fn sequence_logprob<T: Scalar>(
    model: &CaptionModel,
    params: &ParamSet<T>,
    record: &FeatureRecord,
    tokens: &[usize],
) -> Result<f64> {
    let mut state = initial_state(model, params, record)?;
    let mut last = START;
    let mut total = 0.0;
    for &id in tokens {
        let out = model.step(params, &[last], &state)?;
        total += out.logprobs.row(0)[id].to_f64();
        state = out.next_state;
        last = id;
    }
    Ok(total)
}
