//! Corpus BLEU-1..4 and CIDEr over token sequences, plus whole-run
//! evaluation of a checkpoint.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CaptionEntry, FeatureRecord, FeatureSet, END};
use crate::decode::beam_decode;
use crate::error::{Error, Result};
use crate::train::Checkpoint;

pub const MAX_N: usize = 4;

/// Counts of every n-gram of one order, in n-gram order so float
/// reductions over them are reproducible.
pub fn ngram_counts<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeMap<Vec<T>, usize> {
    let mut counts = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

fn check_inputs<T>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::Empty("reference set"));
    }
    Ok(())
}

/// Corpus BLEU-1..4 with clipped n-gram precision and a brevity penalty
/// against the closest reference length (ties go to the shorter one).
pub fn bleu<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<[f64; MAX_N]> {
    check_inputs(candidates, references)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);

    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("references are non-empty");
        for n in 1..=MAX_N {
            let mut max_ref: BTreeMap<Vec<T>, usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let slot = max_ref.entry(g).or_insert(0);
                    *slot = (*slot).max(c);
                }
            }
            for (g, c) in ngram_counts(cand, n) {
                matched[n - 1] += c.min(max_ref.get(&g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }

    let mut scores = [0.0; MAX_N];
    if cand_len == 0 {
        return Ok(scores);
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut log_sum = 0.0;
    for k in 1..=MAX_N {
        if matched[k - 1] == 0 {
            // Every higher order is zero too.
            break;
        }
        log_sum += (matched[k - 1] as f64 / total[k - 1] as f64).ln();
        scores[k - 1] = bp * (log_sum / k as f64).exp();
    }
    Ok(scores)
}

fn cosine_sparse<T: Ord>(a: &BTreeMap<Vec<T>, f64>, b: &BTreeMap<Vec<T>, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Plain CIDEr: TF-IDF n-gram vectors with `idf = ln(M / df)`, cosine
/// against each reference averaged over references, uniform weights over
/// n = 1..4, scaled by 10 and averaged over images.
pub fn cider<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    check_inputs(candidates, references)?;
    let docs = references.len() as f64;
    let mut df: Vec<BTreeMap<Vec<T>, usize>> = vec![BTreeMap::new(); MAX_N];
    for refs in references {
        for n in 1..=MAX_N {
            let seen: BTreeSet<Vec<T>> = refs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for g in seen {
                *df[n - 1].entry(g).or_insert(0) += 1;
            }
        }
    }
    let tfidf = |tokens: &[T], n: usize| -> BTreeMap<Vec<T>, f64> {
        let counts = ngram_counts(tokens, n);
        let total: usize = counts.values().sum();
        counts
            .into_iter()
            .map(|(g, c)| {
                // Candidate n-grams absent from every reference get df 0; they
                // cannot match anything, so any finite weight is equivalent.
                let d = df[n - 1].get(&g).copied().unwrap_or(0).max(1) as f64;
                let w = c as f64 / total as f64 * (docs / d).ln();
                (g, w)
            })
            .collect()
    };

    let mut sum = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let mut score = 0.0;
        for n in 1..=MAX_N {
            let c = tfidf(cand, n);
            let per_ref: f64 = refs.iter().map(|r| cosine_sparse(&c, &tfidf(r, n))).sum();
            score += per_ref / refs.len() as f64 / MAX_N as f64;
        }
        sum += 10.0 * score;
    }
    Ok(sum / candidates.len() as f64)
}

/// One row of an experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arch: String,
    pub feature_file: String,
    pub beam_size: usize,
    pub lstm_layers: usize,
    pub bleu: [f64; MAX_N],
    pub cider: f64,
    pub n_images: usize,
}

/// Top beam caption for every record, without the trailing `<end>`, in
/// input order.
pub fn caption_records(ckpt: &Checkpoint, records: &[&FeatureRecord], beam_size: usize) -> Result<Vec<Vec<usize>>> {
    let model = ckpt.model()?;
    records
        .par_iter()
        .map(|rec| {
            let best = beam_decode(&model, &ckpt.params, rec, beam_size)?
                .into_iter()
                .next()
                .ok_or(Error::Empty("beam search result"))?;
            let mut tokens = best.tokens;
            if tokens.last() == Some(&END) {
                tokens.pop();
            }
            Ok(tokens)
        })
        .collect()
}

/// Decodes every captioned image and scores the result against its
/// references, tokenized with the checkpoint vocabulary.
pub fn evaluate_run(
    ckpt: &Checkpoint,
    features: &FeatureSet,
    feature_file: &str,
    captions: &[CaptionEntry],
    beam_size: usize,
) -> Result<EvalReport> {
    if captions.is_empty() {
        return Err(Error::Empty("caption file"));
    }
    let mut records = Vec::with_capacity(captions.len());
    let mut references = Vec::with_capacity(captions.len());
    for entry in captions {
        let rec = features.find(entry.image_id).ok_or_else(|| {
            Error::ConfigMismatch(format!("captioned image {} has no feature record", entry.image_id))
        })?;
        if entry.captions.is_empty() {
            return Err(Error::Malformed {
                kind: "caption",
                detail: format!("image {} has no captions", entry.image_id),
            });
        }
        records.push(rec);
        references.push(entry.captions.iter().map(|c| ckpt.vocab.encode(c)).collect::<Vec<_>>());
    }
    let uncaptioned = features.len().saturating_sub(records.len());
    if uncaptioned > 0 {
        warn!("{uncaptioned} feature records have no captions and are not scored");
    }
    let c = &ckpt.config;
    if features.feature_dim != c.feature_dim || features.region_count != c.region_count || features.region_dim != c.region_dim {
        return Err(Error::ConfigMismatch(format!(
            "features have D_f={}, R={}, D_a={} but the checkpoint expects D_f={}, R={}, D_a={}",
            features.feature_dim, features.region_count, features.region_dim, c.feature_dim, c.region_count, c.region_dim
        )));
    }

    let candidates = caption_records(ckpt, &records, beam_size)?;
    Ok(EvalReport {
        arch: c.arch.to_string(),
        feature_file: feature_file.to_string(),
        beam_size,
        lstm_layers: c.lstm_layers,
        bleu: bleu(&candidates, &references)?,
        cider: cider(&candidates, &references)?,
        n_images: records.len(),
    })
}
