//! Nearest-neighbor comparison of image-feature space against generated
//! caption space, and the manual error-annotation categories.

use std::collections::BTreeSet;

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureRecord, FeatureSet, END, PAD, START};
use crate::error::{Error, Result};
use crate::metrics::caption_records;
use crate::models::FeatureBatch;
use crate::numerics::Tensor;
use crate::train::Checkpoint;

/// Beam width used to caption the sampled images.
pub const STUDY_BEAM_SIZE: usize = 3;

/// Kinds of mistakes seen in generated captions, for manual annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    /// Wrong number of objects, animals or people.
    Counting,
    /// Wrong gender for a person.
    Gender,
    /// Mentions something that is not in the image.
    Existence,
    /// Wrong relation or action between entities.
    Relational,
    Color,
    /// Wrong kind of object.
    Classification,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 6] = [
        ErrorCategory::Counting,
        ErrorCategory::Gender,
        ErrorCategory::Existence,
        ErrorCategory::Relational,
        ErrorCategory::Color,
        ErrorCategory::Classification,
    ];
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn from_parts(dot: f64, norm_u: f64, norm_v: f64) -> f64 {
    if norm_u == 0.0 || norm_v == 0.0 {
        0.0
    } else {
        dot / (norm_u * norm_v)
    }
}

/// `u·v / (‖u‖‖v‖)`, or 0 when either vector is zero.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine", &[u.len()], &[v.len()]));
    }
    Ok(from_parts(dot(u, v), dot(u, u).sqrt(), dot(v, v).sqrt()))
}

/// A generated caption and the mean embedding of its words.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedCaption {
    pub image_id: u64,
    pub tokens: Vec<usize>,
    pub embedding: Vec<f64>,
    /// No embeddable tokens; `embedding` is all zeros.
    pub empty: bool,
}

impl EmbeddedCaption {
    /// Averages the rows of `table` for every token except `<pad>`,
    /// `<start>` and `<end>`.
    pub fn new(image_id: u64, tokens: Vec<usize>, table: &Tensor<f32>) -> Result<Self> {
        let dim = table.shape()[1];
        let mut embedding = vec![0.0; dim];
        let mut count = 0usize;
        for &t in tokens.iter().filter(|&&t| t != PAD && t != START && t != END) {
            if t >= table.rows() {
                return Err(Error::UnknownToken {
                    id: t,
                    vocab_size: table.rows(),
                });
            }
            for (acc, &x) in embedding.iter_mut().zip(table.row(t)) {
                *acc += x as f64;
            }
            count += 1;
        }
        if count > 0 {
            embedding.iter_mut().for_each(|x| *x /= count as f64);
        }
        Ok(EmbeddedCaption {
            image_id,
            tokens,
            embedding,
            empty: count == 0,
        })
    }
}

/// The `k` most cosine-similar vectors to each vector, excluding itself,
/// as indices. Ties go to the lower id.
///
/// Norms are computed once and each unordered pair once, in parallel; every
/// similarity is bitwise equal to [`cosine`] on the same pair.
pub fn nearest_neighbors(vectors: &[Vec<f64>], ids: &[u64], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = vectors.len();
    if ids.len() != n {
        return Err(Error::InvalidArgument(format!("{n} vectors but {} ids", ids.len())));
    }
    if k >= n {
        return Err(Error::InvalidArgument(format!("k = {k} needs at least {} vectors, got {n}", k + 1)));
    }
    let dim = vectors.first().map_or(0, Vec::len);
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::shape("nearest_neighbors", &[dim], &[v.len()]));
    }
    let norms: Vec<f64> = vectors.iter().map(|v| dot(v, v).sqrt()).collect();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| from_parts(dot(&vectors[i], &vectors[j]), norms[i], norms[j]))
                .collect()
        })
        .collect();
    let sim = |i: usize, j: usize| if i < j { upper[i][j - i - 1] } else { upper[j][i - j - 1] };

    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| sim(i, b).total_cmp(&sim(i, a)).then(ids[a].cmp(&ids[b])));
            others.truncate(k);
            others
        })
        .collect())
}

/// Neighborhoods of one sampled image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborReport {
    pub anchor_id: u64,
    /// Nearest images by image embedding.
    pub s_i: Vec<u64>,
    /// Nearest images by generated-caption embedding.
    pub s_c: Vec<u64>,
    pub overlap: usize,
    /// Generated caption of the anchor, then of each member of `s_c`.
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    /// Mean of `|S_i ∩ S_c| / k`.
    pub mean_overlap: f64,
    /// Mean fraction of distinct captions within each `S_c`.
    pub distinct_caption_ratio: f64,
    pub samples: usize,
    pub k: usize,
    pub beam_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NnStudy {
    pub reports: Vec<NeighborReport>,
    pub summary: StudySummary,
}

impl NnStudy {
    /// One JSON object per anchor, newline-terminated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.reports {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Draws `sample_size` images (clamped to the file), captions them with
/// beam search and compares each image's neighbors in image-embedding
/// space with its neighbors in caption-embedding space.
pub fn nn_study(ckpt: &Checkpoint, features: &FeatureSet, sample_size: usize, k: usize, seed: u64) -> Result<NnStudy> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut size = sample_size;
    if size > features.len() {
        warn!(
            "requested {sample_size} samples but the feature file has {} images; using all of them",
            features.len()
        );
        size = features.len();
    }
    if size < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "neighbor study with k = {k} needs at least {} images, have {size}",
            k + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, features.len(), size).into_vec();
    picked.sort_unstable();
    let records: Vec<&FeatureRecord> = picked.iter().map(|&i| &features.records[i]).collect();
    let ids: Vec<u64> = records.iter().map(|r| r.image_id).collect();

    let model = ckpt.model()?;
    let batch = FeatureBatch::<f32>::from_records(&records, &ckpt.config)?;
    let image_vecs: Vec<Vec<f64>> = {
        let v = model.image_embedding(&ckpt.params, &batch)?;
        (0..v.rows()).map(|i| v.row(i).iter().map(|&x| x as f64).collect()).collect()
    };

    let table = ckpt.params.get(&model.embedding().weight_name())?;
    let captions = caption_records(ckpt, &records, STUDY_BEAM_SIZE)?;
    let embedded: Vec<EmbeddedCaption> = ids
        .iter()
        .zip(captions)
        .map(|(&id, tokens)| EmbeddedCaption::new(id, tokens, table))
        .collect::<Result<_>>()?;
    let empty = embedded.iter().filter(|e| e.empty).count();
    if empty > 0 {
        warn!("{empty} generated captions have no words; their embeddings are zero");
    }
    let caption_vecs: Vec<Vec<f64>> = embedded.iter().map(|e| e.embedding.clone()).collect();
    let texts: Vec<String> = embedded.iter().map(|e| ckpt.vocab.decode(&e.tokens)).collect();

    let by_image = nearest_neighbors(&image_vecs, &ids, k)?;
    let by_caption = nearest_neighbors(&caption_vecs, &ids, k)?;

    let mut reports = Vec::with_capacity(size);
    let (mut overlap_sum, mut distinct_sum) = (0.0, 0.0);
    for (a, (si, sc)) in by_image.iter().zip(&by_caption).enumerate() {
        let si_set: BTreeSet<usize> = si.iter().copied().collect();
        let overlap = sc.iter().filter(|j| si_set.contains(j)).count();
        let distinct: BTreeSet<&String> = sc.iter().map(|&j| &texts[j]).collect();
        overlap_sum += overlap as f64 / k as f64;
        distinct_sum += distinct.len() as f64 / k as f64;
        reports.push(NeighborReport {
            anchor_id: ids[a],
            s_i: si.iter().map(|&j| ids[j]).collect(),
            s_c: sc.iter().map(|&j| ids[j]).collect(),
            overlap,
            captions: std::iter::once(a).chain(sc.iter().copied()).map(|j| texts[j].clone()).collect(),
        });
    }
    Ok(NnStudy {
        summary: StudySummary {
            mean_overlap: overlap_sum / size as f64,
            distinct_caption_ratio: distinct_sum / size as f64,
            samples: size,
            k,
            beam_size: STUDY_BEAM_SIZE,
        },
        reports,
    })
}
