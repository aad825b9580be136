use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{CaptionEntry, CaptionSample, FeatureRecord, FeatureSet, Vocabulary};
use crate::error::{Error, Result};

/// Number of region vectors per synthetic image: one per attribute block
/// plus the full vector.
pub const SYNTH_REGIONS: usize = 4;

/// Attribute lists and noise level of the synthetic micro-world.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabSpec {
    pub objects: Vec<String>,
    pub colors: Vec<String>,
    /// Present participles, used verbatim in captions.
    pub verbs: Vec<String>,
    /// Images sharing each (object, color, verb) triple.
    pub images_per_triple: usize,
    pub noise: f64,
}

impl Default for VocabSpec {
    fn default() -> Self {
        let words = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect();
        VocabSpec {
            objects: words(&["dog", "cat", "horse", "bird", "car", "boat", "bus", "train"]),
            colors: words(&["red", "blue", "green", "yellow", "black", "white"]),
            verbs: words(&["sitting", "running", "jumping", "standing", "sleeping"]),
            images_per_triple: 4,
            noise: 0.05,
        }
    }
}

impl VocabSpec {
    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.objects.len() + self.colors.len() + self.verbs.len()
    }
}

/// Everything `synth_dataset` produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub features: FeatureSet,
    pub captions: Vec<CaptionEntry>,
    pub samples: Vec<CaptionSample>,
    pub vocab: Vocabulary,
    /// `(object, color, verb)` indices per image.
    pub triples: Vec<(usize, usize, usize)>,
}

/// Generates `n_images` images of a compositional (object, color, verb)
/// world with templated captions.
///
/// Global features are concatenated one-hot attribute blocks plus Gaussian
/// noise; region `r < 3` keeps only attribute block `r` and the last region
/// keeps all of them, each with independent noise.
pub fn synth_dataset(n_images: usize, spec: &VocabSpec, seed: u64) -> Result<SynthDataset> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs at least one image".into()));
    }
    if spec.objects.is_empty() || spec.colors.is_empty() || spec.verbs.is_empty() {
        return Err(Error::InvalidArgument("every attribute list must be non-empty".into()));
    }
    let noise = Normal::new(0.0, spec.noise)
        .map_err(|e| Error::InvalidArgument(format!("noise level {}: {e}", spec.noise)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut combos: Vec<(usize, usize, usize)> = (0..spec.objects.len())
        .flat_map(|o| (0..spec.colors.len()).flat_map(move |c| (0..spec.verbs.len()).map(move |v| (o, c, v))))
        .collect();
    combos.shuffle(&mut rng);
    let per = spec.images_per_triple.max(1);
    let distinct = n_images.div_ceil(per).min(combos.len());

    let blocks = [spec.objects.len(), spec.colors.len(), spec.verbs.len()];
    let dim = spec.feature_dim();
    let mut features = FeatureSet::new(dim, SYNTH_REGIONS, dim);
    let mut captions = Vec::with_capacity(n_images);
    let mut triples = Vec::with_capacity(n_images);

    for i in 0..n_images {
        let (o, c, v) = combos[i % distinct];
        let mut clean = vec![0.0f64; dim];
        clean[o] = 1.0;
        clean[blocks[0] + c] = 1.0;
        clean[blocks[0] + blocks[1] + v] = 1.0;

        let mut noisy = |mask: &dyn Fn(usize) -> bool| -> Vec<f32> {
            (0..dim)
                .map(|j| {
                    let base = if mask(j) { clean[j] } else { 0.0 };
                    (base + noise.sample(&mut rng)) as f32
                })
                .collect()
        };
        let global = noisy(&|_| true);
        let mut regions = Vec::with_capacity(SYNTH_REGIONS * dim);
        let mut start = 0;
        for len in blocks {
            regions.extend(noisy(&|j| j >= start && j < start + len));
            start += len;
        }
        regions.extend(noisy(&|_| true));

        let image_id = i as u64;
        features.records.push(FeatureRecord {
            image_id,
            global,
            regions,
        });
        captions.push(CaptionEntry {
            image_id,
            captions: vec![format!(
                "a {} {} is {}",
                spec.colors[c], spec.objects[o], spec.verbs[v]
            )],
        });
        triples.push((o, c, v));
    }

    let corpus: Vec<&str> = captions.iter().map(|e| e.captions[0].as_str()).collect();
    let vocab = Vocabulary::build(&corpus, 1)?;
    let samples = captions
        .iter()
        .map(|e| CaptionSample::from_entry(e, &vocab))
        .collect::<Result<_>>()?;
    Ok(SynthDataset {
        features,
        captions,
        samples,
        vocab,
        triples,
    })
}
