//! Tokenization, vocabulary, feature and caption files, and the synthetic
//! micro-dataset used in place of a real captioning corpus.

mod captions;
mod features;
mod synth;
mod vocab;

pub use captions::{read_captions, write_captions, CaptionEntry, CaptionSample};
pub use features::{FeatureRecord, FeatureSet, FEATURE_MAGIC, FEATURE_VERSION};
pub use synth::{synth_dataset, SynthDataset, VocabSpec, SYNTH_REGIONS};
pub use vocab::{
    Vocabulary, END, END_TOKEN, NUM_SPECIAL, PAD, PAD_TOKEN, START, START_TOKEN, UNK, UNK_TOKEN,
};

/// Lowercases, splits on whitespace and splits every ASCII punctuation
/// character into a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}
