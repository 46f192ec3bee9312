//! Next-byte prediction over a plain-text corpus.

use super::{Label, SequenceDataset};
use crate::error::{Error, Result};

/// The distinct bytes of a corpus, in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    bytes: Vec<u8>,
    index: [Option<usize>; 256],
}

impl CharVocab {
    pub fn from_text(text: &[u8]) -> Self {
        let mut seen = [false; 256];
        for &b in text {
            seen[b as usize] = true;
        }
        let bytes: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        let mut index = [None; 256];
        for (i, &b) in bytes.iter().enumerate() {
            index[b as usize] = Some(i);
        }
        CharVocab { bytes, index }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn id(&self, b: u8) -> Option<usize> {
        self.index[b as usize]
    }

    pub fn byte(&self, id: usize) -> u8 {
        self.bytes[id]
    }
}

/// Non-overlapping windows of `context` bytes, one-hot encoded; the target at
/// each step is the following byte.
pub fn char_lm_task(text: &[u8], context: usize) -> Result<(SequenceDataset, CharVocab)> {
    if context == 0 {
        return Err(Error::invalid("context length must be positive"));
    }
    if text.len() < context + 1 {
        return Err(Error::invalid(format!("corpus of {} bytes is shorter than one window", text.len())));
    }
    let vocab = CharVocab::from_text(text);
    let v = vocab.len();
    let ids: Vec<usize> = text.iter().map(|&b| vocab.id(b).expect("byte in vocabulary")).collect();
    let windows = (ids.len() - 1) / context;
    let mut inputs = Vec::with_capacity(windows);
    let mut labels = Vec::with_capacity(windows);
    for w in 0..windows {
        let start = w * context;
        let mut x = vec![0.0; context * v];
        for t in 0..context {
            x[t * v + ids[start + t]] = 1.0;
        }
        inputs.push(x);
        labels.push(Label::PerStep(ids[start + 1..start + context + 1].to_vec()));
    }
    Ok((SequenceDataset::new(context, v, v, inputs, labels)?, vocab))
}
