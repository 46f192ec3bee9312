//! Datasets: MNIST IDX files, pixel-sequence tasks, synthetic diagnostics and
//! a byte-level language-model corpus.
//!
//! Every task is materialised as a [`SequenceDataset`], a flat store of
//! fixed-length sequences from which [`SequenceBatch`]es are cut.

mod charlm;
mod idx;
mod mnist;
mod synth;

pub use charlm::{char_lm_task, CharVocab};
pub use idx::{load_idx, read_idx, write_idx, ImageSet};
pub use mnist::{permutation, to_sequence, PixelOrder};
pub use synth::{copy_task, parity_task};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rnn::{SequenceBatch, Targets, TaskKind};
use crate::tensor::Tensor;

/// Target of one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Final(usize),
    PerStep(Vec<usize>),
}

/// Fixed-length sequences with `input_dim` features per step.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub steps: usize,
    pub input_dim: usize,
    pub classes: usize,
    /// Each entry is `steps × input_dim`, step-major.
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
}

impl SequenceDataset {
    pub fn new(
        steps: usize,
        input_dim: usize,
        classes: usize,
        inputs: Vec<Vec<f64>>,
        labels: Vec<Label>,
    ) -> Result<Self> {
        let ds = SequenceDataset { steps, input_dim, classes, inputs, labels };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.input_dim == 0 || self.classes == 0 {
            return Err(Error::invalid("dataset dimensions must be positive"));
        }
        if self.inputs.len() != self.labels.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} labels",
                self.inputs.len(),
                self.labels.len()
            )));
        }
        let width = self.steps * self.input_dim;
        for (i, (x, y)) in self.inputs.iter().zip(&self.labels).enumerate() {
            if x.len() != width {
                return Err(Error::Shape(format!("sequence {i} has {} values, expected {width}", x.len())));
            }
            let ok = match y {
                Label::Final(l) => *l < self.classes,
                Label::PerStep(ls) => ls.len() == self.steps && ls.iter().all(|&l| l < self.classes),
            };
            if !ok {
                return Err(Error::invalid(format!("sequence {i} has a bad label")));
            }
        }
        if let Some(first) = self.labels.first() {
            let per_step = matches!(first, Label::PerStep(_));
            if self.labels.iter().any(|l| matches!(l, Label::PerStep(_)) != per_step) {
                return Err(Error::invalid("mixed final-step and per-step labels"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn task_kind(&self) -> TaskKind {
        match self.labels.first() {
            Some(Label::PerStep(_)) => TaskKind::PerStep,
            _ => TaskKind::FinalStep,
        }
    }

    /// Batch of the given examples, in order.
    pub fn batch(&self, indices: &[usize]) -> SequenceBatch {
        let d = self.input_dim;
        let inputs = (0..self.steps)
            .map(|t| {
                let mut data = Vec::with_capacity(indices.len() * d);
                for &i in indices {
                    data.extend_from_slice(&self.inputs[i][t * d..(t + 1) * d]);
                }
                Tensor::matrix(indices.len(), d, data).expect("shape checked")
            })
            .collect();
        let targets = match self.task_kind() {
            TaskKind::FinalStep => Targets::Final(
                indices
                    .iter()
                    .map(|&i| match &self.labels[i] {
                        Label::Final(l) => *l,
                        Label::PerStep(_) => unreachable!("validated"),
                    })
                    .collect(),
            ),
            TaskKind::PerStep => Targets::PerStep(
                indices
                    .iter()
                    .map(|&i| match &self.labels[i] {
                        Label::PerStep(l) => l.clone(),
                        Label::Final(_) => unreachable!("validated"),
                    })
                    .collect(),
            ),
        };
        SequenceBatch { inputs, targets }
    }

    /// Consecutive batches of at most `size` examples covering the whole set.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = SequenceBatch> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = idx.chunks(size.max(1)).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }

    pub fn subset(&self, indices: &[usize]) -> SequenceDataset {
        SequenceDataset {
            steps: self.steps,
            input_dim: self.input_dim,
            classes: self.classes,
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

/// Train / validation / test partition.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: SequenceDataset,
    pub val: SequenceDataset,
    pub test: SequenceDataset,
}

/// Shuffles `ds` with `rng` and cuts it into the requested sizes. Sizes must
/// not exceed the data available.
pub fn split<R: Rng + ?Sized>(
    ds: &SequenceDataset,
    train: usize,
    val: usize,
    test: usize,
    rng: &mut R,
) -> Result<Splits> {
    if train + val + test > ds.len() {
        return Err(Error::invalid(format!(
            "requested {} examples but only {} are available",
            train + val + test,
            ds.len()
        )));
    }
    if train == 0 {
        return Err(Error::invalid("training split is empty"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    Ok(Splits {
        train: ds.subset(&order[..train]),
        val: ds.subset(&order[train..train + val]),
        test: ds.subset(&order[train + val..train + val + test]),
    })
}
