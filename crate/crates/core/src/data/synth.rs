//! Synthetic tasks whose labels have a closed form.

use rand::Rng;

use super::{Label, SequenceDataset};
use crate::error::{Error, Result};

/// `count` random bit strings of length `len`; the label is their XOR.
pub fn parity_task<R: Rng + ?Sized>(len: usize, count: usize, rng: &mut R) -> Result<SequenceDataset> {
    if len == 0 {
        return Err(Error::invalid("parity length must be positive"));
    }
    let mut inputs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let bits: Vec<f64> = (0..len).map(|_| rng.random_range(0..2) as f64).collect();
        let parity = bits.iter().filter(|&&b| b == 1.0).count() % 2;
        inputs.push(bits);
        labels.push(Label::Final(parity));
    }
    SequenceDataset::new(len, 1, 2, inputs, labels)
}

/// Recall task: `len` one-hot symbols from an alphabet of `symbols` are
/// shown, followed by `delay` blank steps; the label is the last symbol shown.
///
/// Inputs have `symbols + 1` features; the extra one flags a blank step.
pub fn copy_task<R: Rng + ?Sized>(
    len: usize,
    delay: usize,
    symbols: usize,
    count: usize,
    rng: &mut R,
) -> Result<SequenceDataset> {
    if len == 0 || symbols < 2 {
        return Err(Error::invalid("copy task needs len ≥ 1 and at least two symbols"));
    }
    let width = symbols + 1;
    let steps = len + delay;
    let mut inputs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..symbols)).collect();
        let mut x = vec![0.0; steps * width];
        for (t, &s) in seq.iter().enumerate() {
            x[t * width + s] = 1.0;
        }
        for t in len..steps {
            x[t * width + symbols] = 1.0;
        }
        inputs.push(x);
        labels.push(Label::Final(seq[len - 1]));
    }
    SequenceDataset::new(steps, width, symbols, inputs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parity_labels_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ds = parity_task(3, 200, &mut rng).unwrap();
        for (x, y) in ds.inputs.iter().zip(&ds.labels) {
            let xor = x.iter().fold(0usize, |acc, &b| acc ^ b as usize);
            assert_eq!(*y, Label::Final(xor));
        }
    }

    #[test]
    fn copy_without_delay_is_last_symbol() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = copy_task(5, 0, 4, 50, &mut rng).unwrap();
        for (x, y) in ds.inputs.iter().zip(&ds.labels) {
            let last = &x[4 * 5..5 * 5];
            let sym = last.iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(*y, Label::Final(sym));
        }
        let delayed = copy_task(2, 3, 4, 10, &mut rng).unwrap();
        assert_eq!(delayed.steps, 5);
        for (x, y) in delayed.inputs.iter().zip(&delayed.labels) {
            let sym = x[5..10].iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(*y, Label::Final(sym));
            assert_eq!(x[4 * 5 + 4], 1.0);
        }
        assert!(copy_task(0, 1, 4, 1, &mut rng).is_err());
    }
}
