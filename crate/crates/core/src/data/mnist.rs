//! Images read one pixel per step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ImageSet, Label, SequenceDataset};
use crate::error::{Error, Result};

/// Order in which pixels are fed to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelOrder {
    /// Row-major over the full image.
    Scanline,
    /// Row-major, then reordered by a fixed permutation drawn from `seed`.
    Permuted { seed: u64 },
    /// Average-pooled to `side × side`, then row-major.
    Downsampled { side: usize },
}

impl std::str::FromStr for PixelOrder {
    type Err = Error;
    /// `scanline`, `permuted:<seed>` or `downsampled:<side>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown pixel order {s:?}"));
        match s.split_once(':') {
            None if s == "scanline" => Ok(PixelOrder::Scanline),
            Some(("permuted", v)) => Ok(PixelOrder::Permuted { seed: v.parse().map_err(|_| bad())? }),
            Some(("downsampled", v)) => {
                let side = v.parse().map_err(|_| bad())?;
                if side == 0 {
                    return Err(bad());
                }
                Ok(PixelOrder::Downsampled { side })
            }
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for PixelOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PixelOrder::Scanline => f.write_str("scanline"),
            PixelOrder::Permuted { seed } => write!(f, "permuted:{seed}"),
            PixelOrder::Downsampled { side } => write!(f, "downsampled:{side}"),
        }
    }
}

/// The fixed pixel permutation for `seed`.
pub fn permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Area-average of a `rows × cols` image onto `side × side` cells. Each
/// output cell averages the source pixels whose centres fall inside it.
fn downsample(img: &[u8], rows: usize, cols: usize, side: usize) -> Vec<f64> {
    let mut sum = vec![0.0; side * side];
    let mut count = vec![0usize; side * side];
    for r in 0..rows {
        let cr = r * side / rows;
        for c in 0..cols {
            let cc = c * side / cols;
            sum[cr * side + cc] += img[r * cols + c] as f64;
            count[cr * side + cc] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 / 255.0 }).collect()
}

/// Ten-class sequence task with one normalised pixel per step.
pub fn to_sequence(set: &ImageSet, order: PixelOrder) -> Result<SequenceDataset> {
    let n = set.rows * set.cols;
    let perm = match order {
        PixelOrder::Permuted { seed } => Some(permutation(n, seed)),
        _ => None,
    };
    let steps = match order {
        PixelOrder::Downsampled { side } => {
            if side > set.rows.min(set.cols) {
                return Err(Error::invalid(format!("cannot downsample {}×{} to {side}", set.rows, set.cols)));
            }
            side * side
        }
        _ => n,
    };
    let mut inputs = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let img = set.image(i);
        let seq = match order {
            PixelOrder::Scanline => img.iter().map(|&v| v as f64 / 255.0).collect(),
            PixelOrder::Permuted { .. } => {
                perm.as_ref().expect("built above").iter().map(|&j| img[j] as f64 / 255.0).collect()
            }
            PixelOrder::Downsampled { side } => downsample(img, set.rows, set.cols, side),
        };
        inputs.push(seq);
    }
    let classes = set.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1).max(10);
    let labels = set.labels.iter().map(|&l| Label::Final(l as usize)).collect();
    SequenceDataset::new(steps, 1, classes, inputs, labels)
}
