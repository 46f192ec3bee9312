//! The IDX container used by the MNIST distribution.
//!
//! Images: magic `0x00000803`, then big-endian `u32` count, rows, cols and
//! `count·rows·cols` bytes. Labels: magic `0x00000801`, count, then `count`
//! bytes. Files ending in `.gz` are decompressed transparently.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Grey-scale images with one label each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSet {
    pub rows: usize,
    pub cols: usize,
    /// `count × rows × cols` pixels, row-major per image.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Format("image dimensions must be positive".into()));
        }
        if pixels.len() != labels.len() * rows * cols {
            return Err(Error::Format(format!(
                "{} pixels do not make {} images of {rows}×{cols}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(ImageSet { rows, cols, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_be_bytes(buf))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::UnexpectedEof(what),
        _ => Error::Io(e),
    })
}

fn expect_magic(r: &mut impl Read, expected: u32) -> Result<()> {
    let found = read_u32(r, "header")?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses an image stream and a label stream.
pub fn read_idx(mut images: impl Read, mut labels: impl Read) -> Result<ImageSet> {
    expect_magic(&mut images, IMAGE_MAGIC)?;
    let count = read_u32(&mut images, "header")? as usize;
    let rows = read_u32(&mut images, "header")? as usize;
    let cols = read_u32(&mut images, "header")? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    read_exact(&mut images, &mut pixels, "image payload")?;

    expect_magic(&mut labels, LABEL_MAGIC)?;
    let n_labels = read_u32(&mut labels, "header")? as usize;
    if n_labels != count {
        return Err(Error::Format(format!("{count} images but {n_labels} labels")));
    }
    let mut label_bytes = vec![0u8; count];
    read_exact(&mut labels, &mut label_bytes, "label payload")?;
    ImageSet::new(rows, cols, pixels, label_bytes)
}

fn open(path: &Path) -> Result<Box<dyn Read>> {
    let file = BufReader::new(File::open(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(file)))
    } else {
        Ok(Box::new(file))
    }
}

/// Loads an image file and its label file; `.gz` files are decompressed.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<ImageSet> {
    read_idx(open(images.as_ref())?, open(labels.as_ref())?)
}

/// Serialises `set` as an image stream and a label stream.
pub fn write_idx(set: &ImageSet, mut images: impl Write, mut labels: impl Write) -> Result<()> {
    let count = set.len() as u32;
    images.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    images.write_all(&count.to_be_bytes())?;
    images.write_all(&(set.rows as u32).to_be_bytes())?;
    images.write_all(&(set.cols as u32).to_be_bytes())?;
    images.write_all(&set.pixels)?;
    labels.write_all(&LABEL_MAGIC.to_be_bytes())?;
    labels.write_all(&count.to_be_bytes())?;
    labels.write_all(&set.labels)?;
    Ok(())
}
