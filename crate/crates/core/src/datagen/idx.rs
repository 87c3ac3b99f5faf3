//! Big-endian IDX files (the MNIST distribution format).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::NoisyDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

const MNIST_CLASSES: usize = 10;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn format_err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let raw = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.format_err(format!("truncated before {what}")))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(raw.try_into().unwrap()))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let got = self.u32("magic number")?;
        if got != expected {
            return Err(self.format_err(format!(
                "magic number {got:#010x} (expected {expected:#010x})"
            )));
        }
        Ok(())
    }

    fn payload(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(self.format_err(format!(
                "truncated {what}: need {len} bytes, have {available}"
            )));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]` and
/// flattening each image row-major. `limit` keeps the first samples in
/// file order.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<NoisyDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;

    let mut img = Reader {
        path: images_path,
        bytes: &image_bytes,
        pos: 0,
    };
    img.magic(IMAGE_MAGIC)?;
    let n_images = img.u32("image count")? as usize;
    let rows = img.u32("row count")? as usize;
    let cols = img.u32("column count")? as usize;

    let mut lab = Reader {
        path: labels_path,
        bytes: &label_bytes,
        pos: 0,
    };
    lab.magic(LABEL_MAGIC)?;
    let n_labels = lab.u32("label count")? as usize;

    if n_images != n_labels {
        return Err(Error::Consistency(format!(
            "{} holds {n_images} images but {} holds {n_labels} labels",
            images_path.display(),
            labels_path.display()
        )));
    }
    let pixels_per = rows * cols;
    if pixels_per == 0 || n_images == 0 {
        return Err(img.format_err("empty image set"));
    }
    let pixels = img.payload(n_images * pixels_per, "pixel data")?;
    let labels = lab.payload(n_labels, "label data")?;

    let n = limit.map_or(n_images, |l| l.min(n_images));
    if n == 0 {
        return Err(Error::Argument("sample limit of 0".into()));
    }
    let data = pixels[..n * pixels_per]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let x = Matrix::new(n, pixels_per, data)?;
    let labels: Vec<usize> = labels[..n].iter().map(|&b| usize::from(b)).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= MNIST_CLASSES) {
        return Err(lab.format_err(format!("label {bad} outside 0..{MNIST_CLASSES}")));
    }
    NoisyDataset::classification(x, labels, MNIST_CLASSES)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `images` (each `rows*cols` bytes) as an IDX image file.
pub fn write_idx_images(path: impl AsRef<Path>, rows: u32, cols: u32, images: &[Vec<u8>]) -> Result<PathBuf> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(16 + images.len() * (rows * cols) as usize);
    for v in [IMAGE_MAGIC, images.len() as u32, rows, cols] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        if img.len() != (rows * cols) as usize {
            return Err(Error::Argument(format!(
                "image of {} bytes, expected {}",
                img.len(),
                rows * cols
            )));
        }
        bytes.extend_from_slice(img);
    }
    write_file(path, &bytes)?;
    Ok(path.to_path_buf())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<PathBuf> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    write_file(path, &bytes)?;
    Ok(path.to_path_buf())
}
