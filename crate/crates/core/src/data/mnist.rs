//! MNIST in the IDX format (big-endian headers, magic 2051 for images and 2049 for labels).

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn format_err(path: &Path, detail: String) -> Error {
    Error::Format { path: path.to_path_buf(), detail }
}

pub fn load_mnist(root: &Path) -> Result<(Dataset, Dataset)> {
    let dev = load_pair(&root.join(TRAIN_IMAGES), &root.join(TRAIN_LABELS), "mnist-dev")?;
    let test = load_pair(&root.join(TEST_IMAGES), &root.join(TEST_LABELS), "mnist-test")?;
    Ok((dev, test))
}

fn load_pair(images: &Path, labels: &Path, name: &str) -> Result<Dataset> {
    let ib = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    if ib.len() < 16 || be_u32(&ib, 0) != IMAGE_MAGIC {
        return Err(format_err(images, format!("missing IDX image header (magic {IMAGE_MAGIC})")));
    }
    if lb.len() < 8 || be_u32(&lb, 0) != LABEL_MAGIC {
        return Err(format_err(labels, format!("missing IDX label header (magic {LABEL_MAGIC})")));
    }
    let n = be_u32(&ib, 4) as usize;
    let (h, w) = (be_u32(&ib, 8) as usize, be_u32(&ib, 12) as usize);
    let nl = be_u32(&lb, 4) as usize;
    if n != nl {
        return Err(format_err(labels, format!("{nl} labels for {n} images")));
    }
    if ib.len() != 16 + n * h * w {
        return Err(format_err(images, format!("expected {} bytes, found {}", 16 + n * h * w, ib.len())));
    }
    if lb.len() != 8 + n {
        return Err(format_err(labels, format!("expected {} bytes, found {}", 8 + n, lb.len())));
    }
    if let Some(bad) = lb[8..].iter().find(|&&l| l >= 10) {
        return Err(format_err(labels, format!("label {bad} out of range")));
    }
    Ok(Dataset { name: name.into(), channels: 1, height: h, width: w, num_classes: 10, pixels: ib[16..].to_vec(), labels: lb[8..].to_vec() })
}

fn write_pair(images: &Path, labels: &Path, ds: &Dataset) -> Result<()> {
    let mut ib = Vec::with_capacity(16 + ds.pixels.len());
    for v in [IMAGE_MAGIC, ds.len() as u32, ds.height as u32, ds.width as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend_from_slice(&ds.pixels);
    let mut lb = Vec::with_capacity(8 + ds.len());
    lb.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lb.extend_from_slice(&ds.labels);
    write_atomic(images, &ib)?;
    write_atomic(labels, &lb)
}

/// Writes single-channel datasets as the four IDX files.
pub fn write_mnist(root: &Path, dev: &Dataset, test: &Dataset) -> Result<()> {
    if dev.channels != 1 || test.channels != 1 {
        return Err(Error::invalid("IDX output needs single-channel images"));
    }
    write_pair(&root.join(TRAIN_IMAGES), &root.join(TRAIN_LABELS), dev)?;
    write_pair(&root.join(TEST_IMAGES), &root.join(TEST_LABELS), test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let mut dev = Dataset::empty("d", 1, 28, 28, 10);
        dev.pixels = (0..2 * 784).map(|i| (i % 256) as u8).collect();
        dev.labels = vec![3, 9];
        let mut test = Dataset::empty("t", 1, 28, 28, 10);
        test.pixels = vec![7; 784];
        test.labels = vec![1];
        write_mnist(dir.path(), &dev, &test).unwrap();
        let (d, t) = load_mnist(dir.path()).unwrap();
        assert_eq!(d.pixels, dev.pixels);
        assert_eq!(d.labels, vec![3, 9]);
        assert_eq!(t.len(), 1);

        let p = dir.path().join(TRAIN_IMAGES);
        let mut bytes = fs::read(&p).unwrap();
        bytes[3] = 0x01;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_mnist(dir.path()), Err(Error::Format { .. })));
    }
}
