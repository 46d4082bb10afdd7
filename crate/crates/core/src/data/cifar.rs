//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! the red, green and blue 32×32 planes.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = 3073;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Loads the 50000-image development set and the 10000-image test set.
pub fn load_cifar10(root: &Path) -> Result<(Dataset, Dataset)> {
    load_cifar10_sized(root, RECORDS_PER_FILE)
}

/// Same as [`load_cifar10`] with a different expected record count per file.
pub fn load_cifar10_sized(root: &Path, records_per_file: usize) -> Result<(Dataset, Dataset)> {
    let mut dev = Dataset::empty("cifar10-dev", 3, 32, 32, 10);
    for name in TRAIN_FILES {
        read_batch(&root.join(name), records_per_file, &mut dev)?;
    }
    let mut test = Dataset::empty("cifar10-test", 3, 32, 32, 10);
    read_batch(&root.join(TEST_FILE), records_per_file, &mut test)?;
    Ok((dev, test))
}

fn read_batch(path: &Path, records: usize, into: &mut Dataset) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} bytes is not a whole number of {RECORD_BYTES}-byte records", bytes.len()),
        });
    }
    let found = bytes.len() / RECORD_BYTES;
    if found != records {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected {records} records, found {found}"),
        });
    }
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let label = rec[0];
        if label >= 10 {
            return Err(Error::Format { path: path.to_path_buf(), detail: format!("label {label} out of range") });
        }
        into.labels.push(label);
        into.pixels.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

fn encode(ds: &Dataset, range: std::ops::Range<usize>) -> Vec<u8> {
    let px = ds.image_len();
    let mut out = Vec::with_capacity(range.len() * RECORD_BYTES);
    for i in range {
        out.push(ds.labels[i]);
        out.extend_from_slice(&ds.pixels[i * px..(i + 1) * px]);
    }
    out
}

/// Writes `dev` (split evenly over the five training files) and `test` in the binary format.
pub fn write_cifar10(root: &Path, dev: &Dataset, test: &Dataset) -> Result<()> {
    if (dev.channels, dev.height, dev.width) != (3, 32, 32) || !dev.len().is_multiple_of(5) {
        return Err(Error::invalid("CIFAR-10 output needs 3×32×32 images and a development set divisible by 5"));
    }
    let per = dev.len() / 5;
    for (k, name) in TRAIN_FILES.iter().enumerate() {
        write_atomic(&root.join(name), &encode(dev, k * per..(k + 1) * per))?;
    }
    write_atomic(&root.join(TEST_FILE), &encode(test, 0..test.len()))
}
