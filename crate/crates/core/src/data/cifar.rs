use std::path::Path;

use super::{read_file, DataError, ImageRecords, LabeledSet, Samples};

/// One label byte followed by 3 x 32 x 32 channel-major pixel bytes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

/// Reads a CIFAR-10 binary batch file.
pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<ImageRecords, DataError> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    decode(&bytes).map_err(|offset| match offset {
        0 => DataError::Empty {
            path: path.to_path_buf(),
        },
        offset => DataError::Truncated {
            path: path.to_path_buf(),
            offset,
        },
    })
}

/// Decodes records; on failure returns the byte offset of the first
/// incomplete record (0 for an empty buffer).
fn decode(bytes: &[u8]) -> Result<ImageRecords, usize> {
    if bytes.is_empty() {
        return Err(0);
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES);
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        labels.push(rec[0]);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let images = Samples::new(vec![3, 32, 32], pixels).expect("record size");
    Ok(ImageRecords { images, labels })
}

/// Vehicles (airplane 0, automobile 1, ship 8, truck 9) are positive, the six
/// animal classes negative.
pub fn binarize_cifar10(records: &ImageRecords) -> Result<LabeledSet, DataError> {
    records.binarize(9, |c| matches!(c, 0 | 1 | 8 | 9))
}
