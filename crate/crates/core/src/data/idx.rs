use std::io::Write;
use std::path::Path;

use super::{read_file, DataError, ImageRecords, Samples};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxFile {
    dims: Vec<usize>,
    payload_offset: usize,
}

fn be_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

fn parse_header(path: &Path, bytes: &[u8], magic: u32) -> Result<IdxFile, DataError> {
    let truncated = |offset| DataError::Truncated {
        path: path.to_path_buf(),
        offset,
    };
    if bytes.is_empty() {
        return Err(DataError::Empty {
            path: path.to_path_buf(),
        });
    }
    let found = be_u32(bytes, 0).ok_or_else(|| truncated(bytes.len()))?;
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for k in 0..ndims {
        let off = 4 + 4 * k;
        dims.push(be_u32(bytes, off).ok_or_else(|| truncated(off))? as usize);
    }
    let payload_offset = 4 + 4 * ndims;
    let expected = dims.iter().product::<usize>();
    let have = bytes.len() - payload_offset;
    if have < expected {
        return Err(truncated(bytes.len()));
    }
    if have > expected {
        return Err(DataError::InvalidArgument(format!(
            "{}: {} trailing bytes after byte offset {}",
            path.display(),
            have - expected,
            payload_offset + expected
        )));
    }
    Ok(IdxFile {
        dims,
        payload_offset,
    })
}

/// Reads an IDX image file (`0x00000803`) and its label file (`0x00000801`).
pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<ImageRecords, DataError> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = read_file(ip)?;
    let lb = read_file(lp)?;
    let ih = parse_header(ip, &ib, IDX_IMAGES_MAGIC)?;
    let lh = parse_header(lp, &lb, IDX_LABELS_MAGIC)?;
    if ih.dims[0] != lh.dims[0] {
        return Err(DataError::CountMismatch {
            images: ih.dims[0],
            labels: lh.dims[0],
        });
    }
    let (rows, cols) = (ih.dims[1], ih.dims[2]);
    let pixels = ib[ih.payload_offset..]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let images = if ih.dims[0] == 0 {
        Samples::empty(vec![1, rows, cols])
    } else {
        Samples::new(vec![1, rows, cols], pixels)?
    };
    Ok(ImageRecords {
        images,
        labels: lb[lh.payload_offset..].to_vec(),
    })
}

/// Writes raw `u8` images `[n, rows, cols]` in IDX format.
pub fn write_idx_images(
    mut w: impl Write,
    n: usize,
    rows: usize,
    cols: usize,
    pixels: &[u8],
) -> std::io::Result<()> {
    assert_eq!(pixels.len(), n * rows * cols, "pixel count");
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for d in [n, rows, cols] {
        w.write_all(&(d as u32).to_be_bytes())?;
    }
    w.write_all(pixels)
}

pub fn write_idx_labels(mut w: impl Write, labels: &[u8]) -> std::io::Result<()> {
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, n_img: usize, n_lab: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img.idx");
        let lp = dir.join("lab.idx");
        let pixels: Vec<u8> = (0..n_img * 4).map(|i| (i * 17 % 256) as u8).collect();
        write_idx_images(std::fs::File::create(&ip).unwrap(), n_img, 2, 2, &pixels).unwrap();
        let labels: Vec<u8> = (0..n_lab).map(|i| (i % 10) as u8).collect();
        write_idx_labels(std::fs::File::create(&lp).unwrap(), &labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 3, 3);
        let recs = load_idx(&ip, &lp).unwrap();
        assert_eq!(recs.labels, vec![0, 1, 2]);
        assert_eq!(recs.images.sample_shape(), &[1, 2, 2]);
        assert_eq!(recs.images.get(1)[0], f64::from((4 * 17) as u8) / 255.0);
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 3, 4);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::CountMismatch {
                images: 3,
                labels: 4
            })
        ));
    }

    #[test]
    fn swapped_files_fail_on_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 2, 2);
        assert!(matches!(
            load_idx(&lp, &ip),
            Err(DataError::BadMagic {
                found: IDX_LABELS_MAGIC,
                ..
            })
        ));
    }

    #[test]
    fn empty_and_truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 2, 2);
        let empty = dir.path().join("empty");
        std::fs::write(&empty, b"").unwrap();
        assert!(matches!(
            load_idx(&empty, &lp),
            Err(DataError::Empty { .. })
        ));
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::Truncated { .. })
        ));
        std::fs::write(&ip, &bytes[..6]).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::Truncated { offset: 4, .. })
        ));
    }
}
