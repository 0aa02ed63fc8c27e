use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};

use super::{sha256_hex, DataError, DataProvenance, Dataset};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Extents, header bytes and payload of one IDX file.
type IdxParts = (Vec<usize>, Vec<u8>, Vec<u8>);

/// Magic, then `dims` big-endian u32 extents, then unsigned bytes.
fn read_idx(path: &Path, magic: u32, dims: usize) -> Result<IdxParts, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let header_len = 4 * (1 + dims) as u64;
    let truncated = |expected: u64| DataError::IdxTruncated {
        path: path.to_path_buf(),
        expected,
        actual: bytes.len() as u64,
    };
    if (bytes.len() as u64) < 4 {
        return Err(truncated(header_len));
    }
    let mut cur = Cursor::new(bytes.as_slice());
    let found = cur.read_u32::<BigEndian>().expect("length checked");
    if found != magic {
        return Err(DataError::IdxMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if (bytes.len() as u64) < header_len {
        return Err(truncated(header_len));
    }
    let extents: Vec<usize> = (0..dims)
        .map(|_| cur.read_u32::<BigEndian>().expect("length checked") as usize)
        .collect();
    let expected = header_len + extents.iter().map(|&e| e as u64).product::<u64>();
    if bytes.len() as u64 != expected {
        return Err(truncated(expected));
    }
    let payload = bytes[header_len as usize..].to_vec();
    Ok((extents, payload, bytes))
}

/// Reads an IDX image file (`n × rows × cols` unsigned bytes) and its
/// label file. Pixels are scaled to `[0, 1]` by `/255`; the class count is
/// the largest label plus one.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let (img_dims, pixels, img_bytes) = read_idx(images, IMAGES_MAGIC, 3)?;
    let (lbl_dims, raw_labels, lbl_bytes) = read_idx(labels, LABELS_MAGIC, 1)?;
    if img_dims[0] != lbl_dims[0] {
        return Err(DataError::IdxCountMismatch {
            images: images.to_path_buf(),
            labels: labels.to_path_buf(),
            image_count: img_dims[0],
            label_count: lbl_dims[0],
        });
    }
    let dim = img_dims[1] * img_dims[2];
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels_vec: Vec<usize> = raw_labels.iter().map(|&l| usize::from(l)).collect();
    let classes = labels_vec.iter().max().map_or(0, |m| m + 1);
    let mut both = img_bytes;
    both.extend_from_slice(&lbl_bytes);
    Dataset::new(
        features,
        labels_vec,
        dim,
        classes,
        DataProvenance::File {
            path: format!("{}+{}", images.display(), labels.display()),
            sha256: sha256_hex(&both),
        },
    )
}
