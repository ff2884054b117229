use std::path::Path;

use super::{DataError, Dataset, Result, Split};
use crate::model::InputShape;

/// Magic of a u8 image file with dims `[N, rows, cols]`.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Magic of a u8 label file with dims `[N]`.
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], pos: &mut usize, what: &'static str) -> Result<u32> {
    let raw = bytes.get(*pos..*pos + 4).ok_or(DataError::Truncated(what))?;
    *pos += 4;
    Ok(u32::from_be_bytes(raw.try_into().unwrap()))
}

fn check_magic(bytes: &[u8], pos: &mut usize, expected: u32) -> Result<()> {
    let found = read_u32(bytes, pos, "magic number")?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses an IDX image file into `(rows, cols, pixels scaled by 1/255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0;
    check_magic(bytes, &mut pos, IDX_IMAGES_MAGIC)?;
    let n = read_u32(bytes, &mut pos, "image count")? as usize;
    let rows = read_u32(bytes, &mut pos, "row count")? as usize;
    let cols = read_u32(bytes, &mut pos, "column count")? as usize;
    let len = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or(DataError::Truncated("pixel data"))?;
    let raw = bytes.get(pos..pos + len).ok_or(DataError::Truncated("pixel data"))?;
    Ok((rows, cols, raw.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut pos = 0;
    check_magic(bytes, &mut pos, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, &mut pos, "label count")? as usize;
    let raw = bytes.get(pos..pos + n).ok_or(DataError::Truncated("label data"))?;
    Ok(raw.iter().map(|&b| usize::from(b)).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an IDX image/label pair. The class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (rows, cols, pixels) = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    let images = if rows * cols == 0 { 0 } else { pixels.len() / (rows * cols) };
    if images != labels.len() {
        return Err(DataError::CountMismatch {
            images,
            labels: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(
        pixels,
        InputShape::Image {
            channels: 1,
            height: rows,
            width: cols,
        },
        Some(labels),
        classes,
        Split::Train,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn labels(values: &[u8]) -> Vec<u8> {
        let mut b = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&(values.len() as u32).to_be_bytes());
        b.extend_from_slice(values);
        b
    }

    #[test]
    fn pixels_are_scaled() {
        let (r, c, px) = parse_idx_images(&images(1, 2, 2, &[0, 255, 128, 0])).unwrap();
        assert_eq!((r, c), (2, 2));
        assert_eq!(px, vec![0.0, 1.0, 128.0 / 255.0, 0.0]);
        assert!((px[2] - 0.501_960_784).abs() < 1e-9);
    }

    #[test]
    fn empty_file_is_truncated() {
        assert!(matches!(parse_idx_images(&[]), Err(DataError::Truncated(_))));
        assert!(matches!(parse_idx_labels(&[]), Err(DataError::Truncated(_))));
    }

    #[test]
    fn swapped_magic_is_rejected() {
        let err = parse_idx_images(&labels(&[1, 2])).unwrap_err();
        assert!(matches!(err, DataError::BadMagic { found: IDX_LABELS_MAGIC, .. }));
    }

    #[test]
    fn short_pixel_block_is_truncated() {
        assert!(matches!(
            parse_idx_images(&images(2, 2, 2, &[0; 7])),
            Err(DataError::Truncated("pixel data"))
        ));
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, images(100, 1, 1, &[7; 100])).unwrap();
        std::fs::write(&lp, labels(&[1; 99])).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::CountMismatch { images: 100, labels: 99 })
        ));
        std::fs::write(&lp, labels(&[1; 100])).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.classes(), 2);
    }
}
