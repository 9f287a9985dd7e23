use std::path::Path;

use crate::data::{Dataset, SplitTag, Targets};
use crate::error::{Error, Result};
use crate::ndcore::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX3 image file into `[n, rows·cols]` pixels scaled to [0, 1].
/// At most `limit` images are decoded.
pub fn parse_idx_images(bytes: &[u8], limit: Option<usize>) -> Result<(Tensor, usize, usize)> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images: magic {magic}, expected {IDX_IMAGES_MAGIC}"
        )));
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let pixels = rows * cols;
    let payload = &bytes[16..];
    if payload.len() < count * pixels {
        return Err(Error::Format(format!(
            "images: payload has {} bytes, header promises {}",
            payload.len(),
            count * pixels
        )));
    }
    let n = limit.map_or(count, |l| l.min(count));
    let data = payload[..n * pixels].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((Tensor::new(vec![n, pixels], data)?, rows, cols))
}

/// Parses an IDX1 label file, returning at most `limit` labels.
pub fn parse_idx_labels(bytes: &[u8], limit: Option<usize>) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels: magic {magic}, expected {IDX_LABELS_MAGIC}"
        )));
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Format(format!(
            "labels: payload has {} bytes, header promises {count}",
            payload.len()
        )));
    }
    let n = limit.map_or(count, |l| l.min(count));
    Ok(payload[..n].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an image/label IDX pair as a 10-class dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;
    let image_count = be_u32(&image_bytes, 4, "images")?;
    let label_count = be_u32(&label_bytes, 4, "labels")?;
    if image_count != label_count {
        return Err(Error::Format(format!(
            "image count {image_count} does not match label count {label_count}"
        )));
    }
    let (x, _, _) = parse_idx_images(&image_bytes, limit)?;
    let labels = parse_idx_labels(&label_bytes, limit)?;
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(Error::Format(format!("label {l} at index {i} is not a digit")));
    }
    let mut d = Dataset::new(x, Targets::Labels { labels, classes: 10 })?;
    d.split = SplitTag::Full;
    d.target_name = "label".into();
    Ok(d)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn images_bytes(magic: u32, images: &[[u8; 4]]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(magic.to_be_bytes());
        b.extend((images.len() as u32).to_be_bytes());
        b.extend(2u32.to_be_bytes());
        b.extend(2u32.to_be_bytes());
        for img in images {
            b.extend(img);
        }
        b
    }

    pub fn labels_bytes(magic: u32, labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(magic.to_be_bytes());
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn parses_hand_built_pair() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, images_bytes(2051, &[[0, 255, 51, 102], [255, 0, 0, 0]])).unwrap();
        std::fs::write(&lp, labels_bytes(2049, &[7, 3])).unwrap();
        let d = load_idx(&ip, &lp, None).unwrap();
        assert_eq!(d.x.shape(), &[2, 4]);
        assert_eq!(d.x.data(), &[0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(d.y, Targets::Labels { labels: vec![7, 3], classes: 10 });

        let d = load_idx(&ip, &lp, Some(1)).unwrap();
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn rejects_bad_magic_truncation_and_mismatch() {
        let good_img = images_bytes(2051, &[[1, 2, 3, 4]]);
        assert!(parse_idx_images(&good_img, None).is_ok());
        assert!(matches!(parse_idx_images(&images_bytes(2052, &[[1, 2, 3, 4]]), None), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&good_img[..good_img.len() - 1], None), Err(Error::Format(_))));
        assert!(matches!(parse_idx_labels(&labels_bytes(2051, &[1]), None), Err(Error::Format(_))));
        let l = labels_bytes(2049, &[1, 2]);
        assert!(matches!(parse_idx_labels(&l[..9], None), Err(Error::Format(_))));

        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, good_img).unwrap();
        std::fs::write(&lp, labels_bytes(2049, &[1, 2])).unwrap();
        assert!(matches!(load_idx(&ip, &lp, None), Err(Error::Format(_))));
    }
}
