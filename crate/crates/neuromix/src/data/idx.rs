//! IDX image/label files (the MNIST container format): big-endian, magic
//! 0x00000803 for 3-d image tensors and 0x00000801 for 1-d label vectors.
//! Pixels are scaled to [0,1].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{DataKind, Dataset};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        if self.at + 4 > self.bytes.len() {
            return Err(Error::Format(format!("{}: truncated header", self.path)));
        }
        let v = u32::from_be_bytes(self.bytes[self.at..self.at + 4].try_into().unwrap());
        self.at += 4;
        Ok(v)
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.at + len {
            return Err(Error::Format(format!(
                "{}: truncated payload, want {len} bytes, have {}",
                self.path,
                self.bytes.len() - self.at
            )));
        }
        if self.bytes.len() > self.at + len {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes after payload",
                self.path,
                self.bytes.len() - self.at - len
            )));
        }
        Ok(&self.bytes[self.at..self.at + len])
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let bytes =
        fs::read(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Format(format!("{}: empty file", path.display())));
    }
    Ok(bytes)
}

fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    let mut cur = Cursor { bytes: &bytes, at: 0, path: path.display().to_string() };
    let magic = cur.u32_be()?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = cur.u32_be()? as usize;
    if n == 0 {
        return Err(Error::Format(format!("{}: zero items", path.display())));
    }
    let payload = cur.payload(n)?;
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX3 image file (plus an optional IDX1 label file) into an image
/// dataset of `1×H×W` samples scaled to [0,1].
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let bytes = read_file(images_path)?;
    let mut cur = Cursor { bytes: &bytes, at: 0, path: images_path.display().to_string() };
    let magic = cur.u32_be()?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let n = cur.u32_be()? as usize;
    let h = cur.u32_be()? as usize;
    let w = cur.u32_be()? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!(
            "{}: degenerate dimensions {n}×{h}×{w}",
            images_path.display()
        )));
    }
    let payload = cur.payload(n * h * w)?;
    let samples: Vec<Tensor> = payload
        .chunks(h * w)
        .map(|px| {
            let data: Vec<f64> = px.iter().map(|&b| f64::from(b) / 255.0).collect();
            Tensor::new(vec![1, h, w], data).expect("idx sample shape")
        })
        .collect();

    let labels = match labels_path {
        Some(lp) => {
            let labels = load_labels(lp)?;
            if labels.len() != n {
                return Err(Error::Format(format!(
                    "{} has {n} images but {} has {} labels",
                    images_path.display(),
                    lp.display(),
                    labels.len()
                )));
            }
            Some(labels)
        }
        None => None,
    };
    Dataset::new(samples, labels, DataKind::Image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx3(n: u32, h: u32, w: u32, px: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        v.extend_from_slice(&n.to_be_bytes());
        v.extend_from_slice(&h.to_be_bytes());
        v.extend_from_slice(&w.to_be_bytes());
        v.extend_from_slice(px);
        v
    }

    fn idx1(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn tmp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    #[test]
    fn reads_handcrafted_fixture_exactly() {
        let imgs = tmp(&idx3(2, 2, 2, &[0, 64, 128, 255, 10, 20, 30, 40]));
        let lbls = tmp(&idx1(&[7, 3]));
        let d = load_idx(imgs.path(), Some(lbls.path())).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.sample_shape(), &[1, 2, 2]);
        assert_eq!(d.sample(0).data(), &[0.0, 64.0 / 255.0, 128.0 / 255.0, 1.0]);
        assert_eq!(d.labels().unwrap(), &[7, 3]);
    }

    #[test]
    fn label_count_mismatch_is_error() {
        let imgs = tmp(&idx3(2, 2, 2, &[0; 8]));
        let lbls = tmp(&idx1(&[1]));
        assert!(load_idx(imgs.path(), Some(lbls.path())).is_err());
    }

    #[test]
    fn empty_file_is_error() {
        let imgs = tmp(&[]);
        assert!(load_idx(imgs.path(), None).is_err());
    }

    #[test]
    fn bad_magic_is_error() {
        let mut bytes = idx3(1, 2, 2, &[0; 4]);
        bytes[3] = 0x99;
        let imgs = tmp(&bytes);
        match load_idx(imgs.path(), None) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_error() {
        let imgs = tmp(&idx3(2, 2, 2, &[0; 5]));
        match load_idx(imgs.path(), None) {
            Err(Error::Format(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
