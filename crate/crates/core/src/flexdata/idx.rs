//! IDX (MNIST ubyte) reading and writing.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::{Dataset, Label, ModalityId, ModalitySequence, Objective, Sample, TaskId, TaskSpec};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IdxData {
    /// `count` images of `rows × cols` unsigned bytes.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
    },
    Labels(Vec<u8>),
}

impl IdxData {
    /// Image `i` scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Option<Matrix> {
        match self {
            IdxData::Images {
                count,
                rows,
                cols,
                pixels,
            } if i < *count => {
                let n = rows * cols;
                let data = pixels[i * n..(i + 1) * n]
                    .iter()
                    .map(|&b| f64::from(b) / 255.0)
                    .collect();
                Some(Matrix::from_vec(*rows, *cols, data).expect("sized"))
            }
            _ => None,
        }
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated header at byte {at}")))
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_u32(bytes, 0)?;
    let ndims = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        other => return Err(Error::Format(format!("unknown IDX magic {other:#010x}"))),
    };
    let dims: Vec<usize> = (0..ndims)
        .map(|k| read_u32(bytes, 4 + 4 * k).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let header = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    let payload = payload[..expected].to_vec();
    Ok(if magic == IMAGES_MAGIC {
        IdxData::Images {
            count: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels: payload,
        }
    } else {
        IdxData::Labels(payload)
    })
}

pub fn write_idx(data: &IdxData) -> Vec<u8> {
    let mut out = Vec::new();
    match data {
        IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } => {
            out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
            for d in [count, rows, cols] {
                out.extend_from_slice(&(*d as u32).to_be_bytes());
            }
            out.extend_from_slice(pixels);
        }
        IdxData::Labels(labels) => {
            out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
        }
    }
    out
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    parse_idx(&bytes)
}

/// Two-modality digit task: modality `rows` feeds each image row as one
/// time step; modality `colsum` is the per-column mean intensity as a
/// one-dimensional sequence over columns.
pub fn mnist_task(task_id: &str, images: &IdxData, labels: &IdxData, limit: Option<usize>) -> Result<Dataset> {
    let IdxData::Labels(ys) = labels else {
        return Err(Error::Format("expected a label file".into()));
    };
    let IdxData::Images { count, .. } = images else {
        return Err(Error::Format("expected an image file".into()));
    };
    if *count != ys.len() {
        return Err(Error::Format(format!("{count} images but {} labels", ys.len())));
    }
    let n = limit.map_or(*count, |l| l.min(*count));
    let rows_id = ModalityId::from("rows");
    let cols_id = ModalityId::from("colsum");
    let mut samples = Vec::with_capacity(n);
    for (i, &y) in ys.iter().enumerate().take(n) {
        let img = images.image(i).expect("index checked");
        let (h, w) = img.shape();
        let mut colsum = Matrix::zeros(w, 1);
        for c in 0..w {
            colsum[(c, 0)] = img.column(c).iter().sum::<f64>() / h as f64;
        }
        let mut mods = BTreeMap::new();
        mods.insert(
            rows_id.clone(),
            ModalitySequence::new(rows_id.clone(), img, (0..h).map(|t| t as f64).collect())?,
        );
        mods.insert(
            cols_id.clone(),
            ModalitySequence::new(cols_id.clone(), colsum, (0..w).map(|t| t as f64).collect())?,
        );
        let y = y as usize;
        if y >= 10 {
            return Err(Error::Format(format!("label {y} outside 0..10")));
        }
        samples.push(Sample {
            modalities: mods,
            label: Label::Class(y),
        });
    }
    let spec = TaskSpec::new(
        TaskId::from(task_id),
        [rows_id, cols_id].into_iter().collect::<BTreeSet<_>>(),
        Objective::Multiclass(10),
    )?;
    Dataset::new(spec, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_tiny_image_file() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend_from_slice(&[0, 255, 128, 0]);
        let d = parse_idx(&bytes).unwrap();
        let img = d.image(0).unwrap();
        assert_eq!(img[(0, 0)], 0.0);
        assert_eq!(img[(0, 1)], 1.0);
        assert!((img[(1, 0)] - 0.50196).abs() < 1e-5);
        assert_eq!(img[(1, 1)], 0.0);
    }

    #[test]
    fn decodes_labels() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 1];
        assert_eq!(parse_idx(&bytes).unwrap(), IdxData::Labels(vec![7, 2, 1]));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(parse_idx(&[0x12, 0x34, 0x56, 0x78]), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 7]), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(Error::Format(_))));
    }

    #[test]
    fn mnist_task_has_two_modalities() {
        let images = IdxData::Images {
            count: 2,
            rows: 3,
            cols: 2,
            pixels: vec![255, 0, 255, 0, 0, 0, 0, 0, 0, 0, 0, 255],
        };
        let labels = IdxData::Labels(vec![4, 9]);
        let ds = mnist_task("digits", &images, &labels, None).unwrap();
        assert_eq!(ds.len(), 2);
        let s = &ds.samples[0];
        assert_eq!(s.modalities[&ModalityId::from("rows")].values.shape(), (3, 2));
        let cs = &s.modalities[&ModalityId::from("colsum")].values;
        assert_eq!(cs.shape(), (2, 1));
        assert!((cs[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(ds.samples[1].label, Label::Class(9));
    }
}
