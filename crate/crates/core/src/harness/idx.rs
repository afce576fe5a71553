//! IDX files: big-endian magic `0x0000 08 0d` (unsigned bytes, `d` dims),
//! `d` big-endian `u32` sizes, then the payload. Images use three dims
//! (`n × rows × cols`) for one channel and four (`n × rows × cols × c`)
//! otherwise; labels use one.

use std::path::Path;

use super::dataset::ToyDataset;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

const UBYTE: u8 = 0x08;

fn header(dims: &[usize]) -> Vec<u8> {
    let mut buf = vec![0, 0, UBYTE, dims.len() as u8];
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_be_bytes());
    }
    buf
}

fn parse<'a>(buf: &'a [u8], allowed_dims: &[u8]) -> Result<(Vec<usize>, &'a [u8])> {
    if buf.len() < 4 {
        return Err(Error::Truncated(buf.len()));
    }
    let magic = u32::from_be_bytes(buf[..4].try_into().unwrap());
    if buf[0] != 0 || buf[1] != 0 || buf[2] != UBYTE || !allowed_dims.contains(&buf[3]) {
        return Err(Error::Format {
            what: "IDX file",
            detail: format!("bad magic 0x{magic:08x}"),
        });
    }
    let rank = buf[3] as usize;
    let end = 4 + 4 * rank;
    if buf.len() < end {
        return Err(Error::Truncated(buf.len()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let need = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format {
        what: "IDX file",
        detail: "dimensions overflow".into(),
    })?;
    if buf.len() < end + need {
        return Err(Error::Truncated(buf.len()));
    }
    if buf.len() > end + need {
        return Err(Error::Format {
            what: "IDX file",
            detail: format!("{} trailing bytes", buf.len() - end - need),
        });
    }
    Ok((dims, &buf[end..]))
}

/// Encodes HWC images with values in `[0, 1]` as unsigned bytes.
pub fn encode_images(images: &[Tensor]) -> Result<Vec<u8>> {
    let shape = images.first().map_or(vec![0, 0, 1], |t| t.shape().to_vec());
    if shape.len() != 3 {
        return Err(Error::shape("encode_images", format!("{shape:?}, expected [rows, cols, channels]")));
    }
    let dims = if shape[2] == 1 {
        vec![images.len(), shape[0], shape[1]]
    } else {
        vec![images.len(), shape[0], shape[1], shape[2]]
    };
    let mut buf = header(&dims);
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::shape("encode_images", format!("{:?} vs {shape:?}", img.shape())));
        }
        buf.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(buf)
}

/// Decodes an image file into HWC tensors scaled to `[0, 1]`.
pub fn decode_images(buf: &[u8]) -> Result<Vec<Tensor>> {
    let (dims, payload) = parse(buf, &[3, 4])?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let c = dims.get(3).copied().unwrap_or(1);
    let per = h * w * c;
    (0..n)
        .map(|i| {
            let data = payload[i * per..(i + 1) * per].iter().map(|&b| b as f64 / 255.0).collect();
            Tensor::new(vec![h, w, c], data)
        })
        .collect()
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut buf = header(&[labels.len()]);
    for &y in labels {
        buf.push(u8::try_from(y).map_err(|_| Error::domain("encode_labels", format!("label {y} exceeds 255")))?);
    }
    Ok(buf)
}

pub fn decode_labels(buf: &[u8]) -> Result<Vec<usize>> {
    let (_, payload) = parse(buf, &[1])?;
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Writes `data` as an image file and a label file.
pub fn write_idx(data: &ToyDataset, images: &Path, labels: &Path) -> Result<()> {
    std::fs::write(images, encode_images(&data.images)?)?;
    std::fs::write(labels, encode_labels(&data.labels)?)?;
    Ok(())
}

/// Reads an image file and, if given, its label file. Without labels every
/// example is labelled 0.
pub fn ingest_idx(images: &Path, labels: Option<&Path>, split: &str) -> Result<ToyDataset> {
    let imgs = decode_images(&std::fs::read(images)?)?;
    let labels = match labels {
        Some(p) => decode_labels(&std::fs::read(p)?)?,
        None => vec![0; imgs.len()],
    };
    if labels.len() != imgs.len() {
        return Err(Error::Format {
            what: "IDX label file",
            detail: format!("{} labels for {} images", labels.len(), imgs.len()),
        });
    }
    Ok(ToyDataset {
        images: imgs,
        labels,
        split: split.to_string(),
        seed: 0,
        foreground: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_is_truncated_at_16() {
        let buf = header(&[1, 28, 28]);
        assert_eq!(buf.len(), 16);
        let err = decode_images(&buf).unwrap_err();
        assert_eq!(err.to_string(), "truncated at offset 16");
    }

    #[test]
    fn single_mnist_sized_image() {
        let mut buf = header(&[1, 28, 28]);
        buf.extend(std::iter::repeat_n(255u8, 28 * 28));
        let imgs = decode_images(&buf).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].shape(), &[28, 28, 1]);
        assert!(imgs[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = header(&[1]);
        buf.push(3);
        buf[2] = 0x09;
        assert!(decode_labels(&buf).is_err());
        assert!(decode_images(&encode_labels(&[1]).unwrap()).is_err());
    }
}
