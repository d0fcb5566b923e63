//! Binary PPM (P6, maxval 255) images.

use anyhow::{bail, Result};
use hit_core::reference::to_byte;
use hit_core::Tensor;

/// Encodes an `[h, w, 3]` image with values in `[-1, 1]`.
pub fn encode(img: &Tensor) -> Result<Vec<u8>> {
    let [h, w, c]: [usize; 3] = match img.shape().try_into() {
        Ok(s) => s,
        Err(_) => bail!("expected an [h, w, 3] image, got {:?}", img.shape()),
    };
    if c != 3 {
        bail!("expected 3 channels, got {c}");
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Splits `[b, h, w, 3]` into one encoded file per image.
pub fn encode_batch(imgs: &Tensor) -> Result<Vec<Vec<u8>>> {
    let shape = imgs.shape();
    if shape.len() != 4 {
        bail!("expected [b, h, w, 3] images, got {shape:?}");
    }
    (0..shape[0]).map(|i| encode(&imgs.slice_axis(0, i, 1)?.reshape(&shape[1..])?)).collect()
}

/// Width, height and the raw bytes of a P6 file written by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!("truncated PPM header");
        }
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
    }
    if fields[0] != "P6" || fields[3] != "255" {
        bail!("unsupported PPM header {fields:?}");
    }
    let (w, h): (usize, usize) = (fields[1].parse()?, fields[2].parse()?);
    let body = &bytes[pos + 1..];
    if body.len() != w * h * 3 {
        bail!("PPM body has {} bytes, expected {}", body.len(), w * h * 3);
    }
    Ok((w, h, body.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_byte_mapping() {
        let img = Tensor::new(&[1, 2, 3], vec![-1.0, 0.0, 1.0, 0.5, -0.5, 2.0]).unwrap();
        let bytes = encode(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[11..], &[0, 128, 255, 191, 64, 255]);
        let (w, h, body) = decode(&bytes).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(body, &bytes[11..]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(encode(&Tensor::zeros(&[2, 2, 4])).is_err());
        assert!(encode(&Tensor::zeros(&[2, 2])).is_err());
        assert!(decode(b"P5\n1 1\n255\n\0").is_err());
    }
}
