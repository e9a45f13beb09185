//! Row-major 8-bit RGB image buffer and conversions to/from the float
//! tensors the tokenizer consumes ([3, h, w], values in [0, 1]).

use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("pixel buffer holds {got} bytes, {h}x{w} RGB needs {need}")]
    DataLength { h: usize, w: usize, got: usize, need: usize },
    #[error("tensor shape {shape:?} is not [3, h, w]")]
    NotChw { shape: Vec<usize> },
    #[error("ppm: {0}")]
    Ppm(String),
}

/// Interleaved RGB, row-major, one byte per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        let need = h * w * 3;
        if data.len() != need {
            return Err(ImageError::DataLength { h, w, got: data.len(), need });
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.extend_from_slice(&rgb);
        }
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// [3, h, w] tensor with channels planar and values scaled to [0, 1].
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.h * self.w;
        let mut out = vec![T::zero(); 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = T::from_f64(self.data[p * 3 + c] as f64 / 255.0);
            }
        }
        Tensor::from_vec(&[3, self.h, self.w], out).expect("sized above")
    }

    /// Inverse of `to_tensor`: clamp to [0, 1], scale by 255, round to nearest.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self, ImageError> {
        if t.rank() != 3 || t.shape()[0] != 3 {
            return Err(ImageError::NotChw { shape: t.shape().to_vec() });
        }
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let plane = h * w;
        let src = t.data();
        let mut data = vec![0u8; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                let v = src[c * plane + p].as_f64().clamp(0.0, 1.0);
                data[p * 3 + c] = (v * 255.0).round() as u8;
            }
        }
        Ok(Self { h, w, data })
    }
}

/// Binary PPM (P6, maxval 255) encoding of the image.
pub fn to_ppm(img: &ImageU8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Parses binary PPM (P6, maxval 255). Header comments are skipped; exactly
/// one whitespace byte separates the header from the pixel payload.
pub fn from_ppm(bytes: &[u8]) -> Result<ImageU8, ImageError> {
    let err = |m: &str| ImageError::Ppm(m.to_string());
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err("missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // Skip whitespace and `#` comments running to end of line.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err("truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(err("expected decimal header field"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .expect("digits are utf8")
            .parse()
            .map_err(|_| err("header field out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err("missing separator after header")),
    }
    let need = w * h * 3;
    let payload = &bytes[pos..];
    if payload.len() != need {
        return Err(err(&format!("payload holds {} bytes, {w}x{h} needs {need}", payload.len())));
    }
    ImageU8::new(h, w, payload.to_vec())
}

/// Mean squared error over all channels, computed in f64 on [0, 1] values.
pub fn mse(a: &ImageU8, b: &ImageU8) -> Result<f64, TensorError> {
    if a.h != b.h || a.w != b.w {
        return Err(TensorError::Incompatible {
            op: "image mse",
            detail: format!("{}x{} vs {}x{}", a.h, a.w, b.h, b.w),
        });
    }
    let n = a.data.len() as f64;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 / 255.0 - y as f64 / 255.0;
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in dB against peak 1.0; +inf for identical images.
pub fn psnr(a: &ImageU8, b: &ImageU8) -> Result<f64, TensorError> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * e.log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_is_exact() {
        let mut img = ImageU8::filled(4, 5, [10, 200, 0]);
        img.set(2, 3, [255, 0, 7]);
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), &[3, 4, 5]);
        let back = ImageU8::from_tensor(&t).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn from_tensor_clamps_out_of_range() {
        let t = Tensor::from_vec(&[3, 1, 1], vec![-0.5f32, 0.5, 1.5]).unwrap();
        let img = ImageU8::from_tensor(&t).unwrap();
        assert_eq!(img.get(0, 0), [0, 128, 255]);
    }

    #[test]
    fn psnr_infinite_on_identical_and_finite_otherwise() {
        let a = ImageU8::filled(2, 2, [100, 100, 100]);
        let mut b = a.clone();
        assert_eq!(psnr(&a, &b).unwrap(), f64::INFINITY);
        b.set(0, 0, [101, 100, 100]);
        let p = psnr(&a, &b).unwrap();
        assert!(p > 40.0 && p.is_finite());
    }

    #[test]
    fn wrong_buffer_length_rejected() {
        assert!(matches!(
            ImageU8::new(2, 2, vec![0; 11]),
            Err(ImageError::DataLength { need: 12, got: 11, .. })
        ));
    }

    #[test]
    fn ppm_roundtrip_and_header() {
        let mut img = ImageU8::filled(3, 2, [9, 8, 7]);
        img.set(2, 1, [0, 255, 1]);
        let ppm = to_ppm(&img);
        assert!(ppm.starts_with(b"P6\n2 3\n255\n"));
        assert_eq!(from_ppm(&ppm).unwrap(), img);
    }

    #[test]
    fn ppm_accepts_comments_and_rejects_malformed() {
        let img = ImageU8::filled(1, 2, [1, 2, 3]);
        let mut with_comment = b"P6\n# made by hand\n2 1\n# again\n255\n".to_vec();
        with_comment.extend_from_slice(img.data());
        assert_eq!(from_ppm(&with_comment).unwrap(), img);

        assert!(matches!(from_ppm(b"P5\n1 1\n255\n"), Err(ImageError::Ppm(_))));
        assert!(matches!(from_ppm(b"P6\n1 1\n254\nxyz"), Err(ImageError::Ppm(_))));
        let short = to_ppm(&img);
        assert!(matches!(from_ppm(&short[..short.len() - 1]), Err(ImageError::Ppm(_))));
        let mut maxval_missing = b"P6\n2 1\n".to_vec();
        maxval_missing.extend_from_slice(img.data());
        assert!(matches!(from_ppm(&maxval_missing), Err(ImageError::Ppm(_))));
    }
}
