//! Binary PPM (P6) images and PGM (P5) masks.
//!
//! Images are `[3, H, W]` tensors with values in [0, 1], stored
//! channel-planar in memory and interleaved on disk at 8 bits per
//! sample. Masks are `[1, H, W]` binary tensors; any nonzero source
//! byte reads back as 1.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn quantize<T: Scalar>(v: T) -> u8 {
    let x = v.as_f64().clamp(0.0, 1.0);
    (x * 255.0).round() as u8
}

/// Write a `[3, H, W]` image as binary PPM.
pub fn write_ppm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Geometry(format!(
            "PPM writer expects [3, H, W], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let data = image.data();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let plane = h * w;
    let mut row = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        row.push(quantize(data[i]));
        row.push(quantize(data[plane + i]));
        row.push(quantize(data[2 * plane + i]));
    }
    out.write_all(&row)?;
    out.flush()?;
    Ok(())
}

/// Write a `[1, H, W]` binary mask as binary PGM (0 or 255).
pub fn write_pgm<T: Scalar>(path: &Path, mask: &Tensor<T>) -> Result<()> {
    let shape = mask.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::Geometry(format!(
            "PGM writer expects [1, H, W], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let data = mask.data();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| if v == T::zero() { 0u8 } else { 255u8 })
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

struct HeaderReader<R: Read> {
    inner: R,
    peeked: Option<u8>,
}

impl<R: Read> HeaderReader<R> {
    fn next_byte(&mut self) -> Result<u8> {
        if let Some(b) = self.peeked.take() {
            return Ok(b);
        }
        let mut buf = [0u8; 1];
        let n = self.inner.read(&mut buf)?;
        if n == 0 {
            return Err(Error::Parse("unexpected end of PNM file".into()));
        }
        Ok(buf[0])
    }

    /// Next whitespace-delimited token, skipping `#` comments.
    fn next_token(&mut self) -> Result<String> {
        let mut tok = Vec::new();
        loop {
            let b = self.next_byte()?;
            if b == b'#' {
                // comment runs to end of line
                loop {
                    let c = self.next_byte()?;
                    if c == b'\n' {
                        break;
                    }
                }
                continue;
            }
            if b.is_ascii_whitespace() {
                if tok.is_empty() {
                    continue;
                }
                break;
            }
            tok.push(b);
        }
        String::from_utf8(tok).map_err(|_| Error::Parse("non-ascii PNM header".into()))
    }

    fn next_usize(&mut self) -> Result<usize> {
        let tok = self.next_token()?;
        tok.parse()
            .map_err(|_| Error::Parse(format!("bad PNM header number {tok:?}")))
    }
}

fn read_pnm_any(path: &Path, allowed: &[&str]) -> Result<(String, usize, usize, Vec<u8>)> {
    let file = BufReader::new(File::open(path)?);
    let mut r = HeaderReader {
        inner: file,
        peeked: None,
    };
    let got = r.next_token()?;
    if !allowed.contains(&got.as_str()) {
        return Err(Error::Parse(format!(
            "expected {} magic in {}, found {got:?}",
            allowed.join(" or "),
            path.display()
        )));
    }
    let w = r.next_usize()?;
    let h = r.next_usize()?;
    let maxval = r.next_usize()?;
    if maxval != 255 {
        return Err(Error::Parse(format!("only maxval 255 supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Parse("zero-sized PNM image".into()));
    }
    // The single whitespace byte after maxval was consumed by the
    // tokenizer; the rest is raw sample data.
    let samples = if got == "P6" { 3 * w * h } else { w * h };
    let mut data = vec![0u8; samples];
    r.inner.read_exact(&mut data).map_err(|_| {
        Error::Parse(format!(
            "PNM payload truncated: expected {samples} bytes in {}",
            path.display()
        ))
    })?;
    Ok((got, w, h, data))
}

fn read_pnm(path: &Path, magic: &str) -> Result<(usize, usize, Vec<u8>)> {
    let (_, w, h, data) = read_pnm_any(path, &[magic])?;
    Ok((w, h, data))
}

/// Read a binary PPM into a `[3, H, W]` tensor with values v/255.
pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let (w, h, raw) = read_pnm(path, "P6")?;
    let plane = w * h;
    let mut data = vec![T::zero(); 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            // divide in f64 so the narrowed value is the correctly
            // rounded v/255, matching what writers produced
            data[c * plane + i] = T::from_f64(raw[3 * i + c] as f64 / 255.0);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Read a binary PGM as a binary mask: any nonzero byte becomes 1.
pub fn read_pgm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let (w, h, raw) = read_pnm(path, "P5")?;
    let data = raw
        .iter()
        .map(|&b| if b == 0 { T::zero() } else { T::one() })
        .collect();
    Tensor::from_vec(&[1, h, w], data)
}

/// Read a mask from either a PGM (P5) or PPM (P6) file: a pixel with
/// any nonzero sample becomes 1.
pub fn read_mask<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let (magic, w, h, raw) = read_pnm_any(path, &["P5", "P6"])?;
    let plane = w * h;
    let data = (0..plane)
        .map(|i| {
            let on = if magic == "P6" {
                raw[3 * i] != 0 || raw[3 * i + 1] != 0 || raw[3 * i + 2] != 0
            } else {
                raw[i] != 0
            };
            if on {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(&[1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn ppm_roundtrip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        // start from values that are exact multiples of 1/255
        let data: Vec<f32> = (0..3 * 5 * 7)
            .map(|_| rng.gen_range(0..=255u32) as f32 / 255.0)
            .collect();
        let img = Tensor::from_vec(&[3, 5, 7], data.clone()).unwrap();
        write_ppm(&path, &img).unwrap();
        let back = read_ppm::<f32>(&path).unwrap();
        assert_eq!(back.shape(), &[3, 5, 7]);
        assert_eq!(back.to_vec(), data);
    }

    #[test]
    fn pgm_mask_roundtrip_and_binarization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let mask =
            Tensor::from_vec(&[1, 2, 2], vec![0.0f32, 1.0, 1.0, 0.0]).unwrap();
        write_pgm(&path, &mask).unwrap();
        let back = read_pgm::<f32>(&path).unwrap();
        assert_eq!(back.to_vec(), mask.to_vec());

        // hand-written gray values binarize to 1
        let gray = path.with_file_name("gray.pgm");
        std::fs::write(&gray, b"P5\n2 1\n255\n\x00\x7f").unwrap();
        let m = read_pgm::<f32>(&gray).unwrap();
        assert_eq!(m.to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn header_comments_and_whitespace_are_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6 # comment\n# another comment\n 2\t1 \n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_ppm::<f32>(&path).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        let v = img.to_vec();
        // channel-planar: R plane [1,0], G plane [0,1], B plane [0,0]
        assert_eq!(v, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = dir.path().join("bad1.ppm");
        std::fs::write(&bad_magic, b"P3\n1 1\n255\n000").unwrap();
        assert!(read_ppm::<f32>(&bad_magic).is_err());

        let bad_maxval = dir.path().join("bad2.ppm");
        std::fs::write(&bad_maxval, b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap();
        assert!(read_ppm::<f32>(&bad_maxval).is_err());

        let truncated = dir.path().join("bad3.ppm");
        std::fs::write(&truncated, b"P6\n2 2\n255\n\0\0\0").unwrap();
        assert!(read_ppm::<f32>(&truncated).is_err());
    }

    #[test]
    fn mask_reads_from_p5_and_p6() {
        let dir = tempfile::tempdir().unwrap();
        let p5 = dir.path().join("m.pgm");
        std::fs::write(&p5, b"P5\n2 1\n255\n\x00\xff").unwrap();
        let m5 = read_mask::<f32>(&p5).unwrap();
        assert_eq!(m5.shape(), &[1, 1, 2]);
        assert_eq!(m5.to_vec(), vec![0.0, 1.0]);

        let p6 = dir.path().join("m.ppm");
        std::fs::write(&p6, b"P6\n2 1\n255\n\x00\x00\x00\x00\x07\x00").unwrap();
        let m6 = read_mask::<f32>(&p6).unwrap();
        assert_eq!(m6.to_vec(), vec![0.0, 1.0]);
    }
}
