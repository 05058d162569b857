//! Image file I/O: binary PPM ("P6") and the raw tensor format.
//!
//! The tensor format stores unquantized pixel data losslessly:
//!
//! ```text
//! bytes 0..4   magic "SNS1"
//! bytes 4..16  height, width, channels as u32 little-endian
//! bytes 16..   height*width*channels f32 values, little-endian, row-major (y, x, c)
//! ```
//!
//! PPM files are written with maxval 255, rounding half away from zero.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

const TENSOR_MAGIC: &[u8; 4] = b"SNS1";

/// Writes a 3-channel image as binary PPM, rounding to 8-bit values.
pub fn write_ppm(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::InvalidArgument("PPM output requires a 3-channel image".into()));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.reserve(img.data().len());
    for &v in img.data() {
        // round half away from zero; pixels are nonnegative
        bytes.push((v as f64 + 0.5).floor().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary PPM ("P6", maxval 255).
pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;

    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(Error::Format("PPM magic is not P6".into()));
    }
    pos += 2;

    let mut next_uint = |bytes: &[u8]| -> Result<usize> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("PPM header field is not a number".into()));
        }
        std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Format("PPM header is not ASCII".into()))?
            .parse::<usize>()
            .map_err(|_| Error::Format("PPM header value out of range".into()))
    };

    let width = next_uint(&bytes)?;
    let height = next_uint(&bytes)?;
    let maxval = next_uint(&bytes)?;
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval must be 255, got {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("PPM header not terminated by whitespace".into()));
    }
    pos += 1;

    let need = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Format("PPM dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "PPM payload truncated: need {need} bytes, have {}",
            payload.len()
        )));
    }
    let data = payload[..need].iter().map(|&b| b as f32).collect();
    ImageTensor::new(height, width, 3, data)
}

/// Writes an image in the lossless tensor format.
pub fn write_tensor(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + img.data().len() * 4);
    bytes.extend_from_slice(TENSOR_MAGIC);
    bytes.extend_from_slice(&(img.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(img.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(img.channels() as u32).to_le_bytes());
    for &v in img.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads an image from the lossless tensor format.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Format("tensor file shorter than its header".into()));
    }
    if &bytes[0..4] != TENSOR_MAGIC {
        return Err(Error::Format("tensor magic is not SNS1".into()));
    }
    let read_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let height = read_u32(4) as usize;
    let width = read_u32(8) as usize;
    let channels = read_u32(12) as usize;
    let need = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("tensor dimensions overflow".into()))?;
    if bytes.len() != 16 + need {
        return Err(Error::Format(format!(
            "tensor payload has {} bytes, expected {need}",
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ImageTensor::new(height, width, channels, data)
}

/// Reads an image, dispatching on the file's magic bytes (PPM or tensor).
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let mut magic = [0u8; 2];
    {
        use std::io::Read;
        let mut f = fs::File::open(path)?;
        f.read_exact(&mut magic)
            .map_err(|_| Error::Format("file shorter than a magic header".into()))?;
    }
    match &magic {
        b"P6" => read_ppm(path),
        b"SN" => read_tensor(path),
        _ => Err(Error::Format("unrecognized image format (expected P6 or SNS1)".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use tempfile::tempdir;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        let mut rng = CounterRng::new(seed);
        ImageTensor::from_fn(h, w, c, |_, _, _| rng.next_range(0.0, 255.0)).unwrap()
    }

    #[test]
    fn tensor_round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.sns");
        for &c in &[1usize, 3] {
            let img = random_image(7, 5, c, 11 + c as u64);
            write_tensor(&img, &path).unwrap();
            let back = read_tensor(&path).unwrap();
            assert_eq!(img.data(), back.data());
            assert_eq!((img.height(), img.width(), img.channels()), (7, 5, c));
            assert_eq!(back.channels(), c);
        }
    }

    #[test]
    fn tensor_file_size_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.sns");
        let img = ImageTensor::filled(1, 1, 3, 9.0).unwrap();
        write_tensor(&img, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 4 + 12 + 12);
    }

    #[test]
    fn ppm_round_trip_equals_rounding() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = random_image(6, 9, 3, 23);
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        for (&a, &b) in img.data().iter().zip(back.data()) {
            let rounded = (a as f64 + 0.5).floor().clamp(0.0, 255.0) as f32;
            assert_eq!(rounded, b);
        }
    }

    #[test]
    fn ppm_rejects_gray_images_and_bad_headers() {
        let dir = tempdir().unwrap();
        let gray = ImageTensor::filled(2, 2, 1, 0.0).unwrap();
        assert!(write_ppm(&gray, dir.path().join("g.ppm")).is_err());

        let bad = dir.path().join("bad.ppm");
        std::fs::write(&bad, b"P5\n2 2\n255\n0000").unwrap();
        assert!(read_ppm(&bad).is_err());

        std::fs::write(&bad, b"P6\n2 2\n65535\n").unwrap();
        assert!(matches!(read_ppm(&bad), Err(Error::Format(_))));

        std::fs::write(&bad, b"P6\n2 2\n255\nxx").unwrap();
        assert!(read_ppm(&bad).is_err()); // truncated payload
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# comment line\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!(img.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn tensor_rejects_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.sns");
        let img = random_image(3, 3, 3, 5);
        write_tensor(&img, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format(_))));

        write_tensor(&img, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format(_))));
    }

    #[test]
    fn read_image_dispatches_on_magic() {
        let dir = tempdir().unwrap();
        let img = random_image(4, 4, 3, 77);
        let p1 = dir.path().join("a.ppm");
        let p2 = dir.path().join("b.sns");
        write_ppm(&img, &p1).unwrap();
        write_tensor(&img, &p2).unwrap();
        assert_eq!(read_image(&p2).unwrap().data(), img.data());
        assert_eq!(read_image(&p1).unwrap().height(), 4);
    }
}
