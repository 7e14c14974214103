//! 8-bit image files: binary PPM always, PNG behind the `png` feature.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `b / 255`.
pub fn from_u8<T: Scalar>(b: u8) -> T {
    T::from_usize_lossy(b as usize) / T::lit(255.0)
}

fn check_rgb<T: Scalar>(img: &Array<T>) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w, 3] => Ok((*h, *w)),
        s => Err(Error::shape("image", s, &[0, 0, 3])),
    }
}

/// Quantizes an `H×W×3` image in `[0, 1]` to bytes.
pub fn quantize<T: Scalar>(img: &Array<T>) -> Result<Vec<u8>> {
    check_rgb(img)?;
    Ok(img.data().iter().map(|&v| to_u8(v)).collect())
}

pub fn write_ppm<T: Scalar>(path: &Path, img: &Array<T>) -> Result<()> {
    let (h, w) = check_rgb(img)?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    out.write_all(&quantize(img)?)?;
    out.flush()?;
    Ok(())
}

fn header_token(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::format(path.display().to_string(), "truncated PPM header"));
        }
        let c = byte[0] as char;
        if c == '#' {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

/// Reads a binary PPM into an `H×W×3` array with values in `[0, 1]`.
pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Array<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |reason: &str| Error::format(path.display().to_string(), reason);
    if header_token(&mut r, path)? != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let mut num = || -> Result<usize> {
        header_token(&mut r, path)?
            .parse()
            .map_err(|_| bad("malformed PPM header"))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let mut bytes = vec![0u8; w * h * 3];
    r.read_exact(&mut bytes)?;
    Array::new(vec![h, w, 3], bytes.into_iter().map(from_u8).collect())
}

#[cfg(feature = "png")]
pub fn write_png<T: Scalar>(path: &Path, img: &Array<T>) -> Result<()> {
    let (h, w) = check_rgb(img)?;
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::format(path.display().to_string(), e.to_string());
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(&quantize(img)?).map_err(fail)?;
    writer.finish().map_err(fail)?;
    Ok(())
}

#[cfg(feature = "png")]
pub fn read_png<T: Scalar>(path: &Path) -> Result<Array<T>> {
    let fail = |e: png::DecodingError| Error::format(path.display().to_string(), e.to_string());
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec.read_info().map_err(fail)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path.display().to_string(), "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path.display().to_string(), "expected 8-bit RGB"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    Array::new(vec![h, w, 3], buf[..w * h * 3].iter().map(|&b| from_u8(b)).collect())
}

/// Writes by extension: `.png` (when enabled), anything else as PPM.
pub fn write_image<T: Scalar>(path: &Path, img: &Array<T>) -> Result<()> {
    #[cfg(feature = "png")]
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        return write_png(path, img);
    }
    write_ppm(path, img)
}

pub fn read_image<T: Scalar>(path: &Path) -> Result<Array<T>> {
    #[cfg(feature = "png")]
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        return read_png(path);
    }
    read_ppm(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let img = Array::from_fn(vec![3, 5, 3], |i| (i as f64) / 44.0);
        write_ppm(&p, &img).unwrap();
        let back: Array<f64> = read_ppm(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n5 3\n255\n"));
    }

    #[cfg(feature = "png")]
    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Array::from_fn(vec![4, 2, 3], |i| (i as f32) / 23.0);
        write_image(&p, &img).unwrap();
        let back: Array<f32> = read_image(&p).unwrap();
        assert_eq!(quantize(&back).unwrap(), quantize(&img).unwrap());
    }
}
