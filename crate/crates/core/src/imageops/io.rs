//! 8-bit RGB PNG files and the raw `PYDT` tensor format.
//!
//! `PYDT` layout: the 4 magic bytes `PYDT`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dimensions, then the payload as little-endian `f32`
//! values in row-major order. Several records may be concatenated in one file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageops::ImageTensor;
use crate::real::Real;

pub const PYDT_MAGIC: &[u8; 4] = b"PYDT";

/// Byte value to the internal range: `v / 127.5 - 1`.
#[inline]
pub fn byte_to_unit_signed(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit_signed`] with round-half-up and clamping.
#[inline]
pub fn unit_signed_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn load_png<R: Real>(path: impl AsRef<Path>) -> Result<ImageTensor<R>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: format!(
                "expected 8-bit RGB, got {:?} at {:?}",
                info.color_type, info.bit_depth
            ),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; w * h * 3];
    reader.next_frame(&mut buf)?;
    Ok(ImageTensor::from_fn(3, h, w, |c, y, x| {
        R::of(byte_to_unit_signed(buf[(y * w + x) * 3 + c]))
    }))
}

/// Interleaved RGB bytes of a 3-channel image.
pub fn to_rgb_bytes<R: Real>(img: &ImageTensor<R>) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::shape("3 channels", img.channels()));
    }
    let (h, w) = (img.height(), img.width());
    let mut buf = vec![0u8; w * h * 3];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                buf[(y * w + x) * 3 + c] = unit_signed_to_byte(img.get(c, y, x).f64());
            }
        }
    }
    Ok(buf)
}

pub fn save_png<R: Real>(img: &ImageTensor<R>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = to_rgb_bytes(img)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        img.width() as u32,
        img.height() as u32,
    );
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&buf)?;
    writer.finish()?;
    Ok(())
}

pub fn write_pydt(out: &mut impl Write, dims: &[usize], data: &[f32]) -> std::io::Result<()> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("dims {dims:?} describe {expected} values, got {}", data.len()),
        ));
    }
    out.write_all(PYDT_MAGIC)?;
    out.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_pydt(input: &mut impl Read) -> Result<Option<(Vec<usize>, Vec<f32>)>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = input
            .read(&mut magic[got..])
            .map_err(|e| Error::Format(e.to_string()))?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got == 0 {
        return Ok(None);
    }
    if got < 4 || &magic != PYDT_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let rank = read_u32(input)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let dims = (0..rank)
        .map(|_| read_u32(input).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = dims.iter().product();
    let mut bytes = vec![0u8; count * 4];
    input
        .read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Some((dims, data)))
}

pub fn save_tensor<R: Real>(img: &ImageTensor<R>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let data: Vec<f32> = img.data().iter().map(|v| v.f64() as f32).collect();
    let (c, h, wd) = img.shape();
    write_pydt(&mut w, &[c, h, wd], &data).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor<R: Real>(path: impl AsRef<Path>) -> Result<ImageTensor<R>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (dims, data) = read_pydt(&mut BufReader::new(file))?
        .ok_or_else(|| Error::Format("empty file".into()))?;
    if dims.len() != 3 {
        return Err(Error::Format(format!("expected rank 3, got {dims:?}")));
    }
    ImageTensor::from_vec(
        dims[0],
        dims[1],
        dims[2],
        data.into_iter().map(|v| R::of(v as f64)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_mapping() {
        assert_eq!(byte_to_unit_signed(0), -1.0);
        assert_eq!(byte_to_unit_signed(255), 1.0);
        assert!((byte_to_unit_signed(128) - (128.0 / 127.5 - 1.0)).abs() < 1e-15);
        assert!((byte_to_unit_signed(128) - 0.003921568627).abs() < 1e-9);
        assert_eq!(unit_signed_to_byte(-1.0), 0);
        assert_eq!(unit_signed_to_byte(1.0), 255);
        assert_eq!(unit_signed_to_byte(-5.0), 0);
        assert_eq!(unit_signed_to_byte(5.0), 255);
    }

    #[test]
    fn every_byte_round_trips_through_f32() {
        for b in 0..=255u8 {
            let v = byte_to_unit_signed(b) as f32;
            assert_eq!(unit_signed_to_byte(v as f64), b);
        }
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::<f32>::from_fn(3, 5, 7, |c, y, x| {
            byte_to_unit_signed(((c * 97 + y * 31 + x * 13) % 256) as u8) as f32
        });
        let p = dir.path().join("a.png");
        save_png(&img, &p).unwrap();
        let back: ImageTensor<f32> = load_png(&p).unwrap();
        assert_eq!(back, img);
        let p2 = dir.path().join("b.png");
        save_png(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_non_rgb_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let mut enc = png::Encoder::new(BufWriter::new(File::create(&p).unwrap()), 2, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[0, 1, 2, 3]).unwrap();
        w.finish().unwrap();
        assert!(matches!(
            load_png::<f32>(&p),
            Err(Error::UnsupportedImage { .. })
        ));
        assert!(load_png::<f32>(dir.path().join("missing.png")).unwrap_err().is_io());
    }

    #[test]
    fn pydt_round_trip_and_header() {
        let mut buf = Vec::new();
        write_pydt(&mut buf, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        assert_eq!(&buf[..4], b"PYDT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 4 + 4 + 8 + 24);
        let mut r = &buf[..];
        let (dims, data) = read_pydt(&mut r).unwrap().unwrap();
        assert_eq!(dims, vec![2, 3]);
        assert_eq!(data[5], 6.5);
        assert!(read_pydt(&mut r).unwrap().is_none());
        assert!(read_pydt(&mut &b"PYDX\0\0\0\0"[..]).is_err());
        assert!(read_pydt(&mut &buf[..20]).is_err());
    }
}
