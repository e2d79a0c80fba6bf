//! Artifact readers and writers.

use std::fs;
use std::path::Path;

use specmd_core::{FanBeamGeometry, Image, SinogramStack, Tensor3};

use crate::error::{CliError, Result};

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor3) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    t.save(path).map_err(CliError::from)
}

/// Maps `[lo, hi]` linearly onto `0..=65535`, clipping outside the window.
pub fn to_gray16(img: &Image, window: [f64; 2]) -> Vec<u16> {
    let [lo, hi] = window;
    img.as_slice()
        .iter()
        .map(|&v| {
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            if t.is_nan() {
                0
            } else {
                (t * 65535.0).round() as u16
            }
        })
        .collect()
}

/// Binary 16-bit portable graymap (`P5`, maxval 65535, big-endian samples).
pub fn encode_pgm16(img: &Image, window: [f64; 2]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.cols(), img.rows()).into_bytes();
    for v in to_gray16(img, window) {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn write_pgm16(path: &Path, img: &Image, window: [f64; 2]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, encode_pgm16(img, window)).map_err(|e| CliError::io(path, e))
}

/// Reads back a graymap written by [`encode_pgm16`] as `(cols, rows, samples)`.
pub fn decode_pgm16(bytes: &[u8]) -> Option<(usize, usize, Vec<u16>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return None;
    }
    let (cols, rows): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let body = bytes.get(pos..)?;
    if body.len() != 2 * cols * rows {
        return None;
    }
    Some((cols, rows, body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

/// Loads a `[views, detectors, bins]` tensor and checks it against the
/// scanner geometry and expected bin count.
pub fn load_external_sinogram(path: &Path, geometry: &FanBeamGeometry, bins: usize) -> Result<SinogramStack> {
    let t = Tensor3::load(path)?;
    let expected = [geometry.num_views, geometry.num_detectors, bins];
    if t.dims() != expected {
        return Err(CliError::Core(specmd_core::Error::ShapeMismatch {
            expected: format!("{expected:?} (views, detectors, bins)"),
            actual: format!("{:?} in {}", t.dims(), path.display()),
        }));
    }
    Ok(SinogramStack::new(t, geometry.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use specmd_core::rng::seeded_rng;
    use specmd_core::Error;
    use rand::Rng;

    fn small_geometry() -> FanBeamGeometry {
        FanBeamGeometry {
            num_views: 6,
            num_detectors: 5,
            ..FanBeamGeometry::desk_scale()
        }
    }

    fn random_stack(g: &FanBeamGeometry, bins: usize, seed: u64) -> Tensor3 {
        let mut rng = seeded_rng(seed);
        let data = (0..g.num_views * g.num_detectors * bins).map(|_| rng.random::<f64>()).collect();
        Tensor3::from_vec([g.num_views, g.num_detectors, bins], data).unwrap()
    }

    #[test]
    fn external_sinogram_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let g = small_geometry();
        let t = random_stack(&g, 4, 7);
        let path = dir.path().join("s.smdk");
        write_tensor(&path, &t).unwrap();
        let s = load_external_sinogram(&path, &g, 4).unwrap();
        let a: Vec<u64> = s.data().as_slice().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = t.as_slice().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn external_sinogram_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let g = small_geometry();
        let path = dir.path().join("s.smdk");
        write_tensor(&path, &random_stack(&g, 3, 1)).unwrap();
        assert!(matches!(
            load_external_sinogram(&path, &g, 4),
            Err(CliError::Core(Error::ShapeMismatch { .. }))
        ));
    }

    #[test]
    fn external_sinogram_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let g = small_geometry();
        let path = dir.path().join("s.smdk");
        write_tensor(&path, &random_stack(&g, 4, 2)).unwrap();
        let bytes = fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_external_sinogram(&path, &g, 4), Err(CliError::Core(Error::Format(_)))));

        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match load_external_sinogram(&path, &g, 4) {
            Err(CliError::Core(Error::Truncated { expected, actual })) => {
                assert_eq!(expected, 6 * 5 * 4 * 8);
                assert_eq!(actual, expected - 9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gray16_windowing() {
        let img = Image::from_vec(1, 5, vec![-1.0, 0.0, 0.5, 1.0, 2.0]).unwrap();
        assert_eq!(to_gray16(&img, [0.0, 1.0]), vec![0, 0, 32768, 65535, 65535]);
        let nan = Image::from_vec(1, 1, vec![f64::NAN]).unwrap();
        assert_eq!(to_gray16(&nan, [0.0, 1.0]), vec![0]);
    }

    #[test]
    fn pgm_round_trip() {
        let img = Image::from_fn(3, 4, |r, c| (r * 4 + c) as f64 / 11.0);
        let bytes = encode_pgm16(&img, [0.0, 1.0]);
        assert!(bytes.starts_with(b"P5\n4 3\n65535\n"));
        let (cols, rows, px) = decode_pgm16(&bytes).unwrap();
        assert_eq!((cols, rows), (4, 3));
        assert_eq!(px, to_gray16(&img, [0.0, 1.0]));
        assert_eq!(px[11], 65535);
        assert!(decode_pgm16(&bytes[..bytes.len() - 1]).is_none());
    }
}
