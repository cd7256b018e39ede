//! RGB images as coordinate → colour regression data, binary PPM I/O and the
//! lattice train/valid/test split.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::dynamics::Dataset;
use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("not a binary PPM (expected magic 'P6')")]
    BadMagic,
    #[error("unsupported maxval {0} (only 255)")]
    BadMaxval(u64),
    #[error("malformed PPM header: {0}")]
    BadHeader(String),
    #[error("PPM data truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("image is {width}×{height}; at least 2×2 is needed")]
    TooSmall { width: usize, height: usize },
    #[error("pixel buffer has {got} pixels, expected {expected}")]
    BadLength { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major RGB pixels with channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self, ImageError> {
        if pixels.len() != width * height {
            return Err(ImageError::BadLength {
                expected: width * height,
                got: pixels.len(),
            });
        }
        Ok(ImageGrid { width, height, pixels })
    }

    pub fn from_bytes(width: usize, height: usize, rgb: &[u8]) -> Result<Self, ImageError> {
        if rgb.len() != width * height * 3 {
            return Err(ImageError::BadLength {
                expected: width * height,
                got: rgb.len() / 3,
            });
        }
        let pixels = rgb
            .chunks_exact(3)
            .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
            .collect();
        Ok(ImageGrid { width, height, pixels })
    }

    /// 8-bit channels, clamped to [0, 1] and rounded.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    /// Normalised pixel-centre coordinate `((col+0.5)/W, (row+0.5)/H)`.
    pub fn coordinate(&self, index: usize) -> [f64; 2] {
        let (r, c) = (index / self.width, index % self.width);
        [
            (c as f64 + 0.5) / self.width as f64,
            (r as f64 + 0.5) / self.height as f64,
        ]
    }

    /// Coordinates of every pixel, row-major, as an `(W·H, 2)` matrix.
    pub fn lattice(width: usize, height: usize) -> Matrix {
        let g = ImageGrid {
            width,
            height,
            pixels: Vec::new(),
        };
        Matrix::from_fn(width * height, 2, |i, j| g.coordinate(i)[j])
    }

    /// (coordinate, RGB) pairs for the given pixel indices.
    pub fn dataset(&self, indices: &[usize]) -> Dataset {
        let inputs = Matrix::from_fn(indices.len(), 2, |i, j| self.coordinate(indices[i])[j]);
        let targets = Matrix::from_fn(indices.len(), 3, |i, j| self.pixels[indices[i]][j]);
        Dataset::new(inputs, targets).expect("same row count")
    }

    /// Image from a `(W·H, 3)` prediction matrix, channels clamped to [0, 1].
    pub fn from_predictions(width: usize, height: usize, pred: &Matrix) -> Result<Self, ImageError> {
        if pred.rows() != width * height || pred.cols() != 3 {
            return Err(ImageError::BadLength {
                expected: width * height,
                got: pred.rows(),
            });
        }
        let pixels = (0..pred.rows())
            .map(|i| {
                let r = pred.row(i);
                [r[0].clamp(0.0, 1.0), r[1].clamp(0.0, 1.0), r[2].clamp(0.0, 1.0)]
            })
            .collect();
        Ok(ImageGrid { width, height, pixels })
    }

    /// Channel values of the given pixels, flattened.
    pub fn channels(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().flat_map(|&i| self.pixels[i]).collect()
    }
}

/// Pixel indices (`row * W + col`) of the three lattice classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelSplit {
    /// even row, even column
    pub train: Vec<usize>,
    /// even row, odd column
    pub valid: Vec<usize>,
    /// odd row, odd column
    pub test: Vec<usize>,
}

/// Deterministic parity split; the (odd row, even column) quarter is unused.
pub fn split_pixels(width: usize, height: usize) -> Result<PixelSplit, ImageError> {
    if width < 2 || height < 2 {
        return Err(ImageError::TooSmall { width, height });
    }
    let mut s = PixelSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            match (r % 2, c % 2) {
                (0, 0) => s.train.push(i),
                (0, 1) => s.valid.push(i),
                (1, 1) => s.test.push(i),
                _ => {}
            }
        }
    }
    Ok(s)
}

fn header_token(data: &[u8], pos: &mut usize) -> Result<String, ImageError> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() && data[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::BadHeader("unexpected end of header".into()));
    }
    Ok(String::from_utf8_lossy(&data[start..*pos]).into_owned())
}

pub fn parse_ppm(data: &[u8]) -> Result<ImageGrid, ImageError> {
    if data.len() < 2 || &data[..2] != b"P6" {
        return Err(ImageError::BadMagic);
    }
    let mut pos = 2;
    let number = |what: &str, pos: &mut usize| -> Result<u64, ImageError> {
        let tok = header_token(data, pos)?;
        tok.parse()
            .map_err(|_| ImageError::BadHeader(format!("{what} '{tok}' is not a number")))
    };
    let width = number("width", &mut pos)? as usize;
    let height = number("height", &mut pos)? as usize;
    let maxval = number("maxval", &mut pos)?;
    if maxval != 255 {
        return Err(ImageError::BadMaxval(maxval));
    }
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(ImageError::Truncated {
            expected: width * height * 3,
            got: 0,
        });
    }
    pos += 1;
    let expected = width * height * 3;
    let body = &data[pos..];
    if body.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            got: body.len(),
        });
    }
    ImageGrid::from_bytes(width, height, &body[..expected])
}

pub fn encode_ppm(grid: &ImageGrid) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend(grid.to_bytes());
    out
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<ImageGrid, ImageError> {
    parse_ppm(&fs::read(path)?)
}

pub fn save_ppm(grid: &ImageGrid, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ppm(grid))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn white_pixel() {
        let g = parse_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(g.pixels, vec![[1.0, 1.0, 1.0]]);
    }

    #[test]
    fn header_with_comments() {
        let g = parse_ppm(b"P6 # made by hand\n2 # width\n1\n255\n\x00\x00\x00\xff\x00\x00").unwrap();
        assert_eq!((g.width, g.height), (2, 1));
        assert_eq!(g.pixels[1], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(parse_ppm(b"P3\n1 1\n255\n1 1 1\n"), Err(ImageError::BadMagic)));
        assert!(matches!(parse_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(ImageError::BadMaxval(65535))));
        assert!(matches!(
            parse_ppm(b"P6\n2 2\n255\n\0\0\0"),
            Err(ImageError::Truncated { expected: 12, got: 3 })
        ));
        assert!(matches!(parse_ppm(b"P6\nx 1\n255\n"), Err(ImageError::BadHeader(_))));
    }

    #[test]
    fn round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bytes: Vec<u8> = (0..8 * 8 * 3).map(|_| rng.gen()).collect();
        let g = ImageGrid::from_bytes(8, 8, &bytes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        save_ppm(&g, &p).unwrap();
        let back = load_ppm(&p).unwrap();
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_format() {
        let g = ImageGrid::new(2, 2, vec![[0.0; 3]; 4]).unwrap();
        let enc = encode_ppm(&g);
        assert!(enc.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(enc.len(), 11 + 12);
    }

    #[test]
    fn split_examples() {
        let s = split_pixels(2, 2).unwrap();
        assert_eq!((s.train, s.valid, s.test), (vec![0], vec![1], vec![3]));
        let s = split_pixels(512, 512).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (65_536, 65_536, 65_536));
        assert!(matches!(split_pixels(1, 5), Err(ImageError::TooSmall { .. })));
    }

    #[test]
    fn split_is_disjoint() {
        for (w, h) in [(2, 3), (5, 4), (7, 7)] {
            let s = split_pixels(w, h).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
            let n = all.len();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), n);
        }
    }

    #[test]
    fn coordinates_are_pixel_centres() {
        let lat = ImageGrid::lattice(4, 2);
        assert_eq!(lat.row(0), &[0.125, 0.25]);
        assert_eq!(lat.row(7), &[0.875, 0.75]);
    }
}
