//! Interleaved 8-bit RGB images and binary PPM (P6) I/O.

use std::io::{self, BufRead, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be nonzero, got {0}×{1}")]
    ZeroSize(usize, usize),
    #[error("malformed PPM: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, 3 bytes per pixel.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.put(x, y, f(x, y));
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let n = self.width * self.height;
        (0..n).map(|i| self.data[i * 3 + c] as f64).sum::<f64>() / n.max(1) as f64
    }

    pub fn write_ppm(&self, w: &mut impl Write) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn save_ppm(&self, path: &Path) -> io::Result<()> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ppm(&mut f)?;
        f.flush()
    }

    pub fn read_ppm(r: &mut impl BufRead) -> Result<Self, ImageError> {
        let mut tokens = Vec::with_capacity(4);
        let mut cur = Vec::new();
        let mut byte = [0u8; 1];
        let mut in_comment = false;
        while tokens.len() < 4 {
            if r.read(&mut byte)? == 0 {
                return Err(ImageError::Format("unexpected end of header".into()));
            }
            let b = byte[0];
            if in_comment {
                in_comment = b != b'\n';
                continue;
            }
            if b == b'#' {
                in_comment = true;
            } else if b.is_ascii_whitespace() {
                if !cur.is_empty() {
                    tokens.push(String::from_utf8_lossy(&cur).into_owned());
                    cur.clear();
                }
            } else {
                cur.push(b);
            }
        }
        if tokens[0] != "P6" {
            return Err(ImageError::Format(format!("magic {:?} is not P6", tokens[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| ImageError::Format(format!("bad header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 {
            return Err(ImageError::Format(format!("maxval {maxval} unsupported")));
        }
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroSize(width, height));
        }
        let mut data = vec![0u8; width * height * 3];
        r.read_exact(&mut data)
            .map_err(|e| ImageError::Format(format!("pixel data: {e}")))?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn load_ppm(path: &Path) -> Result<Self, ImageError> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_ppm(&mut f)
    }
}
