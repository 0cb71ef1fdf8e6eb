use std::path::Path;

use rand::Rng;

use crate::diffable::Tensor;
use crate::error::{DifError, Result};

/// Piecewise-constant density proportional to pixel intensity on `[0,1]^2`.
/// Row 0 of the image is the top edge (`y = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDensity {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities.
    pub pixels: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ImageDensity {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(DifError::Parse(format!(
                "image needs width*height = {} intensities, got {}",
                width * height,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(DifError::Parse("image intensities must be finite and non-negative".into()));
        }
        let mut acc = 0.0;
        let cumulative: Vec<f64> = pixels
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        if acc <= 0.0 {
            return Err(DifError::InvalidArgument("image is entirely zero".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
            cumulative,
        })
    }

    /// Picks a pixel with probability proportional to its intensity, then a
    /// uniform point inside its cell.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let total = *self.cumulative.last().expect("non-empty");
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let u = rng.random::<f64>() * total;
            let idx = self
                .cumulative
                .partition_point(|c| *c <= u)
                .min(self.pixels.len() - 1);
            let (row, col) = (idx / self.width, idx % self.width);
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            data.push((col as f64 + a) / self.width as f64);
            data.push(1.0 - (row as f64 + b) / self.height as f64);
        }
        Tensor::new(n, 2, data)
    }

    /// Normalized density at `(x, y)`; zero outside the unit square.
    pub fn pdf(&self, x: &[f64]) -> f64 {
        if !(0.0..=1.0).contains(&x[0]) || !(0.0..=1.0).contains(&x[1]) {
            return 0.0;
        }
        let col = ((x[0] * self.width as f64) as usize).min(self.width - 1);
        let row = (((1.0 - x[1]) * self.height as f64) as usize).min(self.height - 1);
        let total = self.cumulative.last().expect("non-empty");
        self.pixels[row * self.width + col] / total * (self.width * self.height) as f64
    }
}

/// Parses a plain-text "P2" graymap. `#` starts a comment to end of line.
pub fn parse_pgm(text: &str) -> Result<ImageDensity> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let magic = tokens.next().ok_or_else(|| DifError::Parse("empty PGM file".into()))?;
    if magic != "P2" {
        return Err(DifError::Parse(format!("expected PGM magic P2, got {magic:?}")));
    }
    let mut header = |what: &str| -> Result<usize> {
        let tok = tokens
            .next()
            .ok_or_else(|| DifError::Parse(format!("PGM header missing {what}")))?;
        tok.parse()
            .map_err(|_| DifError::Parse(format!("PGM {what} is not an integer: {tok:?}")))
    };
    let width = header("width")?;
    let height = header("height")?;
    let maxval = header("maxval")?;
    if width == 0 || height == 0 {
        return Err(DifError::Parse("PGM width and height must be positive".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(DifError::Parse(format!("PGM maxval must be in 1..=65535, got {maxval}")));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for tok in tokens {
        let v: usize = tok
            .parse()
            .map_err(|_| DifError::Parse(format!("PGM pixel is not an integer: {tok:?}")))?;
        if v > maxval {
            return Err(DifError::Parse(format!("PGM pixel {v} exceeds maxval {maxval}")));
        }
        pixels.push(v as f64);
    }
    if pixels.len() != width * height {
        return Err(DifError::Parse(format!(
            "PGM has {} pixels, header says {}",
            pixels.len(),
            width * height
        )));
    }
    ImageDensity::new(width, height, pixels)
}

pub fn load_image_density(path: &Path) -> Result<ImageDensity> {
    parse_pgm(&std::fs::read_to_string(path)?)
}

/// Writes integer intensities as a "P2" graymap.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u16]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(DifError::DimensionMismatch {
            expected: width * height,
            got: pixels.len(),
        });
    }
    let maxval = pixels.iter().copied().max().unwrap_or(0).max(1);
    let mut out = format!("P2\n{width} {height}\n{maxval}\n");
    for row in pixels.chunks(width) {
        let line: Vec<String> = row.iter().map(u16::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
