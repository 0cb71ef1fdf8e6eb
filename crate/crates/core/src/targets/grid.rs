use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffable::Tensor;
use crate::error::{DifError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n_points: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, n_points: usize) -> Self {
        Self { min, max, n_points }
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.n_points - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.n_points {
            self.max
        } else {
            self.min + self.step() * i as f64
        }
    }

    fn weight(&self, i: usize) -> f64 {
        let h = self.step();
        if i == 0 || i + 1 == self.n_points {
            0.5 * h
        } else {
            h
        }
    }
}

/// Tensor-product grid; points are enumerated with the first axis slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub axes: Vec<Axis>,
}

impl DensityGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(DifError::InvalidArgument("grid needs at least one axis".into()));
        }
        for (i, a) in axes.iter().enumerate() {
            if a.n_points < 2 || !(a.min < a.max) || !a.min.is_finite() || !a.max.is_finite() {
                return Err(DifError::InvalidArgument(format!(
                    "grid axis {i} needs finite min < max and n_points >= 2, got {a:?}"
                )));
            }
        }
        Ok(Self { axes })
    }

    /// Same axis on every dimension.
    pub fn cube(dim: usize, min: f64, max: f64, n_points: usize) -> Result<Self> {
        Self::new(vec![Axis::new(min, max, n_points); dim])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n_points).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn volume(&self) -> f64 {
        self.axes.iter().map(|a| a.max - a.min).product()
    }

    fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for (j, a) in self.axes.iter().enumerate().rev() {
            idx[j] = flat % a.n_points;
            flat /= a.n_points;
        }
        idx
    }

    pub fn points(&self) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.len() * d);
        for f in 0..self.len() {
            for (j, i) in self.multi_index(f).into_iter().enumerate() {
                data.push(self.axes[j].coord(i));
            }
        }
        Tensor::new(self.len(), d, data)
    }

    /// Trapezoidal weights; they sum to the box volume.
    pub fn weights(&self) -> Vec<f64> {
        (0..self.len())
            .map(|f| {
                self.multi_index(f)
                    .into_iter()
                    .enumerate()
                    .map(|(j, i)| self.axes[j].weight(i))
                    .product()
            })
            .collect()
    }

    pub fn integrate(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.len() {
            return Err(DifError::DimensionMismatch {
                expected: self.len(),
                got: values.len(),
            });
        }
        Ok(self.weights().iter().zip(values).map(|(w, v)| w * v).sum())
    }

    /// Writes `x0.., value` rows after a `#` line describing the axes.
    pub fn write_csv(&self, path: &Path, values: &[f64], value_name: &str) -> Result<()> {
        if values.len() != self.len() {
            return Err(DifError::DimensionMismatch {
                expected: self.len(),
                got: values.len(),
            });
        }
        let mut out = String::from("#");
        for (j, a) in self.axes.iter().enumerate() {
            let sep = if j == 0 { " " } else { "; " };
            let _ = write!(out, "{sep}axis{j}: min={}, max={}, n_points={}", a.min, a.max, a.n_points);
        }
        out.push('\n');
        let names: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        let _ = writeln!(out, "{},{value_name}", names.join(","));
        let pts = self.points();
        for (row, v) in pts.iter_rows().zip(values) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{},{v}", cells.join(","));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Trapezoidal integral of `f` over the grid; `f` maps a batch of points to
/// one value per row.
pub fn quadrature_integral<F>(f: F, grid: &DensityGrid) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Vec<f64>>,
{
    let values = f(&grid.points())?;
    grid.integrate(&values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal(x: &Tensor) -> Result<Vec<f64>> {
        let d = x.cols() as f64;
        Ok(x.iter_rows()
            .map(|r| {
                let s: f64 = r.iter().map(|v| v * v).sum();
                (-0.5 * s).exp() / (2.0 * std::f64::consts::PI).powf(0.5 * d)
            })
            .collect())
    }

    #[test]
    fn normal_1d() {
        let g = DensityGrid::cube(1, -10.0, 10.0, 20001).unwrap();
        assert!((quadrature_integral(normal, &g).unwrap() - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn normal_2d() {
        let g = DensityGrid::cube(2, -8.0, 8.0, 801).unwrap();
        assert!((quadrature_integral(normal, &g).unwrap() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn constant_gives_volume() {
        let g = DensityGrid::new(vec![Axis::new(0.0, 1.0, 5), Axis::new(0.0, 1.0, 7)]).unwrap();
        let v = quadrature_integral(|x| Ok(vec![1.0; x.rows()]), &g).unwrap();
        assert_eq!(v, 1.0);
        let g = DensityGrid::new(vec![Axis::new(-1.0, 2.0, 4), Axis::new(0.5, 1.0, 3)]).unwrap();
        let total: f64 = g.weights().iter().sum();
        assert!((total - g.volume()).abs() <= 1e-15);
    }

    #[test]
    fn second_order_convergence() {
        let f = |x: &Tensor| Ok(x.data().iter().map(|v| v.sin().exp()).collect());
        let exact = {
            let g = DensityGrid::cube(1, 0.0, 2.0, 200_001).unwrap();
            quadrature_integral(f, &g).unwrap()
        };
        let errs: Vec<f64> = [11, 21, 41]
            .iter()
            .map(|n| (quadrature_integral(f, &DensityGrid::cube(1, 0.0, 2.0, *n).unwrap()).unwrap() - exact).abs())
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn bad_axes_rejected() {
        assert!(DensityGrid::cube(1, 0.0, 1.0, 1).is_err());
        assert!(DensityGrid::cube(1, 1.0, 0.0, 5).is_err());
        assert!(DensityGrid::new(vec![]).is_err());
    }

    #[test]
    fn csv_export_has_comment_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let g = DensityGrid::cube(2, -1.0, 1.0, 3).unwrap();
        g.write_csv(&path, &vec![0.5; 9], "density").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with('#'));
        assert_eq!(lines[1], "x0,x1,density");
        assert_eq!(lines[2], "-1,-1,0.5");
        assert_eq!(lines.len(), 11);
    }
}
