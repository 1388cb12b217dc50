use std::path::Path;

use serde::{Deserialize, Serialize};

use super::QcError;

/// Scalar volume. Values are stored with x varying fastest:
/// `index = (z * ny + y) * nx + x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], values: Vec<f64>) -> Result<Self, QcError> {
        let g = Self { dims, spacing, values };
        g.validate()?;
        Ok(g)
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Self {
            dims,
            spacing,
            values: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut g = Self::zeros(dims, spacing);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = g.index(x, y, z);
                    g.values[i] = f(x, y, z);
                }
            }
        }
        g
    }

    pub fn validate(&self) -> Result<(), QcError> {
        let n = self.dims.iter().product::<usize>();
        if self.values.len() != n {
            return Err(QcError::InvalidGrid(format!(
                "{} values for dims {:?}",
                self.values.len(),
                self.dims
            )));
        }
        if self.spacing.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(QcError::InvalidGrid(format!("non-positive spacing {:?}", self.spacing)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn same_dims(&self, other: &VoxelGrid) -> Result<(), QcError> {
        if self.dims == other.dims {
            Ok(())
        } else {
            Err(QcError::DimMismatch(self.dims, other.dims))
        }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Binary mask of voxels above `threshold`.
    pub fn threshold(&self, threshold: f64) -> VoxelGrid {
        VoxelGrid {
            dims: self.dims,
            spacing: self.spacing,
            values: self.values.iter().map(|v| f64::from(u8::from(*v > threshold))).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, QcError> {
        let text = std::fs::read_to_string(path)?;
        let g: VoxelGrid = serde_json::from_str(&text).map_err(|e| QcError::ParseError {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        g.validate()?;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<(), QcError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string(self).expect("grid serializes"))?;
        Ok(())
    }
}

/// Row-major 2D raster (`index = y * width + x`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster<T> {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<T>,
}

impl<T: Clone + Default> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.pixels[y * self.width + x] = v;
    }

    /// Sub-raster `[x0, x1) x [y0, y1)`, clamped to bounds.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        let x1 = x1.min(self.width);
        let y1 = y1.min(self.height);
        let x0 = x0.min(x1);
        let y0 = y0.min(y1);
        let mut out = Self::filled(x1 - x0, y1 - y0, T::default());
        for y in y0..y1 {
            for x in x0..x1 {
                out.set(x - x0, y - y0, self.get(x, y).clone());
            }
        }
        out
    }
}
