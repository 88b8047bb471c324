use crate::error::{Error, Result};

/// Dense displacement field: `(u, v)` per pixel with `u` horizontal and `v`
/// vertical, in pixels, plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f32>,
    valid: Vec<bool>,
}

impl FlowField {
    /// All-zero, all-valid field.
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Result<Self> {
        Self::from_fn(height, width, |_, _| (u, v))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("flow field {height}x{width} is empty")));
        }
        let mut data = Vec::with_capacity(height * width * 2);
        for i in 0..height {
            for j in 0..width {
                let (u, v) = f(i, j);
                if !(u.is_finite() && v.is_finite()) {
                    return Err(Error::Contract(format!("non-finite flow at ({i}, {j})")));
                }
                data.push(u);
                data.push(v);
            }
        }
        Ok(Self {
            height,
            width,
            data,
            valid: vec![true; height * width],
        })
    }

    /// Builds a field from interleaved `(u, v)` data. Values are kept as given;
    /// validity is supplied separately.
    pub fn from_parts(height: usize, width: usize, data: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("flow field {height}x{width} is empty")));
        }
        if data.len() != height * width * 2 || valid.len() != height * width {
            return Err(Error::shape(format!(
                "flow buffers ({}, {}) do not match {height}x{width}",
                data.len(),
                valid.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize, j: usize) -> (f32, f32) {
        let o = 2 * (i * self.width + j);
        (self.data[o], self.data[o + 1])
    }

    pub fn set(&mut self, i: usize, j: usize, u: f32, v: f32) {
        let o = 2 * (i * self.width + j);
        self.data[o] = u;
        self.data[o + 1] = v;
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.width + j]
    }

    pub fn set_valid(&mut self, i: usize, j: usize, valid: bool) {
        self.valid[i * self.width + j] = valid;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}
