//! All-pairs correlation volumes, their pooled pyramid and the windowed
//! bilinear lookup that turns a pyramid into per-pixel correlation features.

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::parallel;
use crate::tensor::{dot_f64, DenseTensor, Real, Rng, Shape};

/// `H × W × C` feature tensor with channel vectors stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    tensor: DenseTensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn from_tensor(tensor: DenseTensor<T>) -> Result<Self> {
        if tensor.shape().rank() != 3 {
            return Err(Error::shape(format!(
                "feature map needs [H, W, C], got {:?}",
                tensor.dims()
            )));
        }
        Ok(Self { tensor })
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        Self::from_tensor(DenseTensor::from_vec(&[height, width, channels], data)?)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::from_tensor(DenseTensor::zeros(&[height, width, channels])?)
    }

    pub fn seeded_uniform(height: usize, width: usize, channels: usize, rng: &mut Rng, lo: f64, hi: f64) -> Result<Self> {
        let shape = Shape::new(&[height, width, channels])?;
        let data = rng.uniform_vec(shape.numel(), lo, hi);
        Self::from_tensor(DenseTensor::from_vec(shape.dims(), data)?)
    }

    /// Builds a map from a per-pixel function writing into the channel slice.
    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, &mut [T])) -> Result<Self> {
        let shape = Shape::new(&[height, width, channels])?;
        let mut data = vec![T::ZERO; shape.numel()];
        for (p, px) in data.chunks_mut(channels).enumerate() {
            f(p / width, p % width, px);
        }
        Self::from_tensor(DenseTensor::from_vec(shape.dims(), data)?)
    }

    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<T>) -> Self {
        let shape = Shape::new(&[height, width, channels]).expect("feature dims validated by caller");
        Self {
            tensor: DenseTensor::from_parts(shape, data),
        }
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn tensor(&self) -> &DenseTensor<T> {
        &self.tensor
    }

    pub fn as_slice(&self) -> &[T] {
        self.tensor.as_slice()
    }

    /// Channel vector at `(i, j)`.
    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[T] {
        let c = self.channels();
        let o = (i * self.width() + j) * c;
        &self.tensor.as_slice()[o..o + c]
    }

    /// Channel vector at a signed position, `None` outside the map.
    #[inline]
    pub fn pixel_checked(&self, i: isize, j: isize) -> Option<&[T]> {
        if i < 0 || j < 0 || i as usize >= self.height() || j as usize >= self.width() {
            None
        } else {
            Some(self.pixel(i as usize, j as usize))
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            tensor: self.tensor.cast(),
        }
    }

    /// Elementwise `a·self + b·other`.
    pub fn axpby(&self, a: T, other: &Self, b: T) -> Result<Self> {
        Self::from_tensor(self.tensor.axpby(a, &other.tensor, b)?)
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.height() == other.height() && self.width() == other.width()
    }
}

/// `H1 × W1 × H2 × W2` correlation volume. Slices `[i, j, ·, ·]` are cost maps.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume4D<T> {
    tensor: DenseTensor<T>,
    scale_applied: Option<f64>,
}

/// Borrowed view of one cost map `C(i, j, ·, ·)`.
#[derive(Debug, Clone, Copy)]
pub struct CostMap<'a, T> {
    data: &'a [T],
    height: usize,
    width: usize,
}

impl<'a, T: Real> CostMap<'a, T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &'a [T] {
        self.data
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> T {
        self.data[m * self.width + n]
    }

    /// Zero outside the map.
    #[inline]
    pub fn get_or_zero(&self, m: isize, n: isize) -> T {
        if m < 0 || n < 0 || m as usize >= self.height || n as usize >= self.width {
            T::ZERO
        } else {
            self.get(m as usize, n as usize)
        }
    }
}

impl<T: Real> CostVolume4D<T> {
    pub fn from_tensor(tensor: DenseTensor<T>, scale_applied: Option<f64>) -> Result<Self> {
        if tensor.shape().rank() != 4 {
            return Err(Error::shape(format!(
                "cost volume needs [H1, W1, H2, W2], got {:?}",
                tensor.dims()
            )));
        }
        Ok(Self { tensor, scale_applied })
    }

    pub(crate) fn from_raw(dims: [usize; 4], data: Vec<T>, scale_applied: Option<f64>) -> Self {
        let shape = Shape::new(&dims).expect("volume dims validated by caller");
        Self {
            tensor: DenseTensor::from_parts(shape, data),
            scale_applied,
        }
    }

    /// `[H1, W1, H2, W2]`.
    pub fn dims(&self) -> [usize; 4] {
        let d = self.tensor.dims();
        [d[0], d[1], d[2], d[3]]
    }

    pub fn tensor(&self) -> &DenseTensor<T> {
        &self.tensor
    }

    pub fn as_slice(&self) -> &[T] {
        self.tensor.as_slice()
    }

    pub fn scale_applied(&self) -> Option<f64> {
        self.scale_applied
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, m: usize, n: usize) -> T {
        let [_, w1, h2, w2] = self.dims();
        self.tensor.as_slice()[((i * w1 + j) * h2 + m) * w2 + n]
    }

    pub fn cost_map(&self, i: usize, j: usize) -> CostMap<'_, T> {
        let [_, w1, h2, w2] = self.dims();
        let o = (i * w1 + j) * h2 * w2;
        CostMap {
            data: &self.tensor.as_slice()[o..o + h2 * w2],
            height: h2,
            width: w2,
        }
    }

    /// Cost map at a signed frame-1 position, `None` outside the frame.
    pub fn cost_map_checked(&self, i: isize, j: isize) -> Option<CostMap<'_, T>> {
        let [h1, w1, _, _] = self.dims();
        if i < 0 || j < 0 || i as usize >= h1 || j as usize >= w1 {
            None
        } else {
            Some(self.cost_map(i as usize, j as usize))
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.tensor.max_abs_diff(&other.tensor)
    }

    pub fn cast<U: Real>(&self) -> CostVolume4D<U> {
        CostVolume4D {
            tensor: self.tensor.cast(),
            scale_applied: self.scale_applied,
        }
    }

    /// Elementwise `a·self + b·other`.
    pub fn axpby(&self, a: T, other: &Self, b: T) -> Result<Self> {
        Ok(Self {
            tensor: self.tensor.axpby(a, &other.tensor, b)?,
            scale_applied: self.scale_applied,
        })
    }
}

/// Builds `out[i, j, m, n] = scale · ⟨f1(i, j), f2(m, n)⟩`. Without a scale
/// the plain dot product is used; pass `1/√C` for the normalized convention.
pub fn build_cost_volume<T: Real>(f1: &FeatureMap<T>, f2: &FeatureMap<T>, scale: Option<f64>) -> Result<CostVolume4D<T>> {
    if f1.tensor().dims() != f2.tensor().dims() {
        return Err(Error::shape(format!(
            "feature maps differ: {:?} vs {:?}",
            f1.tensor().dims(),
            f2.tensor().dims()
        )));
    }
    if let Some(s) = scale {
        if !s.is_finite() {
            return Err(Error::Range(format!("scale {s} is not finite")));
        }
    }
    Ok(correlate(f1, f2, scale))
}

/// Correlation of two maps that may differ in grid size but share channels.
pub(crate) fn correlate<T: Real>(f1: &FeatureMap<T>, f2: &FeatureMap<T>, scale: Option<f64>) -> CostVolume4D<T> {
    let (h1, w1) = (f1.height(), f1.width());
    let (h2, w2) = (f2.height(), f2.width());
    Shape::new(&[h1, w1, h2, w2]).expect("volume size overflow");
    let mut data = vec![T::ZERO; h1 * w1 * h2 * w2];
    let map_len = h2 * w2;
    parallel::for_each_chunk(&mut data, w1 * map_len, |i, row| {
        for (j, map) in row.chunks_mut(map_len).enumerate() {
            let a = f1.pixel(i, j);
            for (q, out) in map.iter_mut().enumerate() {
                let c = dot_f64(a, f2.pixel(q / w2, q % w2));
                *out = T::from_f64(match scale {
                    Some(s) => s * c,
                    None => c,
                });
            }
        }
    });
    CostVolume4D::from_raw([h1, w1, h2, w2], data, scale)
}

/// Pooled multi-scale stack; level `L` has its last two dims ceil-halved `L` times.
#[derive(Debug, Clone)]
pub struct CostPyramid<T> {
    levels: Vec<CostVolume4D<T>>,
}

impl<T: Real> CostPyramid<T> {
    pub fn levels(&self) -> &[CostVolume4D<T>] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &CostVolume4D<T> {
        &self.levels[l]
    }
}

/// Largest pyramid depth accepted for a `h × w` cost map.
pub fn max_pyramid_levels(h: usize, w: usize) -> usize {
    let m = h.min(w).max(1);
    (usize::BITS - 1 - m.leading_zeros()) as usize + 1
}

pub fn build_pyramid<T: Real>(cv: &CostVolume4D<T>, num_levels: usize) -> Result<CostPyramid<T>> {
    let [_, _, h2, w2] = cv.dims();
    let max = max_pyramid_levels(h2, w2);
    if num_levels == 0 || num_levels > max {
        return Err(Error::Range(format!(
            "num_levels must be in 1..={max} for {h2}x{w2} cost maps, got {num_levels}"
        )));
    }
    let mut levels = Vec::with_capacity(num_levels);
    levels.push(cv.clone());
    for _ in 1..num_levels {
        let next = pool_level(levels.last().expect("non-empty"));
        levels.push(next);
    }
    Ok(CostPyramid { levels })
}

/// 2×2 average pooling over the last two dims; odd borders average only the
/// cells that exist.
fn pool_level<T: Real>(cv: &CostVolume4D<T>) -> CostVolume4D<T> {
    let [h1, w1, h2, w2] = cv.dims();
    let (ph, pw) = (h2.div_ceil(2), w2.div_ceil(2));
    let mut data = vec![T::ZERO; h1 * w1 * ph * pw];
    parallel::for_each_chunk(&mut data, ph * pw, |p, out| {
        let src = cv.cost_map(p / w1, p % w1);
        for a in 0..ph {
            for b in 0..pw {
                let mut acc = 0.0;
                let mut count = 0usize;
                for m in 2 * a..(2 * a + 2).min(h2) {
                    for n in 2 * b..(2 * b + 2).min(w2) {
                        acc += src.get(m, n).to_f64();
                        count += 1;
                    }
                }
                out[a * pw + b] = T::from_f64(acc / count as f64);
            }
        }
    });
    CostVolume4D::from_raw([h1, w1, ph, pw], data, cv.scale_applied())
}

/// Bilinear sample with zero contribution from out-of-range corners.
#[inline]
pub(crate) fn bilinear_zero<T: Real>(map: &CostMap<'_, T>, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let corner = |m: isize, n: isize| map.get_or_zero(m, n).to_f64();
    (1.0 - fy) * ((1.0 - fx) * corner(y0, x0) + fx * corner(y0, x0 + 1))
        + fy * ((1.0 - fx) * corner(y0 + 1, x0) + fx * corner(y0 + 1, x0 + 1))
}

/// Samples every level of the pyramid on a `(2r+1)²` grid around each pixel's
/// flow target. Output channel `L·(2r+1)² + (dy+r)·(2r+1) + (dx+r)` holds the
/// level-`L` sample at `((j+u)/2^L + dx, (i+v)/2^L + dy)`.
pub fn lookup<T: Real>(pyr: &CostPyramid<T>, flow: &FlowField, radius: usize) -> Result<DenseTensor<T>> {
    let [h1, w1, _, _] = pyr.level(0).dims();
    if flow.height() != h1 || flow.width() != w1 {
        return Err(Error::shape(format!(
            "flow is {}x{}, cost volume frame is {h1}x{w1}",
            flow.height(),
            flow.width()
        )));
    }
    let side = 2 * radius + 1;
    let per_level = side * side;
    let channels = pyr.num_levels() * per_level;
    let shape = Shape::new(&[h1, w1, channels])?;
    let mut data = vec![T::ZERO; shape.numel()];
    let r = radius as isize;
    parallel::for_each_chunk(&mut data, channels, |p, out| {
        let (i, j) = (p / w1, p % w1);
        let (u, v) = flow.get(i, j);
        for (l, level) in pyr.levels().iter().enumerate() {
            let map = level.cost_map(i, j);
            let s = (1u64 << l) as f64;
            let cx = (j as f64 + u as f64) / s;
            let cy = (i as f64 + v as f64) / s;
            for dy in -r..=r {
                for dx in -r..=r {
                    let c = l * per_level + ((dy + r) as usize) * side + (dx + r) as usize;
                    out[c] = T::from_f64(bilinear_zero(&map, cx + dx as f64, cy + dy as f64));
                }
            }
        }
    });
    Ok(DenseTensor::from_parts(shape, data))
}
