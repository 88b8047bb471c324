//! Shifted local similarity aggregation (SLSA).
//!
//! Cost maps of frame-1 neighbors are shifted by the neighbor's relative
//! position before the weighted sum, so under locally constant motion their
//! matching peaks line up with the center's. With `Shift(T, rp)(m, n) =
//! T(m + di, n + dj)` the volume is
//!
//! `C''(i, j, m, n) = ⟨F1(i, j), F2a(m, n)⟩ + α Σ_k W(i, j, k) ⟨ρ(F1(i + di, j + dj)), F2a(m + di, n + dj)⟩`
//!
//! where `F2a` is the (possibly LSA-aggregated) frame-2 feature map and reads
//! outside the frame are zero.

use crate::attention::{similarity_weights, AttentionWeights, LocalRegion, ProjectionParams};
use crate::cost_volume::{build_cost_volume, CostVolume4D, FeatureMap};
use crate::error::{Error, Result};
use crate::lsa::{lsa_aggregate_features, lsa_param_count, LsaConfig};
use crate::parallel;
use crate::tensor::{dot_f64, DenseTensor, Real, Shape};

/// Relative position `(di, dj) = (i_k - i, j_k - j)` of a window neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shift {
    pub di: isize,
    pub dj: isize,
}

impl Shift {
    pub const ZERO: Shift = Shift { di: 0, dj: 0 };

    pub fn new(di: isize, dj: isize) -> Self {
        Self { di, dj }
    }
}

/// Spatial shift with zero fill: `out(m, n) = t(m + di, n + dj)`.
pub trait ShiftMap: Sized {
    fn shifted(&self, rp: Shift) -> Self;
}

/// Shifts the two leading (spatial) dims; any trailing dims move together.
impl<T: Real> ShiftMap for DenseTensor<T> {
    fn shifted(&self, rp: Shift) -> Self {
        let dims = self.dims();
        let (h, w) = (dims[0], dims.get(1).copied().unwrap_or(1));
        let inner: usize = dims.iter().skip(2).product();
        let src = self.as_slice();
        let mut out = vec![T::ZERO; src.len()];
        for m in 0..h {
            let y = m as isize + rp.di;
            if y < 0 || y as usize >= h {
                continue;
            }
            for n in 0..w {
                let x = n as isize + rp.dj;
                if x < 0 || x as usize >= w {
                    continue;
                }
                let s = (y as usize * w + x as usize) * inner;
                let d = (m * w + n) * inner;
                out[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        DenseTensor::from_parts(self.shape().clone(), out)
    }
}

impl<T: Real> ShiftMap for FeatureMap<T> {
    fn shifted(&self, rp: Shift) -> Self {
        FeatureMap::from_tensor(self.tensor().shifted(rp)).expect("rank preserved")
    }
}

pub fn shift_map<S: ShiftMap>(t: &S, rp: Shift) -> S {
    t.shifted(rp)
}

/// Whether neighbor cost maps are aligned by their offset before summing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShiftMode {
    #[default]
    Aligned,
    /// Every offset forced to `(0, 0)` (the no-shift ablation).
    Disabled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlsaConfig<T> {
    pub region: LocalRegion,
    /// Independent of the LSA block's parameters.
    pub params: ProjectionParams<T>,
    pub residual: bool,
    pub shift: ShiftMode,
    offsets: Vec<Shift>,
}

impl<T: Real> SlsaConfig<T> {
    pub fn new(region: LocalRegion, params: ProjectionParams<T>) -> Self {
        Self {
            region,
            params,
            residual: true,
            shift: ShiftMode::Aligned,
            offsets: region.offsets().map(|(di, dj)| Shift::new(di, dj)).collect(),
        }
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn with_shift(mut self, shift: ShiftMode) -> Self {
        self.shift = shift;
        self
    }

    /// Window offset table in slot order.
    pub fn offsets(&self) -> &[Shift] {
        &self.offsets
    }

    /// Learnable parameters plus the two integer entries per stored offset.
    pub fn allocated_parameters(&self) -> usize {
        self.params.num_parameters() + 2 * self.offsets.len()
    }

    /// The same weights and parameters viewed as an LSA block.
    pub fn as_lsa(&self) -> LsaConfig<T> {
        LsaConfig {
            region: self.region,
            params: self.params.clone(),
            residual: self.residual,
        }
    }

    pub fn cast<U: Real>(&self) -> SlsaConfig<U> {
        SlsaConfig {
            region: self.region,
            params: self.params.cast(),
            residual: self.residual,
            shift: self.shift,
            offsets: self.offsets.clone(),
        }
    }

    fn effective(&self, slot: usize) -> Shift {
        match self.shift {
            ShiftMode::Aligned => self.offsets[slot],
            ShiftMode::Disabled => Shift::ZERO,
        }
    }
}

/// Parameter count of one SLSA block: the LSA-shaped projections and `α`
/// plus the `2k²` entries of its offset table.
pub fn slsa_param_count(c: usize, cc: usize, d: usize, k: usize, bias: bool) -> usize {
    lsa_param_count(c, cc, d, bias) + 2 * k * k
}

/// Feature-side form of SLSA: frame-1 features, their value projection and
/// the frame-1 weights. Never holds anything larger than `H × W × max(C, k²)`.
#[derive(Debug, Clone)]
pub struct SlsaFeatures<T> {
    f1: FeatureMap<T>,
    values: FeatureMap<T>,
    weights: AttentionWeights<T>,
    alpha: f64,
    residual: bool,
    offsets: Vec<Shift>,
    read_offsets: Vec<Shift>,
}

fn check_inputs<T: Real>(f1: &FeatureMap<T>, fc: &FeatureMap<T>, cfg: &SlsaConfig<T>) -> Result<()> {
    if !f1.same_grid(fc) {
        return Err(Error::shape(format!(
            "frame-1 features are {}x{}, context is {}x{}",
            f1.height(),
            f1.width(),
            fc.height(),
            fc.width()
        )));
    }
    cfg.params.validate(Some(f1.channels()), Some(fc.channels()))
}

/// Computes the weights at frame-1 coordinates and the projected neighbors.
pub fn slsa_prepare<T: Real>(f1: &FeatureMap<T>, fc: &FeatureMap<T>, cfg: &SlsaConfig<T>) -> Result<SlsaFeatures<T>> {
    check_inputs(f1, fc, cfg)?;
    let weights = similarity_weights(fc, &cfg.params, cfg.region)?;
    let values = cfg.params.project_values(f1)?;
    Ok(SlsaFeatures {
        f1: f1.clone(),
        values,
        weights,
        alpha: cfg.params.alpha.to_f64(),
        residual: cfg.residual,
        offsets: cfg.offsets.clone(),
        read_offsets: (0..cfg.offsets.len()).map(|s| cfg.effective(s)).collect(),
    })
}

impl<T: Real> SlsaFeatures<T> {
    pub fn weights(&self) -> &AttentionWeights<T> {
        &self.weights
    }

    pub fn values(&self) -> &FeatureMap<T> {
        &self.values
    }

    fn check_partner(&self, f2_agg: &FeatureMap<T>) -> Result<()> {
        if f2_agg.channels() != self.f1.channels() {
            return Err(Error::shape(format!(
                "frame-2 features have {} channels, frame-1 has {}",
                f2_agg.channels(),
                self.f1.channels()
            )));
        }
        Ok(())
    }

    /// One entry `C''(i, j, m, n)` without materializing the volume.
    pub fn correlation(&self, f2_agg: &FeatureMap<T>, i: usize, j: usize, m: usize, n: usize) -> f64 {
        let mut acc = if self.residual {
            dot_f64(self.f1.pixel(i, j), f2_agg.pixel(m, n))
        } else {
            0.0
        };
        let wts = self.weights.at(i, j);
        let mask = self.weights.mask_at(i, j);
        for (slot, off) in self.offsets.iter().enumerate() {
            if !mask[slot] {
                continue;
            }
            let read = self.read_offsets[slot];
            if let Some(b) = f2_agg.pixel_checked(m as isize + read.di, n as isize + read.dj) {
                let a = self.values.pixel((i as isize + off.di) as usize, (j as isize + off.dj) as usize);
                acc += self.alpha * wts[slot].to_f64() * dot_f64(a, b);
            }
        }
        acc
    }

    /// Materializes `C''` against `f2_agg`: for each offset, the weighted
    /// frame-1 neighbor features are correlated with the shifted frame-2 map.
    pub fn materialize(&self, f2_agg: &FeatureMap<T>) -> Result<CostVolume4D<T>> {
        self.check_partner(f2_agg)?;
        let (h1, w1, c) = (self.f1.height(), self.f1.width(), self.f1.channels());
        let (h2, w2) = (f2_agg.height(), f2_agg.width());
        let map_len = h2 * w2;
        Shape::new(&[h1, w1, h2, w2])?;
        let mut data = vec![T::ZERO; h1 * w1 * map_len];
        parallel::for_each_chunk(&mut data, w1 * map_len, |i, row| {
            let mut acc = vec![0.0f64; map_len];
            let mut g = vec![0.0f64; c];
            for j in 0..w1 {
                let a = self.f1.pixel(i, j);
                for (q, v) in acc.iter_mut().enumerate() {
                    *v = if self.residual {
                        dot_f64(a, f2_agg.pixel(q / w2, q % w2))
                    } else {
                        0.0
                    };
                }
                let wts = self.weights.at(i, j);
                let mask = self.weights.mask_at(i, j);
                for (slot, off) in self.offsets.iter().enumerate() {
                    if !mask[slot] {
                        continue;
                    }
                    let scale = self.alpha * wts[slot].to_f64();
                    let nb = self.values.pixel((i as isize + off.di) as usize, (j as isize + off.dj) as usize);
                    for (gv, &x) in g.iter_mut().zip(nb) {
                        *gv = scale * x.to_f64();
                    }
                    let read = self.read_offsets[slot];
                    let m_lo = (-read.di).max(0) as usize;
                    let m_hi = (h2 as isize - read.di).min(h2 as isize).max(0) as usize;
                    let n_lo = (-read.dj).max(0) as usize;
                    let n_hi = (w2 as isize - read.dj).min(w2 as isize).max(0) as usize;
                    for m in m_lo..m_hi {
                        let y = (m as isize + read.di) as usize;
                        for n in n_lo..n_hi {
                            let x = (n as isize + read.dj) as usize;
                            let b = f2_agg.pixel(y, x);
                            let mut s = 0.0;
                            for (gv, bv) in g.iter().zip(b) {
                                s += gv * bv.to_f64();
                            }
                            acc[m * w2 + n] += s;
                        }
                    }
                }
                for (o, &v) in row[j * map_len..(j + 1) * map_len].iter_mut().zip(&acc) {
                    *o = T::from_f64(v);
                }
            }
        });
        Ok(CostVolume4D::from_raw([h1, w1, h2, w2], data, None))
    }
}

/// Fast SLSA producing the full 4D volume.
pub fn slsa_aggregate<T: Real>(
    f1: &FeatureMap<T>,
    f2_agg: &FeatureMap<T>,
    fc: &FeatureMap<T>,
    cfg: &SlsaConfig<T>,
) -> Result<CostVolume4D<T>> {
    if !f1.same_grid(f2_agg) {
        return Err(Error::shape(format!(
            "frames differ: {}x{} vs {}x{}",
            f1.height(),
            f1.width(),
            f2_agg.height(),
            f2_agg.width()
        )));
    }
    slsa_prepare(f1, fc, cfg)?.materialize(f2_agg)
}

/// Brute-force SLSA on materialized volumes: builds the value volume
/// `⟨ρ(F1), F2a⟩`, then shifts and weight-sums whole neighbor cost maps.
/// `cv_prime` supplies the residual term and must be `⟨F1, F2a⟩`.
pub fn slsa_costvol_oracle<T: Real>(
    cv_prime: &CostVolume4D<T>,
    f1: &FeatureMap<T>,
    f2_agg: &FeatureMap<T>,
    fc: &FeatureMap<T>,
    cfg: &SlsaConfig<T>,
) -> Result<CostVolume4D<T>> {
    check_inputs(f1, fc, cfg)?;
    let (h, w) = (f1.height(), f1.width());
    if cv_prime.dims() != [h, w, h, w] || f1.tensor().dims() != f2_agg.tensor().dims() {
        return Err(Error::shape(format!(
            "volume {:?} is not built from {}x{} features",
            cv_prime.dims(),
            h,
            w
        )));
    }
    let weights = similarity_weights(fc, &cfg.params, cfg.region)?;
    let values = cfg.params.project_values(f1)?;
    let value_volume = build_cost_volume(&values, f2_agg, None)?;
    shift_aggregate_cost_maps(cv_prime, &value_volume, &weights, cfg)
}

/// `out(i, j) = [res]·R(i, j) + α Σ_k W(i, j, k) · Shift(V(i_k, j_k), rp_k)`.
/// Linear in both volumes.
pub fn shift_aggregate_cost_maps<T: Real>(
    residual_volume: &CostVolume4D<T>,
    value_volume: &CostVolume4D<T>,
    weights: &AttentionWeights<T>,
    cfg: &SlsaConfig<T>,
) -> Result<CostVolume4D<T>> {
    let dims = residual_volume.dims();
    if value_volume.dims() != dims || weights.height() != dims[0] || weights.width() != dims[1] {
        return Err(Error::shape(format!(
            "volumes {:?}/{:?} and weights {}x{} disagree",
            dims,
            value_volume.dims(),
            weights.height(),
            weights.width()
        )));
    }
    if weights.region() != cfg.region {
        return Err(Error::shape("weights were computed for a different window".to_string()));
    }
    let [h1, w1, h2, w2] = dims;
    let alpha = cfg.params.alpha.to_f64();
    let mut data = vec![T::ZERO; h1 * w1 * h2 * w2];
    parallel::for_each_chunk(&mut data, h2 * w2, |p, out| {
        let (i, j) = (p / w1, p % w1);
        let base = residual_volume.cost_map(i, j);
        let wts = weights.at(i, j);
        let mask = weights.mask_at(i, j);
        let mut acc: Vec<f64> = if cfg.residual {
            base.as_slice().iter().map(|v| v.to_f64()).collect()
        } else {
            vec![0.0; h2 * w2]
        };
        for (slot, off) in cfg.offsets.iter().enumerate() {
            if !mask[slot] {
                continue;
            }
            let neighbor = value_volume
                .cost_map_checked(i as isize + off.di, j as isize + off.dj)
                .expect("valid slot is in frame");
            let read = cfg.effective(slot);
            let wt = alpha * wts[slot].to_f64();
            for m in 0..h2 {
                for n in 0..w2 {
                    acc[m * w2 + n] += wt * neighbor.get_or_zero(m as isize + read.di, n as isize + read.dj).to_f64();
                }
            }
        }
        for (o, v) in out.iter_mut().zip(acc) {
            *o = T::from_f64(v);
        }
    });
    Ok(CostVolume4D::from_raw(dims, data, residual_volume.scale_applied()))
}

/// SLSA without the shift collapses to LSA on frame 1 with SLSA's weights:
/// this returns exactly that aggregated frame-1 feature map.
pub fn slsa_no_shift<T: Real>(f1: &FeatureMap<T>, fc: &FeatureMap<T>, cfg: &SlsaConfig<T>) -> Result<FeatureMap<T>> {
    lsa_aggregate_features(f1, fc, &cfg.as_lsa())
}
