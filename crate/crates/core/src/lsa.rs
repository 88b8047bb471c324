//! Local similarity aggregation (LSA).
//!
//! Aggregating each cost map `C(i, j, ·, ·)` over a window of frame-2
//! positions is the same as aggregating the frame-2 features before the
//! correlation, because the volume is linear in `F2`. The fast path works on
//! the `H × W × C` features; the oracle works on the materialized volume.

use crate::attention::{similarity_weights, AttentionWeights, LocalRegion, ProjectionParams};
use crate::cost_volume::{build_cost_volume, CostVolume4D, FeatureMap};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{DenseTensor, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct LsaConfig<T> {
    pub region: LocalRegion,
    pub params: ProjectionParams<T>,
    /// Keeps the `x +` term of `x + α Σ W ρ(x_k)`.
    pub residual: bool,
}

impl<T: Real> LsaConfig<T> {
    pub fn new(region: LocalRegion, params: ProjectionParams<T>) -> Self {
        Self {
            region,
            params,
            residual: true,
        }
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn cast<U: Real>(&self) -> LsaConfig<U> {
        LsaConfig {
            region: self.region,
            params: self.params.cast(),
            residual: self.residual,
        }
    }
}

fn check_inputs<T: Real>(feat: &FeatureMap<T>, fc: &FeatureMap<T>, cfg: &LsaConfig<T>) -> Result<()> {
    if !feat.same_grid(fc) {
        return Err(Error::shape(format!(
            "features are {}x{}, context is {}x{}",
            feat.height(),
            feat.width(),
            fc.height(),
            fc.width()
        )));
    }
    cfg.params.validate(Some(feat.channels()), Some(fc.channels()))
}

/// `x'(m, n) = x(m, n) + α Σ_k W(m, n, k) ρ(x(m_k, n_k))` for precomputed weights.
pub(crate) fn aggregate_with_weights<T: Real>(
    feat: &FeatureMap<T>,
    weights: &AttentionWeights<T>,
    params: &ProjectionParams<T>,
    residual: bool,
) -> Result<FeatureMap<T>> {
    let values = params.project_values(feat)?;
    let (h, w, c) = (feat.height(), feat.width(), feat.channels());
    let region = weights.region();
    let offsets: Vec<(isize, isize)> = region.offsets().collect();
    let alpha = params.alpha.to_f64();
    let mut data = vec![T::ZERO; h * w * c];
    parallel::for_each_chunk(&mut data, w * c, |m, row| {
        let mut acc = vec![0.0f64; c];
        for n in 0..w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let wts = weights.at(m, n);
            let mask = weights.mask_at(m, n);
            for (slot, &(di, dj)) in offsets.iter().enumerate() {
                if !mask[slot] {
                    continue;
                }
                let wt = wts[slot].to_f64();
                let v = values.pixel((m as isize + di) as usize, (n as isize + dj) as usize);
                for (a, &x) in acc.iter_mut().zip(v) {
                    *a += wt * x.to_f64();
                }
            }
            let x = feat.pixel(m, n);
            for ch in 0..c {
                let base = if residual { x[ch].to_f64() } else { 0.0 };
                row[n * c + ch] = T::from_f64(base + alpha * acc[ch]);
            }
        }
    });
    Ok(FeatureMap::from_raw(h, w, c, data))
}

/// Fast feature-space LSA: returns the aggregated frame-2 features `F2'`.
pub fn lsa_aggregate_features<T: Real>(f2: &FeatureMap<T>, fc: &FeatureMap<T>, cfg: &LsaConfig<T>) -> Result<FeatureMap<T>> {
    check_inputs(f2, fc, cfg)?;
    let weights = similarity_weights(fc, &cfg.params, cfg.region)?;
    aggregate_with_weights(f2, &weights, &cfg.params, cfg.residual)
}

/// Brute-force LSA on the materialized volume:
/// `C'(i, j, m, n) = C(i, j, m, n) + α Σ_k W(m, n, k) ⟨F1(i, j), ρ(F2(m_k, n_k))⟩`.
///
/// O(H²W²k²) time and a full 4D output.
pub fn lsa_aggregate_costvol_oracle<T: Real>(
    cv: &CostVolume4D<T>,
    f1: &FeatureMap<T>,
    f2: &FeatureMap<T>,
    fc: &FeatureMap<T>,
    cfg: &LsaConfig<T>,
) -> Result<CostVolume4D<T>> {
    check_inputs(f2, fc, cfg)?;
    let (h, w) = (f2.height(), f2.width());
    if cv.dims() != [h, w, h, w] || f1.tensor().dims() != f2.tensor().dims() {
        return Err(Error::shape(format!(
            "volume {:?} is not built from {}x{} features",
            cv.dims(),
            h,
            w
        )));
    }
    if cv.scale_applied().is_some_and(|s| s != 1.0) {
        return Err(Error::Contract("oracle expects an unscaled cost volume".into()));
    }
    let weights = similarity_weights(fc, &cfg.params, cfg.region)?;
    let values = cfg.params.project_values(f2)?;
    let value_volume = build_cost_volume(f1, &values, None)?;
    Ok(aggregate_cost_maps(cv, &value_volume, &weights, cfg.params.alpha, cfg.residual))
}

/// Window aggregation inside each cost map. Linear in both volumes.
pub fn aggregate_cost_maps<T: Real>(
    residual_volume: &CostVolume4D<T>,
    value_volume: &CostVolume4D<T>,
    weights: &AttentionWeights<T>,
    alpha: T,
    residual: bool,
) -> CostVolume4D<T> {
    let [h1, w1, h2, w2] = residual_volume.dims();
    let offsets: Vec<(isize, isize)> = weights.region().offsets().collect();
    let alpha = alpha.to_f64();
    let mut data = vec![T::ZERO; h1 * w1 * h2 * w2];
    parallel::for_each_chunk(&mut data, h2 * w2, |p, out| {
        let (i, j) = (p / w1, p % w1);
        let base = residual_volume.cost_map(i, j);
        let vals = value_volume.cost_map(i, j);
        for m in 0..h2 {
            for n in 0..w2 {
                let wts = weights.at(m, n);
                let mask = weights.mask_at(m, n);
                let mut acc = 0.0f64;
                for (slot, &(di, dj)) in offsets.iter().enumerate() {
                    if mask[slot] {
                        acc += wts[slot].to_f64()
                            * vals.get((m as isize + di) as usize, (n as isize + dj) as usize).to_f64();
                    }
                }
                let r = if residual { base.get(m, n).to_f64() } else { 0.0 };
                out[m * w2 + n] = T::from_f64(r + alpha * acc);
            }
        }
    });
    CostVolume4D::from_raw([h1, w1, h2, w2], data, residual_volume.scale_applied())
}

/// Gradients of a scalar loss with respect to the LSA inputs and parameters.
#[derive(Debug, Clone)]
pub struct LsaGradients<T> {
    pub f2: FeatureMap<T>,
    pub theta: DenseTensor<T>,
    pub phi: DenseTensor<T>,
    pub rho: DenseTensor<T>,
    pub alpha: T,
    pub theta_bias: Option<DenseTensor<T>>,
    pub phi_bias: Option<DenseTensor<T>>,
    pub rho_bias: Option<DenseTensor<T>>,
}

struct PixelGrads {
    dq: Vec<f64>,
    dkey: Vec<f64>,
    dv: Vec<f64>,
    df2: Vec<f64>,
}

/// Analytic backward pass of [`lsa_aggregate_features`] given `upstream = ∂L/∂F2'`.
///
/// Parameter gradients are reduced per image row and the row partials summed
/// in row order, so the result does not depend on the thread count.
pub fn lsa_backward<T: Real>(
    f2: &FeatureMap<T>,
    fc: &FeatureMap<T>,
    cfg: &LsaConfig<T>,
    upstream: &FeatureMap<T>,
) -> Result<LsaGradients<T>> {
    check_inputs(f2, fc, cfg)?;
    if upstream.tensor().dims() != f2.tensor().dims() {
        return Err(Error::shape(format!(
            "upstream {:?} does not match features {:?}",
            upstream.tensor().dims(),
            f2.tensor().dims()
        )));
    }
    let p = &cfg.params;
    let (h, w, c) = (f2.height(), f2.width(), f2.channels());
    let (cc, d) = (p.context_channels(), p.embed_dim());
    let region = cfg.region;
    let n = region.len();
    let offsets: Vec<(isize, isize)> = region.offsets().collect();
    let alpha = p.alpha.to_f64();
    let scale = p.logit_scale.unwrap_or(1.0);

    let query = crate::attention::project(fc, &p.theta, p.theta_bias.as_ref())?;
    let key = crate::attention::project(fc, &p.phi, p.phi_bias.as_ref())?;
    let weights = similarity_weights(fc, p, region)?;
    let values = p.project_values(f2)?;
    let g = |i: usize, j: usize| upstream.pixel(i, j);
    let at = |i: usize, j: usize, di: isize, dj: isize| -> Option<(usize, usize)> {
        let (y, x) = (i as isize + di, j as isize + dj);
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then_some((y as usize, x as usize))
    };

    // Per center: ∂L/∂logits and the α partial.
    let centers = parallel::map_range(h * w, |pix| {
        let (i, j) = (pix / w, pix % w);
        let wts = weights.at(i, j);
        let mask = weights.mask_at(i, j);
        let gp = g(i, j);
        let mut dw = vec![0.0f64; n];
        let mut agg = vec![0.0f64; c];
        for (slot, &(di, dj)) in offsets.iter().enumerate() {
            if let (true, Some((y, x))) = (mask[slot], at(i, j, di, dj)) {
                let v = values.pixel(y, x);
                let mut s = 0.0;
                for ch in 0..c {
                    s += gp[ch].to_f64() * v[ch].to_f64();
                    agg[ch] += wts[slot].to_f64() * v[ch].to_f64();
                }
                dw[slot] = alpha * s;
            }
        }
        let mean: f64 = wts.iter().zip(&dw).map(|(a, b)| a.to_f64() * b).sum();
        let dl: Vec<f64> = wts
            .iter()
            .zip(&dw)
            .zip(mask)
            .map(|((a, b), &m)| if m { a.to_f64() * (b - mean) } else { 0.0 })
            .collect();
        let dalpha: f64 = gp.iter().zip(&agg).map(|(a, b)| a.to_f64() * b).sum();
        (dl, dalpha)
    });

    // Per pixel: gather contributions from every center whose window holds it.
    let pixels = parallel::map_range(h * w, |pix| {
        let (i, j) = (pix / w, pix % w);
        let mut out = PixelGrads {
            dq: vec![0.0; d],
            dkey: vec![0.0; d],
            dv: vec![0.0; c],
            df2: vec![0.0; c],
        };
        let dl_here = &centers[pix].0;
        for (slot, &(di, dj)) in offsets.iter().enumerate() {
            if let Some((y, x)) = at(i, j, di, dj) {
                let k = key.pixel(y, x);
                for e in 0..d {
                    out.dq[e] += scale * dl_here[slot] * k[e].to_f64();
                }
            }
            // Center that reaches this pixel through `slot`.
            if let Some((y, x)) = at(i, j, -di, -dj) {
                let dl = centers[y * w + x].0[slot];
                let q = query.pixel(y, x);
                for e in 0..d {
                    out.dkey[e] += scale * dl * q[e].to_f64();
                }
                let wt = weights.at(y, x)[slot].to_f64();
                let gc = g(y, x);
                for ch in 0..c {
                    out.dv[ch] += alpha * wt * gc[ch].to_f64();
                }
            }
        }
        let rho = p.rho.as_slice();
        let gp = g(i, j);
        for ch in 0..c {
            let mut s = if cfg.residual { gp[ch].to_f64() } else { 0.0 };
            for o in 0..c {
                s += rho[ch * c + o].to_f64() * out.dv[o];
            }
            out.df2[ch] = s;
        }
        out
    });

    // Row-partial outer products, then an ordered sum.
    let rows = parallel::map_range(h, |i| {
        let mut th = vec![0.0f64; cc * d];
        let mut ph = vec![0.0f64; cc * d];
        let mut rh = vec![0.0f64; c * c];
        let mut bt = vec![0.0f64; d];
        let mut bp = vec![0.0f64; d];
        let mut br = vec![0.0f64; c];
        for j in 0..w {
            let px = &pixels[i * w + j];
            let x = fc.pixel(i, j);
            let v = f2.pixel(i, j);
            for a in 0..cc {
                let xa = x[a].to_f64();
                for e in 0..d {
                    th[a * d + e] += xa * px.dq[e];
                    ph[a * d + e] += xa * px.dkey[e];
                }
            }
            for a in 0..c {
                let va = v[a].to_f64();
                for o in 0..c {
                    rh[a * c + o] += va * px.dv[o];
                }
            }
            for e in 0..d {
                bt[e] += px.dq[e];
                bp[e] += px.dkey[e];
            }
            for o in 0..c {
                br[o] += px.dv[o];
            }
        }
        [th, ph, rh, bt, bp, br]
    });
    let mut sums = [
        vec![0.0f64; cc * d],
        vec![0.0f64; cc * d],
        vec![0.0f64; c * c],
        vec![0.0f64; d],
        vec![0.0f64; d],
        vec![0.0f64; c],
    ];
    for row in &rows {
        for (s, r) in sums.iter_mut().zip(row) {
            s.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
    }
    let dalpha: f64 = centers.iter().map(|(_, a)| a).sum();

    let to_t = |v: &[f64]| v.iter().map(|&x| T::from_f64(x)).collect::<Vec<T>>();
    let tensor = |dims: &[usize], v: &[f64]| DenseTensor::from_vec(dims, to_t(v));
    let df2: Vec<f64> = pixels.iter().flat_map(|p| p.df2.iter().copied()).collect();
    Ok(LsaGradients {
        f2: FeatureMap::from_vec(h, w, c, to_t(&df2))?,
        theta: tensor(&[cc, d], &sums[0])?,
        phi: tensor(&[cc, d], &sums[1])?,
        rho: tensor(&[c, c], &sums[2])?,
        alpha: T::from_f64(dalpha),
        theta_bias: p.theta_bias.as_ref().map(|_| tensor(&[d], &sums[3])).transpose()?,
        phi_bias: p.phi_bias.as_ref().map(|_| tensor(&[d], &sums[4])).transpose()?,
        rho_bias: p.rho_bias.as_ref().map(|_| tensor(&[c], &sums[5])).transpose()?,
    })
}

/// Learnable scalars in one LSA block: `θ`, `φ` (`Cc × d` each), `ρ` (`C × C`)
/// and `α`, plus `2d + C` biases when enabled.
pub fn lsa_param_count(c: usize, cc: usize, d: usize, bias: bool) -> usize {
    2 * cc * d + c * c + 1 + if bias { 2 * d + c } else { 0 }
}
