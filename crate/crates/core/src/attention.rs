//! Similarity-softmax weights over a local window, computed from context
//! features through query/key projections, plus the value projection and
//! residual gain shared by both aggregation operators.

use serde_json::json;

use crate::cost_volume::FeatureMap;
use crate::error::{Error, Result};
use crate::io::{NamedTensor, TensorContainer};
use crate::parallel;
use crate::tensor::{DenseTensor, Real, Rng, Shape};

/// Odd `k × k` window with radius `r = (k - 1) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalRegion {
    k: usize,
}

impl LocalRegion {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::Range(format!("window size must be odd and >= 1, got {k}")));
        }
        Ok(Self { k })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn radius(&self) -> usize {
        (self.k - 1) / 2
    }

    /// Number of window slots, `k²`.
    pub fn len(&self) -> usize {
        self.k * self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Window offsets `(di, dj)` in slot order: row-major over `di, dj ∈ [-r, r]`.
    pub fn offsets(&self) -> impl Iterator<Item = (isize, isize)> + '_ {
        let r = self.radius() as isize;
        let k = self.k as isize;
        (0..k * k).map(move |s| (s / k - r, s % k - r))
    }

    /// Slot index of an offset.
    pub fn slot(&self, di: isize, dj: isize) -> usize {
        let r = self.radius() as isize;
        ((di + r) * self.k as isize + (dj + r)) as usize
    }

    fn check_fits(&self, h: usize, w: usize) -> Result<()> {
        let limit = 2 * h.min(w) - 1;
        if self.k > limit {
            return Err(Error::Range(format!(
                "window {0}x{0} exceeds 2*min(H, W)-1 = {limit} for a {h}x{w} map",
                self.k
            )));
        }
        Ok(())
    }
}

/// Query (`theta`), key (`phi`) and value (`rho`) maps plus residual gain `alpha`.
///
/// `theta`, `phi` are `[Cc, d]`; `rho` is `[C, C]`. Biases are optional.
/// `logit_scale` multiplies every logit when set (e.g. `1/√d`); it is a fixed
/// hyperparameter, not a learnable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams<T> {
    pub theta: DenseTensor<T>,
    pub phi: DenseTensor<T>,
    pub rho: DenseTensor<T>,
    pub alpha: T,
    pub theta_bias: Option<DenseTensor<T>>,
    pub phi_bias: Option<DenseTensor<T>>,
    pub rho_bias: Option<DenseTensor<T>>,
    pub logit_scale: Option<f64>,
}

fn identity<T: Real>(n: usize) -> DenseTensor<T> {
    let mut data = vec![T::ZERO; n * n];
    for i in 0..n {
        data[i * n + i] = T::ONE;
    }
    DenseTensor::from_vec(&[n, n], data).expect("identity dims are valid")
}

impl<T: Real> ProjectionParams<T> {
    /// `theta = phi = I[Cc]`, `rho = I[C]`, `alpha = 1`: weights follow raw
    /// context similarity and values pass through unchanged.
    pub fn identity(c: usize, cc: usize) -> Self {
        Self {
            theta: identity(cc),
            phi: identity(cc),
            rho: identity(c),
            alpha: T::ONE,
            theta_bias: None,
            phi_bias: None,
            rho_bias: None,
            logit_scale: None,
        }
    }

    /// Uniform init in `[-1/√Cin, 1/√Cin]` for each map, `alpha = 1`.
    pub fn seeded(c: usize, cc: usize, d: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let mut init = |rows: usize, cols: usize| -> Result<DenseTensor<T>> {
            let b = 1.0 / (rows as f64).sqrt();
            DenseTensor::from_vec(&[rows, cols], rng.uniform_vec(rows * cols, -b, b))
        };
        let theta = init(cc, d)?;
        let phi = init(cc, d)?;
        let rho = init(c, c)?;
        let (theta_bias, phi_bias, rho_bias) = if bias {
            let mut vec_init = |rows: usize, n: usize| -> Result<DenseTensor<T>> {
                let b = 1.0 / (rows as f64).sqrt();
                DenseTensor::from_vec(&[n], rng.uniform_vec(n, -b, b))
            };
            (Some(vec_init(cc, d)?), Some(vec_init(cc, d)?), Some(vec_init(c, c)?))
        } else {
            (None, None, None)
        };
        Ok(Self {
            theta,
            phi,
            rho,
            alpha: T::ONE,
            theta_bias,
            phi_bias,
            rho_bias,
            logit_scale: None,
        })
    }

    pub fn with_alpha(mut self, alpha: T) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_rho(mut self, rho: DenseTensor<T>) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_identity_rho(mut self) -> Self {
        self.rho = identity(self.value_channels());
        self.rho_bias = None;
        self
    }

    pub fn with_logit_scale(mut self, scale: Option<f64>) -> Self {
        self.logit_scale = scale;
        self
    }

    pub fn context_channels(&self) -> usize {
        self.theta.dims()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.theta.dims()[1]
    }

    pub fn value_channels(&self) -> usize {
        self.rho.dims()[0]
    }

    pub fn has_bias(&self) -> bool {
        self.theta_bias.is_some() || self.phi_bias.is_some() || self.rho_bias.is_some()
    }

    /// Total learnable scalars actually allocated.
    pub fn num_parameters(&self) -> usize {
        let len = |t: &DenseTensor<T>| t.as_slice().len();
        len(&self.theta)
            + len(&self.phi)
            + len(&self.rho)
            + 1
            + self.theta_bias.as_ref().map_or(0, len)
            + self.phi_bias.as_ref().map_or(0, len)
            + self.rho_bias.as_ref().map_or(0, len)
    }

    /// Checks internal consistency and, when given, the channel counts of the
    /// context and value features it will be applied to.
    pub fn validate(&self, value_channels: Option<usize>, context_channels: Option<usize>) -> Result<()> {
        let two_d = |t: &DenseTensor<T>, name: &str| -> Result<()> {
            if t.shape().rank() != 2 {
                return Err(Error::shape(format!("{name} must be 2-D, got {:?}", t.dims())));
            }
            Ok(())
        };
        two_d(&self.theta, "theta")?;
        two_d(&self.phi, "phi")?;
        two_d(&self.rho, "rho")?;
        if self.theta.dims() != self.phi.dims() {
            return Err(Error::shape(format!(
                "theta {:?} and phi {:?} must match",
                self.theta.dims(),
                self.phi.dims()
            )));
        }
        let rd = self.rho.dims();
        if rd[0] != rd[1] {
            return Err(Error::shape(format!("rho must be square, got {rd:?}")));
        }
        let check_bias = |b: &Option<DenseTensor<T>>, n: usize, name: &str| -> Result<()> {
            if let Some(b) = b {
                if b.dims() != [n] {
                    return Err(Error::shape(format!("{name} must be [{n}], got {:?}", b.dims())));
                }
            }
            Ok(())
        };
        check_bias(&self.theta_bias, self.embed_dim(), "theta_bias")?;
        check_bias(&self.phi_bias, self.embed_dim(), "phi_bias")?;
        check_bias(&self.rho_bias, rd[0], "rho_bias")?;
        if !self.alpha.is_finite() {
            return Err(Error::Contract("alpha is not finite".into()));
        }
        if let Some(c) = value_channels {
            if c != rd[0] {
                return Err(Error::shape(format!("rho is {rd:?} but features have {c} channels")));
            }
        }
        if let Some(cc) = context_channels {
            if cc != self.context_channels() {
                return Err(Error::shape(format!(
                    "theta expects {} context channels, got {cc}",
                    self.context_channels()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ProjectionParams<U> {
        ProjectionParams {
            theta: self.theta.cast(),
            phi: self.phi.cast(),
            rho: self.rho.cast(),
            alpha: U::from_f64(self.alpha.to_f64()),
            theta_bias: self.theta_bias.as_ref().map(|b| b.cast()),
            phi_bias: self.phi_bias.as_ref().map(|b| b.cast()),
            rho_bias: self.rho_bias.as_ref().map(|b| b.cast()),
            logit_scale: self.logit_scale,
        }
    }

    /// Applies the value projection `rho`.
    pub fn project_values(&self, fm: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        project(fm, &self.rho, self.rho_bias.as_ref())
    }
}

/// Per-pixel affine map `out(i, j) = fm(i, j)ᵀ · weight + bias` with
/// `weight` shaped `[Cin, Cout]`.
pub fn project<T: Real>(fm: &FeatureMap<T>, weight: &DenseTensor<T>, bias: Option<&DenseTensor<T>>) -> Result<FeatureMap<T>> {
    let wd = weight.dims();
    if wd.len() != 2 || wd[0] != fm.channels() {
        return Err(Error::shape(format!(
            "projection {:?} cannot consume {} channels",
            wd,
            fm.channels()
        )));
    }
    let (cin, cout) = (wd[0], wd[1]);
    if let Some(b) = bias {
        if b.dims() != [cout] {
            return Err(Error::shape(format!("bias {:?} does not match output {cout}", b.dims())));
        }
    }
    let (h, w) = (fm.height(), fm.width());
    let wt = weight.as_slice();
    let mut data = vec![T::ZERO; h * w * cout];
    parallel::for_each_chunk(&mut data, w * cout, |i, row| {
        let mut acc = vec![0.0f64; cout];
        for j in 0..w {
            let x = fm.pixel(i, j);
            match bias {
                Some(b) => acc.iter_mut().zip(b.as_slice()).for_each(|(a, &v)| *a = v.to_f64()),
                None => acc.iter_mut().for_each(|a| *a = 0.0),
            }
            for c in 0..cin {
                let xc = x[c].to_f64();
                for (a, &wv) in acc.iter_mut().zip(&wt[c * cout..(c + 1) * cout]) {
                    *a += xc * wv.to_f64();
                }
            }
            for (o, a) in row[j * cout..(j + 1) * cout].iter_mut().zip(&acc) {
                *o = T::from_f64(*a);
            }
        }
    });
    Ok(FeatureMap::from_raw(h, w, cout, data))
}

fn softmax_masked(logits: &[f64], mask: &[bool], out: &mut [f64]) -> bool {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for ((o, &l), &m) in out.iter_mut().zip(logits).zip(mask) {
        *o = if m { (l - max).exp() } else { 0.0 };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    true
}

/// Max-subtracted softmax over the valid entries; masked entries are 0.
pub fn softmax_stable<T: Real>(logits: &[T], mask: &[bool]) -> Result<Vec<T>> {
    if logits.len() != mask.len() {
        return Err(Error::shape(format!(
            "{} logits with a mask of {}",
            logits.len(),
            mask.len()
        )));
    }
    if let Some(pos) = logits.iter().zip(mask).position(|(l, &m)| m && !l.is_finite()) {
        return Err(Error::Contract(format!("logit {pos} is not finite")));
    }
    let l64: Vec<f64> = logits.iter().map(|v| v.to_f64()).collect();
    let mut out = vec![0.0; l64.len()];
    if !softmax_masked(&l64, mask, &mut out) {
        return Err(Error::Contract("softmax needs at least one valid entry".into()));
    }
    Ok(out.into_iter().map(T::from_f64).collect())
}

/// Normalized `k × k` weight field per center pixel with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    height: usize,
    width: usize,
    region: LocalRegion,
    data: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Real> AttentionWeights<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn region(&self) -> LocalRegion {
        self.region
    }

    /// Weights of center `(i, j)` in slot order.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> &[T] {
        let n = self.region.len();
        let o = (i * self.width + j) * n;
        &self.data[o..o + n]
    }

    #[inline]
    pub fn mask_at(&self, i: usize, j: usize) -> &[bool] {
        let n = self.region.len();
        let o = (i * self.width + j) * n;
        &self.valid[o..o + n]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    /// `[H, W, k, k]` tensor view of the weights.
    pub fn to_tensor(&self) -> DenseTensor<T> {
        let k = self.region.size();
        DenseTensor::from_vec(&[self.height, self.width, k, k], self.data.clone()).expect("weights are finite")
    }
}

/// Window validity for center `(i, j)` on an `h × w` grid.
pub(crate) fn window_mask(region: &LocalRegion, h: usize, w: usize, i: usize, j: usize, out: &mut [bool]) {
    for (slot, (di, dj)) in region.offsets().enumerate() {
        let (y, x) = (i as isize + di, j as isize + dj);
        out[slot] = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
    }
}

/// Softmax of `⟨θ(x), φ(x_k)⟩` over the in-bounds neighbors `x_k` of every
/// center `x` of the context map. Out-of-bounds slots are excluded from the
/// normalization and stored as exact zeros.
pub fn similarity_weights<T: Real>(fc: &FeatureMap<T>, params: &ProjectionParams<T>, region: LocalRegion) -> Result<AttentionWeights<T>> {
    params.validate(None, Some(fc.channels()))?;
    let (h, w) = (fc.height(), fc.width());
    region.check_fits(h, w)?;
    let query = project(fc, &params.theta, params.theta_bias.as_ref())?;
    let key = project(fc, &params.phi, params.phi_bias.as_ref())?;
    let n = region.len();
    let offsets: Vec<(isize, isize)> = region.offsets().collect();
    let scale = params.logit_scale.unwrap_or(1.0);

    let rows = parallel::map_range(h, |i| -> Result<(Vec<T>, Vec<bool>)> {
        let mut weights = vec![T::ZERO; w * n];
        let mut valid = vec![false; w * n];
        let mut logits = vec![0.0f64; n];
        let mut soft = vec![0.0f64; n];
        for j in 0..w {
            let mask = &mut valid[j * n..(j + 1) * n];
            window_mask(&region, h, w, i, j, mask);
            let q = query.pixel(i, j);
            for (slot, &(di, dj)) in offsets.iter().enumerate() {
                logits[slot] = if mask[slot] {
                    let kv = key.pixel((i as isize + di) as usize, (j as isize + dj) as usize);
                    let l = scale * crate::tensor::dot_f64(q, kv);
                    if !l.is_finite() {
                        return Err(Error::NonFinite { row: i, col: j });
                    }
                    l
                } else {
                    0.0
                };
            }
            softmax_masked(&logits, mask, &mut soft);
            for (o, &s) in weights[j * n..(j + 1) * n].iter_mut().zip(&soft) {
                *o = T::from_f64(s);
            }
        }
        Ok((weights, valid))
    });

    let mut data = Vec::with_capacity(h * w * n);
    let mut valid = Vec::with_capacity(h * w * n);
    for row in rows {
        let (wr, vr) = row?;
        data.extend(wr);
        valid.extend(vr);
    }
    Ok(AttentionWeights {
        height: h,
        width: w,
        region,
        data,
        valid,
    })
}

const TENSOR_SUFFIXES: [&str; 7] = ["theta", "phi", "rho", "alpha", "theta_bias", "phi_bias", "rho_bias"];

/// Serializes named parameter groups (e.g. `"lsa"`, `"slsa"`) into the binary
/// tensor container. Tensor names are `<group>.<theta|phi|rho|alpha|*_bias>`.
pub fn params_to_container(groups: &[(&str, &ProjectionParams<f32>)], seed: Option<u64>) -> TensorContainer {
    let mut tensors = Vec::new();
    let mut scales = serde_json::Map::new();
    for (name, p) in groups {
        let mut push = |suffix: &str, t: &DenseTensor<f32>| {
            tensors.push(NamedTensor {
                name: format!("{name}.{suffix}"),
                dims: t.dims().to_vec(),
                data: t.as_slice().to_vec(),
            });
        };
        push("theta", &p.theta);
        push("phi", &p.phi);
        push("rho", &p.rho);
        push("alpha", &DenseTensor::from_parts(Shape::new(&[1]).expect("valid shape"), vec![p.alpha]));
        if let Some(b) = &p.theta_bias {
            push("theta_bias", b);
        }
        if let Some(b) = &p.phi_bias {
            push("phi_bias", b);
        }
        if let Some(b) = &p.rho_bias {
            push("rho_bias", b);
        }
        if let Some(s) = p.logit_scale {
            scales.insert((*name).to_string(), json!(s));
        }
    }
    let mut meta = serde_json::Map::new();
    meta.insert("kind".into(), json!("projection-params"));
    if let Some(seed) = seed {
        meta.insert("seed".into(), json!(seed));
    }
    if !scales.is_empty() {
        meta.insert("logit_scale".into(), serde_json::Value::Object(scales));
    }
    TensorContainer {
        meta: serde_json::Value::Object(meta),
        tensors,
    }
}

/// Reads one parameter group back from a container.
pub fn params_from_container(container: &TensorContainer, group: &str) -> Result<ProjectionParams<f32>> {
    let fetch = |suffix: &str| -> Option<DenseTensor<f32>> {
        container
            .get(&format!("{group}.{suffix}"))
            .map(|t| DenseTensor::from_vec(&t.dims, t.data.clone()))
            .transpose()
            .ok()
            .flatten()
    };
    let require = |suffix: &str| fetch(suffix).ok_or_else(|| Error::Format(format!("missing or invalid tensor {group}.{suffix}")));
    for t in &container.tensors {
        if let Some(rest) = t.name.strip_prefix(&format!("{group}.")) {
            if !TENSOR_SUFFIXES.contains(&rest) {
                return Err(Error::Format(format!("unknown tensor {}", t.name)));
            }
        }
    }
    let alpha = require("alpha")?;
    if alpha.dims() != [1] {
        return Err(Error::Format(format!("{group}.alpha must have shape [1]")));
    }
    let logit_scale = container
        .meta
        .get("logit_scale")
        .and_then(|m| m.get(group))
        .and_then(|v| v.as_f64());
    let params = ProjectionParams {
        theta: require("theta")?,
        phi: require("phi")?,
        rho: require("rho")?,
        alpha: alpha.as_slice()[0],
        theta_bias: fetch("theta_bias"),
        phi_bias: fetch("phi_bias"),
        rho_bias: fetch("rho_bias"),
        logit_scale,
    };
    params.validate(None, None)?;
    Ok(params)
}
