//! File formats: Middlebury `.flo`, binary PPM (P6), the flow color wheel and
//! a small tensor container (JSON header + raw little-endian `f32`).

use serde::{Deserialize, Serialize};

use crate::cost_volume::CostVolume4D;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::{DenseTensor, Real};

pub const FLO_MAGIC: [u8; 4] = *b"PIEH";
/// Written for invalid pixels.
pub const FLO_UNKNOWN: f32 = 1e10;
/// Components above this magnitude (or NaN) are read back as invalid.
pub const FLO_UNKNOWN_THRESHOLD: f32 = 1e9;

fn is_unknown(v: f32) -> bool {
    v.is_nan() || v.abs() > FLO_UNKNOWN_THRESHOLD
}

/// Parses a `.flo` file. Float bit patterns are kept exactly; pixels with an
/// unknown component are marked invalid.
pub fn read_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!("flo header needs 12 bytes, got {}", bytes.len())));
    }
    if bytes[0..4] != FLO_MAGIC {
        return Err(Error::Format(format!("bad flo magic {:02x?}", &bytes[0..4])));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let height = i32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if width <= 0 || height <= 0 {
        return Err(Error::Format(format!("invalid flo dimensions {width}x{height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let body = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("flo dimensions overflow".into()))?;
    if bytes.len() - 12 != body {
        return Err(Error::Format(format!(
            "flo body is {} bytes, header implies {body}",
            bytes.len() - 12
        )));
    }
    let data: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let valid = data.chunks_exact(2).map(|uv| !(is_unknown(uv[0]) || is_unknown(uv[1]))).collect();
    FlowField::from_parts(h, w, data, valid)
}

/// Serializes a flow field. Invalid pixels whose stored values are not
/// already unknown-coded are written as [`FLO_UNKNOWN`].
pub fn write_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + h * w * 8);
    out.extend_from_slice(&FLO_MAGIC);
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for i in 0..h {
        for j in 0..w {
            let (mut u, mut v) = flow.get(i, j);
            if !flow.is_valid(i, j) && !(is_unknown(u) || is_unknown(v)) {
                u = FLO_UNKNOWN;
                v = FLO_UNKNOWN;
            }
            out.extend_from_slice(&u.to_bits().to_le_bytes());
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, i: usize, j: usize) -> [u8; 3] {
        let o = 3 * (i * self.width + j);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;
pub const WHEEL_BINS: usize = RY + YG + GC + CB + BM + MR;

/// The 55-entry Middlebury color wheel.
pub fn color_wheel() -> Vec<[u8; 3]> {
    let ramp = |i: usize, n: usize| (255 * i / n) as u8;
    let mut wheel = Vec::with_capacity(WHEEL_BINS);
    for i in 0..RY {
        wheel.push([255, ramp(i, RY), 0]);
    }
    for i in 0..YG {
        wheel.push([255 - ramp(i, YG), 255, 0]);
    }
    for i in 0..GC {
        wheel.push([0, 255, ramp(i, GC)]);
    }
    for i in 0..CB {
        wheel.push([0, 255 - ramp(i, CB), 255]);
    }
    for i in 0..BM {
        wheel.push([ramp(i, BM), 0, 255]);
    }
    for i in 0..MR {
        wheel.push([255, 0, 255 - ramp(i, MR)]);
    }
    wheel
}

/// Color-codes a flow field: hue from the flow angle, saturation from the
/// magnitude divided by `max_norm` (per-image maximum when `None`). Invalid
/// pixels are black; zero flow is white.
pub fn flow_to_color(flow: &FlowField, max_norm: Option<f32>) -> RgbImage {
    let (h, w) = (flow.height(), flow.width());
    let norm = match max_norm {
        Some(m) => m as f64,
        None => {
            let mut m = 0.0f64;
            for i in 0..h {
                for j in 0..w {
                    if flow.is_valid(i, j) {
                        let (u, v) = flow.get(i, j);
                        m = m.max((u as f64).hypot(v as f64));
                    }
                }
            }
            m
        }
    };
    let wheel = color_wheel();
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            if !flow.is_valid(i, j) {
                data.extend_from_slice(&[0, 0, 0]);
                continue;
            }
            let (u, v) = flow.get(i, j);
            let (u, v) = if norm > 0.0 {
                (u as f64 / norm, v as f64 / norm)
            } else {
                (0.0, 0.0)
            };
            data.extend_from_slice(&wheel_color(&wheel, u, v));
        }
    }
    RgbImage { height: h, width: w, data }
}

fn wheel_color(wheel: &[[u8; 3]], u: f64, v: f64) -> [u8; 3] {
    let n = wheel.len();
    let rad = u.hypot(v);
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
    let k0 = (fk.floor() as usize).min(n - 1);
    let k1 = if k0 + 1 == n { 0 } else { k0 + 1 };
    let f = fk - k0 as f64;
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let c0 = wheel[k0][ch] as f64 / 255.0;
        let c1 = wheel[k1][ch] as f64 / 255.0;
        let mut col = (1.0 - f) * c0 + f * c1;
        if rad <= 1.0 {
            col = 1.0 - rad * (1.0 - col);
        } else {
            col *= 0.75;
        }
        out[ch] = (255.0 * col).floor().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Binary PPM (P6, maxval 255).
pub fn write_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub const CONTAINER_MAGIC: [u8; 4] = *b"LAGT";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Flat binary container: `LAGT`, `u32` version, `u64` header length, a JSON
/// header `{"meta": {...}, "tensors": [{"name", "shape"}]}`, then each
/// tensor's elements as little-endian `f32` in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<HeaderEntry>,
}

impl TensorContainer {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for t in &self.tensors {
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::shape(format!("tensor {} data does not match {:?}", t.name, t.dims)));
            }
        }
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| HeaderEntry {
                    name: t.name.clone(),
                    shape: t.dims.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[0..4] != CONTAINER_MAGIC {
            return Err(Error::Format("not a tensor container".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated container header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
        let mut offset = body_start;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = offset
                .checked_add(n * 4)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Format(format!("truncated data for tensor {}", entry.name)))?;
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset = end;
            tensors.push(NamedTensor {
                name: entry.name,
                dims: entry.shape,
                data,
            });
        }
        if offset != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after tensor data", bytes.len() - offset)));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }
}

/// Packs a cost volume as a single-tensor container named `cost_volume`.
pub fn cost_volume_to_container<T: Real>(cv: &CostVolume4D<T>, seed: Option<u64>) -> TensorContainer {
    let mut meta = serde_json::Map::new();
    meta.insert("kind".into(), "cost-volume".into());
    if let Some(s) = seed {
        meta.insert("seed".into(), s.into());
    }
    meta.insert(
        "scale".into(),
        cv.scale_applied().map_or(serde_json::Value::Null, Into::into),
    );
    TensorContainer {
        meta: serde_json::Value::Object(meta),
        tensors: vec![NamedTensor {
            name: "cost_volume".into(),
            dims: cv.dims().to_vec(),
            data: cv.as_slice().iter().map(|v| v.to_f64() as f32).collect(),
        }],
    }
}

pub fn cost_volume_from_container(container: &TensorContainer) -> Result<CostVolume4D<f32>> {
    let t = container
        .get("cost_volume")
        .ok_or_else(|| Error::Format("container has no cost_volume tensor".into()))?;
    let scale = container.meta.get("scale").and_then(|v| v.as_f64());
    CostVolume4D::from_tensor(DenseTensor::from_vec(&t.dims, t.data.clone())?, scale)
}
