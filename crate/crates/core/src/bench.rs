//! Wall-clock comparison of the feature-side (fast) operators against their
//! materialized-volume oracles.

use std::fmt;
use std::time::Instant;

use crate::attention::{LocalRegion, ProjectionParams};
use crate::cost_volume::{build_cost_volume, FeatureMap};
use crate::error::{Error, Result};
use crate::lsa::{lsa_aggregate_costvol_oracle, lsa_aggregate_features, LsaConfig};
use crate::parallel;
use crate::slsa::{slsa_costvol_oracle, slsa_prepare, SlsaConfig};
use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchPath {
    Fast,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchOp {
    Lsa,
    Slsa,
}

impl fmt::Display for BenchPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchPath::Fast => "fast",
            BenchPath::Oracle => "oracle",
        })
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchOp::Lsa => "lsa",
            BenchOp::Slsa => "slsa",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub path: BenchPath,
    pub op: BenchOp,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub k: usize,
    pub reps: usize,
    pub wall_time_ns_median: u64,
    /// Intermediate storage beyond inputs and the output volume, in bytes,
    /// counted analytically at 4 bytes per element.
    pub peak_extra_bytes: u64,
}

pub const MIN_REPS: usize = 5;

pub const BENCH_CSV_HEADER: &str = "path,op,H,W,C,k,reps,wall_time_ns_median,peak_extra_bytes";

impl BenchRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.path,
            self.op,
            self.height,
            self.width,
            self.channels,
            self.k,
            self.reps,
            self.wall_time_ns_median,
            self.peak_extra_bytes
        )
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Square frame sides.
    pub sizes: Vec<usize>,
    pub k: usize,
    pub reps: usize,
    pub channels: usize,
    /// Worker threads; `0` keeps the global pool.
    pub threads: usize,
    pub seed: u64,
    /// Repetitions shorter than this are batched to stay clear of timer
    /// resolution.
    pub min_rep_ns: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![16, 24, 32],
            k: 5,
            reps: 9,
            channels: 16,
            threads: 1,
            seed: 0,
            min_rep_ns: 200_000,
        }
    }
}

/// Oracle-to-fast ratios for one operator at one size.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRatio {
    pub op: BenchOp,
    pub size: usize,
    pub time_ratio: f64,
    pub bytes_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    pub ratios: Vec<BenchRatio>,
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(BENCH_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }

    pub fn record(&self, path: BenchPath, op: BenchOp, size: usize) -> Option<&BenchRecord> {
        self.records
            .iter()
            .find(|r| r.path == path && r.op == op && r.height == size)
    }

    /// True when the time ratio strictly increases with size for `op`.
    pub fn ratio_grows(&self, op: BenchOp) -> bool {
        let r: Vec<f64> = self.ratios.iter().filter(|r| r.op == op).map(|r| r.time_ratio).collect();
        r.windows(2).all(|w| w[1] > w[0])
    }

    /// True when the time ratio never decreases across sizes after the
    /// smallest one.
    pub fn ratio_monotone(&self, op: BenchOp) -> bool {
        let r: Vec<f64> = self.ratios.iter().filter(|r| r.op == op).map(|r| r.time_ratio).collect();
        r.iter().skip(1).collect::<Vec<_>>().windows(2).all(|w| w[1] >= w[0])
    }
}

/// Median of `reps` timed repetitions after one warm-up call.
fn time_median(reps: usize, min_rep_ns: u64, mut f: impl FnMut() -> Result<()>) -> Result<u64> {
    let start = Instant::now();
    f()?;
    let once = start.elapsed().as_nanos().max(1) as u64;
    let inner = min_rep_ns.div_ceil(once).max(1);
    if inner > 1 {
        log::warn!("single call took {once} ns; timing {inner} calls per repetition");
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        samples.push(start.elapsed().as_nanos() as u64 / inner);
    }
    samples.sort_unstable();
    Ok(samples[samples.len() / 2])
}

/// Times fast and oracle LSA and SLSA for every size.
///
/// Fast paths stop in feature space: aggregated `F2'` for LSA and the
/// projected, weighted frame-1 side for SLSA, whose correlations are then
/// read on demand. Oracles start from a prebuilt raw volume and include
/// materializing their value volume.
pub fn bench_compare(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps < MIN_REPS || cfg.channels == 0 || cfg.sizes.is_empty() {
        return Err(Error::Contract(format!(
            "bench needs at least {MIN_REPS} reps, positive channels and one size"
        )));
    }
    let region = LocalRegion::new(cfg.k)?;
    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    parallel::with_threads(cfg.threads, || {
        let mut records = Vec::new();
        let mut ratios = Vec::new();
        for &s in &sizes {
            let c = cfg.channels;
            let mut rng = Rng::new(cfg.seed ^ s as u64);
            let f1 = FeatureMap::<f32>::seeded_uniform(s, s, c, &mut rng, -1.0, 1.0)?;
            let f2 = FeatureMap::<f32>::seeded_uniform(s, s, c, &mut rng, -1.0, 1.0)?;
            let fc = FeatureMap::<f32>::seeded_uniform(s, s, c, &mut rng, -1.0, 1.0)?;
            let params = ProjectionParams::seeded(c, c, c, false, &mut rng)?;
            let lsa = LsaConfig::new(region, params.clone());
            let slsa = SlsaConfig::new(region, params);
            let cv = build_cost_volume(&f1, &f2, None)?;
            let feat_bytes = (s * s * c * 4) as u64;
            let vol_bytes = (s * s * s * s * 4) as u64;
            let mut push = |path, op, ns| {
                records.push(BenchRecord {
                    path,
                    op,
                    height: s,
                    width: s,
                    channels: c,
                    k: cfg.k,
                    reps: cfg.reps,
                    wall_time_ns_median: ns,
                    peak_extra_bytes: if path == BenchPath::Fast { feat_bytes } else { vol_bytes },
                })
            };
            let t_lf = time_median(cfg.reps, cfg.min_rep_ns, || {
                std::hint::black_box(lsa_aggregate_features(&f2, &fc, &lsa)?);
                Ok(())
            })?;
            push(BenchPath::Fast, BenchOp::Lsa, t_lf);
            let t_lo = time_median(cfg.reps, cfg.min_rep_ns, || {
                std::hint::black_box(lsa_aggregate_costvol_oracle(&cv, &f1, &f2, &fc, &lsa)?);
                Ok(())
            })?;
            push(BenchPath::Oracle, BenchOp::Lsa, t_lo);
            let t_sf = time_median(cfg.reps, cfg.min_rep_ns, || {
                std::hint::black_box(slsa_prepare(&f1, &fc, &slsa)?);
                Ok(())
            })?;
            push(BenchPath::Fast, BenchOp::Slsa, t_sf);
            let t_so = time_median(cfg.reps, cfg.min_rep_ns, || {
                std::hint::black_box(slsa_costvol_oracle(&cv, &f1, &f2, &fc, &slsa)?);
                Ok(())
            })?;
            push(BenchPath::Oracle, BenchOp::Slsa, t_so);
            let bytes_ratio = vol_bytes as f64 / feat_bytes as f64;
            for (op, fast, oracle) in [(BenchOp::Lsa, t_lf, t_lo), (BenchOp::Slsa, t_sf, t_so)] {
                ratios.push(BenchRatio {
                    op,
                    size: s,
                    time_ratio: oracle as f64 / fast.max(1) as f64,
                    bytes_ratio,
                });
            }
        }
        let report = BenchReport { records, ratios };
        for op in [BenchOp::Lsa, BenchOp::Slsa] {
            if !report.ratio_monotone(op) {
                log::warn!("{op}: oracle/fast time ratio decreased with size");
            }
        }
        Ok(report)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_and_bytes() {
        let cfg = BenchConfig {
            sizes: vec![8, 6],
            k: 3,
            reps: 5,
            channels: 4,
            threads: 1,
            seed: 1,
            min_rep_ns: 0,
        };
        let rep = bench_compare(&cfg).unwrap();
        assert_eq!(rep.records.len(), 8);
        let f = rep.record(BenchPath::Fast, BenchOp::Lsa, 8).unwrap();
        let o = rep.record(BenchPath::Oracle, BenchOp::Lsa, 8).unwrap();
        assert_eq!(f.peak_extra_bytes, 8 * 8 * 4 * 4);
        assert_eq!(o.peak_extra_bytes, 8 * 8 * 8 * 8 * 4);
        assert_eq!(rep.ratios[0].size, 6);
        assert_eq!(rep.ratios[2].bytes_ratio, 16.0);
        let csv = rep.csv();
        assert!(csv.starts_with(BENCH_CSV_HEADER));
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.lines().nth(1).unwrap().starts_with("fast,lsa,6,6,4,3,5,"));
    }

    #[test]
    fn rejects_empty_config() {
        let cfg = BenchConfig {
            reps: 0,
            ..BenchConfig::default()
        };
        assert!(bench_compare(&cfg).is_err());
    }
}
