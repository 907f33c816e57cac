//! Per-layer, per-head memory of the relative logits: closed-form byte
//! counts for both algorithms next to metered peaks.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{efficient_srel_global, naive_srel_global, RelativeEmbeddingTable, TableMode};
use crate::error::{Error, Result};
use crate::meter::{self, Category};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?} (expected f32 or f64)"))),
        }
    }
}

/// Closed-form byte counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Analytic {
    /// `L² · D_h · s` for the gather tensor `R`.
    pub naive_relative_bytes: usize,
    /// `L · D_h · s` for the table `E^r`.
    pub efficient_relative_bytes: usize,
    /// `L² · s` for `S^rel`.
    pub logits_bytes: usize,
}

impl Analytic {
    pub fn new(len: usize, head_dim: usize, precision: Precision) -> Self {
        let s = precision.bytes();
        Self {
            naive_relative_bytes: len * len * head_dim * s,
            efficient_relative_bytes: len * head_dim * s,
            logits_bytes: len * len * s,
        }
    }
}

/// Metered peaks of one path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Measured {
    pub relative_peak_bytes: usize,
    pub logits_peak_bytes: usize,
    pub total_peak_bytes: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub length: usize,
    pub head_dim: usize,
    pub precision: Precision,
    pub analytic: Analytic,
    pub naive: Option<Measured>,
    pub efficient: Option<Measured>,
    /// Set when the naive path was skipped for exceeding the memory limit.
    pub naive_analytic_only: bool,
    /// Naive over efficient relative-intermediate peak (measured).
    pub relative_ratio: Option<f64>,
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    pub head_dim: usize,
    pub precision: Precision,
    /// The naive path is only run when its analytic `R` fits in this many bytes.
    pub naive_limit_bytes: usize,
    /// Skip all measurement and report closed forms only.
    pub analytic_only: bool,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            lengths: vec![650, 2048, 3500],
            head_dim: 64,
            precision: Precision::F32,
            naive_limit_bytes: 512_000_000,
            analytic_only: false,
            seed: 0,
        }
    }
}

fn measure_path<T: Element>(f: impl FnOnce() -> Result<Tensor<T>>) -> Result<Measured> {
    let start = Instant::now();
    let (out, report) = meter::measure(f);
    let seconds = start.elapsed().as_secs_f64();
    drop(out?);
    Ok(Measured {
        relative_peak_bytes: report.category(Category::RelativeEmbedding).peak_bytes(),
        logits_peak_bytes: report.category(Category::RelativeLogits).peak_bytes(),
        total_peak_bytes: report.total.peak_bytes(),
        seconds,
    })
}

fn run_row<T: Element>(len: usize, opts: &BenchOptions, rng: &mut ChaCha8Rng) -> Result<BenchRow> {
    let analytic = Analytic::new(len, opts.head_dim, opts.precision);
    let mut row = BenchRow {
        length: len,
        head_dim: opts.head_dim,
        precision: opts.precision,
        analytic,
        naive: None,
        efficient: None,
        naive_analytic_only: false,
        relative_ratio: None,
        speedup: None,
    };
    if opts.analytic_only {
        row.naive_analytic_only = true;
        return Ok(row);
    }
    let q = Tensor::<T>::from_fn(&[len, opts.head_dim], |_| T::from_f64(rng.gen_range(-1.0..1.0)));
    let e = Tensor::<T>::from_fn(&[len, opts.head_dim], |_| T::from_f64(rng.gen_range(-1.0..1.0)));
    let table = RelativeEmbeddingTable::new(TableMode::Global, e)?;
    let efficient = measure_path(|| efficient_srel_global(&q, &table))?;
    row.efficient = Some(efficient);
    if analytic.naive_relative_bytes <= opts.naive_limit_bytes {
        let naive = measure_path(|| naive_srel_global(&q, &table))?;
        row.relative_ratio = Some(naive.relative_peak_bytes as f64 / efficient.relative_peak_bytes.max(1) as f64);
        row.speedup = Some(naive.seconds / efficient.seconds.max(1e-12));
        row.naive = Some(naive);
    } else {
        log::warn!(
            "L={len}: naive gather needs {} bytes, above the {} byte limit; reporting it analytically",
            analytic.naive_relative_bytes,
            opts.naive_limit_bytes
        );
        row.naive_analytic_only = true;
    }
    Ok(row)
}

/// Runs the benchmark. Naive and efficient measurements run one after the
/// other so each meter session sees only its own path.
pub fn run_bench(opts: &BenchOptions) -> Result<BenchReport> {
    if opts.head_dim == 0 || opts.lengths.contains(&0) {
        return Err(Error::config("lengths and head_dim must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let rows = opts
        .lengths
        .iter()
        .map(|&len| match opts.precision {
            Precision::F32 => run_row::<f32>(len, opts, &mut rng),
            Precision::F64 => run_row::<f64>(len, opts, &mut rng),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport { rows })
}

/// Decimal megabytes.
pub fn mb(bytes: usize) -> f64 {
    bytes as f64 / 1e6
}

fn fmt_mb(bytes: usize) -> String {
    let v = mb(bytes);
    if v >= 100.0 {
        format!("{v:.0}")
    } else if v >= 10.0 {
        format!("{v:.1}")
    } else if v >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

impl BenchReport {
    /// Human-readable table in MB per layer per head.
    pub fn to_table(&self) -> String {
        let mut out = String::from(
            "L      D_h  prec  R (naive)  E^r (eff)  S^rel   meas R    meas E^r  meas eff total  ratio    speedup\n",
        );
        for r in &self.rows {
            let opt = |m: Option<usize>| m.map_or("-".to_string(), fmt_mb);
            let precision = match r.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            };
            let naive_r =
                if r.naive_analytic_only { "analytic".into() } else { opt(r.naive.map(|m| m.relative_peak_bytes)) };
            out.push_str(&format!(
                "{:<6} {:<4} {:<5} {:<10} {:<10} {:<7} {:<9} {:<9} {:<15} {:<8} {}\n",
                r.length,
                r.head_dim,
                precision,
                fmt_mb(r.analytic.naive_relative_bytes),
                fmt_mb(r.analytic.efficient_relative_bytes),
                fmt_mb(r.analytic.logits_bytes),
                naive_r,
                opt(r.efficient.map(|m| m.relative_peak_bytes)),
                opt(r.efficient.map(|m| m.total_peak_bytes)),
                r.relative_ratio.map_or("-".into(), |x| format!("{x:.1}")),
                r.speedup.map_or("-".into(), |x| format!("{x:.1}x")),
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_bytes() {
        let a = Analytic::new(2048, 64, Precision::F32);
        assert_eq!(a.efficient_relative_bytes, 2048 * 64 * 4);
        assert_eq!(a.naive_relative_bytes, 2048 * 2048 * 64 * 4);
        assert_eq!(a.logits_bytes, 2048 * 2048 * 4);
    }

    #[test]
    fn length_one_is_degenerate() {
        let opts = BenchOptions { lengths: vec![1], head_dim: 8, ..Default::default() };
        let r = &run_bench(&opts).unwrap().rows[0];
        assert_eq!(r.analytic.naive_relative_bytes, r.analytic.efficient_relative_bytes);
        assert!((r.relative_ratio.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn limit_switches_to_analytic() {
        let opts = BenchOptions { lengths: vec![64], head_dim: 8, naive_limit_bytes: 10, ..Default::default() };
        let r = &run_bench(&opts).unwrap().rows[0];
        assert!(r.naive_analytic_only && r.naive.is_none() && r.efficient.is_some());
    }
}
