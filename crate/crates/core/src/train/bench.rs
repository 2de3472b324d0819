use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::autograd::Tape;
use crate::blocks::{AttentionBlock, SecMambaBlock};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::ssm::SsmRoute;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub secmamba_ms: f64,
    pub attention_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub secmamba_slope: f64,
    pub attention_slope: f64,
}

impl BenchReport {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["N", "secmamba_ms", "attention_ms"])?;
        for r in &self.rows {
            out.write_record([r.n.to_string(), format!("{:.4}", r.secmamba_ms), format!("{:.4}", r.attention_ms)])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn median_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    })
}

/// Median single-block forward time of a SecMamba block (scan route) and an
/// attention block over `[N × d]` token inputs, one warm-up call excluded.
pub fn bench_complexity(lengths: &[usize], d: usize, n_heads: usize, reps: usize) -> Result<BenchReport> {
    if lengths.is_empty() || reps == 0 {
        return Err(Error::EmptyInput { op: "bench_complexity" });
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(Error::Config(format!("sequence lengths must be positive and ascending, got {lengths:?}")));
    }
    let mut store = ParamStore::<f32>::new();
    let secmamba = SecMambaBlock::new(&mut store, "bench.secmamba", d, d, 16, &mut Init::scoped(0, "bench.secmamba"));
    let attention = AttentionBlock::new(&mut store, "bench.attention", d, n_heads, &mut Init::scoped(0, "bench.attention"))?;
    let mut init = Init::scoped(0, "bench.input");

    let mut rows = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let x: Tensor<f32> = init.uniform(&[n, d], 1.0);
        let secmamba_ms = median_ms(reps, || {
            let tape = Tape::inference();
            let p = Bound::new(&tape, &store);
            secmamba.forward(&p, tape.constant(x.clone()), SsmRoute::Scan)?;
            Ok(())
        })?;
        let attention_ms = median_ms(reps, || {
            let tape = Tape::inference();
            let p = Bound::new(&tape, &store);
            attention.forward(&p, tape.constant(x.clone()))?;
            Ok(())
        })?;
        log::info!("N = {n}: secmamba {secmamba_ms:.3} ms, attention {attention_ms:.3} ms");
        rows.push(BenchRow {
            n,
            secmamba_ms,
            attention_ms,
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let slope = |f: fn(&BenchRow) -> f64| log_log_slope(&ns, &rows.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    Ok(BenchReport {
        secmamba_slope: slope(|r| r.secmamba_ms),
        attention_slope: slope(|r| r.attention_ms),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_laws() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let quad: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        assert!((log_log_slope(&xs, &quad).unwrap() - 2.0).abs() < 1e-12);
        let lin: Vec<f64> = xs.iter().map(|x| 0.5 * x).collect();
        assert!((log_log_slope(&xs, &lin).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(log_log_slope(&[1.0], &[1.0]), None);
        assert_eq!(log_log_slope(&[1.0, 2.0], &[0.0, 1.0]), None);
    }

    #[test]
    fn one_row_per_length() {
        let report = bench_complexity(&[8, 16, 32], 8, 2, 1).unwrap();
        assert_eq!(report.rows.len(), 3);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("N,secmamba_ms,attention_ms"));
    }

    #[test]
    fn rejects_unsorted_lengths() {
        assert!(bench_complexity(&[16, 8], 8, 2, 1).is_err());
        assert!(bench_complexity(&[], 8, 2, 1).is_err());
    }
}
