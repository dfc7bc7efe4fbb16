//! Per-position latency of the two-stage GenNi draw.

use std::time::Instant;

use genni_core::rng::{purpose, substream};
use genni_core::sampler::{candidate_count, genni_position, GenniScratch};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const BENCH_HEADER: &str = "n_items,beta,candidates,scored,reps,median_us,p99_us";

const WARMUP: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_items: usize,
    pub beta: f64,
    /// `max(1, round(β·|V|))`.
    pub candidates: usize,
    /// Items scored per draw, as reported by the sampler.
    pub scored: usize,
    pub reps: usize,
    pub median_us: f64,
    pub p99_us: f64,
}

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{:.3}",
            self.n_items, self.beta, self.candidates, self.scored, self.reps, self.median_us, self.p99_us
        )
    }
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    (sorted[(n - 1) / 2] + sorted[n / 2]) / 2.0
}

/// Nearest-rank percentile of sorted data, `q` in (0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `reps` single-negative draws per `(|V|, β)` cell against random
/// `dim`-wide embeddings.
pub fn bench_sampler(items: &[usize], betas: &[f64], reps: usize, dim: usize, seed: u64) -> CliResult<Vec<BenchRow>> {
    if items.is_empty() || betas.is_empty() || reps == 0 || dim == 0 {
        return Err(CliError::Config("bench-sampler needs items, betas, reps >= 1 and dim >= 1".into()));
    }
    if let Some(&n) = items.iter().find(|&&n| n < 2) {
        return Err(CliError::Config(format!("bench-sampler: |V| = {n} is below 2")));
    }
    if let Some(&b) = betas.iter().find(|&&b| !(b > 0.0 && b <= 1.0)) {
        return Err(CliError::Config(format!("bench-sampler: beta {b} outside (0, 1]")));
    }
    let mut rows = Vec::new();
    for &n in items {
        let mut rng = substream(seed, &[purpose::BENCH, n as u64]);
        let table: Vec<f32> = (0..(n + 1) * dim).map(|_| 0.1 * rng.sample::<f32, _>(StandardNormal)).collect();
        for &beta in betas {
            let mut scratch = GenniScratch::default();
            let mut times = Vec::with_capacity(reps);
            let mut scored = None;
            let mut out = [0u32; 1];
            for rep in 0..reps + WARMUP {
                let mut draw_rng = substream(seed, &[purpose::BENCH, n as u64, beta.to_bits(), rep as u64]);
                let h: Vec<f32> = (0..dim).map(|_| draw_rng.sample::<f32, _>(StandardNormal)).collect();
                let target = draw_rng.random_range(1..=n as u32);
                let excluded = |i: u32| i == target;
                let start = Instant::now();
                let c = genni_position(&h, &table, 1.0, beta, &excluded, &mut out, &mut draw_rng, &mut scratch)?;
                let elapsed = start.elapsed().as_secs_f64() * 1e6;
                if *scored.get_or_insert(c) != c {
                    return Err(CliError::Mismatch(format!("scored count changed between draws at |V| = {n}")));
                }
                if rep >= WARMUP {
                    times.push(elapsed);
                }
            }
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                n_items: n,
                beta,
                candidates: candidate_count(n, beta),
                scored: scored.unwrap_or(0),
                reps,
                median_us: median(&times),
                p99_us: percentile(&times, 0.99),
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(median(&v), 50.5);
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&v, 1.0), 100.0);
        assert_eq!(median(&[3.0]), 3.0);
    }

    #[test]
    fn scored_counts_follow_beta() {
        let rows = bench_sampler(&[1000, 2000], &[0.01, 0.1, 1.0], 5, 8, 1).unwrap();
        let scored: Vec<usize> = rows.iter().map(|r| r.scored).collect();
        assert_eq!(scored, vec![10, 100, 1000, 20, 200, 2000]);
        assert!(rows.iter().all(|r| r.scored == r.candidates && r.p99_us >= r.median_us));
    }

    #[test]
    fn bad_arguments_rejected() {
        assert!(bench_sampler(&[], &[0.1], 1, 8, 0).is_err());
        assert!(bench_sampler(&[100], &[1.5], 1, 8, 0).is_err());
        assert!(bench_sampler(&[1], &[0.5], 1, 8, 0).is_err());
    }
}
