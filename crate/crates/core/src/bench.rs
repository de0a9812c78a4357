//! Wall-clock throughput measurement.
//!
//! Each timed run processes one batch; throughput is `batch / seconds` per
//! run. Work runs inside a dedicated rayon pool of the requested size, so
//! the global pool is never touched.

use std::hint::black_box;
use std::io::Write;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::attention::{AttentionLayer, Mechanism, MechanismSettings};
use crate::backbone::{count_model_params, flops_model, model_forward, ModelConfig, ModelParams};
use crate::cost::flops_mechanism_map;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchOptions {
    pub runs: usize,
    pub warmup: usize,
    pub batch: usize,
    pub threads: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { runs: 30, warmup: 10, batch: 64, threads: 1 }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.batch == 0 || self.threads == 0 {
            return Err(Error::config("runs, batch and threads must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BenchStats {
    pub runs: usize,
    pub warmup: usize,
    pub batch: usize,
    pub threads: usize,
    /// Seconds of each timed run.
    pub seconds: Vec<f64>,
    pub mean_ips: f64,
    pub median_ips: f64,
    /// Sample standard deviation of per-run images/s; 0 for a single run.
    pub stddev_ips: f64,
    /// Set when the clock resolution exceeds 1% of the fastest run.
    pub coarse_timer: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn sample_stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    (0..16)
        .map(|_| {
            let start = Instant::now();
            loop {
                let d = start.elapsed();
                if !d.is_zero() {
                    break d;
                }
            }
        })
        .min()
        .unwrap_or_default()
}

impl BenchStats {
    pub fn from_seconds(opts: &BenchOptions, seconds: Vec<f64>, resolution: Duration) -> Self {
        let ips: Vec<f64> = seconds.iter().map(|s| opts.batch as f64 / s).collect();
        let fastest = seconds.iter().copied().fold(f64::INFINITY, f64::min);
        BenchStats {
            runs: opts.runs,
            warmup: opts.warmup,
            batch: opts.batch,
            threads: opts.threads,
            mean_ips: mean(&ips),
            median_ips: median(&ips),
            stddev_ips: sample_stddev(&ips),
            coarse_timer: resolution.as_secs_f64() > 0.01 * fastest,
            seconds,
        }
    }
}

/// Run `subject` `warmup` times untimed and `runs` times timed inside a
/// pool of `opts.threads` workers. `subject` processes one batch and returns
/// a checksum that is consumed so the work cannot be elided.
pub fn time_subject<F>(opts: &BenchOptions, subject: F) -> Result<BenchStats>
where
    F: Fn() -> Result<f64> + Sync,
{
    opts.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::config(format!("cannot build a {}-thread pool: {e}", opts.threads)))?;
    pool.install(|| {
        for _ in 0..opts.warmup {
            black_box(subject()?);
        }
        let mut seconds = Vec::with_capacity(opts.runs);
        for _ in 0..opts.runs {
            let start = Instant::now();
            let checksum = subject()?;
            seconds.push(start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
            black_box(checksum);
        }
        Ok(BenchStats::from_seconds(opts, seconds, timer_resolution()))
    })
}

/// Apply `f` to every input in parallel and fold the outputs into a checksum.
pub fn batch_checksum<T: Scalar, F>(inputs: &[Tensor<T>], f: F) -> Result<f64>
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>> + Sync,
{
    let sums = inputs
        .par_iter()
        .map(|x| f(x).map(|y| y.sum().f64()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BenchRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    pub stats: BenchStats,
}

/// Benchmark each mechanism on a batch of `res×res×dim` f32 maps, in order.
pub fn compare_attentions(
    mechs: &[Mechanism],
    settings: &MechanismSettings,
    res: usize,
    opts: &BenchOptions,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let root = RngState::new(seed);
    let mut input_rng = root.fork(0);
    let inputs: Vec<Tensor<f32>> = (0..opts.batch)
        .map(|_| input_rng.normal_tensor(&[res, res, settings.dim], 1.0))
        .collect();
    let mut rows = Vec::with_capacity(mechs.len());
    for (i, &mech) in mechs.iter().enumerate() {
        let layer = AttentionLayer::<f32>::init(&mut root.fork(1 + i as u64), mech, settings)?;
        let stats = time_subject(opts, || batch_checksum(&inputs, |x| layer.forward(x)))?;
        rows.push(BenchRow {
            name: mech.name().into(),
            params: settings.param_count(mech)?,
            flops: flops_mechanism_map(mech, settings, res, res)?.total,
            stats,
        });
    }
    Ok(rows)
}

/// Benchmark a whole model on a batch of `res×res×3` f32 images.
pub fn bench_model(cfg: &ModelConfig, res: usize, opts: &BenchOptions, seed: u64) -> Result<BenchRow> {
    let root = RngState::new(seed);
    let params = ModelParams::<f32>::init(&mut root.fork(1), cfg)?;
    let mut rng = root.fork(0);
    let inputs: Vec<Tensor<f32>> = (0..opts.batch)
        .map(|_| rng.uniform_tensor(&[res, res, 3], -1.0, 1.0))
        .collect();
    let stats = time_subject(opts, || batch_checksum(&inputs, |x| model_forward(x, cfg, &params)))?;
    Ok(BenchRow {
        name: cfg.name.clone(),
        params: count_model_params(cfg)?,
        flops: flops_model(cfg, res)?.total,
        stats,
    })
}

pub fn write_bench_csv<W: Write>(mut out: W, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(out, "name,params,flops,imgs_per_sec_mean,imgs_per_sec_median,stddev")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.name, r.params, r.flops, r.stats.mean_ips, r.stats.median_ips, r.stats.stddev_ips
        )?;
    }
    Ok(())
}

/// Human-readable table of `rows`.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<8} {:>10} {:>12} {:>12} {:>12} {:>10}\n",
        "name", "params(M)", "flops(M)", "mean img/s", "median img/s", "stddev"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<8} {:>10.2} {:>12.1} {:>12.1} {:>12.1} {:>10.2}{}\n",
            r.name,
            r.params as f64 / 1e6,
            r.flops as f64 / 1e6,
            r.stats.mean_ips,
            r.stats.median_ips,
            r.stats.stddev_ips,
            if r.stats.coarse_timer { "  (coarse timer)" } else { "" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_run_has_zero_stddev() {
        let opts = BenchOptions { runs: 1, warmup: 0, batch: 4, threads: 1 };
        let stats = time_subject(&opts, || Ok(1.0)).unwrap();
        assert_eq!(stats.stddev_ips, 0.0);
        assert_eq!(stats.seconds.len(), 1);
        assert!(stats.mean_ips.is_finite() && stats.mean_ips > 0.0);
    }

    #[test]
    fn statistics() {
        let opts = BenchOptions { runs: 4, warmup: 0, batch: 2, threads: 1 };
        let stats = BenchStats::from_seconds(&opts, vec![1.0, 0.5, 2.0, 0.25], Duration::from_nanos(1));
        // images/s: 2, 4, 1, 8
        assert_eq!(stats.mean_ips, 3.75);
        assert_eq!(stats.median_ips, 3.0);
        let var = ((2.0f64 - 3.75).powi(2) + 0.25f64.powi(2) + 2.75f64.powi(2) + 4.25f64.powi(2)) / 3.0;
        assert!((stats.stddev_ips - var.sqrt()).abs() < 1e-12);
        assert!(!stats.coarse_timer);
        let coarse = BenchStats::from_seconds(&opts, vec![1e-6; 4], Duration::from_micros(1));
        assert!(coarse.coarse_timer);
    }

    #[test]
    fn warmup_and_runs_are_counted() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let opts = BenchOptions { runs: 3, warmup: 2, batch: 1, threads: 1 };
        time_subject(&opts, || {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(0.0)
        })
        .unwrap();
        assert_eq!(calls.into_inner(), 5);
    }

    #[test]
    fn rejects_zero_runs() {
        let opts = BenchOptions { runs: 0, ..Default::default() };
        assert!(time_subject(&opts, || Ok(0.0)).is_err());
    }

    #[test]
    fn rows_carry_exact_costs() {
        let settings = MechanismSettings { dim: 16, heads: 2, alpha: 0.5, window: 2, local_window: 2, sr_ratio: 2 };
        let opts = BenchOptions { runs: 1, warmup: 0, batch: 2, threads: 1 };
        let rows = compare_attentions(&Mechanism::ALL, &settings, 4, &opts, 0).unwrap();
        assert_eq!(rows.len(), 4);
        for (row, mech) in rows.iter().zip(Mechanism::ALL) {
            assert_eq!(row.name, mech.name());
            assert_eq!(row.params, settings.param_count(mech).unwrap());
            assert_eq!(row.flops, flops_mechanism_map(mech, &settings, 4, 4).unwrap().total);
        }
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("name,params,flops,imgs_per_sec_mean,imgs_per_sec_median,stddev\nmsa,"));
        assert_eq!(text.lines().count(), 5);
    }
}
