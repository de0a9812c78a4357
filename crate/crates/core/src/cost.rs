//! Exact multiply-accumulate accounting.
//!
//! One MAC of a dense matrix product counts as one FLOP. Bias adds, softmax,
//! normalization, pooling and activations are not counted. All arithmetic is
//! integer.
//!
//! Token-count functions (`flops_hifi(n, ..)`) take `N` as already padded to
//! whole windows, and Lo-Fi's pooled length is `⌈N/s²⌉`. The map functions
//! (`*_map(h, w, ..)`) reproduce exactly what the layers compute: Hi-Fi
//! projections and attention run over the padded map, while Lo-Fi queries
//! come from the unpadded `h·w` tokens.

use std::fmt;
use std::io::Write;

use crate::attention::{AttnConfig, Mechanism, MechanismSettings};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize)]
pub struct FlopsReport {
    pub components: Vec<(String, u64)>,
    pub total: u64,
}

impl FlopsReport {
    pub fn new<S: Into<String>>(components: impl IntoIterator<Item = (S, u64)>) -> Self {
        let components: Vec<(String, u64)> = components.into_iter().map(|(l, v)| (l.into(), v)).collect();
        let total = components.iter().map(|c| c.1).sum();
        FlopsReport { components, total }
    }

    pub fn component(&self, label: &str) -> Option<u64> {
        self.components.iter().find(|c| c.0 == label).map(|c| c.1)
    }

    /// Append `other`'s components under `prefix.`.
    pub fn extend(&mut self, prefix: &str, other: FlopsReport) {
        for (label, v) in other.components {
            self.components.push((format!("{prefix}.{label}"), v));
        }
        self.total += other.total;
    }

    /// Append one labelled count.
    pub fn push(&mut self, label: impl Into<String>, v: u64) {
        self.components.push((label.into(), v));
        self.total += v;
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.components.iter().map(|c| c.0.len()).max().unwrap_or(0).max(5);
        for (label, v) in &self.components {
            writeln!(f, "{label:<width$}  {v:>16}")?;
        }
        write!(f, "{:<width$}  {:>16}", "total", self.total)
    }
}

fn padded(extent: usize, s: usize) -> u64 {
    extent.div_ceil(s) as u64 * s as u64
}

pub fn flops_msa(n: u64, d: u64) -> FlopsReport {
    FlopsReport::new([("qkv", 3 * n * d * d), ("attention", 2 * n * n * d), ("proj", n * d * d)])
}

fn hifi_terms(n: u64, dim: u64, width: u64, s: u64) -> FlopsReport {
    if width == 0 {
        return FlopsReport::new([("qkv", 0), ("attention", 0), ("proj", 0)]);
    }
    FlopsReport::new([
        ("qkv", 3 * n * dim * width),
        ("attention", 2 * s * s * n * width),
        ("proj", n * width * width),
    ])
}

fn lofi_terms(n: u64, m: u64, dim: u64, width: u64) -> FlopsReport {
    if width == 0 {
        return FlopsReport::new([("q", 0), ("kv", 0), ("attention", 0), ("proj", 0)]);
    }
    FlopsReport::new([
        ("q", n * dim * width),
        ("kv", 2 * m * dim * width),
        ("attention", 2 * n * m * width),
        ("proj", n * width * width),
    ])
}

pub fn flops_hifi(n: u64, cfg: &AttnConfig) -> FlopsReport {
    let s = cfg.window as u64;
    hifi_terms(n, cfg.dim as u64, cfg.branch_dims().0 as u64, s)
}

pub fn flops_lofi(n: u64, cfg: &AttnConfig) -> FlopsReport {
    let s2 = (cfg.window * cfg.window) as u64;
    lofi_terms(n, n.div_ceil(s2), cfg.dim as u64, cfg.branch_dims().1 as u64)
}

pub fn flops_hilo(n: u64, cfg: &AttnConfig) -> FlopsReport {
    let mut r = FlopsReport::default();
    r.extend("hifi", flops_hifi(n, cfg));
    r.extend("lofi", flops_lofi(n, cfg));
    r
}

/// Hi-Fi cost on an `h×w` map, padded to whole windows.
pub fn flops_hifi_map(h: usize, w: usize, cfg: &AttnConfig) -> FlopsReport {
    let n = padded(h, cfg.window) * padded(w, cfg.window);
    flops_hifi(n, cfg)
}

/// Lo-Fi cost on an `h×w` map: queries from `h·w` tokens, keys from the
/// pooled padded map.
pub fn flops_lofi_map(h: usize, w: usize, cfg: &AttnConfig) -> FlopsReport {
    let s = cfg.window;
    let m = (h.div_ceil(s) * w.div_ceil(s)) as u64;
    lofi_terms((h * w) as u64, m, cfg.dim as u64, cfg.branch_dims().1 as u64)
}

pub fn flops_hilo_map(h: usize, w: usize, cfg: &AttnConfig) -> FlopsReport {
    let mut r = FlopsReport::default();
    r.extend("hifi", flops_hifi_map(h, w, cfg));
    r.extend("lofi", flops_lofi_map(h, w, cfg));
    r
}

/// Spatial-reduction attention with `m` reduced tokens and reduction ratio `r`.
fn sra_terms(n: u64, m: u64, d: u64, r: u64) -> FlopsReport {
    FlopsReport::new([
        ("q", n * d * d),
        ("reduce", m * r * r * d * d),
        ("kv", 2 * m * d * d),
        ("attention", 2 * n * m * d),
        ("proj", n * d * d),
    ])
}

pub fn flops_sra(n: u64, d: u64, r: u64) -> FlopsReport {
    sra_terms(n, n.div_ceil(r * r), d, r)
}

pub fn flops_sra_map(h: usize, w: usize, d: usize, r: usize) -> FlopsReport {
    sra_terms((h * w) as u64, ((h / r) * (w / r)) as u64, d as u64, r as u64)
}

/// Cost of `mech` over `n` tokens.
pub fn flops_mechanism(mech: Mechanism, settings: &MechanismSettings, n: u64) -> Result<FlopsReport> {
    Ok(match settings.hilo_config(mech)? {
        Some(cfg) if mech == Mechanism::Msa => flops_msa(n, cfg.dim as u64),
        Some(cfg) => flops_hilo(n, &cfg),
        None => flops_sra(n, settings.dim as u64, settings.sr_ratio as u64),
    })
}

/// Cost of `mech` on an `h×w` map.
pub fn flops_mechanism_map(mech: Mechanism, settings: &MechanismSettings, h: usize, w: usize) -> Result<FlopsReport> {
    Ok(match settings.hilo_config(mech)? {
        Some(cfg) if mech == Mechanism::Msa => flops_msa((h * w) as u64, cfg.dim as u64),
        Some(cfg) => flops_hilo_map(h, w, &cfg),
        None => flops_sra_map(h, w, settings.dim, settings.sr_ratio),
    })
}

/// Smallest integer `N ≥ 1` at which Lo-Fi's cost reaches Hi-Fi's, from
/// the token-count formulas treated as continuous in `N`. `None` when the
/// configuration has no Lo-Fi heads.
pub fn analytic_crossover(cfg: &AttnConfig) -> Option<u64> {
    let (dh, dl) = cfg.branch_dims();
    if dl == 0 {
        return None;
    }
    let (d, dh, dl, s2) = (cfg.dim as i128, dh as i128, dl as i128, (cfg.window * cfg.window) as i128);
    // Per token: 3D·dh + 2s²·dh + dh² = D·dl + 2D·dl/s² + 2N·dl/s² + dl².
    let num = s2 * (3 * d * dh + 2 * s2 * dh + dh * dh - d * dl - dl * dl) - 2 * d * dl;
    let den = 2 * dl;
    let root = if num <= 0 { 0 } else { (num + den - 1) / den };
    Some(root.max(1) as u64)
}

/// First `N = s²·m` at which the Lo-Fi cost is at least the Hi-Fi cost,
/// scanning `m = 1..=max_windows`.
pub fn scan_crossover(cfg: &AttnConfig, max_windows: u64) -> Option<u64> {
    let s2 = (cfg.window * cfg.window) as u64;
    if cfg.branch_dims().1 == 0 {
        return None;
    }
    (1..=max_windows)
        .map(|m| m * s2)
        .find(|&n| flops_lofi(n, cfg).total >= flops_hifi(n, cfg).total)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SweepRow {
    pub x: f64,
    pub series: String,
    pub flops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    /// Hi-Fi, Lo-Fi and HiLo totals over token counts.
    HiloRes,
    /// HiLo totals over split ratios.
    Alpha,
    /// HiLo totals over token counts, one series per window size.
    Window,
}

fn non_empty<T>(grid: &[T], what: &str) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config(format!("{what} grid is empty")));
    }
    Ok(())
}

pub fn sweep_resolution(cfg: &AttnConfig, tokens: &[u64]) -> Result<Vec<SweepRow>> {
    non_empty(tokens, "token")?;
    cfg.validate()?;
    let mut rows = Vec::with_capacity(tokens.len() * 3);
    for &n in tokens {
        let (hi, lo) = (flops_hifi(n, cfg).total, flops_lofi(n, cfg).total);
        for (series, flops) in [("hifi", hi), ("lofi", lo), ("hilo", hi + lo)] {
            rows.push(SweepRow { x: n as f64, series: series.into(), flops });
        }
    }
    Ok(rows)
}

pub fn sweep_alpha(dim: usize, heads: usize, window: usize, tokens: u64, alphas: &[f64]) -> Result<Vec<SweepRow>> {
    non_empty(alphas, "alpha")?;
    alphas
        .iter()
        .map(|&alpha| {
            let cfg = AttnConfig::new(dim, heads, alpha, window)?;
            Ok(SweepRow { x: alpha, series: "hilo".into(), flops: flops_hilo(tokens, &cfg).total })
        })
        .collect()
}

/// HiLo totals on square `side×side` maps for each window size.
pub fn sweep_window(dim: usize, heads: usize, alpha: f64, windows: &[usize], sides: &[usize]) -> Result<Vec<SweepRow>> {
    non_empty(windows, "window")?;
    non_empty(sides, "resolution")?;
    let mut rows = Vec::new();
    for &s in windows {
        let cfg = AttnConfig::new(dim, heads, alpha, s)?;
        for &side in sides {
            rows.push(SweepRow {
                x: (side * side) as f64,
                series: format!("s={s}"),
                flops: flops_hilo_map(side, side, &cfg).total,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(mut out: W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(out, "x,series,flops")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.x, r.series, r.flops)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, nh: usize, a: f64, s: usize) -> AttnConfig {
        AttnConfig::new(d, nh, a, s).unwrap()
    }

    #[test]
    fn msa_examples() {
        assert_eq!(flops_msa(196, 768).total, 521_428_992);
        assert_eq!(flops_msa(1, 1).total, 6);
        assert_eq!(flops_msa(4, 8).total, 1280);
    }

    #[test]
    fn hilo_examples() {
        let c = cfg(768, 12, 0.9, 2);
        assert_eq!(flops_hifi(196, &c).total, 61_214_720);
        assert_eq!(flops_lofi(196, &c).total, 237_081_600);
        assert_eq!(flops_hilo(196, &c).total, 298_296_320);
        assert_eq!(flops_hilo(196, &cfg(768, 12, 0.5, 2)).total, 325_893_120);
        assert_eq!(flops_hilo(196, &cfg(768, 12, 0.0, 2)).total, 463_626_240);
        assert_eq!(flops_hilo(196, &cfg(768, 12, 1.0, 1)).total, flops_msa(196, 768).total);
    }

    #[test]
    fn empty_branches_cost_nothing() {
        assert_eq!(flops_hifi(196, &cfg(768, 12, 1.0, 2)).total, 0);
        assert_eq!(flops_lofi(196, &cfg(768, 12, 0.0, 2)).total, 0);
    }

    #[test]
    fn baselines() {
        assert_eq!(flops_sra(196, 768, 2).total, 419_371_008);
        assert_eq!(flops_hilo(196, &cfg(768, 12, 0.0, 7)).total, 477_173_760);
    }

    #[test]
    fn map_matches_tokens_when_divisible() {
        let c = cfg(64, 4, 0.5, 2);
        assert_eq!(flops_hilo_map(6, 4, &c), flops_hilo(24, &c));
        // 7×5 pads to 8×6 for Hi-Fi and pools to 4×3 for Lo-Fi.
        let r = flops_hilo_map(7, 5, &c);
        assert_eq!(r.component("hifi.qkv"), Some(3 * 48 * 64 * 32));
        assert_eq!(r.component("lofi.kv"), Some(2 * 12 * 64 * 32));
        assert_eq!(r.component("lofi.attention"), Some(2 * 35 * 12 * 32));
    }

    #[test]
    fn crossover_examples() {
        assert_eq!(analytic_crossover(&cfg(96, 2, 0.5, 2)), Some(304));
        assert_eq!(scan_crossover(&cfg(96, 2, 0.5, 2), 100_000), Some(304));
        assert_eq!(analytic_crossover(&cfg(768, 12, 0.5, 2)), Some(2320));
        assert_eq!(scan_crossover(&cfg(768, 12, 0.5, 2), 100_000), Some(2320));
        assert_eq!(analytic_crossover(&cfg(96, 2, 0.5, 1)), Some(1));
        assert_eq!(analytic_crossover(&cfg(96, 2, 0.0, 2)), None);
    }

    #[test]
    fn unit_window_curves() {
        let c = cfg(64, 2, 0.5, 1);
        for n in 1..50u64 {
            let d = 64;
            assert_eq!(4 * flops_hifi(n, &c).total, 7 * n * d * d + 4 * n * d);
            assert_eq!(4 * flops_lofi(n, &c).total, 7 * n * d * d + 4 * n * n * d);
        }
    }

    #[test]
    fn alpha_sweep_minimum() {
        let grid = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0];
        let rows = sweep_alpha(768, 12, 2, 196, &grid).unwrap();
        assert_eq!(rows.len(), 6);
        let best = rows.iter().min_by_key(|r| r.flops).unwrap();
        assert_eq!(best.x, 0.9);
        assert_eq!(rows[5].flops, 303_765_504);
    }

    #[test]
    fn sweeps_reject_empty_grids() {
        assert!(sweep_alpha(768, 12, 2, 196, &[]).is_err());
        assert!(sweep_resolution(&cfg(96, 2, 0.5, 2), &[]).is_err());
        assert!(sweep_window(96, 2, 0.5, &[], &[14]).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = sweep_alpha(768, 12, 2, 196, &[0.9]).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x,series,flops\n0.9,hilo,298296320\n");
    }
}
