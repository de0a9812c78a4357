//! Frequency content of feature maps.
//!
//! Feature maps are channel-last `H×W×C` tensors. A magnitude map is the
//! log-magnitude of the centered 2-D DFT of one channel, averaged over a
//! batch. Band energies split the centered power spectrum at a radius around
//! the DC bin `(⌊H/2⌋, ⌊W/2⌋)`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{model, ModelConfig, ModelParams};
use crate::dft::{dft2, fftshift2};
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::tensor::{Scalar, Tensor};

/// Added to magnitudes before the log.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeMap {
    /// `H×W` log-magnitudes, DC at the center.
    pub grid: Tensor<f64>,
    pub channel: usize,
    pub samples: usize,
}

fn map_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Shape { shape: s.to_vec(), reason: "expected an H×W×C feature map".into() }),
    }
}

/// One channel of an `H×W×C` map as an `H×W` grid.
pub fn channel_plane<T: Scalar>(x: &Tensor<T>, channel: usize) -> Result<Tensor<f64>> {
    let (h, w, c) = map_dims(x)?;
    if channel >= c {
        return Err(Error::config(format!("channel {channel} out of range for {c} channels")));
    }
    Ok(Tensor::from_fn(&[h, w], |i| x.data()[i * c + channel].f64()))
}

/// Centered power spectrum `|F|²` of an `H×W` grid.
pub fn power_spectrum<T: Scalar>(plane: &Tensor<T>) -> Result<Tensor<f64>> {
    let f = fftshift2(&dft2(plane)?);
    Tensor::new(vec![f.height, f.width], f.norm_sqr())
}

pub fn magnitude_map<T: Scalar>(batch: &[Tensor<T>], channel: usize) -> Result<MagnitudeMap> {
    let first = batch.first().ok_or_else(|| Error::config("magnitude_map needs at least one sample"))?;
    let (h, w, _) = map_dims(first)?;
    let mut acc = vec![0.0; h * w];
    for x in batch {
        if x.shape() != first.shape() {
            return Err(Error::dim("magnitude_map", first.shape(), x.shape()));
        }
        let f = fftshift2(&dft2(&channel_plane(x, channel)?)?);
        for (a, m) in acc.iter_mut().zip(f.magnitude()) {
            *a += (m + LOG_EPS).ln();
        }
    }
    let n = batch.len() as f64;
    Ok(MagnitudeMap {
        grid: Tensor::new(vec![h, w], acc.into_iter().map(|v| v / n).collect())?,
        channel,
        samples: batch.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BandEnergy {
    pub low: f64,
    pub high: f64,
}

impl BandEnergy {
    pub fn total(&self) -> f64 {
        self.low + self.high
    }

    /// `high / total`, or 0 for an all-zero spectrum.
    pub fn high_share(&self) -> f64 {
        let t = self.total();
        if t > 0.0 {
            self.high / t
        } else {
            0.0
        }
    }
}

fn center_distance(h: usize, w: usize, r: usize, c: usize) -> f64 {
    let dr = r as f64 - (h / 2) as f64;
    let dc = c as f64 - (w / 2) as f64;
    dr.hypot(dc)
}

/// Largest distance from the DC bin to any bin of an `h×w` grid.
pub fn max_center_distance(h: usize, w: usize) -> f64 {
    [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)]
        .into_iter()
        .map(|(r, c)| center_distance(h, w, r, c))
        .fold(0.0, f64::max)
}

/// A quarter of the half-diagonal.
pub fn default_radius(h: usize, w: usize) -> f64 {
    0.25 * (h as f64 / 2.0).hypot(w as f64 / 2.0)
}

/// Split a centered power grid into energy within `radius` of DC (low) and
/// beyond it (high).
pub fn band_energy(power: &Tensor<f64>, radius: f64) -> Result<BandEnergy> {
    let [h, w] = *power.shape() else {
        return Err(Error::Shape { shape: power.shape().to_vec(), reason: "expected an H×W power grid".into() });
    };
    let max = max_center_distance(h, w);
    if !(radius > 0.0 && radius < max) {
        return Err(Error::config(format!("cutoff radius {radius} outside (0, {max})")));
    }
    let mut e = BandEnergy { low: 0.0, high: 0.0 };
    for r in 0..h {
        for c in 0..w {
            let p = power.data()[r * w + c];
            if center_distance(h, w, r, c) <= radius {
                e.low += p;
            } else {
                e.high += p;
            }
        }
    }
    Ok(e)
}

/// Band energies of every channel of an `H×W×C` map, summed over channels.
pub fn map_band_energy<T: Scalar>(x: &Tensor<T>, radius: f64) -> Result<BandEnergy> {
    let (_, _, c) = map_dims(x)?;
    let mut e = BandEnergy { low: 0.0, high: 0.0 };
    for ch in 0..c {
        let b = band_energy(&power_spectrum(&channel_plane(x, ch)?)?, radius)?;
        e.low += b.low;
        e.high += b.high;
    }
    Ok(e)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// 8-bit min-max normalization; a constant grid maps to all zeros.
pub fn to_gray(grid: &Tensor<f64>) -> Vec<u8> {
    let lo = grid.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    grid.data()
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Write `<stem>.csv` (17 significant digits) and `<stem>.pgm` (binary P5).
pub fn emit_map(map: &MagnitudeMap, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [h, w] = *map.grid.shape() else {
        return Err(Error::Shape { shape: map.grid.shape().to_vec(), reason: "expected an H×W grid".into() });
    };
    let mut csv = String::new();
    for row in map.grid.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(csv, "{}", cells.join(","));
    }
    let csv_path = dir.join(format!("{stem}.csv"));
    write_file(&csv_path, csv.as_bytes())?;

    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    pgm.extend(to_gray(&map.grid));
    let pgm_path = dir.join(format!("{stem}.pgm"));
    write_file(&pgm_path, &pgm)?;
    Ok(vec![csv_path, pgm_path])
}

/// Parse a CSV matrix written by [`emit_map`].
pub fn read_csv_grid(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.is_empty()) {
        for cell in line.split(',') {
            data.push(cell.trim().parse::<f64>().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Format(format!("{}: empty grid", path.display())));
    }
    let cols = data.len() / rows;
    Tensor::new(vec![rows, cols], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Hifi,
    Lofi,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Hifi => "hifi",
            Branch::Lofi => "lofi",
        }
    }
}

/// Branch outputs of every attention block of one stage, per image.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub hifi: Vec<Tensor<f64>>,
    pub lofi: Vec<Tensor<f64>>,
}

impl BranchOutputs {
    pub fn get(&self, branch: Branch) -> &[Tensor<f64>] {
        match branch {
            Branch::Hifi => &self.hifi,
            Branch::Lofi => &self.lofi,
        }
    }
}

/// Run `images` through the model and collect the Hi-Fi and Lo-Fi outputs
/// of every block in `stage` (1-based).
pub fn collect_branch_outputs<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    images: &[Tensor<T>],
    stage: usize,
) -> Result<BranchOutputs> {
    if stage == 0 || stage > cfg.stages.len() || !cfg.stages[stage - 1].has_attention {
        return Err(Error::config(format!("stage {stage} has no attention layers")));
    }
    let mut out = BranchOutputs { hifi: Vec::new(), lofi: Vec::new() };
    for img in images {
        let mut g = Graph::new();
        let x = g.input(img);
        let vars = model(&mut g, x, cfg, params)?;
        for hv in &vars.attn[stage - 1] {
            if let Some(v) = hv.hifi {
                out.hifi.push(g.value(v).cast());
            }
            if let Some(v) = hv.lofi {
                out.lofi.push(g.value(v).cast());
            }
        }
    }
    Ok(out)
}

/// Mean over maps of each map's high-band energy share.
pub fn mean_high_share(maps: &[Tensor<f64>], radius: Option<f64>) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::config("no feature maps to analyze"));
    }
    let mut total = 0.0;
    for m in maps {
        let (h, w, _) = map_dims(m)?;
        total += map_band_energy(m, radius.unwrap_or_else(|| default_radius(h, w)))?.high_share();
    }
    Ok(total / maps.len() as f64)
}

/// Channels ordered by total spectral energy across `maps`, strongest first.
pub fn rank_channels(maps: &[Tensor<f64>]) -> Result<Vec<usize>> {
    let first = maps.first().ok_or_else(|| Error::config("no feature maps to analyze"))?;
    let (_, _, c) = map_dims(first)?;
    let mut energy = vec![0.0; c];
    for m in maps {
        for (ch, e) in energy.iter_mut().enumerate() {
            *e += power_spectrum(&channel_plane(m, ch)?)?.sum();
        }
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));
    Ok(order)
}
