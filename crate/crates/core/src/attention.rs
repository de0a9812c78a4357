//! Multi-head self-attention, the HiLo split into local-window (Hi-Fi) and
//! pooled-key (Lo-Fi) branches, and the baselines HiLo is benchmarked
//! against.
//!
//! Every layer comes in two forms: a graph form that records onto a
//! [`Graph`] (used for training and gradient checks) and a `*_forward`
//! convenience that evaluates a plain tensor.
//!
//! Head `h` of a branch owns projection columns `h·Dh..(h+1)·Dh`, where
//! `Dh = D / Nh` is shared by both branches. HiLo output channels are always
//! `[Hi-Fi; Lo-Fi]`.

use crate::error::{Error, Result};
use crate::nn::ops::AttnLayout;
use crate::nn::{impl_params, Graph, LinearParams, Params, Var};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Split ratio tolerance: `alpha·Nh` within this of an integer counts as
/// that integer, so e.g. `0.7·10` does not floor to 6.
const SPLIT_EPS: f64 = 1e-9;

/// Number of `(hifi, lofi)` heads: `lofi = ⌊alpha·Nh⌋`, the rest Hi-Fi.
pub fn split_heads(heads: usize, alpha: f64) -> (usize, usize) {
    let lofi = ((alpha * heads as f64 + SPLIT_EPS).floor() as usize).min(heads);
    (heads - lofi, lofi)
}

/// Hyper-parameters of one HiLo layer.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttnConfig {
    pub dim: usize,
    pub heads: usize,
    /// Fraction of heads given to Lo-Fi.
    pub alpha: f64,
    /// Window size `s` of Hi-Fi windows and Lo-Fi pooling.
    pub window: usize,
}

impl AttnConfig {
    pub fn new(dim: usize, heads: usize, alpha: f64, window: usize) -> Result<Self> {
        let cfg = AttnConfig { dim, heads, alpha, window };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configuration under which HiLo is a standard MSA.
    pub fn msa(dim: usize, heads: usize) -> Result<Self> {
        Self::new(dim, heads, 1.0, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::config("attention needs at least one head"));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.window == 0 {
            return Err(Error::config("window size must be at least 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `(hifi_heads, lofi_heads)`.
    pub fn split(&self) -> (usize, usize) {
        split_heads(self.heads, self.alpha)
    }

    /// Channel widths `(d_hifi, d_lofi)`.
    pub fn branch_dims(&self) -> (usize, usize) {
        let (h, l) = self.split();
        (h * self.head_dim(), l * self.head_dim())
    }
}

/// Q/K/V projections `D→d` and output projection `d→d` of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams<T> {
    pub q: LinearParams<T>,
    pub k: LinearParams<T>,
    pub v: LinearParams<T>,
    pub o: LinearParams<T>,
}

impl_params!(BranchParams { q, k, v, o });

impl<T: Scalar> BranchParams<T> {
    pub fn init(rng: &mut RngState, dim: usize, width: usize) -> Self {
        BranchParams {
            q: LinearParams::init(rng, dim, width),
            k: LinearParams::init(rng, dim, width),
            v: LinearParams::init(rng, dim, width),
            o: LinearParams::init(rng, width, width),
        }
    }

    pub fn zeros(dim: usize, width: usize) -> Self {
        BranchParams {
            q: LinearParams::zeros(dim, width),
            k: LinearParams::zeros(dim, width),
            v: LinearParams::zeros(dim, width),
            o: LinearParams::zeros(width, width),
        }
    }

    /// Output width `d`.
    pub fn width(&self) -> usize {
        self.o.out_dim()
    }

    pub fn cast<U: Scalar>(&self) -> BranchParams<U> {
        BranchParams { q: self.q.cast(), k: self.k.cast(), v: self.v.cast(), o: self.o.cast() }
    }
}

/// Standard MSA weights: a single branch with `d = D`.
pub type MsaParams<T> = BranchParams<T>;

/// The branches present in a HiLo layer; a branch with zero heads is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct HiLoParams<T> {
    pub hifi: Option<BranchParams<T>>,
    pub lofi: Option<BranchParams<T>>,
}

impl_params!(HiLoParams { hifi, lofi });

impl<T: Scalar> HiLoParams<T> {
    pub fn init(rng: &mut RngState, cfg: &AttnConfig) -> Self {
        let (dh, dl) = cfg.branch_dims();
        HiLoParams {
            hifi: (dh > 0).then(|| BranchParams::init(rng, cfg.dim, dh)),
            lofi: (dl > 0).then(|| BranchParams::init(rng, cfg.dim, dl)),
        }
    }

    pub fn zeros(cfg: &AttnConfig) -> Self {
        let (dh, dl) = cfg.branch_dims();
        HiLoParams {
            hifi: (dh > 0).then(|| BranchParams::zeros(cfg.dim, dh)),
            lofi: (dl > 0).then(|| BranchParams::zeros(cfg.dim, dl)),
        }
    }

    /// Put a full MSA's weights into whichever branch owns every head
    /// (`alpha = 1` → Lo-Fi, `alpha = 0` → Hi-Fi).
    pub fn from_msa(cfg: &AttnConfig, msa: &MsaParams<T>) -> Result<Self> {
        match cfg.split() {
            (0, _) => Ok(HiLoParams { hifi: None, lofi: Some(msa.clone()) }),
            (_, 0) => Ok(HiLoParams { hifi: Some(msa.clone()), lofi: None }),
            split => Err(Error::config(format!(
                "cannot transplant MSA weights into a split HiLo layer {split:?}"
            ))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> HiLoParams<U> {
        HiLoParams {
            hifi: self.hifi.as_ref().map(BranchParams::cast),
            lofi: self.lofi.as_ref().map(BranchParams::cast),
        }
    }

    pub fn check(&self, cfg: &AttnConfig) -> Result<()> {
        let (dh, dl) = cfg.branch_dims();
        let width = |b: &Option<BranchParams<T>>| b.as_ref().map_or(0, BranchParams::width);
        if width(&self.hifi) != dh || width(&self.lofi) != dl {
            return Err(Error::config(format!(
                "HiLo branches have widths ({}, {}), config needs ({dh}, {dl})",
                width(&self.hifi),
                width(&self.lofi)
            )));
        }
        Ok(())
    }
}

/// Spatial-reduction attention: K/V come from a map downsampled by an
/// `r×r` stride-`r` convolution (a linear layer on gathered `r×r` patches).
#[derive(Debug, Clone, PartialEq)]
pub struct SraParams<T> {
    pub reduce: LinearParams<T>,
    pub attn: BranchParams<T>,
}

impl_params!(SraParams { reduce, attn });

impl<T: Scalar> SraParams<T> {
    pub fn init(rng: &mut RngState, dim: usize, ratio: usize) -> Self {
        SraParams {
            reduce: LinearParams::init(rng, ratio * ratio * dim, dim),
            attn: BranchParams::init(rng, dim, dim),
        }
    }

    pub fn cast<U: Scalar>(&self) -> SraParams<U> {
        SraParams { reduce: self.reduce.cast(), attn: self.attn.cast() }
    }
}

fn map_dims<T: Scalar>(g: &Graph<'_, T>, x: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [h, w, c] => Ok((h, w, c)),
        ref other => Err(Error::Shape {
            shape: other.to_vec(),
            reason: "expected an H×W×D feature map".into(),
        }),
    }
}

fn heads_layout(width: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::config(format!("branch width {width} does not split into {heads} heads")));
    }
    Ok(width / heads)
}

fn scale_for<T: Scalar>(head_dim: usize) -> T {
    T::c(1.0 / (head_dim as f64).sqrt())
}

/// Project queries from `xq` and keys/values from `xkv`, attend within
/// `groups` independent problems, then apply the output projection.
fn attend<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    xq: Var,
    xkv: Var,
    p: &'a BranchParams<T>,
    heads: usize,
    groups: usize,
) -> Result<Var> {
    let head_dim = heads_layout(p.width(), heads)?;
    let q = g.dense(xq, &p.q)?;
    let k = g.dense(xkv, &p.k)?;
    let v = g.dense(xkv, &p.v)?;
    let layout = AttnLayout {
        groups,
        heads,
        queries: g.value(q).lead_len() / groups,
        keys: g.value(k).lead_len() / groups,
        head_dim,
    };
    let a = g.attention(q, k, v, layout, scale_for(head_dim))?;
    g.dense(a, &p.o)
}

/// Global multi-head attention over all tokens of `x` (`N×D` or `H×W×D`).
pub fn msa<'a, T: Scalar>(g: &mut Graph<'a, T>, x: Var, p: &'a MsaParams<T>, heads: usize) -> Result<Var> {
    attend(g, x, x, p, heads, 1)
}

/// Self-attention inside non-overlapping `s×s` windows of an `H×W×D` map.
pub fn hifi<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    x: Var,
    p: &'a BranchParams<T>,
    window: usize,
    heads: usize,
) -> Result<Var> {
    let (h, w, _) = map_dims(g, x)?;
    let windows = g.window_partition(x, window)?;
    let groups = g.shape(windows)[0];
    let out = attend(g, windows, windows, p, heads, groups)?;
    g.window_reverse(out, h, w, window)
}

/// Attention from every position to the `s×s` average-pooled map.
pub fn lofi<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    x: Var,
    p: &'a BranchParams<T>,
    window: usize,
    heads: usize,
) -> Result<Var> {
    map_dims(g, x)?;
    let pooled = g.avgpool_window(x, window)?;
    attend(g, x, pooled, p, heads, 1)
}

/// Graph handles produced by [`hilo`].
#[derive(Debug, Clone, Copy)]
pub struct HiLoVars {
    pub out: Var,
    pub hifi: Option<Var>,
    pub lofi: Option<Var>,
}

pub fn hilo<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    x: Var,
    cfg: &AttnConfig,
    p: &'a HiLoParams<T>,
) -> Result<HiLoVars> {
    cfg.validate()?;
    p.check(cfg)?;
    let (dim_in, (hh, lh)) = (map_dims(g, x)?.2, cfg.split());
    if dim_in != cfg.dim {
        return Err(Error::dim("hilo", g.shape(x), &[cfg.dim]));
    }
    let hi = match &p.hifi {
        Some(b) => Some(hifi(g, x, b, cfg.window, hh)?),
        None => None,
    };
    let lo = match &p.lofi {
        Some(b) => Some(lofi(g, x, b, cfg.window, lh)?),
        None => None,
    };
    let out = match (hi, lo) {
        (Some(a), Some(b)) => g.concat_last(&[a, b])?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return Err(Error::config("HiLo layer has no heads")),
    };
    Ok(HiLoVars { out, hifi: hi, lofi: lo })
}

/// PVT-style spatial-reduction attention; `ratio` must divide both map extents.
pub fn sra<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    x: Var,
    p: &'a SraParams<T>,
    ratio: usize,
    heads: usize,
) -> Result<Var> {
    map_dims(g, x)?;
    let patches = g.space_to_depth(x, ratio)?;
    let reduced = g.dense(patches, &p.reduce)?;
    attend(g, x, reduced, &p.attn, heads, 1)
}

fn eval<'a, T: Scalar>(x: &'a Tensor<T>, f: impl FnOnce(&mut Graph<'a, T>, Var) -> Result<Var>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let xv = g.input(x);
    let out = f(&mut g, xv)?;
    Ok(g.value(out).clone())
}

pub fn msa_forward<T: Scalar>(x: &Tensor<T>, p: &MsaParams<T>, heads: usize) -> Result<Tensor<T>> {
    eval(x, |g, xv| msa(g, xv, p, heads))
}

pub fn hifi_forward<T: Scalar>(x: &Tensor<T>, p: &BranchParams<T>, window: usize, heads: usize) -> Result<Tensor<T>> {
    if heads == 0 {
        return Err(Error::config("Hi-Fi branch invoked with zero heads"));
    }
    eval(x, |g, xv| hifi(g, xv, p, window, heads))
}

pub fn lofi_forward<T: Scalar>(x: &Tensor<T>, p: &BranchParams<T>, window: usize, heads: usize) -> Result<Tensor<T>> {
    if heads == 0 {
        return Err(Error::config("Lo-Fi branch invoked with zero heads"));
    }
    eval(x, |g, xv| lofi(g, xv, p, window, heads))
}

pub fn hilo_forward<T: Scalar>(x: &Tensor<T>, cfg: &AttnConfig, p: &HiLoParams<T>) -> Result<Tensor<T>> {
    eval(x, |g, xv| Ok(hilo(g, xv, cfg, p)?.out))
}

pub fn sra_forward<T: Scalar>(x: &Tensor<T>, p: &SraParams<T>, ratio: usize, heads: usize) -> Result<Tensor<T>> {
    eval(x, |g, xv| sra(g, xv, p, ratio, heads))
}

fn linear_count(inp: u64, out: u64) -> u64 {
    inp * out + out
}

fn branch_count(dim: u64, width: u64) -> u64 {
    if width == 0 {
        0
    } else {
        3 * linear_count(dim, width) + linear_count(width, width)
    }
}

/// Exact parameter count of a HiLo layer, biases included.
pub fn count_params(cfg: &AttnConfig) -> u64 {
    let (dh, dl) = cfg.branch_dims();
    branch_count(cfg.dim as u64, dh as u64) + branch_count(cfg.dim as u64, dl as u64)
}

pub fn count_msa_params(dim: usize) -> u64 {
    branch_count(dim as u64, dim as u64)
}

pub fn count_sra_params(dim: usize, ratio: usize) -> u64 {
    let d = dim as u64;
    branch_count(d, d) + linear_count((ratio * ratio) as u64 * d, d)
}

/// The attention mechanisms the throughput comparison covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Msa,
    HiLo,
    Sra,
    /// Non-overlapping local-window attention with every head (HiLo at `alpha = 0`).
    Window,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Msa, Mechanism::HiLo, Mechanism::Sra, Mechanism::Window];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Msa => "msa",
            Mechanism::HiLo => "hilo",
            Mechanism::Sra => "sra",
            Mechanism::Window => "window",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings shared by all mechanisms in a comparison.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MechanismSettings {
    pub dim: usize,
    pub heads: usize,
    /// HiLo split ratio.
    pub alpha: f64,
    /// HiLo window size.
    pub window: usize,
    /// Window size of the local-window baseline.
    pub local_window: usize,
    /// SRA reduction ratio.
    pub sr_ratio: usize,
}

impl MechanismSettings {
    /// HiLo configuration this mechanism corresponds to, if any.
    pub fn hilo_config(&self, mech: Mechanism) -> Result<Option<AttnConfig>> {
        Ok(match mech {
            Mechanism::Msa => Some(AttnConfig::msa(self.dim, self.heads)?),
            Mechanism::HiLo => Some(AttnConfig::new(self.dim, self.heads, self.alpha, self.window)?),
            Mechanism::Window => Some(AttnConfig::new(self.dim, self.heads, 0.0, self.local_window)?),
            Mechanism::Sra => None,
        })
    }

    pub fn param_count(&self, mech: Mechanism) -> Result<u64> {
        Ok(match self.hilo_config(mech)? {
            Some(cfg) => count_params(&cfg),
            None => count_sra_params(self.dim, self.sr_ratio),
        })
    }
}

/// An initialized attention layer of any supported mechanism.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum AttentionLayer<T> {
    HiLo { cfg: AttnConfig, params: HiLoParams<T> },
    Sra { heads: usize, ratio: usize, params: SraParams<T> },
}

impl<T: Scalar> AttentionLayer<T> {
    pub fn init(rng: &mut RngState, mech: Mechanism, settings: &MechanismSettings) -> Result<Self> {
        Ok(match settings.hilo_config(mech)? {
            Some(cfg) => AttentionLayer::HiLo { params: HiLoParams::init(rng, &cfg), cfg },
            None => {
                AttnConfig::msa(settings.dim, settings.heads)?;
                if settings.sr_ratio == 0 {
                    return Err(Error::config("SRA reduction ratio must be at least 1"));
                }
                AttentionLayer::Sra {
                    heads: settings.heads,
                    ratio: settings.sr_ratio,
                    params: SraParams::init(rng, settings.dim, settings.sr_ratio),
                }
            }
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            AttentionLayer::HiLo { cfg, params } => hilo_forward(x, cfg, params),
            AttentionLayer::Sra { heads, ratio, params } => sra_forward(x, params, *ratio, *heads),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            AttentionLayer::HiLo { params, .. } => params.param_count(),
            AttentionLayer::Sra { params, .. } => params.param_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_branch(rng: &mut RngState, dim: usize, width: usize) -> BranchParams<f64> {
        let lin = |rng: &mut RngState, i, o| LinearParams {
            w: rng.normal_tensor(&[i, o], 0.4),
            b: rng.normal_tensor(&[o], 0.1),
        };
        BranchParams {
            q: lin(rng, dim, width),
            k: lin(rng, dim, width),
            v: lin(rng, dim, width),
            o: lin(rng, width, width),
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_heads(12, 0.0), (12, 0));
        assert_eq!(split_heads(12, 1.0), (0, 12));
        assert_eq!(split_heads(12, 0.9), (2, 10));
        assert_eq!(split_heads(10, 0.7), (3, 7));
        assert_eq!(split_heads(4, 0.9), (1, 3));
    }

    #[test]
    fn config_validation() {
        assert!(AttnConfig::new(10, 3, 0.5, 2).is_err());
        assert!(AttnConfig::new(12, 3, 1.5, 2).is_err());
        assert!(AttnConfig::new(12, 3, 0.5, 0).is_err());
        assert!(AttnConfig::new(12, 0, 0.5, 1).is_err());
    }

    #[test]
    fn param_counts() {
        assert_eq!(count_params(&AttnConfig::msa(768, 12).unwrap()), 2_362_368);
        assert_eq!(count_params(&AttnConfig::new(768, 12, 0.9, 2).unwrap()), 2_198_528);
        let half = AttnConfig::new(768, 12, 0.5, 2).unwrap();
        let branch = 3 * (768 * 384 + 384) + (384 * 384 + 384);
        assert_eq!(count_params(&half), 2 * branch);
        assert_eq!(count_params(&half), 2_067_456);
        assert_eq!(count_sra_params(768, 2), 4_722_432);

        let mut rng = RngState::new(0);
        let cfg = AttnConfig::new(64, 4, 0.5, 2).unwrap();
        let p = HiLoParams::<f32>::init(&mut rng, &cfg);
        assert_eq!(p.param_count() as u64, count_params(&cfg));
    }

    #[test]
    fn single_token_msa_is_value_path() {
        let mut rng = RngState::new(1);
        let p = random_branch(&mut rng, 8, 8);
        let x = rng.normal_tensor::<f64>(&[1, 8], 1.0);
        let out = msa_forward(&x, &p, 2).unwrap();
        let v = crate::nn::ops::linear(&x, &p.v.w, &p.v.b).unwrap();
        let expect = crate::nn::ops::linear(&v, &p.o.w, &p.o.b).unwrap();
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let mut rng = RngState::new(2);
        let p = random_branch(&mut rng, 8, 8);
        let row = rng.normal_tensor::<f64>(&[8], 1.0);
        let x = Tensor::from_fn(&[5, 8], |i| row.data()[i % 8]);
        let out = msa_forward(&x, &p, 2).unwrap();
        for r in 1..5 {
            for c in 0..8 {
                assert!((out.data()[r * 8 + c] - out.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn msa_permutation_equivariance() {
        let mut rng = RngState::new(3);
        let p = random_branch(&mut rng, 8, 8);
        let x = rng.normal_tensor::<f64>(&[6, 8], 1.0);
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = Tensor::from_fn(&[6, 8], |i| x.data()[perm[i / 8] * 8 + i % 8]);
        let out = msa_forward(&x, &p, 2).unwrap();
        let outp = msa_forward(&xp, &p, 2).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((outp.data()[r * 8 + c] - out.data()[src * 8 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn whole_map_window_equals_msa() {
        let mut rng = RngState::new(4);
        let p = random_branch(&mut rng, 8, 8);
        let x = rng.normal_tensor::<f64>(&[4, 4, 8], 1.0);
        let a = hifi_forward(&x, &p, 4, 2).unwrap();
        let b = msa_forward(&x, &p, 2).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn unit_window_hifi_is_value_path() {
        let mut rng = RngState::new(5);
        let p = random_branch(&mut rng, 8, 4);
        let x = rng.normal_tensor::<f64>(&[3, 2, 8], 1.0);
        let out = hifi_forward(&x, &p, 1, 2).unwrap();
        let v = crate::nn::ops::linear(&x, &p.v.w, &p.v.b).unwrap();
        let expect = crate::nn::ops::linear(&v, &p.o.w, &p.o.b).unwrap();
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn unit_window_lofi_is_msa() {
        let mut rng = RngState::new(6);
        let p = random_branch(&mut rng, 8, 8);
        let x = rng.normal_tensor::<f64>(&[3, 3, 8], 1.0);
        let a = lofi_forward(&x, &p, 1, 2).unwrap();
        let b = msa_forward(&x, &p, 2).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn constant_map_lofi_rows_equal() {
        let mut rng = RngState::new(7);
        let p = random_branch(&mut rng, 8, 4);
        let x = Tensor::<f64>::full(&[4, 4, 8], 0.3);
        let out = lofi_forward(&x, &p, 2, 1).unwrap();
        for r in 1..16 {
            for c in 0..4 {
                assert!((out.data()[r * 4 + c] - out.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_head_branches_are_rejected() {
        let mut rng = RngState::new(8);
        let p = random_branch(&mut rng, 8, 4);
        let x = Tensor::<f64>::zeros(&[2, 2, 8]);
        assert!(hifi_forward(&x, &p, 2, 0).is_err());
        assert!(lofi_forward(&x, &p, 2, 0).is_err());
    }

    #[test]
    fn hilo_degenerates_to_msa() {
        let mut rng = RngState::new(9);
        let msa_p = random_branch(&mut rng, 16, 16);
        let x = rng.normal_tensor::<f64>(&[4, 4, 16], 1.0);
        let reference = msa_forward(&x, &msa_p, 4).unwrap();

        let all_lofi = AttnConfig::new(16, 4, 1.0, 1).unwrap();
        let p = HiLoParams::from_msa(&all_lofi, &msa_p).unwrap();
        let out = hilo_forward(&x, &all_lofi, &p).unwrap();
        assert!(out.max_abs_diff(&reference).unwrap() <= 1e-10);

        let all_hifi = AttnConfig::new(16, 4, 0.0, 4).unwrap();
        let p = HiLoParams::from_msa(&all_hifi, &msa_p).unwrap();
        let out = hilo_forward(&x, &all_hifi, &p).unwrap();
        assert!(out.max_abs_diff(&reference).unwrap() <= 1e-10);
    }

    #[test]
    fn hilo_output_is_hifi_then_lofi() {
        let mut rng = RngState::new(10);
        let cfg = AttnConfig::new(16, 4, 0.5, 2).unwrap();
        let p = HiLoParams::<f64>::init(&mut rng, &cfg);
        let x = rng.normal_tensor::<f64>(&[4, 6, 16], 1.0);
        let out = hilo_forward(&x, &cfg, &p).unwrap();
        assert_eq!(out.shape(), &[4, 6, 16]);
        let hi = hifi_forward(&x, p.hifi.as_ref().unwrap(), 2, 2).unwrap();
        let lo = lofi_forward(&x, p.lofi.as_ref().unwrap(), 2, 2).unwrap();
        let joined = crate::nn::ops::concat_last(&[&hi, &lo]).unwrap();
        assert_eq!(out, joined);
    }

    #[test]
    fn hifi_never_crosses_windows() {
        let mut rng = RngState::new(11);
        let p = random_branch(&mut rng, 8, 8);
        let x = rng.normal_tensor::<f64>(&[4, 4, 8], 1.0);
        // Keep only the top-left 2×2 window.
        let masked = Tensor::from_fn(&[4, 4, 8], |i| {
            let (r, c) = (i / 32, (i / 8) % 4);
            if r < 2 && c < 2 { x.data()[i] } else { 0.0 }
        });
        let a = hifi_forward(&x, &p, 2, 2).unwrap();
        let b = hifi_forward(&masked, &p, 2, 2).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                for ch in 0..8 {
                    let i = (r * 4 + c) * 8 + ch;
                    assert_eq!(a.data()[i], b.data()[i]);
                }
            }
        }
    }

    #[test]
    fn sra_unit_ratio_is_msa_after_linear() {
        let mut rng = RngState::new(12);
        let p = SraParams {
            reduce: LinearParams { w: rng.normal_tensor(&[8, 8], 0.4), b: rng.normal_tensor(&[8], 0.1) },
            attn: random_branch(&mut rng, 8, 8),
        };
        let x = rng.normal_tensor::<f64>(&[3, 3, 8], 1.0);
        let out = sra_forward(&x, &p, 1, 2).unwrap();
        // With the reduction as identity the layer is plain MSA.
        let ident = SraParams {
            reduce: LinearParams { w: Tensor::identity(8), b: Tensor::zeros(&[8]) },
            attn: p.attn.clone(),
        };
        let plain = sra_forward(&x, &ident, 1, 2).unwrap();
        assert!(plain.max_abs_diff(&msa_forward(&x, &p.attn, 2).unwrap()).unwrap() < 1e-12);
        assert_eq!(out.shape(), x.shape());
    }

    #[test]
    fn sra_constant_map_rows_equal() {
        let mut rng = RngState::new(13);
        let p = SraParams::<f64>::init(&mut rng, 8, 2);
        let x = Tensor::<f64>::full(&[4, 4, 8], -0.7);
        let out = sra_forward(&x, &p, 2, 2).unwrap();
        for r in 1..16 {
            for c in 0..8 {
                assert!((out.data()[r * 8 + c] - out.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mechanism_params_match_layers() {
        let settings = MechanismSettings { dim: 32, heads: 4, alpha: 0.9, window: 2, local_window: 7, sr_ratio: 2 };
        let mut rng = RngState::new(14);
        for mech in Mechanism::ALL {
            let layer = AttentionLayer::<f32>::init(&mut rng, mech, &settings).unwrap();
            assert_eq!(layer.param_count() as u64, settings.param_count(mech).unwrap(), "{mech}");
            assert_eq!(Mechanism::parse(mech.name()), Some(mech));
        }
    }
}
