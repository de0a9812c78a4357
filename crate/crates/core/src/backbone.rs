//! The LITv2 pyramid: patch embedding, two stages of ConvFFN-only blocks,
//! two stages of HiLo transformer blocks, stride-2 token merging between
//! stages and a pooled linear classifier.
//!
//! Patch embedding and merging are both space-to-depth followed by a dense
//! layer, i.e. a `P×P` stride-`P` convolution.

use std::str::FromStr;

use crate::attention::{self, AttnConfig, HiLoParams, HiLoVars};
use crate::cost::{flops_hilo_map, FlopsReport};
use crate::error::{Error, Result};
use crate::nn::{impl_params, DwConvParams, Graph, LayerNormParams, LinearParams, Params, Var};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

pub const IN_CHANNELS: usize = 3;
/// Downsampling factor of every token merge.
pub const MERGE: usize = 2;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageConfig {
    /// Patch size of the stem (stage 1) or merge factor (later stages).
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub has_attention: bool,
    pub heads: usize,
    pub alpha: f64,
    pub window: usize,
    pub mlp_ratio: usize,
}

impl StageConfig {
    pub fn attn_config(&self) -> Result<Option<AttnConfig>> {
        if !self.has_attention {
            return Ok(None);
        }
        AttnConfig::new(self.dim, self.heads, self.alpha, self.window).map(Some)
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    /// Nominal input resolution.
    pub resolution: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    S,
    M,
    B,
    Tiny,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(Variant::S),
            "m" => Ok(Variant::M),
            "b" => Ok(Variant::B),
            "tiny" => Ok(Variant::Tiny),
            _ => Err(Error::config(format!("unknown variant {s:?}; expected S, M, B or tiny"))),
        }
    }
}

fn stage(patch: usize, dim: usize, depth: usize, attn: Option<(usize, f64, usize)>) -> StageConfig {
    let (heads, alpha, window) = attn.unwrap_or((0, 0.0, 1));
    StageConfig {
        patch,
        dim,
        depth,
        has_attention: attn.is_some(),
        heads,
        alpha,
        window,
        mlp_ratio: 4,
    }
}

fn pyramid(stem: usize, dims: [usize; 4], depths: [usize; 4], heads: [usize; 2]) -> Vec<StageConfig> {
    vec![
        stage(stem, dims[0], depths[0], None),
        stage(MERGE, dims[1], depths[1], None),
        stage(MERGE, dims[2], depths[2], Some((heads[0], 0.9, 2))),
        stage(MERGE, dims[3], depths[3], Some((heads[1], 1.0, 1))),
    ]
}

pub fn build_litv2(variant: Variant) -> ModelConfig {
    let (name, stages, classes, res) = match variant {
        Variant::S => ("LITv2-S", pyramid(4, [96, 192, 384, 768], [2, 2, 6, 2], [12, 24]), 1000, 224),
        Variant::M => ("LITv2-M", pyramid(4, [96, 192, 384, 768], [2, 2, 18, 2], [12, 24]), 1000, 224),
        Variant::B => ("LITv2-B", pyramid(4, [128, 256, 512, 1024], [2, 2, 18, 2], [16, 32]), 1000, 224),
        Variant::Tiny => ("LITv2-tiny", pyramid(2, [32, 64, 128, 256], [1, 1, 2, 1], [4, 8]), 2, 32),
    };
    ModelConfig { name: name.into(), stages, num_classes: classes, resolution: res }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::config(format!("expected 4 stages, found {}", self.stages.len())));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        for (i, st) in self.stages.iter().enumerate() {
            let n = i + 1;
            if !matches!(st.patch, 2 | 4) {
                return Err(Error::config(format!("stage {n}: patch/merge factor {} not in {{2, 4}}", st.patch)));
            }
            if st.dim == 0 || st.depth == 0 || st.mlp_ratio == 0 {
                return Err(Error::config(format!("stage {n}: dim, depth and mlp_ratio must be positive")));
            }
            if i < 2 && st.has_attention {
                return Err(Error::config(format!("stage {n} must not have attention")));
            }
            if i == 3 && st.has_attention && (st.alpha != 1.0 || st.window != 1) {
                return Err(Error::config("stage 4 attention must use alpha = 1 and window = 1"));
            }
            st.attn_config()?;
        }
        self.grid(self.resolution)?;
        Ok(())
    }

    /// Total downsampling from image to the last stage.
    pub fn stride(&self) -> usize {
        self.stages.iter().map(|s| s.patch).product()
    }

    /// Token grid side of each stage for a square `resolution` input.
    pub fn grid(&self, resolution: usize) -> Result<Vec<usize>> {
        let stride = self.stride();
        if resolution == 0 || !resolution.is_multiple_of(stride) {
            return Err(Error::config(format!(
                "resolution {resolution} is not divisible by the model stride {stride}"
            )));
        }
        let mut side = resolution;
        Ok(self.stages.iter().map(|s| {
            side /= s.patch;
            side
        })
        .collect())
    }

    fn in_dims(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(IN_CHANNELS).chain(self.stages.iter().map(|s| s.dim))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub norm1: Option<LayerNormParams<T>>,
    pub attn: Option<HiLoParams<T>>,
    pub norm2: LayerNormParams<T>,
    pub fc1: LinearParams<T>,
    pub dw: DwConvParams<T>,
    pub fc2: LinearParams<T>,
}

impl_params!(BlockParams { norm1, attn, norm2, fc1, dw, fc2 });

impl<T: Scalar> BlockParams<T> {
    pub fn init(rng: &mut RngState, st: &StageConfig) -> Result<Self> {
        let attn_cfg = st.attn_config()?;
        Ok(BlockParams {
            norm1: attn_cfg.map(|_| LayerNormParams::new(st.dim)),
            attn: attn_cfg.map(|c| HiLoParams::init(rng, &c)),
            norm2: LayerNormParams::new(st.dim),
            fc1: LinearParams::init(rng, st.dim, st.hidden()),
            dw: DwConvParams::init(rng, st.hidden()),
            fc2: LinearParams::init(rng, st.hidden(), st.dim),
        })
    }

    pub fn cast<U: Scalar>(&self) -> BlockParams<U> {
        BlockParams {
            norm1: self.norm1.as_ref().map(LayerNormParams::cast),
            attn: self.attn.as_ref().map(HiLoParams::cast),
            norm2: self.norm2.cast(),
            fc1: self.fc1.cast(),
            dw: self.dw.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams<T> {
    /// Patch embedding (stage 1) or token merge.
    pub embed: LinearParams<T>,
    pub blocks: Vec<BlockParams<T>>,
}

impl_params!(StageParams { embed, blocks });

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub stages: Vec<StageParams<T>>,
    pub norm: LayerNormParams<T>,
    pub head: LinearParams<T>,
}

impl_params!(ModelParams { stages, norm, head });

impl<T: Scalar> ModelParams<T> {
    pub fn init(rng: &mut RngState, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(4);
        for (st, c_in) in cfg.stages.iter().zip(cfg.in_dims()) {
            let embed = LinearParams::init(rng, st.patch * st.patch * c_in, st.dim);
            let blocks = (0..st.depth).map(|_| BlockParams::init(rng, st)).collect::<Result<_>>()?;
            stages.push(StageParams { embed, blocks });
        }
        let last = cfg.stages[3].dim;
        Ok(ModelParams {
            stages,
            norm: LayerNormParams::new(last),
            head: LinearParams::init(rng, last, cfg.num_classes),
        })
    }

    /// Shapes and order of every tensor, derived from `cfg` alone.
    pub fn shapes(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let p = Self::init(&mut RngState::new(0), cfg)?;
        Ok(p.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            stages: self
                .stages
                .iter()
                .map(|s| StageParams { embed: s.embed.cast(), blocks: s.blocks.iter().map(BlockParams::cast).collect() })
                .collect(),
            norm: self.norm.cast(),
            head: self.head.cast(),
        }
    }
}

/// Exact parameter count implied by `cfg`.
pub fn count_model_params(cfg: &ModelConfig) -> Result<u64> {
    cfg.validate()?;
    let lin = |i: usize, o: usize| (i * o + o) as u64;
    let mut total = 0;
    for (st, c_in) in cfg.stages.iter().zip(cfg.in_dims()) {
        total += lin(st.patch * st.patch * c_in, st.dim);
        let (c, hid) = (st.dim, st.hidden());
        let mut block = 2 * c as u64 + lin(c, hid) + 10 * hid as u64 + lin(hid, c);
        if let Some(a) = st.attn_config()? {
            block += 2 * c as u64 + attention::count_params(&a);
        }
        total += block * st.depth as u64;
    }
    let last = cfg.stages[3].dim;
    Ok(total + 2 * last as u64 + lin(last, cfg.num_classes))
}

/// Stride-`p` patch projection of an `H×W×C` map.
pub fn patch_embed<'a, T: Scalar>(g: &mut Graph<'a, T>, x: Var, p: &'a LinearParams<T>, patch: usize) -> Result<Var> {
    let patches = g.space_to_depth(x, patch)?;
    g.dense(patches, p)
}

/// `2×2` stride-2 token merge; stands in for deformable token merging.
pub fn merge_tokens<'a, T: Scalar>(g: &mut Graph<'a, T>, x: Var, p: &'a LinearParams<T>) -> Result<Var> {
    patch_embed(g, x, p, MERGE)
}

/// `x + fc2(dwconv(gelu(fc1(LN(x)))))`.
pub fn conv_ffn<'a, T: Scalar>(g: &mut Graph<'a, T>, x: Var, p: &'a BlockParams<T>) -> Result<Var> {
    let h = g.norm(x, &p.norm2)?;
    let h = g.dense(h, &p.fc1)?;
    let h = g.gelu(h);
    let h = g.dwconv(h, &p.dw)?;
    let h = g.dense(h, &p.fc2)?;
    g.add(x, h)
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub out: Var,
    pub attn: Option<HiLoVars>,
}

pub fn block<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    x: Var,
    p: &'a BlockParams<T>,
    st: &StageConfig,
) -> Result<BlockVars> {
    let (mut x, mut vars) = (x, None);
    if let (Some(cfg), Some(norm), Some(attn)) = (st.attn_config()?, &p.norm1, &p.attn) {
        let h = g.norm(x, norm)?;
        let hv = attention::hilo(g, h, &cfg, attn)?;
        x = g.add(x, hv.out)?;
        vars = Some(hv);
    }
    Ok(BlockVars { out: conv_ffn(g, x, p)?, attn: vars })
}

/// Everything a forward pass exposes for inspection.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub logits: Var,
    /// Output map of each stage.
    pub stages: Vec<Var>,
    /// Per stage, per block attention handles (empty for ConvFFN-only stages).
    pub attn: Vec<Vec<HiLoVars>>,
}

/// Forward an `R×R×3` image to `num_classes` logits.
pub fn model<'a, T: Scalar>(g: &mut Graph<'a, T>, image: Var, cfg: &ModelConfig, p: &'a ModelParams<T>) -> Result<ModelVars> {
    match *g.shape(image) {
        [h, w, IN_CHANNELS] if h == w => {
            cfg.grid(h)?;
        }
        ref other => {
            return Err(Error::config(format!(
                "model input must be a square R×R×{IN_CHANNELS} image, got {other:?}"
            )))
        }
    }
    let mut x = image;
    let mut vars = ModelVars { logits: image, stages: Vec::new(), attn: Vec::new() };
    for (st, sp) in cfg.stages.iter().zip(&p.stages) {
        x = patch_embed(g, x, &sp.embed, st.patch)?;
        let mut stage_attn = Vec::new();
        for bp in &sp.blocks {
            let b = block(g, x, bp, st)?;
            x = b.out;
            stage_attn.extend(b.attn);
        }
        vars.stages.push(x);
        vars.attn.push(stage_attn);
    }
    let x = g.norm(x, &p.norm)?;
    let pooled = g.mean_tokens(x);
    vars.logits = g.dense(pooled, &p.head)?;
    Ok(vars)
}

pub fn model_forward<T: Scalar>(image: &Tensor<T>, cfg: &ModelConfig, p: &ModelParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let x = g.input(image);
    let vars = model(&mut g, x, cfg, p)?;
    Ok(g.value(vars.logits).clone())
}

/// Per-stage MAC accounting at a square `resolution`.
pub fn flops_model(cfg: &ModelConfig, resolution: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    let grid = cfg.grid(resolution)?;
    let mut report = FlopsReport::default();
    for (i, ((st, c_in), side)) in cfg.stages.iter().zip(cfg.in_dims()).zip(grid).enumerate() {
        let n = (side * side) as u64;
        let (c, hid) = (st.dim as u64, st.hidden() as u64);
        let embed_label = if i == 0 { "patch_embed" } else { "merge_conv2x2" };
        let mut stage = FlopsReport::new([(embed_label, n * (st.patch * st.patch * c_in) as u64 * c)]);
        let mut attn = 0;
        if let Some(a) = st.attn_config()? {
            attn = flops_hilo_map(side, side, &a).total;
        }
        let depth = st.depth as u64;
        stage.push("attention", attn * depth);
        stage.push("ffn_fc", 2 * n * c * hid * depth);
        stage.push("ffn_dwconv", 9 * n * hid * depth);
        report.extend(&format!("stage{}", i + 1), stage);
    }
    report.push("head", (cfg.stages[3].dim * cfg.num_classes) as u64);
    Ok(report)
}
