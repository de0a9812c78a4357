//! Finite-difference checks of every differentiable building block, from
//! single ops up to the full tiny model.
//!
//! Each check builds random inputs and weights from a seed, reduces the
//! output to a scalar with a seeded random weighting, and compares tape
//! gradients with central differences in f64.

use crate::attention::{self, AttnConfig, HiLoParams};
use crate::backbone::{self, build_litv2, BlockParams, ModelParams, StageConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::ops::AttnLayout;
use crate::nn::{grad_check, DwConvParams, GradCheckOptions, GradCheckReport, Graph, LayerNormParams, LinearParams, Params, Var};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Maximum relative error for ops, layers and blocks.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Maximum relative error for the end-to-end model.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Entries probed per tensor in the end-to-end model check.
pub const MODEL_ENTRIES_PER_TENSOR: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Ops,
    Hilo,
    Block,
    Model,
}

impl Target {
    pub fn tolerance(self) -> f64 {
        match self {
            Target::Model => MODEL_TOLERANCE,
            _ => LAYER_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
}

impl NamedReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.report.max_rel_err <= tol
    }
}

fn readout<'g>(g: &mut Graph<'g, f64>, y: Var, seed: u64) -> Result<Var> {
    let w = RngState::new(seed ^ 0x5EED).normal_tensor(g.shape(y), 1.0);
    g.weighted_sum(y, w)
}

/// Replace every tensor with `N(0, std²)` draws.
pub fn randomize<P: Params<f64>>(p: &mut P, rng: &mut RngState, std: f64) {
    p.visit_mut("", &mut |_, t| *t = rng.normal_tensor(t.shape(), std));
}

struct Check<'o> {
    opts: &'o GradCheckOptions,
    seed: u64,
    out: Vec<NamedReport>,
}

impl Check<'_> {
    fn run<P, F>(&mut self, name: &str, params: &P, f: F) -> Result<()>
    where
        P: Params<f64> + Clone,
        F: for<'g> Fn(&mut Graph<'g, f64>, &'g P) -> Result<Var>,
    {
        let seed = self.seed;
        let report = grad_check(
            params,
            |g, p| {
                let y = f(g, p)?;
                readout(g, y, seed)
            },
            self.opts,
        )?;
        self.out.push(NamedReport { name: name.into(), report });
        Ok(())
    }
}

/// Every tape op on small random operands.
pub fn check_ops(seed: u64, opts: &GradCheckOptions) -> Result<Vec<NamedReport>> {
    let mut rng = RngState::new(seed);
    let mut c = Check { opts, seed, out: Vec::new() };
    let t = |rng: &mut RngState, shape: &[usize]| rng.normal_tensor::<f64>(shape, 1.0);

    c.run("matmul", &(t(&mut rng, &[3, 4]), t(&mut rng, &[4, 2])), |g, (a, b)| {
        let (a, b) = (g.param(a), g.param(b));
        g.matmul(a, b)
    })?;
    c.run("linear", &(t(&mut rng, &[2, 3, 4]), LinearParams { w: t(&mut rng, &[4, 5]), b: t(&mut rng, &[5]) }), |g, (x, p)| {
        let x = g.param(x);
        g.dense(x, p)
    })?;
    c.run("add", &(t(&mut rng, &[3, 4]), t(&mut rng, &[3, 4])), |g, (a, b)| {
        let (a, b) = (g.param(a), g.param(b));
        g.add(a, b)
    })?;
    c.run("softmax_rows", &t(&mut rng, &[3, 5]), |g, x| {
        let x = g.param(x);
        Ok(g.softmax_rows(x))
    })?;
    let ln = LayerNormParams { gamma: t(&mut rng, &[6]), beta: t(&mut rng, &[6]) };
    c.run("layer_norm", &(t(&mut rng, &[4, 6]), ln), |g, (x, p)| {
        let x = g.param(x);
        g.norm(x, p)
    })?;
    c.run("gelu", &t(&mut rng, &[3, 7]), |g, x| {
        let x = g.param(x);
        Ok(g.gelu(x))
    })?;
    let dw = DwConvParams { kernels: t(&mut rng, &[3, 3, 3]), bias: t(&mut rng, &[3]) };
    c.run("dwconv3x3", &(t(&mut rng, &[4, 5, 3]), dw), |g, (x, p)| {
        let x = g.param(x);
        g.dwconv(x, p)
    })?;
    c.run("avgpool_window", &t(&mut rng, &[5, 3, 2]), |g, x| {
        let x = g.param(x);
        g.avgpool_window(x, 2)
    })?;
    c.run("window_partition", &t(&mut rng, &[5, 3, 2]), |g, x| {
        let x = g.param(x);
        g.window_partition(x, 2)
    })?;
    c.run("window_reverse", &t(&mut rng, &[6, 4, 2]), |g, x| {
        let x = g.param(x);
        g.window_reverse(x, 5, 3, 2)
    })?;
    c.run("space_to_depth", &t(&mut rng, &[4, 6, 2]), |g, x| {
        let x = g.param(x);
        g.space_to_depth(x, 2)
    })?;
    c.run("reshape", &t(&mut rng, &[4, 6]), |g, x| {
        let x = g.param(x);
        g.reshape(x, &[3, 8])
    })?;
    c.run("concat_last", &(t(&mut rng, &[3, 2]), t(&mut rng, &[3, 4])), |g, (a, b)| {
        let (a, b) = (g.param(a), g.param(b));
        g.concat_last(&[a, b])
    })?;
    let layout = AttnLayout { groups: 2, heads: 2, queries: 3, keys: 4, head_dim: 2 };
    let qkv = vec![t(&mut rng, &[6, 4]), t(&mut rng, &[8, 4]), t(&mut rng, &[8, 4])];
    c.run("attention", &qkv, |g, p| {
        let (q, k, v) = (g.param(&p[0]), g.param(&p[1]), g.param(&p[2]));
        g.attention(q, k, v, layout, 1.0 / 2f64.sqrt())
    })?;
    c.run("mean_tokens", &t(&mut rng, &[4, 5]), |g, x| {
        let x = g.param(x);
        Ok(g.mean_tokens(x))
    })?;
    let label = rng.below(4) as usize;
    c.run("cross_entropy", &t(&mut rng, &[4]), move |g, x| {
        let x = g.param(x);
        g.cross_entropy(x, label)
    })?;
    Ok(c.out)
}

fn small_attn(rng: &mut RngState) -> AttnConfig {
    let alpha = [0.0, 0.5, 0.75, 1.0][rng.below(4) as usize];
    AttnConfig::new(8, 4, alpha, 2).expect("valid config")
}

/// A HiLo layer (and its input) on a map that needs window padding.
pub fn check_hilo(seed: u64, opts: &GradCheckOptions) -> Result<Vec<NamedReport>> {
    let mut rng = RngState::new(seed);
    let cfg = small_attn(&mut rng);
    let mut p = HiLoParams::<f64>::init(&mut rng, &cfg);
    randomize(&mut p, &mut rng, 0.5);
    let x = rng.normal_tensor::<f64>(&[5, 3, 8], 1.0);
    let mut c = Check { opts, seed, out: Vec::new() };
    c.run(&format!("hilo(alpha={})", cfg.alpha), &(x, p), |g, (x, p)| {
        let x = g.param(x);
        Ok(attention::hilo(g, x, &cfg, p)?.out)
    })?;
    Ok(c.out)
}

fn small_stage(rng: &mut RngState, attention: bool) -> StageConfig {
    let cfg = small_attn(rng);
    StageConfig {
        patch: 2,
        dim: 8,
        depth: 1,
        has_attention: attention,
        heads: cfg.heads,
        alpha: cfg.alpha,
        window: cfg.window,
        mlp_ratio: 2,
    }
}

/// Patch embedding, token merge, ConvFFN and full transformer blocks.
pub fn check_block(seed: u64, opts: &GradCheckOptions) -> Result<Vec<NamedReport>> {
    let mut rng = RngState::new(seed);
    let mut c = Check { opts, seed, out: Vec::new() };

    let embed = LinearParams { w: rng.normal_tensor(&[27, 4], 0.5), b: rng.normal_tensor(&[4], 0.5) };
    c.run("patch_embed", &(rng.normal_tensor::<f64>(&[6, 3, 3], 1.0), embed), |g, (x, p)| {
        let x = g.param(x);
        backbone::patch_embed(g, x, p, 3)
    })?;

    let merge = LinearParams { w: rng.normal_tensor(&[12, 5], 0.5), b: rng.normal_tensor(&[5], 0.5) };
    c.run("merge_tokens", &(rng.normal_tensor::<f64>(&[4, 2, 3], 1.0), merge), |g, (x, p)| {
        let x = g.param(x);
        backbone::merge_tokens(g, x, p)
    })?;

    let st = small_stage(&mut rng, false);
    let mut p = BlockParams::<f64>::init(&mut rng, &st)?;
    randomize(&mut p, &mut rng, 0.5);
    c.run("conv_ffn", &(rng.normal_tensor::<f64>(&[3, 4, 8], 1.0), p), |g, (x, p)| {
        let x = g.param(x);
        backbone::conv_ffn(g, x, p)
    })?;

    let st = small_stage(&mut rng, true);
    let mut p = BlockParams::<f64>::init(&mut rng, &st)?;
    randomize(&mut p, &mut rng, 0.5);
    c.run(&format!("hilo_block(alpha={})", st.alpha), &(rng.normal_tensor::<f64>(&[5, 3, 8], 1.0), p), |g, (x, p)| {
        let x = g.param(x);
        Ok(backbone::block(g, x, p, &st)?.out)
    })?;
    Ok(c.out)
}

/// Cross-entropy of the tiny model on one random 32×32 image. Only
/// `max_entries_per_tensor` entries per tensor are probed (sampled by seed).
pub fn check_model(seed: u64, opts: &GradCheckOptions) -> Result<Vec<NamedReport>> {
    let cfg = build_litv2(Variant::Tiny);
    let mut rng = RngState::new(seed);
    let mut p = ModelParams::<f64>::init(&mut rng, &cfg)?;
    p.visit_mut("", &mut |_, t| {
        let noise: Tensor<f64> = rng.normal_tensor(t.shape(), 0.1);
        t.accumulate(&noise).expect("same shape");
    });
    let image = rng.uniform_tensor::<f64>(&[cfg.resolution, cfg.resolution, 3], -1.0, 1.0);
    let label = rng.below(cfg.num_classes as u64) as usize;
    let opts = GradCheckOptions {
        max_entries_per_tensor: opts.max_entries_per_tensor.or(Some(MODEL_ENTRIES_PER_TENSOR)),
        seed,
        ..opts.clone()
    };
    let report = grad_check(
        &p,
        |g, p| {
            let x = g.constant(image.clone());
            let vars = backbone::model(g, x, &cfg, p)?;
            g.cross_entropy(vars.logits, label)
        },
        &opts,
    )?;
    Ok(vec![NamedReport { name: "litv2_tiny".into(), report }])
}

pub fn run(target: Target, seed: u64, opts: &GradCheckOptions) -> Result<Vec<NamedReport>> {
    match target {
        Target::Ops => check_ops(seed, opts),
        Target::Hilo => check_hilo(seed, opts),
        Target::Block => check_block(seed, opts),
        Target::Model => check_model(seed, opts),
    }
}

/// First report above the target's tolerance, as an error.
pub fn enforce(target: Target, seed: u64, reports: &[NamedReport]) -> Result<()> {
    let tol = target.tolerance();
    match reports.iter().find(|r| !r.passed(tol)) {
        None => Ok(()),
        Some(r) => Err(Error::Numerical(format!(
            "seed {seed}: {} relative error {:.3e} > {tol:e} at {}[{}]",
            r.name, r.report.max_rel_err, r.report.worst_param, r.report.worst_index
        ))),
    }
}
