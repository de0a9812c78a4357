//! Central finite-difference verification of tape gradients.

use super::graph::{Graph, Var};
use super::Params;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Probe at most this many randomly chosen entries per tensor; `None`
    /// checks every entry.
    pub max_entries_per_tensor: Option<usize>,
    /// Chooses the probed entries when sampling.
    pub seed: u64,
    /// Harness self-test: added to the first analytic gradient entry.
    pub corrupt_analytic: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            max_entries_per_tensor: None,
            seed: 0,
            corrupt_analytic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

fn evaluate<P, F>(params: &P, f: &F) -> Result<f64>
where
    P: Params<f64>,
    F: for<'g> Fn(&mut Graph<'g, f64>, &'g P) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::Shape {
            shape: v.shape().to_vec(),
            reason: "grad_check needs a scalar objective".into(),
        });
    }
    Ok(v.data()[0])
}

fn with_entry<P: Params<f64>>(params: &mut P, tensor: usize, entry: usize, f: impl FnOnce(&mut f64)) {
    let mut seen = 0;
    let mut f = Some(f);
    params.visit_mut("", &mut |_, t: &mut Tensor<f64>| {
        if seen == tensor {
            if let Some(f) = f.take() {
                f(&mut t.data_mut()[entry]);
            }
        }
        seen += 1;
    });
}

/// Compare the tape gradient of the scalar objective `f` against central
/// differences for every tensor in `params`.
pub fn grad_check<P, F>(params: &P, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    P: Params<f64> + Clone,
    F: for<'g> Fn(&mut Graph<'g, f64>, &'g P) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let loss = f(&mut g, params)?;
        g.backward(loss)?.collect(params)
    };
    let named = params.named();
    let mut rng = RngState::new(opts.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    let h = opts.step;
    for (ti, ((name, tensor), grad)) in named.iter().zip(&analytic).enumerate() {
        let len = tensor.len();
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(k) if k < len => (0..k).map(|_| rng.below(len as u64) as usize).collect(),
            _ => (0..len).collect(),
        };
        for entry in entries {
            let original = tensor.data()[entry];
            with_entry(&mut probe, ti, entry, |v| *v = original + h);
            let plus = evaluate(&probe, &f)?;
            with_entry(&mut probe, ti, entry, |v| *v = original - h);
            let minus = evaluate(&probe, &f)?;
            with_entry(&mut probe, ti, entry, |v| *v = original);
            let numeric = (plus - minus) / (2.0 * h);
            let mut exact = grad.data()[entry];
            if report.entries_checked == 0 {
                exact += opts.corrupt_analytic.unwrap_or(0.0);
            }
            let err = (exact - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() || err > report.max_rel_err || report.entries_checked == 0 {
                report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                report.worst_param = name.clone();
                report.worst_index = entry;
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
