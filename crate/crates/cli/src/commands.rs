use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::Path;

use litv2::attention::{AttnConfig, Mechanism, MechanismSettings};
use litv2::backbone::{build_litv2, count_model_params, flops_model};
use litv2::bench::{bench_model, compare_attentions, format_table, write_bench_csv, BenchOptions};
use litv2::checkpoint::{load_checkpoint, save_checkpoint};
use litv2::cost::{self, FlopsReport, SweepRow};
use litv2::gradsuite::{self, Target};
use litv2::nn::GradCheckOptions;
use litv2::spectrum::{self, Branch};
use litv2::train::{self, AdamConfig, TrainConfig};
use litv2::{io, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::manifest::{self, io_fail, RunDir};
use crate::*;

pub fn dispatch(cmd: Command, args: &[OsString]) -> CmdResult {
    match cmd {
        Command::Flops(FlopsCmd::Attn(a)) => flops_attn(&a, args),
        Command::Flops(FlopsCmd::Model(a)) => flops_model_cmd(&a, args),
        Command::Sweep(a) => sweep(&a, args),
        Command::Bench(BenchCmd::Attn(a)) => bench_attn(&a, args),
        Command::Bench(BenchCmd::Model(a)) => bench_model_cmd(&a, args),
        Command::Gradcheck(a) => gradcheck(&a, args),
        Command::TrainToy(a) => match a.dtype {
            DTypeArg::F32 => train_toy::<f32>(&a, args),
            DTypeArg::F64 => train_toy::<f64>(&a, args),
        },
        Command::Spectrum(a) => spectrum_cmd(&a, args),
        Command::ExportDataset(a) => match a.dtype {
            DTypeArg::F32 => export::<f32>(&a, args),
            DTypeArg::F64 => export::<f64>(&a, args),
        },
        Command::Replay(a) => replay(&a),
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> CmdResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Failure::io(e.to_string()))?;
    Ok(buf)
}

impl AttnArgs {
    fn settings(&self) -> CmdResult<MechanismSettings> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Failure::usage(format!("--alpha {} outside [0, 1]", self.alpha)));
        }
        if self.local_window == 0 || self.sr_ratio == 0 {
            return Err(Failure::usage("--local-window and --sr-ratio must be positive"));
        }
        AttnConfig::new(self.dim, self.heads, self.alpha, self.window)?;
        Ok(MechanismSettings {
            dim: self.dim,
            heads: self.heads,
            alpha: self.alpha,
            window: self.window,
            local_window: self.local_window,
            sr_ratio: self.sr_ratio,
        })
    }
}

fn report_lines(r: &FlopsReport) -> String {
    let width = r.components.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    let mut s = String::new();
    for (name, v) in &r.components {
        let _ = writeln!(s, "  {name:<width$}  {v:>14}");
    }
    let _ = writeln!(s, "total {}", r.total);
    s
}

#[derive(Serialize)]
struct FlopsOut<'a> {
    mechanism: String,
    tokens: Option<u64>,
    res: Option<usize>,
    components: &'a [(String, u64)],
    total: u64,
    params: u64,
}

fn flops_attn(a: &FlopsAttnArgs, args: &[OsString]) -> CmdResult {
    let settings = a.attn.settings()?;
    let (report, tokens) = match a.res {
        Some(r) if r > 0 => (cost::flops_mechanism_map(a.mech, &settings, r, r)?, None),
        Some(_) => return Err(Failure::usage("--res must be positive")),
        None => {
            let n = a.tokens.unwrap_or(196);
            if n == 0 {
                return Err(Failure::usage("--tokens must be positive"));
            }
            (cost::flops_mechanism(a.mech, &settings, n)?, Some(n))
        }
    };
    let params = settings.param_count(a.mech)?;
    let shape = match (tokens, a.res) {
        (Some(n), _) => format!("tokens={n}"),
        (None, Some(r)) => format!("res={r}x{r}"),
        _ => unreachable!(),
    };
    let detail = match a.mech {
        Mechanism::Msa => String::new(),
        Mechanism::HiLo => format!(" alpha={} window={}", a.attn.alpha, a.attn.window),
        Mechanism::Window => format!(" window={}", a.attn.local_window),
        Mechanism::Sra => format!(" sr_ratio={}", a.attn.sr_ratio),
    };
    print!(
        "{} dim={} heads={}{detail} {shape}\n{}params {params}\n",
        a.mech,
        a.attn.dim,
        a.attn.heads,
        report_lines(&report)
    );
    let mut run = RunDir::create(&a.out.out, "flops")?;
    run.write_json(
        "flops.json",
        &FlopsOut {
            mechanism: a.mech.to_string(),
            tokens,
            res: a.res,
            components: &report.components,
            total: report.total,
            params,
        },
    )?;
    run.finish("flops attn", a, None, args)
}

fn flops_model_cmd(a: &FlopsModelArgs, args: &[OsString]) -> CmdResult {
    let cfg = build_litv2(a.variant);
    let res = a.res.unwrap_or(cfg.resolution);
    let report = flops_model(&cfg, res)?;
    let params = count_model_params(&cfg)?;
    let mut stages: Vec<(String, u64)> = Vec::new();
    for (name, v) in &report.components {
        let key = name.split_once('.').map_or(name.as_str(), |(s, _)| s);
        match stages.last_mut() {
            Some((k, total)) if k == key => *total += v,
            _ => stages.push((key.to_string(), *v)),
        }
    }
    println!("{} res={res}", cfg.name);
    for (stage, v) in &stages {
        println!("  {stage:<8} {v:>14}");
    }
    println!("total {}\nparams {params}", report.total);
    let mut run = RunDir::create(&a.out.out, "flops")?;
    run.write_json(
        "flops.json",
        &serde_json::json!({
            "model": cfg.name,
            "res": res,
            "stages": stages.iter().map(|(k, v)| serde_json::json!({ "name": k, "flops": v })).collect::<Vec<_>>(),
            "components": report.components,
            "total": report.total,
            "params": params,
        }),
    )?;
    run.finish("flops model", a, None, args)
}

/// Sweep settings read from `--config`; keys mirror the flags.
#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    dim: Option<usize>,
    heads: Option<usize>,
    alpha: Option<f64>,
    window: Option<usize>,
    tokens: Option<u64>,
    grid: Option<Vec<f64>>,
    res: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize)]
struct SweepResolved {
    kind: SweepKindArg,
    dim: usize,
    heads: usize,
    alpha: f64,
    window: usize,
    tokens: u64,
    grid: Vec<f64>,
    res: Vec<usize>,
}

fn resolve_sweep(a: &SweepArgs) -> CmdResult<SweepResolved> {
    let file = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_fail(p, e))?;
            toml::from_str::<SweepFile>(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => SweepFile::default(),
    };
    let default_grid = match a.kind {
        SweepKindArg::HiloRes => (1..=14).map(|k| (64 * k * k) as f64).collect(),
        SweepKindArg::Alpha => (0..=10).map(|k| k as f64 / 10.0).collect(),
        SweepKindArg::Window => vec![2.0, 4.0, 7.0],
    };
    let grid = a.grid.clone().or(file.grid).unwrap_or(default_grid);
    let res = a.res.clone().or(file.res).unwrap_or(vec![14, 28, 56, 112]);
    if grid.is_empty() || res.is_empty() {
        return Err(Failure::usage("sweep grid is empty"));
    }
    Ok(SweepResolved {
        kind: a.kind,
        dim: a.dim.or(file.dim).unwrap_or(768),
        heads: a.heads.or(file.heads).unwrap_or(12),
        alpha: a.alpha.or(file.alpha).unwrap_or(0.9),
        window: a.window.or(file.window).unwrap_or(2),
        tokens: a.tokens.or(file.tokens).unwrap_or(196),
        grid,
        res,
    })
}

fn positive_ints(grid: &[f64], what: &str) -> CmdResult<Vec<u64>> {
    grid.iter()
        .map(|&g| {
            if g >= 1.0 && g.fract() == 0.0 {
                Ok(g as u64)
            } else {
                Err(Failure::usage(format!("{what} grid value {g} is not a positive integer")))
            }
        })
        .collect()
}

/// Window count up to which the crossover scan runs.
const SCAN_WINDOWS: u64 = 1 << 20;

fn sweep(a: &SweepArgs, args: &[OsString]) -> CmdResult {
    let r = resolve_sweep(a)?;
    if !(0.0..=1.0).contains(&r.alpha) {
        return Err(Failure::usage(format!("alpha {} outside [0, 1]", r.alpha)));
    }
    let (rows, summary): (Vec<SweepRow>, serde_json::Value) = match r.kind {
        SweepKindArg::HiloRes => {
            let cfg = AttnConfig::new(r.dim, r.heads, r.alpha, r.window)?;
            let tokens = positive_ints(&r.grid, "token")?;
            let rows = cost::sweep_resolution(&cfg, &tokens)?;
            let analytic = cost::analytic_crossover(&cfg);
            let scanned = cost::scan_crossover(&cfg, SCAN_WINDOWS);
            let on_grid = tokens
                .iter()
                .copied()
                .find(|&n| cost::flops_lofi(n, &cfg).total >= cost::flops_hifi(n, &cfg).total);
            let fmt = |v: Option<u64>| v.map_or("none".to_string(), |n| n.to_string());
            println!("crossover N*: analytic {} scanned {} first grid point {}", fmt(analytic), fmt(scanned), fmt(on_grid));
            let summary = serde_json::json!({
                "analytic_crossover": analytic,
                "scanned_crossover": scanned,
                "grid_crossover": on_grid,
            });
            (rows, summary)
        }
        SweepKindArg::Alpha => {
            let rows = cost::sweep_alpha(r.dim, r.heads, r.window, r.tokens, &r.grid)?;
            let best = rows.iter().min_by_key(|row| row.flops).expect("non-empty grid");
            println!("minimum at alpha {} with {} MACs", best.x, best.flops);
            (rows.clone(), serde_json::json!({ "best_alpha": best.x, "best_flops": best.flops }))
        }
        SweepKindArg::Window => {
            let windows: Vec<usize> = positive_ints(&r.grid, "window")?.into_iter().map(|w| w as usize).collect();
            let rows = cost::sweep_window(r.dim, r.heads, r.alpha, &windows, &r.res)?;
            let side = *r.res.iter().max().expect("non-empty");
            let at_side: Vec<(usize, u64)> = windows
                .iter()
                .zip(rows.iter().filter(|row| row.x == (side * side) as f64))
                .map(|(&w, row)| (w, row.flops))
                .collect();
            for (w, f) in &at_side {
                println!("{side}x{side} window {w}: {f} MACs");
            }
            let decreasing = at_side.windows(2).all(|p| p[0].0 >= p[1].0 || p[1].1 < p[0].1);
            (rows, serde_json::json!({ "side": side, "flops_by_window": at_side, "decreasing_in_window": decreasing }))
        }
    };
    let kind = serde_json::to_value(r.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    let mut run = RunDir::create(&a.out.out, "sweep")?;
    let csv = run.write(&format!("sweep_{kind}.csv"), csv_bytes(|b| cost::write_sweep_csv(b, &rows))?)?;
    println!("{} rows written to {}", rows.len(), csv.display());
    run.write_json("summary.json", &summary)?;
    run.finish("sweep", &r, None, args)
}

impl BenchOpts {
    fn options(&self) -> CmdResult<BenchOptions> {
        let o = BenchOptions { runs: self.runs, warmup: self.warmup, batch: self.batch, threads: self.threads };
        o.validate()?;
        Ok(o)
    }
}

fn bench_attn(a: &BenchAttnArgs, args: &[OsString]) -> CmdResult {
    let settings = a.attn.settings()?;
    if a.mechs.is_empty() {
        return Err(Failure::usage("no mechanisms given"));
    }
    let rows = compare_attentions(&a.mechs, &settings, a.res, &a.bench.options()?, a.bench.seed)?;
    print!("{}", format_table(&rows));
    let mut run = RunDir::create(&a.out.out, "bench")?;
    run.write("bench.csv", csv_bytes(|b| write_bench_csv(b, &rows))?)?;
    run.write_json("bench.json", &rows)?;
    run.finish("bench attn", a, Some(a.bench.seed), args)
}

fn bench_model_cmd(a: &BenchModelArgs, args: &[OsString]) -> CmdResult {
    let cfg = build_litv2(a.variant);
    let res = a.res.unwrap_or(cfg.resolution);
    let rows = vec![bench_model(&cfg, res, &a.bench.options()?, a.bench.seed)?];
    print!("{}", format_table(&rows));
    let mut run = RunDir::create(&a.out.out, "bench")?;
    run.write("bench.csv", csv_bytes(|b| write_bench_csv(b, &rows))?)?;
    run.write_json("bench.json", &rows)?;
    run.finish("bench model", a, Some(a.bench.seed), args)
}

#[derive(Serialize)]
struct GradLine {
    seed: u64,
    name: String,
    max_rel_err: f64,
    worst_param: String,
    worst_index: usize,
    entries_checked: usize,
    passed: bool,
}

fn gradcheck(a: &GradcheckArgs, args: &[OsString]) -> CmdResult {
    let target = match a.target {
        TargetArg::Ops => Target::Ops,
        TargetArg::Hilo => Target::Hilo,
        TargetArg::Block => Target::Block,
        TargetArg::Model => Target::Model,
    };
    if a.step.is_nan() || a.step <= 0.0 {
        return Err(Failure::usage("--step must be positive"));
    }
    let tol = target.tolerance();
    let mut lines = Vec::new();
    let mut first_failure = None;
    for seed in a.seed.first..=a.seed.last {
        let opts = GradCheckOptions {
            step: a.step,
            max_entries_per_tensor: a.max_entries,
            seed,
            corrupt_analytic: a.corrupt_grad,
        };
        let reports = gradsuite::run(target, seed, &opts)?;
        for r in &reports {
            let passed = r.passed(tol);
            println!(
                "seed {seed:<3} {:<24} rel err {:.3e}  ({} entries)  {}",
                r.name,
                r.report.max_rel_err,
                r.report.entries_checked,
                if passed { "PASS" } else { "FAIL" }
            );
            lines.push(GradLine {
                seed,
                name: r.name.clone(),
                max_rel_err: r.report.max_rel_err,
                worst_param: r.report.worst_param.clone(),
                worst_index: r.report.worst_index,
                entries_checked: r.report.entries_checked,
                passed,
            });
        }
        if first_failure.is_none() {
            first_failure = gradsuite::enforce(target, seed, &reports).err();
        }
    }
    let mut run = RunDir::create(&a.out.out, "gradcheck")?;
    run.write_json("gradcheck.json", &serde_json::json!({ "tolerance": tol, "checks": lines }))?;
    run.finish("gradcheck", a, Some(a.seed.first), args)?;
    match first_failure {
        None => {
            println!("all checks within {tol:e}");
            Ok(())
        }
        Some(e) => Err(e.into()),
    }
}

fn train_toy<T: Scalar>(a: &TrainArgs, args: &[OsString]) -> CmdResult {
    if a.epochs == 0 || a.batch_size == 0 || a.lr.is_nan() || a.lr < 0.0 {
        return Err(Failure::usage("--epochs and --batch-size must be positive and --lr non-negative"));
    }
    let cfg = build_litv2(litv2::backbone::Variant::Tiny);
    let data = train::gen_freq_dataset(a.seed, a.n)?;
    let params = train::init_params::<T>(&cfg, a.seed)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        seed: a.seed,
        target_accuracy: (!a.full).then_some(a.stop_at),
    };
    let out = train::train_toy(&cfg, params, &data, &tc, |s| {
        println!("epoch {:>3}  loss {:.6}  accuracy {:.4}", s.epoch, s.loss, s.accuracy);
    })?;
    if !out.never_updated.is_empty() {
        eprintln!("warning: never updated: {}", out.never_updated.join(", "));
    }
    let last = *out.history.last().expect("at least one epoch");
    let trained_accuracy = train::evaluate(&cfg, &out.params, &data)?;
    println!("accuracy of final weights {trained_accuracy:.4}");
    let mut run = RunDir::create(&a.out.out, "train-toy")?;
    run.write("history.csv", csv_bytes(|b| train::write_history_csv(b, &out.history))?)?;
    for p in save_checkpoint(run.path("checkpoint.json"), &cfg, &out.params)? {
        run.record(&p);
    }
    run.write_json(
        "summary.json",
        &serde_json::json!({
            "epochs_run": out.history.len(),
            "final_loss": last.loss,
            "final_accuracy": last.accuracy,
            "trained_accuracy": trained_accuracy,
            "never_updated": out.never_updated,
        }),
    )?;
    run.finish("train-toy", a, Some(a.seed), args)
}

#[derive(Serialize)]
struct BranchSummary {
    maps: usize,
    low: f64,
    high: f64,
    /// Mean over maps of each map's high-band share.
    high_share: f64,
    channels: Vec<usize>,
}

fn spectrum_cmd(a: &SpectrumArgs, args: &[OsString]) -> CmdResult {
    if a.samples == 0 || a.channels == 0 {
        return Err(Failure::usage("--samples and --channels must be positive"));
    }
    let (cfg, params) = load_checkpoint::<f64>(&a.ckpt)?;
    let data = train::gen_freq_dataset(a.seed, a.samples + a.samples % 2)?;
    let images: Vec<Tensor<f64>> = data.iter().take(a.samples).map(|s| s.image.clone()).collect();
    let outputs = spectrum::collect_branch_outputs(&cfg, &params, &images, a.stage)?;
    let branches: &[Branch] = match a.branch {
        BranchArg::Hifi => &[Branch::Hifi],
        BranchArg::Lofi => &[Branch::Lofi],
        BranchArg::Both => &[Branch::Hifi, Branch::Lofi],
    };
    let mut run = RunDir::create(&a.out.out, "spectrum")?;
    let mut summary = serde_json::Map::new();
    let mut radius_used = None;
    for &b in branches {
        let maps = outputs.get(b);
        let Some(first) = maps.first() else {
            return Err(Failure::usage(format!("stage {} has no {} branch", a.stage, b.name())));
        };
        let (h, w) = (first.shape()[0], first.shape()[1]);
        let radius = a.radius.unwrap_or_else(|| spectrum::default_radius(h, w));
        radius_used = Some(radius);
        let (mut low, mut high) = (0.0, 0.0);
        for m in maps {
            let e = spectrum::map_band_energy(m, radius)?;
            low += e.low;
            high += e.high;
        }
        let high_share = spectrum::mean_high_share(maps, Some(radius))?;
        let channels: Vec<usize> = spectrum::rank_channels(maps)?.into_iter().take(a.channels).collect();
        for &c in &channels {
            let map = spectrum::magnitude_map(maps, c)?;
            for p in spectrum::emit_map(&map, run.dir.join(b.name()), &c.to_string())? {
                run.record(&p);
            }
        }
        println!("{} high_share {high_share:.6} over {} maps", b.name(), maps.len());
        let s = BranchSummary { maps: maps.len(), low, high, high_share, channels };
        summary.insert(b.name().into(), serde_json::to_value(s).map_err(|e| Failure::io(e.to_string()))?);
    }
    summary.insert("stage".into(), a.stage.into());
    summary.insert("samples".into(), images.len().into());
    summary.insert("radius".into(), radius_used.into());
    run.write_json("summary.json", &summary)?;
    run.finish("spectrum", a, Some(a.seed), args)
}

fn export<T: Scalar>(a: &ExportArgs, args: &[OsString]) -> CmdResult {
    let data = train::gen_freq_dataset(a.seed, a.n)?;
    let side = train::IMAGE_SIZE;
    let per = side * side * 3;
    let images = Tensor::<T>::from_fn(&[a.n, side, side, 3], |i| T::c(data[i / per].image.data()[i % per]));
    let labels = Tensor::<T>::from_fn(&[a.n], |i| T::c(data[i].label as f64));
    let mut run = RunDir::create(&a.out.out, "export-dataset")?;
    for (name, t) in [("images.tnsr", &images), ("labels.tnsr", &labels)] {
        let path = run.path(name);
        io::save(&path, t)?;
        run.record(&path);
    }
    println!("{} samples written to {}", a.n, run.dir.display());
    run.finish("export-dataset", a, Some(a.seed), args)
}

fn replay(a: &ReplayArgs) -> CmdResult {
    let m = manifest::read(&a.manifest)?;
    let out = a.out.out.clone().unwrap_or_else(|| {
        a.manifest.parent().unwrap_or(Path::new(".")).join("replay")
    });
    let mut argv: Vec<OsString> = m.argv.iter().map(OsString::from).collect();
    if argv.first().is_some_and(|c| c == "replay") {
        return Err(Failure::usage("cannot replay a replay"));
    }
    argv.push("--out".into());
    argv.push(out.into_os_string());
    crate::run(argv)
}
