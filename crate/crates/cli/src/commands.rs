use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Context};
use log::info;
use polynet::algebra::{cascade, expand_module, expand_symbolic, module_form};
use polynet::builder::{
    deepen_interleave, load_checkpoint, lower, lower_module, lower_with, save_checkpoint, upgrade, BlockArch,
    CheckpointManifest, Lowering, Model,
};
use polynet::cost::{analyze as cost_of, count_params, rows_to_csv};
use polynet::data::{import_dataset, synth_dataset, AugmentConfig, Dataset, Split};
use polynet::dsl::render_network;
use polynet::eval::{evaluate, multicrop_eval, PoolingConfig};
use polynet::tensor::{check_gradients, forward, Mode, ParamStore, Precision, Scalar, Tensor};
use polynet::train::{train as run_training, Rescale, StochasticPathConfig, TrainConfig, TrainError, Trigger};
use polynet::{ModuleKind, NetworkConfig, OperatorExpr};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::support::{invalid, resolve_network, write_json, write_manifest, Classify, Failure, Outcome};
use crate::{
    AnalyzeArgs, DataArgs, EvalArgs, ExprArgs, GradcheckArgs, ParseArgs, SurgeryArgs, SweepArgs, TrainArgs,
};

macro_rules! by_precision {
    ($p:expr, $f:ident($($a:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($a),*),
            Precision::F64 => $f::<f64>($($a),*),
        }
    };
}

fn arch_of(s: &str) -> Outcome<BlockArch> {
    s.parse::<BlockArch>().with_context(|| format!("block descriptor '{s}'")).invalid()
}

fn lowering_of(s: &str) -> Outcome<Lowering> {
    match s {
        "naive" => Ok(Lowering::Naive),
        "cascaded" => Ok(Lowering::Cascaded),
        _ => Err(invalid(format!("unknown lowering '{s}' (naive or cascaded)"))),
    }
}

fn kind_of(s: &str) -> Outcome<ModuleKind> {
    s.parse::<ModuleKind>().with_context(|| format!("module kind '{s}'")).invalid()
}

fn split_of(s: &str) -> Outcome<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(invalid(format!("unknown split '{s}' (train or val)"))),
    }
}

fn trigger_of(s: &str) -> Outcome<Trigger> {
    let bad = || invalid(format!("bad trigger '{s}' (off, manual:N or auto:WINDOW,GAP)"));
    if s == "off" {
        return Ok(Trigger::Off);
    }
    if let Some(n) = s.strip_prefix("manual:") {
        return Ok(Trigger::Manual { at_iteration: n.parse().map_err(|_| bad())? });
    }
    if let Some(rest) = s.strip_prefix("auto:") {
        let (w, g) = rest.split_once(',').ok_or_else(bad)?;
        return Ok(Trigger::Auto { window: w.parse().map_err(|_| bad())?, min_gap: g.parse().map_err(|_| bad())? });
    }
    Err(bad())
}

fn rescale_of(s: &str) -> Outcome<Rescale> {
    match s {
        "none" => Ok(Rescale::None),
        "train" => Ok(Rescale::Train),
        "eval" => Ok(Rescale::Eval),
        _ => Err(invalid(format!("unknown rescale '{s}' (none, train or eval)"))),
    }
}

fn list_of<T: std::str::FromStr>(s: &str, what: &str) -> Outcome<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| invalid(format!("bad {what} '{p}' in '{s}'"))))
        .collect()
}

fn dataset(d: &DataArgs, size: usize) -> Outcome<Dataset> {
    match &d.data {
        Some(dir) => import_dataset(dir).with_context(|| format!("importing {}", dir.display())).invalid(),
        None => synth_dataset(d.images, d.classes, size, d.dataset_seed).context("synthetic dataset").invalid(),
    }
}

fn train_error(e: TrainError) -> Failure {
    match e {
        TrainError::NonFinite { .. } => Failure { code: crate::support::EXIT_NUMERIC, err: e.into() },
        other => Failure::from(anyhow::Error::from(other)),
    }
}

pub fn parse(a: &ParseArgs, argv: &[String]) -> Outcome {
    let cfg = resolve_network(&a.network)?;
    let canonical = render_network(&cfg);
    println!("{canonical}");
    println!("{:<6} {:>5} {:<10} {:>6} {:>10}", "stage", "index", "kind", "width", "resolution");
    for st in &cfg.stages {
        for (i, k) in st.modules.iter().enumerate() {
            println!("{:<6} {:>5} {:<10} {:>6} {:>10}", st.name, i, k.to_string(), st.width, st.resolution);
        }
    }
    println!("{} modules", cfg.module_count());
    if let Some(out) = &a.common.out {
        write_manifest(out, "parse", a.common.seed, a, argv)?;
        fs::write(out.join("canonical.txt"), canonical + "\n").invalid()?;
        write_json(&out.join("config.json"), &cfg)?;
    }
    Ok(())
}

pub fn expand(a: &ExprArgs, cascaded: bool, argv: &[String]) -> Outcome {
    let expr = match (&a.kind, &a.expr) {
        (Some(k), None) => expand_module(kind_of(k)?, a.beta).invalid()?,
        (None, Some(text)) => {
            let e: OperatorExpr = text.parse().with_context(|| format!("expression '{text}'")).invalid()?;
            module_form(&e).invalid()?.naive()
        }
        _ => return Err(invalid("give exactly one of --kind or --expr")),
    };
    let shown = if cascaded { cascade(&expr).invalid()? } else { expr.clone() };
    println!("{shown}");
    println!("expanded: {}", expand_symbolic(&expr));
    if let Some(out) = &a.common.out {
        let name = if cascaded { "rewrite" } else { "expand" };
        write_manifest(out, name, a.common.seed, a, argv)?;
        fs::write(out.join(format!("{name}.txt")), format!("{shown}\n")).invalid()?;
    }
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs, argv: &[String]) -> Outcome {
    let mut cfg = resolve_network(&a.network)?;
    if let Some(size) = a.input_size {
        cfg = cfg.with_input_size(size);
    }
    let model = lower_with::<f32>(&cfg, &arch_of(&a.arch)?, 1.0, a.common.seed, lowering_of(&a.lowering)?).invalid()?;
    let report = cost_of(&model).invalid()?;
    let text = match a.format.as_str() {
        "csv" => report.to_csv(),
        "json" => report.to_json(),
        f => return Err(invalid(format!("unknown format '{f}' (csv or json)"))),
    };
    print!("{text}");
    if !text.ends_with('\n') {
        println!();
    }
    if let Some(out) = &a.common.out {
        write_manifest(out, "analyze", a.common.seed, a, argv)?;
        fs::write(out.join(format!("cost.{}", a.format)), text).invalid()?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    config: String,
    arch: String,
    iterations: u64,
    params: u64,
    val_loss: f64,
    val_top1: f64,
    val_top5: f64,
    gates_enabled_at: Option<u64>,
    wall_ms: u64,
}

fn train_config(a: &TrainArgs, image_size: usize) -> Outcome<TrainConfig> {
    let mut tc = TrainConfig::desk(a.iters, a.common.seed);
    tc.batch_size = a.batch;
    if let Some(e) = a.eval_every {
        tc.eval_every = e;
    }
    if let Some(lr) = a.lr {
        tc.hp.base_lr = lr;
    }
    tc.stochastic = StochasticPathConfig {
        enabled: a.stochastic_paths,
        max_prob: a.max_prob,
        trigger: trigger_of(&a.trigger)?,
        rescale: rescale_of(&a.rescale)?,
    };
    tc.augment = a.augment.then(|| AugmentConfig::standard(image_size));
    tc.checkpoint_dir = a.common.out.as_ref().map(|o| o.join("checkpoints"));
    Ok(tc)
}

fn train_as<T: Scalar>(a: &TrainArgs, cfg: &NetworkConfig, arch: &BlockArch, ds: &Dataset, out: Option<&Path>) -> Outcome {
    let model = lower::<T>(cfg, arch, a.beta, a.common.seed).invalid()?;
    let tc = train_config(a, ds.size)?;
    info!("training {} for {} iterations", cfg, a.iters);
    let (model, history) = run_training(model, ds, &tc).map_err(train_error)?;
    let val = evaluate(&model, ds, &ds.indices(Split::Val), 64).invalid()?;
    let summary = TrainSummary {
        config: model.meta.config.to_string(),
        arch: arch.to_string(),
        iterations: model.meta.iteration,
        params: count_params(&model),
        val_loss: val.loss,
        val_top1: val.top1,
        val_top5: val.top5,
        gates_enabled_at: history.gates_enabled_at,
        wall_ms: history.wall_ms,
    };
    println!("{}", serde_json::to_string(&summary).invalid()?);
    if let Some(out) = out {
        let last = out.join("checkpoints").join("final");
        if !last.join("manifest.json").exists() {
            // a zero-iteration run never reaches the loop's own save
            save_checkpoint(&model, &last).invalid()?;
        }
        let f = fs::File::create(out.join("history.jsonl")).invalid()?;
        history.write_jsonl(std::io::BufWriter::new(f)).invalid()?;
        write_json(&out.join("summary.json"), &summary)?;
    }
    Ok(())
}

pub fn train(a: &TrainArgs, argv: &[String]) -> Outcome {
    let arch = arch_of(&a.arch)?;
    let ds = dataset(&a.data, a.input_size)?;
    let cfg = resolve_network(&a.network)?.with_input_size(ds.size).with_classes(ds.classes);
    if let Some(out) = &a.common.out {
        write_manifest(out, "train", a.common.seed, a, argv)?;
    }
    let precision = a.common.precision.unwrap_or(Precision::F32);
    by_precision!(precision, train_as(a, &cfg, &arch, &ds, a.common.out.as_deref()))
}

#[derive(Serialize)]
struct Protocol {
    scales: Vec<f64>,
    crops: usize,
    fraction: f64,
}

#[derive(Serialize)]
struct EvalReport {
    config: String,
    checkpoint: String,
    split: String,
    protocol: Protocol,
    top1: f64,
    top5: f64,
    n_images: usize,
    skipped_scales: Vec<f64>,
    wall_ms: u64,
}

fn eval_as<T: Scalar>(a: &EvalArgs, ds: &Dataset) -> Outcome<Vec<EvalReport>> {
    let model: Model<T> = load_checkpoint(&a.checkpoint).invalid()?;
    if ds.classes != model.meta.config.classes {
        return Err(invalid(format!("dataset has {} classes, model {}", ds.classes, model.meta.config.classes)));
    }
    let idx = ds.indices(split_of(&a.split)?);
    let report = |protocol, top1, top5, n_images, skipped_scales, t: Instant| EvalReport {
        config: model.meta.config.to_string(),
        checkpoint: a.checkpoint.display().to_string(),
        split: a.split.clone(),
        protocol,
        top1,
        top5,
        n_images,
        skipped_scales,
        wall_ms: t.elapsed().as_millis() as u64,
    };

    let t = Instant::now();
    let m = evaluate(&model, ds, &idx, 64).invalid()?;
    let single = report(Protocol { scales: vec![1.0], crops: 1, fraction: 1.0 }, m.top1, m.top5, m.n, vec![], t);

    let scales = match &a.scales {
        Some(s) => list_of::<f64>(s, "scale")?,
        None if !model.eval_scales().is_empty() => model.eval_scales(),
        None => PoolingConfig::default().scales,
    };
    let pooling = PoolingConfig { scales: scales.clone(), crops_per_scale: a.crops, top_fraction: a.fraction };
    let t = Instant::now();
    let r = multicrop_eval(&model, ds, &idx, &pooling).invalid()?;
    let protocol = Protocol { scales, crops: a.crops, fraction: a.fraction };
    let multi = report(protocol, r.top1, r.top5, r.n_images, r.skipped_scales, t);
    Ok(vec![single, multi])
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> Outcome {
    let manifest = CheckpointManifest::read(&a.checkpoint)
        .with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))
        .invalid()?;
    let ds = match &a.data.data {
        Some(_) => dataset(&a.data, manifest.input_size)?,
        None => synth_dataset(a.data.images, manifest.classes, manifest.input_size, a.data.dataset_seed).invalid()?,
    };
    let precision = a.common.precision.unwrap_or(manifest.precision);
    let reports = by_precision!(precision, eval_as(a, &ds))?;
    for r in &reports {
        println!("{}", serde_json::to_string(r).invalid()?);
    }
    if let Some(out) = &a.common.out {
        write_manifest(out, "eval", a.common.seed, a, argv)?;
        write_json(&out.join("single_crop.json"), &reports[0])?;
        write_json(&out.join("multi_crop.json"), &reports[1])?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRow {
    kind: String,
    max_rel_err: f64,
    worst: String,
    pass: bool,
}

fn jitter_biases(params: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    // zero biases can park a ReLU exactly on its kink
    for (_, name, p) in params.iter_mut() {
        if name.ends_with(".b") {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
}

pub fn gradcheck(a: &GradcheckArgs, argv: &[String]) -> Outcome {
    if a.common.precision == Some(Precision::F32) {
        return Err(invalid("gradient checks run in f64"));
    }
    if !(a.h > 0.0) || !(a.tol > 0.0) {
        return Err(invalid("--h and --tol must be positive"));
    }
    let kinds = match &a.kind {
        Some(k) => vec![kind_of(k)?],
        None => std::iter::once(ModuleKind::Ir).chain(ModuleKind::ablation_kinds()).collect(),
    };
    let arch = arch_of(&a.arch)?;
    let lowering = lowering_of(&a.lowering)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let mut rows = Vec::new();
    for kind in kinds {
        let mut m = lower_module::<f64>(kind, &arch, a.spatial, a.beta, lowering, a.common.seed).invalid()?;
        jitter_biases(&mut m.params, &mut rng);
        let batch = 3;
        let shape: Vec<usize> = std::iter::once(batch).chain(m.graph.input_shape().iter().copied()).collect();
        let data: Vec<f64> = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_f64(&shape, &data).invalid()?;
        let per_sample = data.len() / batch;
        let labels: Vec<usize> = (0..batch).map(|i| (i * 7) % per_sample).collect();
        let r = check_gradients(&m.graph, &m.params, &x, &labels, a.h).numeric()?;
        let pass = r.max_rel_err <= a.tol;
        println!("{:<8} {:.3e} {:<14} {}", kind.to_string(), r.max_rel_err, r.worst, if pass { "ok" } else { "FAIL" });
        rows.push(GradcheckRow { kind: kind.to_string(), max_rel_err: r.max_rel_err, worst: r.worst, pass });
    }
    if let Some(out) = &a.common.out {
        write_manifest(out, "gradcheck", a.common.seed, a, argv)?;
        write_json(&out.join("gradcheck.json"), &rows)?;
    }
    match rows.iter().filter(|r| !r.pass).count() {
        0 => Ok(()),
        n => Err(Failure {
            code: crate::support::EXIT_NUMERIC,
            err: anyhow!("{n} of {} kinds exceed tolerance {:e}", rows.len(), a.tol),
        }),
    }
}

#[derive(Serialize)]
struct SurgeryReport {
    source: String,
    result: String,
    params_before: u64,
    params_after: u64,
    modules_before: usize,
    modules_after: usize,
    /// Largest relative output change on a probe batch.
    max_rel_change: f64,
}

fn surgery_as<T: Scalar>(a: &SurgeryArgs, out: &Path) -> Outcome<SurgeryReport> {
    let model: Model<T> = load_checkpoint(&a.checkpoint).invalid()?;
    let src = &model.meta.config;
    let mut next = model.clone();
    if let Some(t) = &a.target {
        let width = src.stages.first().map_or(16, |s| s.width);
        let target = resolve_network(t)?.with_base_width(width).with_input_size(src.input_size).with_classes(src.classes);
        next = upgrade(&next, &target, a.zero_last, a.common.seed).invalid()?;
    }
    if let Some(counts) = &a.interleave {
        next = deepen_interleave(&next, &list_of::<usize>(counts, "count")?, a.zero_last, a.common.seed).invalid()?;
    }
    let probe = synth_dataset(8, src.classes, src.input_size, a.common.seed).invalid()?;
    let (x, _) = probe.batch::<T>(&(0..probe.len()).collect::<Vec<_>>());
    let (y0, _) = forward(&model.graph, &model.params, &x, Mode::Eval).invalid()?;
    let (y1, _) = forward(&next.graph, &next.params, &x, Mode::Eval).invalid()?;
    save_checkpoint(&next, &out.join("checkpoint")).invalid()?;
    Ok(SurgeryReport {
        source: src.to_string(),
        result: next.meta.config.to_string(),
        params_before: count_params(&model),
        params_after: count_params(&next),
        modules_before: model.modules.len(),
        modules_after: next.modules.len(),
        max_rel_change: y0.max_rel_diff(&y1),
    })
}

pub fn surgery(a: &SurgeryArgs, argv: &[String]) -> Outcome {
    if a.target.is_none() && a.interleave.is_none() {
        return Err(invalid("nothing to do: give --target and/or --interleave"));
    }
    let out = a.common.out.as_deref().ok_or_else(|| invalid("surgery needs --out"))?;
    let manifest = CheckpointManifest::read(&a.checkpoint)
        .with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))
        .invalid()?;
    write_manifest(out, "surgery", a.common.seed, a, argv)?;
    let precision = a.common.precision.unwrap_or(manifest.precision);
    let report = by_precision!(precision, surgery_as(a, out))?;
    println!("{}", serde_json::to_string(&report).invalid()?);
    write_json(&out.join("surgery.json"), &report)
}

#[derive(Serialize)]
struct SweepRow {
    label: String,
    config: String,
    params: u64,
    macs: u64,
    block_apps: u64,
    val_top1: f64,
    val_top5: f64,
}

fn sweep_as<T: Scalar>(a: &SweepArgs, grid: &[(String, NetworkConfig)], arch: &BlockArch, ds: &Dataset) -> Outcome<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (label, cfg) in grid {
        let model = lower::<T>(cfg, arch, 1.0, a.common.seed).invalid()?;
        let cost = cost_of(&model).invalid()?;
        let model = if a.iters > 0 {
            let tc = TrainConfig { batch_size: a.batch, ..TrainConfig::desk(a.iters, a.common.seed) };
            run_training(model, ds, &tc).map_err(train_error)?.0
        } else {
            model
        };
        let val = evaluate(&model, ds, &ds.indices(Split::Val), 64).invalid()?;
        info!("{label}: top-1 error {:.3}", val.top1);
        rows.push(SweepRow {
            label: label.clone(),
            config: cfg.to_string(),
            params: cost.params,
            macs: cost.macs,
            block_apps: cost.block_apps,
            val_top1: val.top1,
            val_top5: val.top5,
        });
    }
    Ok(rows)
}

pub fn sweep(a: &SweepArgs, argv: &[String]) -> Outcome {
    let arch = arch_of(&a.arch)?;
    let ds = dataset(&a.data, a.input_size)?;
    let base = resolve_network(&a.network)?.with_input_size(ds.size).with_classes(ds.classes);
    let mut grid = polynet::cost::ablation_grid(&base);
    if let Some(n) = a.limit {
        grid.truncate(n);
    }
    if let Some(out) = &a.common.out {
        write_manifest(out, "sweep", a.common.seed, a, argv)?;
    }
    let precision = a.common.precision.unwrap_or(Precision::F32);
    let rows = by_precision!(precision, sweep_as(a, &grid, &arch, &ds))?;
    let csv = rows_to_csv(&rows);
    print!("{csv}");
    if let Some(out) = &a.common.out {
        fs::write(out.join("sweep.csv"), csv).invalid()?;
    }
    Ok(())
}
