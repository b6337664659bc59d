use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use medvkan::data::{load_manifest, read_tensor, synth_dataset, write_dataset, write_tensor, AnyTensor, Dataset};
use medvkan::gradcheck::{run_suite, SuiteCase, SUITES};
use medvkan::kan::EfconvMode;
use medvkan::net::{ModelConfig, ParamCount};
use medvkan::scan::{selective_scan, ScanMode};
use medvkan::train::{TrainConfig, Trainer};
use medvkan::{Error, Tensor};

use crate::{Command, Output};

/// Trainable-parameter count of the reference MedVKAN configuration.
const REFERENCE_PARAMS: f64 = 51e6;
const SCAN_TOL: f64 = 1e-10;

#[derive(Debug)]
pub enum CliError {
    /// Bad input, failed check: exit 1.
    Invalid(String),
    /// Anything else: exit 2.
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

/// Errors from reading user-supplied files and configs are the caller's
/// fault; I/O failures on our own outputs are not.
fn input(e: Error) -> CliError {
    invalid(e)
}

fn seed_or_random(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        info!("no --seed given; using seed {s}");
        s
    })
}

fn write_result(out: &Output, value: &impl Serialize) -> Result<PathBuf> {
    std::fs::create_dir_all(&out.out).map_err(|e| internal(format!("{}: {e}", out.out.display())))?;
    let path = out.out.join("result.json");
    let text = serde_json::to_string_pretty(value).map_err(internal)?;
    std::fs::write(&path, text + "\n").map_err(|e| internal(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// Optional JSON run config: `{"model": …, "train": …}`, either key may be
/// missing.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn read_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if let Ok(model) = serde_json::from_str::<ModelConfig>(&text) {
        return Ok(RunConfig { model: Some(model), train: None });
    }
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON run config (`{"model": …, "train": …}`) or bare model config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model preset when the config has no model: full or tiny.
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    /// Continue from this checkpoint (its configs are used; flags still win).
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// none, conv3, conv5 or conv3x2.
    #[arg(long)]
    pub efconv_mode: Option<String>,
    /// Log every this many steps.
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Sequence length.
    #[arg(long = "L", default_value_t = 1024)]
    pub l: usize,
    /// Channels.
    #[arg(long = "D", default_value_t = 64)]
    pub d: usize,
    /// State size.
    #[arg(long = "N", default_value_t = 16)]
    pub n: usize,
    /// naive, blocked or both.
    #[arg(long, default_value = "both")]
    pub mode: String,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub output: Output,
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth { seed, n, size, classes, output } => synth(seed, n, size, classes, &output),
        Command::Train(args) => train(args),
        Command::Eval { checkpoint, manifest, tau, output } => eval(&checkpoint, &manifest, tau, &output),
        Command::Predict { checkpoint, image, labels, output } => predict(&checkpoint, &image, labels, &output),
        Command::Gradcheck { module, output } => gradcheck(&module, &output),
        Command::BenchScan(args) => bench_scan(args),
        Command::Params { config, preset, in_channels, classes, output } => {
            params(config.as_deref(), &preset, in_channels, classes, &output)
        }
    }
}

fn synth(seed: Option<u64>, n: usize, size: usize, classes: usize, out: &Output) -> Result<()> {
    let seed = seed_or_random(seed);
    if n == 0 {
        return Err(invalid("--n must be at least 1"));
    }
    let samples = synth_dataset(seed, n, size, classes).map_err(invalid)?;
    let data = Dataset::new(classes, samples).map_err(internal)?;
    let manifest = write_dataset(&out.out, &data, None).map_err(internal)?;
    println!("wrote {n} samples of {size}x{size} with {classes} classes to {}", out.out.display());
    write_result(
        out,
        &json!({"command": "synth", "seed": seed, "n": n, "size": size, "classes": classes, "manifest": manifest}),
    )?;
    Ok(())
}

fn load_data(manifest: &Path) -> Result<Dataset> {
    let (_, data) = load_manifest(manifest).map_err(input)?;
    Ok(data)
}

fn train(a: TrainArgs) -> Result<()> {
    let data = load_data(&a.manifest)?;
    let mut trainer = if let Some(path) = &a.resume {
        Trainer::<f32>::load(path).map_err(input)?
    } else {
        let run = match &a.config {
            Some(p) => read_run_config(p)?,
            None => RunConfig::default(),
        };
        let [c, ..] = data.image_shape() else { unreachable!("images are C×H×W") };
        let mut model = match run.model {
            Some(m) => m,
            None => ModelConfig::preset(&a.preset, *c, data.num_classes).map_err(invalid)?,
        };
        if let Some(mode) = &a.efconv_mode {
            model.efconv_mode = mode.parse::<EfconvMode>().map_err(invalid)?;
        }
        let from_file = run.train.is_some();
        let mut tc = run.train.unwrap_or_default();
        tc.seed = seed_or_random(a.seed.or(from_file.then_some(tc.seed)));
        override_train(&mut tc, &a);
        model.validate().map_err(invalid)?;
        Trainer::new(&model, &tc).map_err(invalid)?
    };
    if a.resume.is_some() {
        if a.efconv_mode.is_some() {
            return Err(invalid("--efconv-mode cannot change when resuming"));
        }
        let mut tc = trainer.state.train.clone();
        if let Some(s) = a.seed {
            tc.seed = s;
        }
        override_train(&mut tc, &a);
        tc.validate().map_err(invalid)?;
        trainer.state.train = tc;
    }
    trainer.check_dataset(&data).map_err(invalid)?;

    let tc = trainer.state.train.clone();
    let total = tc.total_steps(data.len());
    info!(
        "training {} samples, {} steps from step {}, seed {}",
        data.len(),
        total,
        trainer.step_count(),
        tc.seed
    );
    let every = a.log_every.max(1);
    let start = Instant::now();
    let log = trainer
        .run(&data, Some(&a.output.out), |step, loss, lr| {
            if (step + 1) % every == 0 || step + 1 == total {
                info!("step {:>6}/{total}  loss {loss:.5}  lr {lr:.3e}", step + 1);
            }
        })
        .map_err(internal)?;
    let checkpoint = log.checkpoints.last().cloned();
    println!(
        "trained {} steps in {:.1}s; final loss {}; checkpoint {}",
        log.losses.len(),
        start.elapsed().as_secs_f64(),
        log.losses.last().map_or("n/a".into(), |l| format!("{l:.5}")),
        checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string())
    );
    write_result(
        &a.output,
        &json!({
            "command": "train",
            "seed": tc.seed,
            "model": trainer.state.model,
            "train": tc,
            "start_step": log.start_step,
            "total_steps": log.total_steps,
            "losses": log.losses,
            "lrs": log.lrs,
            "checkpoints": log.checkpoints,
        }),
    )?;
    Ok(())
}

fn override_train(tc: &mut TrainConfig, a: &TrainArgs) {
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if a.max_steps.is_some() {
        tc.max_steps = a.max_steps;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.lr0 = v;
    }
    if let Some(v) = a.lr_min {
        tc.lr_min = v;
    }
    if let Some(v) = a.weight_decay {
        tc.weight_decay = v;
    }
    if let Some(v) = a.checkpoint_every {
        tc.checkpoint_every = v;
    }
    if a.clip_norm.is_some() {
        tc.clip_norm = a.clip_norm;
    }
}

fn eval(checkpoint: &Path, manifest: &Path, tau: f64, out: &Output) -> Result<()> {
    if !(tau >= 0.0) {
        return Err(invalid(format!("--tau must be non-negative, got {tau}")));
    }
    let data = load_data(manifest)?;
    let trainer = Trainer::<f32>::load(checkpoint).map_err(input)?;
    trainer.check_dataset(&data).map_err(invalid)?;
    let report = trainer.evaluate(&data, tau).map_err(internal)?;
    println!(
        "{} samples: foreground dice {:.4}, iou {:.4}, nsd@{tau} {:.4}, instance F1 {:.4}",
        report.sample_count, report.mean_foreground_dice, report.mean_foreground_iou, report.mean_foreground_nsd, report.instance_f1
    );
    write_result(out, &report)?;
    Ok(())
}

fn predict(checkpoint: &Path, image: &Path, labels: Option<PathBuf>, out: &Output) -> Result<()> {
    let trainer = Trainer::<f32>::load(checkpoint).map_err(input)?;
    let t = match read_tensor(image).map_err(input)? {
        AnyTensor::F32(t) => t,
        AnyTensor::F64(t) => t.cast(),
        other => return Err(invalid(format!("image must be f32 or f64, got {}", other.dtype().name()))),
    };
    let c = trainer.state.model.in_channels;
    let shape = match *t.shape() {
        [h, w] if c == 1 => vec![1, 1, h, w],
        [ch, h, w] => vec![1, ch, h, w],
        [b, ch, h, w] => vec![b, ch, h, w],
        _ => return Err(invalid(format!("image shape {:?} is not H×W, C×H×W or B×C×H×W", t.shape()))),
    };
    let batch = shape[0];
    let images: Tensor<f32> = t.into_reshape(shape).map_err(internal)?;
    let pred = trainer.predict(images).map_err(invalid)?;
    let mut u8s = pred.to_u8().map_err(internal)?;
    if batch == 1 {
        u8s = u8s.into_reshape(vec![pred.height(), pred.width()]).map_err(internal)?;
    }
    let path = labels.unwrap_or_else(|| out.out.join("labels.vkt"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| internal(format!("{}: {e}", dir.display())))?;
    }
    write_tensor(&path, &u8s).map_err(internal)?;
    let counts: Vec<usize> = (0..trainer.state.model.num_classes)
        .map(|k| pred.data().iter().filter(|&&v| v as usize == k).count())
        .collect();
    println!("wrote {} label map(s) to {}; pixels per class {counts:?}", batch, path.display());
    write_result(
        out,
        &json!({"command": "predict", "labels": path, "shape": u8s.shape(), "class_pixels": counts}),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct CaseJson {
    suite: &'static str,
    name: String,
    max_rel_err: f64,
    tolerance: f64,
    worst: Option<String>,
    passed: bool,
}

fn gradcheck(module: &str, out: &Output) -> Result<()> {
    let suites: Vec<&str> = match module {
        "all" => SUITES.to_vec(),
        m if SUITES.contains(&m) => vec![m],
        m => return Err(invalid(format!("unknown module {m:?}; expected all or one of {}", SUITES.join(", ")))),
    };
    let mut cases: Vec<SuiteCase> = Vec::new();
    for s in suites {
        let start = Instant::now();
        let found = run_suite(s).map_err(internal)?;
        for c in &found {
            println!(
                "{:<4} {:<7} {:<28} max rel err {:.3e} (tol {:.0e})",
                if c.passed() { "ok" } else { "FAIL" },
                c.suite,
                c.name,
                c.max_rel_err,
                c.tolerance
            );
        }
        info!("{s}: {} cases in {:.1}s", found.len(), start.elapsed().as_secs_f64());
        cases.extend(found);
    }
    let failed = cases.iter().filter(|c| !c.passed()).count();
    let json: Vec<CaseJson> = cases
        .into_iter()
        .map(|c| CaseJson {
            passed: c.passed(),
            suite: c.suite,
            name: c.name,
            max_rel_err: c.max_rel_err,
            tolerance: c.tolerance,
            worst: c.worst,
        })
        .collect();
    write_result(out, &json!({"command": "gradcheck", "module": module, "failed": failed, "cases": json}))?;
    if failed > 0 {
        return Err(invalid(format!("{failed} gradient checks exceeded tolerance")));
    }
    Ok(())
}

fn bench_scan(a: BenchArgs) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let modes: Vec<ScanMode> = match a.mode.as_str() {
        "both" => vec![ScanMode::Naive, ScanMode::Blocked],
        m => vec![m.parse().map_err(invalid)?],
    };
    if a.l == 0 || a.d == 0 || a.n == 0 || a.repeats == 0 {
        return Err(invalid("--L, --D, --N and --repeats must be positive"));
    }
    let seed = seed_or_random(a.seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: Vec<usize>, lo: f64, hi: f64| Tensor::<f64>::from_fn(shape, |_| rng.random_range(lo..=hi));
    let (l, d, n) = (a.l, a.d, a.n);
    let x = draw(vec![1, l, d], -1.0, 1.0);
    let delta = draw(vec![1, l, d], -4.0, 1.0).map(|v: f64| v.exp().ln_1p());
    let a_log = draw(vec![d, n], -1.0, 2.5);
    let b = draw(vec![1, l, n], -1.0, 1.0);
    let c = draw(vec![1, l, n], -1.0, 1.0);
    let skip = draw(vec![d], -1.0, 1.0);
    let run = |m: ScanMode| selective_scan(&x, &delta, &a_log, &b, &c, &skip, m).map_err(internal);

    let mut timings = serde_json::Map::new();
    for &m in &modes {
        let mut best = f64::INFINITY;
        for _ in 0..a.repeats {
            let t = Instant::now();
            run(m)?;
            best = best.min(t.elapsed().as_secs_f64());
        }
        let name = format!("{m:?}").to_lowercase();
        println!("{name:<8} L={l} D={d} N={n}: {:.3} ms (best of {})", best * 1e3, a.repeats);
        timings.insert(name, json!(best));
    }
    let diff = run(ScanMode::Blocked)?.max_abs_diff(&run(ScanMode::Naive)?).map_err(internal)?;
    println!("max |blocked − naive| = {diff:.3e} (tol {SCAN_TOL:.0e})");
    write_result(
        &a.output,
        &json!({"command": "bench-scan", "seed": seed, "L": l, "D": d, "N": n, "seconds": timings, "max_abs_diff": diff, "equivalent": diff <= SCAN_TOL}),
    )?;
    if !(diff <= SCAN_TOL) {
        return Err(internal(format!("blocked and naive scans diverge by {diff:e}")));
    }
    Ok(())
}

fn params(config: Option<&Path>, preset: &str, in_channels: usize, classes: usize, out: &Output) -> Result<()> {
    let cfg = match config {
        Some(p) => read_run_config(p)?
            .model
            .ok_or_else(|| invalid(format!("{} has no model config", p.display())))?,
        None => ModelConfig::preset(preset, in_channels, classes).map_err(invalid)?,
    };
    cfg.validate().map_err(invalid)?;
    let (_, store) = medvkan::net::MedVkan::init::<f32>(&cfg, 0).map_err(internal)?;
    let count = ParamCount::of_store(&store);
    for (module, n) in &count.breakdown {
        println!("{module:<14} {n:>12}");
    }
    println!("{:<14} {:>12}  ({:.2}M)", "total", count.total, count.total as f64 / 1e6);
    let ratio = count.total as f64 / REFERENCE_PARAMS;
    println!("reference      {:>12}  (51M; this config is {ratio:.2}x)", REFERENCE_PARAMS as u64);
    write_result(
        out,
        &json!({"command": "params", "model": cfg, "total": count.total, "breakdown": count.breakdown, "reference_total": REFERENCE_PARAMS as u64}),
    )?;
    Ok(())
}
