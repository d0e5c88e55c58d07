//! Command-line front end: synth, train, eval, extract, detect, bench.
//!
//! Every subcommand reads a `key = value` config file (`--config`) and applies
//! `--set key=value` overrides and named flags on top of it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use pyrapool::checkpoint;
use pyrapool::config::RunConfig;
use pyrapool::dataio::{
    generate_detection_corpus, generate_toy_dataset, read_image, write_detection_corpus, write_toy_dataset, DetectionCorpusConfig,
    Manifest, ToyConfig, DEFAULT_MEAN,
};
use pyrapool::detection::{
    evaluate_map, read_ground_truth, read_proposals, speed_bench, write_detections, BenchConfig, BenchMode, DetectorConfig,
    RegionConfig, TrainedDetector,
};
use pyrapool::inference::{full_image_representation, multi_view_windows, predict_crops, predict_views, ten_view_windows, ViewSet};
use pyrapool::netgraph::{shared, ParameterStore};
use pyrapool::spp::PyramidSpec;
use pyrapool::training::{train_with, TrainConfig};
use pyrapool::{write_atomic, Error, NetworkSpec, SharedParams, WindowRect};

#[derive(Parser)]
#[command(name = "pyrapool", version, about = "Spatial pyramid pooling networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded toy classification and detection corpora.
    Synth(Common),
    /// Train a classifier and write a checkpoint plus an epoch log.
    Train(Common),
    /// Accuracy of a checkpoint with single, ten or multi-view testing.
    Eval(Common),
    /// Full-image representations, one line per manifest entry.
    Extract(Common),
    /// Train per-class SVMs, detect on a corpus, optionally report mAP.
    Detect(Common),
    /// Time shared-feature against per-window extraction.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => 3,
            Error::CorruptCheckpoint(_) => 4,
            Error::CheckpointMismatch(_) => 5,
            Error::Parse { .. } | Error::InvalidArgument(_) | Error::Image { .. } | Error::LabelOutOfRange { .. } => 6,
            Error::NonFinite(_) => 7,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn missing(key: &str, path: &Path) -> Failure {
    Failure {
        code: 3,
        message: format!("missing input `{key}`: {} does not exist", path.display()),
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 6,
        message: message.into(),
    }
}

struct Ctx {
    cfg: RunConfig,
}

impl Ctx {
    fn build(common: &Common) -> CliResult<Self> {
        let mut cfg = match &common.config {
            Some(p) if !p.exists() => return Err(missing("config", p)),
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &common.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim());
        }
        if let Some(p) = &common.checkpoint {
            cfg.set("checkpoint", p.display().to_string());
        }
        if let Some(p) = &common.output {
            cfg.set("output", p.display().to_string());
        }
        if let Some(s) = common.seed {
            cfg.set("seed", s.to_string());
        }
        Ok(Ctx { cfg })
    }

    fn out_path(&self, key: &str) -> CliResult<PathBuf> {
        self.cfg
            .get(key)
            .map(PathBuf::from)
            .ok_or_else(|| usage(format!("config key `{key}` is required")))
    }

    fn in_path(&self, key: &str) -> CliResult<PathBuf> {
        let p = self.out_path(key)?;
        if !p.exists() {
            return Err(missing(key, &p));
        }
        Ok(p)
    }

    fn opt_in_path(&self, key: &str) -> CliResult<Option<PathBuf>> {
        match self.cfg.get(key) {
            None => Ok(None),
            Some(_) => self.in_path(key).map(Some),
        }
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        Ok(self.cfg.parsed_or(key, default)?)
    }

    fn list_or<T: std::str::FromStr>(&self, key: &str, default: Vec<T>) -> CliResult<Vec<T>> {
        Ok(self.cfg.list(key)?.unwrap_or(default))
    }

    fn seed(&self) -> CliResult<u64> {
        self.or("seed", 1)
    }

    fn mean(&self) -> CliResult<f32> {
        self.or("mean", DEFAULT_MEAN)
    }

    fn spec(&self) -> CliResult<Arc<NetworkSpec>> {
        let pyramid = match self.cfg.get("pyramid") {
            Some(p) => Some(PyramidSpec::parse(p)?),
            None => None,
        };
        let net = self.cfg.get("net").unwrap_or("toy");
        Ok(Arc::new(NetworkSpec::by_name(net, self.or("classes", 5)?, pyramid)?))
    }

    fn load_params(&self, spec: &NetworkSpec) -> CliResult<SharedParams> {
        Ok(shared(checkpoint::load(&self.in_path("checkpoint")?, spec)?))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    Ok(write_atomic(path, text.as_bytes())?)
}

fn cmd_synth(ctx: &Ctx) -> CliResult<String> {
    let dir = ctx.out_path("output")?;
    let toy = ToyConfig {
        seed: ctx.or("seed", ToyConfig::default().seed)?,
        train_per_class: ctx.or("train_per_class", ToyConfig::default().train_per_class)?,
        test_per_class: ctx.or("test_per_class", ToyConfig::default().test_per_class)?,
        ..ToyConfig::default()
    };
    let (train, test) = write_toy_dataset(&dir, &generate_toy_dataset(&toy)?)?;
    let base = DetectionCorpusConfig::default();
    let det_images = ctx.or("det_images", base.images)?;
    let det_train = DetectionCorpusConfig {
        seed: ctx.or("det_seed", base.seed)?,
        images: det_images,
        ..base.clone()
    };
    let det_test = DetectionCorpusConfig {
        seed: ctx.or("det_test_seed", base.seed + 1)?,
        images: ctx.or("det_test_images", det_images / 2)?,
        ..base
    };
    let a = write_detection_corpus(&dir, "det_train", &generate_detection_corpus(&det_train)?)?;
    let b = write_detection_corpus(&dir, "det_test", &generate_detection_corpus(&det_test)?)?;
    let mut s = String::new();
    for p in [train, test, a.0, a.1, a.2, b.0, b.1, b.2] {
        writeln!(s, "wrote {}", p.display()).unwrap();
    }
    Ok(s)
}

fn train_config(ctx: &Ctx) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        learning_rate: ctx.or("lr", d.learning_rate)?,
        momentum: ctx.or("momentum", d.momentum)?,
        batch_size: ctx.or("batch", d.batch_size)?,
        epochs: ctx.or("epochs", d.epochs)?,
        schedule: ctx.or("schedule", d.schedule)?,
        eval_size: ctx.or("eval_size", d.eval_size)?,
        seed: ctx.seed()?,
        init_std: ctx.or("init_std", d.init_std)?,
        mean: ctx.mean()?,
        flip: ctx.or("flip", d.flip)?,
        plateau_epochs: ctx.or("plateau_epochs", d.plateau_epochs)?,
        plateau_gain: ctx.or("plateau_gain", d.plateau_gain)?,
        max_decays: ctx.or("max_decays", d.max_decays)?,
    })
}

fn cmd_train(ctx: &Ctx) -> CliResult<String> {
    let spec = ctx.spec()?;
    let cfg = train_config(ctx)?;
    let train_set = Manifest::load(&ctx.in_path("train_manifest")?)?.load_labelled()?;
    let eval_set = match ctx.opt_in_path("test_manifest")? {
        Some(p) => Manifest::load(&p)?.load_labelled()?,
        None => Vec::new(),
    };
    let ckpt = ctx.out_path("checkpoint")?;
    let log_path = match ctx.cfg.get("log") {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(format!("{}.log", ckpt.display())),
    };
    let params = shared(ParameterStore::init(&spec, cfg.init_std, cfg.seed));
    let eval = if eval_set.is_empty() { &train_set } else { &eval_set };
    let reports = train_with(spec, &params, &train_set, eval, &cfg, |r, _| {
        eprintln!("{}", r.log_line());
        Ok(())
    })?;
    let mut log = String::new();
    for r in &reports {
        writeln!(log, "{}", r.log_line()).unwrap();
    }
    write_text(&log_path, &log)?;
    let store = params.read().map_err(|_| usage("parameter lock poisoned"))?;
    checkpoint::save(&ckpt, &store)?;
    Ok(format!("wrote {}\nwrote {}\n", ckpt.display(), log_path.display()))
}

fn centre_view(image_size: (usize, usize), s: usize, view: usize) -> CliResult<ViewSet> {
    let ten = ten_view_windows(image_size, s, view)?;
    Ok(ViewSet {
        views: vec![ten.views[0]],
    })
}

fn cmd_eval(ctx: &Ctx) -> CliResult<String> {
    let spec = ctx.spec()?;
    let params = ctx.load_params(&spec)?;
    let samples = Manifest::load(&ctx.in_path("manifest")?)?.load_labelled()?;
    let mode = ctx.cfg.get("mode").unwrap_or("single").to_string();
    let scales: Vec<usize> = ctx.list_or("scales", vec![32])?;
    let view: usize = ctx.or("view", 32)?;
    let path = ctx.cfg.get("path").unwrap_or("features").to_string();
    let mean = ctx.mean()?;
    if scales.is_empty() {
        return Err(usage("`scales` must list at least one scale"));
    }
    let mut correct = 0;
    let mut views_total = 0;
    let mut passes = 0;
    let mut lines = String::new();
    for (i, s) in samples.iter().enumerate() {
        let size = (s.image.width(), s.image.height());
        let views = match mode.as_str() {
            "single" => centre_view(size, scales[0], view)?,
            "ten" => ten_view_windows(size, scales[0], view)?,
            "multi" => multi_view_windows(size, &scales, view)?,
            other => return Err(usage(format!("unknown eval mode `{other}` (single, ten, multi)"))),
        };
        let pred = match path.as_str() {
            "features" => predict_views(&spec, &params, &s.image, &views, mean)?,
            "crops" => predict_crops(spec.clone(), &params, &s.image, &views, mean)?,
            other => return Err(usage(format!("unknown eval path `{other}` (features, crops)"))),
        };
        let guess = pred.argmax();
        if guess == s.label {
            correct += 1;
        }
        views_total += views.len();
        passes += pred.conv_passes;
        writeln!(lines, "{i} {} {guess}", s.label).unwrap();
    }
    let n = samples.len();
    let acc = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    let report = format!(
        "mode={mode} path={path} images={n} correct={correct} accuracy={acc:.6} views={views_total} conv_passes={passes}\n"
    );
    if let Some(out) = ctx.cfg.get("output") {
        write_text(Path::new(out), &format!("{report}# index label prediction\n{lines}"))?;
    }
    Ok(report)
}

fn cmd_extract(ctx: &Ctx) -> CliResult<String> {
    let spec = ctx.spec()?;
    let params = ctx.load_params(&spec)?;
    let manifest = Manifest::load(&ctx.in_path("manifest")?)?;
    let out = ctx.out_path("output")?;
    let scale: usize = ctx.or("scale", 32)?;
    let l2: bool = ctx.or("l2", false)?;
    let layer = ctx.cfg.get("layer").map(str::to_string);
    let mean = ctx.mean()?;
    let mut text = String::new();
    let mut dim = 0;
    for e in &manifest.entries {
        let img = read_image(&e.path)?;
        let v = full_image_representation(spec.clone(), &params, &img, scale, layer.as_deref(), l2, mean)?;
        dim = v.len();
        text.push_str(&e.path.display().to_string());
        for x in v {
            write!(text, " {x}").unwrap();
        }
        text.push('\n');
    }
    write_text(&out, &text)?;
    Ok(format!("wrote {} vectors of length {dim} to {}\n", manifest.entries.len(), out.display()))
}

fn detector_config(ctx: &Ctx, classes: usize) -> CliResult<DetectorConfig> {
    let d = DetectorConfig::toy(classes);
    let mut region = RegionConfig::new(ctx.list_or("scales", d.region.scales.clone())?, ctx.or("target_side", d.region.target_side)?);
    region.mean = ctx.mean()?;
    region.l2_normalize = ctx.or("l2", d.region.l2_normalize)?;
    let mut cfg = DetectorConfig::new(classes, region);
    cfg.nms_threshold = ctx.or("nms", d.nms_threshold)?;
    cfg.svm.c = ctx.or("svm_c", cfg.svm.c)?;
    cfg.svm.positive_weight = ctx.or("svm_positive_weight", cfg.svm.positive_weight)?;
    cfg.svm.hard_negative_rounds = ctx.or("hard_negative_rounds", cfg.svm.hard_negative_rounds)?;
    cfg.svm.initial_negatives = ctx.or("initial_negatives", cfg.svm.initial_negatives)?;
    cfg.svm.seed = ctx.seed()?;
    if !ctx.or("bbox", true)? {
        cfg.bbox = None;
    }
    Ok(cfg)
}

fn cmd_detect(ctx: &Ctx) -> CliResult<String> {
    let spec = ctx.spec()?;
    let params = ctx.load_params(&spec)?;
    let classes: usize = ctx.or("det_classes", 4)?;
    let cfg = detector_config(ctx, classes)?;
    let train_images = Manifest::load(&ctx.in_path("train_images")?)?.load_images()?;
    let train_gt = read_ground_truth(&ctx.in_path("train_gt")?)?;
    let train_props = read_proposals(&ctx.in_path("train_proposals")?)?;
    let images = Manifest::load(&ctx.in_path("images")?)?.load_images()?;
    let proposals = read_proposals(&ctx.in_path("proposals")?)?;
    let gt = match ctx.opt_in_path("gt")? {
        Some(p) => Some(read_ground_truth(&p)?),
        None => None,
    };
    let out = ctx.out_path("output")?;
    let detector = TrainedDetector::train(&spec, &params, &train_images, &train_gt, &train_props, &cfg)?;
    let regress = cfg.bbox.is_some();
    let dets = detector.detect_all(&spec, &params, &images, &proposals, regress)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    write_detections(&out, &dets)?;
    let mut msg = format!("wrote {} detections to {}\n", dets.len(), out.display());
    if let Some(gt) = gt {
        let report = evaluate_map(&dets, &gt, ctx.or("match_iou", 0.5)?);
        let text = report.to_string();
        if let Some(p) = ctx.cfg.get("report") {
            write_text(Path::new(p), &text)?;
        }
        msg.push_str(&text);
        if !text.ends_with('\n') {
            msg.push('\n');
        }
    }
    Ok(msg)
}

fn cmd_bench(ctx: &Ctx) -> CliResult<String> {
    let spec = ctx.spec()?;
    let params = match ctx.cfg.get("checkpoint") {
        Some(_) => ctx.load_params(&spec)?,
        None => shared(ParameterStore::init(&spec, ctx.or("init_std", 0.01)?, ctx.seed()?)),
    };
    let image = read_image(&ctx.in_path("image")?)?;
    let image_id: usize = ctx.or("image_id", 0)?;
    let mut windows: Vec<WindowRect> = read_proposals(&ctx.in_path("proposals")?)?
        .into_iter()
        .filter(|p| p.image_id == image_id)
        .map(|p| p.rect)
        .collect();
    if let Some(n) = ctx.cfg.parsed::<usize>("n")? {
        if n > windows.len() {
            return Err(usage(format!("n = {n} but only {} proposals for image {image_id}", windows.len())));
        }
        windows.truncate(n);
    }
    let d = BenchConfig::default();
    let modes: Vec<BenchMode> = ctx.list_or("modes", vec![BenchMode::Shared, BenchMode::PerWindow])?;
    let mut rows = Vec::new();
    for mode in modes {
        let cfg = BenchConfig {
            mode,
            scales: ctx.list_or("scales", d.scales.clone())?,
            target_side: ctx.or("target_side", d.target_side)?,
            warp_side: ctx.or("warp_side", d.warp_side)?,
            repeats: ctx.or("repeats", d.repeats)?,
            mean: ctx.mean()?,
        };
        if cfg.repeats < 5 {
            return Err(usage("benchmark needs at least 5 repetitions"));
        }
        rows.push(speed_bench(&spec, &params, &image, &windows, &cfg)?);
    }
    let mut s = String::from("mode proposals prep_s conv_s pool_s fc_s total_s\n");
    for r in &rows {
        let m = &r.median;
        writeln!(
            s,
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
            r.mode,
            r.proposals,
            m.prep,
            m.conv,
            m.pool,
            m.fc,
            m.total()
        )
        .unwrap();
    }
    let find = |mode| rows.iter().find(|r| r.mode == mode);
    if let (Some(a), Some(b)) = (find(BenchMode::Shared), find(BenchMode::PerWindow)) {
        writeln!(
            s,
            "ratio conv={:.3} total={:.3}",
            b.median.conv / a.median.conv,
            b.median.total() / a.median.total()
        )
        .unwrap();
    }
    if let Some(out) = ctx.cfg.get("output") {
        write_text(Path::new(out), &s)?;
    }
    Ok(s)
}

fn init_threads() -> CliResult<()> {
    let n = match std::env::var("PYRAPOOL_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("PYRAPOOL_THREADS must be a non-negative integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<String> {
    init_threads()?;
    match &cli.cmd {
        Command::Synth(c) => cmd_synth(&Ctx::build(c)?),
        Command::Train(c) => cmd_train(&Ctx::build(c)?),
        Command::Eval(c) => cmd_eval(&Ctx::build(c)?),
        Command::Extract(c) => cmd_extract(&Ctx::build(c)?),
        Command::Detect(c) => cmd_detect(&Ctx::build(c)?),
        Command::Bench(c) => cmd_bench(&Ctx::build(c)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
