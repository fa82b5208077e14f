use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rego::checkpoint::ModelCheckpoint;
use rego::config::{CliConfig, ConfigLoader};
use rego::dataprep::{prepare_dataset, toy::write_scenery_set, Dataset};
use rego::generator::outpaint;
use rego::imageio::{save_rgb, tensor_to_rgb, ImageSample, Sketch};
use rego::metrics::{backend_from_id, evaluate};
use rego::service::{serve, IndexBundle, ServeConfig, NO_REFERENCE, SKETCH_THRESHOLD};
use rego::trainer::train;
use rego::{RegoError, Result};

#[derive(Parser, Debug)]
#[command(name = "rego", version, about = "Reference-guided image outpainting")]
#[command(after_long_help = after_help())]
struct Cli {
    /// TOML config file; see the defaults listed below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed (generator init, training sampling, embedder).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Debug-level diagnostics on standard error.
    #[arg(long, short, global = true)]
    verbose: bool,
    /// Config override `section.key=value`; repeatable, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

fn after_help() -> String {
    format!(
        "Config precedence: defaults < --config file < REGO__SECTION__KEY env vars < --set / flags.\n\
         Defaults:\n\n{}",
        CliConfig::defaults_toml()
    )
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resize, sketch and index a directory of images.
    PrepareData(PrepareArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Compute IS and FID of a checkpoint on a prepared dataset.
    Eval(EvalArgs),
    /// Outpaint a single left half.
    Infer(InferArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write a procedural scenery image set for smoke runs.
    MakeToy(ToyArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Directory of PNG/JPEG images.
    #[arg(long)]
    images: PathBuf,
    /// Output directory (images/, sketches/, index.json).
    #[arg(long)]
    out: PathBuf,
    /// Edge binarization threshold [default: prepare.threshold = 0.6].
    #[arg(long)]
    threshold: Option<f64>,
    /// Stored neighbors per image [default: prepare.k = 5].
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and train_log.ndjson.
    #[arg(long)]
    out: PathBuf,
    /// Training iterations [default: train.iterations = 200].
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared test-set directory.
    #[arg(long)]
    data: PathBuf,
    /// Prepared training directory to retrieve references from; without it
    /// each test image uses its nearest neighbor within the test set.
    #[arg(long)]
    references: Option<PathBuf>,
    /// Metric backend id [default: eval.backend = convnet10-f64-s0].
    #[arg(long)]
    backend: Option<String>,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Left half image, H x W/2.
    #[arg(long)]
    left: PathBuf,
    /// Right-half sketch (grayscale, binarized at 0.5); omitted means random outpainting.
    #[arg(long)]
    sketch: Option<PathBuf>,
    /// Reference image, either a full H x W image or its right half.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// index.json used to retrieve a reference when --reference is omitted.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Composite output PNG; the right half goes next to it as <stem>_right.png.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Checkpoint file [env: REGO_CHECKPOINT].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// index.json with an images/ directory beside it [env: REGO_INDEX].
    #[arg(long)]
    index: Option<PathBuf>,
    /// Listening port [env: REGO_PORT] [default: serve.port = 8080].
    #[arg(long)]
    port: Option<u16>,
}

#[derive(Args, Debug)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
}

fn load_config(cli: &Cli) -> Result<CliConfig> {
    let mut loader = ConfigLoader::new();
    if let Some(p) = &cli.config {
        loader = loader.file(p)?;
    }
    loader = loader.env(std::env::vars())?;
    for s in &cli.sets {
        loader = loader.set(s)?;
    }
    if let Some(seed) = cli.seed {
        for key in ["generator.seed", "train.seed", "prepare.seed"] {
            loader = loader.set(&format!("{key}={seed}"))?;
        }
    }
    match &cli.command {
        Command::PrepareData(a) => {
            if let Some(t) = a.threshold {
                loader = loader.set(&format!("prepare.threshold={t:?}"))?;
            }
            if let Some(k) = a.k {
                loader = loader.set(&format!("prepare.k={k}"))?;
            }
        }
        Command::Train(a) => {
            if let Some(n) = a.iterations {
                loader = loader.set(&format!("train.iterations={n}"))?;
            }
        }
        _ => {}
    }
    loader.finish()
}

fn load_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

fn right_half_name(out: &Path) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}_right.png"))
}

fn infer(a: &InferArgs) -> Result<()> {
    let ckpt = ModelCheckpoint::load(&a.checkpoint)?;
    let generator = ckpt.generator()?;
    let (h, w) = (generator.config().height, generator.config().width);
    let half = w / 2;
    let left_img = load_rgb(&a.left)?;
    if left_img.dimensions() != (half as u32, h as u32) {
        return Err(RegoError::Config(format!(
            "left image is {}x{}, the checkpoint expects {h}x{half}",
            left_img.height(),
            left_img.width()
        )));
    }
    let left = ImageSample::from_rgb("left", &left_img).pixels().clone();
    let sketch = match &a.sketch {
        Some(p) => {
            let g = image::open(p)?.to_luma8();
            if g.dimensions() != (half as u32, h as u32) {
                return Err(RegoError::Config(format!(
                    "sketch is {}x{}, the checkpoint expects {h}x{half}",
                    g.height(),
                    g.width()
                )));
            }
            Some(Sketch::from_gray(&g, SKETCH_THRESHOLD))
        }
        None => {
            log::info!("no sketch given: random outpainting with a zero sketch");
            None
        }
    };
    let (reference, reference_id) = match (&a.reference, &a.index) {
        (Some(p), _) => {
            let img = ImageSample::from_rgb(p.file_stem().unwrap_or_default().to_string_lossy(), &load_rgb(p)?);
            let right = match (img.height(), img.width()) {
                (rh, rw) if rh == h && rw == w => img.right_half()?,
                (rh, rw) if rh == h && rw == half => img.pixels().clone(),
                (rh, rw) => {
                    return Err(RegoError::Config(format!(
                        "reference is {rh}x{rw}, expected {h}x{w} or {h}x{half}"
                    )))
                }
            };
            (Some(right), img.id)
        }
        (None, Some(ix)) => {
            let bundle = IndexBundle::load(ix)?;
            let ranked = bundle.query_image(&left, bundle.index.len())?;
            match ranked.into_iter().find(|(id, _)| bundle.images.contains_key(id)) {
                Some((id, _)) => (Some(bundle.images[&id].right_half()?), id),
                None => (None, NO_REFERENCE.to_string()),
            }
        }
        (None, None) => (None, NO_REFERENCE.to_string()),
    };
    let out = outpaint(&generator, &ckpt.params, &left, sketch.as_ref(), reference.as_ref())?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| RegoError::io(dir, e))?;
    }
    save_rgb(&tensor_to_rgb(&out.composite), &a.out)?;
    let right_path = right_half_name(&a.out);
    save_rgb(&tensor_to_rgb(&out.right), &right_path)?;
    println!("reference_id_used: {reference_id}");
    println!("composite: {}", a.out.display());
    println!("right_half: {}", right_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::PrepareData(a) => {
            let ds = prepare_dataset(&a.images, &a.out, &cfg.prepare)?;
            println!("prepared {} images into {}", ds.len(), a.out.display());
        }
        Command::Train(a) => {
            let ds = Dataset::load(&a.data)?;
            let outcome = train(&ds, &cfg.model(), &cfg.train, Some(&a.out), |r| {
                if r.iter == 1 || r.iter % 10 == 0 {
                    log::info!(
                        "iter {:>5}  total_g {:.4}  recon {:.4}  adv {:.4}  style {:.4}  d_loss {:.4}",
                        r.iter,
                        r.total_g,
                        r.recon,
                        r.adv,
                        r.style,
                        r.d_loss
                    );
                }
            })?;
            println!(
                "trained {} iterations; best recon {:.5}; checkpoints in {}",
                outcome.log.len(),
                outcome.best_recon(),
                a.out.display()
            );
        }
        Command::Eval(a) => {
            let ckpt = ModelCheckpoint::load(&a.checkpoint)?;
            let ds = Dataset::load(&a.data)?;
            let backend = backend_from_id(a.backend.as_deref().unwrap_or(&cfg.eval.backend))?;
            let refs = match &a.references {
                Some(p) => Some(Dataset::load(p)?),
                None => None,
            };
            let report = evaluate(&ckpt, &ds, refs.as_ref(), backend.as_ref())?;
            let text = serde_json::to_string_pretty(&report)?;
            std::fs::write(&a.out, &text).map_err(|e| RegoError::io(&a.out, e))?;
            println!("{text}");
        }
        Command::Infer(a) => infer(&a)?,
        Command::Serve(a) => {
            // flag, then REGO_PORT, then the config value
            let mut sc = ServeConfig {
                checkpoint: a.checkpoint,
                index: a.index,
                port: a.port.unwrap_or(0),
            };
            if sc.port == 0 && std::env::var_os("REGO_PORT").is_none() {
                sc.port = cfg.serve.port;
            }
            let sc = sc.with_env()?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| RegoError::io("tokio runtime", e))?;
            rt.block_on(serve(sc))?;
        }
        Command::MakeToy(a) => {
            let seed = cli.seed.unwrap_or(0);
            write_scenery_set(&a.out, a.count, seed, a.height, a.width)?;
            println!("wrote {} images to {}", a.count, a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
