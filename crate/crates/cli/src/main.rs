use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nrt_core::geometry::{pixel_centers, Camera};
use nrt_core::harness::probe::{attention_csv, pdf_csv, probe};
use nrt_core::harness::scene::{bundled_scene, make_scene, SceneSpec, SyntheticScene};
use nrt_core::harness::train::{evaluate_view, train_with, TrainConfig};
use nrt_core::harness::verify::run_all;
use nrt_core::pipeline::{select_source_views, Model, ModelConfig};
use nrt_core::sparse_attention::{cost_model, cost_model_full, CostConfig};
use nrt_core::{Error, Result};

#[derive(Parser)]
#[command(name = "nrt", version, about = "Sparse-attention neural rendering transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ray-trace a scene spec and write its views, depths and cameras.
    MakeScene {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a synthetic scene.
    Train(TrainArgs),
    /// Render one camera with a trained model.
    Render(RenderArgs),
    /// PSNR and SSIM of a trained model on held-out views.
    Eval {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Views to score; defaults to the held-out split.
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        chunk: usize,
    },
    /// Print the attention cost breakdown as CSV.
    BenchAttn(BenchArgs),
    /// Run the invariant and oracle checks.
    Verify {
        #[command(flatten)]
        scene: SceneArgs,
        /// Checked model; a freshly initialised one when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write sampling densities of probed rays as CSV.
    DumpPdf(ProbeArgs),
    /// Write ray and decoder attention weights of probed rays as CSV.
    DumpAttn(ProbeArgs),
}

#[derive(Args)]
struct SceneArgs {
    /// Scene spec JSON; the bundled plane and sphere scene when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
}

impl SceneArgs {
    fn load(&self) -> Result<SyntheticScene> {
        match &self.scene {
            Some(p) => make_scene(SceneSpec::load(p)?),
            None => bundled_scene(),
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// `micro` or `full`.
    #[arg(long, default_value = "micro")]
    profile: String,
    /// TOML or JSON model config; replaces the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ModelArgs {
    fn build(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::from_file(p)?,
            None => ModelConfig::profile(&self.profile)?,
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("override {kv:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long)]
    rays: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "model.nrt")]
    checkpoint: PathBuf,
    #[arg(long, default_value = "metrics.csv")]
    metrics: PathBuf,
    /// Score the held-out views every this many steps (0: never).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Camera index into the scene, or a camera JSON file.
    #[arg(long, default_value = "0")]
    camera: String,
    #[arg(long)]
    out: PathBuf,
    /// Raw float dump of the colours.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Raw float dump of the expected depth.
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    chunk: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long = "H", default_value_t = 32)]
    height: usize,
    #[arg(long = "W", default_value_t = 32)]
    width: usize,
    #[arg(long = "C", default_value_t = 64)]
    channels: usize,
    #[arg(long = "N", default_value_t = 3)]
    views: usize,
    #[arg(long = "P", default_value_t = 8)]
    block: usize,
    #[arg(long = "G", default_value_t = 8)]
    grid: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 2)]
    ff_mult: usize,
    /// Cost of full attention over all tokens instead.
    #[arg(long)]
    full: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "0")]
    camera: String,
    /// Pixel as `row,col` (pixel centres are at +0.5), repeatable.
    #[arg(long = "pixel", value_name = "ROW,COL", required = true)]
    pixels: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn camera_arg(scene: &SyntheticScene, arg: &str) -> Result<Camera> {
    if let Ok(i) = arg.parse::<usize>() {
        return scene
            .cameras()
            .get(i)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("scene has {} cameras, no index {i}", scene.cameras().len())));
    }
    let text = std::fs::read_to_string(arg)?;
    Ok(serde_json::from_str(&text)?)
}

fn pixel_arg(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::InvalidInput(format!("pixel {s:?} is not row,col"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sources_for(scene: &SyntheticScene, camera: &Camera) -> Result<nrt_core::pipeline::SourceSet> {
    let sources = scene.source_set()?;
    let order = select_source_views(camera, &sources.cameras, sources.len(), 1.0, None);
    sources.select(&order)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::MakeScene { spec, out } => {
            let scene = match spec {
                Some(p) => make_scene(SceneSpec::load(&p)?)?,
                None => bundled_scene()?,
            };
            scene.write_dir(&out)?;
            println!("wrote {} views to {}", scene.views.len(), out.display());
        }
        Command::Train(a) => {
            let scene = a.scene.load()?;
            let mut model = match &a.resume {
                Some(p) => Model::load(p)?,
                None => Model::new(&a.model.build()?)?,
            };
            let defaults = TrainConfig::default();
            let cfg = TrainConfig {
                steps: a.steps,
                rays_per_step: a.rays.unwrap_or(defaults.rays_per_step),
                seed: a.seed,
                checkpoint: Some(a.checkpoint.clone()),
                metrics: Some(a.metrics.clone()),
                ..defaults
            };
            let test = scene.split.test.clone();
            let state = train_with(&mut model, &scene, &cfg, |m, row| {
                if a.eval_every > 0 && (row.step + 1) % a.eval_every == 0 {
                    for &i in &test {
                        let s = evaluate_view(m, &scene, i, 256)?;
                        log::info!("step {}: view {i} psnr {:.2} dB ssim {:.4}", row.step + 1, s.psnr, s.ssim);
                    }
                }
                Ok(())
            })?;
            if let (Some(first), Some(last)) = (state.history.first(), state.history.last()) {
                println!(
                    "trained {} steps: mse {:.6} -> {:.6}; checkpoint {}",
                    state.step,
                    first.mse,
                    last.mse,
                    a.checkpoint.display()
                );
            } else {
                println!("no steps run; checkpoint {}", a.checkpoint.display());
            }
        }
        Command::Render(a) => {
            let scene = a.scene.load()?;
            let model = Model::load(&a.checkpoint)?;
            let cam = camera_arg(&scene, &a.camera)?;
            let state = model.scene_state(&sources_for(&scene, &cam)?)?;
            let img = model.render_image(&state, &cam, a.chunk)?;
            img.color.write_png(&a.out)?;
            if let Some(p) = &a.raw {
                img.color.write_raw(p)?;
            }
            if let Some(p) = &a.depth {
                img.depth.write_raw(p)?;
            }
            println!("rendered {}x{} to {}", cam.height(), cam.width(), a.out.display());
        }
        Command::Eval {
            scene,
            checkpoint,
            views,
            chunk,
        } => {
            let scene = scene.load()?;
            let model = Model::load(&checkpoint)?;
            let views = if views.is_empty() { scene.split.test.clone() } else { views };
            println!("view,psnr,ssim");
            for i in views {
                let s = evaluate_view(&model, &scene, i, chunk)?;
                println!("{i},{:.4},{:.5}", s.psnr, s.ssim);
            }
        }
        Command::BenchAttn(a) => {
            let cfg = CostConfig {
                height: a.height,
                width: a.width,
                channels: a.channels,
                views: a.views,
                block: a.block,
                grid: a.grid,
                heads: a.heads,
                blocks: a.blocks,
                ff_mult: a.ff_mult,
            };
            let report = if a.full { cost_model_full(&cfg)? } else { cost_model(&cfg)? };
            print!("{}", report.to_csv());
        }
        Command::Verify {
            scene,
            checkpoint,
            model,
        } => {
            let scene = scene.load()?;
            let model = match checkpoint {
                Some(p) => Model::load(&p)?,
                None => Model::new(&model.build()?)?,
            };
            let checks = run_all(&model, &scene);
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} passed, {failed} failed", checks.len() - failed);
            return Ok(failed == 0);
        }
        Command::DumpPdf(a) => {
            let (probes, out) = probe_args(&a)?;
            write_or_print(out, &pdf_csv(&probes))?;
        }
        Command::DumpAttn(a) => {
            let (probes, out) = probe_args(&a)?;
            write_or_print(out, &attention_csv(&probes))?;
        }
    }
    Ok(true)
}

fn probe_args(a: &ProbeArgs) -> Result<(Vec<nrt_core::harness::probe::Probe>, Option<&Path>)> {
    let scene = a.scene.load()?;
    let model = Model::load(&a.checkpoint)?;
    let cam = camera_arg(&scene, &a.camera)?;
    let pixels = if a.pixels.iter().any(|p| p == "all") {
        pixel_centers(cam.height(), cam.width())
    } else {
        a.pixels.iter().map(|p| pixel_arg(p)).collect::<Result<_>>()?
    };
    let probes = probe(&model, &sources_for(&scene, &cam)?, &cam, &pixels)?;
    Ok((probes, a.out.as_deref()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
