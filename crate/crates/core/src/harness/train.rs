//! MSE training with Adam and an exponentially decaying learning rate.

use std::io::Write;
use std::path::PathBuf;

use nrt_kernel::{Graph, ParamStore, Tensor};
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{generate_rays, Ray};
use crate::harness::metrics::psnr_from_mse;
use crate::harness::scene::SyntheticScene;
use crate::pipeline::{select_source_views, Model, FEATURE_PREFIX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub rays_per_step: usize,
    pub lr_features: f64,
    pub lr_other: f64,
    /// The learning rate falls by this factor over `decay_steps`.
    pub decay_factor: f64,
    /// Defaults to the run length.
    pub decay_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Source-view pool multiplier `k`.
    pub pool_factor: f64,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            rays_per_step: 256,
            lr_features: 1e-3,
            lr_other: 5e-4,
            decay_factor: 0.1,
            decay_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            pool_factor: 1.0,
            seed: 0,
            checkpoint: None,
            metrics: None,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub mse: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub lr_features: f64,
    pub lr_other: f64,
    pub decay_factor: f64,
    pub decay_steps: usize,
    pub seed: u64,
    pub history: Vec<MetricRow>,
}

impl TrainState {
    /// `lr0 · factor^(step / decay_steps)`.
    pub fn learning_rates(&self, step: usize) -> (f64, f64) {
        let f = self.decay_factor.powf(step as f64 / self.decay_steps.max(1) as f64);
        (self.lr_features * f, self.lr_other * f)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("step,mse,psnr\n");
        for r in &self.history {
            s.push_str(&format!("{},{:.10e},{:.6}\n", r.step, r.mse, r.psnr));
        }
        s
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            beta1,
            beta2,
            epsilon,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update with a per-parameter learning rate.
    pub fn step(&mut self, store: &mut ParamStore, lr: impl Fn(&str) -> f64) {
        self.t += 1;
        let (c1, c2) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        for (i, p) in store.iter_mut().enumerate() {
            let a = lr(&p.name);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = p.grad.data();
            let x = p.value.data_mut();
            for j in 0..x.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                x[j] -= a * (m[j] / c1) / ((v[j] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Rays and colours of one training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub target: usize,
    pub rays: Vec<Ray>,
    pub colors: Tensor,
}

/// Draws a target training view and `count` distinct pixels from it.
pub fn sample_batch(scene: &SyntheticScene, count: usize, rng: &mut nrt_kernel::Rng) -> Result<Batch> {
    if scene.split.train.is_empty() {
        return Err(invalid("scene has no training views"));
    }
    let target = scene.split.train[rng.gen_range(0..scene.split.train.len())];
    let cam = &scene.cameras()[target];
    let (h, w) = (cam.height(), cam.width());
    let count = count.min(h * w);
    let mut idx = sample(rng, h * w, count).into_vec();
    idx.sort_unstable();
    let pixels: Vec<(f64, f64)> = idx.iter().map(|&i| ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5)).collect();
    let img = &scene.views[target].color;
    let colors: Vec<f64> = idx.iter().flat_map(|&i| img.pixel(i / w, i % w).to_vec()).collect();
    Ok(Batch {
        target,
        rays: generate_rays(cam, &pixels)?.rays,
        colors: Tensor::new(&[count, 3], colors)?,
    })
}

/// Loss of `model` on `batch`; returns the graph, loss and the MSE of the
/// final colours.
pub fn batch_loss(model: &Model, scene: &SyntheticScene, batch: &Batch, grad: bool, sampling_seed: u64, pool_rng: Option<&mut nrt_kernel::Rng>, pool_factor: f64) -> Result<(Graph, nrt_kernel::Var, f64)> {
    let sources = scene.source_set()?;
    let order = select_source_views(
        &scene.cameras()[batch.target],
        &sources.cameras,
        sources.len(),
        pool_factor,
        pool_rng,
    );
    let sources = sources.select(&order)?;
    let mut g = if grad { Graph::new() } else { Graph::inference() };
    let net = &model.net;
    let vars = net.encode_sources(&mut g, &model.store, &sources)?;
    let sampling = net.config.sampling(grad, sampling_seed, 0);
    let out = net.render_rays(&mut g, &model.store, &vars, &batch.rays, &sampling)?;
    let fine = g.mse(out.colors, &batch.colors, None)?;
    let mse = g.value(fine).item()?;
    let loss = match out.coarse_colors {
        Some(c) => {
            let coarse = g.mse(c, &batch.colors, None)?;
            g.add(fine, coarse)?
        }
        None => fine,
    };
    Ok((g, loss, mse))
}

fn diverged(model: &Model, cfg: &TrainConfig, step: usize) -> Error {
    if let Some(path) = &cfg.checkpoint {
        if let Err(e) = model.save(path) {
            log::error!("could not write last good checkpoint: {e}");
        }
    }
    Error::Diverged { step }
}

/// Trains `model` in place. The returned history holds the pre-update batch
/// MSE of every step.
pub fn train(model: &mut Model, scene: &SyntheticScene, cfg: &TrainConfig) -> Result<TrainState> {
    train_with(model, scene, cfg, |_, _| Ok(()))
}

/// [`train`] with a hook called after every optimizer step.
pub fn train_with(
    model: &mut Model,
    scene: &SyntheticScene,
    cfg: &TrainConfig,
    mut hook: impl FnMut(&Model, &MetricRow) -> Result<()>,
) -> Result<TrainState> {
    if cfg.rays_per_step == 0 {
        return Err(invalid("rays_per_step must be positive"));
    }
    if !(cfg.lr_features > 0.0 && cfg.lr_other > 0.0 && cfg.decay_factor > 0.0 && cfg.decay_factor <= 1.0) {
        return Err(invalid("learning rates must be positive and the decay factor in (0, 1]"));
    }
    let mut state = TrainState {
        step: 0,
        lr_features: cfg.lr_features,
        lr_other: cfg.lr_other,
        decay_factor: cfg.decay_factor,
        decay_steps: cfg.decay_steps.unwrap_or(cfg.steps).max(1),
        seed: cfg.seed,
        history: Vec::with_capacity(cfg.steps),
    };
    let mut adam = Adam::new(&model.store, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut rng = nrt_kernel::rng(cfg.seed);
    let mut metrics = match &cfg.metrics {
        Some(p) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
            writeln!(f, "step,mse,psnr")?;
            Some(f)
        }
        None => None,
    };
    for step in 0..cfg.steps {
        let batch = sample_batch(scene, cfg.rays_per_step, &mut rng)?;
        model.store.zero_grad();
        let seed = cfg.seed.wrapping_add(step as u64);
        let (g, loss, mse) = match batch_loss(model, scene, &batch, true, seed, Some(&mut rng), cfg.pool_factor) {
            Ok(x) => x,
            Err(Error::Kernel(nrt_kernel::KernelError::NonFinite { .. })) => return Err(diverged(model, cfg, step)),
            Err(e) => return Err(e),
        };
        if !mse.is_finite() {
            return Err(diverged(model, cfg, step));
        }
        g.backward(loss, &mut model.store)?;
        drop(g);
        if model.store.iter().any(|(_, p)| !p.grad.is_finite()) {
            return Err(diverged(model, cfg, step));
        }
        let (lf, lo) = state.learning_rates(step);
        adam.step(&mut model.store, |name| if name.starts_with(FEATURE_PREFIX) { lf } else { lo });
        let row = MetricRow {
            step,
            mse,
            psnr: psnr_from_mse(mse),
        };
        if let Some(f) = metrics.as_mut() {
            writeln!(f, "{},{:.10e},{:.6}", row.step, row.mse, row.psnr)?;
        }
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("step {step}: mse {:.6} psnr {:.2} dB", row.mse, row.psnr);
        }
        state.history.push(row);
        state.step = step + 1;
        hook(model, &row)?;
    }
    if let Some(mut f) = metrics {
        f.flush()?;
    }
    if let Some(path) = &cfg.checkpoint {
        model.save(path)?;
    }
    Ok(state)
}

/// Renders camera `index` of `scene` from the source views and compares it
/// with the ground truth.
pub fn evaluate_view(model: &Model, scene: &SyntheticScene, index: usize, chunk: usize) -> Result<ViewScore> {
    let cam = scene
        .cameras()
        .get(index)
        .ok_or_else(|| invalid(format!("no camera {index}")))?;
    let sources = scene.source_set()?;
    let order = select_source_views(cam, &sources.cameras, sources.len(), 1.0, None);
    let state = model.scene_state(&sources.select(&order)?)?;
    let image = model.render_image(&state, cam, chunk)?;
    let truth = &scene.views[index].color;
    Ok(ViewScore {
        index,
        mse: crate::harness::metrics::mse(&image.color, truth)?,
        psnr: crate::harness::metrics::psnr(&image.color, truth)?,
        ssim: crate::harness::metrics::ssim(&image.color, truth)?,
        image,
    })
}

#[derive(Debug, Clone)]
pub struct ViewScore {
    pub index: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub image: crate::pipeline::RenderedImage,
}
