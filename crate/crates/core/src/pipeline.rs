//! End-to-end renderer: features, scene encoding, two-stage sampling, per-ray
//! aggregation and the colour head.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nrt_kernel::{checkpoint, Graph, LayerNorm, Mlp, ParamStore, Rng, Tensor, Var};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive_sampling::{two_stage_sample, SamplePdf, SamplingConfig, TwoStage};
use crate::error::{invalid, Error, Result};
use crate::features::FeatureExtractor;
use crate::geometry::{generate_rays, pixel_centers, Camera, Ray, SamplePoints};
use crate::global_context::{GlobalContext, GlobalContextConfig, SceneRepresentation};
use crate::harness::io::Image;
use crate::local_geometry::{depth_encoding, gather_epipolar, LocalGeometry, LocalGeometryConfig, RayFeature, SourceViews};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_width: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_layers: usize,
    pub vl_blocks: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Kernel bandwidth in coarse bin widths.
    pub bandwidth_factor: f64,
    pub fourier_octaves: usize,
    pub block_size: usize,
    pub grid_size: usize,
    pub ff_mult: usize,
    /// Density cells per coarse sample.
    pub density_grid_factor: usize,
    pub reuse_view_features: bool,
    /// Also supervise the first-stage colour.
    pub supervise_coarse: bool,
    /// Colour of rays that no source view covers.
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::micro()
    }
}

impl ModelConfig {
    pub fn micro() -> Self {
        Self {
            embed_width: 32,
            heads: 4,
            encoder_blocks: 2,
            decoder_layers: 2,
            vl_blocks: 4,
            n_coarse: 32,
            n_fine: 16,
            bandwidth_factor: 1.5,
            fourier_octaves: 6,
            block_size: 2,
            grid_size: 2,
            ff_mult: 2,
            density_grid_factor: 4,
            reuse_view_features: false,
            supervise_coarse: false,
            background: [0.0; 3],
            seed: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            embed_width: 64,
            vl_blocks: 8,
            n_coarse: 128,
            n_fine: 64,
            ..Self::micro()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "full" => Ok(Self::full()),
            other => Err(invalid(format!("unknown profile {other:?} (expected micro or full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_width", self.embed_width),
            ("heads", self.heads),
            ("decoder_layers", self.decoder_layers),
            ("vl_blocks", self.vl_blocks),
            ("fourier_octaves", self.fourier_octaves),
            ("block_size", self.block_size),
            ("grid_size", self.grid_size),
            ("ff_mult", self.ff_mult),
            ("density_grid_factor", self.density_grid_factor),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{k} must be positive")));
        }
        if self.embed_width % self.heads != 0 {
            return Err(invalid(format!("embed_width {} not divisible by {} heads", self.embed_width, self.heads)));
        }
        if self.n_coarse < 2 {
            return Err(invalid("n_coarse must be at least 2"));
        }
        if !(self.bandwidth_factor > 0.0) {
            return Err(invalid("bandwidth_factor must be positive"));
        }
        Ok(())
    }

    /// Parses JSON (`.json`) or TOML (anything else).
    pub fn from_str_with_format(text: &str, json: bool) -> Result<Self> {
        let cfg: Self = if json {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text).map_err(|e| toml_error(text, &e))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let json = path.extension().is_some_and(|e| e == "json");
        Self::from_str_with_format(&text, json)
    }

    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::micro()) {
            Ok(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    /// Overrides one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut v = serde_json::to_value(&*self).map_err(|e| invalid(e.to_string()))?;
        let map = v.as_object_mut().expect("struct serialises to an object");
        if !map.contains_key(key) {
            return Err(invalid(format!("unknown config key {key:?}")));
        }
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.into()));
        map.insert(key.into(), parsed);
        let cfg: Self =
            serde_json::from_value(v).map_err(|e| invalid(format!("bad value {value:?} for {key}: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn global_config(&self) -> GlobalContextConfig {
        GlobalContextConfig {
            width: self.embed_width,
            heads: self.heads,
            encoder_blocks: self.encoder_blocks,
            decoder_layers: self.decoder_layers,
            block: self.block_size,
            grid: self.grid_size,
            octaves: self.fourier_octaves,
            ff_mult: self.ff_mult,
        }
    }

    pub fn local_config(&self) -> LocalGeometryConfig {
        LocalGeometryConfig {
            width: self.embed_width,
            heads: self.heads,
            blocks: self.vl_blocks,
            octaves: self.fourier_octaves,
            ff_mult: self.ff_mult,
            reuse_view_features: self.reuse_view_features,
        }
    }

    /// Sampling settings for rays starting at global index `first_ray`.
    pub fn sampling(&self, stratified: bool, seed: u64, first_ray: u64) -> SamplingConfig {
        SamplingConfig {
            coarse: self.n_coarse,
            fine: self.n_fine,
            bandwidth_factor: self.bandwidth_factor,
            grid_factor: self.density_grid_factor,
            stratified,
            seed,
            first_ray,
        }
    }
}

fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let (line, column) = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            (line, column)
        }
        None => (0, 0),
    };
    Error::Parse {
        line,
        column,
        message: e.message().to_string(),
    }
}

/// Posed source images: `images` is `N x H x W x 3` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SourceSet {
    pub cameras: Vec<Camera>,
    pub images: Tensor,
}

impl SourceSet {
    pub fn new(cameras: Vec<Camera>, images: &[Image]) -> Result<Self> {
        if cameras.is_empty() || cameras.len() != images.len() {
            return Err(invalid(format!("{} cameras vs {} images", cameras.len(), images.len())));
        }
        let (h, w) = (images[0].height, images[0].width);
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for (img, cam) in images.iter().zip(&cameras) {
            if (img.height, img.width, img.channels) != (h, w, 3) || (cam.height(), cam.width()) != (h, w) {
                return Err(invalid("source images and cameras must share one size"));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Self {
            images: Tensor::new(&[images.len(), h, w, 3], data)?,
            cameras,
        })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// The subset of views at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let s = self.images.shape();
        let per = s[1] * s[2] * 3;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut cameras = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(invalid(format!("view {i} out of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            cameras.push(self.cameras[i].clone());
        }
        Ok(Self {
            images: Tensor::new(&[indices.len(), s[1], s[2], 3], data)?,
            cameras,
        })
    }
}

/// Per-scene values recorded on one graph.
#[derive(Debug, Clone)]
pub struct SceneVars {
    pub cameras: Vec<Camera>,
    pub images: Var,
    pub quarter: Var,
    pub scene: SceneRepresentation,
}

/// Evaluated per-scene values, immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct SceneState {
    pub cameras: Vec<Camera>,
    pub images: Tensor,
    pub quarter: Tensor,
    pub tokens: Tensor,
}

impl SceneState {
    /// Records the state as constants on `g`.
    pub fn vars(&self, g: &mut Graph) -> SceneVars {
        let token_count = self.tokens.shape()[0];
        SceneVars {
            cameras: self.cameras.clone(),
            images: g.constant(self.images.clone()),
            quarter: g.constant(self.quarter.clone()),
            scene: SceneRepresentation {
                tokens: g.constant(self.tokens.clone()),
                views: self.cameras.len(),
                token_count,
            },
        }
    }
}

/// Per-ray outputs of a batch, in input order.
#[derive(Debug, Clone)]
pub struct RayBatch {
    /// `R x 3` sigmoid colours (background for uncovered rays).
    pub colors: Var,
    pub coarse_colors: Option<Var>,
    pub global: Var,
    pub depths: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub coarse_depths: Vec<Vec<f64>>,
    pub coarse_weights: Vec<Vec<f64>>,
    pub fine_depths: Vec<Vec<f64>>,
    pub pdfs: Vec<SamplePdf>,
    pub covered: Vec<bool>,
}

impl RayBatch {
    pub fn expected_depth(&self, i: usize) -> f64 {
        self.depths[i].iter().zip(&self.weights[i]).map(|(d, w)| d * w).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedRay {
    /// Raw colour head output.
    pub color: [f64; 3],
    pub depths: Vec<f64>,
    pub weights: Vec<f64>,
    pub expected_depth: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub color: Image,
    pub depth: Image,
    /// Per-pixel sum of the final sampling weights.
    pub weight_sum: Image,
}

/// Architecture handles; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub features: FeatureExtractor,
    pub global: GlobalContext,
    pub local: LocalGeometry,
    pub color_norm: LayerNorm,
    pub color: Mlp,
}

pub const FEATURE_PREFIX: &str = "features.";

impl Network {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.embed_width;
        Ok(Self {
            config: config.clone(),
            features: FeatureExtractor::new(store, "features", c, rng)?,
            global: GlobalContext::new(store, "global", config.global_config(), rng)?,
            local: LocalGeometry::new(store, "local", config.local_config(), rng)?,
            color_norm: LayerNorm::new(store, "color.norm", c),
            color: Mlp::new(store, "color.mlp", &[c, 2 * c, 2 * c, 3], rng),
        })
    }

    pub fn encode_sources(&self, g: &mut Graph, store: &ParamStore, sources: &SourceSet) -> Result<SceneVars> {
        let pyramid = self.features.extract(g, store, &sources.images)?;
        let scene = self.global.encode_scene(g, store, pyramid.eighth, &sources.cameras)?;
        Ok(SceneVars {
            cameras: sources.cameras.clone(),
            images: g.constant(sources.images.clone()),
            quarter: pyramid.quarter,
            scene,
        })
    }

    pub fn scene_state(&self, store: &ParamStore, sources: &SourceSet) -> Result<SceneState> {
        let mut g = Graph::inference();
        let v = self.encode_sources(&mut g, store, sources)?;
        Ok(SceneState {
            cameras: v.cameras,
            images: sources.images.clone(),
            quarter: g.value(v.quarter).clone(),
            tokens: g.value(v.scene.tokens).clone(),
        })
    }

    fn color_head(&self, g: &mut Graph, store: &ParamStore, feature: Var) -> Result<Var> {
        let n = self.color_norm.forward(g, store, feature)?;
        let y = self.color.forward(g, store, n)?;
        Ok(g.sigmoid(y)?)
    }

    fn with_background(&self, g: &mut Graph, colors: Var, covered: &[bool]) -> Result<Var> {
        if covered.iter().all(|&c| c) {
            return Ok(colors);
        }
        let keep: Vec<f64> = covered.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        let kept = g.scale_rows(colors, &keep)?;
        let bg = self.config.background;
        let fill = Tensor::from_fn(&[covered.len(), 3], |i| if covered[i / 3] { 0.0 } else { bg[i % 3] });
        let fill = g.constant(fill);
        Ok(g.add(kept, fill)?)
    }

    fn local_pass(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        views: &SourceViews,
        global: Var,
        rays: &[Ray],
        samples: &SamplePoints,
    ) -> Result<(RayFeature, Vec<bool>)> {
        let epi = gather_epipolar(g, samples, views)?;
        let enc = depth_encoding(rays, samples, self.config.fourier_octaves)?;
        let rf = self.local.run_blocks(g, store, global, &epi, &enc)?;
        let covered = epi.occluded.chunks(epi.samples).map(|c| c.iter().any(|&o| !o)).collect();
        Ok((rf, covered))
    }

    /// Single pass over caller-chosen samples (equal count per ray); returns
    /// the `R x 3` colours.
    pub fn render_samples(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scene: &SceneVars,
        rays: &[Ray],
        samples: &SamplePoints,
    ) -> Result<Var> {
        let emb = self.global.embed_rays(g, store, rays)?;
        let (global, _) = self.global.decode_global(g, store, emb, &scene.scene)?;
        let views = SourceViews {
            cameras: &scene.cameras,
            features: scene.quarter,
            images: scene.images,
        };
        let (rf, covered) = self.local_pass(g, store, &views, global, rays, samples)?;
        let colors = self.color_head(g, store, rf.feature)?;
        self.with_background(g, colors, &covered)
    }

    /// Renders a batch of rays against `scene`.
    pub fn render_rays(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scene: &SceneVars,
        rays: &[Ray],
        sampling: &SamplingConfig,
    ) -> Result<RayBatch> {
        let emb = self.global.embed_rays(g, store, rays)?;
        let (global, _) = self.global.decode_global(g, store, emb, &scene.scene)?;
        let views = SourceViews {
            cameras: &scene.cameras,
            features: scene.quarter,
            images: scene.images,
        };
        let r = rays.len();
        let ts: TwoStage<(RayFeature, Vec<bool>)> = two_stage_sample(rays, sampling, |idx, samples| {
            let sub: Vec<Ray> = idx.iter().map(|&i| rays[i]).collect();
            let fg = if idx.len() == r { global } else { g.gather_rows(global, idx)? };
            let out = self.local_pass(g, store, &views, fg, &sub, samples)?;
            let w = out.0.weights.clone();
            Ok((out, w))
        })?;

        let mut depths = vec![Vec::new(); r];
        let mut weights = vec![Vec::new(); r];
        let mut covered = vec![false; r];
        let mut order = Vec::with_capacity(r);
        let mut parts = Vec::with_capacity(ts.refined.len());
        for run in &ts.refined {
            let (rf, cov) = &run.output;
            let s = rf.weights.len() / run.rays.len();
            for (k, &i) in run.rays.iter().enumerate() {
                depths[i] = ts.samples.rays[i].depths.clone();
                weights[i] = rf.weights[k * s..(k + 1) * s].to_vec();
                covered[i] = cov[k];
                order.push(i);
            }
            parts.push(rf.feature);
        }
        let feature = if parts.len() == 1 && order.iter().enumerate().all(|(k, &i)| k == i) {
            parts[0]
        } else {
            let stacked = g.concat_rows(&parts)?;
            let mut inverse = vec![0; r];
            for (k, &i) in order.iter().enumerate() {
                inverse[i] = k;
            }
            g.gather_rows(stacked, &inverse)?
        };
        let colors = self.color_head(g, store, feature)?;
        let colors = self.with_background(g, colors, &covered)?;
        let coarse_colors = if self.config.supervise_coarse {
            let c = self.color_head(g, store, ts.coarse.0.feature)?;
            Some(self.with_background(g, c, &ts.coarse.1)?)
        } else {
            None
        };
        let n_c = sampling.coarse;
        Ok(RayBatch {
            colors,
            coarse_colors,
            global,
            depths,
            weights,
            coarse_depths: ts.coarse_samples.rays.iter().map(|x| x.depths.clone()).collect(),
            coarse_weights: ts.coarse_weights.chunks(n_c).map(<[f64]>::to_vec).collect(),
            fine_depths: ts.fine_depths,
            pdfs: ts.pdfs,
            covered,
        })
    }

    /// Renders rays in chunks of `chunk` on the worker pool. Evaluation mode:
    /// midpoint samples, so the result does not depend on `chunk`.
    pub fn render_ray_list(
        &self,
        store: &ParamStore,
        state: &SceneState,
        rays: &[Ray],
        chunk: usize,
    ) -> Result<Vec<RenderedRay>> {
        if chunk == 0 {
            return Err(invalid("chunk size must be at least 1"));
        }
        let chunks: Vec<Result<Vec<RenderedRay>>> = rays
            .par_chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                let mut g = Graph::inference();
                let vars = state.vars(&mut g);
                let sampling = self.config.sampling(false, self.config.seed, (ci * chunk) as u64);
                let b = self.render_rays(&mut g, store, &vars, part, &sampling)?;
                let colors = g.value(b.colors).data();
                Ok((0..part.len())
                    .map(|i| RenderedRay {
                        color: [colors[3 * i], colors[3 * i + 1], colors[3 * i + 2]],
                        expected_depth: b.expected_depth(i),
                        depths: b.depths[i].clone(),
                        weights: b.weights[i].clone(),
                        covered: b.covered[i],
                    })
                    .collect())
            })
            .collect();
        let mut out = Vec::with_capacity(rays.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn render_image(
        &self,
        store: &ParamStore,
        state: &SceneState,
        camera: &Camera,
        chunk: usize,
    ) -> Result<RenderedImage> {
        let (h, w) = (camera.height(), camera.width());
        let rays = generate_rays(camera, &pixel_centers(h, w))?.rays;
        let rendered = self.render_ray_list(store, state, &rays, chunk)?;
        let mut color = Image::filled(h, w, 3, 0.0);
        let mut depth = Image::filled(h, w, 1, 0.0);
        let mut weight_sum = Image::filled(h, w, 1, 0.0);
        for (i, r) in rendered.iter().enumerate() {
            let (row, col) = (i / w, i % w);
            for (k, v) in r.color.iter().enumerate() {
                color.pixel_mut(row, col)[k] = v.clamp(0.0, 1.0);
            }
            depth.pixel_mut(row, col)[0] = r.expected_depth;
            weight_sum.pixel_mut(row, col)[0] = r.weights.iter().sum();
        }
        Ok(RenderedImage {
            color,
            depth,
            weight_sum,
        })
    }
}

/// A network together with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
}

const MODEL_MAGIC: &[u8; 8] = b"NRTMODEL";

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = nrt_kernel::rng(config.seed);
        let net = Network::new(&mut store, config, &mut rng)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn scene_state(&self, sources: &SourceSet) -> Result<SceneState> {
        self.net.scene_state(&self.store, sources)
    }

    pub fn render_image(&self, state: &SceneState, camera: &Camera, chunk: usize) -> Result<RenderedImage> {
        self.net.render_image(&self.store, state, camera, chunk)
    }

    pub fn render_ray(&self, state: &SceneState, ray: &Ray) -> Result<RenderedRay> {
        Ok(self.net.render_ray_list(&self.store, state, std::slice::from_ref(ray), 1)?.remove(0))
    }

    /// Magic, JSON config, then the parameter checkpoint.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let cfg = serde_json::to_vec(&self.net.config).map_err(|e| invalid(e.to_string()))?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        checkpoint::write_checkpoint(&self.store, &mut w)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(invalid("not a model checkpoint"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut cfg = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut cfg)?;
        let config: ModelConfig = serde_json::from_slice(&cfg)?;
        let mut model = Self::new(&config)?;
        checkpoint::load_into(&mut model.store, &mut r)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// Proximity of `cam` to `target`: angle between optical axes (radians) plus
/// the camera-centre distance divided by `scale`.
pub fn view_distance(target: &Camera, cam: &Camera, scale: f64) -> f64 {
    let cos = target.optical_axis().dot(&cam.optical_axis()).clamp(-1.0, 1.0);
    let dist = (target.center() - cam.center()).norm();
    cos.acos() + if scale > 0.0 { dist / scale } else { 0.0 }
}

/// Candidates ranked by [`view_distance`], with distances normalised by the
/// largest candidate distance. Ties keep index order.
pub fn rank_views(target: &Camera, cameras: &[Camera]) -> Vec<usize> {
    let scale = cameras
        .iter()
        .map(|c| (target.center() - c.center()).norm())
        .fold(0.0, f64::max);
    let d: Vec<f64> = cameras.iter().map(|c| view_distance(target, c, scale)).collect();
    let mut idx: Vec<usize> = (0..cameras.len()).collect();
    idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    idx
}

/// Top `n` of the ranking, or, with `rng`, `n` drawn uniformly from the top
/// `ceil(k·n)` (returned in rank order).
pub fn select_source_views(target: &Camera, cameras: &[Camera], n: usize, k: f64, rng: Option<&mut Rng>) -> Vec<usize> {
    let ranked = rank_views(target, cameras);
    if ranked.len() <= n {
        if ranked.len() < n {
            log::warn!("only {} candidate views for {n} requested", ranked.len());
        }
        return ranked;
    }
    match rng {
        None => ranked[..n].to_vec(),
        Some(rng) => {
            let pool = ((k.max(1.0) * n as f64).ceil() as usize).min(ranked.len());
            let mut pos: Vec<usize> = (0..pool).collect();
            pos.shuffle(rng);
            let mut chosen = pos[..n].to_vec();
            chosen.sort_unstable();
            chosen.into_iter().map(|p| ranked[p]).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_overrides_and_validation() {
        let mut c = ModelConfig::micro();
        c.set("n_fine", "8").unwrap();
        assert_eq!(c.n_fine, 8);
        c.set("reuse_view_features", "true").unwrap();
        assert!(c.reuse_view_features);
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("heads", "5").is_err());
        assert!(c.set("heads", "four").is_err());
        assert_eq!(c.heads, 4);
    }

    #[test]
    fn toml_and_json_configs() {
        let c = ModelConfig::from_str_with_format("embed_width = 16\nheads = 2\n", false).unwrap();
        assert_eq!((c.embed_width, c.heads, c.n_coarse), (16, 2, 32));
        let c = ModelConfig::from_str_with_format(r#"{"vl_blocks": 8}"#, true).unwrap();
        assert_eq!(c.vl_blocks, 8);
        let err = ModelConfig::from_str_with_format("heads = 2\nbogus = 1\n", false).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
    }
}
