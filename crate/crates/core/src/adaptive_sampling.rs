//! Attention weights to refined sample depths.
//!
//! The per-sample weights `w_i` at depths `d_i` are smoothed by Nadaraya-Watson
//! regression with a Gaussian kernel on a dense grid of `M` cells covering
//! `[near, far]`. The estimate is treated as piecewise constant per cell,
//! renormalised to unit mass, and inverted for sampling.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::geometry::{ray_rng, Jitter, Ray, RaySamples, SamplePoints};

/// Depths closer than this are merged.
pub const MERGE_TOLERANCE: f64 = 1e-9;

/// Stream offset separating refined-sample draws from coarse jitter.
const FINE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// `exp(-((d - d_i) / h)² / 2) / (h √(2π))`.
pub fn gaussian_kernel(d: f64, d_i: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(invalid(format!("kernel bandwidth must be positive, got {h}")));
    }
    let z = (d - d_i) / h;
    Ok((-0.5 * z * z).exp() / (h * (2.0 * PI).sqrt()))
}

/// Default bandwidth: `factor` coarse bin widths.
pub fn default_bandwidth(near: f64, far: f64, coarse: usize, factor: f64) -> f64 {
    factor * (far - near) / coarse as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePdf {
    pub near: f64,
    pub far: f64,
    /// Cell centres.
    pub grid: Vec<f64>,
    /// Density per cell; `Σ density · Δ = 1`.
    pub density: Vec<f64>,
    /// Cumulative mass at the `M + 1` cell edges.
    pub cdf: Vec<f64>,
    pub bandwidth: f64,
    pub depths: Vec<f64>,
    pub weights: Vec<f64>,
    /// Set when the weights carried no mass and the density fell back to
    /// uniform.
    pub degenerate: bool,
}

impl SamplePdf {
    pub fn cell_width(&self) -> f64 {
        (self.far - self.near) / self.grid.len() as f64
    }

    pub fn edge(&self, j: usize) -> f64 {
        self.near + j as f64 * self.cell_width()
    }

    /// `∫ p` over `[near, far]`.
    pub fn integral(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell_width()
    }

    /// Interpolated CDF at depth `d`.
    pub fn cdf_at(&self, d: f64) -> f64 {
        let m = self.grid.len();
        let x = ((d - self.near) / self.cell_width()).clamp(0.0, m as f64);
        let j = (x.floor() as usize).min(m - 1);
        self.cdf[j] + (x - j as f64) * (self.cdf[j + 1] - self.cdf[j])
    }

    /// Probability mass in `[a, b]`.
    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        self.cdf_at(b) - self.cdf_at(a)
    }

    /// Depth at which the CDF reaches `u`, linear within each cell.
    pub fn inverse_cdf(&self, u: f64) -> f64 {
        let m = self.grid.len();
        let u = u.clamp(0.0, 1.0);
        // first edge whose cumulative mass exceeds u, restricted to cells with mass
        let j = self.cdf[1..].partition_point(|&c| c <= u).min(m - 1);
        let (c0, c1) = (self.cdf[j], self.cdf[j + 1]);
        let frac = if c1 > c0 { ((u - c0) / (c1 - c0)).clamp(0.0, 1.0) } else { 0.0 };
        (self.edge(j) + frac * self.cell_width()).clamp(self.near, self.far)
    }

    /// Total variation `Σ |p_{j+1} - p_j|`.
    pub fn total_variation(&self) -> f64 {
        self.density.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
    }
}

/// Cell centres of an `m`-cell grid over `[near, far]`.
pub fn cell_centres(near: f64, far: f64, m: usize) -> Vec<f64> {
    let dx = (far - near) / m as f64;
    (0..m).map(|j| near + (j as f64 + 0.5) * dx).collect()
}

/// Unnormalised Nadaraya-Watson estimate `Σ w_i K(d, d_i) / Σ K(d, d_i)` at
/// each point of `grid`.
pub fn nadaraya_watson(depths: &[f64], weights: &[f64], h: f64, grid: &[f64]) -> Result<Vec<f64>> {
    gaussian_kernel(0.0, 0.0, h)?;
    if depths.len() != weights.len() || depths.is_empty() {
        return Err(invalid(format!("{} depths vs {} weights", depths.len(), weights.len())));
    }
    Ok(grid
        .iter()
        .map(|&d| {
            // shared normalisation of K cancels; shift exponents for stability
            let e: Vec<f64> = depths.iter().map(|&di| -0.5 * ((d - di) / h).powi(2)).collect();
            let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let (mut num, mut den) = (0.0, 0.0);
            for (ei, wi) in e.iter().zip(weights) {
                let k = (ei - m).exp();
                num += wi * k;
                den += k;
            }
            num / den
        })
        .collect())
}

pub fn kernel_regress(depths: &[f64], weights: &[f64], h: f64, m: usize, near: f64, far: f64) -> Result<SamplePdf> {
    if m == 0 || !(far > near) {
        return Err(invalid(format!("bad density grid: {m} cells over [{near}, {far}]")));
    }
    if depths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("sample depths must be strictly increasing"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(invalid("weights must be finite and non-negative"));
    }
    let grid = cell_centres(near, far, m);
    let raw = nadaraya_watson(depths, weights, h, &grid)?;
    let dx = (far - near) / m as f64;
    let mass: f64 = raw.iter().map(|&p| p.max(0.0)).sum::<f64>() * dx;
    let degenerate = !(mass > 0.0);
    let density: Vec<f64> = if degenerate {
        log::warn!("all-zero sampling weights; falling back to a uniform density");
        vec![1.0 / (far - near); m]
    } else {
        raw.iter().map(|&p| p.max(0.0) / mass).collect()
    };
    let mut cdf = Vec::with_capacity(m + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &density {
        acc += p * dx;
        cdf.push(acc);
    }
    // remove accumulated round-off so the last edge is exactly one
    let total = acc;
    for c in cdf.iter_mut() {
        *c /= total;
    }
    cdf[m] = 1.0;
    Ok(SamplePdf {
        near,
        far,
        grid,
        density,
        cdf,
        bandwidth: h,
        depths: depths.to_vec(),
        weights: weights.to_vec(),
        degenerate,
    })
}

/// `count` depths by inverse-transform sampling. With `rng`, one uniform draw
/// per stratum `(j + ξ_j) / count`; otherwise stratum midpoints.
pub fn inverse_transform_sample(pdf: &SamplePdf, count: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    let n = count as f64;
    match rng {
        Some(rng) => (0..count)
            .map(|j| pdf.inverse_cdf((j as f64 + rng.gen::<f64>()) / n))
            .collect(),
        None => (0..count).map(|j| pdf.inverse_cdf((j as f64 + 0.5) / n)).collect(),
    }
}

/// Sorted union of two depth lists with near-duplicates collapsed.
pub fn merge_depths(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(all.len());
    for d in all {
        if out.last().is_none_or(|&l| d - l > MERGE_TOLERANCE) {
            out.push(d);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub coarse: usize,
    pub fine: usize,
    /// Bandwidth in coarse bin widths.
    pub bandwidth_factor: f64,
    /// Density cells per coarse sample.
    pub grid_factor: usize,
    /// Jitter coarse bins and stratify refined draws.
    pub stratified: bool,
    pub seed: u64,
    /// Global index of the first ray, keying the per-ray random streams.
    pub first_ray: u64,
}

/// One runner invocation over a subset of rays.
#[derive(Debug, Clone)]
pub struct StageRun<T> {
    /// Indices into the input ray list.
    pub rays: Vec<usize>,
    pub output: T,
}

#[derive(Debug, Clone)]
pub struct TwoStage<T> {
    pub coarse_samples: SamplePoints,
    pub coarse: T,
    pub coarse_weights: Vec<f64>,
    pub pdfs: Vec<SamplePdf>,
    pub fine_depths: Vec<Vec<f64>>,
    /// Merged, sorted, de-duplicated samples per ray.
    pub samples: SamplePoints,
    /// Second-stage runs, one per distinct merged sample count.
    pub refined: Vec<StageRun<T>>,
}

/// Uniform stage, density estimate, refined draws, then a second pass over
/// the merged samples. `run` receives the indices of the rays it processes
/// (all with equal sample counts) and returns its output together with the
/// flattened per-ray weights.
pub fn two_stage_sample<T>(
    rays: &[Ray],
    cfg: &SamplingConfig,
    mut run: impl FnMut(&[usize], &SamplePoints) -> Result<(T, Vec<f64>)>,
) -> Result<TwoStage<T>> {
    if cfg.coarse < 2 {
        return Err(invalid(format!("need at least 2 coarse samples, got {}", cfg.coarse)));
    }
    if rays.is_empty() {
        return Err(invalid("no rays to sample"));
    }
    let jitter = if cfg.stratified {
        Jitter::Seeded {
            seed: cfg.seed,
            first_ray: cfg.first_ray,
        }
    } else {
        Jitter::Off
    };
    let bundle = crate::geometry::RayBundle { rays: rays.to_vec() };
    let coarse_samples = crate::geometry::sample_uniform(&bundle, cfg.coarse, jitter)?;
    let all: Vec<usize> = (0..rays.len()).collect();
    let (coarse, coarse_weights) = run(&all, &coarse_samples)?;
    if coarse_weights.len() != rays.len() * cfg.coarse {
        return Err(invalid(format!("runner returned {} weights", coarse_weights.len())));
    }
    let mut pdfs = Vec::with_capacity(rays.len());
    let mut fine_depths = Vec::with_capacity(rays.len());
    let mut merged = Vec::with_capacity(rays.len());
    for (i, ray) in rays.iter().enumerate() {
        let d = &coarse_samples.rays[i].depths;
        let w = &coarse_weights[i * cfg.coarse..(i + 1) * cfg.coarse];
        let h = default_bandwidth(ray.near, ray.far, cfg.coarse, cfg.bandwidth_factor);
        let pdf = kernel_regress(d, w, h, cfg.grid_factor * cfg.coarse, ray.near, ray.far)?;
        let fine = if cfg.stratified {
            let mut rng = ray_rng(cfg.seed ^ FINE_STREAM, cfg.first_ray + i as u64);
            inverse_transform_sample(&pdf, cfg.fine, Some(&mut rng))
        } else {
            inverse_transform_sample(&pdf, cfg.fine, None)
        };
        merged.push(RaySamples::from_depths(ray, merge_depths(d, &fine)));
        pdfs.push(pdf);
        fine_depths.push(fine);
    }
    let samples = SamplePoints { rays: merged };
    let mut counts: Vec<usize> = samples.rays.iter().map(|r| r.len()).collect();
    counts.sort_unstable();
    counts.dedup();
    let mut refined = Vec::with_capacity(counts.len());
    for &n in counts.iter().rev() {
        let idx: Vec<usize> = (0..rays.len()).filter(|&i| samples.rays[i].len() == n).collect();
        let group = SamplePoints {
            rays: idx.iter().map(|&i| samples.rays[i].clone()).collect(),
        };
        let (output, _) = run(&idx, &group)?;
        refined.push(StageRun { rays: idx, output });
    }
    Ok(TwoStage {
        coarse_samples,
        coarse,
        coarse_weights,
        pdfs,
        fine_depths,
        samples,
        refined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_closed_forms() {
        let mode = 1.0 / (2.0 * PI).sqrt();
        assert!((gaussian_kernel(0.3, 0.3, 1.0).unwrap() - 0.3989422804014327).abs() < 1e-15);
        assert!((gaussian_kernel(1.0, 0.5, 0.5).unwrap() - 2.0 * mode * (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(gaussian_kernel(0.1, 0.7, 0.3).unwrap(), gaussian_kernel(0.7, 0.1, 0.3).unwrap());
        assert!(gaussian_kernel(0.0, 0.0, 0.0).is_err());
        assert!(gaussian_kernel(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn merge_sorts_and_collapses_near_duplicates() {
        let m = merge_depths(&[1.0, 2.0, 3.0], &[2.0 + 1e-12, 0.5, 2.5]);
        assert_eq!(m, vec![0.5, 1.0, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let pdf = kernel_regress(&[0.2, 0.5, 0.8], &[0.0; 3], 0.1, 12, 0.0, 1.0).unwrap();
        assert!(pdf.degenerate);
        assert!(pdf.density.iter().all(|&p| (p - 1.0).abs() < 1e-15));
    }

    #[test]
    fn spike_density_peaks_at_the_spike() {
        let depths: Vec<f64> = (0..16).map(|i| (i as f64 + 0.5) / 16.0).collect();
        let mut w = vec![0.0; 16];
        w[9] = 1.0;
        let pdf = kernel_regress(&depths, &w, 0.02, 64, 0.0, 1.0).unwrap();
        let arg = (0..64).max_by(|&a, &b| pdf.density[a].total_cmp(&pdf.density[b])).unwrap();
        assert!((pdf.grid[arg] - depths[9]).abs() <= pdf.cell_width());
    }

    #[test]
    fn inverse_cdf_is_monotone_and_hits_the_ends() {
        let pdf = kernel_regress(&[0.1, 0.4, 0.9], &[0.2, 0.5, 0.3], 0.1, 30, 0.0, 1.0).unwrap();
        assert_eq!(pdf.inverse_cdf(0.0), 0.0);
        assert!((pdf.inverse_cdf(1.0) - 1.0).abs() < 1e-12);
        let mut last = f64::NEG_INFINITY;
        for k in 0..=1000 {
            let d = pdf.inverse_cdf(k as f64 / 1000.0);
            assert!(d >= last);
            last = d;
        }
    }
}
