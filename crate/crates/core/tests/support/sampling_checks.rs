//! Measurements of the kernel-regression density used by the sampling tests
//! and the acceptance run.

use nrt_core::adaptive_sampling::{cell_centres, default_bandwidth, inverse_transform_sample, kernel_regress, SamplePdf};
use rand::Rng;

pub const NEAR: f64 = 2.0;
pub const FAR: f64 = 6.0;

pub fn uniform_depths(n: usize) -> Vec<f64> {
    cell_centres(NEAR, FAR, n)
}

/// Midpoint-rule integral of a density sampled at `m` cell centres.
pub fn integrate(density: &[f64]) -> f64 {
    density.iter().sum::<f64>() * (FAR - NEAR) / density.len() as f64
}

fn regress(w: &[f64]) -> SamplePdf {
    let n = w.len();
    kernel_regress(&uniform_depths(n), w, default_bandwidth(NEAR, FAR, n, 1.5), 4 * n, NEAR, FAR).unwrap()
}

/// Largest `|∫p − 1|` over random weights at several sample counts.
pub fn integration_error() -> f64 {
    let mut rng = nrt_kernel::rng(1);
    let mut worst: f64 = 0.0;
    for n in [2, 7, 32, 128] {
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pdf = regress(&w);
        worst = worst.max((integrate(&pdf.density) - 1.0).abs()).max((pdf.integral() - 1.0).abs());
    }
    worst
}

/// Half the weight at coarse sample 8 and half at 23 of 32.
pub fn two_spike_pdf() -> (SamplePdf, f64, f64) {
    let n = 32;
    let d = uniform_depths(n);
    let mut w = vec![0.0; n];
    w[8] = 0.5;
    w[23] = 0.5;
    (regress(&w), d[8], d[23])
}

/// Mass on either side of the midpoint between the spikes.
pub fn spike_masses() -> (f64, f64) {
    let (pdf, a, b) = two_spike_pdf();
    let split = 0.5 * (a + b);
    (pdf.mass_between(NEAR, split), pdf.mass_between(split, FAR))
}

/// Interior local maxima of the density.
pub fn peaks(pdf: &SamplePdf) -> Vec<usize> {
    (1..pdf.density.len() - 1)
        .filter(|&j| pdf.density[j] > pdf.density[j - 1] && pdf.density[j] >= pdf.density[j + 1])
        .collect()
}

pub fn skewed_pdf() -> SamplePdf {
    let w: Vec<f64> = (0..32).map(|i| if i == 20 { 1.0 } else { 0.02 + 0.01 * (i % 3) as f64 }).collect();
    regress(&w)
}

/// L1 distance between the histogram of `draws` stratified inverse-transform
/// draws and the cell masses of `pdf`.
pub fn draw_l1(pdf: &SamplePdf, draws: usize, seed: u64) -> f64 {
    let m = pdf.grid.len();
    let dx = pdf.cell_width();
    let mut rng = nrt_kernel::rng(seed);
    let samples = inverse_transform_sample(pdf, draws, Some(&mut rng));
    let mut hist = vec![0usize; m];
    for s in &samples {
        hist[(((s - NEAR) / dx) as usize).min(m - 1)] += 1;
    }
    hist.iter()
        .zip(&pdf.density)
        .map(|(&c, &p)| (c as f64 / draws as f64 - p * dx).abs())
        .sum()
}

/// Total variation of the regressed density and of the raw weight
/// histogram at the same resolution, for a spike plus 10% uniform noise.
pub fn noisy_spike_tv() -> (f64, f64) {
    let n = 32;
    let m = 4 * n;
    let mut rng = nrt_kernel::rng(9);
    let mut w: Vec<f64> = (0..n).map(|_| 0.1 * rng.gen::<f64>()).collect();
    w[12] += 1.0;
    let pdf = regress(&w);
    let total: f64 = w.iter().sum();
    let bin = (FAR - NEAR) / n as f64;
    let raw: Vec<f64> = (0..m).map(|j| w[j * n / m] / total / bin).collect();
    let tv = |p: &[f64]| p.windows(2).map(|x| (x[1] - x[0]).abs()).sum::<f64>();
    (pdf.total_variation(), tv(&raw))
}
