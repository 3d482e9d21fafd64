//! Analytic-vs-central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KernelError, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error of near-zero gradients.
    pub floor: f64,
    /// Check a seeded random subset of this many scalar entries.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-7,
            max_entries: None,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn max_entries(mut self, n: usize) -> Self {
        self.max_entries = Some(n);
        self
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<F>(store: &ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::inference();
    let l = loss_fn(&mut g, store)?;
    g.value(l).item()
}

/// Runs one forward/backward pass and returns the gradient of every
/// parameter. Existing accumulated gradients are discarded.
pub fn analytic_gradients<F>(store: &mut ParamStore, loss_fn: &mut F) -> Result<Vec<Tensor>>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss, store)?;
    let grads = store.iter().map(|(_, p)| p.grad.clone()).collect();
    store.zero_grad();
    Ok(grads)
}

/// Compares analytic gradients to central differences of `loss_fn`.
pub fn grad_check<F>(store: &mut ParamStore, mut loss_fn: F, opts: &GradCheckOptions) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &mut loss_fn)?;
    check_against(store, loss_fn, &analytic, opts)
}

/// Compares the supplied gradients (one tensor per parameter) with central
/// differences of `loss_fn`.
pub fn check_against<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    analytic: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let first = eval_loss(store, &mut loss_fn)?;
    let second = eval_loss(store, &mut loss_fn)?;
    if first.to_bits() != second.to_bits() {
        return Err(KernelError::NonDeterministic { first, second });
    }

    let sizes: Vec<usize> = store.iter().map(|(_, p)| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    match opts.max_entries {
        Some(n) if n < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut flat: Vec<usize> = sample(&mut rng, total, n).into_vec();
            flat.sort_unstable();
            let mut base = 0;
            let mut p = 0;
            for f in flat {
                while f >= base + sizes[p] {
                    base += sizes[p];
                    p += 1;
                }
                picks.push((p, f - base));
            }
        }
        _ => {
            for (p, &s) in sizes.iter().enumerate() {
                picks.extend((0..s).map(|i| (p, i)));
            }
        }
    }

    let mut per: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); sizes.len()];
    let h = opts.step;
    for &(p, i) in &picks {
        let id = ParamId(p);
        let orig = store.value(id).data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + h;
        let plus = eval_loss(store, &mut loss_fn)?;
        store.get_mut(id).value.data_mut()[i] = orig - h;
        let minus = eval_loss(store, &mut loss_fn)?;
        store.get_mut(id).value.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[p].data()[i], numeric, opts.floor);
        let e = &mut per[p];
        e.0 = e.0.max(err);
        e.1 += err;
        e.2 += 1;
    }

    let mut params = Vec::new();
    let (mut max, mut sum) = (0.0f64, 0.0);
    for (p, (pmax, psum, n)) in per.into_iter().enumerate() {
        if n == 0 {
            continue;
        }
        max = max.max(pmax);
        sum += psum;
        params.push(ParamReport {
            name: store.get(ParamId(p)).name.clone(),
            checked: n,
            max_rel_err: pmax,
            mean_rel_err: psum / n as f64,
        });
    }
    Ok(GradReport {
        params,
        checked: picks.len(),
        max_rel_err: max,
        mean_rel_err: if picks.is_empty() { 0.0 } else { sum / picks.len() as f64 },
        tolerance: opts.tolerance,
    })
}
