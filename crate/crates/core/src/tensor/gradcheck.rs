//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{dim_err, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Coordinates sampled per tensor (all of them if the tensor is smaller).
    pub samples_per_tensor: usize,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error. Central differences
    /// at h=1e-5 carry ~1e-10 of rounding noise on O(1) losses.
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            samples_per_tensor: 20,
            denom_floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn coords_checked(&self) -> usize {
        self.tensors.iter().map(|t| t.coords).sum()
    }
}

pub(crate) fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    if g.value(loss).numel() != 1 {
        return Err(dim_err("grad_check: function must return a scalar"));
    }
    Ok(g.data(loss)[0])
}

/// Compares reverse-mode gradients of the scalar `f` against
/// `(f(x+h) − f(x−h)) / 2h` on sampled coordinates of each tensor in `params`.
/// The store is restored bitwise after every probe.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tensors = Vec::new();
    let mut worst: f64 = 0.0;
    for &id in params {
        let numel = store.get(id).numel();
        let coords: Vec<usize> = if numel <= opts.samples_per_tensor {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.samples_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.get(id);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &c in &coords {
            let original = store.get(id).data()[c];
            store.get_mut(id).data_mut()[c] = original + opts.step;
            let plus = eval(store, &f);
            store.get_mut(id).data_mut()[c] = original - opts.step;
            let minus = eval(store, &f);
            store.get_mut(id).data_mut()[c] = original;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = grad.map_or(0.0, |g| g[c]);
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric, opts.denom_floor));
        }
        worst = worst.max(max_rel);
        tensors.push(TensorCheck {
            name: store.name(id).to_string(),
            coords: coords.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport {
        tensors,
        max_rel_error: worst,
        tol: opts.tol,
        passed: worst < opts.tol,
    })
}
