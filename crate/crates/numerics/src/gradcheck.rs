//! Central finite-difference oracle for tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NumericsError, Result};
use crate::param::{Ctx, Grads, ParamId, ParamStore};
use crate::tape::Var;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per parameter (sampled with `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-6,
            max_coords: None,
            seed: 0,
            floor: 1e-6,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self { tolerance, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&Ctx<'_>) -> Result<Var>,
{
    let ctx = Ctx::eval(store);
    let out = f(&ctx)?;
    let value = ctx.tape.value(out);
    if value.len() != 1 {
        return Err(NumericsError::NotScalar(value.shape().to_vec()));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(NumericsError::NonFinite { op: "grad_check objective" });
    }
    Ok(v)
}

/// Compares analytic gradients of the scalar `f` against central differences
/// for the parameters in `ids` (all parameters when `None`).
///
/// `f` runs in eval mode, so dropout is off.
pub fn grad_check<F>(f: F, store: &mut ParamStore, ids: Option<&[ParamId]>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&Ctx<'_>) -> Result<Var>,
{
    if !(cfg.epsilon > 0.0 && cfg.epsilon <= 1e-2) {
        return Err(NumericsError::Config(format!("epsilon {} outside (0, 1e-2]", cfg.epsilon)));
    }
    let mut analytic = Grads::zeros_like(store);
    {
        let ctx = Ctx::eval(store);
        let out = f(&ctx)?;
        if !ctx.tape.value(out).is_finite() {
            return Err(NumericsError::NonFinite { op: "grad_check objective" });
        }
        ctx.backward_into(out, &mut analytic)?;
    }
    let targets: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.iter().map(|(id, _)| id).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Vec::with_capacity(targets.len());
    let mut worst: f64 = 0.0;
    for id in targets {
        let n = store.tensor(id).len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &c in &coords {
            let original = store.tensor(id).data()[c];
            store.tensor_mut(id).data_mut()[c] = original + cfg.epsilon;
            let plus = evaluate(&f, store);
            store.tensor_mut(id).data_mut()[c] = original - cfg.epsilon;
            let minus = evaluate(&f, store);
            store.tensor_mut(id).data_mut()[c] = original;
            let numeric = (plus? - minus?) / (2.0 * cfg.epsilon);
            let a = analytic.get(id)[c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        worst = worst.max(max_rel);
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            coords: coords.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradCheckReport {
        params,
        max_rel_err: worst,
        tolerance: cfg.tolerance,
        passed: worst < cfg.tolerance,
    })
}
