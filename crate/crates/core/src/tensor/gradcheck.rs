//! Central finite-difference gradient checks.
//!
//! Error per element is `|analytic − numeric| / max(|analytic|, |numeric|, 1)`:
//! relative for gradients above one, absolute below (f32 forward passes
//! cannot resolve small gradients to 1e-3 relative with ε = 1e-3).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

fn rel_err(a: f32, n: f32) -> f32 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

fn scalar_loss(g: &Graph, v: Var) -> Result<f32> {
    match g.value(v) {
        [x] => Ok(*x),
        other => Err(Error::Shape(format!("grad_check needs a scalar loss, got {} values", other.len()))),
    }
}

/// Compares analytic gradients of `f` at `inputs` with central differences
/// of step `eps`, returning the worst error over every input element.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f32) -> Result<f32>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f32> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars)?;
        scalar_loss(&g, out)
    };

    let mut g = Graph::new();
    let owned: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let vars: Vec<Var> = owned.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f32>> = vars.iter().map(|&v| g.grad(v).expect("leaf grad").to_vec()).collect();

    let mut worst = 0.0f32;
    let mut probe = owned.clone();
    for (ti, t) in owned.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            probe[ti].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[ti][j], numeric));
        }
    }
    Ok(worst)
}

/// Gradient check over the parameters of a [`ParamStore`], probing up to
/// `per_tensor` randomly chosen elements of each tensor.
pub fn grad_check_params<F>(f: F, store: &ParamStore, eps: f32, per_tensor: usize, seed: u64) -> Result<f32>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &analytic)?;
    g.backward(out)?;
    g.accumulate_param_grads(&mut analytic)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut worst = 0.0f32;
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in &names {
        let t = store.get(name).expect("name from store");
        let grad = analytic.get(name).and_then(|t| t.grad()).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let picks = sample(&mut rng, t.numel(), per_tensor.min(t.numel()));
        for j in picks.iter() {
            let orig = t.data()[j];
            let mut loss_at = |x: f32| -> Result<f32> {
                probe.get_mut(name).expect("name").data_mut()[j] = x;
                let mut g = Graph::new();
                let out = f(&mut g, &probe)?;
                scalar_loss(&g, out)
            };
            let plus = loss_at(orig + eps)?;
            let minus = loss_at(orig - eps)?;
            probe.get_mut(name).expect("name").data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(grad[j], numeric));
        }
    }
    Ok(worst)
}
