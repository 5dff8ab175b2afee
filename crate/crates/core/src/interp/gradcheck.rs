//! Gradient computation and finite-difference checking.
//!
//! The scalar loss is the sum of every element of the program's declared
//! outputs; any scalarization works for derivative verification, and this
//! one seeds the backward program with all-ones tensors.

use std::collections::BTreeMap;

use super::exec::{run_forward, run_plan};
use super::{Environment, ExecError};
use crate::ir::autodiff::derive_backward;
use crate::ir::Program;
use crate::lower::KernelPlan;
use crate::tensor::TensorValue;

/// Sum of all elements of all declared outputs.
pub fn loss_of(p: &Program, env: &Environment) -> Result<f64, ExecError> {
    let out = run_forward(p, env)?;
    let mut total = 0.0;
    for o in &p.outputs {
        total += out.get(o)?.data().iter().sum::<f64>();
    }
    if !total.is_finite() {
        return Err(ExecError::NonFinite("loss".into()));
    }
    Ok(total)
}

fn ones_like(value: &TensorValue) -> TensorValue {
    let mut t = value.clone();
    t.data_mut().fill(1.0);
    t
}

/// Run the emitted backward program and collect `g__<name>` for every
/// forward input, keyed by the forward name.
pub fn analytic_grads(
    p: &Program,
    env: &Environment,
) -> Result<BTreeMap<String, TensorValue>, ExecError> {
    let bwd = derive_backward(p).map_err(|e| ExecError::Invalid(e.to_string()))?;
    let fwd_env = run_forward(p, env)?;
    let mut benv = fwd_env.clone();
    for out in &p.outputs {
        let seed = format!("seed__{out}");
        let v = fwd_env.get(out)?;
        benv.bind(seed, ones_like(v));
    }
    let done = run_forward(&bwd, &benv)?;
    let mut grads = BTreeMap::new();
    for d in &p.inputs {
        let g = done.get(&format!("g__{}", d.name))?;
        grads.insert(d.name.clone(), g.clone());
    }
    Ok(grads)
}

/// Same loss, but through a lowered plan; used to cross-check plans.
pub fn plan_loss(plan: &KernelPlan, env: &Environment) -> Result<f64, ExecError> {
    let out = run_plan(plan, env)?;
    let mut total = 0.0;
    for o in &plan.program.outputs {
        total += out.get(o)?.data().iter().sum::<f64>();
    }
    Ok(total)
}

/// Central finite differences of the loss with respect to one parameter:
/// `(L(x+h) - L(x-h)) / 2h` per element.
pub fn finite_diff_grad(
    p: &Program,
    env: &Environment,
    param: &str,
    h: f64,
) -> Result<TensorValue, ExecError> {
    if h <= 0.0 {
        return Err(ExecError::ZeroStep);
    }
    let base = env.get(param)?.clone();
    let mut grad = base.clone();
    let n = base.data().len();
    for i in 0..n {
        let mut env_p = env.clone();
        env_p
            .bindings
            .get_mut(param)
            .expect("checked above")
            .data_mut()[i] += h;
        let lp = loss_of(p, &env_p)?;
        let mut env_m = env.clone();
        env_m
            .bindings
            .get_mut(param)
            .expect("checked above")
            .data_mut()[i] -= h;
        let lm = loss_of(p, &env_m)?;
        grad.data_mut()[i] = (lp - lm) / (2.0 * h);
    }
    Ok(grad)
}

/// Max over elements of `|analytic - fd| / max(1, |fd|)` for one param.
pub fn grad_check_param(
    p: &Program,
    env: &Environment,
    param: &str,
    h: f64,
) -> Result<f64, ExecError> {
    let grads = analytic_grads(p, env)?;
    let analytic = grads
        .get(param)
        .ok_or_else(|| ExecError::MissingBinding(format!("g__{param}")))?;
    let fd = finite_diff_grad(p, env, param, h)?;
    Ok(analytic.max_rel_err(&fd))
}

/// All trainable parameters of a program (declared weights).
pub fn weight_names(p: &Program) -> Vec<String> {
    p.inputs
        .iter()
        .filter(|d| d.kind == crate::ir::DeclKind::Weight)
        .map(|d| d.name.clone())
        .collect()
}

/// Convenience check: every weight of `p` under tolerance `tol`.
pub fn grad_check_all_weights(
    p: &Program,
    env: &Environment,
    h: f64,
    tol: f64,
) -> Result<Vec<(String, f64)>, ExecError> {
    let grads = analytic_grads(p, env)?;
    let mut results = Vec::new();
    for w in weight_names(p) {
        let analytic = grads
            .get(&w)
            .ok_or_else(|| ExecError::MissingBinding(format!("g__{w}")))?;
        let fd = finite_diff_grad(p, env, &w, h)?;
        let err = analytic.max_rel_err(&fd);
        if err > tol {
            return Err(ExecError::Invalid(format!(
                "gradient of {w} off by {err:.3e} (tolerance {tol:.1e})"
            )));
        }
        results.push((w, err));
    }
    Ok(results)
}

