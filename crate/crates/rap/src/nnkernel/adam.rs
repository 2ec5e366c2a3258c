use crate::error::{RapError, Result};
use crate::nnkernel::params::ParameterSet;

/// Adam optimizer state, one moment pair per parameter entry.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(ps: &ParameterSet, lr: f64) -> Self {
        let m = (0..ps.len()).map(|i| vec![0.0; ps.value(i).numel()]).collect();
        let v = (0..ps.len()).map(|i| vec![0.0; ps.value(i).numel()]).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }
}

/// One bias-corrected Adam update over every parameter, consuming the
/// gradients accumulated by `Tape::backward`. Errors if no backward pass
/// has populated the gradients since the last `zero_grads`.
pub fn adam_step(ps: &mut ParameterSet, st: &mut AdamState) -> Result<()> {
    if !ps.grads_populated() {
        return Err(RapError::usage(
            "adam_step called with no gradients populated; run backward first",
        ));
    }
    if st.m.len() != ps.len() {
        return Err(RapError::usage("adam state does not match parameter set"));
    }
    st.step += 1;
    let bc1 = 1.0 - st.beta1.powi(st.step as i32);
    let bc2 = 1.0 - st.beta2.powi(st.step as i32);
    for i in 0..ps.len() {
        let (p, g) = ps.value_grad_mut(i);
        let m = &mut st.m[i];
        let v = &mut st.v[i];
        for k in 0..g.len() {
            m[k] = st.beta1 * m[k] + (1.0 - st.beta1) * g[k];
            v[k] = st.beta2 * v[k] + (1.0 - st.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p[k] -= st.lr * mhat / (vhat.sqrt() + st.eps);
        }
    }
    Ok(())
}
