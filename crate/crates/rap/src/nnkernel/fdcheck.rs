use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nnkernel::params::ParameterSet;

/// Default step for central differences.
pub const FD_EPS: f64 = 1e-5;

/// Compare the gradients currently stored in `ps` against central finite
/// differences of `f`, returning the maximum relative error over the probed
/// coordinates. Every coordinate is probed when a parameter has at most
/// `max_coords` entries; otherwise `max_coords` are sampled per parameter.
///
/// `f` must be a deterministic pure function of the parameter values.
pub fn finite_difference_check<F>(
    mut f: F,
    ps: &mut ParameterSet,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> f64
where
    F: FnMut(&ParameterSet) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..ps.len() {
        let n = ps.value(i).numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.random_range(0..n)).collect()
        };
        for k in coords {
            let analytic = ps.grad(i)[k];
            let orig = ps.value(i).vals[k];
            ps.value_mut(i).vals[k] = orig + eps;
            let fp = f(ps);
            ps.value_mut(i).vals[k] = orig - eps;
            let fm = f(ps);
            ps.value_mut(i).vals[k] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = rel_err(analytic, numeric);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// |a - n| with a denominator floored so that coordinates whose true
/// gradient is ~0 do not dominate through FD round-off noise.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(a.abs().max(n.abs()), 1e-4)
}
