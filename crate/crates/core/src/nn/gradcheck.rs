use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

/// Relative-error denominator floor: coordinates whose true gradient is
/// below this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients of the scalar built by `build` against
/// central finite differences.
///
/// Per parameter, up to `coords_per_param` coordinates are checked: half
/// drawn from coordinates with a non-zero analytic gradient, the rest
/// uniformly. Parameters are restored exactly afterwards.
pub fn grad_check<F>(
    store: &mut ParamStore,
    build: F,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
{
    store.zero_grads();
    {
        let mut g = Graph::new(&store.params);
        let loss = build(&mut g);
        g.backward(loss, &mut store.grads);
    }
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(&store.params);
        let loss = build(&mut g);
        g.value(loss).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let ids: Vec<ParamId> = store.params.ids().collect();
    for id in ids {
        let grad = store.grad(id).data().to_vec();
        let mut nonzero: Vec<usize> = (0..grad.len()).filter(|&k| grad[k] != 0.0).collect();
        nonzero.shuffle(&mut rng);
        let mut coords: Vec<usize> = nonzero.into_iter().take(coords_per_param.div_ceil(2)).collect();
        let mut all: Vec<usize> = (0..grad.len()).collect();
        all.shuffle(&mut rng);
        for k in all {
            if coords.len() >= coords_per_param {
                break;
            }
            if !coords.contains(&k) {
                coords.push(k);
            }
        }
        for k in coords {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_err(grad[k], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.coords_checked == 1 {
                report.max_rel_err = err;
                report.worst_param = store.params.name(id).to_string();
                report.worst_coord = k;
                report.analytic = grad[k];
                report.numeric = numeric;
            }
        }
    }
    store.zero_grads();
    report
}
