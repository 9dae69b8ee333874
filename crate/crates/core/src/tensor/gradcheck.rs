//! Finite-difference gradient verification. Always f64: the comparison
//! tolerances assume double precision.

use std::collections::BTreeMap;

use super::{DiffArray, NodeId, ParamStore, Tape};

/// Central difference of a scalar function at `x`, elementwise.
pub fn central_diff<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut out = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-6 {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| rel_err(a, b))
        .fold(0.0, f64::max)
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_err: f64,
    pub checked: usize,
}

/// Check a tape-built scalar function of explicit inputs: runs backward once
/// for the analytic gradients, then central differences per input element.
/// `build` must be deterministic.
pub fn check_inputs<F>(inputs: &[DiffArray<f64>], h: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|a| tape.leaf(a.clone().requires_grad()))
        .collect();
    let out = build(&mut tape, &ids);
    tape.backward(out).expect("backward failed in gradcheck");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("missing gradient").to_vec())
        .collect();

    let eval = |arrays: &[DiffArray<f64>]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = arrays.iter().map(|a| t.leaf(a.clone())).collect();
        let out = build(&mut t, &ids);
        t.value(out)
    };

    let mut max_err = 0.0f64;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.data.len() {
            let mut probe: Vec<DiffArray<f64>> = inputs.to_vec();
            probe[k].data[i] += h;
            let fp = eval(&probe);
            probe[k].data[i] = input.data[i] - h;
            let fm = eval(&probe);
            let fd = (fp - fm) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[k][i], fd));
            checked += 1;
        }
    }
    GradCheckReport { max_err, checked }
}

/// Check analytic parameter gradients against central differences of a
/// store-evaluated scalar. `probes` selects (path, element) pairs so large
/// models can be spot-checked.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    analytic: &BTreeMap<String, Vec<f64>>,
    probes: &[(String, usize)],
    h: f64,
    eval: F,
) -> GradCheckReport
where
    F: Fn(&ParamStore<f64>) -> f64,
{
    let mut max_err = 0.0f64;
    for (path, idx) in probes {
        let mut plus = store.cast::<f64>();
        plus.get_mut(path).unwrap().data[*idx] += h;
        let fp = eval(&plus);
        let mut minus = store.cast::<f64>();
        minus.get_mut(path).unwrap().data[*idx] -= h;
        let fm = eval(&minus);
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic
            .get(path)
            .map(|g| g[*idx])
            .expect("analytic gradient missing for probed path");
        max_err = max_err.max(rel_err(a, fd));
    }
    GradCheckReport {
        max_err,
        checked: probes.len(),
    }
}
