//! Finite-difference gradient verification.
//!
//! The checker is the ground truth for every hand-derived backward in this
//! crate: it rebuilds the computation at perturbed inputs and compares a
//! central difference against the analytic gradient, coordinate by
//! coordinate. Because the engine is define-by-run, the computation is
//! expressed as a closure from input tensors to a scalar loss node; the
//! checker owns graph construction so it can re-evaluate at x +- h.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Settings for [`check_gradients`].
pub struct CheckSettings {
    /// Central-difference step.
    pub h: f64,
    /// Random coordinate probes per input tensor.
    pub probes_per_input: usize,
    /// Seed for probe selection.
    pub seed: u64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            h: 1e-5,
            probes_per_input: 100,
            seed: 0x6f72_6163_6c65,
        }
    }
}

/// Worst relative error found, plus where.
#[derive(Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct the same scalar loss from the given input nodes
/// every time it is called; inputs are bound as parameters in construction
/// order. Relative error uses denominator max(1, |analytic|, |numeric|) so
/// near-zero gradients are compared absolutely.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor],
    settings: &CheckSettings,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        let grads = g.backward(loss)?;
        ids.iter()
            .zip(inputs)
            .map(|(&id, t)| grads.wrt_or_zeros(id, t.shape()))
            .collect()
    };

    let value_at = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::numeric("loss not finite during finite differences"));
        }
        Ok(v)
    };

    let mut rng = Rng::new(settings.seed);
    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        if t.is_empty() {
            continue;
        }
        let n = t.len();
        let probes = settings.probes_per_input.min(n);
        // Probe all coordinates when the tensor is small enough.
        let coords: Vec<usize> = if n <= settings.probes_per_input {
            (0..n).collect()
        } else {
            (0..probes).map(|_| rng.next_below(n as u64) as usize).collect()
        };
        for ci in coords {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + settings.h;
            let up = value_at(&work)?;
            work[ti].data_mut()[ci] = orig - settings.h;
            let down = value_at(&work)?;
            work[ti].data_mut()[ci] = orig;

            let numeric = (up - down) / (2.0 * settings.h);
            let a = analytic[ti].data()[ci];
            let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = ti;
                report.worst_coord = ci;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
