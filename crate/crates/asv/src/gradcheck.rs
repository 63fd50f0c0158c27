//! Finite-difference verification of the composed model gradient.
//!
//! The training graph is rebuilt in f64 and every parameter entry is
//! perturbed by a central difference; the analytic gradients from
//! [`crate::tape`] must agree to high relative precision. This is the
//! harness behind the gradient acceptance gate, and it is deliberately
//! independent of the backward pass: it only ever reruns forward.

use crate::corpus::Batch;
use crate::error::Result;
use crate::model::Model;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Number of scalar entries compared.
    pub checked: usize,
}

/// Relative error with an absolute floor. Central differences at step h
/// carry roundoff noise of roughly eps * |loss| / h (about 1e-10 here), so
/// entries far below the floor are compared absolutely at that precision
/// instead of amplifying noise into a fake relative error.
fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn loss_value(model: &Model<f64>, batch: &Batch) -> Result<f64> {
    let (g, _, loss) = model.loss_graph(batch, None)?;
    Ok(g.value(loss).data()[0])
}

fn perturbed(model: &Model<f64>, param_idx: usize, entry: usize, delta: f64) -> Model<f64> {
    let mut copy = model.clone();
    let mut i = 0;
    copy.visit_params_mut(|_, t| {
        if i == param_idx {
            t.data_mut()[entry] += delta;
        }
        i += 1;
    });
    copy
}

/// Central finite differences (step `h`) against the analytic gradient of
/// the batch loss, over every parameter entry. Deterministic decoders only
/// (teacher forcing or predict-all-words).
pub fn check_model_gradients(
    model: &Model<f64>,
    batch: &Batch,
    h: f64,
) -> Result<GradCheckReport> {
    let (mut g, vars, loss) = model.loss_graph(batch, None)?;
    let floor = 1e-5 * g.value(loss).data()[0].abs().max(1.0);
    g.backward(loss)?;
    let ordered = Model::<f64>::ordered_vars(&vars);
    let names = model.param_names();
    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(ordered.len());
    let mut sizes = Vec::with_capacity(ordered.len());
    model.visit_params(|_, t| sizes.push(t.len()));
    for (var, len) in ordered.iter().zip(&sizes) {
        analytic.push(match g.grad(*var) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; *len],
        });
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (pi, name) in names.iter().enumerate() {
        for j in 0..sizes[pi] {
            let plus = loss_value(&perturbed(model, pi, j, h), batch)?;
            let minus = loss_value(&perturbed(model, pi, j, -h), batch)?;
            let fd = (plus - minus) / (2.0 * h);
            let err = rel_error(analytic[pi][j], fd, floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}
