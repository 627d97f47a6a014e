//! Central finite-difference verification of analytic gradients.

use super::exact::ExactSum;
use crate::error::{Error, Result};
use crate::tensor::{BlockParams, GradStore, Tensor};

/// A differentiable block: forward from inputs and parameters, backward from
/// upstream output gradients.
///
/// `backward` recomputes whatever forward state it needs from `inputs`, adds
/// parameter gradients into `grads`, and returns one gradient per input.
pub trait Block {
    fn name(&self) -> &str;

    fn forward(&self, params: &BlockParams, inputs: &[Tensor]) -> Result<Vec<Tensor>>;

    fn backward(
        &self,
        params: &BlockParams,
        grads: &mut GradStore,
        inputs: &[Tensor],
        upstream: &[Tensor],
    ) -> Result<Vec<Tensor>>;

    /// Inputs that are labels or indices rather than differentiable operands.
    fn is_constant_input(&self, _index: usize) -> bool {
        false
    }
}

/// Outcome of [`finite_diff_check_report`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Human-readable location of the worst entry (`param:<name>[i]` or `input<k>[i]`).
    pub worst: String,
    /// Analytic and numeric values at the worst entry.
    pub worst_pair: (f64, f64),
    /// Largest `|analytic − numeric|` over all entries.
    pub max_abs_error: f64,
    pub checked: usize,
}

pub const DEFAULT_EPS: f64 = 1e-6;

/// Worst relative error between analytic gradients and central differences of
/// the probe loss `sum(outputs)`.
pub fn finite_diff_check(
    block: &dyn Block,
    inputs: &[Tensor],
    params: &BlockParams,
    eps: f64,
) -> Result<f64> {
    Ok(finite_diff_check_report(block, inputs, params, eps, None)?.max_rel_error)
}

/// `Σ w·y` summed exactly and rounded once, so the probe adds no rounding of
/// its own on top of the block's outputs.
fn probe_loss(outputs: &[Tensor], weights: &[Tensor]) -> f64 {
    let mut acc = ExactSum::default();
    for (o, w) in outputs.iter().zip(weights) {
        for (a, b) in o.data.iter().zip(&w.data) {
            acc.add_product(*a, *b);
        }
    }
    acc.value()
}

fn eval_probe(
    block: &dyn Block,
    params: &BlockParams,
    inputs: &[Tensor],
    weights: Option<&[Tensor]>,
) -> Result<(f64, Vec<Tensor>)> {
    let outputs = block.forward(params, inputs)?;
    for (k, o) in outputs.iter().enumerate() {
        if let Some(i) = o.first_non_finite() {
            return Err(Error::NonFinite {
                block: format!("{} output {k}", block.name()),
                index: i,
            });
        }
    }
    let ones: Vec<Tensor>;
    let w = match weights {
        Some(w) => w,
        None => {
            ones = outputs
                .iter()
                .map(|o| Tensor {
                    shape: o.shape.clone(),
                    data: vec![1.0; o.len()],
                })
                .collect();
            &ones
        }
    };
    Ok((probe_loss(&outputs, w), w.to_vec()))
}

#[inline]
fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Like [`finite_diff_check`] but with an optional weighting of the outputs in
/// the probe loss and a report of where the worst entry sits.
///
/// Weighted probes matter for blocks whose plain output sum is constant
/// (softmax heads), where every true gradient is zero.
pub fn finite_diff_check_report(
    block: &dyn Block,
    inputs: &[Tensor],
    params: &BlockParams,
    eps: f64,
    probe: Option<&[Tensor]>,
) -> Result<GradCheckReport> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::invalid("finite_diff_check", "eps must be positive"));
    }
    let (_, weights) = eval_probe(block, params, inputs, probe)?;
    let mut grads = params.zero_grads_like();
    let input_grads = block.backward(params, &mut grads, inputs, &weights)?;
    if input_grads.len() != inputs.len() {
        return Err(Error::shape(
            "finite_diff_check",
            format!(
                "{} returned {} input gradients for {} inputs",
                block.name(),
                input_grads.len(),
                inputs.len()
            ),
        ));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        worst_pair: (0.0, 0.0),
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut record = |analytic: f64, numeric: f64, location: &dyn Fn() -> String| {
        let err = rel_error(analytic, numeric);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
        if err > report.max_rel_error || (report.worst.is_empty() && err >= 0.0) {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = location();
            report.worst_pair = (analytic, numeric);
        }
    };

    let mut perturbed = params.clone();
    for (slot, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads.slots()[slot].data.clone();
        for i in 0..tensor.len() {
            let orig = tensor.data[i];
            let id = perturbed.id(name)?;
            perturbed.value_mut(id)[i] = orig + eps;
            let (plus, _) = eval_probe(block, &perturbed, inputs, Some(&weights))?;
            perturbed.value_mut(id)[i] = orig - eps;
            let (minus, _) = eval_probe(block, &perturbed, inputs, Some(&weights))?;
            perturbed.value_mut(id)[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            record(analytic[i], numeric, &|| format!("param:{name}[{i}]"));
        }
    }

    let mut shifted = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        if block.is_constant_input(k) {
            continue;
        }
        for i in 0..input.len() {
            let orig = input.data[i];
            shifted[k].data[i] = orig + eps;
            let (plus, _) = eval_probe(block, params, &shifted, Some(&weights))?;
            shifted[k].data[i] = orig - eps;
            let (minus, _) = eval_probe(block, params, &shifted, Some(&weights))?;
            shifted[k].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            record(input_grads[k].data[i], numeric, &|| {
                format!("input{k}[{i}]")
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::activation::{sigmoid, sigmoid_backward};

    struct Cube;

    impl Block for Cube {
        fn name(&self) -> &str {
            "cube"
        }
        fn forward(&self, _: &BlockParams, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
            Ok(vec![Tensor::from_vec(inputs[0].data.iter().map(|v| v * v * v).collect())])
        }
        fn backward(
            &self,
            _: &BlockParams,
            _: &mut GradStore,
            inputs: &[Tensor],
            up: &[Tensor],
        ) -> Result<Vec<Tensor>> {
            Ok(vec![Tensor::from_vec(
                inputs[0].data.iter().zip(&up[0].data).map(|(v, u)| 3.0 * v * v * u * 1.1).collect(),
            )])
        }
    }

    struct Sig;

    impl Block for Sig {
        fn name(&self) -> &str {
            "sigmoid"
        }
        fn forward(&self, _: &BlockParams, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
            Ok(vec![Tensor::from_vec(sigmoid(&inputs[0].data))])
        }
        fn backward(
            &self,
            _: &BlockParams,
            _: &mut GradStore,
            inputs: &[Tensor],
            up: &[Tensor],
        ) -> Result<Vec<Tensor>> {
            let y = sigmoid(&inputs[0].data);
            Ok(vec![Tensor::from_vec(sigmoid_backward(&y, &up[0].data))])
        }
    }

    struct Blowup;

    impl Block for Blowup {
        fn name(&self) -> &str {
            "blowup"
        }
        fn forward(&self, _: &BlockParams, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
            Ok(vec![Tensor::from_vec(inputs[0].data.iter().map(|v| 1.0 / v).collect())])
        }
        fn backward(
            &self,
            _: &BlockParams,
            _: &mut GradStore,
            inputs: &[Tensor],
            _: &[Tensor],
        ) -> Result<Vec<Tensor>> {
            Ok(vec![inputs[0].clone()])
        }
    }

    #[test]
    fn detects_injected_ten_percent_fault() {
        let x = Tensor::from_vec(vec![0.7, -1.3, 2.1]);
        let err = finite_diff_check(&Cube, &[x], &BlockParams::new(), DEFAULT_EPS).unwrap();
        // analytic = 1.1 * numeric, relative to the larger analytic value
        assert!((err - 0.1 / 1.1).abs() < 1e-6, "{err}");
    }

    #[test]
    fn sigmoid_passes() {
        let x = Tensor::from_vec(vec![0.2, -3.0, 1.7, 0.0, 5.5]);
        let err = finite_diff_check(&Sig, &[x], &BlockParams::new(), DEFAULT_EPS).unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn non_finite_output_reports_index() {
        let x = Tensor::from_vec(vec![1.0, 0.0, 2.0]);
        match finite_diff_check(&Blowup, &[x], &BlockParams::new(), DEFAULT_EPS) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(finite_diff_check(&Sig, &[x], &BlockParams::new(), 0.0).is_err());
    }
}
