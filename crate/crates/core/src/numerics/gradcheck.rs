//! Central-difference verification of tape gradients.

use super::layers::Module;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Errors above this trigger a second look with a step 100× smaller, which
/// separates a central difference straddling a ReLU/max kink from a genuinely
/// wrong gradient.
pub const REFINE_ABOVE: f64 = 1e-4;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// Max over coordinates of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Coordinates re-checked with the smaller step.
    pub refined: usize,
    pub coordinates: usize,
}

fn coordinate_error(
    analytic: f64,
    h: f64,
    mut eval_at: impl FnMut(f64) -> Result<f64>,
) -> Result<(f64, bool)> {
    let fd = |eval_at: &mut dyn FnMut(f64) -> Result<f64>, step: f64| -> Result<f64> {
        Ok((eval_at(step)? - eval_at(-step)?) / (2.0 * step))
    };
    let coarse = relative_error(analytic, fd(&mut eval_at, h)?);
    if coarse <= REFINE_ABOVE {
        return Ok((coarse, false));
    }
    let fine = relative_error(analytic, fd(&mut eval_at, h / 100.0)?);
    Ok((coarse.min(fine), true))
}

/// Central-difference check of a scalar function of one tensor.
pub fn gradient_report<F>(f: F, x: &Tensor, h: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut leaf = x.clone();
    leaf.set_requires_grad(true);
    let mut tape = Tape::new();
    let xv = tape.param(&leaf);
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .wrt(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut report = GradReport {
        max_rel_error: 0.0,
        refined: 0,
        coordinates: x.numel(),
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let (err, refined) = coordinate_error(analytic[i], h, |d| {
            probe.data_mut()[i] = orig + d;
            let v = eval(&probe);
            probe.data_mut()[i] = orig;
            v
        })?;
        report.max_rel_error = report.max_rel_error.max(err);
        report.refined += usize::from(refined);
    }
    Ok(report)
}

/// Worst relative error of [`gradient_report`].
pub fn check_gradients<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Ok(gradient_report(f, x, h)?.max_rel_error)
}

/// Same check over every trainable parameter of a module. `loss` builds a
/// scalar from a (possibly mutated) copy of the module on a fresh tape.
pub fn module_gradient_report<M, F>(module: &M, loss: F, h: f64) -> Result<GradReport>
where
    M: Module + Clone,
    F: Fn(&mut M, &mut Tape) -> Result<Var>,
{
    let mut work = module.clone();
    let mut tape = Tape::new();
    let out = loss(&mut work, &mut tape)?;
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    for p in work.params_mut() {
        grads.write_to(p);
        analytic.push(p.grad.take().unwrap_or_else(|| vec![0.0; p.numel()]));
    }

    let eval = |m: &M| -> Result<f64> {
        let mut m = m.clone();
        let mut tape = Tape::new();
        let out = loss(&mut m, &mut tape)?;
        Ok(tape.value(out).item())
    };
    let mut report = GradReport {
        max_rel_error: 0.0,
        refined: 0,
        coordinates: analytic.iter().map(Vec::len).sum(),
    };
    let mut probe = module.clone();
    for (pi, grad) in analytic.iter().enumerate() {
        for (i, &g) in grad.iter().enumerate() {
            let orig = probe.params()[pi].data()[i];
            let (err, refined) = coordinate_error(g, h, |d| {
                probe.params_mut()[pi].data_mut()[i] = orig + d;
                let v = eval(&probe);
                probe.params_mut()[pi].data_mut()[i] = orig;
                v
            })?;
            report.max_rel_error = report.max_rel_error.max(err);
            report.refined += usize::from(refined);
        }
    }
    Ok(report)
}

/// Worst relative error of [`module_gradient_report`].
pub fn check_module_gradients<M, F>(module: &M, loss: F, h: f64) -> Result<f64>
where
    M: Module + Clone,
    F: Fn(&mut M, &mut Tape) -> Result<Var>,
{
    Ok(module_gradient_report(module, loss, h)?.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::{Activation, Mlp, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let err = check_gradients(|t, v| t.mul(v, v), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn mlp_mse_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::new(&[4, 6, 3], Activation::Relu, false, &mut rng).unwrap();
        let x = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let target = Tensor::uniform(&[5, 3], 1.0, &mut rng);
        let err = check_module_gradients(
            &mlp,
            |m, tape| {
                let xv = tape.constant(x.clone());
                let y = m.forward(tape, xv, Mode::Train)?;
                tape.mse(y, target.data())
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
