//! Central finite-difference verification of tape gradients (64-bit).

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{Graph, Tensor, Var};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the elementwise relative error.
const REL_FLOOR: f64 = 1e-8;

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOutcome {
    /// Worst `|tape - numeric| / max(|tape|, |numeric|, floor)` over all
    /// checked input elements.
    pub max_rel_error: f64,
    /// Relative error of the directional derivative along a random vector.
    pub directional_rel_error: f64,
    /// Number of input elements compared.
    pub elements: usize,
}

impl GradCheckOutcome {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.directional_rel_error < tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    if !g.shape(loss).is_scalar() {
        return Err(Error::NotScalar(g.shape(loss)));
    }
    Ok(g.scalar(loss))
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences, element by element and along one random direction.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, seed: u64) -> Result<GradCheckOutcome>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let h = FD_STEP;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let tape: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut work = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut elements = 0;
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&work, &f)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&work, &f)?;
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            max_rel = max_rel.max(relative_error(tape[i].data()[j], numeric));
            elements += 1;
        }
    }

    let mut rng = stream(seed, "gradcheck-direction");
    let dirs: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::from_fn(t.shape(), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let shifted = |sign: f64| -> Vec<Tensor<f64>> {
        inputs
            .iter()
            .zip(&dirs)
            .map(|(t, d)| {
                let mut out = t.clone();
                for (o, &dv) in out.data_mut().iter_mut().zip(d.data()) {
                    *o += sign * h * dv;
                }
                out
            })
            .collect()
    };
    let numeric_dir = (eval(&shifted(1.0), &f)? - eval(&shifted(-1.0), &f)?) / (2.0 * h);
    let tape_dir: f64 = tape.iter().zip(&dirs).map(|(gt, d)| gt.dot(d)).sum();

    Ok(GradCheckOutcome {
        max_rel_error: max_rel,
        directional_rel_error: relative_error(tape_dir, numeric_dir),
        elements,
    })
}

/// `sum(out * r)` for a fixed random `r`: a scalar whose gradient with
/// respect to `out` is generic rather than all ones.
pub fn random_projection(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = stream(seed, "gradcheck-projection");
    let r = Tensor::from_fn(g.shape(out), |_| rng.random_range(-1.0..1.0));
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvParams;

    #[test]
    fn conv_passes() {
        let mut rng = stream(3, "t");
        let x = Tensor::from_fn([1, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn([3, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let out = check_gradients(
            &[x, w],
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, ConvParams::same(3))?;
                random_projection(g, y, 1)
            },
            0,
        )
        .unwrap();
        assert!(out.passes(1e-6), "{out:?}");
    }

    #[test]
    fn relative_error_is_symmetric_and_floored() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(1.0, 2.0), 0.5);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }
}
