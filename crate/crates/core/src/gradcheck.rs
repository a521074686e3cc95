//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the forward pass of the graph it is given;
//! the analytic side comes from a single `backward`. Non-scalar outputs are
//! contracted with a fixed pseudo-random cotangent so that every Jacobian
//! entry contributes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::uniform;
use crate::tensor::{Graph, Result, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Norm-wise relative error per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_err: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

fn scalar_loss<F>(build: &F, inputs: &[Tensor<f64>], as_vars: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if as_vars {
                g.variable(t.clone())
            } else {
                g.input(t.clone())
            }
        })
        .collect();
    let out = build(&mut g, &vars)?;
    let loss = if g.value(out).numel() == 1 {
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_cafe);
        let cot = g.input(uniform(&mut rng, g.shape(out).to_vec(), 1.0));
        let prod = g.mul(out, cot)?;
        g.sum(prod)?
    };
    Ok((g, vars, loss))
}

/// Compares reverse-mode gradients of `build` against central differences
/// for every element of every input.
pub fn check_gradients<F>(build: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, loss) = scalar_loss(&build, inputs, true)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, loss) = scalar_loss(&build, perturbed, false)?;
        Ok(g.value(loss).data()[0])
    };

    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + step;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - step;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            *slot = (fp - fm) / (2.0 * step);
        }
        rel_err.push(relative_error(&analytic[i], &numeric));
    }
    Ok(GradCheckReport { rel_err })
}

/// Norm-wise relative error; two zero vectors agree exactly.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // x ↦ sum(x·x) is right; pretending it is linear is caught by
        // comparing against a hand-made wrong analytic vector.
        let x = Tensor::new([3], vec![0.3, -1.2, 2.0]).unwrap();
        let rep = check_gradients(
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.sum(y)
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.max_rel_err() < 1e-8);
        assert!(relative_error(&[1.0, 1.0], &[1.0, 2.0]) > 0.1);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
