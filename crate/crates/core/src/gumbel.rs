//! Gumbel-softmax relaxation of categorical sampling.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Where the Gumbel perturbation comes from.
pub enum Noise<'a> {
    Sampled(&'a mut RngStream),
    /// No perturbation: plain tempered softmax.
    Zero,
    /// Caller-provided perturbation, one value per option.
    Fixed(&'a [f64]),
}

impl Noise<'_> {
    /// Draws one perturbation vector of length `n`.
    pub fn draw(&mut self, n: usize) -> Result<Vec<f64>> {
        match self {
            Noise::Sampled(rng) => Ok((0..n).map(|_| rng.gumbel()).collect()),
            Noise::Zero => Ok(vec![0.0; n]),
            Noise::Fixed(values) => {
                if values.len() != n {
                    return Err(Error::Dimension {
                        op: "gumbel_softmax",
                        lhs: vec![n],
                        rhs: vec![values.len()],
                    });
                }
                Ok(values.to_vec())
            }
        }
    }
}

/// `softmax((alpha + g) / temperature)` over a vector of logits. In hard mode
/// the forward value is the one-hot argmax while gradients follow the soft
/// vector.
pub fn gumbel_softmax(
    g: &mut Graph,
    alpha: Var,
    temperature: f64,
    noise: &mut Noise<'_>,
    hard: bool,
) -> Result<Var> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let n = g.value(alpha).len();
    let eps = g.input(Tensor::vector(noise.draw(n)?));
    let perturbed = g.add(alpha, eps)?;
    let scaled = g.scale(perturbed, 1.0 / temperature);
    let soft = g.softmax(scaled, 0)?;
    Ok(if hard {
        g.straight_through_one_hot(soft)
    } else {
        soft
    })
}

/// Plain-value softmax of `alpha / temperature`, the expected sampling
/// distribution of [`gumbel_softmax`].
pub fn softmax_probs(alpha: &[f64], temperature: f64) -> Vec<f64> {
    let max = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = alpha.iter().map(|a| ((a - max) / temperature).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}
