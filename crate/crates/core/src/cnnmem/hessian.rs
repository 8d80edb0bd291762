use super::data::Sample;
use super::model::{sigmoid_neg, CnnModel};
use crate::error::Result;
use crate::matker::RankOneFactor;

/// Per-sample loss Hessian `ell2 * v v^T` at the current weights.
///
/// The network is piecewise linear in its weights, so away from ReLU kinks
/// the Hessian of `log(1 + exp(-y f))` is exactly the Gauss-Newton term.
/// Block `(j, r)` of `v` is `(j/m)(1{<w_jr, x^1> > 0} x^1 + 1{<w_jr, x^2> > 0} x^2) * y`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleHessianFactor {
    pub vector: Vec<f64>,
    /// `s (1 - s)` with `s = sigmoid(-y f)`.
    pub ell2: f64,
}

impl SampleHessianFactor {
    pub fn to_rank_one(&self) -> Result<RankOneFactor> {
        RankOneFactor::new(self.vector.clone(), self.ell2)
    }
}

pub fn sample_hessian(model: &CnnModel, s: &Sample) -> Result<SampleHessianFactor> {
    let (f, mut v) = model.forward_grad(s)?;
    let sg = sigmoid_neg(s.y * f);
    v.iter_mut().for_each(|x| *x *= s.y);
    Ok(SampleHessianFactor {
        vector: v,
        ell2: sg * (1.0 - sg),
    })
}
