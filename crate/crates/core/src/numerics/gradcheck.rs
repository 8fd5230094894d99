//! Central finite-difference verification of graph gradients.

use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Largest relative gradient error per parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub per_param: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compares the gradients `backward` writes into `store` with central
/// differences of step `eps`. The error of a parameter tensor is
/// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
///
/// `build` must record a scalar loss from the values in the given store
/// and be deterministic (fix any dropout masks).
pub fn check_gradients<F>(store: &ParamStore, eps: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, &work)?;
    g.backward(loss, &mut work)?;

    let mut per_param = Vec::new();
    let names: Vec<String> = work.names().map(str::to_string).collect();
    for name in names {
        let analytic = work.grad(&name)?.clone();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let mut s = store.clone();
                s.entry_mut(&name)?.value.data_mut()[i] += delta;
                let mut g = Graph::new();
                let l = build(&mut g, &s)?;
                Ok(g.value(l).item())
            };
            *slot = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        }
        let numeric = Tensor::new(analytic.shape().to_vec(), numeric)?;
        let err = analytic.sub(&numeric)?.norm_l2();
        let scale = numeric.norm_l2().max(analytic.norm_l2());
        per_param.push((name, if scale == 0.0 { 0.0 } else { err / scale }));
    }
    Ok(GradCheck { per_param })
}
