use crate::model::ParamStore;
use crate::{Error, Result};

/// Bias-corrected Adam. The update is computed in `f64`; parameters and
/// both moments are stored rounded to `f32`, so the optimizer state is
/// exactly what a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub step: usize,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &ParamStore| (0..p.len()).map(|i| vec![0.0f32; p.value(i).numel()]).collect::<Vec<_>>();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// Apply one update using the gradients accumulated in `params`.
    pub fn update(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        for id in 0..params.len() {
            if params.grad(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::Input(format!("non-finite gradient in {}", params.name(id))));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in 0..params.len() {
            let grad = params.grad(id).to_vec();
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = params.value_mut(id).data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p[i] = (p[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
