use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradAudit {
    pub max_rel_err: f64,
    pub probes: Vec<Probe>,
}

/// Relative step of the central differences.
pub const AUDIT_STEP: f64 = 1e-3;

/// Below this magnitude gradients are compared absolutely.
const AUDIT_FLOOR: f64 = 1e-6;

/// Compares `grad` (the analytic gradient of `loss` at `model`, same
/// structure) against central finite differences at `n_probes` randomly
/// chosen scalar parameters.
pub fn grad_audit<M>(
    model: &M,
    loss: impl Fn(&M) -> Result<f64>,
    grad: &M,
    n_probes: usize,
    seed: u64,
) -> Result<GradAudit>
where
    M: Params<f64> + Clone,
{
    if n_probes == 0 {
        return Err(Error::InvalidArgument("grad_audit needs at least one probe".into()));
    }
    let sizes: Vec<(String, usize)> = model.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let total: usize = sizes.iter().map(|(_, s)| s).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("model has no parameters to probe".into()));
    }
    let grads: Vec<Vec<f64>> = grad.tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
    if grads.len() != sizes.len() || grads.iter().zip(&sizes).any(|(g, (_, s))| g.len() != *s) {
        return Err(Error::Shape("gradient structure differs from the model".into()));
    }
    let mut rng = SeededRng::derive(seed, 0x6175);
    let mut probes = Vec::with_capacity(n_probes);
    let mut scratch = model.clone();
    for _ in 0..n_probes {
        let mut flat = rng.below(total);
        let mut which = 0;
        while flat >= sizes[which].1 {
            flat -= sizes[which].1;
            which += 1;
        }
        let original = model.tensors()[which].1.data()[flat];
        let h = AUDIT_STEP * original.abs().max(1.0);
        let mut eval = |x: f64| -> Result<f64> {
            scratch.tensors_mut()[which].1.data_mut()[flat] = x;
            loss(&scratch)
        };
        let numeric = (eval(original + h)? - eval(original - h)?) / (2.0 * h);
        scratch.tensors_mut()[which].1.data_mut()[flat] = original;
        let analytic = grads[which][flat];
        let rel_err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(AUDIT_FLOOR);
        probes.push(Probe {
            name: sizes[which].0.clone(),
            index: flat,
            analytic,
            numeric,
            rel_err,
        });
    }
    Ok(GradAudit {
        max_rel_err: probes.iter().map(|p| p.rel_err).fold(0.0, f64::max),
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{fused_linear_ce, LossConfig};
    use crate::numerics::Tensor;

    #[test]
    fn linear_cross_entropy_is_exact() {
        let mut rng = SeededRng::new(4);
        let h: Tensor<f64> = rng.uniform_tensor(&[6, 5], 1.0);
        let w: Tensor<f64> = rng.uniform_tensor(&[7, 5], 1.0);
        let targets = vec![0, 3, 6, 1, 1, 2];
        let cfg = LossConfig::default();
        let g = fused_linear_ce(&h, &w, &targets, &cfg).unwrap().grad_weight.unwrap();
        let audit = grad_audit(&w, |w| Ok(fused_linear_ce(&h, w, &targets, &cfg)?.value), &g, 20, 1).unwrap();
        assert!(audit.max_rel_err < 1e-4, "{audit:?}");
        assert_eq!(audit.probes.len(), 20);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::<f64>::vector(vec![1.0, 2.0]);
        let wrong = Tensor::vector(vec![2.0, 2.0]);
        let audit = grad_audit(&x, |x| Ok(x.data().iter().map(|v| v * v).sum()), &wrong, 8, 0).unwrap();
        assert!(audit.max_rel_err > 0.4);
    }
}
