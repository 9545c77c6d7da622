use super::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Central finite-difference estimate of a scalar function's gradient.
#[derive(Debug, Clone)]
pub struct FiniteDifference {
    pub grad: Tensor,
    /// Elements where the one-sided slopes disagree, which marks a kink
    /// (or a discontinuity) within `eps` of the probe point.
    pub unreliable: Vec<bool>,
}

impl FiniteDifference {
    pub fn any_unreliable(&self) -> bool {
        self.unreliable.iter().any(|&u| u)
    }
}

/// Probes `f` at `t ± eps·e_i` for every element `i`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor) -> f64,
    t: &Tensor,
    eps: f64,
) -> FiniteDifference {
    assert!(eps > 0.0, "finite difference step must be positive");
    let base = f(t);
    let mut probe = t.clone();
    let mut grad = Vec::with_capacity(t.len());
    let mut unreliable = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let central = (up - down) / (2.0 * eps);
        let forward = (up - base) / eps;
        let backward = (base - down) / eps;
        // Smooth functions give |forward - backward| ~ |f''| * eps.
        unreliable.push((forward - backward).abs() > 1e-2 * central.abs().max(1.0));
        grad.push(central);
    }
    FiniteDifference {
        grad: Tensor::new(t.shape().to_vec(), grad).expect("same shape as probe"),
        unreliable,
    }
}

/// `|analytic - numeric| / max(1, |numeric|)`, the error measure used by
/// every gradient check.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}
