//! Next-item recommendation loss and the dynamic magnitude regularizer that
//! anchors high-Fisher parameters to the previous local values and low-Fisher
//! parameters to the downloaded global values.

use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::vrm::FisherVector;

#[derive(Clone, Debug)]
pub struct LossConfig {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma1: 0.05,
            gamma2: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(Error::Config("gamma1 and gamma2 must be >= 0".into()));
        }
        Ok(())
    }
}

/// Softmax cross-entropy of full-vocabulary scores against a 1-based target
/// item id: `-log softmax(scores)[target]`.
pub fn rec_loss(scores: &[f64], target: u32) -> Result<f64> {
    if target == 0 || target as usize > scores.len() {
        return Err(Error::Contract(format!(
            "rec_loss: target {target} outside 1..={}",
            scores.len()
        )));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|&v| (v - max).exp()).sum();
    Ok(z.ln() + max - scores[target as usize - 1])
}

fn check_dml_inputs(
    theta: &ParameterVector,
    theta_local_prev: &ParameterVector,
    theta_global: &ParameterVector,
    i_hat: &FisherVector,
) -> Result<()> {
    if !theta.same_layout(theta_local_prev) || !theta.same_layout(theta_global) {
        return Err(Error::Contract(
            "dynamic_magnitude_loss: layer maps do not match".into(),
        ));
    }
    if !i_hat.is_normalized() {
        return Err(Error::Contract(
            "dynamic_magnitude_loss: fisher values must be normalized".into(),
        ));
    }
    if i_hat.len() != theta.len() {
        return Err(Error::Contract(format!(
            "dynamic_magnitude_loss: {} fisher values vs {} parameters",
            i_hat.len(),
            theta.len()
        )));
    }
    Ok(())
}

/// L_DML = gamma1 * sum_m I_m (theta_m - prev_m)^2
///       + gamma2 * sum_m (1 - I_m)(theta_m - global_m)^2
pub fn dynamic_magnitude_loss(
    theta: &ParameterVector,
    theta_local_prev: &ParameterVector,
    theta_global: &ParameterVector,
    i_hat: &FisherVector,
    cfg: &LossConfig,
) -> Result<f64> {
    check_dml_inputs(theta, theta_local_prev, theta_global, i_hat)?;
    let mut local_term = 0.0;
    let mut global_term = 0.0;
    for (((&t, &p), &g), &w) in theta
        .values()
        .iter()
        .zip(theta_local_prev.values())
        .zip(theta_global.values())
        .zip(i_hat.values())
    {
        let dl = t - p;
        let dg = t - g;
        local_term += w * dl * dl;
        global_term += (1.0 - w) * dg * dg;
    }
    Ok(cfg.gamma1 * local_term + cfg.gamma2 * global_term)
}

/// Accumulate the closed-form gradient of [`dynamic_magnitude_loss`] with
/// respect to `theta` into `out`.
pub fn dynamic_magnitude_grad(
    theta: &ParameterVector,
    theta_local_prev: &ParameterVector,
    theta_global: &ParameterVector,
    i_hat: &FisherVector,
    cfg: &LossConfig,
    out: &mut [f64],
) -> Result<()> {
    check_dml_inputs(theta, theta_local_prev, theta_global, i_hat)?;
    if out.len() != theta.len() {
        return Err(Error::Dimension(format!(
            "dynamic_magnitude_grad: accumulator of {} values vs {} parameters",
            out.len(),
            theta.len()
        )));
    }
    for (o, (((&t, &p), &g), &w)) in out.iter_mut().zip(
        theta
            .values()
            .iter()
            .zip(theta_local_prev.values())
            .zip(theta_global.values())
            .zip(i_hat.values()),
    ) {
        *o += 2.0 * cfg.gamma1 * w * (t - p) + 2.0 * cfg.gamma2 * (1.0 - w) * (t - g);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::LayerMap;
    use std::sync::Arc;

    fn pv(values: Vec<f64>) -> ParameterVector {
        let layout = Arc::new(LayerMap::new([("g".to_string(), values.len())]));
        ParameterVector::new(layout, values).unwrap()
    }

    #[test]
    fn saturated_softmax_loss_vanishes() {
        let mut scores = vec![0.0; 8];
        scores[2] = 1000.0;
        assert!(rec_loss(&scores, 3).unwrap() < 1e-6);
    }

    #[test]
    fn uniform_scores_give_log_vocab() {
        let scores = vec![1.25; 500];
        let loss = rec_loss(&scores, 77).unwrap();
        assert!((loss - 500.0f64.ln()).abs() < 1e-12);
        assert!((loss - 6.2146).abs() < 1e-4);
    }

    #[test]
    fn rec_loss_matches_naive_softmax_oracle() {
        let scores: Vec<f64> = (0..10).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.8).collect();
        for target in 1..=10u32 {
            let got = rec_loss(&scores, target).unwrap();
            let exp: Vec<f64> = scores.iter().map(|&v| v.exp()).collect();
            let z: f64 = exp.iter().sum();
            let want = -(exp[target as usize - 1] / z).ln();
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rec_loss_rejects_bad_target() {
        assert!(matches!(
            rec_loss(&[0.0, 1.0], 0).unwrap_err(),
            Error::Contract(_)
        ));
        assert!(matches!(
            rec_loss(&[0.0, 1.0], 3).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn dml_zero_when_anchored_everywhere() {
        let theta = pv(vec![1.0, 2.0]);
        let i_hat = FisherVector::new(vec![0.3, 0.9], true).unwrap();
        let cfg = LossConfig::default();
        let loss = dynamic_magnitude_loss(&theta, &theta, &theta, &i_hat, &cfg).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn dml_zero_when_gammas_are_zero() {
        let theta = pv(vec![5.0, -3.0]);
        let prev = pv(vec![0.0, 0.0]);
        let glob = pv(vec![1.0, 1.0]);
        let i_hat = FisherVector::new(vec![0.5, 0.5], true).unwrap();
        let cfg = LossConfig {
            gamma1: 0.0,
            gamma2: 0.0,
        };
        assert_eq!(
            dynamic_magnitude_loss(&theta, &prev, &glob, &i_hat, &cfg).unwrap(),
            0.0
        );
    }

    #[test]
    fn dml_direct_evaluation() {
        let theta = pv(vec![2.0, 2.0]);
        let prev = pv(vec![1.0, 1.0]);
        let glob = pv(vec![0.0, 0.0]);
        let i_hat = FisherVector::new(vec![1.0, 0.0], true).unwrap();
        let cfg = LossConfig {
            gamma1: 0.05,
            gamma2: 0.1,
        };
        let loss = dynamic_magnitude_loss(&theta, &prev, &glob, &i_hat, &cfg).unwrap();
        assert!((loss - 0.45).abs() < 1e-15);
    }

    #[test]
    fn dml_is_nonnegative_and_positive_off_anchor() {
        let theta = pv(vec![1.0, 1.0]);
        let prev = pv(vec![0.5, 1.0]);
        let glob = pv(vec![1.0, 1.0]);
        let i_hat = FisherVector::new(vec![1.0, 0.0], true).unwrap();
        let cfg = LossConfig::default();
        let loss = dynamic_magnitude_loss(&theta, &prev, &glob, &i_hat, &cfg).unwrap();
        assert!(loss > 0.0);
    }

    #[test]
    fn dml_with_unit_fisher_is_pure_proximal_term() {
        let theta = pv(vec![2.0, 3.0]);
        let prev = pv(vec![1.0, 1.0]);
        let glob = pv(vec![-9.0, 4.0]);
        let i_hat = FisherVector::new(vec![1.0, 1.0], true).unwrap();
        let cfg = LossConfig {
            gamma1: 0.05,
            gamma2: 0.1,
        };
        let loss = dynamic_magnitude_loss(&theta, &prev, &glob, &i_hat, &cfg).unwrap();
        let want = 0.05 * ((2.0f64 - 1.0).powi(2) + (3.0f64 - 1.0).powi(2));
        assert!((loss - want).abs() < 1e-15);
    }

    #[test]
    fn dml_gradient_matches_finite_differences() {
        let theta = pv(vec![0.4, -0.2, 0.9]);
        let prev = pv(vec![0.1, 0.3, -0.5]);
        let glob = pv(vec![-0.3, 0.8, 0.2]);
        let i_hat = FisherVector::new(vec![0.2, 0.7, 1.0], true).unwrap();
        let cfg = LossConfig::default();
        let mut grad = vec![0.0; 3];
        dynamic_magnitude_grad(&theta, &prev, &glob, &i_hat, &cfg, &mut grad).unwrap();
        let h = 1e-5;
        for m in 0..3 {
            let mut up = theta.clone();
            up.values_mut()[m] += h;
            let mut down = theta.clone();
            down.values_mut()[m] -= h;
            let fd = (dynamic_magnitude_loss(&up, &prev, &glob, &i_hat, &cfg).unwrap()
                - dynamic_magnitude_loss(&down, &prev, &glob, &i_hat, &cfg).unwrap())
                / (2.0 * h);
            let rel = (grad[m] - fd).abs() / grad[m].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "element {m}: {} vs {fd}", grad[m]);
        }
    }

    #[test]
    fn dml_rejects_layout_mismatch() {
        let theta = pv(vec![1.0, 2.0]);
        let other = ParameterVector::new(
            Arc::new(LayerMap::new([("a".to_string(), 1), ("b".to_string(), 1)])),
            vec![1.0, 2.0],
        )
        .unwrap();
        let i_hat = FisherVector::new(vec![0.5, 0.5], true).unwrap();
        assert!(matches!(
            dynamic_magnitude_loss(&theta, &other, &theta, &i_hat, &LossConfig::default())
                .unwrap_err(),
            Error::Contract(_)
        ));
    }
}
