use crate::error::{Error, Result};
use crate::tensor::huber_value;

fn check_lengths(preds: &[f64], targets: &[f64]) -> Result<()> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::contract(format!(
            "metrics need equal nonempty lengths, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    Ok(())
}

/// `sqrt(mean((p - t)^2))`.
pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(preds, targets)?;
    let sse: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

/// Pearson correlation. Constant inputs have no correlation and are an
/// error rather than 0.
pub fn ncc(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(preds, targets)?;
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let mt = targets.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        let (a, b) = (p - mp, t - mt);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(format!(
            "{} vector is constant",
            if sxx == 0.0 { "prediction" } else { "target" }
        )));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean Huber loss of residuals `pred - target`.
pub fn huber_loss(preds: &[f64], targets: &[f64], delta: f64) -> Result<f64> {
    check_lengths(preds, targets)?;
    Ok(preds
        .iter()
        .zip(targets)
        .map(|(p, t)| huber_value(p - t, delta))
        .sum::<f64>()
        / preds.len() as f64)
}

/// RMSE of always predicting the mean of `fit` on `targets`.
pub fn mean_baseline_rmse(fit: &[f64], targets: &[f64]) -> Result<f64> {
    if fit.is_empty() {
        return Err(Error::contract("baseline needs data to fit"));
    }
    let mean = fit.iter().sum::<f64>() / fit.len() as f64;
    rmse(&vec![mean; targets.len()], targets)
}
