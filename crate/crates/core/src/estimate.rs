//! Majority-vote accuracy of an ensemble of independent classifiers.

use crate::error::{Error, Result};

/// Smallest number of correct votes that forms a strict majority of `n`.
pub fn majority_threshold(n: usize) -> usize {
    n / 2 + 1
}

/// Distribution of the number of successes among independent Bernoulli trials
/// (Poisson-binomial), `pmf[k] = P(k successes)`.
pub fn poisson_binomial_pmf(probabilities: &[f64]) -> Vec<f64> {
    let mut pmf = vec![0.0; probabilities.len() + 1];
    pmf[0] = 1.0;
    for (i, &p) in probabilities.iter().enumerate() {
        for k in (1..=i + 1).rev() {
            pmf[k] = pmf[k] * (1.0 - p) + pmf[k - 1] * p;
        }
        pmf[0] *= 1.0 - p;
    }
    pmf
}

/// Probability that at least `floor(N/2) + 1` of `N` independent models are
/// correct, where model `i` is correct with probability `accuracies[i]`.
///
/// For equal accuracies this is the binomial tail
/// `sum_{i > N/2} C(N,i) a^i (1-a)^(N-i)`.
pub fn estimate_ensemble_accuracy(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::EmptyInput("accuracy list"));
    }
    if let Some(bad) = accuracies.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::config("accuracies", format!("{bad} outside (0,1)")));
    }
    let pmf = poisson_binomial_pmf(accuracies);
    Ok(pmf[majority_threshold(accuracies.len())..].iter().sum())
}
