use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Mean per-class recall over the classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<f64, HarnessError> {
    if y_true.is_empty() {
        return Err(HarnessError::Validation("balanced accuracy of an empty set".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(HarnessError::Validation(format!("{} labels but {} predictions", y_true.len(), y_pred.len())));
    }
    if let Some(bad) = y_true.iter().chain(y_pred).find(|&&l| l >= classes) {
        return Err(HarnessError::Validation(format!("label {bad} outside 0..{classes}")));
    }
    let mut support = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        support[t] += 1;
        hits[t] += usize::from(t == p);
    }
    let recalls: Vec<f64> =
        support.iter().zip(&hits).filter(|(&s, _)| s > 0).map(|(&s, &h)| h as f64 / s as f64).collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Per-round results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u32,
    /// Mean training loss per client id.
    pub train_loss: Vec<Option<f64>>,
    /// Balanced accuracy per client id, present on evaluation rounds.
    pub test_balanced_acc: Option<Vec<f64>>,
    pub mean_acc: Option<f64>,
    pub std_acc: Option<f64>,
    /// Sampled block per client id, for sampling variants.
    pub sampled_block: Vec<Option<usize>>,
    /// Clients per sampled block, index `l - 1`.
    pub block_histogram: Vec<usize>,
}

impl MetricsRecord {
    pub fn new(round: u32, train_loss: Vec<Option<f64>>, sampled_block: Vec<Option<usize>>, sample_limit: usize) -> Self {
        let mut block_histogram = vec![0; sample_limit];
        for l in sampled_block.iter().flatten() {
            if let Some(slot) = block_histogram.get_mut(l - 1) {
                *slot += 1;
            }
        }
        Self { round, train_loss, test_balanced_acc: None, mean_acc: None, std_acc: None, sampled_block, block_histogram }
    }

    pub fn set_accuracy(&mut self, acc: Vec<f64>) {
        if let Some((m, s)) = mean_std(&acc) {
            self.mean_acc = Some(m);
            self.std_acc = Some(s);
        }
        self.test_balanced_acc = Some(acc);
    }
}
