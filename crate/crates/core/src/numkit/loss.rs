use super::matrix::Matrix;
use crate::error::{input_err, Result};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_inplace(out.row_mut(i));
    }
    out
}

pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() == 0 {
        return Err(input_err!("softmax cross-entropy needs at least one example"));
    }
    if labels.len() != logits.rows() {
        return Err(input_err!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        ));
    }
    let c = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(input_err!("label {bad} out of range for {c} classes"));
    }
    Ok(())
}

/// Negative log-likelihood of each row's label.
pub fn softmax_xent_per_example(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| row_nll(logits.row(i), y))
        .collect())
}

fn row_nll(row: &[f64], y: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - (row[y] - max)
}

/// Mean cross-entropy and its gradient `(softmax − onehot) / n`.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(logits, labels)?;
    let n = logits.rows();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = logits.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss += row_nll(logits.row(i), y);
        let row = grad.row_mut(i);
        softmax_inplace(row);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}
