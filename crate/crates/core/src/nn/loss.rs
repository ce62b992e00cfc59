use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Mean softmax cross-entropy over a `[batch, classes]` logit matrix.
/// Returns the loss and its gradient with respect to the logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    logits.expect_rank(2, "cross_entropy")?;
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(Error::Shape {
            axis: 0,
            expected: n,
            actual: labels.len(),
            context: "cross_entropy labels".into(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); n * k];
    for (i, (row, &y)) in logits.data().chunks_exact(k).zip(labels).enumerate() {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += (z.ln() + max - row[y].as_f64()) * inv_n;
        for (j, e) in exps.iter().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            grad[i * k + j] = T::lit((e / z - target) * inv_n);
        }
    }
    Ok((loss, Tensor::new(vec![n, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(&[3, 4]);
        let (loss, _) = cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.5, 0.1, -0.4]).unwrap();
        let labels = [2, 0];
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let fd = (cross_entropy(&plus, &labels).unwrap().0
                - cross_entropy(&minus, &labels).unwrap().0)
                / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_out_of_range_label() {
        let logits = Tensor::<f64>::zeros(&[1, 4]);
        assert!(cross_entropy(&logits, &[4]).is_err());
    }
}
