use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Uniform,
    LogWeighted,
}

/// Mean squared error over all entries.
pub fn loss_uniform(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    if eps.shape() != eps_hat.shape() {
        return Err(Error::shape("loss operands differ in shape"));
    }
    let n = eps.len().max(1) as f64;
    Ok(eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `log10(k + 1)` for `k = 0..frames`.
pub fn log_frame_weights(frames: usize) -> Vec<f64> {
    (0..frames).map(|k| ((k + 1) as f64).log10()).collect()
}

/// Normalized log-weighted mean of per-frame errors; frame 0 has weight 0.
pub fn loss_log_weighted(per_frame: &[f64]) -> Result<f64> {
    if per_frame.len() < 2 {
        return Err(Error::config("log-weighted loss needs at least two frames"));
    }
    let w = log_frame_weights(per_frame.len());
    let norm: f64 = w.iter().sum();
    Ok(w.iter().zip(per_frame).map(|(w, e)| w * e).sum::<f64>() / norm)
}

/// Mean squared error of each of `frames` equal row blocks.
pub fn per_frame_sq_errors(eps: &Tensor, eps_hat: &Tensor, frames: usize) -> Result<Vec<f64>> {
    if eps.shape() != eps_hat.shape() || frames == 0 || eps.len() % frames != 0 {
        return Err(Error::shape("per-frame error operands"));
    }
    let chunk = eps.len() / frames;
    Ok(eps
        .data()
        .chunks(chunk)
        .zip(eps_hat.data().chunks(chunk))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / chunk as f64)
        .collect())
}

/// Per-row weights that make `weighted_sq_err` equal the batch mean of the
/// chosen loss, for `batch` clips of `frames` frames with `rows_per_frame`
/// rows of `cols` entries each.
pub fn row_weights(kind: LossKind, batch: usize, frames: usize, rows_per_frame: usize, cols: usize) -> Vec<f64> {
    let per_entry = 1.0 / (batch * rows_per_frame * cols) as f64;
    let frame_w: Vec<f64> = match kind {
        LossKind::Uniform => vec![1.0 / frames as f64; frames],
        LossKind::LogWeighted => {
            let w = log_frame_weights(frames);
            let norm: f64 = w.iter().sum();
            w.into_iter().map(|x| x / norm).collect()
        }
    };
    (0..batch)
        .flat_map(|_| frame_w.iter().flat_map(|&w| std::iter::repeat_n(w * per_entry, rows_per_frame)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = Tensor::randn(&[5, 4], 1.0, &mut rng);
        assert_eq!(loss_uniform(&e, &e).unwrap(), 0.0);
        assert!((loss_uniform(&e, &e.map(|x| x + 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let f = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let mut acc = 0.0;
        for i in 0..20 {
            let d = e.data()[i] - f.data()[i];
            acc += d * d;
        }
        assert!((loss_uniform(&e, &f).unwrap() - acc / 20.0).abs() < 1e-12);
    }

    #[test]
    fn log_weighting_properties() {
        assert_eq!(log_frame_weights(16)[0], 0.0);
        assert!((loss_log_weighted(&[0.7; 16]).unwrap() - 0.7).abs() < 1e-12);
        let mut only0 = [0.0; 16];
        only0[0] = 5.0;
        assert_eq!(loss_log_weighted(&only0).unwrap(), 0.0);
        assert!(loss_log_weighted(&[1.0]).is_err());
    }

    #[test]
    fn late_errors_weigh_more_than_early() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut late = [0.0; 16];
            let mut early = [0.0; 16];
            for k in 9..16 {
                late[k] = rng.random_range(0.1..2.0);
            }
            for k in 0..7 {
                early[k] = rng.random_range(0.1..2.0);
            }
            let mean = |e: &[f64]| e.iter().sum::<f64>() / 16.0;
            assert!(loss_log_weighted(&late).unwrap() > mean(&late));
            assert!(loss_log_weighted(&early).unwrap() < mean(&early));
        }
    }

    #[test]
    fn row_weights_reproduce_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, t, hw, c) = (2, 4, 3, 2);
        let e = Tensor::randn(&[b * t * hw, c], 1.0, &mut rng);
        let f = Tensor::randn(&[b * t * hw, c], 1.0, &mut rng);
        for kind in [LossKind::Uniform, LossKind::LogWeighted] {
            let w = row_weights(kind, b, t, hw, c);
            let direct: f64 = (0..b * t * hw)
                .map(|r| w[r] * e.row(r).iter().zip(f.row(r)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .sum();
            let mut expected = 0.0;
            for i in 0..b {
                let ei = e.slice_rows(i * t * hw, t * hw);
                let fi = f.slice_rows(i * t * hw, t * hw);
                expected += match kind {
                    LossKind::Uniform => loss_uniform(&ei, &fi).unwrap(),
                    LossKind::LogWeighted => loss_log_weighted(&per_frame_sq_errors(&ei, &fi, t).unwrap()).unwrap(),
                };
            }
            assert!((direct - expected / b as f64).abs() < 1e-12);
        }
    }
}
