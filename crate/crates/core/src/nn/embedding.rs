use crate::error::{Error, Result};

/// Interleaved sinusoidal embedding: channel `2i` is `sin(index * w_i)`,
/// channel `2i + 1` is `cos(index * w_i)`, with `w_i = 10000^(-2i / dim)`.
pub fn sinusoidal_embedding(index: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!("embedding dim must be even and positive, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let a = index * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_zero() {
        let e = sinusoidal_embedding(0.0, 8).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
    }

    #[test]
    fn norm_is_sqrt_half_dim() {
        for idx in [0.0, 1.0, 7.0, 999.0] {
            let e = sinusoidal_embedding(idx, 16).unwrap();
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 8f64.sqrt()).abs() < 1e-12);
            assert!(n <= 4.0);
        }
    }

    #[test]
    fn odd_dim_is_rejected() {
        assert!(sinusoidal_embedding(1.0, 7).is_err());
        assert!(sinusoidal_embedding(1.0, 0).is_err());
    }

    #[test]
    fn first_sixteen_indices_are_distinct() {
        let embs: Vec<Vec<f64>> = (0..16).map(|i| sinusoidal_embedding(i as f64, 16).unwrap()).collect();
        let mut min = f64::INFINITY;
        for i in 0..16 {
            for j in 0..i {
                let d = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                min = min.min(d);
            }
        }
        assert!(min > 0.0);
    }
}
