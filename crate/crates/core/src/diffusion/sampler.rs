use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::VideoModel;
use super::schedule::NoiseSchedule;
use crate::encoder::{ConditionSet, SampleCondition};
use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor};

/// `uncond + s * (cond - uncond)`.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, scale: f64) -> Result<Tensor> {
    uncond.zip_map(cond, |u, c| u + scale * (c - u))
}

/// Descending sub-schedule of `steps` timesteps ending at the first step
/// above 0, starting at `start`.
pub fn ddim_timesteps(start: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::config("ddim needs at least one step"));
    }
    if steps > start {
        return Err(Error::config(format!("{steps} ddim steps exceed start step {start}")));
    }
    Ok((1..=steps).rev().map(|k| (start * k).div_ceil(steps)).collect())
}

/// Sampling settings for [`ddim_sample`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimOptions {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Clamp the denoised estimate to `[-c, c]` at every step.
    pub clip_x0: Option<f64>,
    pub seed: u64,
}

impl DdimOptions {
    pub fn new(steps: usize, cfg_scale: f64, seed: u64) -> Self {
        Self {
            steps,
            cfg_scale,
            clip_x0: None,
            seed,
        }
    }
}

/// Deterministic DDIM from `x` at step `start` down to a clean sample.
/// `eps_fn(x_t, t)` predicts the noise. With `clip_x0`, the denoised
/// estimate is clamped and the noise re-derived from it.
pub fn ddim_from<F>(
    mut x: Tensor,
    start: usize,
    steps: usize,
    clip_x0: Option<f64>,
    schedule: &NoiseSchedule,
    mut eps_fn: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if start > schedule.len() {
        return Err(Error::config(format!("start step {start} exceeds schedule length {}", schedule.len())));
    }
    let ts = ddim_timesteps(start, steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = eps_fn(&x, t)?;
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        x = x.zip_map(&eps, |xt, e| {
            let x0 = (xt - sb * e) / sa;
            match clip_x0 {
                Some(c) if x0.abs() > c => {
                    let x0 = x0.clamp(-c, c);
                    pa * x0 + pb * ((xt - sa * x0) / sb)
                }
                _ => pa * x0 + pb * e,
            }
        })?;
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("ddim state at step {t}")));
        }
    }
    Ok(x)
}

/// Samples one latent video per condition from seeded Gaussian noise with
/// classifier-free guidance at `scale`.
pub fn ddim_sample(model: &VideoModel, samples: &[SampleCondition], opts: &DdimOptions) -> Result<Vec<Tensor>> {
    let scale = opts.cfg_scale;
    let cfg = &model.cfg.encoder;
    let b = samples.len();
    let rows = cfg.frames * cfg.pixels();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x = Tensor::randn(&[b * rows, cfg.latent_channels], 1.0, &mut rng);

    let guided = scale != 1.0;
    let encode = |keep: bool| -> Result<(Tensor, Tensor, Tensor)> {
        let mut tape = Tape::inference();
        let c = model.encode(&mut tape, &model.store, samples, &vec![keep; b])?;
        Ok((tape.value(c.semantic).clone(), tape.value(c.pixel).clone(), tape.value(c.plucker).clone()))
    };
    let cond = encode(true)?;
    let uncond = if guided { Some(encode(false)?) } else { None };
    let run = |x: &Tensor, t: usize, c: &(Tensor, Tensor, Tensor)| -> Result<Tensor> {
        let mut tape = Tape::inference();
        let set = ConditionSet {
            batch: b,
            semantic: tape.constant(c.0.clone()),
            pixel: tape.constant(c.1.clone()),
            plucker: tape.constant(c.2.clone()),
        };
        let z = tape.constant(x.clone());
        let out = model.denoiser.forward(&mut tape, &model.store, cfg, z, &vec![t; b], &set)?;
        Ok(tape.value(out).clone())
    };
    let out = ddim_from(x, model.schedule.len(), opts.steps, opts.clip_x0, &model.schedule, |x, t| {
        let c = run(x, t, &cond)?;
        match &uncond {
            Some(u) => cfg_combine(&c, &run(x, t, u)?, scale),
            None => Ok(c),
        }
    })?;
    Ok((0..b).map(|i| out.slice_rows(i * rows, rows)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{build_schedule, forward_noising};
    use rand::SeedableRng;

    #[test]
    fn cfg_combine_cases() {
        let c = Tensor::from_matrix(1, 2, vec![1.0, 3.0]);
        let u = Tensor::from_matrix(1, 2, vec![0.0, 1.0]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &u, 7.5).unwrap().data()[0], 7.5);
    }

    #[test]
    fn timesteps_are_strided_and_distinct() {
        assert_eq!(ddim_timesteps(1000, 4).unwrap(), vec![1000, 750, 500, 250]);
        assert_eq!(ddim_timesteps(5, 5).unwrap(), vec![5, 4, 3, 2, 1]);
        let ts = ddim_timesteps(1000, 25).unwrap();
        assert_eq!(ts.len(), 25);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    fn oracle_run(start: usize, steps: usize) -> (Tensor, Tensor) {
        let s = build_schedule(1000, 1e-4, 2e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(start as u64);
        let z0 = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let eps = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let zt = forward_noising(&z0, start, &eps, &s).unwrap();
        let out = ddim_from(zt, start, steps, None, &s, |x, t| {
            let ab = s.alpha_bar(t);
            x.zip_map(&z0, |xt, z| (xt - ab.sqrt() * z) / (1.0 - ab).sqrt())
        })
        .unwrap();
        (z0, out)
    }

    #[test]
    fn true_noise_oracle_inverts_noising() {
        for start in [1, 10, 250, 999, 1000] {
            let (z0, one) = oracle_run(start, 1);
            assert!(one.max_abs_diff(&z0) < 1e-6, "start {start}");
        }
        let (z0, all) = oracle_run(1000, 1000);
        let (_, one) = oracle_run(1000, 1);
        assert!(all.max_abs_diff(&one) < 1e-5);
        assert!(all.max_abs_diff(&z0) < 1e-5);
    }

    #[test]
    fn clipping_bounds_the_estimate_and_is_inert_when_loose() {
        let s = build_schedule(1000, 1e-4, 2e-2).unwrap();
        let x = Tensor::from_matrix(1, 3, vec![0.5, -2.0, 3.0]);
        let zero = |x: &Tensor, _t: usize| Ok(x.map(|_| 0.0));
        // A zero noise estimate leaves x0 = x_t / sqrt(ab), far outside 1.
        let clipped = ddim_from(x.clone(), 1000, 1, Some(1.0), &s, zero).unwrap();
        assert!(clipped.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        let loose = ddim_from(x.clone(), 10, 3, Some(1e9), &s, zero).unwrap();
        let free = ddim_from(x, 10, 3, None, &s, zero).unwrap();
        assert_eq!(loose, free);
    }
}
