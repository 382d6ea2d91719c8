//! Linear patch codec: each `p x p` RGB patch maps to a `C`-dim latent.
//!
//! Fitting solves the linear autoencoder in closed form: the encoder is the
//! top-`C` principal subspace of the training patches, the decoder its
//! transpose plus the patch mean, and latents are divided by one global
//! scale so their average variance is one.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCodec {
    pub patch: usize,
    pub channels: usize,
    /// Per-patch-dimension mean, length `3 p^2`.
    pub mean: Vec<f64>,
    /// Encoder rows: `channels x 3p^2`, already divided by `scale`.
    pub encoder: Vec<f64>,
    /// Decoder: `channels x 3p^2`, already multiplied by `scale`.
    pub decoder: Vec<f64>,
}

impl PatchCodec {
    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Identity codec for `patch = 1`, `channels = 3`.
    pub fn identity() -> Self {
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        Self {
            patch: 1,
            channels: 3,
            mean: vec![0.0; 3],
            encoder: eye.clone(),
            decoder: eye,
        }
    }

    pub fn fit(images: &[Image], patch: usize, channels: usize) -> Result<Self> {
        let dim = 3 * patch * patch;
        if channels == 0 || channels > dim {
            return Err(Error::config(format!("codec channels must be in 1..={dim}")));
        }
        let first = images.first().ok_or_else(|| Error::config("codec needs training images"))?;
        let mut mean = vec![0.0; dim];
        let mut count = 0usize;
        let mut patches = Vec::new();
        for img in images {
            if img.width != first.width || img.height != first.height {
                return Err(Error::shape("codec training images differ in size"));
            }
            for p in extract_patches(img, patch)? {
                for (m, x) in mean.iter_mut().zip(&p) {
                    *m += x;
                }
                count += 1;
                patches.push(p);
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for p in &patches {
            for i in 0..dim {
                let di = p[i] - mean[i];
                for j in i..dim {
                    cov[(i, j)] += di * (p[j] - mean[j]);
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[(i, j)] / count as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let kept = &order[..channels];
        let mean_var = kept.iter().map(|&i| eig.eigenvalues[i].max(0.0)).sum::<f64>() / channels as f64;
        let scale = mean_var.sqrt().max(1e-8);
        let mut encoder = Vec::with_capacity(channels * dim);
        let mut decoder = Vec::with_capacity(channels * dim);
        for &i in kept {
            let col = eig.eigenvectors.column(i);
            // Fix the sign so the largest-magnitude entry is positive.
            let pivot = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            encoder.extend(col.iter().map(|v| sign * v / scale));
            decoder.extend(col.iter().map(|v| sign * v * scale));
        }
        Ok(Self {
            patch,
            channels,
            mean,
            encoder,
            decoder,
        })
    }

    /// Encodes an `H x W` image into an `h x w x C` latent.
    pub fn encode(&self, image: &Image) -> Result<Tensor> {
        let (h, w) = (image.height / self.patch, image.width / self.patch);
        let dim = self.patch_dim();
        let mut out = Vec::with_capacity(h * w * self.channels);
        for p in extract_patches(image, self.patch)? {
            for c in 0..self.channels {
                let row = &self.encoder[c * dim..(c + 1) * dim];
                out.push(row.iter().zip(p.iter().zip(&self.mean)).map(|(e, (x, m))| e * (x - m)).sum());
            }
        }
        Tensor::new(vec![h, w, self.channels], out)
    }

    /// Inverse of [`encode`](Self::encode); pixels are clamped to `[0, 1]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Image> {
        let shape = latent.shape();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::shape(format!(
                "latent shape {shape:?} for a {}-channel codec",
                self.channels
            )));
        }
        let (h, w, p) = (shape[0], shape[1], self.patch);
        let dim = self.patch_dim();
        let mut img = Image::filled(w * p, h * p, [0.0; 3]);
        for by in 0..h {
            for bx in 0..w {
                let z = &latent.data()[(by * w + bx) * self.channels..(by * w + bx + 1) * self.channels];
                let mut patch = self.mean.clone();
                for (c, zc) in z.iter().enumerate() {
                    for (x, d) in patch.iter_mut().zip(&self.decoder[c * dim..(c + 1) * dim]) {
                        *x += zc * d;
                    }
                }
                for dy in 0..p {
                    for dx in 0..p {
                        let i = (dy * p + dx) * 3;
                        let px = [patch[i], patch[i + 1], patch[i + 2]].map(|v| v.clamp(0.0, 1.0));
                        img.set_pixel(bx * p + dx, by * p + dy, px);
                    }
                }
            }
        }
        Ok(img)
    }
}

/// Patches in row-major block order, each flattened as `(dy, dx, rgb)`.
fn extract_patches(image: &Image, p: usize) -> Result<Vec<Vec<f64>>> {
    if p == 0 || image.width % p != 0 || image.height % p != 0 {
        return Err(Error::shape(format!(
            "{}x{} image not divisible by patch {p}",
            image.width, image.height
        )));
    }
    let (h, w) = (image.height / p, image.width / p);
    let mut out = Vec::with_capacity(h * w);
    for by in 0..h {
        for bx in 0..w {
            let mut v = Vec::with_capacity(3 * p * p);
            for dy in 0..p {
                for dx in 0..p {
                    v.extend_from_slice(&image.pixel(bx * p + dx, by * p + dy));
                }
            }
            out.push(v);
        }
    }
    Ok(out)
}

pub fn rmse(a: &Image, b: &Image) -> f64 {
    let n = a.data.len() as f64;
    (a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_round_trip_is_exact() {
        let img = Image::new(2, 1, vec![0.1, 0.2, 0.3, 0.9, 0.8, 0.7]).unwrap();
        let c = PatchCodec::identity();
        let z = c.encode(&img).unwrap();
        assert_eq!(z.shape(), &[1, 2, 3]);
        assert_eq!(c.decode(&z).unwrap(), img);
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let img = Image::filled(6, 4, [0.5; 3]);
        let codec = PatchCodec::fit(&[Image::filled(8, 8, [0.2; 3]), Image::filled(8, 8, [0.7; 3])], 4, 2).unwrap();
        assert!(matches!(codec.encode(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn fitted_codec_reconstructs_its_span() {
        // Images made of flat-coloured 4x4 blocks lie in a 3-dim patch span.
        let mut imgs = Vec::new();
        for s in 0..6 {
            let mut img = Image::filled(8, 8, [0.0; 3]);
            for y in 0..8 {
                for x in 0..8 {
                    let k = ((x / 4) + 2 * (y / 4) + s) as f64;
                    img.set_pixel(x, y, [(k * 0.13) % 1.0, (k * 0.29) % 1.0, (k * 0.41) % 1.0]);
                }
            }
            imgs.push(img);
        }
        let codec = PatchCodec::fit(&imgs, 4, 3).unwrap();
        for img in &imgs {
            let back = codec.decode(&codec.encode(img).unwrap()).unwrap();
            assert!(rmse(img, &back) < 1e-9);
        }
    }
}
