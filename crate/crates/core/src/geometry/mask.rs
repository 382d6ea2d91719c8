use rayon::prelude::*;

use super::epipolar::line_distance_unchecked;
use super::{
    epipolar_line, fundamental_matrix, relative_pose, CameraPose, Intrinsics, PURE_ROTATION_EPS,
};
use crate::error::{Error, Result};

/// Row-major packed bit matrix; each row starts on a word boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        Self {
            rows,
            cols,
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            m.fill_row(r);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.rows && c < self.cols);
        (self.words[r * self.words_per_row + c / 64] >> (c % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        let w = &mut self.words[r * self.words_per_row + c / 64];
        if value {
            *w |= 1 << (c % 64);
        } else {
            *w &= !(1 << (c % 64));
        }
    }

    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn row_is_zero(&self, r: usize) -> bool {
        self.row_words(r).iter().all(|&w| w == 0)
    }

    pub fn fill_row(&mut self, r: usize) {
        let row = &mut self.words[r * self.words_per_row..(r + 1) * self.words_per_row];
        row.fill(u64::MAX);
        let tail = self.cols % 64;
        if tail != 0 {
            if let Some(last) = row.last_mut() {
                *last = (1u64 << tail) - 1;
            }
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn row_count_ones(&self, r: usize) -> usize {
        self.row_words(r).iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Permutes columns in blocks: output block `i` is input block `order[i]`.
    pub fn permute_column_blocks(&self, block: usize, order: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, order.len() * block);
        for r in 0..self.rows {
            for (dst, &src) in order.iter().enumerate() {
                for c in 0..block {
                    if self.get(r, src * block + c) {
                        out.set(r, dst * block + c, true);
                    }
                }
            }
        }
        out
    }
}

/// Binary relevance mask of shape `(T*h*w) x (N*h*w)` between generated
/// frames and context views. Row `(t, v, u)` is `t*h*w + v*w + u`; column
/// `(j, v', u')` is `j*h*w + v'*w + u'`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarMask {
    pub frames: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub threshold: f64,
    pub bits: BitMatrix,
}

impl EpipolarMask {
    /// Mask admitting every context pixel (the unmasked ablation).
    pub fn all_ones(frames: usize, views: usize, height: usize, width: usize) -> Self {
        let hw = height * width;
        Self {
            frames,
            views,
            height,
            width,
            threshold: f64::INFINITY,
            bits: BitMatrix::ones(frames * hw, views * hw),
        }
    }

    pub fn rows(&self) -> usize {
        self.bits.rows()
    }

    pub fn cols(&self) -> usize {
        self.bits.cols()
    }

    /// The `(h*w) x (h*w)` block relating query frame `t` to view `j`.
    pub fn slice(&self, t: usize, j: usize) -> BitMatrix {
        let hw = self.height * self.width;
        let mut out = BitMatrix::zeros(hw, hw);
        for r in 0..hw {
            for c in 0..hw {
                if self.bits.get(t * hw + r, j * hw + c) {
                    out.set(r, c, true);
                }
            }
        }
        out
    }

    /// Reorders context views: new view `i` is old view `order[i]`.
    pub fn permute_views(&self, order: &[usize]) -> Self {
        Self {
            views: order.len(),
            bits: self.bits.permute_column_blocks(self.height * self.width, order),
            ..self.clone()
        }
    }
}

/// Half the diagonal of an `h x w` grid.
pub fn default_threshold(h: usize, w: usize) -> f64 {
    ((h * h + w * w) as f64).sqrt() / 2.0
}

/// Builds the epipolar mask between `query_poses` and `ctx_poses` on an
/// `h x w` grid whose intrinsics are `k`.
///
/// An entry is set when the context pixel lies within `threshold` of the
/// query pixel's epipolar line. A `(t, j)` block with pure-rotation geometry,
/// or a query pixel whose line is degenerate, admits the whole view. Any row
/// left empty afterwards admits every context pixel.
pub fn epipolar_mask(
    query_poses: &[CameraPose],
    ctx_poses: &[CameraPose],
    k: &Intrinsics,
    h: usize,
    w: usize,
    threshold: f64,
) -> Result<EpipolarMask> {
    if query_poses.is_empty() || ctx_poses.is_empty() {
        return Err(Error::shape("need at least one query and one context pose"));
    }
    if k.width != w || k.height != h {
        return Err(Error::shape(format!(
            "intrinsics are {}x{} but mask grid is {w}x{h}",
            k.width, k.height
        )));
    }
    if !(threshold > 0.0) {
        return Err(Error::config(format!("threshold must be positive, got {threshold}")));
    }
    k.validate()?;

    let hw = h * w;
    let (frames, views) = (query_poses.len(), ctx_poses.len());
    let fundamentals: Vec<Option<nalgebra::Matrix3<f64>>> = query_poses
        .iter()
        .flat_map(|q| {
            ctx_poses.iter().map(move |c| {
                if relative_pose(q, c).translation.norm() < PURE_ROTATION_EPS {
                    None
                } else {
                    Some(fundamental_matrix(q, k, c, k))
                }
            })
        })
        .collect();

    let mut bits = BitMatrix::zeros(frames * hw, views * hw);
    let wpr = bits.words_per_row;
    bits.words
        .par_chunks_mut(wpr)
        .enumerate()
        .for_each(|(row, words)| {
            let t = row / hw;
            let (v, u) = ((row % hw) / w, row % w);
            let mut any = false;
            for j in 0..views {
                let base = j * hw;
                let mut set = |c: usize| words[c / 64] |= 1 << (c % 64);
                let line = fundamentals[t * views + j]
                    .map(|f| epipolar_line(&f, (u as f64, v as f64)))
                    .filter(|l| !l.degenerate);
                match line {
                    None => {
                        (base..base + hw).for_each(&mut set);
                        any = true;
                    }
                    Some(line) => {
                        for c in 0..hw {
                            let px = ((c % w) as f64, (c / w) as f64);
                            if line_distance_unchecked(&line, px) <= threshold {
                                set(base + c);
                                any = true;
                            }
                        }
                    }
                }
            }
            if !any {
                words.fill(u64::MAX);
                let tail = (views * hw) % 64;
                if tail != 0 {
                    words[wpr - 1] = (1u64 << tail) - 1;
                }
            }
        });

    Ok(EpipolarMask {
        frames,
        views,
        height: h,
        width: w,
        threshold,
        bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn bit_matrix_basics() {
        let mut m = BitMatrix::zeros(3, 70);
        assert!(m.row_is_zero(1));
        m.set(1, 65, true);
        assert!(m.get(1, 65) && !m.get(1, 64));
        m.fill_row(2);
        assert_eq!(m.row_count_ones(2), 70);
        assert_eq!(m.count_ones(), 71);
        m.set(1, 65, false);
        assert!(m.row_is_zero(1));
    }

    #[test]
    fn default_threshold_is_half_diagonal() {
        assert!((default_threshold(16, 16) - 11.313708498984761).abs() < 1e-12);
    }

    #[test]
    fn identical_views_fall_back_to_all_ones() {
        let k = Intrinsics::from_fov(1.0, 6, 5).unwrap();
        let p = CameraPose::from_axis_angle(Vector3::y(), 0.3, Vector3::new(0.1, 0.0, 0.2));
        let m = epipolar_mask(&[p], &[p], &k, 5, 6, 0.5).unwrap();
        assert_eq!(m.bits.count_ones(), 30 * 30);
    }

    #[test]
    fn shape_and_config_errors() {
        let k = Intrinsics::from_fov(1.0, 6, 5).unwrap();
        let p = CameraPose::identity();
        assert!(matches!(epipolar_mask(&[p], &[p], &k, 6, 6, 1.0), Err(Error::Shape(_))));
        assert!(epipolar_mask(&[], &[p], &k, 5, 6, 1.0).is_err());
        assert!(epipolar_mask(&[p], &[p], &k, 5, 6, 0.0).is_err());
    }

    #[test]
    fn empty_rows_are_filled() {
        // A tiny threshold with a sideways baseline leaves most rows empty
        // before the fallback kicks in.
        let k = Intrinsics::from_fov(1.0, 4, 4).unwrap();
        let b = CameraPose::from_axis_angle(Vector3::new(0.3, 1.0, 0.1), 0.4, Vector3::new(0.7, 0.2, 0.1));
        let m = epipolar_mask(&[CameraPose::identity()], &[b], &k, 4, 4, 1e-9).unwrap();
        for r in 0..m.rows() {
            assert!(!m.bits.row_is_zero(r));
        }
    }

    #[test]
    fn permute_views_moves_blocks() {
        let k = Intrinsics::from_fov(1.0, 3, 3).unwrap();
        let a = CameraPose::identity();
        let b = CameraPose::from_axis_angle(Vector3::y(), 0.1, Vector3::new(0.5, 0.0, 0.0));
        let c = CameraPose::from_axis_angle(Vector3::x(), 0.1, Vector3::new(0.0, 0.5, 0.1));
        let m = epipolar_mask(&[a], &[b, c], &k, 3, 3, 0.6).unwrap();
        let swapped = epipolar_mask(&[a], &[c, b], &k, 3, 3, 0.6).unwrap();
        assert_eq!(m.permute_views(&[1, 0]).bits, swapped.bits);
    }
}
