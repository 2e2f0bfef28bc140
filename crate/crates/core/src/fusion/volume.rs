use rayon::prelude::*;

use super::FusionError;
use crate::image::Image;

/// Matching scores over a disparity band, higher is better.
///
/// Stored as `[row][col][disparity]` with disparity `d = u_ref - u_tgt`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    width: usize,
    height: usize,
    d_max: usize,
    data: Vec<f32>,
}

impl CostVolume {
    pub fn new(width: usize, height: usize, d_max: usize, fill: f32) -> Self {
        Self {
            width,
            height,
            d_max,
            data: vec![fill; width * height * (d_max + 1)],
        }
    }

    pub fn from_vec(width: usize, height: usize, d_max: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            width * height * (d_max + 1),
            "volume size mismatch"
        );
        Self {
            width,
            height,
            d_max,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    /// Number of disparity slices, `d_max + 1`.
    pub fn depth(&self) -> usize {
        self.d_max + 1
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize, d: usize) -> usize {
        debug_assert!(u < self.width && v < self.height && d <= self.d_max);
        (v * self.width + u) * (self.d_max + 1) + d
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize, d: usize) -> f32 {
        self.data[self.index(u, v, d)]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, d: usize, value: f32) {
        let i = self.index(u, v, d);
        self.data[i] = value;
    }

    /// All disparity scores of one pixel.
    #[inline]
    pub fn scores(&self, u: usize, v: usize) -> &[f32] {
        let i = self.index(u, v, 0);
        &self.data[i..i + self.d_max + 1]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// One image row of scores (`width * (d_max + 1)` values).
    pub fn row(&self, v: usize) -> &[f32] {
        let n = self.width * (self.d_max + 1);
        &self.data[v * n..(v + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Window mean and standard deviation of every pixel, replicate-padded.
fn window_stats(img: &Image<f32>, r: usize) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = img.dims();
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut mean = vec![0.0; w];
            let mut std = vec![0.0; w];
            for u in 0..w {
                let (mut s, mut s2) = (0.0, 0.0);
                for j in -(r as isize)..=r as isize {
                    for i in -(r as isize)..=r as isize {
                        let x = img.get_clamped(u as isize + i, v as isize + j) as f64;
                        s += x;
                        s2 += x * x;
                    }
                }
                let m = s / n;
                mean[u] = m;
                std[u] = (s2 / n - m * m).max(0.0).sqrt();
            }
            (mean, std)
        })
        .collect();
    let mut mean = Vec::with_capacity(w * h);
    let mut std = Vec::with_capacity(w * h);
    for (m, s) in rows {
        mean.extend(m);
        std.extend(s);
    }
    (mean, std)
}

/// ZNCC volume between a rectified reference and target image.
///
/// Windows are replicate-padded at the borders. A target center outside the
/// image scores −1; a window whose variance is below `variance_floor` in
/// either image scores 0.
pub fn zncc_volume(
    reference: &Image<f32>,
    target: &Image<f32>,
    d_max: usize,
    window: usize,
    variance_floor: f64,
) -> Result<CostVolume, FusionError> {
    zncc_volume_masked(reference, target, None, d_max, window, variance_floor)
}

/// Like [`zncc_volume`], with masks of the pixels that carry image data
/// (`(reference, target)`). A target center without data counts as out of
/// range (−1); a reference center without data scores 0.
pub fn zncc_volume_masked(
    reference: &Image<f32>,
    target: &Image<f32>,
    masks: Option<(&Image<bool>, &Image<bool>)>,
    d_max: usize,
    window: usize,
    variance_floor: f64,
) -> Result<CostVolume, FusionError> {
    if !reference.same_dims(target) {
        return Err(FusionError::SizeMismatch {
            expected: reference.dims(),
            found: target.dims(),
        });
    }
    if let Some((a, b)) = masks {
        for m in [a, b] {
            if !m.same_dims(reference) {
                return Err(FusionError::SizeMismatch {
                    expected: reference.dims(),
                    found: m.dims(),
                });
            }
        }
    }
    let has_data = |m: Option<&Image<bool>>, i: usize| m.is_none_or(|m| m.as_slice()[i]);
    let (w, h) = reference.dims();
    if window.is_multiple_of(2) || window > w || window > h {
        return Err(FusionError::WindowTooLarge {
            window,
            width: w,
            height: h,
        });
    }
    let r = window / 2;
    let n = (window * window) as f64;
    let (mean_a, std_a) = window_stats(reference, r);
    let (mean_b, std_b) = window_stats(target, r);
    let floor = variance_floor.max(0.0).sqrt();
    let slices = d_max + 1;
    let pw = w + 2 * r;
    let padded_row = |img: &Image<f32>, v: isize| -> Vec<f64> {
        (0..pw)
            .map(|x| img.get_clamped(x as isize - r as isize, v) as f64)
            .collect()
    };

    let mut data = vec![0f32; w * h * slices];
    data.par_chunks_mut(w * slices)
        .enumerate()
        .for_each(|(v, out)| {
            let rows_a: Vec<Vec<f64>> = (-(r as isize)..=r as isize)
                .map(|j| padded_row(reference, v as isize + j))
                .collect();
            let rows_b: Vec<Vec<f64>> = (-(r as isize)..=r as isize)
                .map(|j| padded_row(target, v as isize + j))
                .collect();
            let mut col = vec![0.0f64; pw];
            for d in 0..slices {
                for u in 0..w.min(d) {
                    out[u * slices + d] = -1.0;
                }
                if d >= w {
                    continue;
                }
                // padded column x pairs reference column x with target column x − d
                for x in d..pw {
                    let mut s = 0.0;
                    for (ra, rb) in rows_a.iter().zip(&rows_b) {
                        s += ra[x] * rb[x - d];
                    }
                    col[x] = s;
                }
                let mut run: f64 = col[d..d + window].iter().sum();
                for u in d..w {
                    if u > d {
                        run += col[u + 2 * r] - col[u - 1];
                    }
                    let ia = v * w + u;
                    let ib = v * w + u - d;
                    let (sa, sb) = (std_a[ia], std_b[ib]);
                    let score = if !has_data(masks.map(|m| m.1), ib) {
                        -1.0
                    } else if !has_data(masks.map(|m| m.0), ia) || sa <= floor || sb <= floor {
                        0.0
                    } else {
                        ((run / n - mean_a[ia] * mean_b[ib]) / (sa * sb)).clamp(-1.0, 1.0)
                    };
                    out[u * slices + d] = score as f32;
                }
            }
        });
    Ok(CostVolume::from_vec(w, h, d_max, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> Image<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| rng.random::<f32>())
    }

    fn brute_zncc(a: &Image<f32>, b: &Image<f32>, u: usize, v: usize, d: usize, r: isize) -> f64 {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for j in -r..=r {
            for i in -r..=r {
                xs.push(a.get_clamped(u as isize + i, v as isize + j) as f64);
                ys.push(b.get_clamped(u as isize - d as isize + i, v as isize + j) as f64);
            }
        }
        let n = xs.len() as f64;
        let (ma, mb) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / n;
        let va: f64 = xs.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
        let vb: f64 = ys.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn matches_direct_window_correlation() {
        let a = noise(23, 11, 1);
        let b = noise(23, 11, 2);
        let vol = zncc_volume(&a, &b, 6, 5, 1e-9).unwrap();
        for v in 0..11 {
            for u in 0..23 {
                for d in 0..=6 {
                    let got = vol.get(u, v, d) as f64;
                    if u < d {
                        assert_eq!(got, -1.0);
                    } else {
                        let want = brute_zncc(&a, &b, u, v, d, 2);
                        assert!((got - want).abs() < 1e-5, "({u},{v},{d}): {got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn identical_images_peak_at_zero() {
        let a = noise(40, 20, 3);
        let vol = zncc_volume(&a, &a, 8, 7, 1e-6).unwrap();
        for v in 3..17 {
            for u in 3..37 {
                let s = vol.scores(u, v);
                let best = (0..s.len())
                    .max_by(|&i, &j| s[i].total_cmp(&s[j]).then(j.cmp(&i)))
                    .unwrap();
                assert_eq!(best, 0);
            }
        }
    }

    #[test]
    fn constant_images_score_zero() {
        let a = Image::new(16, 16, 0.5f32);
        let vol = zncc_volume(&a, &a, 4, 3, 1e-6).unwrap();
        for v in 0..16 {
            for u in 4..16 {
                assert!(vol.scores(u, v).iter().all(|&s| s == 0.0));
            }
        }
    }

    #[test]
    fn missing_data_scores_zero() {
        let a = noise(12, 6, 4);
        let mut mask = Image::new(12, 6, true);
        mask.set(5, 2, false);
        let full = Image::new(12, 6, true);
        let vol = zncc_volume_masked(&a, &a, Some((&full, &mask)), 3, 3, 1e-9).unwrap();
        assert_eq!(vol.get(7, 2, 2), -1.0);
        assert_eq!(vol.get(5, 2, 0), -1.0);
        let vol = zncc_volume_masked(&a, &a, Some((&mask, &full)), 3, 3, 1e-9).unwrap();
        assert_eq!(vol.get(5, 2, 1), 0.0);
        assert!(vol.get(6, 2, 0) > 0.99);
    }

    #[test]
    fn rejects_oversized_window() {
        let a = Image::new(5, 5, 0.0f32);
        assert!(matches!(
            zncc_volume(&a, &a, 2, 7, 1e-6),
            Err(FusionError::WindowTooLarge { .. })
        ));
    }
}
