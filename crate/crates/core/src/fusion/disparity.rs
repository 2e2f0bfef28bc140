use rayon::prelude::*;

use super::CostVolume;
use crate::image::Image;

/// Per-pixel subpixel disparity of the reference view.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub disparity: Image<f32>,
    pub valid: Image<bool>,
    pub d_max: f32,
}

impl DisparityMap {
    pub fn width(&self) -> usize {
        self.disparity.width()
    }

    pub fn height(&self) -> usize {
        self.disparity.height()
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f32> {
        self.valid.get(u, v).then(|| self.disparity.get(u, v))
    }

    pub fn valid_count(&self) -> usize {
        self.valid.as_slice().iter().filter(|&&b| b).count()
    }

    /// Disparity image with 0 at invalid pixels.
    pub fn to_image(&self) -> Image<f32> {
        Image::from_fn(self.width(), self.height(), |u, v| {
            self.get(u, v).unwrap_or(0.0)
        })
    }
}

/// Vertex offset of the parabola through three scores around a maximum,
/// clamped to `[−0.5, 0.5]`.
pub fn parabola_offset(s_minus: f64, s0: f64, s_plus: f64) -> f64 {
    let denom = 2.0 * (s_minus - 2.0 * s0 + s_plus);
    if !(denom < 0.0) {
        return 0.0;
    }
    ((s_minus - s_plus) / denom).clamp(-0.5, 0.5)
}

/// Index of the highest score; ties go to the smaller index.
#[inline]
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (d, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = d;
        }
    }
    best
}

/// Winner-take-all disparity with parabolic subpixel refinement. The end
/// slices of the band get no subpixel term.
pub fn select_disparity(volume: &CostVolume) -> DisparityMap {
    select_disparity_with(volume, volume)
}

/// Winner-take-all over `selection`, with the parabola fitted through the
/// `subpixel` scores around the winner. Where those scores have no curvature
/// (untextured pixels without ToF support) the `selection` scores are used.
///
/// Aggregated scores pull the parabola vertex toward integer disparities;
/// fitting the unaggregated scores at the aggregated winner avoids that.
///
/// # Panics
/// If the two volumes differ in shape.
pub fn select_disparity_with(selection: &CostVolume, subpixel: &CostVolume) -> DisparityMap {
    let (w, h, d_max) = (selection.width(), selection.height(), selection.d_max());
    assert!(
        (subpixel.width(), subpixel.height(), subpixel.d_max()) == (w, h, d_max),
        "volume shape mismatch"
    );
    let values: Vec<f32> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let d = argmax(selection.scores(i % w, i / w));
            if d == 0 || d == d_max {
                return d as f32;
            }
            let fit = |s: &[f32]| (s[d - 1] as f64, s[d] as f64, s[d + 1] as f64);
            let (a, b, c) = fit(subpixel.scores(i % w, i / w));
            let off = if a - 2.0 * b + c < 0.0 {
                parabola_offset(a, b, c)
            } else {
                let (a, b, c) = fit(selection.scores(i % w, i / w));
                parabola_offset(a, b, c)
            };
            (d as f64 + off) as f32
        })
        .collect();
    DisparityMap {
        disparity: Image::from_vec(w, h, values),
        valid: Image::new(w, h, true),
        d_max: d_max as f32,
    }
}

/// Invalidates reference pixels whose disparity disagrees by more than
/// `threshold` with the target view's winner-take-all disparity, read from
/// the same volume along `(u' + d, v, d)`.
pub fn left_right_check(disp: &mut DisparityMap, volume: &CostVolume, threshold: f32) {
    let (w, h, n) = (volume.width(), volume.height(), volume.depth());
    let target: Vec<Option<usize>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (ut, v) = (i % w, i / w);
            let mut best: Option<(usize, f32)> = None;
            for d in 0..n.min(w - ut) {
                let s = volume.get(ut + d, v, d);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((d, s));
                }
            }
            best.map(|(d, _)| d)
        })
        .collect();
    for v in 0..h {
        for u in 0..w {
            let Some(d) = disp.get(u, v) else { continue };
            let ut = (u as f32 - d).round();
            let ok = ut >= 0.0
                && target[v * w + ut as usize].is_some_and(|dt| (dt as f32 - d).abs() <= threshold);
            if !ok {
                disp.valid.set(u, v, false);
            }
        }
    }
}

/// Invalidates pixels whose match `(u − d, v)` falls on a target pixel
/// without image data.
pub fn require_target_support(disp: &mut DisparityMap, target_mask: &Image<bool>) {
    assert!(disp.valid.same_dims(target_mask), "mask size mismatch");
    for v in 0..disp.height() {
        for u in 0..disp.width() {
            let Some(d) = disp.get(u, v) else { continue };
            let ut = (u as f32 - d).round();
            if !(ut >= 0.0 && target_mask.get(ut as usize, v)) {
                disp.valid.set(u, v, false);
            }
        }
    }
}

/// 3×3 median over the valid neighbors of every valid pixel.
pub fn median_filter(disp: &DisparityMap) -> DisparityMap {
    let (w, h) = (disp.width(), disp.height());
    let values: Vec<f32> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (u, v) = (i % w, i / w);
            let Some(center) = disp.get(u, v) else {
                return 0.0;
            };
            let mut window = [0f32; 9];
            let mut k = 0;
            for y in v.saturating_sub(1)..(v + 2).min(h) {
                for x in u.saturating_sub(1)..(u + 2).min(w) {
                    if let Some(d) = disp.get(x, y) {
                        window[k] = d;
                        k += 1;
                    }
                }
            }
            if k == 0 {
                return center;
            }
            let vals = &mut window[..k];
            vals.sort_by(f32::total_cmp);
            if k % 2 == 1 {
                vals[k / 2]
            } else {
                0.5 * (vals[k / 2 - 1] + vals[k / 2])
            }
        })
        .collect();
    DisparityMap {
        disparity: Image::from_vec(w, h, values),
        valid: disp.valid.clone(),
        d_max: disp.d_max,
    }
}

/// Rescales a disparity map computed on images downsampled by `scale` to a
/// `width × height` grid: positions map through pixel centers, values are
/// multiplied by `scale`. Bilinear where all four neighbors are valid,
/// nearest valid neighbor otherwise.
pub fn upsample_disparity(
    disp: &DisparityMap,
    scale: usize,
    width: usize,
    height: usize,
) -> DisparityMap {
    if scale == 1 && disp.width() == width && disp.height() == height {
        return disp.clone();
    }
    let s = scale as f64;
    let (w, h) = (disp.width(), disp.height());
    let cells: Vec<Option<f32>> = (0..width * height)
        .into_par_iter()
        .map(|i| {
            let x = ((i % width) as f64 + 0.5) / s - 0.5;
            let y = ((i / width) as f64 + 0.5) / s - 0.5;
            let x = x.clamp(0.0, (w - 1) as f64);
            let y = y.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let n = [
                disp.get(x0, y0),
                disp.get(x1, y0),
                disp.get(x0, y1),
                disp.get(x1, y1),
            ];
            let value = if let [Some(a), Some(b), Some(c), Some(d)] = n {
                let top = a as f64 + (b - a) as f64 * fx;
                let bottom = c as f64 + (d - c) as f64 * fx;
                Some(top + (bottom - top) * fy)
            } else {
                let near = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
                near.iter()
                    .zip(n)
                    .filter_map(|(&(dx, dy), d)| {
                        d.map(|d| ((fx - dx).powi(2) + (fy - dy).powi(2), d))
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, d)| d as f64)
            };
            value.map(|d| (d * s) as f32)
        })
        .collect();
    DisparityMap {
        disparity: Image::from_fn(width, height, |u, v| cells[v * width + u].unwrap_or(0.0)),
        valid: Image::from_fn(width, height, |u, v| cells[v * width + u].is_some()),
        d_max: disp.d_max * scale as f32,
    }
}

/// Depth `f·B / d`; disparities at or below 1e-6 px map to 0 (invalid).
pub fn disparity_to_depth(disp: &DisparityMap, focal_baseline: f64) -> Image<f64> {
    Image::from_fn(disp.width(), disp.height(), |u, v| match disp.get(u, v) {
        Some(d) if d as f64 > 1e-6 => focal_baseline / d as f64,
        _ => 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parabola_examples() {
        assert_eq!(parabola_offset(2.0, 5.0, 2.0), 0.0);
        assert!((parabola_offset(1.0, 3.0, 2.0) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(parabola_offset(1.0, 1.0, 1.0), 0.0);
    }

    #[test]
    fn ties_prefer_smaller_disparity() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2, 0.7]), 1);
    }

    #[test]
    fn symmetric_peak_is_integral() {
        let mut vol = CostVolume::new(1, 1, 8, 0.0);
        vol.set(0, 0, 4, 0.5);
        vol.set(0, 0, 5, 0.9);
        vol.set(0, 0, 6, 0.5);
        assert_eq!(select_disparity(&vol).get(0, 0), Some(5.0));
    }

    #[test]
    fn unsupported_matches_are_dropped() {
        let mut disp = DisparityMap {
            disparity: Image::from_vec(4, 1, vec![0.0, 0.2, 0.4, 3.6]),
            valid: Image::new(4, 1, true),
            d_max: 3.0,
        };
        let mask = Image::from_vec(4, 1, vec![true, false, true, true]);
        require_target_support(&mut disp, &mask);
        assert_eq!(disp.valid.as_slice(), &[true, false, true, false]);
    }

    #[test]
    fn depth_from_disparity() {
        let disp = DisparityMap {
            disparity: Image::from_vec(2, 1, vec![10.0, 0.0]),
            valid: Image::new(2, 1, true),
            d_max: 64.0,
        };
        let z = disparity_to_depth(&disp, 500.0 * 0.02);
        assert_eq!(z.get(0, 0), 1.0);
        assert_eq!(z.get(1, 0), 0.0);
    }

    #[test]
    fn upsampling_scales_values() {
        let disp = DisparityMap {
            disparity: Image::new(4, 3, 2.5),
            valid: Image::new(4, 3, true),
            d_max: 8.0,
        };
        let up = upsample_disparity(&disp, 4, 16, 12);
        assert!(up.disparity.as_slice().iter().all(|&d| d == 10.0));
        assert_eq!(up.valid_count(), 16 * 12);
    }
}
