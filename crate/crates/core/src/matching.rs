//! Dense 2D correspondence between two roughly aligned grayscale images.
//!
//! Coarse-to-fine ZNCC block matching: every pyramid level searches a small
//! square around the flow propagated from the level above, refines the best
//! integer match with per-axis parabola fits, and a forward–backward check at
//! full resolution decides validity.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("image sizes differ: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
    #[error("image {0:?} is smaller than one {1}x{1} matching window")]
    TooSmall((usize, usize), usize),
    #[error("flow image validity channel must be 0 or 1, found {0} at ({1}, {2})")]
    BadValidity(f32, usize, usize),
}

/// Per-pixel displacement (target minus source) with a validity flag.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    du: Vec<f32>,
    dv: Vec<f32>,
    valid: Vec<bool>,
}

impl FlowField {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            du: vec![0.0; width * height],
            dv: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> Option<(f64, f64)>,
    ) -> Self {
        let mut flow = Self::new_invalid(width, height);
        for v in 0..height {
            for u in 0..width {
                flow.set(u, v, f(u, v));
            }
        }
        flow
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<Vector2<f64>> {
        let i = v * self.width + u;
        self.valid[i].then(|| Vector2::new(self.du[i] as f64, self.dv[i] as f64))
    }

    /// Raw stored displacement regardless of validity.
    #[inline]
    pub fn raw(&self, u: usize, v: usize) -> (f32, f32) {
        let i = v * self.width + u;
        (self.du[i], self.dv[i])
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: Option<(f64, f64)>) {
        let i = v * self.width + u;
        match value {
            Some((a, b)) if a.is_finite() && b.is_finite() => {
                self.du[i] = a as f32;
                self.dv[i] = b as f32;
                self.valid[i] = true;
            }
            _ => self.valid[i] = false,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.valid.len().max(1) as f64
    }

    /// `(du, dv, validity)` channels.
    pub fn to_image(&self) -> Image<[f32; 3]> {
        Image::from_fn(self.width, self.height, |u, v| {
            let i = v * self.width + u;
            [
                self.du[i],
                self.dv[i],
                if self.valid[i] { 1.0 } else { 0.0 },
            ]
        })
    }

    pub fn from_image(img: &Image<[f32; 3]>) -> Result<Self, MatchingError> {
        let mut flow = Self::new_invalid(img.width(), img.height());
        for v in 0..img.height() {
            for u in 0..img.width() {
                let [a, b, ok] = img.get(u, v);
                let i = v * img.width() + u;
                flow.du[i] = a;
                flow.dv[i] = b;
                flow.valid[i] = if ok == 1.0 {
                    a.is_finite() && b.is_finite()
                } else if ok == 0.0 {
                    false
                } else {
                    return Err(MatchingError::BadValidity(ok, u, v));
                };
            }
        }
        Ok(flow)
    }
}

/// Bilinear flow lookup at a subpixel coordinate. Invalid when outside the
/// field or when any neighbour with non-zero weight is invalid.
pub fn sample_flow(flow: &FlowField, u: f64, v: f64) -> Option<Vector2<f64>> {
    if !(u >= 0.0 && v >= 0.0) || u > (flow.width - 1) as f64 || v > (flow.height - 1) as f64 {
        return None;
    }
    let u0 = u.floor() as usize;
    let v0 = v.floor() as usize;
    let fu = u - u0 as f64;
    let fv = v - v0 as f64;
    let mut acc = Vector2::zeros();
    for (du, wu) in [(0usize, 1.0 - fu), (1, fu)] {
        for (dv, wv) in [(0usize, 1.0 - fv), (1, fv)] {
            let w = wu * wv;
            if w == 0.0 {
                continue;
            }
            acc += flow.get(u0 + du, v0 + dv)? * w;
        }
    }
    Some(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    /// Side of the square ZNCC window (odd).
    pub window: usize,
    /// Search radius around the propagated flow at every level.
    pub search_radius: i32,
    /// The pyramid stops before either dimension drops below this.
    pub min_level_dim: usize,
    pub fb_threshold: f64,
    pub variance_floor: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            window: 9,
            search_radius: 4,
            min_level_dim: 32,
            fb_threshold: 1.0,
            variance_floor: 1e-6,
        }
    }
}

/// Window means and standard deviations at every pixel of an image padded
/// by `r` on each side with replicated borders.
struct Padded {
    w: usize,
    h: usize,
    r: usize,
    pw: usize,
    data: Vec<f32>,
    mean: Vec<f32>,
    std: Vec<f32>,
}

impl Padded {
    fn new(img: &Image<f32>, r: usize) -> Self {
        let (w, h) = img.dims();
        let pw = w + 2 * r;
        let ph = h + 2 * r;
        let mut data = vec![0f32; pw * ph];
        for y in 0..ph {
            for x in 0..pw {
                data[y * pw + x] =
                    img.get_clamped(x as isize - r as isize, y as isize - r as isize);
            }
        }
        // integral images over the padded buffer
        let mut s1 = vec![0f64; (pw + 1) * (ph + 1)];
        let mut s2 = vec![0f64; (pw + 1) * (ph + 1)];
        for y in 0..ph {
            let mut row1 = 0.0;
            let mut row2 = 0.0;
            for x in 0..pw {
                let p = data[y * pw + x] as f64;
                row1 += p;
                row2 += p * p;
                s1[(y + 1) * (pw + 1) + x + 1] = s1[y * (pw + 1) + x + 1] + row1;
                s2[(y + 1) * (pw + 1) + x + 1] = s2[y * (pw + 1) + x + 1] + row2;
            }
        }
        let n = ((2 * r + 1) * (2 * r + 1)) as f64;
        let k = 2 * r + 1;
        let mut mean = vec![0f32; w * h];
        let mut std = vec![0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let box_sum = |s: &[f64]| {
                    s[(y + k) * (pw + 1) + x + k]
                        - s[y * (pw + 1) + x + k]
                        - s[(y + k) * (pw + 1) + x]
                        + s[y * (pw + 1) + x]
                };
                let m = box_sum(&s1) / n;
                let var = (box_sum(&s2) / n - m * m).max(0.0);
                mean[y * w + x] = m as f32;
                std[y * w + x] = var.sqrt() as f32;
            }
        }
        Self {
            w,
            h,
            r,
            pw,
            data,
            mean,
            std,
        }
    }

    /// Padded pixel at unpadded coordinates `(x, y)`, which may be negative
    /// down to `-r`.
    #[inline]
    fn at(&self, x: isize, y: isize) -> f32 {
        self.data[(y + self.r as isize) as usize * self.pw + (x + self.r as isize) as usize]
    }
}

fn parabola_offset(minus: f32, center: f32, plus: f32) -> f64 {
    let denom = 2.0 * (minus as f64 - 2.0 * center as f64 + plus as f64);
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    ((minus as f64 - plus as f64) / denom).clamp(-0.5, 0.5)
}

/// Flow vectors and their validity flags.
type LevelFlow = (Vec<(f32, f32)>, Vec<bool>);

/// Matches one pyramid level given an initial flow per pixel. Returns the
/// refined flow; pixels without texture keep their initial flow and are
/// flagged invalid.
fn match_level(
    src: &Padded,
    tgt: &Padded,
    init: &[(f32, f32)],
    radius: i32,
    var_floor: f64,
) -> LevelFlow {
    let (w, h, r) = (src.w, src.h, src.r as isize);
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let std_floor = var_floor.sqrt() as f32;
    let side = (2 * radius + 1) as usize;
    let rows: Vec<LevelFlow> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut out = Vec::with_capacity(w);
            let mut ok = Vec::with_capacity(w);
            let guess: Vec<(i32, i32)> = (0..w)
                .map(|u| {
                    let (a, b) = init[v * w + u];
                    (a.round() as i32, b.round() as i32)
                })
                .collect();
            let mut start = 0;
            while start < w {
                let g = guess[start];
                let mut end = start + 1;
                while end < w && guess[end] == g {
                    end += 1;
                }
                let len = end - start;
                let mut scores = vec![f32::NEG_INFINITY; len * side * side];
                let mut cols = vec![0f64; len + 2 * r as usize];
                for oy in -radius..=radius {
                    let ty = v as isize + (g.1 + oy) as isize;
                    if ty < 0 || ty >= h as isize {
                        continue;
                    }
                    for ox in -radius..=radius {
                        let dx = (g.0 + ox) as isize;
                        let dy = (g.1 + oy) as isize;
                        // column products over x in [start - r, end - 1 + r]
                        for (ci, col) in cols.iter_mut().enumerate() {
                            let x = start as isize - r + ci as isize;
                            let tx = x + dx;
                            if tx < -r || tx >= w as isize + r {
                                // only feeds pixels whose target center is off-image
                                *col = 0.0;
                                continue;
                            }
                            let mut acc = 0f32;
                            for j in -r..=r {
                                acc += src.at(x, v as isize + j) * tgt.at(tx, v as isize + dy + j);
                            }
                            *col = acc as f64;
                        }
                        let oi = ((oy + radius) as usize) * side + (ox + radius) as usize;
                        let mut sum: f64 = cols[..(2 * r) as usize].iter().sum();
                        for k in 0..len {
                            sum += cols[k + 2 * r as usize];
                            if k > 0 {
                                sum -= cols[k - 1];
                            }
                            let u = start + k;
                            let tx = u as isize + dx;
                            if tx < 0 || tx >= w as isize {
                                continue;
                            }
                            let ti = ty as usize * w + tx as usize;
                            let si = v * w + u;
                            let (ss, ts) = (src.std[si], tgt.std[ti]);
                            if ss < std_floor || ts < std_floor {
                                continue;
                            }
                            let cov = sum / n - src.mean[si] as f64 * tgt.mean[ti] as f64;
                            scores[k * side * side + oi] = (cov / (ss as f64 * ts as f64)) as f32;
                        }
                    }
                }
                for k in 0..len {
                    let u = start + k;
                    let s = &scores[k * side * side..(k + 1) * side * side];
                    let mut best = None;
                    for (i, &sc) in s.iter().enumerate() {
                        if sc.is_finite() && best.is_none_or(|(_, b)| sc > b) {
                            best = Some((i, sc));
                        }
                    }
                    let textured = src.std[v * w + u] >= std_floor;
                    match best {
                        Some((i, sc)) if textured => {
                            let bx = (i % side) as i32;
                            let by = (i / side) as i32;
                            let at = |x: i32, y: i32| s[y as usize * side + x as usize];
                            let mut fx = (g.0 + bx - radius) as f64;
                            let mut fy = (g.1 + by - radius) as f64;
                            if bx > 0 && bx < side as i32 - 1 {
                                let (m, p) = (at(bx - 1, by), at(bx + 1, by));
                                if m.is_finite() && p.is_finite() {
                                    fx += parabola_offset(m, sc, p);
                                }
                            }
                            if by > 0 && by < side as i32 - 1 {
                                let (m, p) = (at(bx, by - 1), at(bx, by + 1));
                                if m.is_finite() && p.is_finite() {
                                    fy += parabola_offset(m, sc, p);
                                }
                            }
                            out.push((fx as f32, fy as f32));
                            ok.push(true);
                        }
                        _ => {
                            out.push(init[v * w + u]);
                            ok.push(false);
                        }
                    }
                }
                start = end;
            }
            (out, ok)
        })
        .collect();
    let mut flow = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for (f, o) in rows {
        flow.extend(f);
        valid.extend(o);
    }
    (flow, valid)
}

fn median3x3(flow: &[(f32, f32)], w: usize, h: usize) -> Vec<(f32, f32)> {
    let mut out = vec![(0.0, 0.0); w * h];
    let mut a = [0f32; 9];
    let mut b = [0f32; 9];
    for y in 0..h {
        for x in 0..w {
            let mut n = 0;
            for j in -1isize..=1 {
                for i in -1isize..=1 {
                    let xx = (x as isize + i).clamp(0, w as isize - 1) as usize;
                    let yy = (y as isize + j).clamp(0, h as isize - 1) as usize;
                    a[n] = flow[yy * w + xx].0;
                    b[n] = flow[yy * w + xx].1;
                    n += 1;
                }
            }
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            out[y * w + x] = (a[4], b[4]);
        }
    }
    out
}

/// Doubles a coarse flow to a finer level of size `(w, h)`.
fn upsample_flow(
    coarse: &[(f32, f32)],
    cw: usize,
    ch: usize,
    w: usize,
    h: usize,
) -> Vec<(f32, f32)> {
    let du = Image::from_vec(cw, ch, coarse.iter().map(|f| f.0).collect());
    let dv = Image::from_vec(cw, ch, coarse.iter().map(|f| f.1).collect());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let cy = ((y as f64 - 0.5) * 0.5).clamp(0.0, (ch - 1) as f64);
        for x in 0..w {
            let cx = ((x as f64 - 0.5) * 0.5).clamp(0.0, (cw - 1) as f64);
            let a = du.sample_bilinear(cx, cy).unwrap_or(0.0) * 2.0;
            let b = dv.sample_bilinear(cx, cy).unwrap_or(0.0) * 2.0;
            out.push((a as f32, b as f32));
        }
    }
    out
}

fn build_pyramid(img: &Image<f32>, min_dim: usize) -> Vec<Image<f32>> {
    let mut levels = vec![img.clone()];
    loop {
        let last = levels.last().unwrap();
        if last.width() / 2 < min_dim || last.height() / 2 < min_dim {
            break;
        }
        let next = last.downsample2();
        levels.push(next);
    }
    levels
}

/// Coarse-to-fine flow without the consistency check.
fn pyramid_flow(
    src: &Image<f32>,
    tgt: &Image<f32>,
    params: &FlowParams,
) -> (Vec<(f32, f32)>, Vec<bool>) {
    let r = params.window / 2;
    let ps = build_pyramid(src, params.min_level_dim);
    let pt = build_pyramid(tgt, params.min_level_dim);
    let top = ps.len() - 1;
    let mut flow = vec![(0f32, 0f32); ps[top].len()];
    let mut valid = Vec::new();
    for level in (0..=top).rev() {
        let (w, h) = ps[level].dims();
        if level != top {
            let (cw, ch) = ps[level + 1].dims();
            flow = upsample_flow(&flow, cw, ch, w, h);
        }
        let s = Padded::new(&ps[level], r);
        let t = Padded::new(&pt[level], r);
        let (f, ok) = match_level(&s, &t, &flow, params.search_radius, params.variance_floor);
        flow = if level == 0 { f } else { median3x3(&f, w, h) };
        valid = ok;
    }
    (flow, valid)
}

/// Dense flow from `src` to `tgt` (displacement = target − source).
pub fn dense_flow(
    src: &Image<f32>,
    tgt: &Image<f32>,
    params: &FlowParams,
) -> Result<FlowField, MatchingError> {
    if src.dims() != tgt.dims() {
        return Err(MatchingError::SizeMismatch(src.dims(), tgt.dims()));
    }
    if src.width() < params.window || src.height() < params.window {
        return Err(MatchingError::TooSmall(src.dims(), params.window));
    }
    let (w, h) = src.dims();
    let (fwd, fwd_ok) = pyramid_flow(src, tgt, params);
    let (bwd, bwd_ok) = pyramid_flow(tgt, src, params);
    let mut backward = FlowField::new_invalid(w, h);
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if bwd_ok[i] {
                backward.set(u, v, Some((bwd[i].0 as f64, bwd[i].1 as f64)));
            }
        }
    }
    let mut flow = FlowField::new_invalid(w, h);
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let (a, b) = (fwd[i].0 as f64, fwd[i].1 as f64);
            flow.du[i] = fwd[i].0;
            flow.dv[i] = fwd[i].1;
            if !fwd_ok[i] {
                continue;
            }
            let consistent =
                sample_flow(&backward, u as f64 + a, v as f64 + b).is_some_and(|back| {
                    ((a + back.x).powi(2) + (b + back.y).powi(2)).sqrt() <= params.fb_threshold
                });
            flow.valid[i] = consistent;
        }
    }
    Ok(flow)
}
