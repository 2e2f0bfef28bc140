use rayon::prelude::*;

use super::CostVolume;

/// One step of the path recursion:
/// `L(p, d) = C(p, d) + min(L(q, d), L(q, d±1) + P1, min L(q) + P2) − min L(q)`.
#[inline]
fn step(cost: &[f32], prev: &[f32], out: &mut [f32], p1: f32, p2: f32) {
    let m = prev.iter().copied().fold(f32::INFINITY, f32::min);
    let n = prev.len();
    for d in 0..n {
        let mut best = prev[d];
        if d > 0 {
            best = best.min(prev[d - 1] + p1);
        }
        if d + 1 < n {
            best = best.min(prev[d + 1] + p1);
        }
        best = best.min(m + p2);
        out[d] = cost[d] + (best - m);
    }
}

fn negate(src: &[f32], dst: &mut [f32]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o = -s;
    }
}

/// Four-path (left, right, up, down) semi-global aggregation of the costs
/// `−score`; returns the mean path cost negated back into scores.
///
/// Path sums are added in a fixed order, so the result does not depend on
/// the thread count.
pub fn aggregate_semiglobal(volume: &CostVolume, p1: f32, p2: f32) -> CostVolume {
    let (w, h, n) = (volume.width(), volume.height(), volume.depth());
    let stride = w * n;
    // f64 keeps the four-path sum exact for f32 inputs
    let mut sum = vec![0f64; w * h * n];

    // horizontal paths
    sum.par_chunks_mut(stride).enumerate().for_each(|(v, out)| {
        let row = volume.row(v);
        let mut cost = vec![0f32; n];
        let mut prev = vec![0f32; n];
        let mut cur = vec![0f32; n];
        for order in [false, true] {
            for k in 0..w {
                let u = if order { w - 1 - k } else { k };
                negate(&row[u * n..(u + 1) * n], &mut cost);
                if k == 0 {
                    cur.copy_from_slice(&cost);
                } else {
                    step(&cost, &prev, &mut cur, p1, p2);
                }
                for (s, l) in out[u * n..(u + 1) * n].iter_mut().zip(&cur) {
                    *s += *l as f64;
                }
                std::mem::swap(&mut prev, &mut cur);
            }
        }
    });

    // vertical paths: rows in sequence, columns in parallel
    for downward in [true, false] {
        let mut prev = vec![0f32; stride];
        for k in 0..h {
            let v = if downward { k } else { h - 1 - k };
            let row = volume.row(v);
            let mut cur = vec![0f32; stride];
            cur.par_chunks_mut(n).enumerate().for_each(|(u, out)| {
                let mut cost = vec![0f32; n];
                negate(&row[u * n..(u + 1) * n], &mut cost);
                if k == 0 {
                    out.copy_from_slice(&cost);
                } else {
                    step(&cost, &prev[u * n..(u + 1) * n], out, p1, p2);
                }
            });
            for (s, l) in sum[v * stride..(v + 1) * stride].iter_mut().zip(&cur) {
                *s += *l as f64;
            }
            prev = cur;
        }
    }

    let scores: Vec<f32> = sum.par_iter().map(|s| -(s * 0.25) as f32).collect();
    CostVolume::from_vec(w, h, volume.d_max(), scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_penalties_leave_scores_unchanged() {
        let mut vol = CostVolume::new(7, 5, 4, 0.0);
        for (i, x) in vol.as_mut_slice().iter_mut().enumerate() {
            *x = ((i * 37 % 101) as f32 / 50.0) - 1.0;
        }
        let out = aggregate_semiglobal(&vol, 0.0, 0.0);
        assert_eq!(out.as_slice(), vol.as_slice());
    }

    #[test]
    fn isolated_spike_survives() {
        let mut vol = CostVolume::new(9, 9, 6, 0.0);
        vol.set(4, 4, 3, 1.0);
        let out = aggregate_semiglobal(&vol, 0.03, 0.4);
        let s = out.scores(4, 4);
        let best = (0..s.len())
            .max_by(|&i, &j| s[i].total_cmp(&s[j]).then(j.cmp(&i)))
            .unwrap();
        assert_eq!(best, 3);
    }
}
