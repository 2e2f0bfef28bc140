use super::CostVolume;

/// A ToF sample in volume coordinates: continuous reference column and row,
/// continuous target column, and confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InjectionSample {
    pub u: f64,
    pub v: f64,
    pub u_tgt: f64,
    pub weight: f64,
}

/// The eight integer corners around `(u, v, u')` and their trilinear weights.
///
/// Along each axis the lower corner gets `(⌊x⌋ + 1) − x` and the upper corner
/// `x − ⌊x⌋`, so an integer coordinate puts its full weight on one corner.
pub fn splat_weights(u: f64, v: f64, u_tgt: f64) -> [([i64; 3], f64); 8] {
    let axis = |x: f64| {
        let lo = x.floor();
        (lo as i64, lo + 1.0 - x, x - lo)
    };
    let a = [axis(u), axis(v), axis(u_tgt)];
    std::array::from_fn(|k| {
        let mut idx = [0i64; 3];
        let mut w = 1.0;
        for (ax, (lo, w_lo, w_hi)) in a.iter().enumerate() {
            let upper = (k >> ax) & 1 == 1;
            idx[ax] = lo + upper as i64;
            w *= if upper { *w_hi } else { *w_lo };
        }
        (idx, w)
    })
}

/// Adds `tau · weight` of every sample to the volume, split over its eight
/// corners in `(u, v, u')` space. Corner `(u_c, v_c, u'_c)` lands in cell
/// `(u_c, v_c, u_c − u'_c)`; corners outside the image or the disparity band
/// are dropped. Samples are applied in order, so the result is
/// deterministic.
///
/// Returns the number of cells touched.
pub fn inject_samples(volume: &mut CostVolume, samples: &[InjectionSample], tau: f64) -> usize {
    if tau == 0.0 {
        return 0;
    }
    let (w, h, d_max) = (
        volume.width() as i64,
        volume.height() as i64,
        volume.d_max() as i64,
    );
    let mut touched = 0;
    for s in samples {
        let mass = tau * s.weight;
        if mass == 0.0 || !mass.is_finite() {
            continue;
        }
        if ![s.u, s.v, s.u_tgt].iter().all(|x| x.is_finite()) {
            continue;
        }
        for ([u, v, ut], wt) in splat_weights(s.u, s.v, s.u_tgt) {
            let d = u - ut;
            if wt == 0.0 || u < 0 || v < 0 || u >= w || v >= h || d < 0 || d > d_max {
                continue;
            }
            let i = volume.index(u as usize, v as usize, d as usize);
            let cell = &mut volume.as_mut_slice()[i];
            *cell = (*cell as f64 + mass * wt) as f32;
            touched += 1;
        }
    }
    touched
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_coordinates_hit_one_corner() {
        let w = splat_weights(3.0, 4.0, 1.0);
        assert_eq!(w[0], ([3, 4, 1], 1.0));
        assert!(w[1..].iter().all(|(_, x)| *x == 0.0));
    }

    #[test]
    fn half_offset_splits_evenly() {
        let mut vol = CostVolume::new(10, 10, 5, 0.0);
        let s = InjectionSample {
            u: 4.5,
            v: 2.0,
            u_tgt: 2.0,
            weight: 1.0,
        };
        inject_samples(&mut vol, &[s], 2.0);
        assert_eq!(vol.get(4, 2, 2), 1.0);
        assert_eq!(vol.get(5, 2, 3), 1.0);
        assert_eq!(vol.as_slice().iter().filter(|&&x| x != 0.0).count(), 2);
    }

    #[test]
    fn zero_tau_is_a_no_op() {
        let mut vol = CostVolume::new(6, 6, 3, -0.0);
        let before = vol.clone();
        let s = InjectionSample {
            u: 2.3,
            v: 1.7,
            u_tgt: 1.1,
            weight: 0.8,
        };
        assert_eq!(inject_samples(&mut vol, &[s], 0.0), 0);
        let bits = |v: &CostVolume| v.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&vol), bits(&before));
    }
}
