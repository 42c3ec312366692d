use super::Volume;
use crate::error::{Error, Result};

/// Percentile with linear interpolation between order statistics of
/// `sorted` (ascending).
pub fn percentile(sorted: &[f32], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0] as f64;
    }
    let pos = pct / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)
}

/// Clips to the `[lo_pct, hi_pct]` percentiles of the whole volume and maps
/// the clip bounds onto `0` and `255`. A constant volume maps to zeros.
pub fn preprocess_rescale(v: &Volume, lo_pct: f64, hi_pct: f64) -> Result<Volume> {
    if !(0.0 <= lo_pct && lo_pct < hi_pct && hi_pct <= 100.0) {
        return Err(Error::config(format!(
            "clip percentiles must satisfy 0 <= lo < hi <= 100, got {lo_pct} and {hi_pct}"
        )));
    }
    let mut sorted = v.data().to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let (lo, hi) = (percentile(&sorted, lo_pct), percentile(&sorted, hi_pct));
    let range = hi - lo;
    if range <= 0.0 {
        log::warn!("volume `{}` has zero intensity range; rescaled to zeros", v.meta.source);
        return v.with_data(vec![0.0; v.data().len()]);
    }
    let data = v
        .data()
        .iter()
        .map(|&x| (((x as f64).clamp(lo, hi) - lo) / range * 255.0) as f32)
        .collect();
    v.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VolumeMeta;

    fn vol(data: Vec<f32>) -> Volume {
        Volume::new([1, 1, data.len()], data, VolumeMeta::default()).unwrap()
    }

    #[test]
    fn amplitude_range_maps_to_byte_range() {
        let data: Vec<f32> = (0..=630).map(|i| -30000.0 + 100.0 * i as f32).collect();
        let out = preprocess_rescale(&vol(data), 0.0, 100.0).unwrap();
        let (mn, mx) = out
            .data()
            .iter()
            .fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert_eq!((mn, mx), (0.0, 255.0));
    }

    #[test]
    fn constant_volume_maps_to_zero() {
        let out = preprocess_rescale(&vol(vec![7.0; 9]), 1.0, 99.0).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bad_percentiles_are_rejected() {
        assert!(preprocess_rescale(&vol(vec![1.0, 2.0]), 50.0, 50.0).is_err());
        assert!(preprocess_rescale(&vol(vec![1.0, 2.0]), -1.0, 50.0).is_err());
    }
}
