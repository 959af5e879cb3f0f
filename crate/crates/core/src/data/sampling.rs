//! Sparse-input synthesis. Every sampler draws uniformly without
//! replacement from the source's valid set using its own seeded stream.

use rand::seq::index;

use super::DepthMap;
use crate::error::{Error, Result};
use crate::rng::stream;

fn choose(valid: &[usize], n: usize, seed: u64, name: &str) -> Vec<usize> {
    let mut rng = stream(seed, name);
    let mut picked: Vec<usize> = index::sample(&mut rng, valid.len(), n).into_iter().map(|i| valid[i]).collect();
    picked.sort_unstable();
    picked
}

/// Keeps `round(ratio * |valid|)` of the valid points.
pub fn sample_by_density(sparse: &DepthMap, ratio: f64, seed: u64) -> Result<DepthMap> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid("sample_by_density", format!("ratio {ratio} outside (0, 1]")));
    }
    let valid = sparse.valid_indices();
    if valid.is_empty() {
        return Err(Error::invalid("sample_by_density", "input has no valid points"));
    }
    let n = (ratio * valid.len() as f64).round() as usize;
    Ok(sparse.restricted_to(&choose(&valid, n, seed, "sample-density")))
}

/// Exactly `n` points of the dense map.
pub fn sample_fixed_count(dense: &DepthMap, n: usize, seed: u64) -> Result<DepthMap> {
    let valid = dense.valid_indices();
    if n > valid.len() {
        return Err(Error::invalid(
            "sample_fixed_count",
            format!("{n} samples requested from {} valid pixels", valid.len()),
        ));
    }
    Ok(dense.restricted_to(&choose(&valid, n, seed, "sample-fixed")))
}

/// Values of `dense` on the valid set of `mask_source`. Pixels valid in the
/// mask but not in `dense` stay invalid.
pub fn mask_transfer_sample(dense: &DepthMap, mask_source: &DepthMap) -> Result<DepthMap> {
    if (dense.height, dense.width) != (mask_source.height, mask_source.width) {
        return Err(Error::invalid(
            "mask_transfer_sample",
            format!(
                "dense {}x{} vs mask {}x{}",
                dense.height, dense.width, mask_source.height, mask_source.width
            ),
        ));
    }
    Ok(dense.restricted_to(&mask_source.valid_indices()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> DepthMap {
        DepthMap::from_meters(1, n, (0..n).map(|i| 1.0 + i as f32).collect()).unwrap()
    }

    #[test]
    fn full_ratio_is_identity() {
        let d = ramp(37);
        assert_eq!(sample_by_density(&d, 1.0, 5).unwrap(), d);
    }

    #[test]
    fn half_of_hundred() {
        let d = ramp(100);
        let s = sample_by_density(&d, 0.5, 1).unwrap();
        assert_eq!(s.valid_count(), 50);
        for i in s.valid_indices() {
            assert_eq!(s.values[i], d.values[i]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(sample_by_density(&ramp(4), 0.0, 0).is_err());
        assert!(sample_by_density(&DepthMap::empty(2, 2), 0.5, 0).is_err());
        assert!(sample_fixed_count(&ramp(4), 5, 0).is_err());
        assert!(mask_transfer_sample(&ramp(4), &ramp(5)).is_err());
    }
}
