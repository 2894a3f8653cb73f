use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{AcquisitionSeries, FramePair};

/// Draws one acquisition uniformly; both modalities come from the same index.
pub fn sample_single_frame<R: Rng + ?Sized>(series: &AcquisitionSeries, rng: &mut R) -> Result<FramePair> {
    let t = series.len();
    if t == 0 {
        return Err(Error::Dimension(format!("series {} is empty", series.patch_id)));
    }
    Ok(series.frame(rng.gen_range(0..t)))
}

/// Shuffles ids and deals them into `n_folds` near-equal disjoint folds.
pub fn make_folds<R: Rng + ?Sized>(ids: &[String], n_folds: usize, rng: &mut R) -> Result<Vec<Vec<String>>> {
    if n_folds == 0 || ids.len() < n_folds {
        return Err(Error::Config(format!(
            "cannot split {} ids into {n_folds} folds",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(rng);
    let mut folds = vec![Vec::new(); n_folds];
    for (i, id) in shuffled.into_iter().enumerate() {
        folds[i % n_folds].push(id);
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn series(t: usize) -> AcquisitionSeries {
        let mut ms = Array4::<f32>::zeros((t, 1, 1, 1));
        let mut sar = Array4::<f32>::zeros((t, 1, 1, 1));
        for i in 0..t {
            ms[[i, 0, 0, 0]] = i as f32;
            sar[[i, 0, 0, 0]] = 100.0 + i as f32;
        }
        AcquisitionSeries {
            patch_id: "s".into(),
            multispec: ms,
            radar: sar,
            dates: (0..t as i64).map(|d| d * 3).collect(),
            radar_dates: (0..t as i64).map(|d| d * 3).collect(),
        }
    }

    #[test]
    fn single_frame_series_always_index_zero() {
        let s = series(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(sample_single_frame(&s, &mut rng).unwrap().source_index, 0);
        }
    }

    #[test]
    fn modalities_share_the_timestamp() {
        let s = series(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let f = sample_single_frame(&s, &mut rng).unwrap();
            let i = f.source_index;
            assert_eq!(f.multispec_frame[[0, 0, 0]], i as f32);
            assert_eq!(f.radar_frame.unwrap()[[0, 0, 0]], 100.0 + i as f32);
            assert_eq!(f.date, 3 * i as i64);
        }
    }

    #[test]
    fn fixed_seed_reproduces_sequence() {
        let s = series(9);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..30)
                .map(|_| sample_single_frame(&s, &mut rng).unwrap().source_index)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn uniform_over_indices() {
        let s = series(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            counts[sample_single_frame(&s, &mut rng).unwrap().source_index] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() <= 0.02, "{counts:?}");
        }
        // chi-square with 3 dof; 16.27 is the 0.1% critical value
        let e = n as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn folds_partition_ids() {
        let ids: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let folds = make_folds(&ids, 5, &mut rng).unwrap();
        assert_eq!(folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![2; 5]);
        let all: HashSet<_> = folds.iter().flatten().cloned().collect();
        assert_eq!(all.len(), 10);
        assert_eq!(all, ids.iter().cloned().collect());
        let ids: Vec<String> = (0..13).map(|i| format!("p{i}")).collect();
        let folds = make_folds(&ids, 5, &mut rng).unwrap();
        let sizes: Vec<_> = folds.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(make_folds(&ids[..3], 5, &mut rng).is_err());
    }
}
