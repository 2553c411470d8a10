//! Synthetic irregularly sampled classification data.
//!
//! Three disjoint signal windows on `[0, 1]`; class `c` carries a
//! full-amplitude bump in window `c` and a half-amplitude bump in window
//! `(c+1) mod 3`, plus Gaussian noise. A random subset of the base grid is
//! kept per sequence, which is what makes the sampling irregular.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::value_function::TimeSeries;

/// Signal windows; class `c` owns window `c`.
pub const SIGNAL_WINDOWS: [(f64, f64); 3] = [(0.1, 0.2), (0.45, 0.55), (0.8, 0.9)];
const BASE_LENGTH: usize = 200;
const BUMP_AMPLITUDE: f64 = 2.0;
const BUMP_WIDTH: f64 = 0.04;
const NOISE_SIGMA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeries {
    pub series: TimeSeries,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<LabeledSeries>,
    pub test: Vec<LabeledSeries>,
    pub classes: usize,
}

fn window_center(w: (f64, f64)) -> f64 {
    0.5 * (w.0 + w.1)
}

fn bump(t: f64, center: f64) -> f64 {
    let d = t - center;
    (-d * d / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp()
}

/// Noise-free class signal: full bump in the class window, half bump in the
/// next window (mod 3).
pub fn class_signal(class: usize, t: f64) -> f64 {
    let own = window_center(SIGNAL_WINDOWS[class]);
    let next = window_center(SIGNAL_WINDOWS[(class + 1) % 3]);
    BUMP_AMPLITUDE * bump(t, own) + 0.5 * BUMP_AMPLITUDE * bump(t, next)
}

fn one_sequence(class: usize, keep_fraction: f64, rng: &mut ChaCha8Rng) -> LabeledSeries {
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let full_times: Vec<f64> = (0..BASE_LENGTH)
        .map(|i| i as f64 / (BASE_LENGTH - 1) as f64)
        .collect();
    let full_values: Vec<f64> = full_times
        .iter()
        .map(|&t| class_signal(class, t) + noise.sample(rng))
        .collect();

    let keep = ((keep_fraction * BASE_LENGTH as f64).round() as usize)
        .clamp(2, BASE_LENGTH);
    let mut indices: Vec<usize> = (0..BASE_LENGTH).collect();
    indices.shuffle(rng);
    indices.truncate(keep);
    indices.sort_unstable();

    let times: Vec<f64> = indices.iter().map(|&i| full_times[i]).collect();
    let values = DMatrix::from_fn(1, keep, |_, j| full_values[indices[j]]);
    LabeledSeries {
        series: TimeSeries::new(times, values).expect("strictly increasing subset"),
        label: class,
    }
}

/// Generates a deterministic train/test split. Byte-identical for identical
/// `(seed, classes, per_class_train, per_class_test, keep_fraction)`.
pub fn generate_synthetic(
    seed: u64,
    classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    keep_fraction: f64,
) -> Result<SyntheticDataset> {
    if classes == 0 || classes > 3 {
        return Err(Error::invalid(format!(
            "classes must be 1..=3 (signal windows are fixed), got {classes}"
        )));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = |count: usize, rng: &mut ChaCha8Rng| -> Vec<LabeledSeries> {
        let mut out = Vec::with_capacity(classes * count);
        for class in 0..classes {
            for _ in 0..count {
                out.push(one_sequence(class, keep_fraction, rng));
            }
        }
        out
    };
    let mut train = split(per_class_train, &mut rng);
    let test = split(per_class_test, &mut rng);
    // Mix the classes once so even un-shuffled mini-batches are balanced.
    train.shuffle(&mut rng);
    Ok(SyntheticDataset {
        train,
        test,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seeds_give_identical_datasets() {
        let a = generate_synthetic(7, 3, 5, 3, 0.3).unwrap();
        let b = generate_synthetic(7, 3, 5, 3, 0.3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(8, 3, 5, 3, 0.3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn keep_fraction_one_retains_the_full_grid() {
        let data = generate_synthetic(1, 3, 2, 1, 1.0).unwrap();
        for labeled in data.train.iter().chain(&data.test) {
            assert_eq!(labeled.series.len(), 200);
        }
    }

    #[test]
    fn keep_fraction_bounds_are_enforced() {
        assert!(generate_synthetic(1, 3, 2, 1, 0.0).is_err());
        assert!(generate_synthetic(1, 3, 2, 1, 1.5).is_err());
        assert!(generate_synthetic(1, 4, 2, 1, 0.5).is_err());
    }

    #[test]
    fn class_zero_mean_is_noise_level_outside_its_windows() {
        // Average 500 class-0 draws on the full grid; within [0.45, 0.9] the
        // mean signal away from the class windows must sit near zero.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut sums = vec![0.0; 200];
        let draws = 500;
        for _ in 0..draws {
            let seq = one_sequence(0, 1.0, &mut rng);
            for j in 0..200 {
                sums[j] += seq.series.values()[(0, j)];
            }
        }
        let times: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let in_class_window = |t: f64| {
            let (a0, b0) = SIGNAL_WINDOWS[0];
            let (a1, b1) = SIGNAL_WINDOWS[1];
            (t >= a0 && t <= b0) || (t >= a1 && t <= b1)
        };
        let mut total = 0.0;
        let mut count = 0;
        for (j, &t) in times.iter().enumerate() {
            if t >= 0.45 && t <= 0.9 && !in_class_window(t) {
                total += (sums[j] / draws as f64).abs();
                count += 1;
            }
        }
        assert!(count > 0);
        let mean_abs = total / count as f64;
        assert!(mean_abs < 0.15, "mean |signal| outside windows: {mean_abs}");
    }

    #[test]
    fn class_signal_peaks_in_its_own_window() {
        for class in 0..3 {
            let own = window_center(SIGNAL_WINDOWS[class]);
            let other = window_center(SIGNAL_WINDOWS[(class + 2) % 3]);
            assert!(class_signal(class, own) > 1.9);
            assert!(class_signal(class, other) < 0.2);
        }
    }
}
