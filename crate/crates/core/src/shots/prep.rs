use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Shot, EFIT_CHANNELS};
use crate::error::{Error, Result};

/// Data removed from the end of every shot: the mitigation system needs this
/// much warning.
pub const TRUNCATE_S: f64 = 0.040;
/// Shots shorter than this after truncation are dropped.
pub const MIN_DURATION_S: f64 = 0.125;

/// Longest shot accepted for resampling, in samples (about 14 h at 200 Hz).
pub const MAX_SAMPLES: usize = 10_000_000;

const KNOT_TOL_S: f64 = 1e-9;

/// Samples removed by truncation at sampling period `step_s`.
pub fn truncate_samples(step_s: f64) -> usize {
    (TRUNCATE_S / step_s).round() as usize
}

/// Fewest samples a prepared shot may have (inclusive).
pub fn min_samples(step_s: f64) -> usize {
    (MIN_DURATION_S / step_s - 1e-9).ceil() as usize
}

/// Linear interpolation of `(times, values)` onto a uniform grid from the
/// first to the last time stamp. Grid points that coincide with a knot
/// return the knot value unchanged.
pub fn resample_200hz(times: &[f64], values: &[f64], step_s: f64) -> Result<Vec<f64>> {
    check_times(times, step_s)?;
    if values.len() != times.len() {
        return Err(Error::Input(format!(
            "{} time stamps but {} values",
            times.len(),
            values.len()
        )));
    }
    Ok(interpolate(times, values, step_s))
}

/// [`resample_200hz`] applied to several channels sharing one time axis.
pub fn resample_channels(
    times: &[f64],
    channels: &[Vec<f64>],
    step_s: f64,
) -> Result<Vec<Vec<f64>>> {
    check_times(times, step_s)?;
    channels
        .iter()
        .map(|values| resample_200hz(times, values, step_s))
        .collect()
}

fn check_times(times: &[f64], step_s: f64) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::Input("resampling needs at least two samples".into()));
    }
    if !(step_s.is_finite() && step_s > 0.0) {
        return Err(Error::Input(format!("invalid sampling period {step_s}")));
    }
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Input(
            "time stamps must be finite and strictly increasing".into(),
        ));
    }
    let span = times[times.len() - 1] - times[0];
    if span / step_s >= MAX_SAMPLES as f64 {
        return Err(Error::Input(format!(
            "a {span} s shot exceeds {MAX_SAMPLES} samples at {step_s} s"
        )));
    }
    Ok(())
}

fn interpolate(times: &[f64], values: &[f64], step_s: f64) -> Vec<f64> {
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    let n_grid = (span / step_s + 1e-6).floor() as usize + 1;
    let mut out = Vec::with_capacity(n_grid);
    let mut j = 0;
    for i in 0..n_grid {
        let tg = t0 + i as f64 * step_s;
        while j + 1 < times.len() && times[j + 1] <= tg + KNOT_TOL_S {
            j += 1;
        }
        if (tg - times[j]).abs() <= KNOT_TOL_S || j + 1 == times.len() {
            out.push(values[j]);
        } else {
            let frac = (tg - times[j]) / (times[j + 1] - times[j]);
            out.push(values[j] + frac * (values[j + 1] - values[j]));
        }
    }
    out
}

/// Drops the final 40 ms. Returns `None` when fewer than 125 ms remain.
pub fn prepare_shot(shot: Shot) -> Option<Shot> {
    let cut = truncate_samples(shot.step_s);
    let keep = shot.len().checked_sub(cut)?;
    if keep < min_samples(shot.step_s) || keep == 0 {
        return None;
    }
    shot.prefix(keep).ok()
}

/// Random prefix of a non-disruptive shot, between 125 ms and the full
/// length (both inclusive).
pub fn clip_augment<R: Rng + ?Sized>(shot: &Shot, rng: &mut R) -> Result<Shot> {
    if shot.label.is_disruptive() {
        return Err(Error::Input(format!(
            "shot {} is disruptive; only non-disruptive shots are clipped",
            shot.id
        )));
    }
    let lo = min_samples(shot.step_s).min(shot.len()).max(1);
    let len = rng.random_range(lo..=shot.len());
    shot.prefix(len)
}

/// Replaces random windows of the reconstruction-derived channels with
/// zero-mean unit-variance Gaussian noise. The shot is cut into consecutive
/// windows of `gap_len_ms`; each window drops out with probability
/// `gap_rate`, on all reconstruction channels at once.
pub fn whitenoise_gaps<R: Rng + ?Sized>(
    shot: &Shot,
    rng: &mut R,
    gap_rate: f64,
    gap_len_ms: f64,
) -> Result<Shot> {
    if !(0.0..=1.0).contains(&gap_rate) {
        return Err(Error::Config(format!(
            "gap_rate must lie in [0, 1], got {gap_rate}"
        )));
    }
    if !(gap_len_ms.is_finite() && gap_len_ms > 0.0) {
        return Err(Error::Config(format!(
            "gap_len_ms must be positive, got {gap_len_ms}"
        )));
    }
    let mut out = shot.clone();
    if gap_rate == 0.0 {
        return Ok(out);
    }
    let t_len = shot.len();
    let window = ((gap_len_ms / 1000.0 / shot.step_s).round() as usize).max(1);
    let data = out.channels.data_mut();
    let mut start = 0;
    while start < t_len {
        let end = (start + window).min(t_len);
        if rng.random::<f64>() < gap_rate {
            for &c in &EFIT_CHANNELS {
                for v in &mut data[c * t_len + start..c * t_len + end] {
                    *v = StandardNormal.sample(rng);
                }
            }
        }
        start = end;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Tensor;
    use crate::shots::{Label, N_FEATURES};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shot(samples: usize, label: Label) -> Shot {
        let data = (0..N_FEATURES * samples).map(|i| i as f64 * 0.25).collect();
        Shot::new(
            "s",
            Tensor::new(vec![N_FEATURES, samples], data).unwrap(),
            0.005,
            label,
            "test",
        )
        .unwrap()
    }

    #[test]
    fn constant_signal_stays_constant() {
        let times = [0.0, 0.013, 0.02, 0.041];
        let out = resample_200hz(&times, &[3.5; 4], 0.005).unwrap();
        assert_eq!(out.len(), 9);
        assert!(out.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn ramp_is_reproduced_exactly() {
        let times: Vec<f64> = (0..=20).map(|i| i as f64 * 0.01).collect();
        let out = resample_200hz(&times, &times, 0.005).unwrap();
        assert_eq!(out.len(), 41);
        for (i, v) in out.iter().enumerate() {
            assert!((v - i as f64 * 0.005).abs() < 1e-15);
        }
    }

    #[test]
    fn knots_return_original_values() {
        let times = [0.0, 0.005, 0.0125, 0.02];
        let values = [1.0, -2.0, 7.0, 0.3];
        let out = resample_200hz(&times, &values, 0.005).unwrap();
        assert_eq!(out[0], 1.0);
        assert_eq!(out[1], -2.0);
        assert_eq!(out[4], 0.3);
        assert!((out[2] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn resample_errors() {
        assert!(resample_200hz(&[0.0], &[1.0], 0.005).is_err());
        assert!(resample_200hz(&[0.0, 0.0], &[1.0, 2.0], 0.005).is_err());
        assert!(resample_200hz(&[0.1, 0.0], &[1.0, 2.0], 0.005).is_err());
        assert!(resample_200hz(&[0.0, 0.1], &[1.0], 0.005).is_err());
        assert!(resample_200hz(&[0.0, 1e9], &[1.0, 2.0], 0.005).is_err());
    }

    #[test]
    fn truncation_and_exclusion_boundaries() {
        let p = prepare_shot(shot(200, Label::Disruptive)).unwrap();
        assert_eq!(p.len(), 192);
        assert!((p.duration_s() - 0.960).abs() < 1e-12);
        // 164 ms raw is not on the 5 ms grid; 32 samples = 160 ms → 120 ms.
        assert!(prepare_shot(shot(32, Label::Nondisruptive)).is_none());
        // 165 ms → 125 ms, kept.
        assert_eq!(
            prepare_shot(shot(33, Label::Nondisruptive)).unwrap().len(),
            25
        );
        assert!(prepare_shot(shot(5, Label::Nondisruptive)).is_none());
    }

    #[test]
    fn clip_augment_contract() {
        let s = shot(100, Label::Nondisruptive);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen_min = false;
        let mut seen_max = false;
        for _ in 0..2000 {
            let c = clip_augment(&s, &mut rng).unwrap();
            assert!((25..=100).contains(&c.len()));
            seen_min |= c.len() == 25;
            seen_max |= c.len() == 100;
            assert_eq!(c.label, Label::Nondisruptive);
        }
        assert!(seen_min && seen_max);
        let a = clip_augment(&s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = clip_augment(&s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(clip_augment(&shot(100, Label::Disruptive), &mut rng).is_err());
    }

    #[test]
    fn whitenoise_contract() {
        let s = shot(200, Label::Nondisruptive);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(whitenoise_gaps(&s, &mut rng, 0.0, 50.0).unwrap(), s);
        assert!(whitenoise_gaps(&s, &mut rng, 1.5, 50.0).is_err());

        let full = whitenoise_gaps(&s, &mut rng, 1.0, 1000.0).unwrap();
        for c in 0..N_FEATURES {
            let changed = full.channel(c) != s.channel(c);
            assert_eq!(changed, EFIT_CHANNELS.contains(&c), "channel {c}");
        }
        for &c in &EFIT_CHANNELS {
            let v = full.channel(c);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            assert!((var - 1.0).abs() < 0.3, "variance {var}");
        }
    }

    proptest! {
        #[test]
        fn prepared_shots_are_long_enough(samples in 1usize..400) {
            if let Some(p) = prepare_shot(shot(samples, Label::Nondisruptive)) {
                prop_assert!(p.duration_s() >= MIN_DURATION_S - 1e-12);
                prop_assert_eq!(p.len(), samples - 8);
            } else {
                prop_assert!(samples < 33);
            }
        }

        #[test]
        fn clips_are_exact_prefixes(samples in 25usize..300, seed in 0u64..500) {
            let s = shot(samples, Label::Nondisruptive);
            let c = clip_augment(&s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for ch in 0..N_FEATURES {
                prop_assert_eq!(c.channel(ch), &s.channel(ch)[..c.len()]);
            }
        }
    }
}
