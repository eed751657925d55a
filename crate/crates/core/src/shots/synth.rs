use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{DatasetManifest, GeneratorRecord};
use super::{Label, Shot, GREENWALD_FRACTION, N_FEATURES, Q95, ROTATING_MODE, V_LOOP};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::kernels::DEFAULT_STEP_S;

/// Window scored by [`oracle_score`].
const ORACLE_WINDOW_S: f64 = 0.4;

/// Knobs of the synthetic shot generator. Every field is recorded in the
/// dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_shots: usize,
    pub disruptive_fraction: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub step_s: f64,
    /// Scales every precursor amplitude; 0 makes the classes identical.
    pub separability: f64,
    pub lead_min_s: f64,
    pub lead_max_s: f64,
    /// How far a disruption cuts its shot short. At 1 a disruptive shot ends
    /// uniformly between the minimum and its programmed duration; at 0 it
    /// runs the full programmed duration. Scaled by `separability` (capped
    /// at 1).
    pub early_termination: f64,
    /// Per-channel stationary mean, in feature order.
    pub channel_means: Vec<f64>,
    /// Per-channel stationary standard deviation, in feature order.
    pub channel_sds: Vec<f64>,
    /// Lag-one autocorrelation of the per-sample noise.
    pub ar_coefficient: f64,
    /// Spread of the per-shot operating point, as a multiple of channel sd.
    pub shot_offset_scale: f64,
    /// Peak level of the rotating-mode precursor.
    pub rotating_amplitude: f64,
    pub rotating_freq_hz: f64,
    /// Peak standard deviation of the extra loop-voltage jitter.
    pub vloop_jitter: f64,
    /// Fraction of the gap to 1 closed by the density ramp.
    pub density_ramp: f64,
    /// Drop of q95 at the end of the lead window.
    pub q95_drop: f64,
    /// Fraction of disruptive shots whose precursor is weakened.
    pub weak_fraction: f64,
    /// Weak precursors are scaled by a factor uniform in
    /// `[weak_scale_min, weak_scale_max]`.
    pub weak_scale_min: f64,
    pub weak_scale_max: f64,
    /// Probability that any shot carries a benign rotating-mode burst.
    pub burst_probability: f64,
    pub burst_amplitude: f64,
    pub burst_min_s: f64,
    pub burst_max_s: f64,
    pub machine: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_shots: 1000,
            disruptive_fraction: 0.2,
            min_duration_s: 0.3,
            max_duration_s: 2.0,
            step_s: DEFAULT_STEP_S,
            separability: 1.0,
            lead_min_s: 0.1,
            lead_max_s: 0.4,
            early_termination: 1.0,
            channel_means: vec![0.0, 0.0, 0.6, 1.2, 3.5, 0.45, 0.0, 0.0, 1.6, 0.4, 0.0, 1.0],
            channel_sds: vec![0.1, 0.1, 0.1, 0.1, 0.2, 0.05, 0.2, 0.2, 0.05, 0.1, 0.1, 0.1],
            ar_coefficient: 0.9,
            shot_offset_scale: 0.5,
            rotating_amplitude: 3.0,
            rotating_freq_hz: 15.0,
            vloop_jitter: 0.6,
            density_ramp: 0.75,
            q95_drop: 0.9,
            weak_fraction: 0.06,
            weak_scale_min: 0.0,
            weak_scale_max: 0.3,
            burst_probability: 0.1,
            burst_amplitude: 0.8,
            burst_min_s: 0.05,
            burst_max_s: 0.2,
            machine: "synthetic".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_shots == 0 {
            return bad("n_shots must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.disruptive_fraction) {
            return bad(format!(
                "disruptive_fraction must lie in [0, 1], got {}",
                self.disruptive_fraction
            ));
        }
        if !(self.step_s.is_finite() && self.step_s > 0.0) {
            return bad(format!("step_s must be positive, got {}", self.step_s));
        }
        if !(self.min_duration_s.is_finite()
            && self.min_duration_s >= self.step_s
            && self.min_duration_s <= self.max_duration_s
            && self.max_duration_s.is_finite())
        {
            return bad(format!(
                "duration range [{}, {}] s is invalid",
                self.min_duration_s, self.max_duration_s
            ));
        }
        if !(self.lead_min_s > 0.0
            && self.lead_min_s <= self.lead_max_s
            && self.lead_max_s.is_finite())
        {
            return bad(format!(
                "lead range [{}, {}] s is invalid",
                self.lead_min_s, self.lead_max_s
            ));
        }
        if !(self.burst_min_s > 0.0
            && self.burst_min_s <= self.burst_max_s
            && self.burst_max_s.is_finite())
        {
            return bad(format!(
                "burst range [{}, {}] s is invalid",
                self.burst_min_s, self.burst_max_s
            ));
        }
        for (name, p) in [
            ("early_termination", self.early_termination),
            ("weak_fraction", self.weak_fraction),
            ("burst_probability", self.burst_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.weak_scale_min > self.weak_scale_max {
            return bad(format!(
                "weak scale range [{}, {}] is invalid",
                self.weak_scale_min, self.weak_scale_max
            ));
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) {
            return bad(format!(
                "ar_coefficient must lie in [0, 1), got {}",
                self.ar_coefficient
            ));
        }
        if self.channel_means.len() != N_FEATURES || self.channel_sds.len() != N_FEATURES {
            return bad(format!(
                "channel_means and channel_sds need {N_FEATURES} entries"
            ));
        }
        if self
            .channel_sds
            .iter()
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return bad("channel_sds must be finite and non-negative".into());
        }
        let finite = [
            self.separability,
            self.shot_offset_scale,
            self.rotating_amplitude,
            self.rotating_freq_hz,
            self.vloop_jitter,
            self.density_ramp,
            self.q95_drop,
            self.weak_scale_min,
            self.weak_scale_max,
            self.burst_amplitude,
        ];
        if finite.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || self.channel_means.iter().any(|v| !v.is_finite())
        {
            return bad("generator amplitudes must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Number of disruptive shots generated.
    pub fn n_disruptive(&self) -> usize {
        (self.n_shots as f64 * self.disruptive_fraction).round() as usize
    }
}

/// Generates raw (untruncated) shots and their manifest. Shot `i` draws from
/// its own random stream, so the result does not depend on thread count.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<(DatasetManifest, Vec<Shot>)> {
    cfg.validate()?;
    let mut labels = vec![Label::Nondisruptive; cfg.n_shots];
    labels[..cfg.n_disruptive()].fill(Label::Disruptive);
    let mut label_rng = ChaCha8Rng::seed_from_u64(seed);
    label_rng.set_stream(u64::MAX);
    labels.shuffle(&mut label_rng);

    let width = cfg.n_shots.to_string().len().max(4);
    let shots: Vec<Shot> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_shot(cfg, format!("shot{i:0width$}"), label, &mut rng)
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest::for_shots(
        &shots,
        Some(GeneratorRecord {
            config: cfg.clone(),
            seed,
        }),
    );
    Ok((manifest, shots))
}

fn generate_shot(
    cfg: &SynthConfig,
    id: String,
    label: Label,
    rng: &mut ChaCha8Rng,
) -> Result<Shot> {
    let step = cfg.step_s;
    let min_len = (cfg.min_duration_s / step).round().max(1.0) as usize;
    let max_len = ((cfg.max_duration_s / step).round() as usize).max(min_len);
    let programmed = rng.random_range(min_len..=max_len);
    let end_draw = rng.random::<f64>();
    let t_len = if label.is_disruptive() {
        let shorten = cfg.early_termination * cfg.separability.min(1.0) * end_draw;
        programmed - (shorten * (programmed - min_len) as f64).round() as usize
    } else {
        programmed
    };

    // All draws happen for every shot in a fixed order, whatever the label.
    let lead_s = rng.random_range(cfg.lead_min_s..=cfg.lead_max_s);
    let weak = rng.random::<f64>() < cfg.weak_fraction;
    let weak_scale =
        cfg.weak_scale_min + rng.random::<f64>() * (cfg.weak_scale_max - cfg.weak_scale_min);
    let rot_phase = rng.random_range(0.0..2.0 * PI);
    let burst = rng.random::<f64>() < cfg.burst_probability;
    let burst_s = rng.random_range(cfg.burst_min_s..=cfg.burst_max_s);
    let burst_pos = rng.random::<f64>();
    let burst_phase = rng.random_range(0.0..2.0 * PI);

    let phi = cfg.ar_coefficient;
    let innovation = (1.0 - phi * phi).sqrt();
    let mut data = vec![0.0; N_FEATURES * t_len];
    for c in 0..N_FEATURES {
        let sd = cfg.channel_sds[c];
        let offset: f64 = StandardNormal.sample(rng);
        let level = cfg.channel_means[c] + cfg.shot_offset_scale * sd * offset;
        let mut e: f64 = StandardNormal.sample(rng);
        let row = &mut data[c * t_len..(c + 1) * t_len];
        for v in row.iter_mut() {
            *v = level + sd * e;
            let z: f64 = StandardNormal.sample(rng);
            e = phi * e + innovation * z;
        }
    }

    let omega = 2.0 * PI * cfg.rotating_freq_hz * step;
    if burst {
        let b_len = ((burst_s / step).round() as usize).clamp(1, t_len);
        let start = ((t_len - b_len) as f64 * burst_pos).floor() as usize;
        let row = &mut data[ROTATING_MODE * t_len..(ROTATING_MODE + 1) * t_len];
        for k in 0..b_len {
            let envelope = (PI * (k as f64 + 0.5) / b_len as f64).sin();
            let t = (start + k) as f64;
            row[start + k] +=
                cfg.burst_amplitude * envelope * (1.0 + 0.5 * (omega * t + burst_phase).sin());
        }
    }

    let jitter: Vec<f64> = (0..t_len).map(|_| StandardNormal.sample(rng)).collect();
    if label.is_disruptive() {
        let amp = cfg.separability * if weak { weak_scale } else { 1.0 };
        let lead = ((lead_s / step).round() as usize).clamp(1, t_len);
        let start = t_len - lead;
        let ngw_gap = 1.0 - cfg.channel_means[GREENWALD_FRACTION];
        for k in 0..lead {
            let t = start + k;
            let p = (k + 1) as f64 / lead as f64;
            let osc = 1.0 + 0.5 * (omega * t as f64 + rot_phase).sin();
            data[ROTATING_MODE * t_len + t] += amp * cfg.rotating_amplitude * p * osc;
            data[V_LOOP * t_len + t] += amp * cfg.vloop_jitter * p * jitter[t];
            data[GREENWALD_FRACTION * t_len + t] += amp * cfg.density_ramp * ngw_gap * p;
            data[Q95 * t_len + t] -= amp * cfg.q95_drop * p;
        }
    }

    Shot::new(
        id,
        Tensor::new(vec![N_FEATURES, t_len], data)?,
        step,
        label,
        cfg.machine.clone(),
    )
}

/// Reference detector used to calibrate generated datasets: mean squared
/// rotating-mode signal over the last 400 ms of the shot.
pub fn oracle_score(shot: &Shot) -> f64 {
    let row = shot.channel(ROTATING_MODE);
    let window = ((ORACLE_WINDOW_S / shot.step_s).round() as usize).clamp(1, row.len());
    let tail = &row[row.len() - window..];
    tail.iter().map(|v| v * v).sum::<f64>() / window as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shots::{prepare_shot, MIN_DURATION_S};

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            n_shots: n,
            ..SynthConfig::default()
        }
    }

    /// Probability that a random positive outscores a random negative.
    fn pairwise_auc(scores: &[(f64, bool)]) -> f64 {
        let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
        let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
        let mut total = 0.0;
        for p in &pos {
            for n in &neg {
                total += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (pos.len() * neg.len()) as f64
    }

    fn oracle_auc(cfg: &SynthConfig, seed: u64) -> f64 {
        let (_, shots) = synth_generate(cfg, seed).unwrap();
        let scores: Vec<(f64, bool)> = shots
            .into_iter()
            .filter_map(prepare_shot)
            .map(|s| (oracle_score(&s), s.label.is_disruptive()))
            .collect();
        pairwise_auc(&scores)
    }

    #[test]
    fn label_counts_are_exact() {
        let (m, shots) = synth_generate(&small(100), 4).unwrap();
        assert_eq!(m.counts.disruptive, 20);
        assert_eq!(m.counts.nondisruptive, 80);
        assert_eq!(shots.iter().filter(|s| s.label.is_disruptive()).count(), 20);
        let cfg = SynthConfig {
            n_shots: 4418,
            ..SynthConfig::default()
        };
        assert_eq!(cfg.n_disruptive(), 884);
    }

    #[test]
    fn shots_respect_configuration() {
        let cfg = small(200);
        let (m, shots) = synth_generate(&cfg, 11).unwrap();
        assert_eq!(m.generator.as_ref().unwrap().seed, 11);
        for s in &shots {
            assert_eq!(s.channels.shape()[0], N_FEATURES);
            assert!(s.duration_s() >= cfg.min_duration_s - 1e-9);
            assert!(s.duration_s() <= cfg.max_duration_s + 1e-9);
            assert!(s.channels.all_finite());
            let p = prepare_shot(s.clone()).unwrap();
            assert!(p.duration_s() >= MIN_DURATION_S);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (m1, s1) = synth_generate(&small(50), 7).unwrap();
        let (m2, s2) = synth_generate(&small(50), 7).unwrap();
        assert_eq!(m1.to_json().unwrap(), m2.to_json().unwrap());
        assert_eq!(s1, s2);
        let (_, s3) = synth_generate(&small(50), 8).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SynthConfig {
                disruptive_fraction: 1.5,
                ..small(10)
            },
            SynthConfig {
                min_duration_s: 3.0,
                ..small(10)
            },
            SynthConfig {
                lead_min_s: 0.0,
                ..small(10)
            },
            SynthConfig {
                channel_sds: vec![0.1; 3],
                ..small(10)
            },
            SynthConfig {
                n_shots: 0,
                ..small(10)
            },
        ] {
            assert!(matches!(synth_generate(&cfg, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_separability_is_indistinguishable() {
        let cfg = SynthConfig {
            separability: 0.0,
            ..small(1000)
        };
        let auc = oracle_auc(&cfg, 3);
        assert!((auc - 0.5).abs() < 0.07, "auc {auc}");
    }

    #[test]
    fn default_dataset_calibrates_the_oracle() {
        let auc = oracle_auc(&small(1000), 0);
        assert!(auc >= 0.97, "oracle auc {auc}");
        assert!(auc < 1.0, "oracle auc {auc}");
    }
}
