//! Synthetic two-class cohorts with monotone degradation.
//!
//! Normal subjects fluctuate around a constant mean. Diseased subjects drift
//! by `degradation_rate` per visit along a fixed sparse set of informative
//! features; every other feature is pure noise. Feature noise is Gaussian
//! with a per-feature standard deviation. Visit times are integers with
//! random gaps of one or two units.
//!
//! Generation is fully determined by the config: global choices come from one
//! seeded stream and each subject draws from its own stream, so the output
//! does not depend on generation order.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{save_panel, Label, LongitudinalPanel, PanelError, SubjectSeries};

/// Nominal share of normal subjects. Only applied when
/// [`SimConfig::normal_proportion`] is set; otherwise classes are balanced at
/// `n_per_class` each.
pub const NOMINAL_NORMAL_PROPORTION: f64 = 0.6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub d: usize,
    pub n_per_class: usize,
    /// Share of normal subjects among `2 * n_per_class`; `None` keeps the
    /// classes balanced.
    pub normal_proportion: Option<f64>,
    pub visits_min: usize,
    pub visits_max: usize,
    /// Mean shift per visit of each informative feature in diseased subjects.
    pub degradation_rate: f64,
    /// Per-feature noise standard deviations; drawn from `Uniform(0.5, 1.5)`
    /// when absent.
    pub noise_sigmas: Option<Vec<f64>>,
    pub informative_k: usize,
    /// Share of each class whose label is observed in the emitted panel.
    pub label_observed_fraction: f64,
    /// Common mean of every feature at the first visit.
    pub baseline_mean: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            d: 90,
            n_per_class: 50,
            normal_proportion: None,
            visits_min: 3,
            visits_max: 7,
            degradation_rate: 0.3,
            noise_sigmas: None,
            informative_k: 10,
            label_observed_fraction: 0.2,
            baseline_mean: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::InvalidConfig(msg));
        if self.d == 0 {
            return fail("d must be positive".into());
        }
        if self.n_per_class == 0 {
            return fail("n_per_class must be positive".into());
        }
        if let Some(p) = self.normal_proportion {
            if !(p > 0.0 && p < 1.0) {
                return fail(format!("normal_proportion must lie in (0, 1), got {p}"));
            }
            let (normal, diseased) = self.class_sizes();
            if normal == 0 || diseased == 0 {
                return fail("normal_proportion leaves a class empty".into());
            }
        }
        if self.visits_min == 0 || self.visits_min > self.visits_max {
            return fail(format!(
                "need 1 <= visits_min <= visits_max, got {}..{}",
                self.visits_min, self.visits_max
            ));
        }
        if !(self.degradation_rate.is_finite() && self.degradation_rate >= 0.0) {
            return fail(format!("degradation_rate must be >= 0, got {}", self.degradation_rate));
        }
        if self.informative_k > self.d {
            return fail(format!("informative_k = {} exceeds d = {}", self.informative_k, self.d));
        }
        if let Some(s) = &self.noise_sigmas {
            if s.len() != self.d {
                return fail(format!("{} noise sigmas for d = {}", s.len(), self.d));
            }
            if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return fail("noise sigmas must be finite and non-negative".into());
            }
        }
        if !(0.0..=1.0).contains(&self.label_observed_fraction) {
            return fail(format!(
                "label_observed_fraction must lie in [0, 1], got {}",
                self.label_observed_fraction
            ));
        }
        if !self.baseline_mean.is_finite() {
            return fail("baseline_mean must be finite".into());
        }
        Ok(())
    }

    /// `(normal, diseased)` subject counts.
    pub fn class_sizes(&self) -> (usize, usize) {
        match self.normal_proportion {
            None => (self.n_per_class, self.n_per_class),
            Some(p) => {
                let total = 2 * self.n_per_class;
                let normal = (p * total as f64).floor() as usize;
                (normal, total - normal)
            }
        }
    }
}

/// Config with every random choice resolved, for reproducibility and oracle
/// tests. Training code never reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEcho {
    pub config: SimConfig,
    pub noise_sigmas: Vec<f64>,
    pub informative_features: Vec<usize>,
    /// Indicator of the informative features.
    pub direction: Vec<f64>,
    pub n_normal: usize,
    pub n_diseased: usize,
}

impl SimEcho {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        serde_json::to_writer_pretty(std::fs::File::create(path)?, self)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    /// Panel with labels masked per `label_observed_fraction`.
    pub panel: LongitudinalPanel,
    /// True label of every subject, in panel order. Diseased is positive.
    pub truth: Vec<Label>,
    pub echo: SimEcho,
}

impl Simulation {
    /// The panel with every label revealed.
    pub fn labeled_panel(&self) -> LongitudinalPanel {
        self.panel
            .with_labels(&self.truth)
            .expect("truth has one label per subject")
    }

    pub fn save(&self, panel_path: impl AsRef<Path>, echo_path: impl AsRef<Path>) -> Result<(), SimError> {
        save_panel(panel_path, &self.panel)?;
        self.echo.save(echo_path)
    }
}

pub fn simulate(config: &SimConfig) -> Result<Simulation, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let sigmas = match &config.noise_sigmas {
        Some(s) => s.clone(),
        None => {
            let dist = Uniform::new(0.5, 1.5).expect("valid range");
            (0..config.d).map(|_| dist.sample(&mut rng)).collect()
        }
    };
    let mut informative = index::sample(&mut rng, config.d, config.informative_k).into_vec();
    informative.sort_unstable();
    let mut direction = vec![0.0; config.d];
    for &k in &informative {
        direction[k] = 1.0;
    }

    let (n_normal, n_diseased) = config.class_sizes();
    let mut truth: Vec<Label> = std::iter::repeat_n(Label::Negative, n_normal)
        .chain(std::iter::repeat_n(Label::Positive, n_diseased))
        .collect();
    truth.shuffle(&mut rng);

    let mut observed = vec![false; truth.len()];
    for class in [Label::Negative, Label::Positive] {
        let members: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == class).collect();
        let keep = (config.label_observed_fraction * members.len() as f64).floor() as usize;
        for pick in index::sample(&mut rng, members.len(), keep) {
            observed[members[pick]] = true;
        }
    }

    let subjects = truth
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut srng = ChaCha8Rng::seed_from_u64(config.seed);
            srng.set_stream(i as u64 + 1);
            let visits = srng.random_range(config.visits_min..=config.visits_max);
            let mut times = Vec::with_capacity(visits);
            let mut t = 1i64;
            for _ in 0..visits {
                times.push(t);
                t += if srng.random_bool(0.5) { 2 } else { 1 };
            }
            let diseased = label == Label::Positive;
            let observations = (0..visits)
                .map(|k| {
                    (0..config.d)
                        .map(|j| {
                            let drift = if diseased {
                                config.degradation_rate * k as f64 * direction[j]
                            } else {
                                0.0
                            };
                            let noise = if sigmas[j] > 0.0 {
                                Normal::new(0.0, sigmas[j]).expect("positive sigma").sample(&mut srng)
                            } else {
                                0.0
                            };
                            config.baseline_mean + drift + noise
                        })
                        .collect()
                })
                .collect();
            let shown = if observed[i] { label } else { Label::Unobserved };
            SubjectSeries::new(format!("s{:04}", i + 1), times, observations, shown)
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(Simulation {
        panel: LongitudinalPanel::new(subjects)?,
        truth,
        echo: SimEcho {
            config: config.clone(),
            noise_sigmas: sigmas,
            informative_features: informative,
            direction,
            n_normal,
            n_diseased,
        },
    })
}
