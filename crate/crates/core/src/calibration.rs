//! Confidence calibration by MAP logistic regression.
//!
//! Maps a raw signal `r` to `sigmoid(a * r + b)`, with `(a, b)` maximizing the
//! Bernoulli log-likelihood plus an isotropic Gaussian log-prior of scale
//! `prior_sigma`. The prior keeps the fit finite on separable or one-class data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::math::{log_sigmoid, sigmoid};

pub const DEFAULT_PRIOR_SIGMA: f64 = 10.0;
const MAX_ITERS: usize = 500;
const GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub raw: f64,
    pub correct: bool,
}

impl CalibrationSample {
    pub fn new(raw: f64, correct: bool) -> Self {
        CalibrationSample { raw, correct }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub a: f64,
    pub b: f64,
    pub prior_sigma: f64,
    pub fitted_on: usize,
}

impl Calibrator {
    pub fn calibrate(&self, raw: f64) -> f64 {
        sigmoid(self.a * raw + self.b)
    }
}

/// Log-posterior (up to a constant) of `(a, b)`.
pub fn map_objective(samples: &[CalibrationSample], a: f64, b: f64, prior_sigma: f64) -> f64 {
    let ll: f64 = samples
        .iter()
        .map(|s| {
            let z = a * s.raw + b;
            if s.correct {
                log_sigmoid(z)
            } else {
                log_sigmoid(-z)
            }
        })
        .sum();
    ll - (a * a + b * b) / (2.0 * prior_sigma * prior_sigma)
}

/// Gradient of [`map_objective`] and the (negated) Hessian entries `(haa, hab, hbb)`.
fn derivatives(
    samples: &[CalibrationSample],
    a: f64,
    b: f64,
    prior_sigma: f64,
) -> ([f64; 2], [f64; 3]) {
    let prec = 1.0 / (prior_sigma * prior_sigma);
    let mut g = [-a * prec, -b * prec];
    let mut h = [prec, 0.0, prec];
    for s in samples {
        let p = sigmoid(a * s.raw + b);
        let y = if s.correct { 1.0 } else { 0.0 };
        g[0] += (y - p) * s.raw;
        g[1] += y - p;
        let w = p * (1.0 - p);
        h[0] += w * s.raw * s.raw;
        h[1] += w * s.raw;
        h[2] += w;
    }
    (g, h)
}

/// Fits the MAP calibrator with damped Newton iterations from `(a, b) = (1, 0)`.
///
/// Panics if `samples` is empty.
pub fn fit_calibrator(samples: &[CalibrationSample], prior_sigma: f64) -> Calibrator {
    assert!(!samples.is_empty(), "calibration needs at least one sample");
    let (mut a, mut b) = (1.0, 0.0);
    let mut obj = map_objective(samples, a, b, prior_sigma);
    for _ in 0..MAX_ITERS {
        let (g, h) = derivatives(samples, a, b, prior_sigma);
        if g[0].hypot(g[1]) < GRAD_TOL {
            break;
        }
        // negative Hessian is positive definite thanks to the prior
        let det = h[0] * h[2] - h[1] * h[1];
        let (da, db) = (
            (h[2] * g[0] - h[1] * g[1]) / det,
            (h[0] * g[1] - h[1] * g[0]) / det,
        );
        let mut step = 1.0;
        loop {
            let (na, nb) = (a + step * da, b + step * db);
            let nobj = map_objective(samples, na, nb, prior_sigma);
            if nobj >= obj {
                a = na;
                b = nb;
                obj = nobj;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
        if step < 1e-12 {
            break;
        }
    }
    Calibrator {
        a,
        b,
        prior_sigma,
        fitted_on: samples.len(),
    }
}

/// Equal-width-bin expected calibration error. Bin `i` covers
/// `[i/bins, (i+1)/bins)`, the last bin also includes 1.0.
pub fn expected_calibration_error(pairs: &[(f64, bool)], bins: usize) -> f64 {
    assert!(bins >= 1, "ECE needs at least one bin");
    if pairs.is_empty() {
        return 0.0;
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for &(phi, correct) in pairs {
        let i = ((phi * bins as f64) as usize).min(bins - 1);
        count[i] += 1;
        conf[i] += phi;
        if correct {
            hits[i] += 1.0;
        }
    }
    let n = pairs.len() as f64;
    (0..bins)
        .filter(|&i| count[i] > 0)
        .map(|i| {
            let c = count[i] as f64;
            (c / n) * (hits[i] / c - conf[i] / c).abs()
        })
        .sum()
}

/// Fitted calibrators keyed by stage label (e.g. `single-base`, `multi-large`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CalibratorSet(pub BTreeMap<String, Calibrator>);

impl CalibratorSet {
    pub fn get(&self, key: &str) -> Option<&Calibrator> {
        self.0.get(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, calibrator: Calibrator) {
        self.0.insert(key.into(), calibrator);
    }

    /// Calibrated value, or `raw` unchanged when no calibrator exists for `key`.
    pub fn calibrate(&self, key: &str, raw: f64) -> f64 {
        self.get(key).map_or(raw, |c| c.calibrate(raw))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(std::io::Error::other)
    }
}
