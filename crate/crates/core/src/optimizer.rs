//! Mask recovery from a single box by momentum descent on per-pixel logits.

use serde::{Deserialize, Serialize};

use crate::affinity::{annotate_edges, build_edges, FeatureMode, FusionWeights};
use crate::features::{extract_features, FeatureConfig, PixelFeatures};
use crate::imagecore::{BinaryMask, BoxAnnotation, ImageGrid};
use crate::loss::{LossReport, MaskObjective, MaskState};
use crate::{Error, Result};

/// Logit given to pixels outside the box. They are never updated.
pub const OUTSIDE_LOGIT: f64 = -6.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub momentum: f64,
    /// Stop once `|ΔL_mask|` stays below this for `patience` consecutive steps.
    pub stop_delta: f64,
    pub patience: usize,
    pub theta1: f64,
    pub theta2: f64,
    pub tau: f64,
    pub k: usize,
    pub dilation: usize,
    pub feature: FeatureMode,
    pub features: FeatureConfig,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            max_iters: 500,
            momentum: 0.9,
            stop_delta: 1e-6,
            patience: 10,
            theta1: 0.9,
            theta2: 0.1,
            tau: 0.2,
            k: 3,
            dilation: 2,
            feature: FeatureMode::Fused,
            features: FeatureConfig::default(),
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad(format!(
                "step size must be positive, got {}",
                self.step_size
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.stop_delta >= 0.0) {
            return bad(format!(
                "stop delta must be non-negative, got {}",
                self.stop_delta
            ));
        }
        if !(self.tau.is_finite()) {
            return bad(format!("tau must be finite, got {}", self.tau));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        self.weights()?;
        Ok(())
    }

    /// Fusion weights actually applied, after the feature mode override.
    pub fn weights(&self) -> Result<FusionWeights> {
        Ok(self
            .feature
            .weights(FusionWeights::new(self.theta1, self.theta2)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryResult {
    pub mask: MaskState,
    /// Loss before the first step followed by one entry per step.
    pub loss_trace: Vec<LossReport>,
    pub iterations_run: usize,
    pub converged: bool,
}

impl RecoveryResult {
    pub fn initial(&self) -> &LossReport {
        &self.loss_trace[0]
    }

    pub fn last(&self) -> &LossReport {
        self.loss_trace
            .last()
            .expect("trace holds the initial loss")
    }
}

pub fn init_logits(bbox: &BoxAnnotation, width: usize, height: usize) -> Result<MaskState> {
    bbox.validate(width, height)?;
    let logits = (0..width * height)
        .map(|i| {
            if bbox.contains(i % width, i / width) {
                0.0
            } else {
                OUTSIDE_LOGIT
            }
        })
        .collect();
    MaskState::from_logits(width, height, logits)
}

pub fn recover_mask(
    image: &ImageGrid,
    bbox: &BoxAnnotation,
    config: &OptimizerConfig,
) -> Result<RecoveryResult> {
    config.validate()?;
    let features = extract_features(image, &config.features)?;
    recover_with_features(&features, bbox, config)
}

/// Same as [`recover_mask`] with features computed once by the caller, for
/// images holding several boxes.
pub fn recover_with_features(
    features: &PixelFeatures,
    bbox: &BoxAnnotation,
    config: &OptimizerConfig,
) -> Result<RecoveryResult> {
    config.validate()?;
    let (width, height) = (features.lab.width(), features.lab.height());
    bbox.validate(width, height)?;
    let edges = annotate_edges(
        build_edges(width, height, config.k, config.dilation)?,
        &features.lab,
        &features.lbp,
        config.weights()?,
        config.tau,
        bbox,
    )?;
    let objective = MaskObjective::new(bbox, &edges)?;

    let mut state = init_logits(bbox, width, height)?;
    let free: Vec<usize> = (0..width * height)
        .filter(|&i| bbox.contains(i % width, i / width))
        .collect();
    let mut velocity = vec![0.0; free.len()];

    let mut report = checked(objective.evaluate(&state)?, 0)?;
    let mut trace = vec![report];
    let mut quiet = 0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let grad = objective.gradient(&state)?;
        for (v, &i) in velocity.iter_mut().zip(&free) {
            *v = config.momentum * *v + grad[i];
            state.set_logit(i, state.logits()[i] - config.step_size * *v);
        }
        iterations += 1;
        let next = checked(objective.evaluate(&state)?, iterations)?;
        trace.push(next);
        if (next.l_mask - report.l_mask).abs() < config.stop_delta {
            quiet += 1;
            if quiet >= config.patience {
                converged = true;
                break;
            }
        } else {
            quiet = 0;
        }
        report = next;
    }
    Ok(RecoveryResult {
        mask: state,
        loss_trace: trace,
        iterations_run: iterations,
        converged,
    })
}

fn checked(report: LossReport, iter: usize) -> Result<LossReport> {
    if report.is_finite() {
        Ok(report)
    } else {
        Err(Error::NonFinite(format!(
            "loss at iteration {iter}: l_proj={} l_pair={}",
            report.l_proj, report.l_pair
        )))
    }
}

/// Foreground where `prob ≥ t`.
pub fn threshold_mask(mask: &MaskState, t: f64) -> BinaryMask {
    let w = mask.width();
    BinaryMask::from_fn(w, mask.height(), |x, y| mask.probs()[y * w + x] >= t)
}
