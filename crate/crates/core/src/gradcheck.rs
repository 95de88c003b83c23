//! Central finite-difference check of the mask loss gradient on random
//! instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{annotate_edges, build_edges, FusionWeights};
use crate::features::{extract_features, FeatureConfig};
use crate::imagecore::{BoxAnnotation, ImageGrid};
use crate::loss::{MaskObjective, MaskState};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub size: usize,
    pub trials: usize,
    pub h: f64,
    pub tolerance: f64,
    /// Entries with `|grad|` at or below this are skipped.
    pub floor: f64,
    /// Scales the analytic gradient by 1.01 before comparing; a negative
    /// control for callers of the check.
    pub corrupt: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 12,
            trials: 20,
            h: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
            corrupt: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl TrialResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// A random image (two colour regions plus noise), box and logit field.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    size: usize,
) -> Result<(MaskState, BoxAnnotation, MaskObjective)> {
    let split = rng.gen_range(1..size);
    let colors: [[f64; 3]; 2] = [rng.gen(), rng.gen()];
    let data = (0..size * size)
        .flat_map(|i| {
            let c = colors[usize::from(i % size >= split)];
            c.map(|v| v + rng.gen_range(-0.15..0.15))
        })
        .map(|v| v.clamp(0.0, 1.0))
        .collect::<Vec<_>>();
    let image = ImageGrid::new(size, size, 3, data)?;
    let x0 = rng.gen_range(0..size - 1);
    let y0 = rng.gen_range(0..size - 1);
    let bbox = BoxAnnotation::new(
        x0,
        y0,
        rng.gen_range(x0 + 1..=size),
        rng.gen_range(y0 + 1..=size),
    )?;
    let features = extract_features(&image, &FeatureConfig::default())?;
    let edges = annotate_edges(
        build_edges(size, size, 3, rng.gen_range(1..=2))?,
        &features.lab,
        &features.lbp,
        FusionWeights::default(),
        0.2,
        &bbox,
    )?;
    let logits = (0..size * size).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mask = MaskState::from_logits(size, size, logits)?;
    let objective = MaskObjective::new(&bbox, &edges)?;
    Ok((mask, bbox, objective))
}

/// Largest relative error `|g − fd| / max(|g|, |fd|)` over entries with
/// `|g| > floor`, and the number of entries compared.
pub fn compare(
    objective: &MaskObjective,
    mask: &MaskState,
    analytic: &[f64],
    h: f64,
    floor: f64,
) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, &g) in analytic.iter().enumerate() {
        if g.abs() <= floor {
            continue;
        }
        let mut plus = mask.clone();
        plus.set_logit(i, mask.logits()[i] + h);
        let mut minus = mask.clone();
        minus.set_logit(i, mask.logits()[i] - h);
        let fd =
            (objective.evaluate(&plus)?.l_mask - objective.evaluate(&minus)?.l_mask) / (2.0 * h);
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()));
        checked += 1;
    }
    Ok((worst, checked))
}

pub fn run(config: &GradcheckConfig) -> Result<Vec<TrialResult>> {
    if config.size < 4 {
        return Err(Error::InvalidArgument(format!(
            "gradcheck size must be at least 4, got {}",
            config.size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.trials)
        .map(|trial| {
            let (mask, _, objective) = random_instance(&mut rng, config.size)?;
            let mut grad = objective.gradient(&mask)?;
            if config.corrupt {
                grad.iter_mut().for_each(|g| *g *= 1.01);
            }
            let (max_rel_error, checked) =
                compare(&objective, &mask, &grad, config.h, config.floor)?;
            Ok(TrialResult {
                trial,
                max_rel_error,
                checked,
            })
        })
        .collect()
}
