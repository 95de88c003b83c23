//! Whole-image segmentation: one independent solve per box, and the files
//! written for it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::exec;
use crate::features::extract_features;
use crate::imagecore::{save_image, BoxAnnotation, ImageGrid};
use crate::loss::LossReport;
use crate::optimizer::{recover_with_features, threshold_mask, OptimizerConfig, RecoveryResult};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub index: usize,
    #[serde(rename = "box")]
    pub bbox: BoxAnnotation,
    pub iterations: usize,
    pub converged: bool,
    pub initial: LossReport,
    #[serde(rename = "final")]
    pub last: LossReport,
    pub foreground_pixels: usize,
    pub mask_file: String,
    pub probs_file: String,
    pub trace_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub width: usize,
    pub height: usize,
    /// Similarity used for the confidence test: `lab`, `lbp` or `fused`.
    pub feature: String,
    pub threshold: f64,
    pub config: OptimizerConfig,
    pub instances: Vec<InstanceSummary>,
}

/// Solves every box against the same features. Boxes are solved
/// concurrently when the parallel path is active.
pub fn segment(
    image: &ImageGrid,
    boxes: &[BoxAnnotation],
    config: &OptimizerConfig,
) -> Result<Vec<RecoveryResult>> {
    config.validate()?;
    for b in boxes {
        b.validate(image.width(), image.height())?;
    }
    let features = extract_features(image, &config.features)?;
    exec::map_slice(boxes, |b| recover_with_features(&features, b, config))
        .into_iter()
        .collect()
}

pub fn trace_csv(result: &RecoveryResult) -> String {
    let mut out = String::from("iter,l_proj,l_pair,l_mask\n");
    for (i, r) in result.loss_trace.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{},{}", r.l_proj, r.l_pair, r.l_mask);
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs [`segment`] and writes `mask_{i}.png`, `probs_{i}.pgm`,
/// `trace_{i}.csv` and `summary.json` into `out_dir`. Nothing is created
/// unless every solve succeeds.
pub fn segment_to_dir(
    image: &ImageGrid,
    boxes: &[BoxAnnotation],
    config: &OptimizerConfig,
    threshold: f64,
    out_dir: &Path,
) -> Result<SegmentSummary> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let results = segment(image, boxes, config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut instances = Vec::with_capacity(results.len());
    for (i, (r, bbox)) in results.iter().zip(boxes).enumerate() {
        let names = [
            format!("mask_{i}.png"),
            format!("probs_{i}.pgm"),
            format!("trace_{i}.csv"),
        ];
        let mask = threshold_mask(&r.mask, threshold);
        save_image(&mask.to_image(), out_dir.join(&names[0]))?;
        let probs = ImageGrid::new(r.mask.width(), r.mask.height(), 1, r.mask.probs().to_vec())?;
        save_image(&probs, out_dir.join(&names[1]))?;
        write(&out_dir.join(&names[2]), &trace_csv(r))?;
        let [mask_file, probs_file, trace_file] = names;
        instances.push(InstanceSummary {
            index: i,
            bbox: *bbox,
            iterations: r.iterations_run,
            converged: r.converged,
            initial: *r.initial(),
            last: *r.last(),
            foreground_pixels: mask.count(),
            mask_file,
            probs_file,
            trace_file,
        });
    }
    let summary = SegmentSummary {
        width: image.width(),
        height: image.height(),
        feature: config.feature.as_str().to_string(),
        threshold,
        config: *config,
        instances,
    };
    let path: PathBuf = out_dir.join("summary.json");
    write(&path, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(summary)
}
