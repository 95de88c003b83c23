//! Box-supervised instance mask recovery.
//!
//! Given an image and a bounding box, [`optimizer::recover_mask`] finds a
//! per-pixel foreground mask by gradient descent on a projection loss (the
//! mask's row/column maxima must reproduce the box) plus a pairwise affinity
//! loss over a dilated pixel graph, where neighbouring pixels whose fused
//! CIELAB-colour / LBP-texture similarity clears a threshold are pushed to
//! share a label.
//!
//! Modules, bottom-up:
//!
//! * [`imagecore`]: rasters, boxes, binary masks and PNG/PPM/PGM I/O.
//! * [`features`]: sRGB to CIELAB, rotation-invariant uniform LBP codes and
//!   the per-pixel feature vectors fed to the similarity.
//! * [`affinity`]: the dilated K×K edge graph, per-edge similarities, the
//!   confidence threshold and similarity heatmaps.
//! * [`loss`]: projection, pairwise and total mask losses with closed-form
//!   gradients.
//! * [`optimizer`]: momentum descent over free logits inside the box.
//! * [`costmodel`]: multiplication/parameter counts of standard and
//!   depthwise-separable convolutions and the lightweight-design presets.
//! * [`pipeline`]: per-box solves over one image and the output files.
//! * [`synth`]: seeded synthetic scenes with ground truth, IoU and Dice.
//!
//! With the default `parallel` feature the hot loops run on rayon. Every
//! reduction is summed in a fixed order, so results are bit-identical with
//! and without the feature.

pub mod affinity;
pub mod costmodel;
mod error;
pub mod exec;
pub mod features;
pub mod gradcheck;
pub mod imagecore;
pub mod loss;
pub mod optimizer;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
