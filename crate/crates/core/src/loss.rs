//! Box-supervised mask loss and its gradient with respect to mask logits.
//!
//! `L_mask = L_proj + L_pair` where
//!
//! * `L_proj = D(max_rows m, l_x) + D(max_cols m, l_y)` with the dice loss
//!   `D(p, q) = 1 − 2Σpq / (Σp² + Σq² + ε)` and `l_x`, `l_y` the box
//!   indicators along each axis;
//! * `L_pair = −(1/N) Σ log P(y_e = 1)` over edges that are confident and
//!   touch the box, with `P(y_e = 1) = m_a·m_b + (1 − m_a)(1 − m_b)` and `N`
//!   the number of such edges.
//!
//! The max projection is differentiated by routing the subgradient to the
//! argmax pixel of each row/column, ties going to the lowest pixel index.

use serde::{Deserialize, Serialize};

use crate::affinity::{Adjacency, EdgeSet};
use crate::exec;
use crate::imagecore::BoxAnnotation;
use crate::{Error, Result};

/// Smoothing term of the dice denominator.
pub const DICE_EPS: f64 = 1e-6;

/// Lower clamp of `P(y_e = 1)` inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel logits and their sigmoid probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    width: usize,
    height: usize,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl MaskState {
    pub fn from_logits(width: usize, height: usize, logits: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || logits.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} logits for a {width}x{height} mask",
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mask logits".into()));
        }
        let probs = logits.iter().map(|&x| sigmoid(x)).collect();
        Ok(Self {
            width,
            height,
            logits,
            probs,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.probs[y * self.width + x]
    }

    pub fn set_logit(&mut self, index: usize, value: f64) {
        self.logits[index] = value;
        self.probs[index] = sigmoid(value);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// One value per column (max over rows).
    X,
    /// One value per row (max over columns).
    Y,
}

/// Max projections together with the flat index of each argmax pixel.
fn project_argmax(mask: &MaskState, axis: Axis) -> (Vec<f64>, Vec<usize>) {
    let (w, h) = (mask.width, mask.height);
    let (outer, inner) = match axis {
        Axis::X => (w, h),
        Axis::Y => (h, w),
    };
    (0..outer)
        .map(|o| {
            let index = |i: usize| match axis {
                Axis::X => i * w + o,
                Axis::Y => o * w + i,
            };
            // inner indices ascend with flat index, so strict `>` keeps the lowest tie
            let mut best = index(0);
            for i in 1..inner {
                let j = index(i);
                if mask.probs[j] > mask.probs[best] {
                    best = j;
                }
            }
            (mask.probs[best], best)
        })
        .unzip()
}

/// Per-column (`X`) or per-row (`Y`) maximum of the probabilities.
pub fn project(mask: &MaskState, axis: Axis) -> Vec<f64> {
    project_argmax(mask, axis).0
}

/// Box indicators along both axes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionTargets {
    pub l_x: Vec<f64>,
    pub l_y: Vec<f64>,
}

impl ProjectionTargets {
    pub fn from_box(bbox: &BoxAnnotation, width: usize, height: usize) -> Result<Self> {
        bbox.validate(width, height)?;
        let ind = |range: std::ops::Range<usize>, n: usize| {
            (0..n)
                .map(|i| if range.contains(&i) { 1.0 } else { 0.0 })
                .collect()
        };
        Ok(Self {
            l_x: ind(bbox.x_min..bbox.x_max, width),
            l_y: ind(bbox.y_min..bbox.y_max, height),
        })
    }
}

pub fn dice_loss(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "dice inputs have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let (num, den) = dice_terms(p, q);
    Ok(1.0 - 2.0 * num / den)
}

fn dice_terms(p: &[f64], q: &[f64]) -> (f64, f64) {
    let num: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let den: f64 =
        p.iter().map(|a| a * a).sum::<f64>() + q.iter().map(|b| b * b).sum::<f64>() + DICE_EPS;
    (num, den)
}

/// `∂D/∂p_i = −2q_i/B + 4A·p_i/B²` with `A = Σpq`, `B` the denominator.
fn dice_grad(p: &[f64], q: &[f64]) -> Vec<f64> {
    let (num, den) = dice_terms(p, q);
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| -2.0 * qi / den + 4.0 * num * pi / (den * den))
        .collect()
}

pub fn projection_loss(mask: &MaskState, bbox: &BoxAnnotation) -> Result<f64> {
    let targets = ProjectionTargets::from_box(bbox, mask.width, mask.height)?;
    Ok(dice_loss(&project(mask, Axis::X), &targets.l_x)?
        + dice_loss(&project(mask, Axis::Y), &targets.l_y)?)
}

/// `P(y_e = 1) = a·b + (1 − a)(1 − b)`.
pub fn pair_prob(m_a: f64, m_b: f64) -> f64 {
    m_a * m_b + (1.0 - m_a) * (1.0 - m_b)
}

fn check_dims(mask: &MaskState, edges: &EdgeSet) -> Result<()> {
    if (mask.width, mask.height) != (edges.width(), edges.height()) {
        return Err(Error::Dimension(format!(
            "mask is {}x{}, edge set is {}x{}",
            mask.width,
            mask.height,
            edges.width(),
            edges.height()
        )));
    }
    if !edges.is_annotated() {
        return Err(Error::InvalidArgument(
            "edge set has not been annotated".into(),
        ));
    }
    Ok(())
}

/// Mean of `−log P(y_e = 1)` over confident in-box edges, and their count.
/// Returns `(0, 0)` when no edge qualifies.
pub fn pairwise_loss(mask: &MaskState, edges: &EdgeSet) -> Result<(f64, usize)> {
    check_dims(mask, edges)?;
    let pairs = active_pairs(edges);
    Ok((pairwise_mean(&mask.probs, &pairs), pairs.len()))
}

fn active_pairs(edges: &EdgeSet) -> Vec<(u32, u32)> {
    edges
        .edges()
        .iter()
        .filter(|e| e.confident && e.in_box)
        .map(|e| {
            let (a, b) = edges.endpoints(e);
            (a as u32, b as u32)
        })
        .collect()
}

fn pairwise_mean(probs: &[f64], pairs: &[(u32, u32)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total = exec::chunked_sum(pairs.len(), |range| {
        pairs[range]
            .iter()
            .map(|&(a, b)| {
                -pair_prob(probs[a as usize], probs[b as usize])
                    .max(LOG_FLOOR)
                    .ln()
            })
            .sum()
    });
    total / pairs.len() as f64
}

/// Loss values of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_proj: f64,
    pub l_pair: f64,
    pub l_mask: f64,
    /// Number of confident in-box edges, `N`.
    #[serde(rename = "n_edges")]
    pub confident_in_box_edges: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.l_proj.is_finite() && self.l_pair.is_finite() && self.l_mask.is_finite()
    }
}

/// The loss for one box, with everything that does not depend on the mask
/// precomputed: projection targets, the confident in-box edge list and its
/// per-pixel incidence lists.
#[derive(Clone, Debug)]
pub struct MaskObjective {
    width: usize,
    height: usize,
    targets: ProjectionTargets,
    pairs: Vec<(u32, u32)>,
    adjacency: Adjacency,
}

impl MaskObjective {
    pub fn new(bbox: &BoxAnnotation, edges: &EdgeSet) -> Result<Self> {
        if !edges.is_annotated() {
            return Err(Error::InvalidArgument(
                "edge set has not been annotated".into(),
            ));
        }
        let (width, height) = (edges.width(), edges.height());
        let targets = ProjectionTargets::from_box(bbox, width, height)?;
        let pairs = active_pairs(edges);
        let adjacency = Adjacency::build(
            width * height,
            pairs.iter().map(|&(a, b)| (a as usize, b as usize)),
        );
        Ok(Self {
            width,
            height,
            targets,
            pairs,
            adjacency,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.pairs.len()
    }

    fn check(&self, mask: &MaskState) -> Result<()> {
        if (mask.width, mask.height) != (self.width, self.height) {
            return Err(Error::Dimension(format!(
                "mask is {}x{}, objective is {}x{}",
                mask.width, mask.height, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, mask: &MaskState) -> Result<LossReport> {
        self.check(mask)?;
        let l_proj = dice_loss(&project(mask, Axis::X), &self.targets.l_x)?
            + dice_loss(&project(mask, Axis::Y), &self.targets.l_y)?;
        let l_pair = pairwise_mean(&mask.probs, &self.pairs);
        Ok(LossReport {
            l_proj,
            l_pair,
            l_mask: l_proj + l_pair,
            confident_in_box_edges: self.pairs.len(),
        })
    }

    /// `∂L_mask/∂logits`, one entry per pixel.
    pub fn gradient(&self, mask: &MaskState) -> Result<Vec<f64>> {
        self.check(mask)?;
        let probs = &mask.probs;
        let inv_n = if self.pairs.is_empty() {
            0.0
        } else {
            1.0 / self.pairs.len() as f64
        };
        // d/dm_p of −log P summed over p's active edges
        let mut grad_m = exec::map_range(self.width * self.height, |p| {
            let mp = probs[p];
            let mut acc = 0.0;
            for &(q, _) in self.adjacency.neighbors(p) {
                let mq = probs[q as usize];
                let pe = pair_prob(mp, mq);
                if pe > LOG_FLOOR {
                    acc -= (2.0 * mq - 1.0) / pe;
                }
            }
            acc * inv_n
        });
        for (axis, target) in [(Axis::X, &self.targets.l_x), (Axis::Y, &self.targets.l_y)] {
            let (proj, argmax) = project_argmax(mask, axis);
            for (g, idx) in dice_grad(&proj, target).into_iter().zip(argmax) {
                grad_m[idx] += g;
            }
        }
        for (g, &m) in grad_m.iter_mut().zip(probs) {
            *g *= m * (1.0 - m);
        }
        Ok(grad_m)
    }
}

pub fn mask_loss(mask: &MaskState, bbox: &BoxAnnotation, edges: &EdgeSet) -> Result<LossReport> {
    check_dims(mask, edges)?;
    MaskObjective::new(bbox, edges)?.evaluate(mask)
}

pub fn mask_loss_gradient(
    mask: &MaskState,
    bbox: &BoxAnnotation,
    edges: &EdgeSet,
) -> Result<Vec<f64>> {
    check_dims(mask, edges)?;
    MaskObjective::new(bbox, edges)?.gradient(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::{annotate_edges, build_edges, Edge, FusionWeights};
    use crate::features::{extract_features, FeatureConfig};
    use crate::imagecore::ImageGrid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn mask_from_probs(w: usize, h: usize, probs: &[f64]) -> MaskState {
        MaskState::from_logits(w, h, probs.iter().map(|&p| logit(p)).collect()).unwrap()
    }

    fn annotated(img: &ImageGrid, bbox: &BoxAnnotation, d: usize) -> EdgeSet {
        let f = extract_features(img, &FeatureConfig::default()).unwrap();
        annotate_edges(
            build_edges(img.width(), img.height(), 3, d).unwrap(),
            &f.lab,
            &f.lbp,
            FusionWeights::default(),
            0.2,
            bbox,
        )
        .unwrap()
    }

    fn random_case(
        rng: &mut ChaCha8Rng,
        w: usize,
        h: usize,
    ) -> (MaskState, BoxAnnotation, EdgeSet) {
        let img = ImageGrid::from_fn(w, h, 3, |x, _, c| {
            // two colour regions plus noise so some edges drop below tau
            let base = if x < w / 2 {
                [0.8, 0.2, 0.2]
            } else {
                [0.2, 0.3, 0.8]
            };
            base[c]
        })
        .unwrap();
        let noisy = ImageGrid::new(
            w,
            h,
            3,
            img.data()
                .iter()
                .map(|v| (v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0))
                .collect(),
        )
        .unwrap();
        let x0 = rng.gen_range(0..w - 2);
        let y0 = rng.gen_range(0..h - 2);
        let bbox = BoxAnnotation::new(x0, y0, rng.gen_range(x0 + 2..=w), rng.gen_range(y0 + 2..=h))
            .unwrap();
        let edges = annotated(&noisy, &bbox, 1);
        let mask =
            MaskState::from_logits(w, h, (0..w * h).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .unwrap();
        (mask, bbox, edges)
    }

    #[test]
    fn sigmoid_matches_definition() {
        for x in [-40.0, -6.0, -1e-3, 0.0, 0.7, 12.0, 40.0] {
            let m = MaskState::from_logits(1, 1, vec![x]).unwrap();
            assert!((m.probs()[0] - 1.0 / (1.0 + (-x).exp())).abs() < 1e-12);
        }
        assert!(MaskState::from_logits(2, 1, vec![0.0]).is_err());
        assert!(MaskState::from_logits(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn projection_examples() {
        let m = MaskState::from_logits(3, 2, vec![0.0; 6]).unwrap();
        assert_eq!(project(&m, Axis::X), vec![0.5; 3]);
        assert_eq!(project(&m, Axis::Y), vec![0.5; 2]);
        let mut probs = vec![1e-9; 12];
        probs[2 * 4 + 1] = 0.9;
        let m = mask_from_probs(4, 3, &probs);
        let px = project(&m, Axis::X);
        assert!((px[1] - 0.9).abs() < 1e-12);
        assert!(px[0] < 1e-8);
        assert!((project(&m, Axis::Y)[2] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        let m = MaskState::from_logits(3, 3, vec![0.0; 9]).unwrap();
        let (_, ax) = project_argmax(&m, Axis::X);
        let (_, ay) = project_argmax(&m, Axis::Y);
        assert_eq!(ax, vec![0, 1, 2]);
        assert_eq!(ay, vec![0, 3, 6]);
    }

    #[test]
    fn dice_examples() {
        let p = [1.0, 0.0, 1.0, 1.0];
        assert!(dice_loss(&p, &p).unwrap() < 1e-5);
        let d = dice_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((d - 1.0).abs() < 1e-5);
        // 1 - 2(0.5)/(1 + 0.25 + eps)
        let d = dice_loss(&[1.0, 0.0], &[0.5, 0.0]).unwrap();
        assert!((d - 0.2).abs() < 1e-5);
        assert!(dice_loss(&[1.0], &[1.0, 0.0]).is_err());
        let long = vec![1.0; 1000];
        assert!(dice_loss(&long, &long).unwrap() < 1e-5);
    }

    #[test]
    fn projection_loss_examples() {
        let bbox = BoxAnnotation::new(1, 2, 5, 5).unwrap();
        let filled = mask_from_probs(
            6,
            6,
            &(0..36)
                .map(|i| {
                    if bbox.contains(i % 6, i / 6) {
                        1.0 - 1e-12
                    } else {
                        1e-12
                    }
                })
                .collect::<Vec<_>>(),
        );
        assert!(projection_loss(&filled, &bbox).unwrap() < 1e-5);
        let empty = mask_from_probs(6, 6, &[1e-12; 36]);
        assert!((projection_loss(&empty, &bbox).unwrap() - 2.0).abs() < 1e-6);
        assert!(projection_loss(&empty, &BoxAnnotation::new(0, 0, 7, 2).unwrap()).is_err());
    }

    #[test]
    fn projection_loss_shrunk_by_one_column() {
        // 6x6, box x in [1,5), y in [2,5); mask fills x in [1,4) only
        let bbox = BoxAnnotation::new(1, 2, 5, 5).unwrap();
        let probs: Vec<f64> = (0..36)
            .map(|i| {
                let (x, y) = (i % 6, i / 6);
                if (1..4).contains(&x) && (2..5).contains(&y) {
                    1.0 - 1e-15
                } else {
                    1e-15
                }
            })
            .collect();
        let m = mask_from_probs(6, 6, &probs);
        // by hand: x-projection (0,1,1,1,0,0) vs (0,1,1,1,1,0): 1 - 6/(3+4) = 1/7;
        // y-projection equals its target exactly: 1 - 6/(6+eps)
        let expect = (1.0 - 6.0 / (7.0 + DICE_EPS)) + (1.0 - 6.0 / (6.0 + DICE_EPS));
        assert!((projection_loss(&m, &bbox).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn pair_prob_examples() {
        assert!((pair_prob(0.999, 0.999) - 0.998002).abs() < 1e-12);
        assert_eq!(pair_prob(1.0, 1.0), 1.0);
        for x in [0.0, 0.13, 0.5, 0.77, 1.0] {
            assert!((pair_prob(0.5, x) - 0.5).abs() < 1e-12);
        }
        assert!((pair_prob(0.9, 0.1) - 0.18).abs() < 1e-12);
    }

    #[test]
    fn pairwise_uniform_probs() {
        let img = ImageGrid::filled(5, 5, 3, 0.3).unwrap();
        let bbox = BoxAnnotation::new(1, 1, 4, 4).unwrap();
        let edges = annotated(&img, &bbox, 1);
        let (l, n) = pairwise_loss(&mask_from_probs(5, 5, &[0.5; 25]), &edges).unwrap();
        assert!(n > 0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = pairwise_loss(&mask_from_probs(5, 5, &[0.999; 25]), &edges).unwrap();
        assert!((l + 0.998002f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn pairwise_matches_per_edge_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = build_edges(4, 4, 3, 1).unwrap();
        let mut edges: Vec<Edge> = base.edges().to_vec();
        for (i, e) in edges.iter_mut().enumerate() {
            e.confident = i % 3 == 0;
            e.in_box = i % 2 == 0;
        }
        let es = EdgeSet::from_raw(4, 4, 0.2, edges.clone());
        assert_eq!(es.active_count(), 7);
        let probs: Vec<f64> = (0..16).map(|_| rng.gen_range(0.01..0.99)).collect();
        let m = mask_from_probs(4, 4, &probs);
        let (l, n) = pairwise_loss(&m, &es).unwrap();
        let mut sum = 0.0;
        for e in edges.iter().filter(|e| e.confident && e.in_box) {
            let a = m.prob(e.a.0 as usize, e.a.1 as usize);
            let b = m.prob(e.b.0 as usize, e.b.1 as usize);
            sum += -(a * b + (1.0 - a) * (1.0 - b)).ln();
        }
        assert_eq!(n, 7);
        assert!((l - sum / 7.0).abs() < 1e-10);
    }

    #[test]
    fn pairwise_without_active_edges_is_zero() {
        let es = EdgeSet::from_raw(3, 3, 0.2, build_edges(3, 3, 3, 1).unwrap().edges().to_vec());
        let (l, n) = pairwise_loss(&mask_from_probs(3, 3, &[0.3; 9]), &es).unwrap();
        assert_eq!((l, n), (0.0, 0));
    }

    #[test]
    fn pairwise_unchanged_by_duplicating_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, bbox, es) = random_case(&mut rng, 8, 8);
        let _ = bbox;
        let doubled: Vec<Edge> = es.edges().iter().chain(es.edges()).copied().collect();
        let es2 = EdgeSet::from_raw(8, 8, 0.2, doubled);
        let (l1, n1) = pairwise_loss(&m, &es).unwrap();
        let (l2, n2) = pairwise_loss(&m, &es2).unwrap();
        assert_eq!(n2, 2 * n1);
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn mask_loss_examples() {
        let img = ImageGrid::from_fn(10, 10, 3, |x, y, c| {
            if (2..7).contains(&x) && (3..8).contains(&y) {
                [0.9, 0.8, 0.1][c]
            } else {
                [0.1, 0.2, 0.7][c]
            }
        })
        .unwrap();
        let bbox = BoxAnnotation::new(2, 3, 7, 8).unwrap();
        let edges = annotated(&img, &bbox, 2);
        let probs: Vec<f64> = (0..100)
            .map(|i| {
                if bbox.contains(i % 10, i / 10) {
                    1.0 - 1e-9
                } else {
                    1e-9
                }
            })
            .collect();
        let r = mask_loss(&mask_from_probs(10, 10, &probs), &bbox, &edges).unwrap();
        assert!(r.l_mask < 0.01, "{r:?}");
        let r = mask_loss(&mask_from_probs(10, 10, &[1e-9; 100]), &bbox, &edges).unwrap();
        assert!((r.l_proj - 2.0).abs() < 1e-6);
        assert!(r.l_pair < 1e-6);
    }

    #[test]
    fn uniform_half_probs_have_no_pairwise_gradient() {
        let img = ImageGrid::filled(6, 6, 3, 0.5).unwrap();
        let bbox = BoxAnnotation::full(6, 6);
        let edges = annotated(&img, &bbox, 1);
        let obj = MaskObjective::new(&bbox, &edges).unwrap();
        let m = MaskState::from_logits(6, 6, vec![0.0; 36]).unwrap();
        // only the projection argmaxes (first row and first column) move
        let g = obj.gradient(&m).unwrap();
        for y in 1..6 {
            for x in 1..6 {
                assert_eq!(g[y * 6 + x], 0.0);
            }
        }
    }

    #[test]
    fn untouched_pixel_has_zero_gradient() {
        // box in the corner; pixel (9,9) is outside it, not linked to it and
        // not an argmax because column 9 / row 9 peak elsewhere
        let img = ImageGrid::filled(10, 10, 3, 0.5).unwrap();
        let bbox = BoxAnnotation::new(0, 0, 3, 3).unwrap();
        let edges = annotated(&img, &bbox, 1);
        let mut logits = vec![-4.0; 100];
        logits[9] = -1.0; // top of column 9
        logits[90] = -1.0; // left of row 9
        let m = MaskState::from_logits(10, 10, logits).unwrap();
        let g = mask_loss_gradient(&m, &bbox, &edges).unwrap();
        assert_eq!(g[99], 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let (m, bbox, es) = random_case(&mut rng, 9, 7);
            let obj = MaskObjective::new(&bbox, &es).unwrap();
            let g = obj.gradient(&m).unwrap();
            let h = 1e-5;
            for i in 0..m.logits().len() {
                let mut plus = m.clone();
                plus.set_logit(i, m.logits()[i] + h);
                let mut minus = m.clone();
                minus.set_logit(i, m.logits()[i] - h);
                let fd = (obj.evaluate(&plus).unwrap().l_mask
                    - obj.evaluate(&minus).unwrap().l_mask)
                    / (2.0 * h);
                if g[i].abs() > 1e-8 {
                    assert!(
                        (g[i] - fd).abs() / g[i].abs().max(fd.abs()) < 1e-4,
                        "pixel {i}: {} vs {fd}",
                        g[i]
                    );
                } else {
                    assert!(fd.abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let es = annotated(
            &ImageGrid::filled(4, 4, 3, 0.5).unwrap(),
            &BoxAnnotation::full(4, 4),
            1,
        );
        let m = MaskState::from_logits(5, 4, vec![0.0; 20]).unwrap();
        assert!(pairwise_loss(&m, &es).is_err());
        assert!(mask_loss(&m, &BoxAnnotation::full(4, 4), &es).is_err());
        assert!(mask_loss_gradient(&m, &BoxAnnotation::full(4, 4), &es).is_err());
        assert!(pairwise_loss(&m, &build_edges(5, 4, 3, 1).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn pair_prob_normalized(a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let p1 = pair_prob(a, b);
            prop_assert!((p1 + (a * (1.0 - b) + (1.0 - a) * b) - 1.0).abs() < 1e-12);
            prop_assert_eq!(p1, pair_prob(b, a));
        }

        #[test]
        fn dice_in_unit_interval(p in prop::collection::vec(0.0..=1.0f64, 1..40), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<f64> = p.iter().map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let d = dice_loss(&p, &q).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn loss_report_sums_exactly(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, bbox, es) = random_case(&mut rng, 7, 6);
            let r = mask_loss(&m, &bbox, &es).unwrap();
            prop_assert_eq!(r.l_mask, r.l_proj + r.l_pair);
        }

        #[test]
        fn pairwise_ignores_unlinked_pixels(seed in any::<u64>(), bump in -5.0..5.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, _, es) = random_case(&mut rng, 8, 6);
            let mut linked = vec![false; 48];
            for e in es.edges().iter().filter(|e| e.confident && e.in_box) {
                let (a, b) = es.endpoints(e);
                linked[a] = true;
                linked[b] = true;
            }
            let mut moved = m.clone();
            for (i, &l) in linked.iter().enumerate() {
                if !l {
                    moved.set_logit(i, m.logits()[i] + bump);
                }
            }
            prop_assert_eq!(pairwise_loss(&m, &es).unwrap(), pairwise_loss(&moved, &es).unwrap());
        }
    }
}
