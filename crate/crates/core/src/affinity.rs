//! Pixel-pair graph and per-edge similarities.
//!
//! Every pixel is linked to the `k×k − 1` pixels of a dilated `k×k` window
//! around it. Each undirected pair is stored once, with the first endpoint
//! preceding the second in row-major order.
//!
//! Similarity of two feature vectors is `exp(−‖a − b‖₂ / 2)`. The colour and
//! texture similarities are fused as `θ₁·s_lab + θ₂·s_lbp`, and an edge is
//! *confident* when the fused value reaches the threshold `τ`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::exec;
use crate::features::FeatureImage;
use crate::imagecore::{BoxAnnotation, ImageGrid};
use crate::{Error, Result};

/// Convex weights of colour and texture similarity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub theta1: f64,
    pub theta2: f64,
}

impl FusionWeights {
    pub fn new(theta1: f64, theta2: f64) -> Result<Self> {
        if !(theta1 >= 0.0 && theta2 >= 0.0) || ((theta1 + theta2) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "fusion weights must be nonnegative and sum to 1, got {theta1} + {theta2}"
            )));
        }
        Ok(Self { theta1, theta2 })
    }
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            theta1: 0.9,
            theta2: 0.1,
        }
    }
}

/// Which similarity drives the confidence test.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Colour only.
    Lab,
    /// Texture only.
    Lbp,
    /// Weighted colour + texture.
    #[default]
    Fused,
}

impl FeatureMode {
    /// Effective weights: `Lab` and `Lbp` ignore the configured ones.
    pub fn weights(self, configured: FusionWeights) -> FusionWeights {
        match self {
            FeatureMode::Lab => FusionWeights {
                theta1: 1.0,
                theta2: 0.0,
            },
            FeatureMode::Lbp => FusionWeights {
                theta1: 0.0,
                theta2: 1.0,
            },
            FeatureMode::Fused => configured,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Lab => "lab",
            FeatureMode::Lbp => "lbp",
            FeatureMode::Fused => "fused",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lab" => Ok(FeatureMode::Lab),
            "lbp" => Ok(FeatureMode::Lbp),
            "fused" => Ok(FeatureMode::Fused),
            other => Err(Error::InvalidArgument(format!(
                "unknown feature mode {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub a: (u32, u32),
    pub b: (u32, u32),
    pub s_lab: f64,
    pub s_lbp: f64,
    pub s_fused: f64,
    pub confident: bool,
    pub in_box: bool,
}

#[derive(Clone, Debug)]
pub struct EdgeSet {
    width: usize,
    height: usize,
    k: usize,
    dilation: usize,
    tau: f64,
    annotated: bool,
    edges: Vec<Edge>,
}

impl EdgeSet {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn is_annotated(&self) -> bool {
        self.annotated
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Flat pixel indices of an edge's endpoints.
    pub fn endpoints(&self, e: &Edge) -> (usize, usize) {
        (
            e.a.1 as usize * self.width + e.a.0 as usize,
            e.b.1 as usize * self.width + e.b.0 as usize,
        )
    }

    /// Number of edges that are both confident and touch the box.
    pub fn active_count(&self) -> usize {
        self.edges
            .iter()
            .filter(|e| e.confident && e.in_box)
            .count()
    }

    /// Re-evaluates every confidence flag against a new threshold.
    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        self.tau = tau;
        for e in &mut self.edges {
            e.confident = e.s_fused >= tau;
        }
        Ok(self)
    }

    #[cfg(test)]
    pub(crate) fn from_raw(width: usize, height: usize, tau: f64, edges: Vec<Edge>) -> Self {
        Self {
            width,
            height,
            k: 3,
            dilation: 1,
            tau,
            annotated: true,
            edges,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must lie in (0, 1), got {tau}"
        )));
    }
    Ok(())
}

/// Enumerates the dilated `k×k` neighbourhood graph of a `width × height`
/// image. Similarities start at 1 and no edge is flagged until
/// [`annotate_edges`] runs.
pub fn build_edges(width: usize, height: usize, k: usize, dilation: usize) -> Result<EdgeSet> {
    if k < 3 || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "k must be odd and >= 3, got {k}"
        )));
    }
    if dilation == 0 {
        return Err(Error::InvalidArgument("dilation must be >= 1".into()));
    }
    let r = ((k - 1) / 2) as isize;
    let d = dilation as isize;
    // forward half of the window: later rows, or same row to the right
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|j| (-r..=r).map(move |i| (i * d, j * d)))
        .filter(|&(dx, dy)| dy > 0 || (dy == 0 && dx > 0))
        .collect();
    let (w, h) = (width as isize, height as isize);
    let rows = exec::map_range(height, |y| {
        let mut row = Vec::new();
        for x in 0..w {
            for &(dx, dy) in &offsets {
                let (bx, by) = (x + dx, y as isize + dy);
                if (0..w).contains(&bx) && (0..h).contains(&by) {
                    row.push(Edge {
                        a: (x as u32, y as u32),
                        b: (bx as u32, by as u32),
                        s_lab: 1.0,
                        s_lbp: 1.0,
                        s_fused: 1.0,
                        confident: false,
                        in_box: false,
                    });
                }
            }
        }
        row
    });
    Ok(EdgeSet {
        width,
        height,
        k,
        dilation,
        tau: 0.2,
        annotated: false,
        edges: rows.concat(),
    })
}

/// `exp(−‖a − b‖₂ / 2)`.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "feature dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(similarity_unchecked(a, b))
}

fn similarity_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    // clamp keeps the (0, 1] range for distances beyond ~1490
    (-sq.sqrt() / 2.0).exp().max(f64::MIN_POSITIVE)
}

/// `θ₁·s_lab + θ₂·s_lbp`.
pub fn fuse(s_lab: f64, s_lbp: f64, theta1: f64, theta2: f64) -> Result<f64> {
    let w = FusionWeights::new(theta1, theta2)?;
    Ok(w.theta1 * s_lab + w.theta2 * s_lbp)
}

/// Fills in similarities, confidence and box membership for every edge.
pub fn annotate_edges(
    edges: EdgeSet,
    lab: &FeatureImage,
    lbp: &FeatureImage,
    weights: FusionWeights,
    tau: f64,
    bbox: &BoxAnnotation,
) -> Result<EdgeSet> {
    FusionWeights::new(weights.theta1, weights.theta2)?;
    check_tau(tau)?;
    for (name, f) in [("lab", lab), ("lbp", lbp)] {
        if (f.width(), f.height()) != (edges.width, edges.height) {
            return Err(Error::Dimension(format!(
                "{name} features are {}x{}, edge set is {}x{}",
                f.width(),
                f.height(),
                edges.width,
                edges.height
            )));
        }
    }
    bbox.validate(edges.width, edges.height)?;
    let EdgeSet {
        width,
        height,
        k,
        dilation,
        edges,
        ..
    } = edges;
    let edges = exec::map_vec(edges, |e| {
        let ia = e.a.1 as usize * width + e.a.0 as usize;
        let ib = e.b.1 as usize * width + e.b.0 as usize;
        let s_lab = similarity_unchecked(lab.at(ia), lab.at(ib));
        let s_lbp = similarity_unchecked(lbp.at(ia), lbp.at(ib));
        let s_fused = weights.theta1 * s_lab + weights.theta2 * s_lbp;
        Edge {
            s_lab,
            s_lbp,
            s_fused,
            confident: s_fused >= tau,
            in_box: bbox.contains(e.a.0 as usize, e.a.1 as usize)
                || bbox.contains(e.b.0 as usize, e.b.1 as usize),
            ..e
        }
    });
    Ok(EdgeSet {
        width,
        height,
        k,
        dilation,
        tau,
        annotated: true,
        edges,
    })
}

/// Which per-edge similarity a heatmap shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapMode {
    Lab,
    Lbp,
    Fused,
}

impl HeatmapMode {
    pub const ALL: [HeatmapMode; 3] = [HeatmapMode::Lab, HeatmapMode::Lbp, HeatmapMode::Fused];

    pub fn as_str(self) -> &'static str {
        match self {
            HeatmapMode::Lab => "lab",
            HeatmapMode::Lbp => "lbp",
            HeatmapMode::Fused => "fused",
        }
    }

    fn pick(self, e: &Edge) -> f64 {
        match self {
            HeatmapMode::Lab => e.s_lab,
            HeatmapMode::Lbp => e.s_lbp,
            HeatmapMode::Fused => e.s_fused,
        }
    }
}

/// Per-pixel mean similarity over incident edges. Pixels without any
/// incident edge read 1.
pub fn similarity_heatmap(edges: &EdgeSet, mode: HeatmapMode) -> Result<ImageGrid> {
    if edges.is_empty() {
        return Err(Error::InvalidArgument("empty edge set".into()));
    }
    let n = edges.width * edges.height;
    let adjacency = Adjacency::build(n, edges.edges.iter().map(|e| edges.endpoints(e)));
    let values = exec::map_range(n, |p| {
        let incident = adjacency.neighbors(p);
        if incident.is_empty() {
            return 1.0;
        }
        let sum: f64 = incident
            .iter()
            .map(|&(_, e)| mode.pick(&edges.edges[e as usize]))
            .sum();
        (sum / incident.len() as f64).clamp(0.0, 1.0)
    });
    ImageGrid::new(edges.width, edges.height, 1, values)
}

/// Writes the edge list as CSV.
pub fn write_edges_csv<W: Write>(edges: &EdgeSet, mut out: W) -> std::io::Result<()> {
    writeln!(out, "a_x,a_y,b_x,b_y,s_lab,s_lbp,s_fused,confident,in_box")?;
    for e in &edges.edges {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            e.a.0,
            e.a.1,
            e.b.0,
            e.b.1,
            e.s_lab,
            e.s_lbp,
            e.s_fused,
            u8::from(e.confident),
            u8::from(e.in_box)
        )?;
    }
    Ok(())
}

/// Compressed per-pixel incidence lists. Each entry is
/// `(other endpoint, edge index)`, in edge order.
#[derive(Clone, Debug)]
pub(crate) struct Adjacency {
    offsets: Vec<usize>,
    entries: Vec<(u32, u32)>,
}

impl Adjacency {
    pub(crate) fn build(n: usize, pairs: impl Iterator<Item = (usize, usize)> + Clone) -> Self {
        let mut degree = vec![0usize; n + 1];
        for (a, b) in pairs.clone() {
            degree[a + 1] += 1;
            degree[b + 1] += 1;
        }
        for i in 0..n {
            degree[i + 1] += degree[i];
        }
        let offsets = degree;
        let mut fill = offsets.clone();
        let mut entries = vec![(0u32, 0u32); offsets[n]];
        for (e, (a, b)) in pairs.enumerate() {
            entries[fill[a]] = (b as u32, e as u32);
            fill[a] += 1;
            entries[fill[b]] = (a as u32, e as u32);
            fill[b] += 1;
        }
        Self { offsets, entries }
    }

    pub(crate) fn neighbors(&self, p: usize) -> &[(u32, u32)] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }
}
