//! Multiplication and parameter counts of standard and depthwise-separable
//! convolutions, and the two reduction presets.
//!
//! For kernel `K`, channels `C_in → C_out` and an output of `W × H`:
//!
//! ```text
//! standard             mults = K²·C_in·W·H·C_out        params = K²·C_in·C_out
//! depthwise-separable  mults = K²·C_in·W·H + C_in·W·H·C_out   params = K²·C_in + C_in·C_out
//! ```
//!
//! Bias terms are not counted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Standard,
    DepthwiseSeparable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub k: u64,
    pub c_in: u64,
    pub c_out: u64,
    pub w_out: u64,
    pub h_out: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl ConvSpec {
    pub fn new(kind: ConvKind, k: u64, c_in: u64, c_out: u64, w_out: u64, h_out: u64) -> Self {
        Self {
            kind,
            k,
            c_in,
            c_out,
            w_out,
            h_out,
            name: None,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("k", self.k),
            ("c_in", self.c_in),
            ("c_out", self.c_out),
            ("w_out", self.w_out),
            ("h_out", self.h_out),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!(
                    "conv field {field} must be positive"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub spec: ConvSpec,
    pub mults: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub mults: u64,
    pub params: u64,
    pub layers: Vec<LayerCost>,
}

fn mul(factors: &[u64]) -> Result<u64> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or_else(|| Error::InvalidArgument("cost overflows u64".into()))
}

fn add(a: u64, b: u64) -> Result<u64> {
    a.checked_add(b)
        .ok_or_else(|| Error::InvalidArgument("cost overflows u64".into()))
}

pub fn conv_cost(spec: &ConvSpec) -> Result<CostReport> {
    spec.validate()?;
    let ConvSpec {
        k,
        c_in,
        c_out,
        w_out,
        h_out,
        ..
    } = *spec;
    let (mults, params) = match spec.kind {
        ConvKind::Standard => (
            mul(&[k, k, c_in, w_out, h_out, c_out])?,
            mul(&[k, k, c_in, c_out])?,
        ),
        ConvKind::DepthwiseSeparable => (
            add(
                mul(&[k, k, c_in, w_out, h_out])?,
                mul(&[c_in, w_out, h_out, c_out])?,
            )?,
            add(mul(&[k, k, c_in])?, mul(&[c_in, c_out])?)?,
        ),
    };
    Ok(CostReport {
        mults,
        params,
        layers: vec![LayerCost {
            spec: spec.clone(),
            mults,
            params,
        }],
    })
}

pub fn total_cost(specs: &[ConvSpec]) -> Result<CostReport> {
    let mut total = CostReport {
        mults: 0,
        params: 0,
        layers: Vec::with_capacity(specs.len()),
    };
    for spec in specs {
        let r = conv_cost(spec)?;
        total.mults = add(total.mults, r.mults)?;
        total.params = add(total.params, r.params)?;
        total.layers.extend(r.layers);
    }
    Ok(total)
}

/// `mults(after) / mults(before)`.
pub fn ratio(before: &[ConvSpec], after: &[ConvSpec]) -> Result<f64> {
    if before.is_empty() || after.is_empty() {
        return Err(Error::InvalidArgument(
            "ratio needs two non-empty layer lists".into(),
        ));
    }
    let b = total_cost(before)?.mults;
    let a = total_cost(after)?.mults;
    if b == 0 {
        return Err(Error::InvalidArgument("zero cost in denominator".into()));
    }
    Ok(a as f64 / b as f64)
}

/// A before/after layer inventory with the ratio the paper reports for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub target: f64,
    pub target_label: String,
    pub assumptions: Vec<String>,
    pub before: Vec<ConvSpec>,
    pub after: Vec<ConvSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetReport {
    pub name: String,
    pub before: CostReport,
    pub after: CostReport,
    pub ratio: f64,
    pub target: f64,
    pub target_label: String,
    /// `max(ratio/target, target/ratio)`.
    pub deviation: f64,
    pub within_factor_2: bool,
    pub assumptions: Vec<String>,
}

/// Feature-pyramid lateral stage: one standard 3×3 256→256 conv replaced by
/// two enhancement units at 96 channels, each a 1×1 standard conv followed
/// by a 3×3 depthwise-separable conv.
pub fn fpn_preset() -> Preset {
    let std = |name: &str, k, c| ConvSpec::new(ConvKind::Standard, k, c, c, 1, 1).named(name);
    let dw =
        |name: &str, k, c| ConvSpec::new(ConvKind::DepthwiseSeparable, k, c, c, 1, 1).named(name);
    Preset {
        name: "fpn".into(),
        target: 1.0 / 15.0,
        target_label: "1/15 of the original".into(),
        assumptions: vec![
            "before: one standard 3x3 conv, 256 -> 256 channels".into(),
            "after: two enhancement units at 96 channels".into(),
            "unit: 1x1 standard conv 96 -> 96, then 3x3 depthwise-separable conv 96 -> 96".into(),
            "spatial size is identical on both sides and cancels; counted per output pixel".into(),
            "channel-reduction convs outside the replaced block are not counted".into(),
        ],
        before: vec![std("fpn_conv", 3, 256)],
        after: vec![
            std("unit1_pw", 1, 96),
            dw("unit1_dw", 3, 96),
            std("unit2_pw", 1, 96),
            dw("unit2_dw", 3, 96),
        ],
    }
}

/// Detection head: two branches of four standard 3×3 256-channel convs
/// replaced by two 5×5 depthwise-separable 96-channel convs shared by both
/// branches.
pub fn head_preset() -> Preset {
    let before = ["cls", "reg"]
        .iter()
        .flat_map(|b| {
            (1..=4).map(move |i| {
                ConvSpec::new(ConvKind::Standard, 3, 256, 256, 1, 1).named(format!("{b}_conv{i}"))
            })
        })
        .collect();
    let after = (1..=2)
        .map(|i| {
            ConvSpec::new(ConvKind::DepthwiseSeparable, 5, 96, 96, 1, 1)
                .named(format!("shared_dw{i}"))
        })
        .collect();
    Preset {
        name: "head".into(),
        target: 0.005,
        target_label: "0.5% of the original".into(),
        assumptions: vec![
            "before: classification and regression branches, four standard 3x3 convs each, 256 -> 256".into(),
            "after: two 5x5 depthwise-separable convs, 96 -> 96, shared by both branches".into(),
            "shared convs are counted once".into(),
            "spatial size is identical on both sides and cancels; counted per output pixel".into(),
            "final prediction layers are unchanged and not counted".into(),
        ],
        before,
        after,
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    match name {
        "fpn" => Ok(fpn_preset()),
        "head" => Ok(head_preset()),
        other => Err(Error::InvalidArgument(format!(
            "unknown preset {other:?}, expected fpn or head"
        ))),
    }
}

pub fn evaluate_preset(preset: &Preset) -> Result<PresetReport> {
    let r = ratio(&preset.before, &preset.after)?;
    let deviation = (r / preset.target).max(preset.target / r);
    Ok(PresetReport {
        name: preset.name.clone(),
        before: total_cost(&preset.before)?,
        after: total_cost(&preset.after)?,
        ratio: r,
        target: preset.target,
        target_label: preset.target_label.clone(),
        deviation,
        within_factor_2: deviation <= 2.0,
        assumptions: preset.assumptions.clone(),
    })
}

/// Plain-text table of a cost report.
pub fn format_table(report: &CostReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<20} {:>3} {:>6} {:>6} {:>6} {:>16} {:>12}",
        "layer", "kind", "k", "c_in", "c_out", "w x h", "mults", "params"
    );
    for (i, l) in report.layers.iter().enumerate() {
        let s = &l.spec;
        let kind = match s.kind {
            ConvKind::Standard => "standard",
            ConvKind::DepthwiseSeparable => "depthwise_separable",
        };
        let _ = writeln!(
            out,
            "{:<16} {:<20} {:>3} {:>6} {:>6} {:>6} {:>16} {:>12}",
            s.name.clone().unwrap_or_else(|| format!("#{i}")),
            kind,
            s.k,
            s.c_in,
            s.c_out,
            format!("{}x{}", s.w_out, s.h_out),
            l.mults,
            l.params
        );
    }
    let _ = writeln!(
        out,
        "{:<16} {:>62} {:>12}",
        "total", report.mults, report.params
    );
    out
}

pub fn format_preset(report: &PresetReport) -> String {
    let mut out = format!("preset {}\n", report.name);
    for a in &report.assumptions {
        let _ = writeln!(out, "  assumption: {a}");
    }
    out.push_str("before\n");
    out.push_str(&format_table(&report.before));
    out.push_str("after\n");
    out.push_str(&format_table(&report.after));
    let _ = writeln!(
        out,
        "ratio {:.6} (target {:.6}, {}); off by x{:.3}; within factor 2: {}",
        report.ratio, report.target, report.target_label, report.deviation, report.within_factor_2
    );
    out
}
