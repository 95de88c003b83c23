//! Synthetic scenes with known masks and tight boxes, and mask metrics.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{lab_pixel_to_srgb, srgb_pixel_to_lab};
use crate::imagecore::{
    save_boxes, save_image, BinaryMask, BoxAnnotation, GroundTruthMask, ImageGrid,
};
use crate::{Error, Result};

/// Placement attempts per shape before giving up.
pub const MAX_PLACEMENT_TRIES: usize = 1000;

pub type Rgb = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Fill {
    Flat {
        color: Rgb,
    },
    /// Bands of `period / 2` pixels alternating between the two colours.
    Stripes {
        period: usize,
        orientation: Orientation,
        colors: [Rgb; 2],
    },
    /// Square cells of `cell` pixels.
    Checker {
        cell: usize,
        colors: [Rgb; 2],
    },
}

impl Fill {
    fn validate(&self) -> Result<()> {
        let colors: &[Rgb] = match self {
            Fill::Flat { color } => std::slice::from_ref(color),
            Fill::Stripes { period, colors, .. } => {
                if *period < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "stripe period {period} is below 2"
                    )));
                }
                colors
            }
            Fill::Checker { cell, colors } => {
                if *cell == 0 {
                    return Err(Error::InvalidArgument(
                        "checker cell must be positive".into(),
                    ));
                }
                colors
            }
        };
        if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "fill colours must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Colour at an image coordinate; textures are anchored to the image grid.
    pub fn color_at(&self, x: usize, y: usize) -> Rgb {
        match self {
            Fill::Flat { color } => *color,
            Fill::Stripes {
                period,
                orientation,
                colors,
            } => {
                let t = match orientation {
                    Orientation::Horizontal => y,
                    Orientation::Vertical => x,
                };
                colors[usize::from(t % period >= period / 2)]
            }
            Fill::Checker { cell, colors } => colors[(x / cell + y / cell) % 2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Geometry {
    Disk { radius: f64 },
    Rectangle { width: usize, height: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub geometry: Geometry,
    pub fill: Fill,
    /// Fixed centre in pixel coordinates; sampled from the seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub shapes: Vec<ShapeSpec>,
    pub background: Fill,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub mask: GroundTruthMask,
    pub bbox: BoxAnnotation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: ImageGrid,
    pub instances: Vec<Instance>,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BoxAnnotation> {
        self.instances.iter().map(|i| i.bbox).collect()
    }
}

fn rasterize(geometry: Geometry, center: [f64; 2], width: usize, height: usize) -> BinaryMask {
    let [cx, cy] = center;
    match geometry {
        Geometry::Disk { radius } => BinaryMask::from_fn(width, height, |x, y| {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            dx * dx + dy * dy <= radius * radius
        }),
        Geometry::Rectangle {
            width: rw,
            height: rh,
        } => {
            let x0 = (cx - rw as f64 / 2.0).round();
            let y0 = (cy - rh as f64 / 2.0).round();
            BinaryMask::from_fn(width, height, |x, y| {
                let (x, y) = (x as f64, y as f64);
                x >= x0 && x < x0 + rw as f64 && y >= y0 && y < y0 + rh as f64
            })
        }
    }
}

/// Whether the shape at `center` lies fully inside a `width × height` image.
fn fits(geometry: Geometry, center: [f64; 2], width: usize, height: usize) -> bool {
    let (hw, hh) = match geometry {
        Geometry::Disk { radius } => (radius, radius),
        Geometry::Rectangle { width, height } => (width as f64 / 2.0, height as f64 / 2.0),
    };
    let [cx, cy] = center;
    cx - hw >= 0.0 && cy - hh >= 0.0 && cx + hw <= width as f64 && cy + hh <= height as f64
}

fn sample_center(
    geometry: Geometry,
    width: usize,
    height: usize,
    rng: &mut ChaCha8Rng,
) -> Option<[f64; 2]> {
    match geometry {
        Geometry::Disk { radius } => {
            let (w, h) = (width as f64, height as f64);
            if 2.0 * radius > w || 2.0 * radius > h {
                return None;
            }
            Some([
                rng.gen_range(radius..=w - radius),
                rng.gen_range(radius..=h - radius),
            ])
        }
        Geometry::Rectangle {
            width: rw,
            height: rh,
        } => {
            if rw > width || rh > height {
                return None;
            }
            let x0 = rng.gen_range(0..=width - rw);
            let y0 = rng.gen_range(0..=height - rh);
            Some([x0 as f64 + rw as f64 / 2.0, y0 as f64 + rh as f64 / 2.0])
        }
    }
}

/// True when any pixel of `mask` is within one pixel (8-neighbourhood) of `taken`.
fn touches(mask: &BinaryMask, taken: &BinaryMask) -> bool {
    let (w, h) = (mask.width(), mask.height());
    (0..h).any(|y| {
        (0..w).any(|x| {
            mask.get(x, y)
                && (y.saturating_sub(1)..(y + 2).min(h))
                    .any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| taken.get(xx, yy)))
        })
    })
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("scene must be non-empty".into()));
    }
    spec.background.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken = BinaryMask::empty(w, h);
    let mut instances = Vec::with_capacity(spec.shapes.len());
    for (n, shape) in spec.shapes.iter().enumerate() {
        shape.fill.validate()?;
        match shape.geometry {
            Geometry::Disk { radius } if !(radius.is_finite() && radius > 0.0) => {
                return Err(Error::InvalidArgument(format!(
                    "shape {n}: disk radius must be positive"
                )));
            }
            Geometry::Rectangle { width, height } if width == 0 || height == 0 => {
                return Err(Error::InvalidArgument(format!(
                    "shape {n}: rectangle must be non-empty"
                )));
            }
            _ => {}
        }
        let tries = if shape.center.is_some() {
            1
        } else {
            MAX_PLACEMENT_TRIES
        };
        let mut placed = None;
        for _ in 0..tries {
            let center = match shape.center {
                Some(c) if fits(shape.geometry, c, w, h) => c,
                Some(_) => break,
                None => match sample_center(shape.geometry, w, h, &mut rng) {
                    Some(c) => c,
                    None => break,
                },
            };
            let mask = rasterize(shape.geometry, center, w, h);
            if mask.count() > 0 && !touches(&mask, &taken) {
                placed = Some(mask);
                break;
            }
        }
        let mask = placed.ok_or_else(|| {
            Error::Placement(format!(
                "shape {n} could not be placed inside the image without overlap"
            ))
        })?;
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) {
                    taken.set(x, y, true);
                }
            }
        }
        let bbox = mask.tight_box().expect("placed masks are non-empty");
        instances.push(Instance { mask, bbox });
    }

    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let fill = spec
                .shapes
                .iter()
                .zip(&instances)
                .find(|(_, inst)| inst.mask.get(x, y))
                .map_or(&spec.background, |(s, _)| &s.fill);
            data.extend_from_slice(&fill.color_at(x, y));
        }
    }
    Ok(Scene {
        image: ImageGrid::new(w, h, 3, data)?,
        instances,
    })
}

/// Writes `image.png`, `mask_{i}.png` and `boxes.json` into `dir`.
pub fn write_scene(scene: &Scene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_image(&scene.image, dir.join("image.png"))?;
    for (i, inst) in scene.instances.iter().enumerate() {
        save_image(&inst.mask.to_image(), dir.join(format!("mask_{i}.png")))?;
    }
    save_boxes(&scene.boxes(), dir.join("boxes.json"))
}

const HIGH_CONTRAST_PAIRS: [(Rgb, Rgb); 5] = [
    ([0.85, 0.15, 0.10], [0.10, 0.20, 0.55]),
    ([0.95, 0.85, 0.20], [0.15, 0.15, 0.15]),
    ([0.90, 0.90, 0.90], [0.20, 0.45, 0.15]),
    ([0.20, 0.70, 0.90], [0.45, 0.20, 0.05]),
    ([0.70, 0.30, 0.80], [0.85, 0.80, 0.60]),
];

/// 64×64 scene with one flat-colour disk or rectangle on a contrasting
/// flat background.
pub fn high_contrast(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6869_6768);
    let (fg, bg) = HIGH_CONTRAST_PAIRS[rng.gen_range(0..HIGH_CONTRAST_PAIRS.len())];
    let geometry = if rng.gen_bool(0.5) {
        Geometry::Disk {
            radius: rng.gen_range(10.0..20.0),
        }
    } else {
        Geometry::Rectangle {
            width: rng.gen_range(14..36),
            height: rng.gen_range(14..36),
        }
    };
    SceneSpec {
        width: 64,
        height: 64,
        shapes: vec![ShapeSpec {
            geometry,
            fill: Fill::Flat { color: fg },
            center: None,
        }],
        background: Fill::Flat { color: bg },
        seed,
    }
}

/// Lightness offset between the background and each texture colour of a
/// texture-challenge object.
pub const CHALLENGE_DELTA_L: f64 = 3.1;

/// 64×64 scene with a checker-textured disk or rectangle on a flat
/// background. The two checker colours sit `±CHALLENGE_DELTA_L` away from
/// the background in L*, so the object's mean colour matches the background.
pub fn texture_challenge(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7874);
    let base = [
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.3..0.7),
    ];
    let lab = srgb_pixel_to_lab(base);
    let shift = |d: f64| lab_pixel_to_srgb([lab[0] + d, lab[1], lab[2]]);
    let colors = [shift(CHALLENGE_DELTA_L), shift(-CHALLENGE_DELTA_L)];
    let geometry = if rng.gen_bool(0.5) {
        Geometry::Disk {
            radius: rng.gen_range(12.0..20.0),
        }
    } else {
        Geometry::Rectangle {
            width: rng.gen_range(18..36),
            height: rng.gen_range(18..36),
        }
    };
    SceneSpec {
        width: 64,
        height: 64,
        shapes: vec![ShapeSpec {
            geometry,
            fill: Fill::Checker { cell: 1, colors },
            center: None,
        }],
        background: Fill::Flat { color: base },
        seed,
    }
}

fn counts(pred: &BinaryMask, gt: &GroundTruthMask) -> Result<(usize, usize, usize)> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::Dimension(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let inter = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(a, b)| **a && **b)
        .count();
    Ok((inter, pred.count(), gt.count()))
}

/// `|pred ∩ gt| / |pred ∪ gt|`, 1 when both are empty.
pub fn iou(pred: &BinaryMask, gt: &GroundTruthMask) -> Result<f64> {
    let (i, p, g) = counts(pred, gt)?;
    let union = p + g - i;
    Ok(if union == 0 {
        1.0
    } else {
        i as f64 / union as f64
    })
}

/// `2|pred ∩ gt| / (|pred| + |gt|)`, 1 when both are empty.
pub fn dice_coefficient(pred: &BinaryMask, gt: &GroundTruthMask) -> Result<f64> {
    let (i, p, g) = counts(pred, gt)?;
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    pub dice: f64,
}

pub fn evaluate(pred: &BinaryMask, gt: &GroundTruthMask) -> Result<EvalReport> {
    Ok(EvalReport {
        iou: iou(pred, gt)?,
        dice: dice_coefficient(pred, gt)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{compute_lbp, srgb_to_lab};
    use crate::imagecore::grayscale;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn disk_spec(r: f64, fill: Fill) -> SceneSpec {
        SceneSpec {
            width: 48,
            height: 48,
            shapes: vec![ShapeSpec {
                geometry: Geometry::Disk { radius: r },
                fill,
                center: Some([24.0, 24.0]),
            }],
            background: Fill::Flat {
                color: [0.5, 0.5, 0.5],
            },
            seed: 1,
        }
    }

    #[test]
    fn centered_disk_area() {
        for r in [3.0, 7.5, 12.0, 20.0] {
            let s = generate_scene(&disk_spec(
                r,
                Fill::Flat {
                    color: [1.0, 0.0, 0.0],
                },
            ))
            .unwrap();
            let n = s.instances[0].mask.count() as f64;
            assert!(
                n >= PI * (r - 1.0) * (r - 1.0) && n <= PI * (r + 1.0) * (r + 1.0),
                "r={r} n={n}"
            );
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for seed in 0..5 {
            assert_eq!(
                generate_scene(&high_contrast(seed)).unwrap(),
                generate_scene(&high_contrast(seed)).unwrap()
            );
            assert_eq!(
                generate_scene(&texture_challenge(seed)).unwrap(),
                generate_scene(&texture_challenge(seed)).unwrap()
            );
        }
    }

    #[test]
    fn striped_disk_matches_background_mean() {
        let bg = [0.5, 0.45, 0.4];
        let lab = srgb_pixel_to_lab(bg);
        let colors = [
            lab_pixel_to_srgb([lab[0] + 8.0, lab[1], lab[2]]),
            lab_pixel_to_srgb([lab[0] - 8.0, lab[1], lab[2]]),
        ];
        let mut spec = disk_spec(
            14.0,
            Fill::Stripes {
                period: 4,
                orientation: Orientation::Vertical,
                colors,
            },
        );
        spec.background = Fill::Flat { color: bg };
        let scene = generate_scene(&spec).unwrap();
        let mask = &scene.instances[0].mask;
        let lab_img = srgb_to_lab(&scene.image).unwrap();
        let codes = compute_lbp(&grayscale(&scene.image).unwrap()).unwrap();
        let mut mean = [[0.0; 3]; 2];
        let mut n = [0.0; 2];
        let mut hist = [[0usize; 10]; 2];
        for y in 0..48 {
            for x in 0..48 {
                let k = usize::from(mask.get(x, y));
                for c in 0..3 {
                    mean[k][c] += lab_img.get(x, y)[c];
                }
                n[k] += 1.0;
                hist[k][codes.code(x, y) as usize] += 1;
            }
        }
        for c in 0..3 {
            assert!((mean[0][c] / n[0] - mean[1][c] / n[1]).abs() < 2.0);
        }
        assert_ne!(hist[0], hist[1]);
    }

    #[test]
    fn overlapping_fixed_shapes_rejected() {
        let mut spec = disk_spec(
            10.0,
            Fill::Flat {
                color: [1.0, 1.0, 1.0],
            },
        );
        spec.shapes.push(spec.shapes[0].clone());
        assert!(matches!(generate_scene(&spec), Err(Error::Placement(_))));
        let mut spec = disk_spec(
            30.0,
            Fill::Flat {
                color: [1.0, 1.0, 1.0],
            },
        );
        spec.shapes[0].center = None;
        assert!(matches!(generate_scene(&spec), Err(Error::Placement(_))));
    }

    #[test]
    fn several_shapes_do_not_touch() {
        let shape = |g| ShapeSpec {
            geometry: g,
            fill: Fill::Checker {
                cell: 2,
                colors: [[0.0; 3], [1.0; 3]],
            },
            center: None,
        };
        let spec = SceneSpec {
            width: 64,
            height: 64,
            shapes: vec![
                shape(Geometry::Disk { radius: 8.0 }),
                shape(Geometry::Rectangle {
                    width: 12,
                    height: 9,
                }),
                shape(Geometry::Disk { radius: 5.5 }),
            ],
            background: Fill::Flat {
                color: [0.3, 0.6, 0.2],
            },
            seed: 42,
        };
        let scene = generate_scene(&spec).unwrap();
        for (i, a) in scene.instances.iter().enumerate() {
            for b in &scene.instances[i + 1..] {
                assert!(!touches(&a.mask, &b.mask));
            }
        }
    }

    #[test]
    fn metric_examples() {
        let full = BinaryMask::from_fn(8, 8, |_, _| true);
        let top = BinaryMask::from_fn(8, 8, |_, y| y < 4);
        let bottom = BinaryMask::from_fn(8, 8, |_, y| y >= 4);
        let empty = BinaryMask::empty(8, 8);
        assert_eq!(iou(&top, &top).unwrap(), 1.0);
        assert_eq!(iou(&top, &bottom).unwrap(), 0.0);
        assert_eq!(iou(&top, &full).unwrap(), 0.5);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice_coefficient(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice_coefficient(&top, &bottom).unwrap(), 0.0);
        let a = BinaryMask::from_fn(20, 10, |x, _| x < 10);
        let b = BinaryMask::from_fn(20, 10, |x, _| (5..15).contains(&x));
        assert_eq!(dice_coefficient(&a, &b).unwrap(), 0.5);
        assert!(iou(&top, &BinaryMask::empty(8, 7)).is_err());
    }

    #[test]
    fn scene_spec_json() {
        let spec = texture_challenge(3);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<SceneSpec>(&json).unwrap(), spec);
        let text = r#"{"width":32,"height":32,"seed":5,
            "background":{"kind":"flat","color":[0.1,0.1,0.1]},
            "shapes":[{"geometry":{"kind":"disk","radius":6},
                       "fill":{"kind":"stripes","period":4,"orientation":"horizontal","colors":[[1,0,0],[0,0,1]]}}]}"#;
        let spec: SceneSpec = serde_json::from_str(text).unwrap();
        assert_eq!(generate_scene(&spec).unwrap().instances.len(), 1);
    }

    proptest! {
        #[test]
        fn dice_iou_identity(seed in any::<u64>(), p in 0.05..0.95f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || BinaryMask::new(12, 9, (0..108).map(|_| rng.gen_bool(p)).collect()).unwrap();
            let (a, b) = (draw(), draw());
            let (i, d) = (iou(&a, &b).unwrap(), dice_coefficient(&a, &b).unwrap());
            prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
            prop_assert!(d >= i);
        }

        #[test]
        fn boxes_are_tight(seed in any::<u64>(), texture in any::<bool>()) {
            let spec = if texture { texture_challenge(seed) } else { high_contrast(seed) };
            let scene = generate_scene(&spec).unwrap();
            for inst in &scene.instances {
                let b = inst.bbox;
                let m = &inst.mask;
                for y in 0..m.height() {
                    for x in 0..m.width() {
                        prop_assert!(!m.get(x, y) || b.contains(x, y));
                    }
                }
                prop_assert!((b.x_min..b.x_max).any(|x| m.get(x, b.y_min)));
                prop_assert!((b.x_min..b.x_max).any(|x| m.get(x, b.y_max - 1)));
                prop_assert!((b.y_min..b.y_max).any(|y| m.get(b.x_min, y)));
                prop_assert!((b.y_min..b.y_max).any(|y| m.get(b.x_max - 1, y)));
            }
        }
    }
}
