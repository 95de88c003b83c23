use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use boxmask::affinity::{
    annotate_edges, build_edges, similarity_heatmap, write_edges_csv, FeatureMode, FusionWeights,
    HeatmapMode,
};
use boxmask::costmodel::{self, ConvSpec};
use boxmask::exec;
use boxmask::features::{extract_features, inspection_maps};
use boxmask::gradcheck::{self, GradcheckConfig};
use boxmask::imagecore::{load_boxes, load_image, save_image, BinaryMask, BoxAnnotation};
use boxmask::optimizer::OptimizerConfig;
use boxmask::pipeline::segment_to_dir;
use boxmask::synth::{self, SceneSpec};

/// Box-supervised instance mask recovery.
#[derive(Parser)]
#[command(name = "boxmask", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Recover one mask per box and write masks, probabilities, loss traces and a summary.
    Segment {
        image: PathBuf,
        boxes: PathBuf,
        out_dir: PathBuf,
        #[command(flatten)]
        solve: SolveArgs,
    },
    /// Write per-pixel similarity heatmaps as PGM.
    Heatmap {
        image: PathBuf,
        out_dir: PathBuf,
        /// lab, lbp, fused or all
        #[arg(long, default_value = "all")]
        mode: String,
        /// Also write every edge with its similarities to edges.csv.
        #[arg(long)]
        dump_edges: bool,
        /// Also write lab_l, lab_a, lab_b and lbp_codes as PGM.
        #[arg(long)]
        dump_features: bool,
        #[command(flatten)]
        graph: GraphArgs,
    },
    /// Compare the analytic loss gradient with central differences on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Multiplication and parameter counts for a JSON list of conv specs, or a named preset.
    Cost {
        #[arg(required_unless_present = "preset", conflicts_with = "preset")]
        spec: Option<PathBuf>,
        /// fpn or head
        #[arg(long)]
        preset: Option<String>,
    },
    /// Render a scene spec to image.png, mask_{i}.png and boxes.json.
    Synth { scene: PathBuf, out_dir: PathBuf },
    /// Mean IoU and Dice of predicted masks against ground truth masks with the same file names.
    Eval { pred_dir: PathBuf, gt_dir: PathBuf },
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long, default_value_t = 0.9)]
    theta1: f64,
    #[arg(long, default_value_t = 0.1)]
    theta2: f64,
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    dilation: usize,
}

#[derive(Args)]
struct SolveArgs {
    /// lab, lbp or fused
    #[arg(long, default_value = "fused")]
    feature: FeatureMode,
    #[command(flatten)]
    graph: GraphArgs,
    /// Maximum descent steps.
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

impl SolveArgs {
    fn config(&self) -> OptimizerConfig {
        OptimizerConfig {
            step_size: self.lr,
            max_iters: self.steps,
            theta1: self.graph.theta1,
            theta2: self.graph.theta2,
            tau: self.graph.tau,
            k: self.graph.k,
            dilation: self.graph.dilation,
            feature: self.feature,
            seed: self.seed,
            ..Default::default()
        }
    }
}

/// Failure of a check, as opposed to bad input or I/O.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn threads_from_env() -> Result<usize> {
    match std::env::var("BOXMASK_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .with_context(|| format!("BOXMASK_THREADS must be a non-negative integer, got {v:?}")),
        _ => Ok(0),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{}: no such file", path.display());
    }
    Ok(())
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        bail!("{}: no such directory", path.display());
    }
    Ok(())
}

/// Writes a line to stdout. A closed pipe on the reading side is not an error.
fn emit(line: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{line}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e).context("writing to stdout"),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    emit(&serde_json::to_string_pretty(value)?)
}

fn cmd_segment(image: &Path, boxes: &Path, out_dir: &Path, solve: &SolveArgs) -> Result<()> {
    require_file(image)?;
    require_file(boxes)?;
    let img = load_image(image)?;
    let boxes = load_boxes(boxes)?;
    let threads = threads_from_env()?;
    let summary = exec::with_threads(threads, || {
        segment_to_dir(&img, &boxes, &solve.config(), solve.threshold, out_dir)
    })?;
    for inst in &summary.instances {
        eprintln!(
            "box {}: {} steps, l_mask {:.6} -> {:.6}, {} foreground pixels",
            inst.index,
            inst.iterations,
            inst.initial.l_mask,
            inst.last.l_mask,
            inst.foreground_pixels
        );
    }
    Ok(())
}

fn cmd_heatmap(
    image: &Path,
    out_dir: &Path,
    mode: &str,
    dump_edges: bool,
    dump_features: bool,
    graph: &GraphArgs,
) -> Result<()> {
    require_file(image)?;
    let modes: Vec<HeatmapMode> = match mode {
        "all" => HeatmapMode::ALL.to_vec(),
        "lab" => vec![HeatmapMode::Lab],
        "lbp" => vec![HeatmapMode::Lbp],
        "fused" => vec![HeatmapMode::Fused],
        other => bail!("unknown heatmap mode {other:?}, expected lab, lbp, fused or all"),
    };
    let weights = FusionWeights::new(graph.theta1, graph.theta2)?;
    let img = load_image(image)?;
    let features = extract_features(&img, &Default::default())?;
    let (w, h) = (img.width(), img.height());
    let edges = annotate_edges(
        build_edges(w, h, graph.k, graph.dilation)?,
        &features.lab,
        &features.lbp,
        weights,
        graph.tau,
        &BoxAnnotation::full(w, h),
    )?;
    let maps = modes
        .iter()
        .map(|&m| Ok((m, similarity_heatmap(&edges, m)?)))
        .collect::<Result<Vec<_>>>()?;
    let inspection = if dump_features {
        inspection_maps(&img)?
    } else {
        Vec::new()
    };
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for (m, map) in maps {
        save_image(&map, out_dir.join(format!("heatmap_{}.pgm", m.as_str())))?;
    }
    for (name, map) in inspection {
        save_image(&map, out_dir.join(format!("{name}.pgm")))?;
    }
    if dump_edges {
        let path = out_dir.join("edges.csv");
        let file =
            fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_edges_csv(&edges, BufWriter::new(file))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, size: usize, trials: usize, corrupt: bool) -> Result<()> {
    let config = GradcheckConfig {
        seed,
        size,
        trials,
        corrupt,
        ..Default::default()
    };
    let results = gradcheck::run(&config)?;
    let mut failed = 0;
    for t in &results {
        let ok = t.passed(config.tolerance);
        failed += usize::from(!ok);
        emit(&format!(
            "trial {:>3}: max relative error {:.3e} over {} entries {}",
            t.trial,
            t.max_rel_error,
            t.checked,
            if ok { "ok" } else { "FAIL" }
        ))?;
    }
    if failed > 0 {
        return Err(VerificationFailed(format!(
            "{failed} of {} trials exceed relative error {:e}",
            results.len(),
            config.tolerance
        ))
        .into());
    }
    Ok(())
}

fn cmd_cost(spec: Option<&Path>, preset: Option<&str>) -> Result<()> {
    if let Some(name) = preset {
        let report = costmodel::evaluate_preset(&costmodel::preset(name)?)?;
        eprint!("{}", costmodel::format_preset(&report));
        print_json(&report)?;
        if !report.within_factor_2 {
            return Err(VerificationFailed(format!(
                "preset {name}: ratio {:.6} is more than a factor 2 from {:.6}",
                report.ratio, report.target
            ))
            .into());
        }
        return Ok(());
    }
    let path = spec.expect("clap requires a spec or a preset");
    require_file(path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let specs: Vec<ConvSpec> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if specs.is_empty() {
        bail!("{}: empty layer list", path.display());
    }
    let report = costmodel::total_cost(&specs)?;
    eprint!("{}", costmodel::format_table(&report));
    print_json(&report)
}

fn cmd_synth(scene: &Path, out_dir: &Path) -> Result<()> {
    require_file(scene)?;
    let text = fs::read_to_string(scene).with_context(|| format!("reading {}", scene.display()))?;
    let spec: SceneSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", scene.display()))?;
    let generated = synth::generate_scene(&spec)?;
    synth::write_scene(&generated, out_dir)?;
    Ok(())
}

#[derive(Serialize)]
struct MaskScore {
    file: String,
    iou: f64,
    dice: f64,
}

#[derive(Serialize)]
struct EvalSummary {
    count: usize,
    mean_iou: f64,
    mean_dice: f64,
    masks: Vec<MaskScore>,
}

fn mask_files(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("mask_") && n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn cmd_eval(pred_dir: &Path, gt_dir: &Path) -> Result<()> {
    require_dir(pred_dir)?;
    require_dir(gt_dir)?;
    let names = mask_files(gt_dir)?;
    if names.is_empty() {
        bail!("{}: no mask_*.png files", gt_dir.display());
    }
    let mut masks = Vec::with_capacity(names.len());
    for name in names {
        let pred_path = pred_dir.join(&name);
        require_file(&pred_path)?;
        let pred = BinaryMask::from_image(&load_image(&pred_path)?);
        let gt = BinaryMask::from_image(&load_image(gt_dir.join(&name))?);
        let r = synth::evaluate(&pred, &gt)?;
        masks.push(MaskScore {
            file: name,
            iou: r.iou,
            dice: r.dice,
        });
    }
    let n = masks.len() as f64;
    print_json(&EvalSummary {
        count: masks.len(),
        mean_iou: masks.iter().map(|m| m.iou).sum::<f64>() / n,
        mean_dice: masks.iter().map(|m| m.dice).sum::<f64>() / n,
        masks,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Segment {
            image,
            boxes,
            out_dir,
            solve,
        } => cmd_segment(&image, &boxes, &out_dir, &solve),
        Command::Heatmap {
            image,
            out_dir,
            mode,
            dump_edges,
            dump_features,
            graph,
        } => cmd_heatmap(&image, &out_dir, &mode, dump_edges, dump_features, &graph),
        Command::Gradcheck {
            seed,
            size,
            trials,
            corrupt,
        } => cmd_gradcheck(seed, size, trials, corrupt),
        Command::Cost { spec, preset } => cmd_cost(spec.as_deref(), preset.as_deref()),
        Command::Synth { scene, out_dir } => cmd_synth(&scene, &out_dir),
        Command::Eval { pred_dir, gt_dir } => cmd_eval(&pred_dir, &gt_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<VerificationFailed>() => {
            eprintln!("verification failed: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
