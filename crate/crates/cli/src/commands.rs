//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::PathBuf;

use saywf::classifiers::weights::encode;
use saywf::classifiers::{
    load_weights, param_check, BuildOptions, Network, PEDESTRIAN_REFERENCE, PEDESTRIAN_TOTAL_RANGE, ZONE_REFERENCE,
};
use saywf::data::samples::{
    extract_pedestrian_samples, extract_zone_samples, CropPolicy, LabeledCrop, PedestrianSampling, ZoneSampling,
};
use saywf::data::{stats, DiskDataset, FrameSource, Subset, SynthConfig, SynthDataset};
use saywf::detect::{detect, DetectionRecord};
use saywf::eval::{evaluate, recall_by_height_terciles, spearman, stride_sweep, sweep_csv, sweep_svg, HIT_IOU};
use saywf::gradcheck::standard_suite;
use saywf::registry::ArchitectureRegistry;
use saywf::train::{activation_stats, compare_activations, fit, mine_hard_negatives, normal_probe, train, TrainConfig};
use saywf::{Error, Result};
use serde_json::json;

use crate::manifest::OutputDir;
use crate::settings::Settings;
use crate::Command;

pub enum Outcome {
    Success,
    CheckFailed(String),
}

pub fn run(cmd: &Command, s: &Settings) -> Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(s.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cmd, s))
}

fn dispatch(cmd: &Command, s: &Settings) -> Result<Outcome> {
    match cmd {
        Command::Synth { frames, width, height } => synth(s, *frames, *width, *height),
        Command::Stats { bin_width } => dataset_stats(s, *bin_width),
        Command::TrainZone {
            epochs,
            max_positive,
            max_negative,
        } => train_zone(s, *epochs, *max_positive, *max_negative),
        Command::TrainPed {
            epochs,
            negatives_per_frame,
        } => train_ped(s, *epochs, *negatives_per_frame),
        Command::Mine {
            per_frame,
            epochs,
            negatives_per_frame,
        } => mine(s, *per_frame, *epochs, *negatives_per_frame),
        Command::Detect => run_detect(s),
        Command::Eval => run_eval(s),
        Command::Sweep { strides, reps } => sweep(s, strides, *reps),
        Command::Gradcheck { tolerance } => gradcheck(s, *tolerance),
        Command::Paramcheck => paramcheck(s),
        Command::CompareActivations { arch, epochs, probe } => activations(s, arch, *epochs, *probe),
    }
}

fn annotations_path(s: &Settings) -> Result<PathBuf> {
    let p = s
        .data
        .clone()
        .ok_or_else(|| Error::Config("--data is required for this command".into()))?;
    let p = if p.is_dir() { p.join("annotations.jsonl") } else { p };
    if !p.exists() {
        return Err(Error::Data(format!("{} does not exist", p.display())));
    }
    Ok(p)
}

/// The dataset restricted to `--first` / `--count`.
struct Frames {
    disk: DiskDataset,
    first: usize,
    len: usize,
    annotations: PathBuf,
}

impl Frames {
    fn open(s: &Settings) -> Result<Self> {
        let annotations = annotations_path(s)?;
        let disk = DiskDataset::open(&annotations)?;
        if s.first >= disk.len() {
            return Err(Error::Config(format!("--first {} but the dataset has {} frames", s.first, disk.len())));
        }
        let len = s.count.unwrap_or(disk.len() - s.first).min(disk.len() - s.first);
        if len == 0 {
            return Err(Error::Config("--count must be at least 1".into()));
        }
        Ok(Frames {
            disk,
            first: s.first,
            len,
            annotations,
        })
    }

    fn source(&self) -> Subset<'_> {
        Subset {
            source: &self.disk,
            start: self.first,
            len: self.len,
        }
    }
}

fn train_config(s: &Settings, base: TrainConfig, epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        seed: s.seed,
        activation: s.activation.clone(),
        batchnorm: s.batchnorm,
        ..base
    }
}

fn build_options(s: &Settings) -> BuildOptions {
    BuildOptions {
        activation: s.activation.clone(),
        batchnorm: s.batchnorm,
    }
}

fn load(s: &Settings, arch: &str, path: Option<&PathBuf>, flag: &str, out: &mut OutputDir) -> Result<Network<f32>> {
    let path = path.ok_or_else(|| Error::Config(format!("{flag} is required for this command")))?;
    let spec = ArchitectureRegistry::builtin().spec(arch, &build_options(s))?;
    out.input(path)?;
    load_weights(&spec, path)
}

fn pedestrian_sampling(s: &Settings, negatives_per_frame: usize) -> PedestrianSampling {
    PedestrianSampling {
        negatives_per_frame,
        policy: CropPolicy::detector_window(),
        seed: s.seed,
    }
}

fn synth(s: &Settings, frames: usize, width: u32, height: u32) -> Result<Outcome> {
    let config = SynthConfig {
        frames,
        width,
        height,
        ..SynthConfig::default()
    };
    let ds = SynthDataset::new(config.clone(), s.seed)?;
    let mut out = OutputDir::create(&s.out)?;
    let records = ds.write_to_dir(&s.out)?;
    out.record("annotations.jsonl")?;
    let boxes: usize = records.iter().map(|r| r.boxes.len()).sum();
    println!("wrote {} frames with {boxes} pedestrians to {}", records.len(), s.out.display());
    out.finish("synth", s, json!({ "synth": config }))?;
    Ok(Outcome::Success)
}

fn dataset_stats(s: &Settings, bin_width: f64) -> Result<Outcome> {
    let frames = Frames::open(s)?;
    let st = stats(&frames.source(), bin_width, s.pipeline.grid)?;
    let mut out = OutputDir::create(&s.out)?;
    out.input(&frames.annotations)?;
    st.write(&s.out)?;
    for name in ["width_hist.csv", "height_hist.csv", "center_density.pgm", "summary.json"] {
        out.record(name)?;
    }
    println!("{} frames, {} boxes", st.frames, st.boxes);
    out.finish("stats", s, json!({ "bin_width": bin_width }))?;
    Ok(Outcome::Success)
}

fn save_network(out: &mut OutputDir, name: &str, net: &Network<f32>) -> Result<PathBuf> {
    out.put(name, &encode(net))
}

fn train_zone(s: &Settings, epochs: usize, max_positive: usize, max_negative: usize) -> Result<Outcome> {
    let frames = Frames::open(s)?;
    let mut out = OutputDir::create(&s.out)?;
    out.input(&frames.annotations)?;
    let sampling = ZoneSampling {
        grid: s.pipeline.grid,
        max_positive: Some(max_positive),
        max_negative: Some(max_negative),
        ..ZoneSampling::default()
    };
    let crops = extract_zone_samples(&frames.source(), &sampling)?;
    log::info!("{} zone crops", crops.len());
    let cfg = train_config(s, TrainConfig::default(), epochs);
    let (net, curve) = fit("zone", &crops, None, &cfg)?;
    let path = save_network(&mut out, "zone.weights", &net)?;
    out.put("zone_loss.csv", curve.to_csv().as_bytes())?;
    println!("zone classifier: final loss {:.5}, weights {}", curve.final_loss().unwrap_or(f64::NAN), path.display());
    out.finish("train-zone", s, json!({ "sampling": sampling, "train": cfg, "crops": crops.len() }))?;
    Ok(Outcome::Success)
}

fn train_ped(s: &Settings, epochs: usize, negatives_per_frame: usize) -> Result<Outcome> {
    let frames = Frames::open(s)?;
    let mut out = OutputDir::create(&s.out)?;
    out.input(&frames.annotations)?;
    let sampling = pedestrian_sampling(s, negatives_per_frame);
    let samples = extract_pedestrian_samples(&frames.source(), &sampling)?;
    if samples.warnings > 0 {
        log::warn!("{} frames could not place all negatives", samples.warnings);
    }
    log::info!("{} pedestrian crops", samples.crops.len());
    let cfg = train_config(s, TrainConfig::pedestrian(), epochs);
    let (net, curve) = fit("pedestrian", &samples.crops, None, &cfg)?;
    let path = save_network(&mut out, "pedestrian.weights", &net)?;
    out.put("pedestrian_loss.csv", curve.to_csv().as_bytes())?;
    println!("pedestrian classifier: final loss {:.5}, weights {}", curve.final_loss().unwrap_or(f64::NAN), path.display());
    out.finish(
        "train-ped",
        s,
        json!({ "sampling": sampling, "train": cfg, "crops": samples.crops.len() }),
    )?;
    Ok(Outcome::Success)
}

fn mine(s: &Settings, per_frame: usize, epochs: usize, negatives_per_frame: usize) -> Result<Outcome> {
    let frames = Frames::open(s)?;
    let mut out = OutputDir::create(&s.out)?;
    out.input(&frames.annotations)?;
    let cz = load(s, "zone", s.weights_z.as_ref(), "--weights-z", &mut out)?;
    let mut cp = load(s, "pedestrian", s.weights_p.as_ref(), "--weights-p", &mut out)?;
    let source = frames.source();
    let mined = mine_hard_negatives(&source, &cz, &cp, &s.pipeline, per_frame)?;
    log::info!("{} mined negatives", mined.len());
    let mut crops: Vec<LabeledCrop> = extract_pedestrian_samples(&source, &pedestrian_sampling(s, negatives_per_frame))?.crops;
    let mined_count = mined.len();
    crops.extend(mined);
    let cfg = train_config(s, TrainConfig::pedestrian(), epochs);
    let curve = train(&mut cp, &crops, None, &cfg)?;
    let path = save_network(&mut out, "pedestrian_mined.weights", &cp)?;
    out.put("mine_loss.csv", curve.to_csv().as_bytes())?;
    println!("mined {mined_count} false positives; retrained weights {}", path.display());
    out.finish(
        "mine",
        s,
        json!({ "per_frame": per_frame, "mined": mined_count, "train": cfg, "pipeline": s.pipeline }),
    )?;
    Ok(Outcome::Success)
}

fn run_detect(s: &Settings) -> Result<Outcome> {
    let frames = Frames::open(s)?;
    let mut out = OutputDir::create(&s.out)?;
    out.input(&frames.annotations)?;
    let cz = load(s, "zone", s.weights_z.as_ref(), "--weights-z", &mut out)?;
    let cp = load(s, "pedestrian", s.weights_p.as_ref(), "--weights-p", &mut out)?;
    let source = frames.source();
    let mut lines = String::new();
    let mut total = 0;
    for i in 0..source.len() {
        let f = source.frame(i)?;
        let found = detect(&f.image, &cz, &cp, &s.pipeline)?;
        total += found.detections.len();
        lines.push_str(&DetectionRecord::new(&f.id, &found, true).to_json_line()?);
        lines.push('\n');
    }
    out.put("detections.jsonl", lines.as_bytes())?;
    println!("{total} detections in {} frames", source.len());
    out.finish("detect", s, json!({ "pipeline": s.pipeline }))?;
    Ok(Outcome::Success)
}

fn run_eval(s: &Settings) -> Result<Outcome> {
    let frames = Frames::open(s)?;
    let mut out = OutputDir::create(&s.out)?;
    out.input(&frames.annotations)?;
    let cz = load(s, "zone", s.weights_z.as_ref(), "--weights-z", &mut out)?;
    let cp = load(s, "pedestrian", s.weights_p.as_ref(), "--weights-p", &mut out)?;
    let run = evaluate(&frames.source(), &cz, &cp, &s.pipeline)?;
    let pairs: Vec<_> = run
        .outputs
        .iter()
        .zip(&run.ground_truth)
        .map(|(o, g)| (o.detections.iter().map(|d| d.bbox).collect(), g.clone()))
        .collect();
    let bands = recall_by_height_terciles(&pairs, HIT_IOU);
    let mut lines = String::new();
    for r in &run.records {
        lines.push_str(&r.to_json_line()?);
        lines.push('\n');
    }
    out.put("detections.jsonl", lines.as_bytes())?;
    out.put("eval.csv", run.report.to_csv().as_bytes())?;
    let mut timing = String::from("phase,mean_ms\n");
    for (k, v) in [
        ("seek", run.timing.seek_ms),
        ("find", run.timing.find_ms),
        ("nms_merge", run.timing.nms_merge_ms),
        ("total", run.timing.total_ms),
    ] {
        let _ = writeln!(timing, "{k},{v:.3}");
    }
    out.put("timing.csv", timing.as_bytes())?;
    let summary = json!({
        "report": { "miss_rate": run.report.miss_rate, "recall": run.report.recall, "fppi": run.report.fppi,
                    "tp": run.report.true_positives, "fn": run.report.false_negatives, "fp": run.report.false_positives },
        "stages": run.stages,
        "timing": run.timing,
        "height_terciles": bands,
    });
    out.put("eval.json", (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
    let r = &run.report;
    println!(
        "frames {}  recall {:.2}%  MR {:.2}%  FPPI {:.3}  phase I {:.2}% (strict {:.2}%)",
        r.frames, r.recall, r.miss_rate, r.fppi, run.stages.phase1_relaxed, run.stages.phase1_strict
    );
    println!(
        "seek {:.1} ms  find {:.1} ms  nms+merge {:.1} ms  gated/dense windows {:.3}",
        run.timing.seek_ms, run.timing.find_ms, run.timing.nms_merge_ms, run.timing.gating_ratio
    );
    out.finish("eval", s, json!({ "pipeline": s.pipeline }))?;
    Ok(Outcome::Success)
}

fn sweep(s: &Settings, strides: &[u32], reps: usize) -> Result<Outcome> {
    let frames = Frames::open(s)?;
    let mut out = OutputDir::create(&s.out)?;
    out.input(&frames.annotations)?;
    let cz = load(s, "zone", s.weights_z.as_ref(), "--weights-z", &mut out)?;
    let cp = load(s, "pedestrian", s.weights_p.as_ref(), "--weights-p", &mut out)?;
    let points = stride_sweep(&frames.source(), &cz, &cp, &s.pipeline, strides, reps)?;
    out.put("sweep.csv", sweep_csv(&points).as_bytes())?;
    out.put("sweep.svg", sweep_svg(&points).as_bytes())?;
    let xs: Vec<f64> = points.iter().map(|p| p.stride as f64).collect();
    let mr: Vec<f64> = points.iter().map(|p| p.miss_rate).collect();
    print!("{}", sweep_csv(&points));
    println!("spearman(stride, MR) = {:.3}", spearman(&xs, &mr));
    out.finish("sweep", s, json!({ "strides": strides, "reps": reps, "pipeline": s.pipeline }))?;
    Ok(Outcome::Success)
}

fn gradcheck(s: &Settings, tolerance: f64) -> Result<Outcome> {
    let mut out = OutputDir::create(&s.out)?;
    let reports = standard_suite(s.seed)?;
    let mut csv = String::from("check,max_rel_error,worst,checked,skipped,pass\n");
    let mut failed = Vec::new();
    for r in &reports {
        let pass = r.passes(tolerance);
        println!(
            "{:<28} {:>10.3e}  {:<16} checked {:>4} skipped {:>3}  {}",
            r.name,
            r.max_rel_error,
            r.worst,
            r.checked,
            r.skipped,
            if pass { "ok" } else { "FAIL" }
        );
        let _ = writeln!(csv, "{},{:e},{},{},{},{}", r.name, r.max_rel_error, r.worst, r.checked, r.skipped, pass);
        if !pass {
            failed.push(r.name.clone());
        }
    }
    out.put("gradcheck.csv", csv.as_bytes())?;
    out.finish("gradcheck", s, json!({ "tolerance": tolerance }))?;
    Ok(if failed.is_empty() {
        Outcome::Success
    } else {
        Outcome::CheckFailed(format!("gradient check failed for {}", failed.join(", ")))
    })
}

fn paramcheck(s: &Settings) -> Result<Outcome> {
    let mut out = OutputDir::create(&s.out)?;
    let registry = ArchitectureRegistry::builtin();
    let opts = build_options(s);
    let mut csv = String::from("network,layer,reference_kind,built,reference,exact_required,ok\n");
    let mut failures = Vec::new();
    for (arch, reference) in [("zone", &ZONE_REFERENCE[..]), ("pedestrian", &PEDESTRIAN_REFERENCE[..])] {
        let net: Network<f32> = Network::build(&registry.spec(arch, &opts)?, s.seed)?;
        println!("{arch} classifier");
        println!("  {:<34} {:<12} {:>10} {:>10}  status", "layer", "reference", "built", "table");
        for row in param_check(&net, reference)? {
            let status = match (row.exact_required, row.matches()) {
                (_, true) => "match",
                (false, false) => "reported",
                (true, false) => "MISMATCH",
            };
            println!(
                "  {:<34} {:<12} {:>10} {:>10}  {status}",
                row.layer, row.reference_kind, row.built, row.reference
            );
            let _ = writeln!(
                csv,
                "{arch},{},{},{},{},{},{}",
                row.layer,
                row.reference_kind,
                row.built,
                row.reference,
                row.exact_required,
                row.ok()
            );
            if !row.ok() {
                failures.push(format!("{arch}/{}", row.layer));
            }
        }
        let total = net.param_count();
        println!("  total {total}");
        if arch == "pedestrian" && !(PEDESTRIAN_TOTAL_RANGE.0..=PEDESTRIAN_TOTAL_RANGE.1).contains(&total) {
            failures.push(format!("pedestrian total {total}"));
        }
    }
    out.put("paramcheck.csv", csv.as_bytes())?;
    out.finish("paramcheck", s, json!({}))?;
    Ok(if failures.is_empty() {
        Outcome::Success
    } else {
        Outcome::CheckFailed(format!("parameter counts differ: {}", failures.join(", ")))
    })
}

fn activations(s: &Settings, arch: &str, epochs: usize, probe: usize) -> Result<Outcome> {
    let frames = Frames::open(s)?;
    let mut out = OutputDir::create(&s.out)?;
    out.input(&frames.annotations)?;
    let source = frames.source();
    let crops = match arch {
        "zone" => extract_zone_samples(&source, &ZoneSampling::default())?,
        _ => extract_pedestrian_samples(&source, &pedestrian_sampling(s, 4))?.crops,
    };
    let base = if arch == "pedestrian" { TrainConfig::pedestrian() } else { TrainConfig::default() };
    let cfg = train_config(s, base, epochs);
    let cmp = compare_activations(arch, &crops, &cfg)?;
    out.put("activation_curves.csv", cmp.to_csv().as_bytes())?;
    let registry = ArchitectureRegistry::builtin();
    let mut stats_csv = String::from("activation,layer,kind,mean,variance\n");
    for act in ["selu", "relu"] {
        let spec = registry.spec(
            arch,
            &BuildOptions {
                activation: act.into(),
                batchnorm: s.batchnorm,
            },
        )?;
        let net: Network<f32> = Network::build(&spec, s.seed)?;
        for st in activation_stats(&net, &normal_probe(&spec, probe, s.seed))? {
            let _ = writeln!(stats_csv, "{act},{},{},{:.6},{:.6}", st.index, st.activation, st.mean, st.variance);
        }
    }
    out.put("activation_stats.csv", stats_csv.as_bytes())?;
    println!(
        "final loss: selu {:.5}, relu {:.5} ({} steps)",
        cmp.selu.final_loss().unwrap_or(f64::NAN),
        cmp.relu.final_loss().unwrap_or(f64::NAN),
        cmp.selu.steps.len()
    );
    out.finish("compare-activations", s, json!({ "arch": arch, "train": cfg, "crops": crops.len() }))?;
    Ok(Outcome::Success)
}
