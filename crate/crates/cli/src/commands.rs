// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::time::Duration;

use anyhow::{anyhow, Context};
use leafcut::canopy_synth::GROUND_TRUTH_SCHEMA;
use leafcut::eval_metrics::{
    default_match_threshold, detection_table_csv, match_centers, normalize_quaternion, pose_table_csv,
    DetectionRow, PoseSummary, TimingStats,
};
use leafcut::leaf_detect::{StageCounts, CANDIDATES_SCHEMA};
use leafcut::{
    aggregate_pose_errors, detect_leaves_detailed, generate_scene, parse_cloud, pose_error, run_trials,
    timing_summary, write_cloud, CandidateSet, CloudError, CloudFormat, FormatHint, GroundTruthFile,
    PipelineConfig, PointCloud, Pose6D, SceneSpec,
};
use nalgebra::Vector3;
use serde::Serialize;

use crate::{
    BenchArgs, CloudFormatArg, DetectArgs, EvalArgs, Failure, OutputFormat, SynthArgs, TrialArgs, EXIT_EMPTY,
    EXIT_MALFORMED, EXIT_SCHEMA,
};

fn malformed(e: impl Into<anyhow::Error>) -> Failure {
    Failure::new(EXIT_MALFORMED, e)
}

fn write_or_print(output: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn hint_for(path: &Path) -> FormatHint {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("pcd") => FormatHint::Pcd,
        Some("ply") => FormatHint::Ply,
        _ => FormatHint::Auto,
    }
}

fn read_cloud(path: &Path) -> Result<PointCloud, Failure> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_cloud(&bytes, hint_for(path)).map_err(|e| match e {
        CloudError::Io(_) => Failure::new(1, e),
        _ => malformed(anyhow!("{}: {e}", path.display())),
    })
}

pub fn detect(cfg: &PipelineConfig, args: &DetectArgs) -> Result<u8, Failure> {
    let cloud = read_cloud(&args.input)?;
    let det = detect_leaves_detailed(&cloud, &cfg.preprocess, &cfg.clustering, &cfg.filter);
    let set = CandidateSet::new(cloud.frame_id(), det.counts, &det.candidates);
    let text = match args.format {
        OutputFormat::Json => set.to_json() + "\n",
        OutputFormat::Csv => candidates_csv(&set)?,
    };
    write_or_print(args.output.as_deref(), &text)?;
    let c = det.counts;
    eprintln!(
        "{} candidates from {} points (cropped {}, inliers {}, downsampled {}, clusters {})",
        c.candidates, c.input, c.cropped, c.inliers, c.downsampled, c.clusters
    );
    Ok(if det.candidates.is_empty() { EXIT_EMPTY } else { 0 })
}

fn candidates_csv(set: &CandidateSet) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "rank",
        "x_mm",
        "y_mm",
        "z_mm",
        "h_mm",
        "w_mm",
        "d_mm",
        "qw",
        "qx",
        "qy",
        "qz",
        "theta_deg",
        "phi_deg",
        "alpha_deg",
        "n_points",
        "volume_mm3",
        "ratio",
    ])?;
    for c in &set.candidates {
        let mut row = vec![c.rank.to_string()];
        row.extend(
            c.center_mm
                .iter()
                .chain(&c.dims_mm)
                .chain(&c.quaternion)
                .chain(&c.euler_deg)
                .map(|v| v.to_string()),
        );
        row.push(c.n_points.to_string());
        row.push(c.volume_mm3.to_string());
        row.push(c.ratio.to_string());
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn synth(cfg: &PipelineConfig, args: &SynthArgs) -> Result<u8, Failure> {
    let mut spec = cfg.synth;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.leaves {
        spec.n_leaves = n;
    }
    spec.validate().map_err(malformed)?;
    let (cloud, truth) = generate_scene(&spec)?;
    let format = match args.cloud_format {
        CloudFormatArg::Pcd => CloudFormat::PcdBinary,
        CloudFormatArg::PcdAscii => CloudFormat::PcdAscii,
        CloudFormatArg::Ply => CloudFormat::PlyBinary,
        CloudFormatArg::PlyAscii => CloudFormat::PlyAscii,
    };
    fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let cloud_path = args.output.join(format!("{}.{}", args.name, format.extension()));
    let truth_path = args.output.join(format!("{}.truth.json", args.name));
    fs::write(&cloud_path, write_cloud(&cloud, format))
        .with_context(|| format!("writing {}", cloud_path.display()))?;
    fs::write(&truth_path, GroundTruthFile::new(&spec, &truth).to_json() + "\n")
        .with_context(|| format!("writing {}", truth_path.display()))?;
    eprintln!(
        "{} leaves, {} points -> {}, {}",
        truth.leaves.len(),
        cloud.len(),
        cloud_path.display(),
        truth_path.display()
    );
    Ok(0)
}

/// Reads `[[scenes]]` tables, each layered over the synth defaults.
fn load_campaign(path: &Path, base: &SceneSpec) -> Result<Vec<SceneSpec>, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| malformed(anyhow!("{}: {e}", path.display())))?;
    if let Some(k) = doc.keys().find(|k| *k != "scenes") {
        return Err(malformed(anyhow!("{}: unknown key `{k}`", path.display())));
    }
    let tables = match doc.get("scenes") {
        None => Vec::new(),
        Some(toml::Value::Array(a)) => a.clone(),
        Some(_) => {
            return Err(malformed(anyhow!(
                "{}: `scenes` must be an array of tables",
                path.display()
            )))
        }
    };
    let base = toml::Table::try_from(base).map_err(|e| anyhow!(e))?;
    tables
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let toml::Value::Table(over) = v else {
                return Err(malformed(anyhow!("scene {i}: not a table")));
            };
            let mut merged = base.clone();
            merged.extend(over);
            let spec: SceneSpec = toml::Value::Table(merged)
                .try_into()
                .map_err(|e: toml::de::Error| malformed(anyhow!("scene {i}: {e}")))?;
            spec.validate()
                .map_err(|e| malformed(anyhow!("scene {i}: {e}")))?;
            Ok(spec)
        })
        .collect()
}

pub fn trial(cfg: &PipelineConfig, args: &TrialArgs) -> Result<u8, Failure> {
    let scenes = match &args.campaign {
        Some(path) => load_campaign(path, &cfg.synth)?,
        None => {
            let first = args.seed.unwrap_or(cfg.synth.seed);
            (0..args.scenes as u64)
                .map(|i| SceneSpec {
                    n_leaves: args.leaves_per_scene,
                    seed: first + i,
                    ..cfg.synth
                })
                .collect()
        }
    };
    if scenes.is_empty() {
        return Err(malformed(anyhow!("campaign has no scenes")));
    }
    let mut report = run_trials(&scenes, &cfg.trial_config())?;
    if args.no_wall_clock {
        report = report.without_wall_clock();
    }
    fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let out = |name: &str, text: String| -> anyhow::Result<()> {
        let p = args.output.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    out("report.json", report.to_json() + "\n")?;
    out("trials.csv", trials_csv(&report)?)?;
    out("funnel.csv", report.funnel_csv())?;
    out("timing.csv", report.timing_csv())?;
    let c = &report.counts;
    eprintln!(
        "{} trials: potential {}, candidate {}, viable {}, captured {}, cut {} (clean {}, near miss {})",
        report.trials.len(),
        c.potential,
        c.candidate,
        c.viable,
        c.captured,
        c.cut,
        c.clean,
        c.near_miss
    );
    Ok(0)
}

fn trials_csv(report: &leafcut::TrialReport) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "trial",
        "seed",
        "truth_leaves",
        "potential",
        "candidate",
        "viable",
        "captured",
        "cut",
        "clean",
        "near_miss",
        "perception_s",
    ])?;
    for t in &report.trials {
        let c = &t.counts;
        w.write_record([
            t.index.to_string(),
            t.seed.to_string(),
            t.truth_leaves.to_string(),
            c.potential.to_string(),
            c.candidate.to_string(),
            c.viable.to_string(),
            c.captured.to_string(),
            c.cut.to_string(),
            c.clean.to_string(),
            c.near_miss.to_string(),
            format!("{:.4}", t.perception_s),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Parses a JSON document after checking its `schema_version`.
fn read_versioned<T: serde::de::DeserializeOwned>(path: &Path, expected: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| malformed(anyhow!("{}: {e}", path.display())))?;
    match value.get("schema_version").and_then(|v| v.as_str()) {
        Some(v) if v == expected => {}
        found => {
            return Err(Failure::new(
                EXIT_SCHEMA,
                anyhow!(
                    "{}: schema_version {} does not match expected `{expected}`",
                    path.display(),
                    found.map_or_else(|| "missing".to_string(), |v| format!("`{v}`"))
                ),
            ))
        }
    }
    serde_json::from_value(value).map_err(|e| malformed(anyhow!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct EvalReport {
    detection: DetectionRow,
    pairs: Vec<(u32, usize)>,
    missed: Vec<u32>,
    false_positives: Vec<usize>,
    pose: Option<PoseSummary>,
}

pub fn eval(_cfg: &PipelineConfig, args: &EvalArgs) -> Result<u8, Failure> {
    let truth_file: GroundTruthFile = read_versioned(&args.truth, GROUND_TRUTH_SCHEMA)?;
    let set: CandidateSet = read_versioned(&args.candidates, CANDIDATES_SCHEMA)?;
    let truth = truth_file.to_truth();

    let threshold = match args.threshold.or_else(|| default_match_threshold(&truth)) {
        Some(t) => t,
        None => return Err(anyhow!("ground truth has no leaves and no --threshold was given").into()),
    };
    let mut estimates = Vec::with_capacity(set.candidates.len());
    for c in &set.candidates {
        let (q, flagged) = normalize_quaternion(c.quaternion)
            .map_err(|e| malformed(anyhow!("candidate {}: {e}", c.rank)))?;
        if flagged {
            eprintln!(
                "warning: candidate {} quaternion was not unit length; normalized",
                c.rank
            );
        }
        let center = Vector3::from(c.center_mm) / 1e3;
        estimates.push((c.rank, Pose6D::new(center, q)));
    }
    let t: Vec<_> = truth
        .leaves
        .iter()
        .map(|l| (l.id, l.center.translation))
        .collect();
    let e: Vec<_> = estimates.iter().map(|(r, p)| (*r, p.translation)).collect();
    let matched = match_centers(&t, &e, threshold).map_err(malformed)?;

    let errors: Vec<_> = matched
        .pairs
        .iter()
        .map(|&(id, rank)| {
            let leaf = truth
                .leaves
                .iter()
                .find(|l| l.id == id)
                .expect("matched id exists");
            let est = &estimates
                .iter()
                .find(|(r, _)| *r == rank)
                .expect("matched rank exists")
                .1;
            pose_error(&leaf.center, est)
        })
        .collect();
    let pose = aggregate_pose_errors(&errors).ok();
    let dataset = args
        .candidates
        .file_stem()
        .map_or_else(|| "candidates".to_string(), |s| s.to_string_lossy().into_owned());
    let row = DetectionRow {
        dataset,
        point_clouds: 1,
        total_leaves: matched.n_truth(),
        detected: matched.pairs.len(),
    };

    let text = match args.format {
        OutputFormat::Csv => {
            let mut s = detection_table_csv(std::slice::from_ref(&row));
            if let Some(p) = &pose {
                s.push('\n');
                s.push_str(&pose_table_csv(p));
            }
            s
        }
        OutputFormat::Json => {
            let report = EvalReport {
                detection: row.clone(),
                pairs: matched.pairs.clone(),
                missed: matched.missed.clone(),
                false_positives: matched.false_positives.clone(),
                pose,
            };
            serde_json::to_string_pretty(&report)? + "\n"
        }
    };
    write_or_print(args.output.as_deref(), &text)?;
    eprintln!(
        "matched {} of {} leaves, {} false positives (threshold {:.1} mm)",
        matched.pairs.len(),
        matched.n_truth(),
        matched.false_positives.len(),
        threshold * 1e3
    );
    Ok(0)
}

#[derive(Serialize)]
struct StageStats {
    crop: TimingStats,
    outliers: TimingStats,
    downsample: TimingStats,
    cluster: TimingStats,
    describe: TimingStats,
    total: TimingStats,
}

#[derive(Serialize)]
struct BenchReport {
    repetitions: usize,
    stage_counts: StageCounts,
    /// Milliseconds.
    timings_ms: StageStats,
}

pub fn bench(cfg: &PipelineConfig, args: &BenchArgs) -> Result<u8, Failure> {
    if args.repetitions == 0 {
        return Err(malformed(anyhow!("--repetitions must be at least 1")));
    }
    let cloud = match &args.input {
        Some(p) => read_cloud(p)?,
        None => {
            let mut spec = cfg.synth;
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            generate_scene(&spec)?.0
        }
    };
    let mut counts = None;
    let mut samples: [Vec<f64>; 6] = Default::default();
    for _ in 0..args.repetitions {
        let det = detect_leaves_detailed(&cloud, &cfg.preprocess, &cfg.clustering, &cfg.filter);
        match counts {
            None => counts = Some(det.counts),
            Some(c) if c != det.counts => {
                return Err(anyhow!("stage counts changed between repetitions").into())
            }
            Some(_) => {}
        }
        let t = det.timings;
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        for (s, d) in
            samples
                .iter_mut()
                .zip([t.crop, t.outliers, t.downsample, t.cluster, t.describe, t.total()])
        {
            s.push(ms(d));
        }
    }
    let stats = samples.map(|s| timing_summary(&s).expect("at least one repetition"));
    let [crop, outliers, downsample, cluster, describe, total] = stats;
    let report = BenchReport {
        repetitions: args.repetitions,
        stage_counts: counts.expect("at least one repetition"),
        timings_ms: StageStats {
            crop,
            outliers,
            downsample,
            cluster,
            describe,
            total,
        },
    };
    let text = match args.format {
        OutputFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
        OutputFormat::Csv => leafcut::eval_metrics::timing_table_csv(&[
            ("Crop (ms)", Some(crop)),
            ("Outliers (ms)", Some(outliers)),
            ("Downsample (ms)", Some(downsample)),
            ("Cluster (ms)", Some(cluster)),
            ("Describe (ms)", Some(describe)),
            ("Total (ms)", Some(total)),
        ]),
    };
    write_or_print(args.output.as_deref(), &text)?;
    let c = report.stage_counts;
    eprintln!(
        "{} points, {} candidates, mean total {:.1} ms over {} runs",
        c.input, c.candidates, total.mean, args.repetitions
    );
    Ok(0)
}
