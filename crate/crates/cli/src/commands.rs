use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use hfloc_core::distill::{gradient_check, BatchShape};
use hfloc_core::evalbench::{self, GroundTruth, LocalEvalConfig, PairRecord, PoseOutcome, ThresholdTriple};
use hfloc_core::features::io as fio;
use hfloc_core::localizer::StageTimings;
use hfloc_core::mapstore::{self, io as mio, lists, BuildConfig};
use hfloc_core::matching::TargetMode;
use hfloc_core::pose::RansacConfig;
use hfloc_core::synth::{self, SceneSpec};
use hfloc_core::{par, Camera, LocalFeatureSet, Localizer, LocalizerConfig, Pose};

use crate::{
    BuildMapArgs, Cli, Command, DistillCheckArgs, EvalLocArgs, EvalLocalArgs, EvalMode, LocalizeArgs, MapStatsArgs,
    MatchModeArg, SynthArgs,
};

/// `println!` that returns write errors instead of panicking, so a closed
/// pipe ends the command cleanly.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        writeln!(std::io::stdout().lock(), $($arg)*)?
    }};
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::BuildMap(a) => build_map_cmd(a),
        Command::MapStats(a) => map_stats_cmd(a),
        Command::Localize(a) => localize_cmd(a),
        Command::EvalLocal(a) => eval_local_cmd(a),
        Command::EvalLoc(a) => eval_loc_cmd(a),
        Command::DistillCheck(a) => distill_check_cmd(a),
    }
}

/// Writes through a sibling temporary file so a failed run leaves no partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_features(dir: &Path, id: &str) -> Result<LocalFeatureSet> {
    let path = fio::path_for(dir, id);
    let set = fio::read(&path).with_context(|| format!("reading features for '{id}'"))?;
    if set.image_id != id {
        bail!(
            "{} holds features of '{}', expected '{id}'",
            path.display(),
            set.image_id
        );
    }
    Ok(set)
}

/// Non-empty lines, with `#` comments stripped.
fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn synth_cmd(a: SynthArgs) -> Result<ExitCode> {
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SceneSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let ds = synth::generate_dataset(&spec)?;
    synth::write_dataset(&ds, &a.out)?;
    out!(
        "wrote {} database and {} query views ({} points) to {}",
        ds.db_views.len(),
        ds.query_views.len(),
        ds.scene.points.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Pairs each image with its `k` most similar images by cosine similarity
/// of the global descriptors; ties go to the smaller index.
fn knn_pairs(sets: &[LocalFeatureSet], k: usize) -> Result<Vec<(String, String)>> {
    let unit: Vec<Vec<f64>> = sets
        .iter()
        .map(|s| {
            let v: Vec<f64> = s.global.iter().map(|x| *x as f64).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                Ok(v.iter().map(|x| x / n).collect())
            } else {
                bail!("image '{}' has no global descriptor for --pair-knn", s.image_id)
            }
        })
        .collect::<Result<_>>()?;
    let mut set = BTreeSet::new();
    for i in 0..sets.len() {
        let mut sims: Vec<(usize, f64)> = (0..sets.len())
            .filter(|&j| j != i)
            .map(|j| (j, unit[i].iter().zip(&unit[j]).map(|(x, y)| x * y).sum()))
            .collect();
        sims.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        for (j, _) in sims.into_iter().take(k) {
            set.insert((i.min(j), i.max(j)));
        }
    }
    Ok(set
        .into_iter()
        .map(|(i, j)| (sets[i].image_id.clone(), sets[j].image_id.clone()))
        .collect())
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    read_id_list(path)?
        .into_iter()
        .enumerate()
        .map(|(n, line)| {
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(a), Some(b), None) => Ok((a.to_string(), b.to_string())),
                _ => bail!("{}: pair {} must be 'image_a image_b'", path.display(), n + 1),
            }
        })
        .collect()
}

fn build_map_cmd(a: BuildMapArgs) -> Result<ExitCode> {
    let poses = lists::read_poses(&a.poses)?;
    let cameras = lists::into_map(lists::read_cameras(&a.cameras)?, "camera")?;
    let ids: Vec<String> = poses.iter().map(|(id, _)| id.clone()).collect();
    let pose_map = lists::into_map(poses, "pose")?;
    let sets = ids
        .iter()
        .map(|id| read_features(&a.features, id))
        .collect::<Result<Vec<_>>>()?;
    let pairs = match (&a.pairs, a.pair_knn) {
        (Some(p), _) => read_pairs(p)?,
        (None, Some(k)) => knn_pairs(&sets, k as usize)?,
        (None, None) => mapstore::exhaustive_pairs(&ids),
    };
    let cfg = BuildConfig {
        ratio: a.ratio,
        epipolar_px: a.epipolar_px,
        min_angle_deg: a.min_angle_deg,
        pca_dim: (a.pca_dim > 0).then_some(a.pca_dim),
    };
    let (map, summary) = mapstore::build_map(sets, &pose_map, &cameras, &pairs, &cfg)?;
    write_atomic(&a.out, &mio::encode(&map))?;
    out!("{}", serde_json::to_string(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn map_stats_cmd(a: MapStatsArgs) -> Result<ExitCode> {
    let map = mio::load(&a.map)?;
    let s = mapstore::map_stats(&map)?;
    if a.json {
        out!("{}", serde_json::to_string(&s)?);
    } else {
        out!("num_points {}", s.num_points);
        out!("keypoints_per_image {}", s.keypoints_per_image);
        out!("matched_keypoint_ratio {}", s.matched_keypoint_ratio);
        out!("track_length {}", s.track_length);
    }
    Ok(ExitCode::SUCCESS)
}

/// One line of `localize` output.
#[derive(Debug, Serialize, Deserialize)]
pub struct ResultLine {
    pub image_id: String,
    pub success: bool,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub num_inliers: usize,
    pub timings_ms: StageTimings,
}

const STAGES: [&str; 6] = [
    "feature_load",
    "global_search",
    "clustering",
    "local_matching",
    "pnp",
    "total",
];

fn stage_values(t: &StageTimings) -> [f64; 6] {
    [
        t.feature_load,
        t.global_search,
        t.clustering,
        t.local_matching,
        t.pnp,
        t.total,
    ]
}

fn localize_cmd(a: LocalizeArgs) -> Result<ExitCode> {
    let cfg = LocalizerConfig {
        k_nn: a.knn,
        ratio: a.ratio,
        nms_radius: a.nms_radius,
        max_keypoints: a.max_kpts,
        match_mode: match a.match_mode {
            MatchModeArg::AllObservations => TargetMode::AllObservations,
            MatchModeArg::PointMean => TargetMode::PointMean,
        },
        ransac: RansacConfig {
            reproj_px: a.reproj_px,
            min_inliers: a.min_inliers,
            max_iters: a.max_iters,
            confidence: a.confidence,
            seed: a.seed,
        },
        ..LocalizerConfig::default()
    };
    let map = mio::load(&a.map)?;
    let cameras: HashMap<String, Camera> = lists::into_map(lists::read_cameras(&a.cameras)?, "camera")?;
    let ids = read_id_list(&a.queries)?;
    let mut load_ms = Vec::with_capacity(ids.len());
    let mut queries = Vec::with_capacity(ids.len());
    for id in &ids {
        let start = Instant::now();
        let set = read_features(&a.features, id)?;
        load_ms.push(start.elapsed().as_secs_f64() * 1e3);
        let cam = *cameras
            .get(id)
            .with_context(|| format!("no camera for query '{id}' in {}", a.cameras.display()))?;
        queries.push((set, cam));
    }
    let loc = Localizer::new(map, cfg)?;
    let results = loc.localize_batch(&queries);

    let mut out = String::new();
    let mut sums = [0.0; 6];
    let mut ok = 0;
    for (r, extra) in results.into_iter().zip(&load_ms) {
        let mut r = r?;
        r.timings.feature_load += extra;
        r.timings.total += extra;
        let p = r.pose();
        let [qw, qx, qy, qz] = p.wxyz();
        let line = ResultLine {
            image_id: r.image_id.clone(),
            success: r.success(),
            qw,
            qx,
            qy,
            qz,
            tx: p.translation.x,
            ty: p.translation.y,
            tz: p.translation.z,
            num_inliers: r.estimate.num_inliers,
            timings_ms: r.timings,
        };
        ok += r.success() as usize;
        for (s, v) in sums.iter_mut().zip(stage_values(&r.timings)) {
            *s += v;
        }
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    write_atomic(&a.out, out.as_bytes())?;

    let n = ids.len().max(1) as f64;
    out!("localized {ok}/{} queries", ids.len());
    let mode = match a.match_mode {
        MatchModeArg::AllObservations => "all-observations",
        MatchModeArg::PointMean => "point-mean",
    };
    out!("match mode {mode}");
    out!("{:<16}{:>12}", "stage", "mean [ms]");
    for (name, s) in STAGES.iter().zip(sums) {
        out!("{name:<16}{:>12.3}", s / n);
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_local_cmd(a: EvalLocalArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&a.pairs).with_context(|| format!("reading {}", a.pairs.display()))?;
    let base = a.pairs.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord =
            serde_json::from_str(line).with_context(|| format!("{}: line {}", a.pairs.display(), n + 1))?;
        records.push(rec);
    }
    let mut cfg = match a.mode {
        EvalMode::Homography => LocalEvalConfig::homography(),
        EvalMode::Sfm => LocalEvalConfig::sfm(),
    };
    if let Some(e) = a.eps_keypoint {
        cfg.eps_keypoint = e;
    }
    if let Some(e) = a.eps_descriptor {
        cfg.eps_descriptor = e;
    }
    cfg.corner_threshold = a.corner_px;
    cfg.seed = a.seed;

    let mut cache: HashMap<String, LocalFeatureSet> = HashMap::new();
    let mut jobs: Vec<(String, String, String, GroundTruth)> = Vec::with_capacity(records.len());
    for rec in &records {
        let gt = rec.ground_truth(&base)?;
        let is_h = matches!(gt, GroundTruth::Homography { .. });
        if is_h != (a.mode == EvalMode::Homography) {
            bail!("pair '{}' does not carry {:?} ground truth", rec.id, a.mode);
        }
        for id in [&rec.image_a, &rec.image_b] {
            if !cache.contains_key(id) {
                cache.insert(id.clone(), read_features(&a.features, id)?);
            }
        }
        jobs.push((rec.id.clone(), rec.image_a.clone(), rec.image_b.clone(), gt));
    }
    let indexed: Vec<_> = jobs.iter().enumerate().collect();
    let reports = par::map(&indexed, |(i, (id, ia, ib, gt))| {
        evalbench::evaluate_pair(id, &cache[ia], &cache[ib], gt, &cfg, *i)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let mode = match a.mode {
        EvalMode::Homography => "homography",
        EvalMode::Sfm => "sfm",
    };
    let report = evalbench::summarize(mode, cfg, reports);
    write_atomic(&a.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    out!(
        "pairs {} (skipped {}): repeatability {:.4} mle {:.4} matching_score {:.4} mAP {:.4} {} {:.4}",
        report.pairs.len(),
        report.skipped,
        report.repeatability,
        report.mle,
        report.matching_score,
        report.map,
        if a.mode == EvalMode::Homography {
            "homography_recall"
        } else {
            "relpose_recall"
        },
        report.pose_recall
    );
    Ok(ExitCode::SUCCESS)
}

fn eval_loc_cmd(a: EvalLocArgs) -> Result<ExitCode> {
    let tiers: ThresholdTriple = a.tiers;
    let gt: HashMap<String, Pose> = lists::into_map(lists::read_poses(&a.gt)?, "pose")?;
    let text = fs::read_to_string(&a.results).with_context(|| format!("reading {}", a.results.display()))?;
    let mut outcomes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ResultLine =
            serde_json::from_str(line).with_context(|| format!("{}: line {}", a.results.display(), n + 1))?;
        outcomes.push(PoseOutcome {
            image_id: r.image_id,
            success: r.success,
            pose: Pose::from_wxyz([r.qw, r.qx, r.qy, r.qz], [r.tx, r.ty, r.tz]),
        });
    }
    let recall = evalbench::localization_recall(&outcomes, &gt, &tiers)?;
    let curve = evalbench::cumulative_curve(&outcomes, &gt)?;
    if let Some(p) = &a.curve_out {
        write_atomic(p, curve.to_csv(a.curve_max, a.curve_steps as usize).as_bytes())?;
    }
    let labels: Vec<String> = tiers.tiers().iter().map(|(d, r)| format!("{d}m,{r}deg")).collect();
    out!("queries {}", outcomes.len());
    out!(
        "recall [%] {} / {} / {}: {:.1} / {:.1} / {:.1}",
        labels[0],
        labels[1],
        labels[2],
        recall[0],
        recall[1],
        recall[2]
    );
    Ok(ExitCode::SUCCESS)
}

fn distill_check_cmd(a: DistillCheckArgs) -> Result<ExitCode> {
    let r = gradient_check(a.seed, a.trials as usize, BatchShape::default())?;
    out!(
        "max relative error {:.3e} over {} batches ({} gradient components)",
        r.max_relative_error,
        r.trials,
        r.components
    );
    Ok(if r.max_relative_error < a.tolerance {
        ExitCode::SUCCESS
    } else {
        eprintln!("error: gradient check exceeds tolerance {:e}", a.tolerance);
        ExitCode::from(1)
    })
}
