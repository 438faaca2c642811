//! Stratified tracking benchmark: per-episode success and MPJPE, aggregation
//! over the 6 × 3 category/level grid, and report emission.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{HumanoidModel, RigidPose};
use crate::motion::{load_clip, Category, Frame, Level, MotionClip, MotionError};
use crate::simtrack::{OracleTracker, SimError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("input error: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub deviation_m: f64,
    pub fall_root_z_m: f64,
    /// A fall only counts while the reference root is at least this much
    /// above the fall height.
    pub fall_guard_m: f64,
    pub root_drift_m: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { deviation_m: 0.5, fall_root_z_m: 0.3, fall_guard_m: 0.1, root_drift_m: 1.0 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("deviation_m", self.deviation_m),
            ("fall_root_z_m", self.fall_root_z_m),
            ("root_drift_m", self.root_drift_m),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(BenchError::Input(format!("threshold {name} must be positive")));
            }
        }
        if !(self.fall_guard_m.is_finite() && self.fall_guard_m >= 0.0) {
            return Err(BenchError::Input("fall_guard_m must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    None,
    Fall,
    Deviation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpjpeMode {
    /// World frame after aligning the episode-initial root planar pose.
    #[default]
    Global,
    /// Each frame's bodies expressed in that frame's root frame.
    RootRelative,
}

impl FromStr for MpjpeMode {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(MpjpeMode::Global),
            "root-relative" | "root_relative" => Ok(MpjpeMode::RootRelative),
            other => Err(BenchError::Usage(format!("unknown MPJPE mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub thresholds: Thresholds,
    pub mpjpe_mode: MpjpeMode,
    /// Average failed episodes' until-failure MPJPE into the stratum mean.
    pub include_failed: bool,
}

/// Mean Euclidean distance in millimetres over all frames and bodies.
pub fn mpjpe(pred: &[Vec<Vector3<f64>>], reference: &[Vec<Vector3<f64>>]) -> Result<f64> {
    Ok(per_frame_errors(pred, reference)?.iter().sum::<f64>() / pred.len() as f64)
}

fn per_frame_errors(pred: &[Vec<Vector3<f64>>], reference: &[Vec<Vector3<f64>>]) -> Result<Vec<f64>> {
    if pred.is_empty() || pred.len() != reference.len() {
        return Err(BenchError::Input(format!(
            "trajectory lengths differ or are empty: {} vs {}",
            pred.len(),
            reference.len()
        )));
    }
    pred.iter()
        .zip(reference)
        .enumerate()
        .map(|(t, (p, r))| {
            if p.is_empty() || p.len() != r.len() {
                return Err(BenchError::Input(format!("frame {t}: body counts {} vs {}", p.len(), r.len())));
            }
            Ok(1000.0 * p.iter().zip(r).map(|(a, b)| (a - b).norm()).sum::<f64>() / p.len() as f64)
        })
        .collect()
}

/// Planar (x, y, yaw) transform taking `from` onto `to`.
pub fn planar_alignment(from: &RigidPose, to: &RigidPose) -> RigidPose {
    let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), to.yaw() - from.yaw());
    let shifted = yaw * Vector3::new(from.position.x, from.position.y, 0.0);
    RigidPose::new(Vector3::new(to.position.x - shifted.x, to.position.y - shifted.y, 0.0), yaw)
}

/// Failure check for one frame; deviation wins over fall, fall over drift.
pub fn check_failure(
    root: &RigidPose,
    bodies: &[Vector3<f64>],
    ref_root: &RigidPose,
    ref_bodies: &[Vector3<f64>],
    th: &Thresholds,
) -> FailureReason {
    if bodies.iter().zip(ref_bodies).any(|(a, b)| (a - b).norm() > th.deviation_m) {
        return FailureReason::Deviation;
    }
    if root.position.z < th.fall_root_z_m && ref_root.position.z >= th.fall_root_z_m + th.fall_guard_m {
        return FailureReason::Fall;
    }
    let drift = (root.position.xy() - ref_root.position.xy()).norm();
    if drift > th.root_drift_m {
        return FailureReason::Deviation;
    }
    FailureReason::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub clip: String,
    pub category: Category,
    pub level: Level,
    pub success: bool,
    pub failure_reason: FailureReason,
    pub failure_frame: Option<usize>,
    pub mpjpe_mm: f64,
    pub per_frame_error_mm: Vec<f64>,
    pub frames_evaluated: usize,
}

/// Anything that turns a reference clip into a tracked trajectory, one
/// frame per reference tick.
pub trait Tracker: Sync {
    fn label(&self) -> String;
    fn track(&self, clip: &MotionClip, model: &HumanoidModel) -> Result<Vec<Frame>>;
}

impl Tracker for OracleTracker {
    fn label(&self) -> String {
        self.mode.to_string()
    }

    fn track(&self, clip: &MotionClip, model: &HumanoidModel) -> Result<Vec<Frame>> {
        Ok(OracleTracker::track(self, clip, model)?)
    }
}

fn body_positions(frame: &Frame, model: &HumanoidModel) -> Result<Vec<Vector3<f64>>> {
    Ok(frame.key_body_poses(model)?.iter().map(|p| p.position).collect())
}

/// Runs one episode; the first failing frame terminates it and MPJPE is
/// taken over the frames up to and including that one.
pub fn run_episode(
    tracker: &dyn Tracker,
    clip: &MotionClip,
    model: &HumanoidModel,
    opts: &EvalOptions,
) -> Result<EpisodeResult> {
    if clip.frames.is_empty() {
        return Err(BenchError::Input(format!("clip `{}` is empty", clip.name)));
    }
    opts.thresholds.validate()?;
    let tracked = tracker.track(clip, model)?;
    if tracked.len() != clip.frames.len() {
        return Err(BenchError::Input(format!(
            "tracker produced {} frames for a {}-frame clip",
            tracked.len(),
            clip.frames.len()
        )));
    }
    let align = planar_alignment(&tracked[0].root, &clip.frames[0].root);
    let mut pred = Vec::with_capacity(tracked.len());
    let mut reference = Vec::with_capacity(tracked.len());
    let mut failure = (FailureReason::None, None);
    for (t, (state, target)) in tracked.iter().zip(&clip.frames).enumerate() {
        let root = align.compose(&state.root);
        let bodies: Vec<Vector3<f64>> =
            body_positions(state, model)?.iter().map(|p| align.transform_point(p)).collect();
        let ref_bodies = body_positions(target, model)?;
        let reason = check_failure(&root, &bodies, &target.root, &ref_bodies, &opts.thresholds);
        match opts.mpjpe_mode {
            MpjpeMode::Global => {
                pred.push(bodies);
                reference.push(ref_bodies);
            }
            MpjpeMode::RootRelative => {
                let (inv, ref_inv) = (root.inverse(), target.root.inverse());
                pred.push(bodies.iter().map(|p| inv.transform_point(p)).collect());
                reference.push(ref_bodies.iter().map(|p| ref_inv.transform_point(p)).collect());
            }
        }
        if reason != FailureReason::None {
            failure = (reason, Some(t));
            break;
        }
    }
    let per_frame_error_mm = per_frame_errors(&pred, &reference)?;
    let mpjpe_mm = per_frame_error_mm.iter().sum::<f64>() / per_frame_error_mm.len() as f64;
    Ok(EpisodeResult {
        clip: clip.name.clone(),
        category: clip.category,
        level: clip.level,
        success: failure.0 == FailureReason::None,
        failure_reason: failure.0,
        failure_frame: failure.1,
        mpjpe_mm,
        frames_evaluated: per_frame_error_mm.len(),
        per_frame_error_mm,
    })
}

/// Evaluates every clip, in parallel, returning results in input order.
pub fn run_suite(
    tracker: &dyn Tracker,
    clips: &[MotionClip],
    model: &HumanoidModel,
    opts: &EvalOptions,
) -> Result<Vec<EpisodeResult>> {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(clips.len().max(1));
    let chunk = clips.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<EpisodeResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = clips
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|c| run_episode(tracker, c, model, opts)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("episode worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(clips.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub category: Category,
    pub level: Level,
    pub sr_percent: f64,
    /// Absent when no episode contributed to the mean.
    pub mpjpe_mm: Option<f64>,
    pub episodes: usize,
    pub successes: usize,
}

impl StratumRow {
    pub fn label(&self) -> String {
        format!("{} {}", self.category.display_name(), self.level.display_name())
    }

    pub fn radar_label(&self) -> String {
        format!("{}_{}", self.category.as_str(), self.level.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: String,
    pub rows: Vec<StratumRow>,
}

/// Every benchmark stratum in table order.
pub fn strata() -> Vec<(Category, Level)> {
    Category::BENCHMARK
        .iter()
        .flat_map(|&c| c.levels().iter().map(move |&l| (c, l)))
        .collect()
}

impl BenchReport {
    pub const STRATA: usize = 18;

    pub fn is_partial(&self) -> bool {
        self.rows.len() < Self::STRATA
    }

    pub fn missing_strata(&self) -> Vec<(Category, Level)> {
        strata()
            .into_iter()
            .filter(|(c, l)| !self.rows.iter().any(|r| r.category == *c && r.level == *l))
            .collect()
    }

    pub fn row(&self, category: Category, level: Level) -> Option<&StratumRow> {
        self.rows.iter().find(|r| r.category == category && r.level == level)
    }
}

/// Per-stratum SR and mean MPJPE. Strata without episodes are omitted.
/// Means are summed in sorted order so the result does not depend on the
/// order of `results`.
pub fn aggregate(method: &str, results: &[EpisodeResult], include_failed: bool) -> BenchReport {
    let mut order = strata();
    for r in results {
        if !order.contains(&(r.category, r.level)) {
            order.push((r.category, r.level));
        }
    }
    let mut rows = Vec::new();
    for (category, level) in order {
        let group: Vec<&EpisodeResult> =
            results.iter().filter(|r| r.category == category && r.level == level).collect();
        if group.is_empty() {
            continue;
        }
        let successes = group.iter().filter(|r| r.success).count();
        let mut values: Vec<f64> =
            group.iter().filter(|r| r.success || include_failed).map(|r| r.mpjpe_mm).collect();
        values.sort_by(f64::total_cmp);
        let mpjpe_mm = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
        rows.push(StratumRow {
            category,
            level,
            sr_percent: 100.0 * successes as f64 / group.len() as f64,
            mpjpe_mm,
            episodes: group.len(),
            successes,
        });
    }
    BenchReport { method: method.to_string(), rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
    RadarCsv,
}

impl FromStr for ReportFormat {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "radar-csv" | "radar" => Ok(ReportFormat::RadarCsv),
            other => Err(BenchError::Usage(format!(
                "unknown report format `{other}` (expected csv, json, markdown or radar-csv)"
            ))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "markdown",
            ReportFormat::RadarCsv => "radar-csv",
        })
    }
}

pub const REPORT_CSV_HEADER: &str = "category,level,sr_percent,mpjpe_mm,episodes,successes,method";

fn format_sr(sr: f64) -> String {
    if sr.fract() == 0.0 {
        format!("{sr:.0}")
    } else {
        format!("{sr:.1}")
    }
}

fn markdown_table(out: &mut String, title: &str, report: &BenchReport, categories: &[Category]) {
    out.push_str(&format!("### {title}\n\n| Stratum | SR (%) | MPJPE (mm) |\n|---|---|---|\n"));
    for &c in categories {
        for &l in c.levels() {
            let label = format!("{} {}", c.display_name(), l.display_name());
            match report.row(c, l) {
                Some(r) => {
                    let mpjpe = r.mpjpe_mm.map(|m| format!("{m:.1}")).unwrap_or_else(|| "n/a".into());
                    out.push_str(&format!("| {label} | {} | {mpjpe} |\n", format_sr(r.sr_percent)));
                }
                None => out.push_str(&format!("| {label} | n/a | n/a |\n")),
            }
        }
    }
}

/// Renders a report. csv and json carry full precision and parse back
/// losslessly; markdown and radar-csv round MPJPE to one decimal.
pub fn emit_report(report: &BenchReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = format!("{REPORT_CSV_HEADER}\n");
            for r in &report.rows {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.category.as_str(),
                    r.level.as_str(),
                    r.sr_percent,
                    r.mpjpe_mm.map(|m| m.to_string()).unwrap_or_default(),
                    r.episodes,
                    r.successes,
                    csv_field(&report.method)
                ));
            }
            s
        }
        ReportFormat::Markdown => {
            let mut s = format!("## {}\n\n", report.method);
            if report.is_partial() {
                s.push_str(&format!(
                    "Partial report: {} of {} strata present.\n\n",
                    report.rows.len().min(BenchReport::STRATA),
                    BenchReport::STRATA
                ));
            }
            markdown_table(
                &mut s,
                "Locomotion and manipulation (workspace height)",
                report,
                &[Category::LocoManip, Category::Manip, Category::Squat],
            );
            s.push('\n');
            markdown_table(
                &mut s,
                "Agile motion (dynamic intensity; height for Jump)",
                report,
                &[Category::Walk, Category::Run, Category::Jump],
            );
            s
        }
        ReportFormat::RadarCsv => report
            .rows
            .iter()
            .filter_map(|r| r.mpjpe_mm.map(|m| format!("{},{m:.1}\n", r.radar_label())))
            .collect(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Parses csv or json output of [`emit_report`].
pub fn parse_report(text: &str, format: ReportFormat) -> Result<BenchReport> {
    match format {
        ReportFormat::Json => serde_json::from_str(text).map_err(|e| BenchError::Parse(e.to_string())),
        ReportFormat::Csv => {
            let mut reader = csv::Reader::from_reader(text.as_bytes());
            let headers = reader.headers().map_err(|e| BenchError::Parse(e.to_string()))?.clone();
            if headers.iter().collect::<Vec<_>>().join(",") != REPORT_CSV_HEADER {
                return Err(BenchError::Parse(format!("unexpected header `{}`", headers.iter().collect::<Vec<_>>().join(","))));
            }
            let mut method = String::new();
            let mut rows = Vec::new();
            for (i, rec) in reader.records().enumerate() {
                let rec = rec.map_err(|e| BenchError::Parse(e.to_string()))?;
                let field = |j: usize| rec.get(j).unwrap_or("");
                let err = |what: &str| BenchError::Parse(format!("row {}: bad {what}", i + 1));
                let mpjpe = field(3);
                rows.push(StratumRow {
                    category: field(0).parse().map_err(|_| err("category"))?,
                    level: field(1).parse().map_err(|_| err("level"))?,
                    sr_percent: field(2).parse().map_err(|_| err("sr_percent"))?,
                    mpjpe_mm: if mpjpe.is_empty() { None } else { Some(mpjpe.parse().map_err(|_| err("mpjpe_mm"))?) },
                    episodes: field(4).parse().map_err(|_| err("episodes"))?,
                    successes: field(5).parse().map_err(|_| err("successes"))?,
                });
                method = field(6).to_string();
            }
            Ok(BenchReport { method, rows })
        }
        other => Err(BenchError::Usage(format!("{other} output cannot be parsed back"))),
    }
}

/// Closed-form MPJPE of a tracker lagging `k` frames behind a rigid body
/// translating at `speed` m/s, ignoring the first `k` warm-up frames.
pub fn lag_mpjpe_mm(speed: f64, k: usize, fps: f64) -> f64 {
    1000.0 * speed * k as f64 / fps
}

/// Planar root speed used for a stratum of the synthetic suite. Walk and
/// run use the evaluation corpus means; the others drift slowly.
pub fn stratum_speed(category: Category, level: Level) -> f64 {
    use Category::*;
    use Level::*;
    match (category, level) {
        (Walk, Slow) => 1.026,
        (Walk, MediumSpeed) => 1.364,
        (Walk, Fast) => 1.584,
        (Run, Slow) => 1.932,
        (Run, MediumSpeed) => 2.386,
        (Run, Fast) => 2.956,
        (LocoManip, High) => 0.5,
        (LocoManip, Medium) => 0.45,
        (LocoManip, Low) => 0.4,
        (Manip, _) => 0.1,
        (Squat, _) => 0.2,
        (Jump, High) => 1.0,
        (Jump, Medium) => 0.9,
        (Jump, Low) => 0.8,
        _ => 0.0,
    }
}

/// Root height used for a stratum of the synthetic suite.
pub fn stratum_root_height(category: Category, level: Level) -> f64 {
    match (category, level) {
        (Category::Squat, Level::High) => 0.690,
        (Category::Squat, Level::Medium) => 0.627,
        (Category::Squat, Level::Low) => 0.610,
        (Category::Jump, _) => 0.783,
        _ => 0.79,
    }
}

/// Constant-velocity clips for every stratum: the model's zero pose
/// translating along a seeded heading at [`stratum_speed`].
pub fn synthetic_suite(
    model: &HumanoidModel,
    clips_per_stratum: usize,
    frames: usize,
    fps: f64,
    seed: u64,
) -> Vec<MotionClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(18 * clips_per_stratum);
    for (category, level) in strata() {
        let speed = stratum_speed(category, level);
        let z = stratum_root_height(category, level);
        for i in 0..clips_per_stratum {
            let heading: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let (x0, y0): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let dir = Vector3::new(heading.cos(), heading.sin(), 0.0);
            let name = format!("{}_{}_{i:02}", category.as_str(), level.as_str());
            let mut clip = MotionClip::for_model(&name, fps, category, level, model);
            clip.frames = (0..frames)
                .map(|f| {
                    let t = f as f64 / fps;
                    let p = Vector3::new(x0, y0, z) + dir * (speed * t);
                    let mut frame = Frame::new(t, RigidPose::from_xyz_yaw(p.x, p.y, p.z, heading), model.zero_configuration());
                    frame.root_lin_vel = dir * speed;
                    frame.joint_vel = Some(vec![0.0; model.dof()]);
                    frame
                })
                .collect();
            out.push(clip);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub category: Category,
    pub level: Level,
}

/// Pinned clip list; relative paths resolve against the manifest's folder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchManifest {
    pub clips: Vec<ManifestEntry>,
}

impl BenchManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| BenchError::Parse(format!("manifest: {e}")))
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Loads every clip, stamping it with the manifest's category and level.
    pub fn load_clips(&self, base: &Path) -> Result<Vec<MotionClip>> {
        self.clips
            .iter()
            .map(|e| {
                let path = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
                let mut clip = load_clip(&path)?;
                if (clip.category, clip.level) != (e.category, e.level) {
                    log::warn!("{}: manifest stratum overrides clip labels", path.display());
                }
                clip.category = e.category;
                clip.level = e.level;
                Ok(clip)
            })
            .collect()
    }
}

/// Contents of a `bench run` results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResults {
    pub method: String,
    pub options: EvalOptions,
    pub episodes: Vec<EpisodeResult>,
}

impl BenchResults {
    pub fn report(&self) -> BenchReport {
        aggregate(&self.method, &self.episodes, self.options.include_failed)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("results serialize");
        s.push('\n');
        s
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| BenchError::Parse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simtrack::TrackerMode;

    fn episode(category: Category, level: Level, success: bool, mpjpe_mm: f64) -> EpisodeResult {
        EpisodeResult {
            clip: "c".into(),
            category,
            level,
            success,
            failure_reason: if success { FailureReason::None } else { FailureReason::Deviation },
            failure_frame: None,
            mpjpe_mm,
            per_frame_error_mm: vec![mpjpe_mm],
            frames_evaluated: 1,
        }
    }

    #[test]
    fn mpjpe_basics() {
        let a = vec![vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)]; 3];
        assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
        let b: Vec<Vec<Vector3<f64>>> =
            a.iter().map(|f| f.iter().map(|p| p + Vector3::new(0.0, 0.01, 0.0)).collect()).collect();
        assert!((mpjpe(&b, &a).unwrap() - 10.0).abs() < 1e-9);
        assert!(mpjpe(&a[..2], &a).is_err());
    }

    #[test]
    fn failure_cases() {
        let th = Thresholds::default();
        let root = RigidPose::from_translation(Vector3::new(0.0, 0.0, 0.79));
        let bodies = vec![Vector3::new(0.0, 0.0, 1.0)];
        assert_eq!(check_failure(&root, &bodies, &root, &bodies, &th), FailureReason::None);
        let moved = vec![Vector3::new(0.6, 0.0, 1.0)];
        assert_eq!(check_failure(&root, &moved, &root, &bodies, &th), FailureReason::Deviation);
        let low = RigidPose::from_translation(Vector3::new(0.0, 0.0, 0.25));
        let squat = RigidPose::from_translation(Vector3::new(0.0, 0.0, 0.26));
        assert_eq!(check_failure(&low, &bodies, &squat, &bodies, &th), FailureReason::None);
        assert_eq!(check_failure(&low, &bodies, &root, &bodies, &th), FailureReason::Fall);
        let far = RigidPose::from_translation(Vector3::new(1.2, 0.0, 0.79));
        assert_eq!(check_failure(&far, &bodies, &root, &bodies, &th), FailureReason::Deviation);
    }

    #[test]
    fn frozen_tracker_fails_on_walk() {
        let model = HumanoidModel::reference();
        let mut clip = synthetic_suite(&model, 1, 31, 30.0, 1).into_iter().find(|c| c.category == Category::Walk).unwrap();
        for (i, f) in clip.frames.iter_mut().enumerate() {
            f.root.position.x = 1.2 * i as f64 / 30.0;
            f.root.position.y = 0.0;
            f.root.orientation = UnitQuaternion::identity();
        }
        let tracker = OracleTracker::new(TrackerMode::Frozen, 0).unwrap();
        let r = run_episode(&tracker, &clip, &model, &EvalOptions::default()).unwrap();
        assert!(!r.success);
        assert_eq!(r.failure_reason, FailureReason::Deviation);
        // 1.2 m/s crosses 0.5 m between frames 12 (0.48 m) and 13 (0.52 m).
        assert_eq!(r.failure_frame, Some(13));
        assert_eq!(r.frames_evaluated, 14);
    }

    #[test]
    fn perfect_tracker_is_exact() {
        let model = HumanoidModel::reference();
        let clips = synthetic_suite(&model, 1, 20, 30.0, 2);
        let tracker = OracleTracker::new(TrackerMode::Perfect, 0).unwrap();
        let results = run_suite(&tracker, &clips, &model, &EvalOptions::default()).unwrap();
        assert_eq!(results.len(), 18);
        assert!(results.iter().all(|r| r.success && r.mpjpe_mm == 0.0));
        let report = aggregate("perfect", &results, false);
        assert_eq!(report.rows.len(), 18);
        assert!(!report.is_partial());
    }

    #[test]
    fn aggregation_rules() {
        let mut eps: Vec<EpisodeResult> = (0..19).map(|i| episode(Category::Manip, Level::Medium, true, 20.0 + (i as f64 - 9.0) * 0.1)).collect();
        eps.push(episode(Category::Manip, Level::Medium, false, 500.0));
        let r = aggregate("m", &eps, false);
        let row = r.row(Category::Manip, Level::Medium).unwrap();
        assert_eq!(row.sr_percent, 95.0);
        assert!((row.mpjpe_mm.unwrap() - 20.0).abs() < 1e-12);
        assert!(r.is_partial());
        assert_eq!(r.missing_strata().len(), 17);
        let mut shuffled = eps.clone();
        shuffled.reverse();
        assert_eq!(aggregate("m", &shuffled, false), r);
    }

    #[test]
    fn report_formats() {
        let eps = vec![
            episode(Category::Manip, Level::Medium, true, 20.1),
            episode(Category::Manip, Level::Medium, true, 20.7),
            episode(Category::LocoManip, Level::Low, false, 1.0),
        ];
        let r = aggregate("OmniClone", &eps, false);
        let md = emit_report(&r, ReportFormat::Markdown);
        assert!(md.contains("| Manip Medium | 100 | 20.4 |"));
        assert!(md.contains("| Loco-Manip Low | 0 | n/a |"));
        assert!(md.contains("| Walk Fast | n/a | n/a |"));
        assert_eq!(emit_report(&r, ReportFormat::RadarCsv), "manip_medium,20.4\n");
        for f in [ReportFormat::Csv, ReportFormat::Json] {
            assert_eq!(parse_report(&emit_report(&r, f), f).unwrap(), r);
        }
        assert!(matches!("html".parse::<ReportFormat>(), Err(BenchError::Usage(_))));
    }
}
