//! `omniclone` command-line front end.
//!
//! Usage errors (bad flags, unknown subcommands) exit with status 2 via
//! clap; configuration and runtime errors exit with status 1.

mod net;

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use omniclone_core::bench::{
    emit_report, run_suite, synthetic_suite, BenchManifest, BenchResults, EvalOptions, ManifestEntry, MpjpeMode,
    ReportFormat, Thresholds,
};
use omniclone_core::kinematics::HumanoidModel;
use omniclone_core::motion::{clip_stats, compose_recipe, load_clip, save_clip, stats_to_csv, Level, MotionClip};
use omniclone_core::retarget::{calibrate, retarget_clip, MarkerMapping, SubjectClip, SubjectFrame};
use omniclone_core::simtrack::{student_layout, teacher_layout, OracleTracker, SimConfig, TrackerMode};
use omniclone_core::stream::DEFAULT_WINDOW;

#[derive(Debug, Parser)]
#[command(name = "omniclone", version, about = "Humanoid teleoperation, streaming and tracking-benchmark toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every subcommand. Verbosity comes from `OMNICLONE_LOG`.
#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Humanoid model file (JSON); the built-in reference model when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Policy configuration file (JSON) with reward, randomization and observation settings.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every pseudo-random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Retarget a raw capture recording onto the humanoid.
    Retarget(RetargetArgs),
    /// Stream a humanoid clip to a policy server over UDP.
    Relay(net::RelayArgs),
    /// Receive a reference stream and run a tracker at a fixed rate.
    ServePolicy(net::ServeArgs),
    /// Fault-injected loopback latency and continuity measurements, as CSV.
    StreamTest(net::StreamTestArgs),
    /// Tracking benchmark: run episodes, build reports, generate suites.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Per category/level speed and height statistics of a clip set, as CSV.
    Stats(StatsArgs),
    /// Compose a training-data recipe from labelled clip pools.
    Recipe(RecipeArgs),
    /// Execute recorded action chunks and optionally stream the commands.
    VlaReplay(net::VlaReplayArgs),
    /// Print the teacher and student observation layouts as CSV.
    PrintLayout(LayoutArgs),
}

#[derive(Debug, Args)]
pub struct RetargetArgs {
    /// Calibration frame file (JSON subject frame in the reference pose).
    #[arg(long, value_name = "FILE")]
    pub calibration: PathBuf,
    /// Two-column marker-to-key-body mapping table.
    #[arg(long, value_name = "FILE")]
    pub mapping: PathBuf,
    /// Raw capture recording (JSON).
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Output humanoid clip.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Evaluate a tracker on every clip of a manifest.
    Run(BenchRunArgs),
    /// Aggregate a results file into a stratified report.
    Report(BenchReportArgs),
    /// Write a synthetic constant-velocity suite and its manifest.
    MakeSuite(MakeSuiteArgs),
}

#[derive(Debug, Args)]
pub struct BenchRunArgs {
    /// Manifest listing clip paths with category and level.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Tracker: perfect, lag:K, noise:SIGMA, pd:KP,KD,DT or frozen.
    #[arg(long, default_value = "perfect")]
    pub tracker: String,
    /// Results file to write.
    #[arg(long, value_name = "FILE", default_value = "results.json")]
    pub out: PathBuf,
    /// Method label stored with the results; defaults to the tracker spec.
    #[arg(long)]
    pub method: Option<String>,
    /// MPJPE convention: global or root-relative.
    #[arg(long, default_value = "global")]
    pub mpjpe: MpjpeMode,
    /// Average failed episodes into the stratum MPJPE.
    #[arg(long)]
    pub include_failed: bool,
    /// Failure thresholds file (JSON); flags below take precedence.
    #[arg(long, value_name = "FILE")]
    pub thresholds: Option<PathBuf>,
    /// Key-body deviation that ends an episode (m).
    #[arg(long, value_name = "M")]
    pub deviation_m: Option<f64>,
    /// Root height under which the robot counts as fallen (m).
    #[arg(long, value_name = "M")]
    pub fall_height_m: Option<f64>,
    /// Planar root drift that ends an episode (m).
    #[arg(long, value_name = "M")]
    pub drift_m: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchReportArgs {
    /// Results file written by `bench run`.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Output format: markdown, csv, json or radar-csv.
    #[arg(long, default_value = "markdown")]
    pub format: ReportFormat,
    /// Write here instead of standard output.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Emit the report even when some strata have no episodes.
    #[arg(long)]
    pub allow_partial: bool,
}

#[derive(Debug, Args)]
pub struct MakeSuiteArgs {
    /// Directory receiving manifest.json and a clips/ folder.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Clips per stratum.
    #[arg(long, default_value_t = 10)]
    pub per_stratum: usize,
    /// Frames per clip.
    #[arg(long, default_value_t = 90)]
    pub frames: usize,
    /// Clip frame rate.
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Clip files or directories of clips.
    #[arg(long = "in", value_name = "PATH", required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Grouping: `category,level` or `category`.
    #[arg(long, default_value = "category,level")]
    pub group_by: String,
    /// Output format: csv or table.
    #[arg(long, default_value = "csv")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct RecipeArgs {
    /// Labelled pool as LABEL=PATH, where PATH is a clip file or a directory of clips.
    #[arg(long = "pool", value_name = "LABEL=PATH", required = true)]
    pub pools: Vec<String>,
    /// Target share of a label as LABEL=FRACTION.
    #[arg(long = "fraction", value_name = "LABEL=FRACTION", required = true)]
    pub fractions: Vec<String>,
    /// Number of clips to select.
    #[arg(long)]
    pub total: usize,
    /// Output format: json or csv.
    #[arg(long, default_value = "json")]
    pub format: String,
    /// Write here instead of standard output.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LayoutArgs {
    /// Student history window length.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub f: usize,
    /// Which layout: teacher, student or both.
    #[arg(long, default_value = "both")]
    pub policy: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OMNICLONE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Retarget(a) => cmd_retarget(g, a),
        Command::Relay(a) => net::relay(g, a),
        Command::ServePolicy(a) => net::serve_policy(g, a),
        Command::StreamTest(a) => net::stream_test(g, a),
        Command::Bench(BenchCommand::Run(a)) => cmd_bench_run(g, a),
        Command::Bench(BenchCommand::Report(a)) => cmd_bench_report(a),
        Command::Bench(BenchCommand::MakeSuite(a)) => cmd_make_suite(g, a),
        Command::Stats(a) => cmd_stats(g, a),
        Command::Recipe(a) => cmd_recipe(g, a),
        Command::VlaReplay(a) => net::vla_replay(g, a),
        Command::PrintLayout(a) => cmd_print_layout(g, a),
    }
}

pub fn load_model(g: &GlobalOpts) -> Result<HumanoidModel> {
    match &g.model {
        Some(p) => HumanoidModel::load(p).with_context(|| format!("loading model {}", p.display())),
        None => Ok(HumanoidModel::reference()),
    }
}

fn load_config(g: &GlobalOpts) -> Result<SimConfig> {
    match &g.config {
        Some(p) => SimConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(SimConfig::default()),
    }
}

pub fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// `path` itself, or the sorted `*.json` files directly inside it.
fn clip_paths(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        if !path.exists() {
            bail!("{} does not exist", path.display());
        }
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    out.sort();
    Ok(out)
}

fn split_pair(s: &str) -> Result<(&str, &str)> {
    s.split_once('=').with_context(|| format!("expected LABEL=VALUE, got `{s}`"))
}

fn cmd_retarget(g: &GlobalOpts, a: &RetargetArgs) -> Result<()> {
    let model = load_model(g)?;
    let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let calibration = SubjectFrame::from_json_str(&read(&a.calibration)?)?;
    let mapping = MarkerMapping::load(&a.mapping, &model)?;
    let raw = SubjectClip::from_json_str(&read(&a.input)?)?;
    let cal = calibrate(&calibration, &model, &mapping)?;
    let (clip, held) = retarget_clip(&raw, &cal)?;
    save_clip(&clip, &a.out)?;
    println!("frames,held,scale");
    println!("{},{},{}", clip.frames.len(), held, cal.scale);
    Ok(())
}

fn cmd_bench_run(g: &GlobalOpts, a: &BenchRunArgs) -> Result<()> {
    let model = load_model(g)?;
    let mode: TrackerMode = a.tracker.parse()?;
    let mut thresholds = match &a.thresholds {
        Some(p) => serde_json::from_str::<Thresholds>(&std::fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => Thresholds::default(),
    };
    if let Some(v) = a.deviation_m {
        thresholds.deviation_m = v;
    }
    if let Some(v) = a.fall_height_m {
        thresholds.fall_root_z_m = v;
    }
    if let Some(v) = a.drift_m {
        thresholds.root_drift_m = v;
    }
    thresholds.validate()?;
    let manifest = BenchManifest::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let clips = manifest.load_clips(base)?;
    let tracker = OracleTracker::new(mode, g.seed)?;
    let options = EvalOptions { thresholds, mpjpe_mode: a.mpjpe, include_failed: a.include_failed };
    let episodes = run_suite(&tracker, &clips, &model, &options)?;
    let results = BenchResults { method: a.method.clone().unwrap_or_else(|| mode.to_string()), options, episodes };
    std::fs::write(&a.out, results.to_json_string()).with_context(|| format!("writing {}", a.out.display()))?;
    let successes = results.episodes.iter().filter(|e| e.success).count();
    println!("episodes,successes,results");
    println!("{},{},{}", results.episodes.len(), successes, a.out.display());
    Ok(())
}

fn cmd_bench_report(a: &BenchReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report = BenchResults::from_json_str(&text)?.report();
    let missing = report.missing_strata();
    if !missing.is_empty() {
        let names: Vec<String> = missing.iter().map(|(c, l)| format!("{c}/{l}")).collect();
        if !a.allow_partial {
            bail!("{} strata have no episodes: {}", names.len(), names.join(", "));
        }
        log::warn!("partial report, missing {}", names.join(", "));
    }
    write_output(a.out.as_deref(), &emit_report(&report, a.format))
}

fn cmd_make_suite(g: &GlobalOpts, a: &MakeSuiteArgs) -> Result<()> {
    let model = load_model(g)?;
    if a.frames == 0 || !(a.fps.is_finite() && a.fps > 0.0) {
        bail!("frames and fps must be positive");
    }
    std::fs::create_dir_all(a.out_dir.join("clips"))?;
    let mut entries = Vec::new();
    for clip in synthetic_suite(&model, a.per_stratum, a.frames, a.fps, g.seed) {
        let file = PathBuf::from("clips").join(format!("{}.json", clip.name));
        save_clip(&clip, a.out_dir.join(&file))?;
        entries.push(ManifestEntry { path: file, category: clip.category, level: clip.level });
    }
    let manifest = a.out_dir.join("manifest.json");
    std::fs::write(&manifest, BenchManifest { clips: entries }.to_json_string())?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_stats(g: &GlobalOpts, a: &StatsArgs) -> Result<()> {
    let model = load_model(g)?;
    let by_level = match a.group_by.replace(' ', "").as_str() {
        "category,level" => true,
        "category" => false,
        other => bail!("unsupported --group-by `{other}`; use `category,level` or `category`"),
    };
    let mut clips: Vec<MotionClip> = Vec::new();
    for p in &a.input {
        for f in clip_paths(p)? {
            let mut clip = load_clip(&f).with_context(|| format!("loading {}", f.display()))?;
            if !by_level {
                clip.level = Level::None;
            }
            clips.push(clip);
        }
    }
    let rows = clip_stats(&clips, &model)?;
    let text = match a.format.as_str() {
        "csv" => stats_to_csv(&rows),
        "table" => {
            let mut s = String::from("group | metric | min P5 | max P95 | mean\n");
            for r in &rows {
                s.push_str(&format!(
                    "{} | {} | {:.3} | {:.3} | {:.3}\n",
                    if r.level == Level::None { r.category.display_name().to_string() } else { r.label() },
                    r.metric.as_str(),
                    r.min,
                    r.max,
                    r.mean
                ));
            }
            s
        }
        other => bail!("unsupported --format `{other}`; use csv or table"),
    };
    write_output(None, &text)
}

fn cmd_recipe(g: &GlobalOpts, a: &RecipeArgs) -> Result<()> {
    let mut pools: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for p in &a.pools {
        let (label, path) = split_pair(p)?;
        let clips = clip_paths(Path::new(path))?;
        pools.entry(label.to_string()).or_default().extend(clips.iter().map(|c| c.display().to_string()));
    }
    let mut fractions = BTreeMap::new();
    for f in &a.fractions {
        let (label, value) = split_pair(f)?;
        let v: f64 = value.parse().with_context(|| format!("fraction `{value}` is not a number"))?;
        fractions.insert(label.to_string(), v);
    }
    let manifest = compose_recipe(&pools, &fractions, a.total, g.seed)?;
    if !manifest.wrapped.is_empty() {
        log::warn!("pools sampled with replacement: {}", manifest.wrapped.join(", "));
    }
    let text = match a.format.as_str() {
        "json" => serde_json::to_string_pretty(&manifest)? + "\n",
        "csv" => manifest.to_csv(),
        other => bail!("unsupported --format `{other}`; use json or csv"),
    };
    write_output(a.out.as_deref(), &text)
}

fn cmd_print_layout(g: &GlobalOpts, a: &LayoutArgs) -> Result<()> {
    let model = load_model(g)?;
    let cfg = load_config(g)?;
    if a.f == 0 {
        bail!("--f must be at least 1");
    }
    let (n, k) = (model.dof(), model.key_bodies().len());
    let layouts = match a.policy.as_str() {
        "teacher" => vec![("teacher", teacher_layout(n, k, &cfg.observation))],
        "student" => vec![("student", student_layout(n, k, a.f))],
        "both" => vec![
            ("teacher", teacher_layout(n, k, &cfg.observation)),
            ("student", student_layout(n, k, a.f)),
        ],
        other => bail!("unsupported --policy `{other}`; use teacher, student or both"),
    };
    let mut s = String::from("policy,name,offset,length\n");
    for (policy, layout) in &layouts {
        for e in &layout.entries {
            s.push_str(&format!("{policy},{},{},{}\n", e.name, e.offset, e.len));
        }
        s.push_str(&format!("{policy},total,0,{}\n", layout.total_len()));
    }
    write_output(None, &s)
}

/// Reads all of standard input.
pub fn read_stdin() -> Result<String> {
    let mut s = String::new();
    std::io::stdin().read_to_string(&mut s)?;
    Ok(s)
}
