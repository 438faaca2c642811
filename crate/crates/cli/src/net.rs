//! Networked subcommands: relay, policy server, stream fault tests and
//! action-chunk replay.

use std::collections::VecDeque;
use std::io::Write;
use std::net::{SocketAddr, UdpSocket};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::Args;
use omniclone_core::kinematics::{HumanoidModel, RigidPose};
use omniclone_core::motion::{load_clip, resample, save_clip, Frame, MotionClip};
use omniclone_core::simtrack::{pd_step, TrackerMode};
use omniclone_core::stream::{
    encode_packet, fixed_rate_loop, measure_latency, now_us, simulate_continuity, spawn_receiver, ContinuityConfig,
    FaultConfig, FaultySender, FrameQueue, JitterDist, LatencyStats, LoopStats, RateLoopHandle, StreamPacket, WireFrame, DEFAULT_RATE_HZ,
    DEFAULT_WINDOW,
};
use omniclone_core::vlabridge::{
    execute_chunks, execute_realtime, joints_to_command, trace_to_clip, ExecutedStep, ExecutionTrace,
    RealtimeConfig, ScriptedPlanner, DEFAULT_EXECUTE_LEN,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{load_model, read_stdin, write_output, GlobalOpts};

/// Link perturbation flags shared by the sending commands.
#[derive(Debug, Clone, Args)]
pub struct FaultArgs {
    /// Probability of dropping a datagram.
    #[arg(long, default_value_t = 0.0)]
    pub drop: f64,
    /// Delay model: none, const:MS or uniform:LO:HI (milliseconds).
    #[arg(long, default_value = "none")]
    pub jitter: String,
    /// Probability of delaying a datagram past its successors.
    #[arg(long, default_value_t = 0.0)]
    pub reorder: f64,
    /// Probability of sending a datagram twice.
    #[arg(long, default_value_t = 0.0)]
    pub duplicate: f64,
}

impl FaultArgs {
    fn config(&self) -> Result<FaultConfig> {
        let parts: Vec<&str> = self.jitter.split(':').collect();
        let num = |s: &str| s.parse::<f64>().with_context(|| format!("bad jitter value `{s}`"));
        let jitter = match parts[..] {
            ["none"] => JitterDist::None,
            ["const", ms] => JitterDist::Constant { ms: num(ms)? },
            ["uniform", lo, hi] => JitterDist::Uniform { lo_ms: num(lo)?, hi_ms: num(hi)? },
            _ => bail!("unsupported --jitter `{}`; use none, const:MS or uniform:LO:HI", self.jitter),
        };
        let cfg = FaultConfig {
            drop_prob: self.drop,
            jitter,
            reorder_prob: self.reorder,
            duplicate_prob: self.duplicate,
            ..FaultConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct RelayArgs {
    /// Local address the relay sends from.
    #[arg(long, value_name = "ADDR:PORT", default_value = "0.0.0.0:0")]
    pub listen: SocketAddr,
    /// Policy server address.
    #[arg(long, value_name = "ADDR:PORT")]
    pub forward: SocketAddr,
    /// Humanoid clip to stream.
    #[arg(long, value_name = "FILE", conflicts_with = "stdin", required_unless_present = "stdin")]
    pub clip: Option<PathBuf>,
    /// Read the clip from standard input instead.
    #[arg(long)]
    pub stdin: bool,
    /// Send rate; the clip is resampled when its frame rate differs.
    #[arg(long, default_value_t = DEFAULT_RATE_HZ)]
    pub rate: f64,
    #[command(flatten)]
    pub fault: FaultArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Address to receive the reference stream on.
    #[arg(long, value_name = "ADDR:PORT")]
    pub listen: SocketAddr,
    /// Tracker: oracle, lag:K, noise:SIGMA, pd:KP,KD,DT or frozen.
    #[arg(long, default_value = "oracle")]
    pub tracker: String,
    /// Control rate.
    #[arg(long, default_value_t = DEFAULT_RATE_HZ)]
    pub rate: f64,
    /// Queue depth (future-window length).
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Stop after this many control ticks; runs until interrupted otherwise.
    #[arg(long)]
    pub ticks: Option<u64>,
    /// Per-tick command log (CSV).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StreamTestArgs {
    /// latency: timed loopback heartbeats; continuity: seeded discrete-event replay.
    #[arg(long, default_value = "latency")]
    pub mode: String,
    /// Heartbeats (latency) or packets (continuity).
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Gap between heartbeats in milliseconds.
    #[arg(long, default_value_t = 5.0)]
    pub interval_ms: f64,
    /// Producer and consumer rate for continuity mode.
    #[arg(long, default_value_t = DEFAULT_RATE_HZ)]
    pub rate: f64,
    /// Queue depth for continuity mode.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    #[command(flatten)]
    pub fault: FaultArgs,
}

#[derive(Debug, Args)]
pub struct VlaReplayArgs {
    /// Recorded chunk file (JSON with a `chunks` list).
    #[arg(long, value_name = "FILE")]
    pub chunks: PathBuf,
    /// Actions executed from each chunk before re-planning.
    #[arg(long, default_value_t = DEFAULT_EXECUTE_LEN)]
    pub execute_len: usize,
    /// Control rate.
    #[arg(long, default_value_t = DEFAULT_RATE_HZ)]
    pub rate: f64,
    /// Stream command frames to this address.
    #[arg(long, value_name = "ADDR:PORT")]
    pub forward: Option<SocketAddr>,
    /// Ticks to execute; defaults to chunks times execute length.
    #[arg(long)]
    pub ticks: Option<u64>,
    /// Run the planner on its own thread against the wall clock.
    #[arg(long)]
    pub realtime: bool,
    /// Root height of the command frames (m).
    #[arg(long, default_value_t = 0.79)]
    pub root_height: f64,
    /// Write the executed commands as a clip.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Installs an interrupt handler that raises `flag`.
fn stop_on_interrupt(flag: Arc<AtomicBool>) {
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("no interrupt handler: {e}");
    }
}

fn check_rate(rate: f64) -> Result<Duration> {
    if !(rate.is_finite() && rate > 0.0) {
        bail!("rate must be positive, got {rate}");
    }
    Ok(Duration::from_secs_f64(1.0 / rate))
}

pub fn relay(g: &GlobalOpts, a: &RelayArgs) -> Result<()> {
    let model = load_model(g)?;
    let period = check_rate(a.rate)?;
    let mut clip = match &a.clip {
        Some(p) => load_clip(p).with_context(|| format!("loading {}", p.display()))?,
        None => MotionClip::from_json_str(&read_stdin()?)?,
    };
    if (clip.fps - a.rate).abs() > 1e-9 {
        clip = resample(&clip, a.rate)?;
    }
    let frames: Vec<WireFrame> =
        clip.frames.iter().map(|f| WireFrame::from_frame(f, &model)).collect::<Result<_, _>>()?;
    let socket = UdpSocket::bind(a.listen).with_context(|| format!("binding {}", a.listen))?;
    let mut sender = FaultySender::new(socket, a.forward, a.fault.config()?, g.seed)?;
    let stop = Arc::new(AtomicBool::new(false));
    stop_on_interrupt(stop.clone());
    let start = Instant::now();
    let mut sent = 0u32;
    for (i, frame) in frames.into_iter().enumerate() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let packet = StreamPacket::frames(i as u32, now_us(), vec![frame])?;
        sender.send(&encode_packet(&packet)?);
        sent += 1;
        if let Some(wait) = (start + period.mul_f64((i + 1) as f64)).checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
    let delivered = sender.finish();
    println!("frames,datagrams_sent");
    println!("{sent},{delivered}");
    Ok(())
}

/// Per-tick tracker driven by streamed reference frames.
struct OnlineTracker {
    mode: TrackerMode,
    history: VecDeque<Frame>,
    first: Option<Frame>,
    rng: ChaCha8Rng,
    pd: Option<(Vec<f64>, Vec<f64>)>,
}

impl OnlineTracker {
    fn new(mode: TrackerMode, seed: u64) -> Result<Self> {
        mode.validate()?;
        Ok(Self { mode, history: VecDeque::new(), first: None, rng: ChaCha8Rng::seed_from_u64(seed), pd: None })
    }

    fn command(&mut self, reference: &Frame) -> Result<Frame> {
        let first = self.first.get_or_insert_with(|| reference.clone());
        Ok(match self.mode {
            TrackerMode::Perfect => reference.clone(),
            TrackerMode::Frozen => Frame { t: reference.t, ..first.clone() },
            TrackerMode::Lag(k) => {
                self.history.push_back(reference.clone());
                while self.history.len() > k + 1 {
                    self.history.pop_front();
                }
                Frame { t: reference.t, ..self.history[0].clone() }
            }
            TrackerMode::Noise(sigma) => {
                let normal = Normal::new(0.0, sigma)?;
                let mut out = reference.clone();
                out.joint_pos.iter_mut().for_each(|q| *q += normal.sample(&mut self.rng));
                out.body_pos = None;
                out.body_quat = None;
                out
            }
            TrackerMode::Pd { kp, kd, dt } => {
                let (q, qd) = self
                    .pd
                    .get_or_insert_with(|| (reference.joint_pos.clone(), vec![0.0; reference.joint_pos.len()]));
                pd_step(q, qd, &reference.joint_pos, kp, kd, dt);
                let mut out = reference.clone();
                out.joint_pos = q.clone();
                out.body_pos = None;
                out.body_quat = None;
                out
            }
        })
    }
}

pub fn serve_policy(g: &GlobalOpts, a: &ServeArgs) -> Result<()> {
    let model = Arc::new(load_model(g)?);
    let mode: TrackerMode = a.tracker.parse()?;
    check_rate(a.rate)?;
    let mut tracker = OnlineTracker::new(mode, g.seed)?;
    let queue = Arc::new(FrameQueue::<WireFrame>::new(a.window)?);
    let socket = UdpSocket::bind(a.listen).with_context(|| format!("binding {}", a.listen))?;
    log::info!("serving on {}", socket.local_addr()?);
    let stop = Arc::new(AtomicBool::new(false));
    let receiver = spawn_receiver(socket, queue.clone(), stop.clone())?;
    let log_file: Option<Arc<Mutex<std::io::BufWriter<std::fs::File>>>> = match &a.out {
        Some(p) => {
            let mut w = std::io::BufWriter::new(
                std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
            );
            writeln!(w, "tick,seq,held,root_x,root_y,root_z")?;
            Some(Arc::new(Mutex::new(w)))
        }
        None => None,
    };
    let sink_log = log_file.clone();
    let dt = 1.0 / a.rate;
    let errors = Arc::new(Mutex::new(Vec::<String>::new()));
    let sink_errors = errors.clone();
    let handle = fixed_rate_loop(queue, a.rate, a.ticks, move |tick, out| {
        let Ok(e) = out else { return };
        let command = e
            .item
            .to_frame(tick as f64 * dt, &model)
            .map_err(anyhow::Error::from)
            .and_then(|f| tracker.command(&f));
        match command {
            Ok(c) => {
                if let Some(w) = &sink_log {
                    let p = c.root.position;
                    let mut w = w.lock().expect("log lock");
                    let _ = writeln!(w, "{tick},{},{},{:.6},{:.6},{:.6}", e.seq, u8::from(e.held), p.x, p.y, p.z);
                }
            }
            Err(err) => sink_errors.lock().expect("error lock").push(format!("tick {tick}: {err:#}")),
        }
    })?;
    let interrupt = Arc::new(AtomicBool::new(false));
    stop_on_interrupt(interrupt.clone());
    let stats = join_or_interrupt(handle, &interrupt);
    stop.store(true, Ordering::SeqCst);
    let rx = receiver.join().unwrap_or_default();
    if let Some(w) = log_file {
        w.lock().expect("log lock").flush()?;
    }
    for e in errors.lock().expect("error lock").iter().take(5) {
        log::warn!("{e}");
    }
    println!("ticks,fresh,held,no_frame,overruns,datagrams,frames,decode_errors,stale");
    println!(
        "{},{},{},{},{},{},{},{},{}",
        stats.ticks,
        stats.fresh,
        stats.held,
        stats.no_frame,
        stats.overruns,
        rx.datagrams,
        rx.frames,
        rx.decode_errors,
        rx.stale
    );
    Ok(())
}

/// Waits for the loop to finish its tick budget, or stops it on interrupt.
fn join_or_interrupt(handle: RateLoopHandle, interrupt: &Arc<AtomicBool>) -> LoopStats {
    let watcher_flag = handle.stop_flag();
    let watcher_int = interrupt.clone();
    let done = Arc::new(AtomicBool::new(false));
    let watcher_done = done.clone();
    let watcher = std::thread::spawn(move || {
        while !watcher_done.load(Ordering::SeqCst) {
            if watcher_int.load(Ordering::SeqCst) {
                watcher_flag.store(true, Ordering::SeqCst);
                break;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    });
    let stats = handle.join();
    done.store(true, Ordering::SeqCst);
    let _ = watcher.join();
    stats
}

pub fn stream_test(g: &GlobalOpts, a: &StreamTestArgs) -> Result<()> {
    let fault = a.fault.config()?;
    match a.mode.as_str() {
        "latency" => {
            if !(a.interval_ms.is_finite() && a.interval_ms >= 0.0) {
                bail!("--interval-ms must be non-negative");
            }
            let stats = measure_latency(a.samples, Duration::from_secs_f64(a.interval_ms / 1000.0), fault, g.seed)?;
            println!("{}", LatencyStats::CSV_HEADER);
            println!("{}", stats.csv_row());
        }
        "continuity" => {
            check_rate(a.rate)?;
            let cfg = ContinuityConfig {
                packets: a.samples,
                rate_hz: a.rate,
                capacity: a.window,
                fault,
                seed: g.seed,
                ..ContinuityConfig::default()
            };
            let trace = simulate_continuity(&cfg)?;
            let held = trace.records.iter().filter(|r| r.held).count();
            println!("packets,delivered,warmup_ticks,emitted,fresh,held,decode_errors");
            println!(
                "{},{},{},{},{},{},{}",
                a.samples,
                trace.delivered,
                trace.warmup_ticks,
                trace.records.len(),
                trace.records.len() - held,
                held,
                trace.decode_errors
            );
        }
        other => bail!("unsupported --mode `{other}`; use latency or continuity"),
    }
    Ok(())
}

pub fn vla_replay(g: &GlobalOpts, a: &VlaReplayArgs) -> Result<()> {
    let model = load_model(g)?;
    let period = check_rate(a.rate)?;
    let planner = ScriptedPlanner::load(&a.chunks).with_context(|| format!("loading {}", a.chunks.display()))?;
    if let Some(d) = planner.dof() {
        if d != model.dof() {
            bail!("chunks carry {d} joints, the model has {}", model.dof());
        }
    }
    let ticks = a.ticks.unwrap_or((planner.chunks.len() * a.execute_len) as u64);
    let root = RigidPose::from_xyz_yaw(0.0, 0.0, a.root_height, 0.0);
    let forwarding = a.forward.is_some();
    let mut link = match a.forward {
        Some(addr) => Some((UdpSocket::bind("0.0.0.0:0")?, addr)),
        None => None,
    };
    let mut send_error = None;
    let mut send = |s: &ExecutedStep, model: &HumanoidModel| {
        let Some((socket, addr)) = &mut link else { return };
        let result = joints_to_command(&s.action, model, &root, s.tick as f64 / a.rate)
            .map_err(anyhow::Error::from)
            .and_then(|f| Ok(WireFrame::from_frame(&f, model)?))
            .and_then(|w| Ok(encode_packet(&StreamPacket::frames(s.tick as u32, now_us(), vec![w])?)?))
            .and_then(|bytes| Ok(socket.send_to(&bytes, *addr)?));
        if let Err(e) = result {
            send_error.get_or_insert(e);
        }
    };
    let initial = model.zero_configuration();
    let trace: ExecutionTrace = if a.realtime {
        let cfg = RealtimeConfig { execute_len: a.execute_len, ticks, rate_hz: a.rate };
        execute_realtime(planner, initial, cfg, |s| send(s, &model))?
    } else {
        let mut planner = planner;
        let trace = execute_chunks(&mut planner, initial, a.execute_len, ticks)?;
        if forwarding {
            let start = Instant::now();
            for s in &trace.steps {
                send(s, &model);
                if let Some(wait) =
                    (start + period.mul_f64((s.tick + 1) as f64)).checked_duration_since(Instant::now())
                {
                    std::thread::sleep(wait);
                }
            }
        }
        trace
    };
    if let Some(e) = send_error {
        return Err(e.context("streaming commands"));
    }
    if let Some(out) = &a.out {
        save_clip(&trace_to_clip(&trace, &model, &root, a.rate, "vla_replay")?, out)?;
    }
    let mut s = String::from("tick,chunk,index,held\n");
    for step in &trace.steps {
        match step.source {
            Some((c, i)) => s.push_str(&format!("{},{c},{i},0\n", step.tick)),
            None => s.push_str(&format!("{},,,1\n", step.tick)),
        }
    }
    write_output(None, &s)
}
