//! Core library for whole-body humanoid teleoperation and tracking evaluation.
//!
//! The crate is organized bottom-up:
//!
//! - [`kinematics`]: humanoid morphology, rigid poses, forward kinematics
//! - [`motion`]: motion clips, resampling, corpus statistics, filtering, recipes
//! - [`retarget`]: calibration-frame scale estimation and stream rescaling
//! - [`stream`]: wire protocol, jitter queue with zero-order hold, fault injection
//! - [`simtrack`]: observation builders, reward terms, domain randomization, oracle trackers
//! - [`bench`]: per-episode SR/MPJPE evaluation and stratified reports
//! - [`vlabridge`]: receding-horizon action-chunk execution

pub mod bench;
pub mod kinematics;
pub mod motion;
pub mod retarget;
pub mod simtrack;
pub mod stream;
pub mod vlabridge;
