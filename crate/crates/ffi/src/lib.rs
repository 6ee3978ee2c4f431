//! C interface to scenario generation, checkpoint loading, greedy action
//! selection and episode evaluation.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free`. Every fallible call returns a
//! [`PhStatus`]; the message of the last failure on the calling thread is
//! available from [`ph_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use phlight::agent::Agent;
use phlight::config::Config;
use phlight::metrics::EpisodeMetrics;
use phlight::net::PhaseLayout;
use phlight::observe::Observation;
use phlight::scenario::{generate_grid, load_scenario, Scenario};
use phlight::sim::run_episode;
use phlight::train::{evaluate_agent, Baseline};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Simulation = 5,
    Panic = 6,
}

/// Baselines available to [`ph_evaluate_baseline`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhBaseline {
    FixedTime = 0,
    MaxPressure = 1,
    Random = 2,
}

/// Episode metrics. `datt` is NaN when no vehicle arrived.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhMetrics {
    pub att: f64,
    pub datt: f64,
    pub dar: f64,
    pub vehicles: usize,
}

/// Opaque scenario handle.
pub struct PhScenario(Scenario);

/// Opaque trained agent handle.
pub struct PhAgent(Agent);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

struct Fail(PhStatus, String);

impl Fail {
    fn new(code: PhStatus, msg: impl std::fmt::Display) -> Self {
        Fail(code, msg.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PhStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PhStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            PhStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::new(PhStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail::new(PhStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::new(PhStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn metrics_of(m: EpisodeMetrics) -> PhMetrics {
    PhMetrics { att: m.att, datt: m.datt, dar: m.dar, vehicles: m.vehicles }
}

fn eval_config(horizon: u32) -> Result<Config, Fail> {
    if horizon == 0 {
        return Err(Fail::new(PhStatus::InvalidArgument, "horizon must be positive"));
    }
    let mut cfg = Config::default();
    cfg.train.horizon = horizon;
    Ok(cfg)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ph_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Synthetic grid with Poisson arrivals; `demand` is vehicles per hour in total.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ph_scenario_generate_grid(
    rows: usize,
    cols: usize,
    link_length: f64,
    demand: f64,
    seed: u64,
    out: *mut *mut PhScenario,
) -> PhStatus {
    guard(|| {
        non_null(out, "out")?;
        if !(link_length.is_finite() && link_length > 0.0 && demand.is_finite() && demand >= 0.0) {
            return Err(Fail::new(PhStatus::InvalidArgument, "link length must be positive and demand non-negative"));
        }
        let sc = generate_grid(rows, cols, link_length, demand, seed).map_err(|e| Fail::new(PhStatus::InvalidArgument, e))?;
        *out = Box::into_raw(Box::new(PhScenario(sc)));
        Ok(())
    })
}

/// Loads a roadnet/flow JSON pair.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ph_scenario_load(roadnet: *const c_char, flow: *const c_char, out: *mut *mut PhScenario) -> PhStatus {
    guard(|| {
        non_null(out, "out")?;
        let r = path_arg(roadnet, "roadnet")?;
        let f = path_arg(flow, "flow")?;
        let sc = load_scenario(&r, &f, PhaseLayout::ThroughLeft).map_err(|e| {
            let code = if e.to_string().contains("No such file") { PhStatus::Io } else { PhStatus::Parse };
            Fail::new(code, e)
        })?;
        *out = Box::into_raw(Box::new(PhScenario(sc)));
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ph_scenario_free(s: *mut PhScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Number of signalized intersections, 0 for a null handle.
///
/// # Safety
/// `s` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ph_scenario_num_intersections(s: *const PhScenario) -> usize {
    s.as_ref().map_or(0, |s| s.0.network.intersections.len())
}

/// Number of scheduled trips, 0 for a null handle.
///
/// # Safety
/// `s` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ph_scenario_num_trips(s: *const PhScenario) -> usize {
    s.as_ref().map_or(0, |s| s.0.flow.len())
}

/// Loads a checkpoint written by the training commands.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ph_agent_load(path: *const c_char, out: *mut *mut PhAgent) -> PhStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = path_arg(path, "path")?;
        let bytes = std::fs::read(&p).map_err(|e| Fail::new(PhStatus::Io, format!("{}: {e}", p.display())))?;
        let (agent, _) = Agent::from_bytes(&bytes).map_err(|e| Fail::new(PhStatus::Parse, e))?;
        *out = Box::into_raw(Box::new(PhAgent(agent)));
        Ok(())
    })
}

/// # Safety
/// `a` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ph_agent_free(a: *mut PhAgent) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

/// Phases per intersection the agent was built for, 0 for a null handle.
///
/// # Safety
/// `a` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ph_agent_num_phases(a: *const PhAgent) -> usize {
    a.as_ref().map_or(0, |a| a.0.num_phases())
}

/// Length of the observation vector expected by [`ph_agent_select_action`].
///
/// # Safety
/// `a` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ph_agent_observation_len(a: *const PhAgent) -> usize {
    a.as_ref().map_or(0, |a| Observation::empty(a.0.num_phases()).to_vector().len())
}

/// Greedy phase and duration for one observation: 72 lane features in
/// approach-major slot order, a one-hot active phase, and the elapsed green.
///
/// # Safety
/// `obs` must point to `len` readable doubles; `phase` and `duration` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ph_agent_select_action(
    a: *const PhAgent,
    obs: *const f64,
    len: usize,
    phase: *mut usize,
    duration: *mut f64,
) -> PhStatus {
    guard(|| {
        non_null(a, "agent")?;
        non_null(obs, "obs")?;
        non_null(phase, "phase")?;
        non_null(duration, "duration")?;
        let agent = &(*a).0;
        if agent.config.neighbors {
            return Err(Fail::new(PhStatus::InvalidArgument, "neighbor agents need simulator context"));
        }
        let v = std::slice::from_raw_parts(obs, len);
        let o = Observation::from_vector(v, agent.num_phases())
            .ok_or_else(|| Fail::new(PhStatus::InvalidArgument, format!("observation has length {len} or a bad phase block")))?;
        let sel = agent.select_action(&o).map_err(|e| Fail::new(PhStatus::InvalidArgument, e))?;
        *phase = sel.phase;
        *duration = sel.duration;
        Ok(())
    })
}

/// Runs one baseline episode of `horizon` seconds.
///
/// # Safety
/// `s` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ph_evaluate_baseline(
    s: *const PhScenario,
    baseline: PhBaseline,
    horizon: u32,
    seed: u64,
    out: *mut PhMetrics,
) -> PhStatus {
    guard(|| {
        non_null(s, "scenario")?;
        non_null(out, "out")?;
        let cfg = eval_config(horizon)?;
        let b = match baseline {
            PhBaseline::FixedTime => Baseline::FixedTime,
            PhBaseline::MaxPressure => Baseline::MaxPressure,
            PhBaseline::Random => Baseline::Random,
        };
        let log = run_episode(&(*s).0, b.controller(&cfg, seed).as_mut(), horizon, cfg.sim)
            .map_err(|e| Fail::new(PhStatus::Simulation, e))?;
        *out = metrics_of(EpisodeMetrics::of(&log));
        Ok(())
    })
}

/// Runs one frozen-policy episode of `horizon` seconds.
///
/// # Safety
/// `s` and `a` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ph_evaluate_agent(s: *const PhScenario, a: *const PhAgent, horizon: u32, out: *mut PhMetrics) -> PhStatus {
    guard(|| {
        non_null(s, "scenario")?;
        non_null(a, "agent")?;
        non_null(out, "out")?;
        let mut cfg = eval_config(horizon)?;
        let agent = &(*a).0;
        cfg.agent.neighbors = agent.config.neighbors;
        cfg.sim.bounds = agent.bounds;
        let cfg = cfg.resolved();
        let sc = &(*s).0;
        let k = sc.network.intersections.first().map(|i| i.num_phases());
        if k != Some(agent.num_phases()) {
            return Err(Fail::new(PhStatus::InvalidArgument, "agent and scenario disagree on the phase count"));
        }
        let log = evaluate_agent(agent, sc, &cfg).map_err(|e| Fail::new(PhStatus::Simulation, e))?;
        *out = metrics_of(EpisodeMetrics::of(&log));
        Ok(())
    })
}
