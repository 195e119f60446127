use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::archive::SimJobScript;
use super::modules::Environment;
use crate::domain::{PowerState, Timestamp};

pub const AMBIENT_C: f64 = 25.0;
pub const DEGREES_PER_LOAD: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "exit_code")]
pub enum ProcState {
    Running,
    Exited(i32),
    /// Terminated by a power-off or an explicit kill.
    Killed,
}

#[derive(Debug, Clone)]
pub(crate) struct RankProc {
    pub job: String,
    pub rank: u32,
    pub script: SimJobScript,
    pub started_at: Timestamp,
    pub state: ProcState,
}

/// Mutable state of one simulated machine.
#[derive(Debug)]
pub(crate) struct NodeState {
    pub power: PowerState,
    pub env: Environment,
    pub files: BTreeMap<String, Vec<u8>>,
    pub procs: Vec<RankProc>,
    pub temp_offset: f64,
    pub sensor_fault: bool,
}

pub(crate) fn rank_output_name(job: &str, rank: u32) -> String {
    format!("{job}/rank-{rank}.out")
}

impl NodeState {
    pub fn new() -> Self {
        NodeState {
            power: PowerState::Off,
            env: base_env(),
            files: BTreeMap::new(),
            procs: Vec::new(),
            temp_offset: 0.0,
            sensor_fault: false,
        }
    }

    /// Moves ranks whose declared runtime has elapsed to `Exited` and writes
    /// their output files.
    pub fn refresh(&mut self, now: Timestamp) {
        for p in self
            .procs
            .iter_mut()
            .filter(|p| p.state == ProcState::Running)
        {
            let Some(code) = p.script.exit_code_for(p.rank) else {
                continue;
            };
            let runtime_ms = p.script.declared_runtime_s.saturating_mul(1000) as i64;
            if now.0 >= p.started_at.0.saturating_add(runtime_ms) {
                p.state = ProcState::Exited(code);
                self.files.insert(
                    rank_output_name(&p.job, p.rank),
                    p.script.output_for(p.rank).into_bytes(),
                );
            }
        }
    }

    pub fn running(&self) -> usize {
        self.procs
            .iter()
            .filter(|p| p.state == ProcState::Running)
            .count()
    }

    pub fn load(&self) -> f64 {
        if self.power == PowerState::On && self.running() > 0 {
            1.0
        } else {
            0.0
        }
    }

    pub fn temperature(&self) -> f64 {
        match self.power {
            PowerState::On => AMBIENT_C + DEGREES_PER_LOAD * self.load() + self.temp_offset,
            PowerState::Off => AMBIENT_C,
        }
    }

    /// Kills matching running ranks; returns `(job, rank)` of each.
    pub fn kill(&mut self, job: Option<&str>) -> Vec<(String, u32)> {
        let mut killed = Vec::new();
        for p in self.procs.iter_mut() {
            if p.state == ProcState::Running && job.is_none_or(|j| j == p.job) {
                p.state = ProcState::Killed;
                killed.push((p.job.clone(), p.rank));
            }
        }
        killed
    }

    /// Returns the killed ranks when powering off. Staged files survive a
    /// power cycle; the environment does not.
    pub fn set_power(&mut self, target: PowerState) -> Vec<(String, u32)> {
        if self.power == target {
            return Vec::new();
        }
        self.power = target;
        match target {
            PowerState::On => Vec::new(),
            PowerState::Off => {
                self.env = base_env();
                self.kill(None)
            }
        }
    }

    pub fn proc_state(&self, job: &str, rank: u32) -> Option<ProcState> {
        self.procs
            .iter()
            .rev()
            .find(|p| p.job == job && p.rank == rank)
            .map(|p| p.state)
    }
}

/// Identical on every node, so block environments compare byte for byte.
fn base_env() -> Environment {
    Environment::new(
        [
            ("HOME", "/home/cluster"),
            ("PATH", "/usr/local/bin:/usr/bin:/bin"),
            ("SHELL", "/bin/sh"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect(),
    )
}
