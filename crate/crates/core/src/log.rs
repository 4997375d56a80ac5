//! Self-describing JSONL episode logs and bit-exact replay.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Algorithm, ConfigError, EnvSpec};
use crate::env::{EntityState, EnvError, Environment, StepInfo};
use crate::metrics::{AgentOutcome, EpisodeOutcome};

pub const LOG_FORMAT: &str = "iplan-episode-log";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed log line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("not an episode log (format {0:?})")]
    Format(String),
    #[error("log version {found} is not supported (expected {LOG_VERSION})")]
    Version { found: u32 },
    #[error("log has no header")]
    Empty,
    #[error("replay diverged at tick {tick}: {what}")]
    Mismatch { tick: usize, what: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub env: EnvSpec,
    pub algorithm: Algorithm,
    pub agents: usize,
    pub horizon: usize,
}

/// Latent state an agent held when choosing its action at a tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTrace {
    /// Behavioral latent per graph slot (ego first).
    pub beta: Vec<f64>,
    pub zeta: Vec<f64>,
    /// Row-major `slots x slots` attention, when the instant module ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<f64>>,
}

/// World state after `actions` were applied. Tick 0 is the reset state and
/// carries no actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    pub entities: Vec<EntityState>,
    pub crashed: Vec<bool>,
    pub actions: Vec<Option<usize>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub infos: Vec<StepInfo>,
    /// Latents used to pick `actions`, per agent.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub latents: Vec<Option<LatentTrace>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub header: LogHeader,
    pub ticks: Vec<TickRecord>,
}

impl EpisodeLog {
    pub fn new(header: LogHeader) -> Self {
        Self {
            header,
            ticks: Vec::new(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), LogError> {
        serde_json::to_writer(&mut w, &self.header).map_err(|e| LogError::Json { line: 1, source: e })?;
        writeln!(w)?;
        for (i, t) in self.ticks.iter().enumerate() {
            serde_json::to_writer(&mut w, t).map_err(|e| LogError::Json { line: i + 2, source: e })?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, LogError> {
        let mut lines = r.lines();
        let first = lines.next().ok_or(LogError::Empty)??;
        let header: LogHeader = serde_json::from_str(&first).map_err(|e| LogError::Json { line: 1, source: e })?;
        if header.format != LOG_FORMAT {
            return Err(LogError::Format(header.format));
        }
        if header.version != LOG_VERSION {
            return Err(LogError::Version { found: header.version });
        }
        let mut ticks = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            ticks.push(serde_json::from_str(&line).map_err(|e| LogError::Json { line: i + 2, source: e })?);
        }
        Ok(Self { header, ticks })
    }

    /// Per-agent outcomes reconstructed from the log; only ticks where an
    /// agent acted count toward its lifetime.
    pub fn outcomes(&self) -> EpisodeOutcome {
        (0..self.header.agents)
            .map(|i| {
                let mut reward = 0.0;
                let mut crash_tick = None;
                let mut speeds = Vec::new();
                for t in self.ticks.iter().skip(1) {
                    if t.actions[i].is_none() {
                        continue;
                    }
                    reward += t.rewards[i];
                    if crash_tick.is_none() {
                        speeds.push(t.infos[i].speed);
                        if t.infos[i].collision {
                            crash_tick = Some(t.tick);
                        }
                    }
                }
                let mean_speed = if speeds.is_empty() {
                    0.0
                } else {
                    speeds.iter().sum::<f64>() / speeds.len() as f64
                };
                AgentOutcome {
                    reward,
                    crash_tick,
                    mean_speed,
                    horizon: self.header.horizon,
                }
            })
            .collect()
    }

    /// Re-simulates the episode from its seed with the logged actions and
    /// checks every recorded field for bit identity.
    pub fn verify_replay(&self) -> Result<usize, LogError> {
        let mut env = self.header.env.build()?;
        env.reset(self.header.seed)?;
        let first = self.ticks.first().ok_or(LogError::Empty)?;
        check(0, "entities", &env.entities(), &first.entities)?;
        check(0, "crashed", &env.crashed(), &first.crashed)?;
        for rec in &self.ticks[1..] {
            let res = env.step(&rec.actions)?;
            let t = rec.tick;
            if env.tick() != t {
                return Err(LogError::Mismatch {
                    tick: t,
                    what: format!("simulator is at tick {}", env.tick()),
                });
            }
            check(t, "entities", &env.entities(), &rec.entities)?;
            check(t, "crashed", &env.crashed(), &rec.crashed)?;
            let rewards: Vec<f64> = res.agents.iter().map(|a| a.reward).collect();
            check(t, "rewards", &rewards, &rec.rewards)?;
            let dones: Vec<bool> = res.agents.iter().map(|a| a.done).collect();
            check(t, "dones", &dones, &rec.dones)?;
            let infos: Vec<StepInfo> = res.agents.iter().map(|a| a.info).collect();
            check(t, "infos", &infos, &rec.infos)?;
        }
        Ok(self.ticks.len() - 1)
    }
}

/// Bitwise comparison through the serialized form, so `-0.0 != 0.0` and NaNs
/// compare by payload.
fn check<T: Serialize + PartialEq>(tick: usize, what: &str, got: &T, want: &T) -> Result<(), LogError> {
    let a = serde_json::to_string(got).expect("serializable");
    let b = serde_json::to_string(want).expect("serializable");
    if a == b {
        Ok(())
    } else {
        Err(LogError::Mismatch {
            tick,
            what: what.to_string(),
        })
    }
}

/// Hex FNV-1a of a string, used to fingerprint configs.
pub fn fingerprint(s: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}
