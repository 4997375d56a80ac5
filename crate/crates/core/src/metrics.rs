//! Episode outcomes, summary statistics and the metric table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::env::AgentTrajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no episodes")]
    Empty,
    #[error("a confidence interval needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("confidence level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("average speed is undefined for this environment")]
    SpeedUndefined,
}

/// What happened to one controlled agent in one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub reward: f64,
    /// Decision tick (1-based) of the first collision; the crash tick counts as lived.
    pub crash_tick: Option<usize>,
    /// Mean speed over the ticks the agent was alive.
    pub mean_speed: f64,
    pub horizon: usize,
}

impl AgentOutcome {
    pub fn from_trajectory(tr: &AgentTrajectory, horizon: usize) -> Self {
        let crash_tick = tr.infos.iter().position(|i| i.collision).map(|k| k + 1);
        let lived = crash_tick.unwrap_or(tr.infos.len());
        let speeds = &tr.infos[..lived];
        let mean_speed = if speeds.is_empty() {
            0.0
        } else {
            speeds.iter().map(|i| i.speed).sum::<f64>() / speeds.len() as f64
        };
        Self {
            reward: tr.total_reward(),
            crash_tick,
            mean_speed,
            horizon,
        }
    }

    pub fn survival(&self) -> usize {
        self.crash_tick.unwrap_or(self.horizon)
    }
}

/// Controlled-agent outcomes of one episode.
pub type EpisodeOutcome = Vec<AgentOutcome>;

/// Percentage of controlled agent-episodes that ended collision-free.
pub fn success_rate(episodes: &[EpisodeOutcome]) -> Result<f64, MetricError> {
    let all: Vec<&AgentOutcome> = episodes.iter().flatten().collect();
    if all.is_empty() {
        return Err(MetricError::Empty);
    }
    let ok = all.iter().filter(|a| a.crash_tick.is_none()).count();
    Ok(100.0 * ok as f64 / all.len() as f64)
}

/// Mean over controlled agent-episodes of the crash tick, or the horizon.
pub fn survival_time(episodes: &[EpisodeOutcome]) -> Result<f64, MetricError> {
    let all: Vec<&AgentOutcome> = episodes.iter().flatten().collect();
    if all.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(all.iter().map(|a| a.survival() as f64).sum::<f64>() / all.len() as f64)
}

/// Mean over agent-episodes of each agent's lifetime mean speed.
pub fn average_speed(episodes: &[EpisodeOutcome], defined: bool) -> Result<f64, MetricError> {
    if !defined {
        return Err(MetricError::SpeedUndefined);
    }
    let all: Vec<&AgentOutcome> = episodes.iter().flatten().collect();
    if all.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(all.iter().map(|a| a.mean_speed).sum::<f64>() / all.len() as f64)
}

/// Mean over agents of their episode return.
pub fn episode_reward(episode: &EpisodeOutcome) -> f64 {
    episode.iter().map(|a| a.reward).sum::<f64>() / episode.len() as f64
}

/// Student-t interval on the mean: `(mean, half_width)`.
pub fn confidence_interval(samples: &[f64], level: f64) -> Result<(f64, f64), MetricError> {
    let n = samples.len();
    if n < 2 {
        return Err(MetricError::TooFewSamples(n));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricError::Level(level));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let t = StudentsT::new(0.0, 1.0, nf - 1.0)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.5 + level / 2.0);
    Ok((mean, t * (var / nf).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub half_width: f64,
}

impl Interval {
    pub fn of(samples: &[f64], level: f64) -> Result<Self, MetricError> {
        let (mean, half_width) = confidence_interval(samples, level)?;
        Ok(Self { mean, half_width })
    }
}

/// One algorithm x scenario row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub algorithm: String,
    pub scenario: String,
    pub episodes: usize,
    pub reward: Interval,
    /// `None` where speed is undefined (navigation).
    pub speed: Option<Interval>,
    pub survival: Interval,
    pub success: Interval,
}

impl MetricRow {
    /// Per-episode samples of each metric, each summarised with a
    /// `level` interval over episodes.
    pub fn from_outcomes(
        algorithm: &str,
        scenario: &str,
        episodes: &[EpisodeOutcome],
        speed_defined: bool,
        level: f64,
    ) -> Result<Self, MetricError> {
        if episodes.is_empty() {
            return Err(MetricError::Empty);
        }
        let per = |f: &dyn Fn(&[EpisodeOutcome]) -> Result<f64, MetricError>| -> Result<Interval, MetricError> {
            let xs = episodes
                .iter()
                .map(|e| f(std::slice::from_ref(e)))
                .collect::<Result<Vec<_>, _>>()?;
            Interval::of(&xs, level)
        };
        let rewards: Vec<f64> = episodes.iter().map(episode_reward).collect();
        Ok(Self {
            algorithm: algorithm.to_string(),
            scenario: scenario.to_string(),
            episodes: episodes.len(),
            reward: Interval::of(&rewards, level)?,
            speed: if speed_defined {
                Some(per(&|e| average_speed(e, true))?)
            } else {
                None
            },
            survival: per(&|e| survival_time(e))?,
            success: per(&|e| success_rate(e))?,
        })
    }
}

pub const METRIC_CSV_VERSION: u32 = 1;

pub const METRIC_CSV_HEADER: &str = "algorithm,scenario,episodes,reward_mean,reward_hw,speed_mean,speed_hw,survival_mean,survival_hw,success_mean,success_hw";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    /// CSV with a fixed column order; floats use shortest round-trip form.
    /// Undefined speed cells are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# metric-table v{METRIC_CSV_VERSION}").unwrap();
        writeln!(s, "{METRIC_CSV_HEADER}").unwrap();
        for r in &self.rows {
            let (sm, sh) = match r.speed {
                Some(i) => (i.mean.to_string(), i.half_width.to_string()),
                None => (String::new(), String::new()),
            };
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.algorithm,
                r.scenario,
                r.episodes,
                r.reward.mean,
                r.reward.half_width,
                sm,
                sh,
                r.survival.mean,
                r.survival.half_width,
                r.success.mean,
                r.success.half_width
            )
            .unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(crash: Option<usize>) -> AgentOutcome {
        AgentOutcome {
            reward: 0.0,
            crash_tick: crash,
            mean_speed: 25.0,
            horizon: 90,
        }
    }

    #[test]
    fn crash_tick_counts() {
        let eps = vec![vec![agent(Some(30)), agent(None)]];
        assert_eq!(survival_time(&eps).unwrap(), 60.0);
        assert_eq!(success_rate(&eps).unwrap(), 50.0);
    }

    #[test]
    fn identical_samples_zero_width() {
        assert_eq!(confidence_interval(&[3.0; 5], 0.95).unwrap(), (3.0, 0.0));
        assert!(confidence_interval(&[1.0], 0.95).is_err());
    }

    #[test]
    fn speed_rejected_when_undefined() {
        assert_eq!(average_speed(&[vec![agent(None)]], false), Err(MetricError::SpeedUndefined));
    }
}
