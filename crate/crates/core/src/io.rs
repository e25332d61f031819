//! File formats. Rounds, actions and latent states are 1-based on disk and
//! 0-based in memory; context ids are written as they are.
//!
//! * logged data: text, one `t,context,action,reward,propensity` record per
//!   line, `#` starts a comment line
//! * labels: JSON lines `{"t":1,"z":2,"states":5}`
//! * policies, bundles, HMM parameters: JSON documents
//! * environment: JSON with the schedule stored as 1-based segments
//! * deployment traces: JSON lines, one per round

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::deploy::{DeploymentTrace, TraceRecord};
use crate::env::EnvSpec;
use crate::error::{input, Error, Result};
use crate::model::{Context, LatentSequence, LoggedInteraction, Segment, SoftmaxPolicy};

pub const LOG_HEADER: &str = "# t,context,action,reward,propensity";

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

pub fn write_log<W: Write>(mut w: W, data: &[LoggedInteraction]) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for d in data {
        writeln!(w, "{},{},{},{},{}", d.t + 1, d.context, d.action + 1, d.reward, d.propensity)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LoggedInteraction>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let s = line.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = s.split(',').collect();
        if fields.len() != 5 {
            return Err(parse_err(line_no, format!("expected 5 fields, found {}", fields.len())));
        }
        let one_based = |f: &str, what: &str| -> Result<usize> {
            match f.trim().parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(parse_err(line_no, format!("{what} must be a positive integer, got `{f}`"))),
            }
        };
        let real = |f: &str, what: &str| -> Result<f64> {
            f.trim()
                .parse::<f64>()
                .map_err(|_| parse_err(line_no, format!("{what} must be a number, got `{f}`")))
        };
        let context: Context = fields[1].parse().map_err(|e: Error| parse_err(line_no, e.to_string()))?;
        let propensity = real(fields[4], "propensity")?;
        if !(propensity > 0.0 && propensity <= 1.0) {
            return Err(crate::error::data(format!(
                "line {line_no}: propensity {propensity} outside (0, 1]"
            )));
        }
        out.push(LoggedInteraction {
            t: one_based(fields[0], "round")?,
            context,
            action: one_based(fields[2], "action")?,
            reward: real(fields[3], "reward")?,
            propensity,
        });
    }
    Ok(out)
}

pub fn save_log(path: &Path, data: &[LoggedInteraction]) -> Result<()> {
    write_log(BufWriter::new(File::create(path)?), data)
}

pub fn load_log(path: &Path) -> Result<Vec<LoggedInteraction>> {
    read_log(BufReader::new(File::open(path)?))
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    t: usize,
    z: usize,
    states: usize,
}

pub fn write_labels<W: Write>(mut w: W, labels: &LatentSequence) -> Result<()> {
    for (t, &z) in labels.labels().iter().enumerate() {
        let rec = LabelRecord {
            t: t + 1,
            z: z + 1,
            states: labels.num_states(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels<R: BufRead>(r: R) -> Result<LatentSequence> {
    let mut labels = Vec::new();
    let mut states = 0;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        if rec.t != labels.len() + 1 {
            return Err(parse_err(i + 1, format!("expected round {}, found {}", labels.len() + 1, rec.t)));
        }
        if rec.z == 0 || rec.z > rec.states {
            return Err(parse_err(i + 1, format!("label {} outside [1, {}]", rec.z, rec.states)));
        }
        if states != 0 && rec.states != states {
            return Err(parse_err(i + 1, "inconsistent state count"));
        }
        states = rec.states;
        labels.push(rec.z - 1);
    }
    LatentSequence::new(labels, states.max(1))
}

pub fn save_labels(path: &Path, labels: &LatentSequence) -> Result<()> {
    write_labels(BufWriter::new(File::create(path)?), labels)
}

pub fn load_labels(path: &Path) -> Result<LatentSequence> {
    read_labels(BufReader::new(File::open(path)?))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// 1-based inclusive segment as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

/// On-disk environment descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvDocument {
    pub actions: usize,
    pub states: usize,
    /// `mean_reward[a][z]`.
    pub mean_reward: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub schedule: Vec<SegmentRecord>,
    pub logging_policy: SoftmaxPolicy,
}

impl From<&EnvSpec> for EnvDocument {
    fn from(env: &EnvSpec) -> Self {
        Self {
            actions: env.actions,
            states: env.states,
            mean_reward: env.mean_reward.clone(),
            noise_sigma: env.noise_sigma,
            schedule: env
                .schedule
                .segments()
                .iter()
                .map(|s| SegmentRecord {
                    start: s.start + 1,
                    end: s.end,
                    label: s.label + 1,
                })
                .collect(),
            logging_policy: env.logging_policy.clone(),
        }
    }
}

impl TryFrom<EnvDocument> for EnvSpec {
    type Error = Error;

    fn try_from(doc: EnvDocument) -> Result<Self> {
        let segments = doc
            .schedule
            .iter()
            .map(|s| {
                if s.start == 0 || s.end < s.start || s.label == 0 {
                    return Err(input("schedule segments are 1-based and non-empty"));
                }
                Ok(Segment {
                    start: s.start - 1,
                    end: s.end,
                    label: s.label - 1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let schedule = LatentSequence::from_segments(&segments, doc.states)?;
        let env = EnvSpec::new(doc.mean_reward, doc.noise_sigma, schedule, doc.logging_policy)?;
        if env.actions != doc.actions {
            return Err(input("mean reward rows do not match the action count"));
        }
        Ok(env)
    }
}

pub fn save_env(path: &Path, env: &EnvSpec) -> Result<()> {
    save_json(path, &EnvDocument::from(env))
}

pub fn load_env(path: &Path) -> Result<EnvSpec> {
    load_json::<EnvDocument>(path)?.try_into()
}

/// Path of the environment descriptor written next to a log file.
pub fn env_path_for(log_path: &Path) -> std::path::PathBuf {
    let mut name = log_path.file_name().unwrap_or_default().to_os_string();
    name.push(".env.json");
    log_path.with_file_name(name)
}

#[derive(Serialize)]
struct TraceLine<'a> {
    t: usize,
    state: usize,
    context: &'a Context,
    action: usize,
    reward: f64,
    expected_reward: f64,
    mixture: &'a [f64],
}

pub fn write_trace<W: Write>(mut w: W, trace: &DeploymentTrace) -> Result<()> {
    for r in &trace.records {
        let TraceRecord {
            t,
            state,
            context,
            action,
            reward,
            expected_reward,
            mixture,
        } = r;
        let line = TraceLine {
            t: t + 1,
            state: state + 1,
            context,
            action: action + 1,
            reward: *reward,
            expected_reward: *expected_reward,
            mixture,
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trace(path: &Path, trace: &DeploymentTrace) -> Result<()> {
    write_trace(BufWriter::new(File::create(path)?), trace)
}
