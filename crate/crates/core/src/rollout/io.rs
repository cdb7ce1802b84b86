//! Rollout file format: a JSON header line, then one JSON record per
//! rollout carrying scenario id, mode, seed, tokens, waypoints, log-probs.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scene::Waypoint;
use crate::tokenizer::TokenRow;

use super::{JointRollout, RolloutMode, RolloutSet};

pub const ROLLOUT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutFileHeader {
    pub schema_version: u32,
    /// Digest of the configuration that produced the rollouts.
    pub config_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RolloutRecord {
    scenario_id: String,
    mode: RolloutMode,
    seed: u64,
    attention_interval: usize,
    top_p: f64,
    replica: usize,
    rollout_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    query_recon_error: Option<f64>,
    tokens: Vec<TokenRow>,
    waypoints: Vec<Vec<Waypoint>>,
    log_probs: Vec<Vec<f64>>,
}

pub fn save_rollouts(sets: &[RolloutSet], config_digest: &str, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = RolloutFileHeader {
        schema_version: ROLLOUT_SCHEMA_VERSION,
        config_digest: config_digest.to_string(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| CoreError::Contract(e.to_string()))?;
    w.write_all(b"\n")?;
    for set in sets {
        for (i, sample) in set.samples.iter().enumerate() {
            let record = RolloutRecord {
                scenario_id: set.scenario_id.clone(),
                mode: set.mode,
                seed: set.seed,
                attention_interval: set.attention_interval,
                top_p: set.top_p,
                replica: set.replica,
                rollout_index: i,
                query_recon_error: set.query_recon_error,
                tokens: sample.tokens.clone(),
                waypoints: sample.waypoints.clone(),
                log_probs: sample.log_probs.clone(),
            };
            serde_json::to_writer(&mut w, &record)
                .map_err(|e| CoreError::Contract(e.to_string()))?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads rollout sets, regrouping consecutive records by (scenario, replica,
/// mode). Errors name the offending line.
pub fn load_rollouts(path: &Path) -> Result<(Vec<RolloutSet>, RolloutFileHeader)> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let header: RolloutFileHeader = match lines.next() {
        None => {
            return Err(CoreError::Malformed {
                line: 1,
                msg: "empty rollout file (missing header)".into(),
            })
        }
        Some((_, line)) => {
            let line = line?;
            serde_json::from_str(&line).map_err(|e| CoreError::Malformed {
                line: 1,
                msg: format!("header: {e}"),
            })?
        }
    };
    if header.schema_version != ROLLOUT_SCHEMA_VERSION {
        return Err(CoreError::Schema {
            scenario_id: None,
            msg: format!("unsupported rollout schema {}", header.schema_version),
        });
    }

    let mut sets: Vec<RolloutSet> = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RolloutRecord = serde_json::from_str(&line).map_err(|e| CoreError::Malformed {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let sample = JointRollout {
            tokens: rec.tokens,
            waypoints: rec.waypoints,
            log_probs: rec.log_probs,
        };
        let matches_last = sets.last().is_some_and(|s| {
            s.scenario_id == rec.scenario_id && s.replica == rec.replica && s.mode == rec.mode
        });
        if matches_last {
            sets.last_mut().unwrap().samples.push(sample);
        } else {
            sets.push(RolloutSet {
                scenario_id: rec.scenario_id,
                mode: rec.mode,
                seed: rec.seed,
                attention_interval: rec.attention_interval,
                top_p: rec.top_p,
                replica: rec.replica,
                query_recon_error: rec.query_recon_error,
                samples: vec![sample],
            });
        }
    }
    Ok((sets, header))
}
