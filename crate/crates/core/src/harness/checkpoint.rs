//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` payload length (all
//! little-endian), a CBOR payload, then the SHA-256 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::trainer::{RunRngs, Trainer};
use super::{provenance, write_atomic, ExperimentConfig, MetricsRow};
use crate::error::{Error, Result};
use crate::nn::{Adam, ParameterSet};
use crate::sac::{Mode, ReplayBuffer, TrajectoryBuffer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RLGSSMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: usize = 20;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub params: ParameterSet,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub alpha_opt: Adam,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GssmState {
    pub params: ParameterSet,
    pub optimizer: Adam,
    pub steps_taken: u64,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub provenance: String,
    pub config: ExperimentConfig,
    pub mode: Mode,
    pub seed: u64,
    pub episode: usize,
    pub gssm_calls: u64,
    pub agent: AgentState,
    pub gssm: Option<GssmState>,
    pub trajectories: TrajectoryBuffer,
    pub replay: ReplayBuffer,
    pub rngs: RunRngs,
    pub metrics: Vec<MetricsRow>,
}

fn corrupt(offset: usize, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        offset,
        message: message.into(),
    }
}

fn same_layout(a: &ParameterSet, b: &ParameterSet) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((na, pa), (nb, pb))| {
            na == nb && pa.value.shape() == pb.value.shape() && pa.trainable == pb.trainable
        })
}

impl Checkpoint {
    pub(crate) fn capture(t: &Trainer) -> Self {
        Self {
            provenance: provenance(),
            config: t.config.clone(),
            mode: t.mode,
            seed: t.seed,
            episode: t.episode,
            gssm_calls: t.gssm_calls,
            agent: AgentState {
                params: t.agent.params.clone(),
                actor_opt: t.agent.actor_opt.clone(),
                critic_opt: t.agent.critic_opt.clone(),
                alpha_opt: t.agent.alpha_opt.clone(),
                updates: t.agent.updates,
            },
            gssm: t.gssm.as_ref().map(|g| GssmState {
                params: g.params.clone(),
                optimizer: g.optimizer.clone(),
                steps_taken: g.steps_taken,
            }),
            trajectories: t.trajectories.clone(),
            replay: t.replay.clone(),
            rngs: t.rngs.clone(),
            metrics: t.metrics.clone(),
        }
    }

    /// Rebuilds the trainer. Network shapes come from the stored config and
    /// must match the stored parameters exactly.
    pub fn into_trainer(self) -> Result<Trainer> {
        if self.provenance != provenance() {
            log::warn!(
                "checkpoint written by {}, loading with {}",
                self.provenance,
                provenance()
            );
        }
        let mut t = Trainer::new(self.config, self.mode, self.seed)?;
        if !same_layout(&t.agent.params, &self.agent.params) {
            return Err(corrupt(HEADER, "agent parameters do not match the config"));
        }
        t.agent.params = self.agent.params;
        t.agent.actor_opt = self.agent.actor_opt;
        t.agent.critic_opt = self.agent.critic_opt;
        t.agent.alpha_opt = self.agent.alpha_opt;
        t.agent.updates = self.agent.updates;
        match (&mut t.gssm, self.gssm) {
            (Some(g), Some(s)) => {
                if !same_layout(&g.params, &s.params) {
                    return Err(corrupt(HEADER, "gssm parameters do not match the config"));
                }
                g.params = s.params;
                g.optimizer = s.optimizer;
                g.steps_taken = s.steps_taken;
            }
            (None, None) => {}
            _ => return Err(corrupt(HEADER, "gssm state does not match the run mode")),
        }
        t.trajectories = self.trajectories;
        t.replay = self.replay;
        t.rngs = self.rngs;
        t.episode = self.episode;
        t.metrics = self.metrics;
        t.gssm_calls = self.gssm_calls;
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        ciborium::into_writer(self, &mut payload)
            .map_err(|e| corrupt(HEADER, format!("encoding failed: {e}")))?;
        let mut out = Vec::with_capacity(HEADER + payload.len() + DIGEST);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let n = bytes.len();
        if n < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt(0, "not a checkpoint (bad magic)"));
        }
        if n < HEADER {
            return Err(corrupt(n, "truncated header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(HEADER))
            .filter(|e| e.checked_add(DIGEST).is_some_and(|t| t <= n))
            .ok_or_else(|| {
                corrupt(
                    n,
                    format!(
                        "truncated: header announces {len} payload bytes, file has {n} in total"
                    ),
                )
            })?;
        if n != end + DIGEST {
            return Err(corrupt(end + DIGEST, "trailing bytes after checksum"));
        }
        let payload = &bytes[HEADER..end];
        if Sha256::digest(payload).as_slice() != &bytes[end..] {
            return Err(corrupt(end, "checksum mismatch"));
        }
        ciborium::from_reader(payload).map_err(|e| {
            use ciborium::de::Error as E;
            let (at, msg) = match e {
                E::Syntax(at) => (at, "syntax error".to_string()),
                E::Semantic(at, m) => (at.unwrap_or(0), m),
                E::Io(err) => (0, err.to_string()),
                E::RecursionLimitExceeded => (0, "nesting too deep".to_string()),
            };
            corrupt(HEADER + at, format!("payload: {msg}"))
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
