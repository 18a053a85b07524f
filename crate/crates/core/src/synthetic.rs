//! Deterministic test doubles for the evaluator and mutator plugins.
//!
//! A synthetic agent artifact is a single `agent.json` holding its true
//! accuracy and a behavior id. Each (run seed, behavior id, example id) is
//! hashed to a uniform draw; the agent solves the example when the draw falls
//! below its accuracy. New agents use their own id as behavior id, and a
//! clone keeps its parent's, so clone outcomes match the parent exactly.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::SessionInfo;
use crate::evaluation::{Evaluator, ExampleRef, ScoredExample};
use crate::plugin::{MutationPhase, Mutator};

pub const SPEC_FILE: &str = "agent.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAgentSpec {
    pub true_accuracy: f64,
    pub behavior_id: String,
}

impl SyntheticAgentSpec {
    pub fn load(artifact_dir: &Path) -> Result<Self, String> {
        let path = artifact_dir.join(SPEC_FILE);
        let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let spec: SyntheticAgentSpec =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if !(0.0..=1.0).contains(&spec.true_accuracy) {
            return Err(format!(
                "{}: true_accuracy {} outside [0, 1]",
                path.display(),
                spec.true_accuracy
            ));
        }
        Ok(spec)
    }

    pub fn save(&self, artifact_dir: &Path) -> Result<(), String> {
        fs::create_dir_all(artifact_dir).map_err(|e| e.to_string())?;
        let mut body = serde_json::to_string_pretty(self).map_err(|e| e.to_string())?;
        body.push('\n');
        fs::write(artifact_dir.join(SPEC_FILE), body).map_err(|e| e.to_string())
    }
}

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

/// Uniform draw in [0, 1) for one (seed, behavior, example).
pub fn unit_draw(run_seed: u64, behavior_id: &str, example_id: &str) -> f64 {
    let d = digest(&[
        &run_seed.to_le_bytes(),
        behavior_id.as_bytes(),
        example_id.as_bytes(),
    ]);
    let word = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (word >> 11) as f64 / (1u64 << 53) as f64
}

pub fn solves(spec: &SyntheticAgentSpec, run_seed: u64, example_id: &str) -> bool {
    unit_draw(run_seed, &spec.behavior_id, example_id) < spec.true_accuracy
}

#[derive(Debug, Clone)]
pub struct SyntheticEvaluator {
    run_seed: u64,
}

impl SyntheticEvaluator {
    pub fn new(run_seed: u64) -> Self {
        SyntheticEvaluator { run_seed }
    }
}

impl Evaluator for SyntheticEvaluator {
    fn evaluate(
        &self,
        artifact_dir: &Path,
        examples: &[ExampleRef],
    ) -> Result<Vec<ScoredExample>, String> {
        let spec = SyntheticAgentSpec::load(artifact_dir)?;
        Ok(examples
            .iter()
            .map(|e| {
                let draw = unit_draw(self.run_seed, &spec.behavior_id, &e.example_id);
                let solved = draw < spec.true_accuracy;
                ScoredExample {
                    example_id: e.example_id.clone(),
                    score: if solved { 1.0 } else { 0.0 },
                    fingerprint: Some(if solved { "1" } else { "0" }.to_string()),
                    diagnostics: Some(format!(
                        "draw {draw:.4} against accuracy {:.4}",
                        spec.true_accuracy
                    )),
                    agent_stdout: Some(format!(
                        "{}: {}",
                        spec.behavior_id,
                        if solved { "solved" } else { "missed" }
                    )),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticMutatorConfig {
    pub drift_mean: f64,
    pub drift_sd: f64,
    /// Chance that a create phase emits an exact copy of the parent.
    pub clone_rate: f64,
    pub refine_step: f64,
    pub refine_chance: f64,
}

impl Default for SyntheticMutatorConfig {
    fn default() -> Self {
        SyntheticMutatorConfig {
            drift_mean: 0.01,
            drift_sd: 0.02,
            clone_rate: 0.1,
            refine_step: 0.005,
            refine_chance: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SyntheticMutator {
    cfg: SyntheticMutatorConfig,
}

impl SyntheticMutator {
    pub fn new(cfg: SyntheticMutatorConfig) -> Self {
        SyntheticMutator { cfg }
    }

    fn rng(run_seed: u64, agent_id: &str, phase: MutationPhase) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(digest(&[
            &run_seed.to_le_bytes(),
            agent_id.as_bytes(),
            phase.as_str().as_bytes(),
        ]))
    }

    /// Child accuracy for a parent and a drift draw.
    pub fn child_accuracy(parent: f64, drift: f64) -> f64 {
        (parent + drift).clamp(0.0, 1.0)
    }

    fn create(&self, session: &Path, info: &SessionInfo) -> Result<String, String> {
        let parent_id = info.parent_ids.first().ok_or("session lists no parent")?;
        let parent = SyntheticAgentSpec::load(&session.join("competitors").join(parent_id))?;
        let mut rng = Self::rng(info.run_seed, &info.agent_id, MutationPhase::Create);
        let normal =
            Normal::new(self.cfg.drift_mean, self.cfg.drift_sd).map_err(|e| e.to_string())?;
        let drift = normal.sample(&mut rng);
        let (child, note) = if rng.random::<f64>() < self.cfg.clone_rate {
            (parent.clone(), format!("Copied {parent_id} unchanged.\n"))
        } else {
            let child = SyntheticAgentSpec {
                true_accuracy: Self::child_accuracy(parent.true_accuracy, drift),
                behavior_id: info.agent_id.clone(),
            };
            let note = format!(
                "Derived from {parent_id}: accuracy {:.4} -> {:.4}.\n",
                parent.true_accuracy, child.true_accuracy
            );
            (child, note)
        };
        child.save(&session.join("artifact"))?;
        Ok(note)
    }

    fn refine(&self, session: &Path, info: &SessionInfo) -> Result<String, String> {
        let artifact = session.join("artifact");
        let mut spec = SyntheticAgentSpec::load(&artifact)?;
        if spec.behavior_id != info.agent_id {
            return Ok("Copy of an existing agent, left as is.\n".to_string());
        }
        let mut rng = Self::rng(info.run_seed, &info.agent_id, MutationPhase::Refine);
        if rng.random::<f64>() < self.cfg.refine_chance {
            let before = spec.true_accuracy;
            spec.true_accuracy = (before + self.cfg.refine_step).clamp(0.0, 1.0);
            spec.save(&artifact)?;
            Ok(format!(
                "Refined: accuracy {before:.4} -> {:.4}.\n",
                spec.true_accuracy
            ))
        } else {
            Ok("No change after review.\n".to_string())
        }
    }
}

impl Mutator for SyntheticMutator {
    fn mutate(&self, session_dir: &Path, phase: MutationPhase) -> Result<(), String> {
        let info_path = session_dir.join("session.json");
        let text =
            fs::read_to_string(&info_path).map_err(|e| format!("{}: {e}", info_path.display()))?;
        let info: SessionInfo = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let note = match phase {
            MutationPhase::Create => self.create(session_dir, &info)?,
            MutationPhase::Refine => self.refine(session_dir, &info)?,
        };
        let reasoning = session_dir.join("reasoning.md");
        let mut body = fs::read_to_string(&reasoning).unwrap_or_default();
        body.push_str(&format!("## {phase}\n\n{note}\n"));
        fs::write(reasoning, body).map_err(|e| e.to_string())
    }
}
