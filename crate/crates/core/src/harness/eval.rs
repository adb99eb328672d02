//! Receding-horizon evaluation: sample `T_p` actions, execute the first
//! `T_a`, re-observe, repeat. Episodes run in parallel workers with
//! per-episode derived seeds; records append to JSON-lines metrics files.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::{HarnessError, RunConfig};
use crate::diffusion::{make_schedule, sample, NoiseSchedule, Normalizer, SeededNoise};
use crate::geom::Rng;
use crate::policy::{Observation, PolicyModel};
use crate::pusht::{self, expert::scripted_expert, observe, reset, target_from_action, Setup};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub variant: String,
    pub setup: String,
    pub train_seed: u64,
    pub episode_seed: u64,
    pub checkpoint_epoch: usize,
    pub final_reward: f64,
    pub episode_len: usize,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    /// The record with its timing field cleared; seed-determinism checks
    /// compare these (wall time is the one legitimately non-reproducible
    /// field).
    pub fn without_wall_time(&self) -> MetricsRecord {
        MetricsRecord { wall_time_s: 0.0, ..self.clone() }
    }
}

/// What drives the agent during an episode.
pub enum EvalPolicy<'a> {
    Model {
        model: &'a PolicyModel,
        params: &'a crate::autodiff::ParamSet,
        norm: &'a Normalizer,
        schedule: &'a NoiseSchedule,
        sampler: crate::diffusion::SamplerKind,
    },
    /// The scripted expert, used as a harness self-test.
    Expert,
}

/// Roll one episode; deterministic given `(config, setup, episode_seed)`.
pub fn run_episode(
    cfg: &RunConfig,
    setup: Setup,
    episode_seed: u64,
    checkpoint_epoch: usize,
    policy: &EvalPolicy,
) -> Result<MetricsRecord, HarnessError> {
    let start = std::time::Instant::now();
    let task = &cfg.task;
    let mut env_rng = Rng::seed_from(episode_seed);
    let mut state = reset(task, setup, &mut env_rng);
    let mut history: Vec<Observation> = vec![observe(task, &state); cfg.policy.obs_horizon];
    let mut steps = 0usize;
    let mut plan_idx = 0u64;
    'episode: while steps < task.max_episode_steps {
        let actions = match policy {
            EvalPolicy::Model { model, params, norm, schedule, sampler } => {
                let mut noise = SeededNoise {
                    rng: Rng::seed_from(episode_seed ^ 0x5A5A).derive(plan_idx),
                };
                sample(model, params, norm, &history, schedule, *sampler, &mut noise)?
            }
            EvalPolicy::Expert => {
                // The expert plans one control step at a time.
                vec![pusht::action_from_target(scripted_expert(task, &state)); 1]
            }
        };
        plan_idx += 1;
        let executed = match policy {
            EvalPolicy::Model { .. } => cfg.policy.act_horizon,
            EvalPolicy::Expert => 1,
        };
        for action in actions.iter().take(executed) {
            let (next, done) = pusht::step(task, &state, target_from_action(action));
            state = next;
            steps += 1;
            history.remove(0);
            history.push(observe(task, &state));
            if done || steps >= task.max_episode_steps {
                break 'episode;
            }
        }
    }
    Ok(MetricsRecord {
        variant: cfg.variant.tag().to_string(),
        setup: setup.tag().to_string(),
        train_seed: cfg.seed,
        episode_seed,
        checkpoint_epoch,
        final_reward: pusht::reward(task, &state),
        episode_len: steps,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Evaluate a checkpoint on `episodes` seeded episodes of one setup.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    setup: Setup,
    episodes: usize,
    eval_seed: u64,
) -> Result<Vec<MetricsRecord>, HarnessError> {
    let cfg = &ckpt.config;
    let mut params = ckpt.params.clone();
    params.reindex();
    let mut build_rng = Rng::seed_from(cfg.seed);
    let mut fresh = crate::autodiff::ParamSet::new();
    let model = PolicyModel::build(
        cfg.variant.model_kind(),
        cfg.policy.clone(),
        &mut fresh,
        &mut build_rng,
    )?;
    let schedule = make_schedule(cfg.diffusion_steps)?;
    let master = Rng::seed_from(eval_seed);
    let results: Vec<Result<MetricsRecord, HarnessError>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let policy = EvalPolicy::Model {
                model: &model,
                params: &params,
                norm: &ckpt.normalizer,
                schedule: &schedule,
                sampler: cfg.sampler,
            };
            run_episode(cfg, setup, master.derive(i as u64).state(), ckpt.epoch, &policy)
        })
        .collect();
    results.into_iter().collect()
}

/// Expert self-test rollouts through the same episode loop.
pub fn evaluate_expert(
    cfg: &RunConfig,
    setup: Setup,
    episodes: usize,
    eval_seed: u64,
) -> Result<Vec<MetricsRecord>, HarnessError> {
    let master = Rng::seed_from(eval_seed);
    (0..episodes)
        .into_par_iter()
        .map(|i| {
            run_episode(cfg, setup, master.derive(i as u64).state(), 0, &EvalPolicy::Expert)
        })
        .collect()
}

pub fn append_metrics(path: &Path, records: &[MetricsRecord]) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(
            file,
            "{}",
            serde_json::to_string(r).map_err(|e| HarnessError::Config(e.to_string()))?
        )?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| HarnessError::Config(format!("metrics line: {e}")))?,
        );
    }
    Ok(out)
}

pub fn mean_reward(records: &[MetricsRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.final_reward).sum::<f64>() / records.len() as f64
}
