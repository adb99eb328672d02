//! Demo generation and the training loop.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use super::checkpoint::{checkpoint_path, Checkpoint, CHECKPOINT_VERSION};
use super::data::{build_windows, make_batch};
use super::optim::{cosine_lr, AdamState};
use super::{HarnessError, RunConfig};
use crate::diffusion::{fit_normalizer, make_schedule, training_loss, Normalizer};
use crate::geom::Rng;
use crate::policy::PolicyModel;
use crate::pusht::{
    self, action_from_target, catalog::ORIGINAL_CATALOG, demo::augment, expert::scripted_expert,
    observe, Demo, DemoHeader, DemoSet, DemoStep, Setup,
};

/// Roll the scripted expert from catalog pose `pose_idx`.
pub fn record_expert_demo(cfg: &RunConfig, pose_idx: usize, seed: u64) -> Demo {
    let task = &cfg.task;
    let pose = ORIGINAL_CATALOG[pose_idx % ORIGINAL_CATALOG.len()];
    let initial = pusht::PushTState {
        block_pos: crate::geom::Vec3::new(pose.block_x, pose.block_y, 0.0),
        block_yaw: pose.block_yaw,
        agent_pos: crate::geom::Vec3::new(pose.agent_x, pose.agent_y, 0.0),
        goal_pos: crate::geom::Vec3::new(task.goal_x, task.goal_y, 0.0),
        goal_yaw: task.goal_yaw,
        instance: pusht::InstanceParams {
            scale_x: 1.0,
            scale_y: 1.0,
            agent_radius: task.agent_radius,
            max_step: task.max_step,
        },
        steps: 0,
    };
    let mut state = initial.clone();
    let mut steps = Vec::new();
    for _ in 0..task.max_episode_steps {
        let obs = observe(task, &state);
        let target = scripted_expert(task, &state);
        steps.push(DemoStep { obs, action: action_from_target(target) });
        let (next, done) = pusht::step(task, &state, target);
        state = next;
        if done {
            break;
        }
    }
    Demo {
        seed,
        setup: Setup::Original,
        initial,
        steps,
        final_reward: pusht::reward(task, &state),
    }
}

/// Generate `cfg.demos` expert episodes over the catalog and write them
/// plus a manifest. Regeneration with the same config is byte-identical.
pub fn generate_demos(cfg: &RunConfig, out_dir: &Path) -> Result<DemoSet, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let master = Rng::seed_from(cfg.seed);
    let demos: Vec<Demo> = (0..cfg.demos)
        .map(|i| record_expert_demo(cfg, i, master.derive(i as u64).state()))
        .collect();
    let set = DemoSet {
        header: DemoHeader {
            version: pusht::demo::DEMO_FORMAT_VERSION,
            config_hash: cfg.hash(),
            obs_horizon: cfg.policy.obs_horizon,
            pred_horizon: cfg.policy.pred_horizon,
            act_horizon: cfg.policy.act_horizon,
        },
        demos,
    };
    pusht::write_demos(&out_dir.join("demos.jsonl"), &set)?;
    let summary = serde_json::json!({
        "count": set.demos.len(),
        "master_seed": cfg.seed,
        "config_hash": cfg.hash(),
        "mean_final_reward": set.demos.iter().map(|d| d.final_reward).sum::<f64>()
            / set.demos.len().max(1) as f64,
        "mean_length": set.demos.iter().map(|d| d.steps.len()).sum::<usize>() as f64
            / set.demos.len().max(1) as f64,
    });
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&summary).expect("manifest serializes"),
    )?;
    Ok(set)
}

pub fn load_demoset(cfg: &RunConfig, path: &Path) -> Result<DemoSet, HarnessError> {
    let set = pusht::read_demos(path)?;
    if set.header.obs_horizon != cfg.policy.obs_horizon
        || set.header.pred_horizon != cfg.policy.pred_horizon
        || set.header.act_horizon != cfg.policy.act_horizon
    {
        return Err(HarnessError::DemoMismatch(format!(
            "demo horizons {}/{}/{} do not match config {}/{}/{}",
            set.header.obs_horizon,
            set.header.pred_horizon,
            set.header.act_horizon,
            cfg.policy.obs_horizon,
            cfg.policy.pred_horizon,
            cfg.policy.act_horizon,
        )));
    }
    Ok(set)
}

/// Fit the normalizer; augmented variants include transformed copies so
/// their min-max tables cover the training distribution they will see.
pub fn fit_run_normalizer(cfg: &RunConfig, demos: &[Demo]) -> Result<Normalizer, HarnessError> {
    if cfg.variant.augmented() {
        let mut rng = Rng::seed_from(cfg.seed ^ 0xA06_FEED);
        let mut expanded: Vec<Demo> = demos.to_vec();
        for demo in demos {
            for _ in 0..2 {
                expanded.push(augment(demo, &cfg.policy.layout, cfg.task.workspace, &mut rng));
            }
        }
        let pairs = expanded
            .iter()
            .flat_map(|d| d.steps.iter().map(|s| (&s.obs, &s.action)));
        Ok(fit_normalizer(pairs, &cfg.policy.layout)?)
    } else {
        let pairs = demos
            .iter()
            .flat_map(|d| d.steps.iter().map(|s| (&s.obs, &s.action)));
        Ok(fit_normalizer(pairs, &cfg.policy.layout)?)
    }
}

pub struct TrainReport {
    pub final_checkpoint: Checkpoint,
    pub losses: Vec<(usize, f64)>,
}

/// Train from scratch or resume from a checkpoint; either way the epoch
/// stream is identical to an uninterrupted run. Checkpoints are written
/// every `checkpoint_interval` epochs and at the end; per-epoch mean losses
/// append to `loss_curve.jsonl`.
pub fn train(
    cfg: &RunConfig,
    demos: &DemoSet,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainReport, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let schedule = make_schedule(cfg.diffusion_steps)?;

    let mut params = crate::autodiff::ParamSet::new();
    let mut build_rng = Rng::seed_from(cfg.seed);
    let model = PolicyModel::build(
        cfg.variant.model_kind(),
        cfg.policy.clone(),
        &mut params,
        &mut build_rng,
    )?;

    let (mut params, mut opt, norm, mut train_rng, start_epoch) = match resume {
        Some(ckpt) => {
            if ckpt.config != *cfg {
                return Err(HarnessError::Checkpoint(
                    "resume config differs from checkpoint config".into(),
                ));
            }
            (
                ckpt.params,
                ckpt.optimizer,
                ckpt.normalizer,
                Rng::restore(ckpt.rng_state),
                ckpt.epoch,
            )
        }
        None => {
            let norm = fit_run_normalizer(cfg, &demos.demos)?;
            let opt = AdamState::new(&params);
            (params, opt, norm, Rng::seed_from(cfg.seed ^ 0x7124_11), 0)
        }
    };

    let windows = build_windows(&demos.demos, cfg.window_stride);
    if windows.is_empty() {
        return Err(HarnessError::DemoMismatch("no training windows".into()));
    }

    let mut losses = Vec::new();
    let mut curve = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("loss_curve.jsonl"))?;

    for epoch in start_epoch..cfg.epochs {
        let lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        train_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for picks in order.chunks(cfg.batch_size) {
            let mut aug_rng = train_rng.derive(batches as u64 ^ 0x9A9);
            let batch = make_batch(
                &demos.demos,
                &windows,
                picks,
                cfg.policy.obs_horizon,
                cfg.policy.pred_horizon,
                cfg.variant.augmented(),
                &cfg.policy.layout,
                cfg.task.workspace,
                &mut aug_rng,
            );
            let (loss, grads) =
                training_loss(&model, &params, &norm, &batch, &schedule, &mut train_rng)?;
            opt.apply(&mut params, &grads, lr);
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches.max(1) as f64;
        losses.push((epoch + 1, mean));
        writeln!(curve, "{}", serde_json::json!({"epoch": epoch + 1, "loss": mean}))?;

        let at_interval = (epoch + 1) % cfg.checkpoint_interval.max(1) == 0;
        if at_interval || epoch + 1 == cfg.epochs {
            let ckpt = Checkpoint {
                version: CHECKPOINT_VERSION,
                config: cfg.clone(),
                epoch: epoch + 1,
                params: params.clone(),
                optimizer: opt.clone(),
                normalizer: norm.clone(),
                rng_state: train_rng.state(),
            };
            ckpt.save(&checkpoint_path(out_dir, epoch + 1))?;
        }
    }

    let final_checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        epoch: cfg.epochs,
        params: params.clone(),
        optimizer: opt.clone(),
        normalizer: norm,
        rng_state: train_rng.state(),
    };
    Ok(TrainReport { final_checkpoint, losses })
}

/// Parallel evaluation helper used by tests: mean loss over a window set
/// without updating parameters.
pub fn dataset_loss(
    cfg: &RunConfig,
    model: &PolicyModel,
    params: &crate::autodiff::ParamSet,
    norm: &Normalizer,
    demos: &[Demo],
    seed: u64,
) -> Result<f64, HarnessError> {
    let schedule = make_schedule(cfg.diffusion_steps)?;
    let windows = build_windows(demos, cfg.window_stride);
    let losses: Vec<f64> = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let sample = super::data::make_sample(
                &demos[w.demo],
                w.start,
                cfg.policy.obs_horizon,
                cfg.policy.pred_horizon,
            );
            let mut rng = Rng::seed_from(seed).derive(i as u64);
            let (loss, _) = training_loss(
                model,
                params,
                norm,
                std::slice::from_ref(&sample),
                &schedule,
                &mut rng,
            )
            .expect("loss evaluates");
            loss
        })
        .collect();
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}
