//! Training windows over demo episodes: every `stride`-th timestep opens a
//! window of `T_o` past observations (front-padded) and `T_p` future
//! actions (back-padded by repeating the last action, which teaches the
//! policy to hold position at the goal).

use crate::diffusion::TrainSample;
use crate::geom::Rng;
use crate::policy::ActionLayout;
use crate::pusht::{demo::augment_with, demo::draw_augmentation, Demo};

/// Index of one training window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub demo: usize,
    pub start: usize,
}

pub fn build_windows(demos: &[Demo], stride: usize) -> Vec<WindowRef> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for (d, demo) in demos.iter().enumerate() {
        let mut t = 0;
        while t < demo.steps.len() {
            out.push(WindowRef { demo: d, start: t });
            t += stride;
        }
    }
    out
}

/// Materialize a window into a training sample.
pub fn make_sample(demo: &Demo, start: usize, obs_horizon: usize, pred_horizon: usize) -> TrainSample {
    let len = demo.steps.len();
    let obs = (0..obs_horizon)
        .map(|f| {
            let idx = (start + f).saturating_sub(obs_horizon - 1).min(len - 1);
            demo.steps[idx].obs.clone()
        })
        .collect();
    let actions = (0..pred_horizon)
        .map(|j| demo.steps[(start + j).min(len - 1)].action.clone())
        .collect();
    TrainSample { obs, actions }
}

/// Assemble one batch; augmented variants draw a fresh similarity per
/// sample, applied to a single-window episode so observations and actions
/// stay consistent.
#[allow(clippy::too_many_arguments)]
pub fn make_batch(
    demos: &[Demo],
    windows: &[WindowRef],
    picks: &[usize],
    obs_horizon: usize,
    pred_horizon: usize,
    augment: bool,
    layout: &ActionLayout,
    workspace: f64,
    aug_rng: &mut Rng,
) -> Vec<TrainSample> {
    picks
        .iter()
        .map(|&w| {
            let win = windows[w];
            if augment {
                let t = draw_augmentation(workspace, aug_rng);
                let view = window_demo(&demos[win.demo], win.start, obs_horizon, pred_horizon);
                let aug = augment_with(&view, layout, &t);
                make_sample(&aug, obs_horizon - 1, obs_horizon, pred_horizon)
            } else {
                make_sample(&demos[win.demo], win.start, obs_horizon, pred_horizon)
            }
        })
        .collect()
}

/// Slice out exactly the steps a window touches as a miniature demo, so the
/// augmentation transform applies to a consistent episode fragment.
fn window_demo(demo: &Demo, start: usize, obs_horizon: usize, pred_horizon: usize) -> Demo {
    let len = demo.steps.len();
    let lo = start.saturating_sub(obs_horizon - 1).min(len - 1);
    let mut steps = Vec::with_capacity(obs_horizon + pred_horizon);
    // Front padding by repetition keeps index arithmetic in make_sample
    // identical on the fragment.
    for f in 0..obs_horizon {
        let idx = (start + f).saturating_sub(obs_horizon - 1).min(len - 1);
        steps.push(demo.steps[idx].clone());
    }
    for j in 1..pred_horizon {
        steps.push(demo.steps[(start + j).min(len - 1)].clone());
    }
    Demo {
        seed: demo.seed,
        setup: demo.setup,
        initial: demo.initial.clone(),
        steps,
        final_reward: demo.final_reward,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::policy::{Action, Observation, ProprioState};
    use crate::pusht::{DemoStep, Setup};

    fn toy_demo(len: usize) -> Demo {
        let steps = (0..len)
            .map(|i| DemoStep {
                obs: Observation {
                    cloud: crate::geom::PointCloud::new(vec![
                        Vec3::new(i as f64, 0.0, 0.0),
                        Vec3::new(i as f64 + 1.0, 1.0, 0.0),
                    ])
                    .unwrap(),
                    proprio: ProprioState::positions_only(vec![Vec3::new(i as f64, 5.0, 0.0)]),
                },
                action: Action::from_v_parts(vec![Vec3::new(i as f64, -1.0, 0.0)]),
            })
            .collect();
        Demo {
            seed: 0,
            setup: Setup::Original,
            initial: crate::pusht::PushTState {
                block_pos: Vec3::ZERO,
                block_yaw: 0.0,
                agent_pos: Vec3::ZERO,
                goal_pos: Vec3::ZERO,
                goal_yaw: 0.0,
                instance: crate::pusht::InstanceParams {
                    scale_x: 1.0,
                    scale_y: 1.0,
                    agent_radius: 1.0,
                    max_step: 1.0,
                },
                steps: 0,
            },
            steps,
            final_reward: 1.0,
        }
    }

    #[test]
    fn windows_cover_each_demo_with_stride() {
        let demos = vec![toy_demo(10), toy_demo(5)];
        let w = build_windows(&demos, 2);
        assert_eq!(w.len(), 5 + 3);
        assert_eq!(w[0], WindowRef { demo: 0, start: 0 });
        assert_eq!(w[5], WindowRef { demo: 1, start: 0 });
    }

    #[test]
    fn samples_pad_front_observations_and_tail_actions() {
        let demo = toy_demo(6);
        // Window at t = 0: the older frame repeats step 0.
        let s = make_sample(&demo, 0, 2, 4);
        assert_eq!(s.obs[0], demo.steps[0].obs);
        assert_eq!(s.obs[1], demo.steps[0].obs);
        // Window at t = 4 with horizon 4: actions 4,5,5,5.
        let s = make_sample(&demo, 4, 2, 4);
        assert_eq!(s.obs[0], demo.steps[3].obs);
        assert_eq!(s.obs[1], demo.steps[4].obs);
        assert_eq!(s.actions[0], demo.steps[4].action);
        assert_eq!(s.actions[1], demo.steps[5].action);
        assert_eq!(s.actions[2], demo.steps[5].action);
        assert_eq!(s.actions[3], demo.steps[5].action);
    }

    #[test]
    fn augmented_batches_transform_obs_and_actions_consistently() {
        let demos = vec![toy_demo(8)];
        let windows = build_windows(&demos, 1);
        let layout = crate::pusht::action_layout();
        let mut rng = Rng::seed_from(5);
        let batch = make_batch(&demos, &windows, &[3], 2, 4, true, &layout, 512.0, &mut rng);
        let plain = make_sample(&demos[0], 3, 2, 4);
        let sample = &batch[0];
        // Same transform must map the plain sample onto the augmented one:
        // recover it from a cloud point pair and check the action.
        let a0 = plain.obs[1].cloud.points()[0];
        let b0 = sample.obs[1].cloud.points()[0];
        let a1 = plain.obs[1].cloud.points()[1];
        let b1 = sample.obs[1].cloud.points()[1];
        let scale = ((b1 - b0).norm()) / ((a1 - a0).norm());
        assert!(scale > 0.4 && scale < 1.7);
        // Actions transformed with the same scale: compare segment lengths.
        let pa = plain.actions[0].v_parts[0] - plain.obs[1].cloud.points()[0];
        let pb = sample.actions[0].v_parts[0] - sample.obs[1].cloud.points()[0];
        assert!((pb.norm() / pa.norm() - scale).abs() < 1e-9);
    }

    #[test]
    fn unaugmented_batches_quote_the_demo_verbatim() {
        let demos = vec![toy_demo(8)];
        let windows = build_windows(&demos, 1);
        let layout = crate::pusht::action_layout();
        let mut rng = Rng::seed_from(6);
        let batch = make_batch(&demos, &windows, &[2, 5], 2, 4, false, &layout, 512.0, &mut rng);
        assert_eq!(batch[0].obs[1], demos[0].steps[2].obs);
        assert_eq!(batch[1].actions[0], demos[0].steps[5].action);
    }
}
