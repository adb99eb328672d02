//! Deterministic 3D-embedded Push-T benchmark.
//!
//! A disk agent pushes a T-shaped block toward a fixed goal pose on the
//! ground plane (z = 0) of a 512 × 512 workspace. Dynamics are quasi-static:
//! the agent is a kinematic disk, and any penetration with the block is
//! resolved by translating and rotating the block with an effective-inertia
//! split, which makes trajectories exactly equivariant under in-plane
//! similarity transforms of the whole task instance. The reward is the exact
//! fraction of the T's area overlapping the goal footprint.

pub mod catalog;
pub mod demo;
pub mod expert;
pub mod shape;

use thiserror::Error;

use crate::geom::{Rng, Vec3};
use crate::policy::{Action, Observation, ProprioState};
use shape::{closest_on_boundary, intersection_area, Pose2, TShape};

pub use demo::{read_demos, write_demos, Demo, DemoHeader, DemoSet, DemoStep};

#[derive(Debug, Error)]
pub enum PushTError {
    #[error("unknown evaluation setup tag: {0}")]
    UnknownSetup(String),
    #[error("demo file corrupt: {0}")]
    DemoFormat(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Evaluation distributions from the narrowest to the widest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Setup {
    /// Catalog poses exactly as demonstrated.
    #[serde(rename = "original")]
    Original,
    /// Random in-plane rotation plus uniform instance scale in [1, 2].
    #[serde(rename = "r+su")]
    RotScaleUniform,
    /// As above plus non-uniform stretch up to a 1.33 aspect-ratio change.
    #[serde(rename = "r+sn")]
    RotScaleNonUniform,
    /// As above plus large position randomization over the central 80%.
    #[serde(rename = "r+sn+p")]
    RotScaleNonUniformPos,
}

impl Setup {
    pub const ALL: [Setup; 4] = [
        Setup::Original,
        Setup::RotScaleUniform,
        Setup::RotScaleNonUniform,
        Setup::RotScaleNonUniformPos,
    ];

    pub fn parse(tag: &str) -> Result<Setup, PushTError> {
        match tag.to_ascii_lowercase().as_str() {
            "original" => Ok(Setup::Original),
            "r+su" | "rsu" | "r-su" => Ok(Setup::RotScaleUniform),
            "r+sn" | "rsn" | "r-sn" => Ok(Setup::RotScaleNonUniform),
            "r+sn+p" | "rsnp" | "r-sn-p" => Ok(Setup::RotScaleNonUniformPos),
            other => Err(PushTError::UnknownSetup(other.to_string())),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Setup::Original => "original",
            Setup::RotScaleUniform => "r+su",
            Setup::RotScaleNonUniform => "r+sn",
            Setup::RotScaleNonUniformPos => "r+sn+p",
        }
    }
}

/// Task parameters shared by every episode; per-episode size/speed live in
/// [`InstanceParams`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PushTConfig {
    /// Square workspace side in pixels.
    pub workspace: f64,
    /// T unit length L: bar 4L × L, stem L × 3L.
    pub unit: f64,
    pub agent_radius: f64,
    /// Maximum agent travel per control step.
    pub max_step: f64,
    /// Kinematic sub-steps per control step (contact stability).
    pub substeps: usize,
    /// Fraction of the remaining penetration resolved per iteration.
    pub push_gain: f64,
    /// Scales the rotational share of penetration resolution.
    pub rot_gain: f64,
    pub max_episode_steps: usize,
    /// Reward level that ends an episode early.
    pub success_reward: f64,
    pub goal_x: f64,
    pub goal_y: f64,
    pub goal_yaw: f64,
}

impl Default for PushTConfig {
    fn default() -> Self {
        PushTConfig {
            workspace: 512.0,
            unit: 30.0,
            agent_radius: 15.0,
            max_step: 24.0,
            substeps: 8,
            push_gain: 1.0,
            rot_gain: 1.0,
            max_episode_steps: 300,
            success_reward: 0.92,
            goal_x: 256.0,
            goal_y: 238.0,
            goal_yaw: std::f64::consts::FRAC_PI_4,
        }
    }
}

/// Per-episode instance parameters; OOD setups scale the whole instance so
/// the task remains a group transform of a catalog pose.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InstanceParams {
    pub scale_x: f64,
    pub scale_y: f64,
    pub agent_radius: f64,
    pub max_step: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PushTState {
    pub block_pos: Vec3,
    pub block_yaw: f64,
    pub agent_pos: Vec3,
    pub goal_pos: Vec3,
    pub goal_yaw: f64,
    pub instance: InstanceParams,
    pub steps: usize,
}

impl PushTState {
    pub fn block_pose(&self) -> Pose2 {
        Pose2 { pos: self.block_pos, yaw: self.block_yaw }
    }

    pub fn goal_pose(&self) -> Pose2 {
        Pose2 { pos: self.goal_pos, yaw: self.goal_yaw }
    }

    pub fn shape(&self, cfg: &PushTConfig) -> TShape {
        TShape {
            unit: cfg.unit,
            scale_x: self.instance.scale_x,
            scale_y: self.instance.scale_y,
        }
    }
}

/// Seeded episode initialization for one of the four evaluation setups.
pub fn reset(cfg: &PushTConfig, setup: Setup, rng: &mut Rng) -> PushTState {
    let pose = catalog::ORIGINAL_CATALOG[rng.below(catalog::ORIGINAL_CATALOG.len())];
    let mut state = PushTState {
        block_pos: Vec3::new(pose.block_x, pose.block_y, 0.0),
        block_yaw: pose.block_yaw,
        agent_pos: Vec3::new(pose.agent_x, pose.agent_y, 0.0),
        goal_pos: Vec3::new(cfg.goal_x, cfg.goal_y, 0.0),
        goal_yaw: cfg.goal_yaw,
        instance: InstanceParams {
            scale_x: 1.0,
            scale_y: 1.0,
            agent_radius: cfg.agent_radius,
            max_step: cfg.max_step,
        },
        steps: 0,
    };
    match setup {
        Setup::Original => {}
        Setup::RotScaleUniform => {
            let phi = rng.range(0.0, std::f64::consts::TAU);
            let scale = rng.range(1.0, 2.0);
            transform_instance(&mut state, cfg, phi, scale, [0.0, 0.0]);
        }
        Setup::RotScaleNonUniform => {
            let phi = rng.range(0.0, std::f64::consts::TAU);
            let scale = rng.range(1.0, 2.0);
            let aspect = rng.range(1.0 / 1.33, 1.33);
            transform_instance(&mut state, cfg, phi, scale, [0.0, 0.0]);
            state.instance.scale_x *= aspect.sqrt();
            state.instance.scale_y /= aspect.sqrt();
        }
        Setup::RotScaleNonUniformPos => {
            let phi = rng.range(0.0, std::f64::consts::TAU);
            let scale = rng.range(1.0, 2.0);
            let aspect = rng.range(1.0 / 1.33, 1.33);
            transform_instance(&mut state, cfg, phi, scale, [0.0, 0.0]);
            state.instance.scale_x *= aspect.sqrt();
            state.instance.scale_y /= aspect.sqrt();
            // Land the block uniformly over the central 80%.
            let margin = 0.1 * cfg.workspace;
            let tx = rng.range(margin, cfg.workspace - margin) - state.block_pos.x;
            let ty = rng.range(margin, cfg.workspace - margin) - state.block_pos.y;
            for p in [&mut state.block_pos, &mut state.goal_pos, &mut state.agent_pos] {
                p.x += tx;
                p.y += ty;
            }
        }
    }
    state
}

/// Apply an in-plane similarity about the workspace centre to the whole
/// instance: poses, goal, agent, and the size/speed parameters. Trajectories
/// commute with this map, which is what the OOD setups and the augmentation
/// replay oracle rely on.
pub fn transform_instance(
    state: &mut PushTState,
    cfg: &PushTConfig,
    phi: f64,
    scale: f64,
    offset: [f64; 2],
) {
    let c = 0.5 * cfg.workspace;
    let (s, co) = phi.sin_cos();
    let map = |p: Vec3| -> Vec3 {
        let dx = p.x - c;
        let dy = p.y - c;
        Vec3::new(
            c + scale * (co * dx - s * dy) + offset[0],
            c + scale * (s * dx + co * dy) + offset[1],
            0.0,
        )
    };
    state.block_pos = map(state.block_pos);
    state.goal_pos = map(state.goal_pos);
    state.agent_pos = map(state.agent_pos);
    state.block_yaw += phi;
    state.goal_yaw += phi;
    state.instance.scale_x *= scale;
    state.instance.scale_y *= scale;
    state.instance.agent_radius *= scale;
    state.instance.max_step *= scale;
}

/// Quasi-static contact resolution: push the block out of the agent disk,
/// splitting the correction between translation and rotation by effective
/// inertia. A centred (symmetric) contact yields pure translation.
fn resolve_contact(cfg: &PushTConfig, state: &mut PushTState) {
    let radius = state.instance.agent_radius;
    for _ in 0..4 {
        let tee = state.shape(cfg);
        let pose = state.block_pose();
        let c = [state.agent_pos.x, state.agent_pos.y];
        let (q, inside) = closest_on_boundary(&tee, &pose, c);
        let dq = [q[0] - c[0], q[1] - c[1]];
        let dist = (dq[0] * dq[0] + dq[1] * dq[1]).sqrt();
        let depth = if inside { radius + dist } else { radius - dist };
        if depth <= 1e-9 {
            break;
        }
        // Push direction: away from the agent (outside) or away from the
        // nearest wall (inside).
        let dir = if dist > 1e-12 {
            let sign = if inside { -1.0 } else { 1.0 };
            [sign * dq[0] / dist, sign * dq[1] / dist]
        } else {
            // Agent centre exactly on the boundary: push along the outward
            // line from the block centroid.
            let centroid = tee.world_centroid(&pose);
            let d = [c[0] - centroid[0], c[1] - centroid[1]];
            let n = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-9);
            [-d[0] / n, -d[1] / n]
        };
        let centroid = tee.world_centroid(&pose);
        let arm = [q[0] - centroid[0], q[1] - centroid[1]];
        let arm_cross = arm[0] * dir[1] - arm[1] * dir[0];
        let inertia = tee.inertia_per_area();
        let k_eff = 1.0 / (1.0 + cfg.rot_gain * arm_cross * arm_cross / inertia);
        let impulse = cfg.push_gain * depth * k_eff;
        let dyaw = cfg.rot_gain * impulse * arm_cross / inertia;
        // Translate, then rotate the block pose about its centroid.
        let (sy, cy) = dyaw.sin_cos();
        let rel = [
            state.block_pos.x - centroid[0] + impulse * dir[0],
            state.block_pos.y - centroid[1] + impulse * dir[1],
        ];
        state.block_pos = Vec3::new(
            centroid[0] + impulse * dir[0] + cy * (rel[0] - impulse * dir[0])
                - sy * (rel[1] - impulse * dir[1]),
            centroid[1] + impulse * dir[1] + sy * (rel[0] - impulse * dir[0])
                + cy * (rel[1] - impulse * dir[1]),
            0.0,
        );
        state.block_yaw += dyaw;
    }
}

/// Advance one control step toward an absolute agent position target.
/// The target's z must be ~0 and is clamped; motion is capped by the
/// instance speed and split into sub-steps with contact resolution.
pub fn step(cfg: &PushTConfig, state: &PushTState, action: Vec3) -> (PushTState, bool) {
    let mut s = state.clone();
    let target = [action.x, action.y]; // z clamped to the plane
    let per_substep = s.instance.max_step / cfg.substeps as f64;
    for _ in 0..cfg.substeps {
        let dx = target[0] - s.agent_pos.x;
        let dy = target[1] - s.agent_pos.y;
        let d = (dx * dx + dy * dy).sqrt();
        if d > 1e-12 {
            let step_len = d.min(per_substep);
            s.agent_pos = Vec3::new(
                s.agent_pos.x + dx / d * step_len,
                s.agent_pos.y + dy / d * step_len,
                0.0,
            );
        }
        resolve_contact(cfg, &mut s);
    }
    s.steps += 1;
    let r = reward(cfg, &s);
    let done = r >= cfg.success_reward || s.steps >= cfg.max_episode_steps;
    (s, done)
}

/// Fraction of the block's area overlapping the goal footprint, in [0, 1];
/// exactly 1 iff the poses coincide.
pub fn reward(cfg: &PushTConfig, state: &PushTState) -> f64 {
    let tee = state.shape(cfg);
    let inter = intersection_area(&tee, &state.block_pose(), &state.goal_pose());
    (inter / tee.area()).clamp(0.0, 1.0)
}

/// Observation: the eight T corners as the scene cloud plus the agent
/// position as the only proprioception.
pub fn observe(cfg: &PushTConfig, state: &PushTState) -> Observation {
    let corners = state.shape(cfg).world_corners(&state.block_pose());
    Observation {
        cloud: crate::geom::PointCloud::new(corners.to_vec()).expect("eight corners"),
        proprio: ProprioState::positions_only(vec![state.agent_pos]),
    }
}

/// Push-T action layout: one absolute position target.
pub fn action_layout() -> crate::policy::ActionLayout {
    crate::policy::ActionLayout::new(vec![crate::geom::FieldKind::Point], 0, 0)
}

pub fn action_from_target(target: Vec3) -> Action {
    Action::from_v_parts(vec![Vec3::new(target.x, target.y, 0.0)])
}

pub fn target_from_action(action: &Action) -> Vec3 {
    let p = action.v_parts[0];
    Vec3::new(p.x, p.y, 0.0)
}
