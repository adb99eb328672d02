//! Demonstration records and their file format, plus the training-time
//! augmentation used by the dp-baseline+aug variant.
//!
//! Files are JSON lines: a header record (format version, config hash,
//! horizons) followed by one demo per line. Serialization round-trips
//! byte-exactly: floats use shortest-round-trip rendering and field order is
//! fixed by the struct definitions.

use std::io::{BufRead, Write};
use std::path::Path;

use super::{PushTError, PushTState, Setup};
use crate::geom::{Mat3, Rng, Sim3, Vec3};
use crate::policy::{transform_action, transform_observation, Action, ActionLayout, Observation};

pub const DEMO_FORMAT_VERSION: u32 = 1;

/// One control step: the observation seen and the action taken from it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DemoStep {
    pub obs: Observation,
    pub action: Action,
}

/// One scripted episode.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Demo {
    pub seed: u64,
    pub setup: Setup,
    pub initial: PushTState,
    pub steps: Vec<DemoStep>,
    pub final_reward: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DemoHeader {
    pub version: u32,
    pub config_hash: u64,
    pub obs_horizon: usize,
    pub pred_horizon: usize,
    pub act_horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub header: DemoHeader,
    pub demos: Vec<Demo>,
}

pub fn write_demos(path: &Path, set: &DemoSet) -> Result<(), PushTError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = serde_json::to_string(&set.header)
        .map_err(|e| PushTError::DemoFormat(e.to_string()))?;
    writeln!(file, "{header}")?;
    for demo in &set.demos {
        let line =
            serde_json::to_string(demo).map_err(|e| PushTError::DemoFormat(e.to_string()))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn read_demos(path: &Path) -> Result<DemoSet, PushTError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| PushTError::DemoFormat("empty demo file".into()))??;
    let header: DemoHeader = serde_json::from_str(&header_line)
        .map_err(|e| PushTError::DemoFormat(format!("header: {e}")))?;
    if header.version != DEMO_FORMAT_VERSION {
        return Err(PushTError::DemoFormat(format!(
            "unsupported format version {} (expected {DEMO_FORMAT_VERSION})",
            header.version
        )));
    }
    let mut demos = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        demos.push(
            serde_json::from_str(&line)
                .map_err(|e| PushTError::DemoFormat(format!("demo: {e}")))?,
        );
    }
    Ok(DemoSet { header, demos })
}

/// Augmentation transform: rotation up to 360° about z (around the
/// workspace centre), uniform scale in [0.5, 1.5], and a Gaussian in-plane
/// offset with σ = 0.1 × workspace.
pub fn draw_augmentation(workspace: f64, rng: &mut Rng) -> Sim3 {
    let phi = rng.range(0.0, std::f64::consts::TAU);
    let scale = rng.range(0.5, 1.5);
    let sigma = 0.1 * workspace;
    let offset = Vec3::new(sigma * rng.normal(), sigma * rng.normal(), 0.0);
    let c = Vec3::new(0.5 * workspace, 0.5 * workspace, 0.0);
    let rot = Mat3::rot_z(phi);
    // x ↦ s·R·(x − c) + c + offset, folded into a single group element.
    let t = c + offset - rot.mul_vec(c) * scale;
    Sim3::new(rot, t, scale).expect("in-plane similarity is a valid transform")
}

/// Apply one drawn similarity consistently to every observation and action
/// of an episode.
pub fn augment(demo: &Demo, layout: &ActionLayout, workspace: f64, rng: &mut Rng) -> Demo {
    let t = draw_augmentation(workspace, rng);
    augment_with(demo, layout, &t)
}

pub fn augment_with(demo: &Demo, layout: &ActionLayout, t: &Sim3) -> Demo {
    let steps = demo
        .steps
        .iter()
        .map(|s| DemoStep {
            obs: transform_observation(t, &s.obs).expect("demo directions are unit"),
            action: transform_action(t, layout, &s.action).expect("demo layout matches"),
        })
        .collect();
    Demo {
        seed: demo.seed,
        setup: demo.setup,
        initial: demo.initial.clone(),
        steps,
        final_reward: demo.final_reward,
    }
}
