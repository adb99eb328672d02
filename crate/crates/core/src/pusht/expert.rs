//! Scripted demonstrator: a two-phase geometric controller that navigates
//! around the block to a push-approach point for the dominant pose error,
//! then presses along the error-reducing face normal. Pure function of the
//! state, scale-aware through the instance parameters.
//!
//! Contact resolution moves the block along the contacted face's normal, so
//! the controller only ever pushes faces square-on: translation picks the
//! face whose inward normal best aligns with the position error and presses
//! through the centroid's foot point (torque-free); rotation picks the face
//! point with the largest correctly-signed torque arm.

use super::shape::{segment_clears_block, Pose2, TShape};
use super::{reward, PushTConfig, PushTState};
use crate::geom::Vec3;

fn wrap_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(std::f64::consts::TAU);
    if x > std::f64::consts::PI {
        x -= std::f64::consts::TAU;
    }
    x
}

struct Push {
    contact: [f64; 2],
    dir: [f64; 2],
    /// Signed torque arm of the press about the centroid.
    torque: f64,
    /// Inward face normal alignment with the desired translation.
    align: f64,
}

/// Candidate face presses: several contact points per outline edge, keeping
/// only those whose approach point the agent disk can actually occupy
/// (concave notches near the bar/stem junction are filtered out here). The
/// outline is counter-clockwise, so the interior is left of each edge.
fn candidate_pushes(
    tee: &TShape,
    pose: &Pose2,
    desired: [f64; 2],
    margin: f64,
    standoff: f64,
    radius: f64,
) -> Vec<Push> {
    let centroid = tee.world_centroid(pose);
    let corners = tee.world_corners(pose);
    let mut out = Vec::new();
    for i in 0..corners.len() {
        let a = corners[i];
        let b = corners[(i + 1) % corners.len()];
        let t = [b.x - a.x, b.y - a.y];
        let len = (t[0] * t[0] + t[1] * t[1]).sqrt();
        if len < 2.2 * margin {
            continue; // face too small for the agent disk
        }
        let th = [t[0] / len, t[1] / len];
        let n_in = [-th[1], th[0]];
        // Foot of the centroid plus spread points along the face.
        let foot = ((centroid[0] - a.x) * th[0] + (centroid[1] - a.y) * th[1])
            .clamp(margin, len - margin);
        let mut us = vec![foot, margin, len - margin, 0.5 * len];
        us.retain(|u| (margin..=len - margin).contains(u));
        for u in us {
            let contact = [a.x + th[0] * u, a.y + th[1] * u];
            let approach = [contact[0] - n_in[0] * standoff, contact[1] - n_in[1] * standoff];
            if super::shape::distance_to_block(tee, pose, approach) < 0.95 * radius {
                continue;
            }
            let arm = [contact[0] - centroid[0], contact[1] - centroid[1]];
            out.push(Push {
                contact,
                dir: n_in,
                torque: arm[0] * n_in[1] - arm[1] * n_in[0],
                align: n_in[0] * desired[0] + n_in[1] * desired[1],
            });
        }
    }
    out
}

/// Best press for translating along `desired`: aligned normal, small
/// residual torque, preferring contacts near the agent.
fn translation_push(candidates: Vec<Push>, agent: [f64; 2], unit: f64) -> Option<Push> {
    candidates
        .into_iter()
        .filter(|p| p.align > 0.0)
        .max_by(|x, y| {
            let near = |p: &Push| {
                let d = ((p.contact[0] - agent[0]).powi(2) + (p.contact[1] - agent[1]).powi(2))
                    .sqrt();
                d / unit
            };
            // Residual torque costs a rotation-fix session later; weigh it
            // well above walking distance.
            let sx = x.align - 0.25 * x.torque.abs() / unit - 0.015 * near(x).min(12.0);
            let sy = y.align - 0.25 * y.torque.abs() / unit - 0.015 * near(y).min(12.0);
            sx.partial_cmp(&sy).expect("finite scores")
        })
}

/// Best press for torque of the wanted sign (positive = CCW). Prefers
/// contacts near the agent and presses whose translation drift points
/// toward the goal rather than away from it.
fn rotation_push(candidates: Vec<Push>, sign: f64, agent: [f64; 2], unit: f64) -> Option<Push> {
    candidates
        .into_iter()
        .filter(|p| sign * p.torque > 1.2 * unit)
        .max_by(|x, y| {
            let near = |p: &Push| {
                let d = ((p.contact[0] - agent[0]).powi(2) + (p.contact[1] - agent[1]).powi(2))
                    .sqrt();
                d / unit
            };
            let sx = sign * x.torque / unit - 0.15 * near(x).min(8.0) + 1.5 * x.align;
            let sy = sign * y.torque / unit - 0.15 * near(y).min(8.0) + 1.5 * y.align;
            sx.partial_cmp(&sy).expect("finite scores")
        })
}

/// Absolute position target for the current state. Emitted targets are
/// capped to one control step of travel, so recorded demonstrations replay
/// exactly.
pub fn scripted_expert(cfg: &PushTConfig, state: &PushTState) -> Vec3 {
    let agent = [state.agent_pos.x, state.agent_pos.y];
    if reward(cfg, state) >= cfg.success_reward {
        return state.agent_pos; // deadband: stay put
    }

    let tee = state.shape(cfg);
    let pose = state.block_pose();
    let unit = cfg.unit * 0.5 * (state.instance.scale_x + state.instance.scale_y);
    let radius = state.instance.agent_radius;
    let centroid = tee.world_centroid(&pose);

    let goal_centroid = tee.world_centroid(&state.goal_pose());
    let e_pos = [goal_centroid[0] - centroid[0], goal_centroid[1] - centroid[1]];
    let e_pos_norm = (e_pos[0] * e_pos[0] + e_pos[1] * e_pos[1]).sqrt();
    let e_yaw = wrap_angle(state.goal_yaw - state.block_yaw);

    let tol_pos = 0.12 * unit;
    // Yaw tolerance loosens with distance: translation presses leak a
    // little yaw, and fixing it before the block is near the goal wastes a
    // round trip per press.
    let tol_yaw = 0.03 + 0.1 * (e_pos_norm / (3.0 * unit)).min(1.0);
    let margin = 0.9 * radius;
    let standoff = radius + 0.4 * unit;

    let desired = if e_pos_norm > 1e-9 {
        [e_pos[0] / e_pos_norm, e_pos[1] / e_pos_norm]
    } else {
        [1.0, 0.0]
    };
    let candidates = candidate_pushes(&tee, &pose, desired, margin, standoff, radius);
    // Yaw first: translation presses go through the centroid and preserve
    // yaw, while rotation presses drift the position, so the reverse order
    // thrashes.
    let (push, push_len) = if e_yaw.abs() > tol_yaw {
        match rotation_push(candidates, e_yaw.signum(), agent, unit) {
            Some(p) => (
                p,
                (e_yaw.abs() * 2.5 * unit).clamp(0.08 * unit, 1.0 * unit),
            ),
            None => return state.agent_pos,
        }
    } else if e_pos_norm > tol_pos {
        match translation_push(candidates, agent, unit) {
            Some(p) => (p, e_pos_norm.min(1.2 * unit)),
            None => return state.agent_pos,
        }
    } else {
        return state.agent_pos;
    };

    let (contact, dir) = (push.contact, push.dir);
    let approach = [contact[0] - dir[0] * standoff, contact[1] - dir[1] * standoff];

    // "In position" while inside a capsule around the push axis, behind the
    // contact; the approach point itself recedes as the block moves.
    let rel = [agent[0] - contact[0], agent[1] - contact[1]];
    let along = rel[0] * dir[0] + rel[1] * dir[1];
    let lateral = [rel[0] - along * dir[0], rel[1] - along * dir[1]];
    let lateral_dist = (lateral[0] * lateral[0] + lateral[1] * lateral[1]).sqrt();
    let in_position =
        lateral_dist < 0.12 * unit && along < 0.1 * unit && along > -(standoff + 1.5 * unit);

    // While pressing, cap the advance to the press depth itself: a
    // full-speed step would over-rotate past the tolerance and flip the
    // chosen corner every session.
    let press_cap = push_len.max(0.1 * unit);

    let target = if in_position {
        let t = [contact[0] + dir[0] * push_len, contact[1] + dir[1] * push_len];
        let dx = t[0] - agent[0];
        let dy = t[1] - agent[1];
        let d = (dx * dx + dy * dy).sqrt();
        if d > press_cap {
            [agent[0] + dx / d * press_cap, agent[1] + dy / d * press_cap]
        } else {
            t
        }
    } else if segment_clears_block(&tee, &pose, agent, approach, radius + 0.1 * unit) {
        approach
    } else {
        // Orbit the block on a clearance ring toward the approach angle.
        let ring = {
            let far = tee
                .world_corners(&pose)
                .iter()
                .map(|c| ((c.x - centroid[0]).powi(2) + (c.y - centroid[1]).powi(2)).sqrt())
                .fold(0.0f64, f64::max);
            far + radius + 0.4 * unit
        };
        let ang_a = (agent[1] - centroid[1]).atan2(agent[0] - centroid[0]);
        let ang_t = (approach[1] - centroid[1]).atan2(approach[0] - centroid[0]);
        let diff = wrap_angle(ang_t - ang_a);
        let dist_c = ((agent[0] - centroid[0]).powi(2) + (agent[1] - centroid[1]).powi(2)).sqrt();
        if diff.abs() < 0.1 {
            // At the right bearing but the conservative straight-line check
            // failed; commit to the approach point and let the closed loop
            // sort out the contact.
            approach
        } else if dist_c < ring - 0.5 * unit {
            // Move radially outward first.
            [
                centroid[0] + (ring / dist_c.max(1e-9)) * (agent[0] - centroid[0]),
                centroid[1] + (ring / dist_c.max(1e-9)) * (agent[1] - centroid[1]),
            ]
        } else {
            let step = diff.clamp(-0.5, 0.5);
            let ang = ang_a + step;
            [centroid[0] + ring * ang.cos(), centroid[1] + ring * ang.sin()]
        }
    };

    // Cap to reachable travel so the recorded action matches the realized
    // agent position.
    let dx = target[0] - agent[0];
    let dy = target[1] - agent[1];
    let d = (dx * dx + dy * dy).sqrt();
    let cap = state.instance.max_step;
    if d <= cap {
        Vec3::new(target[0], target[1], 0.0)
    } else {
        Vec3::new(agent[0] + dx / d * cap, agent[1] + dy / d * cap, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rng;
    use crate::pusht::{catalog::ORIGINAL_CATALOG, reset, step, InstanceParams, Setup};

    #[test]
    fn expert_is_deterministic() {
        let cfg = PushTConfig::default();
        let mut rng = Rng::seed_from(3);
        let s = reset(&cfg, Setup::Original, &mut rng);
        assert_eq!(scripted_expert(&cfg, &s), scripted_expert(&cfg, &s));
    }

    #[test]
    fn expert_stays_put_at_the_goal() {
        let cfg = PushTConfig::default();
        let s = PushTState {
            block_pos: Vec3::new(cfg.goal_x, cfg.goal_y, 0.0),
            block_yaw: cfg.goal_yaw,
            agent_pos: Vec3::new(60.0, 60.0, 0.0),
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
        assert_eq!(scripted_expert(&cfg, &s), s.agent_pos);
    }

    /// Closed-loop adequacy audit: from every catalog pose the expert
    /// reaches reward ≥ 0.9 within 300 control steps.
    #[test]
    fn expert_solves_every_catalog_pose() {
        let cfg = PushTConfig::default();
        for (i, pose) in ORIGINAL_CATALOG.iter().enumerate() {
            let mut s = PushTState {
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
            let mut best: f64 = 0.0;
            for _ in 0..cfg.max_episode_steps {
                let action = scripted_expert(&cfg, &s);
                let (next, done) = step(&cfg, &s, action);
                s = next;
                best = best.max(reward(&cfg, &s));
                if done {
                    break;
                }
            }
            let final_reward = reward(&cfg, &s);
            assert!(
                final_reward >= 0.9,
                "catalog pose {i}: final reward {final_reward:.3} (best seen {best:.3})"
            );
        }
    }
}

