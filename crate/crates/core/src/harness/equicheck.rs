//! Equivariance audit: numerical suites over the encoder, the per-step
//! noise predictor, and the seeded full sampling chain. The suites hold by
//! construction for the equivariant variant at any weights — trained or
//! random — and discriminate: the plain baseline fails them by a wide
//! margin.

use crate::autodiff::ParamSet;
use crate::diffusion::{
    make_schedule, sample, NoiseSchedule, Normalizer, RecordingNoise, ReplayNoise, SamplerKind,
};
use crate::geom::{random_sim3, PointCloud, Rng, Vec3};
use crate::policy::{
    transform_action, transform_noise_action, transform_observation, Action, ModelKind,
    Observation, PolicyModel, ProprioState, ZAction,
};
use crate::vn::Ctx;

use super::HarnessError;

pub const ENCODER_TOL: f64 = 1e-8;
pub const EPS_TOL: f64 = 1e-8;
pub const SAMPLER_TOL: f64 = 1e-7;

#[derive(Debug, Clone, serde::Serialize)]
pub struct EquicheckReport {
    pub trials: usize,
    pub encoder_max_rel: f64,
    pub eps_max_rel: f64,
    pub sampler_max_rel: f64,
    pub encoder_tol: f64,
    pub eps_tol: f64,
    pub sampler_tol: f64,
    pub passed: bool,
}

impl EquicheckReport {
    pub fn print(&self) {
        println!("equivariance audit over {} random transforms", self.trials);
        let line = |name: &str, err: f64, tol: f64| {
            let status = if err <= tol { "PASS" } else { "FAIL" };
            println!("  {name:<22} max rel err {err:.3e}  (tol {tol:.0e})  {status}");
        };
        line("encoder latent", self.encoder_max_rel, self.encoder_tol);
        line("per-step noise", self.eps_max_rel, self.eps_tol);
        line("seeded sampler", self.sampler_max_rel, self.sampler_tol);
    }
}

fn synthetic_observation(cfg: &crate::policy::PolicyConfig, rng: &mut Rng) -> Observation {
    let cloud = PointCloud::new(
        (0..cfg.encoder.points_in.max(2))
            .map(|_| Vec3::new(rng.range(-2.0, 2.0), rng.range(-2.0, 2.0), rng.range(-2.0, 2.0)))
            .collect(),
    )
    .expect("non-empty cloud");
    let mut proprio = ProprioState {
        positions: (0..cfg.proprio.num_positions)
            .map(|_| Vec3::new(rng.range(-2.0, 2.0), rng.range(-2.0, 2.0), rng.range(-2.0, 2.0)))
            .collect(),
        directions: Vec::new(),
        scalars: (0..cfg.proprio.num_scalars).map(|_| rng.range(-1.0, 1.0)).collect(),
    };
    for _ in 0..cfg.proprio.num_directions {
        let v = Vec3::new(rng.normal(), rng.normal(), rng.normal());
        proprio.directions.push(v.normalized().expect("non-zero"));
    }
    Observation { cloud, proprio }
}

fn synthetic_actions(cfg: &crate::policy::PolicyConfig, rng: &mut Rng) -> Vec<Action> {
    (0..cfg.pred_horizon)
        .map(|_| {
            let mut a = Action {
                v_parts: (0..cfg.layout.v_kinds.len())
                    .map(|_| Vec3::new(rng.range(-3.0, 3.0), rng.range(-3.0, 3.0), rng.range(-3.0, 3.0)))
                    .collect(),
                directions: Vec::new(),
                scalars: (0..cfg.layout.num_scalars).map(|_| rng.range(-0.8, 0.8)).collect(),
            };
            for _ in 0..cfg.layout.num_directions {
                let v = Vec3::new(rng.normal(), rng.normal(), rng.normal());
                a.directions.push(v.normalized().expect("non-zero"));
            }
            a
        })
        .collect()
}

fn seq_rel_err(got: &[Action], want: &[Action]) -> f64 {
    let flat = |seq: &[Action]| -> Vec<f64> {
        let mut out = Vec::new();
        for a in seq {
            for v in &a.v_parts {
                out.extend_from_slice(&v.to_array());
            }
            for d in &a.directions {
                out.extend_from_slice(&d.to_array());
            }
            out.extend_from_slice(&a.scalars);
        }
        out
    };
    let (g, w) = (flat(got), flat(want));
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (a, b) in g.iter().zip(&w) {
        diff = diff.max((a - b).abs());
        scale = scale.max(b.abs());
    }
    diff / (scale + 1e-12)
}

/// Encoder suite: Θ_R rotates (scale-free), Θ_inv / Θ_c / Θ_s transform as
/// stated. For the plain variant this measures the invariance its
/// conditioning features do NOT have, via the noise predictor at a fixed
/// clean action; either way larger is worse.
fn encoder_trial(
    model: &PolicyModel,
    params: &ParamSet,
    norm: &Normalizer,
    obs: &Observation,
    rng: &mut Rng,
) -> Result<f64, HarnessError> {
    let t = random_sim3(rng, 4.0);
    match model.kind() {
        ModelKind::Equi => {
            let enc = model.encoder().expect("equi variant has an encoder");
            let latent_of = |cloud: &PointCloud| -> Result<(Vec<f64>, Vec<f64>, Vec3, f64), HarnessError> {
                let mut ctx = Ctx::new(params);
                let latent = enc.encode(&mut ctx, cloud).map_err(crate::policy::PolicyError::from)?;
                Ok((
                    ctx.tape.value(latent.theta_r).data().to_vec(),
                    ctx.tape.value(latent.theta_inv).data().to_vec(),
                    latent.theta_c,
                    latent.theta_s,
                ))
            };
            let (r0, inv0, c0, s0) = latent_of(&obs.cloud)?;
            let (r1, inv1, c1, s1) = latent_of(&t.apply_cloud(&obs.cloud))?;
            // Rotate r0 channel-wise.
            let mut want_r = vec![0.0; r0.len()];
            for c in 0..r0.len() / 3 {
                let v = Vec3::new(r0[c * 3], r0[c * 3 + 1], r0[c * 3 + 2]);
                let w = t.rotation().mul_vec(v);
                want_r[c * 3] = w.x;
                want_r[c * 3 + 1] = w.y;
                want_r[c * 3 + 2] = w.z;
            }
            let rel = |a: &[f64], b: &[f64]| {
                let mut diff: f64 = 0.0;
                let mut scale: f64 = 0.0;
                for (x, y) in a.iter().zip(b) {
                    diff = diff.max((x - y).abs());
                    scale = scale.max(y.abs());
                }
                diff / (scale + 1e-12)
            };
            let want_c = t.apply_point(c0);
            let mut err = rel(&r1, &want_r).max(rel(&inv1, &inv0));
            err = err.max((c1 - want_c).norm() / (1.0 + want_c.norm()));
            err = err.max((s1 - t.scale() * s0).abs() / s1.abs().max(1e-12));
            Ok(err)
        }
        ModelKind::Plain => {
            // Invariance probe of the baseline conditioning: compare noise
            // predictions for a fixed z under transformed observations.
            let z = ZAction::zeros(&model.cfg().layout, model.cfg().pred_horizon);
            let window = vec![obs.clone(); model.cfg().obs_horizon];
            let twindow: Vec<Observation> = window
                .iter()
                .map(|o| transform_observation(&t, o).expect("unit directions"))
                .collect();
            let e0 = model.predict_noise_z(params, norm, &window, &z, 5)?;
            let e1 = model.predict_noise_z(params, norm, &twindow, &z, 5)?;
            let (a, b) = (e1.flat(), e0.flat());
            let mut diff: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for (x, y) in a.iter().zip(&b) {
                diff = diff.max((x - y).abs());
                scale = scale.max(y.abs());
            }
            Ok(diff / (scale + 1e-12))
        }
    }
}

/// Run all suites with `trials` random transforms each.
pub fn run_equicheck(
    model: &PolicyModel,
    params: &ParamSet,
    norm: &Normalizer,
    trials: usize,
    seed: u64,
) -> Result<EquicheckReport, HarnessError> {
    let cfg = model.cfg().clone();
    let mut rng = Rng::seed_from(seed);
    let mut encoder_max: f64 = 0.0;
    let mut eps_max: f64 = 0.0;
    let mut sampler_max: f64 = 0.0;

    if trials > 0 {
        let obs_window: Vec<Observation> =
            (0..cfg.obs_horizon).map(|_| synthetic_observation(&cfg, &mut rng)).collect();
        let noisy = synthetic_actions(&cfg, &mut rng);
        let base_eps = model.predict_noise(params, norm, &obs_window, &noisy, 11)?;
        let schedule: NoiseSchedule = make_schedule(cfg_k(&cfg))?;
        let sampler = SamplerKind::Ddim { steps: 8 };

        for trial in 0..trials {
            encoder_max =
                encoder_max.max(encoder_trial(model, params, norm, &obs_window[0], &mut rng)?);

            // Per-step noise-predictor suite.
            let t = random_sim3(&mut rng, 4.0);
            let tobs: Vec<Observation> = obs_window
                .iter()
                .map(|o| transform_observation(&t, o).expect("unit directions"))
                .collect();
            let tact: Vec<Action> = noisy
                .iter()
                .map(|a| transform_action(&t, &cfg.layout, a).expect("unit directions"))
                .collect();
            let got = model.predict_noise(params, norm, &tobs, &tact, 11)?;
            let want: Vec<Action> =
                base_eps.iter().map(|a| transform_noise_action(&t, a)).collect();
            eps_max = eps_max.max(seq_rel_err(&got, &want));

            // Seeded full-sampler suite: transform the observation and the
            // recorded noise stream together. The stochastic chain runs on a
            // subset of trials to keep the audit quick.
            let run_sampler = trial % 10 == 0;
            let kind = if run_sampler { SamplerKind::Ddpm } else { sampler };
            let mut rec = RecordingNoise::new(Rng::seed_from(seed ^ (trial as u64) << 1));
            let base =
                sample(model, params, norm, &obs_window, &schedule, kind, &mut rec)?;
            let stream: Vec<ZAction> =
                rec.drawn.iter().map(|z| z.rotated(t.rotation())).collect();
            let mut replay = ReplayNoise::new(stream);
            let got = sample(model, params, norm, &tobs, &schedule, kind, &mut replay)?;
            let want: Vec<Action> = base
                .iter()
                .map(|a| transform_action(&t, &cfg.layout, a).expect("assembled directions"))
                .collect();
            sampler_max = sampler_max.max(seq_rel_err(&got, &want));
        }
    }

    let passed = trials == 0
        || (encoder_max <= ENCODER_TOL && eps_max <= EPS_TOL && sampler_max <= SAMPLER_TOL);
    Ok(EquicheckReport {
        trials,
        encoder_max_rel: encoder_max,
        eps_max_rel: eps_max,
        sampler_max_rel: sampler_max,
        encoder_tol: ENCODER_TOL,
        eps_tol: EPS_TOL,
        sampler_tol: SAMPLER_TOL,
        passed,
    })
}

fn cfg_k(_cfg: &crate::policy::PolicyConfig) -> usize {
    // The audit always uses the production step count.
    100
}
