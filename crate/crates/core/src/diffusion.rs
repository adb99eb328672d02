//! DDPM training objective, DDPM/DDIM samplers, and data normalization.
//!
//! The diffusion chain runs in *invariant action coordinates* ("z-space"):
//! point-like entries are centred on the encoder centroid and divided by the
//! encoder scale, velocity-like entries are divided by scale and the global
//! action/point-cloud scale ratio, directions pass through, and scalars are
//! min-max normalized. The samplers draw their Gaussian noise in this space
//! through a [`NoiseSource`], which is what makes the seeded equivariance
//! suite exact: transforming the observation and the noise stream together
//! transforms the sampled action sequence.

use thiserror::Error;

use crate::autodiff::{AdError, ParamSet};
use crate::geom::Rng;
use crate::policy::{Action, ActionLayout, Observation, PolicyError, PolicyModel, ZAction};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("noise schedule needs at least one step")]
    EmptySchedule,
    #[error("diffusion step {k} outside schedule of {max} steps")]
    StepOutOfRange { k: usize, max: usize },
    #[error("normalizer fit needs at least one demo")]
    EmptyDataset,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

// ---------------------------------------------------------------------------
// Normalizer
// ---------------------------------------------------------------------------

/// Global data normalization fit on a training subset.
///
/// `s_pc` is the mean per-frame cloud scale and `s_ac` the mean action
/// v-part magnitude; position-like data divides by the former, velocity-like
/// by the latter. Scalar channels are min-max normalized to `[-1, 1]` with
/// no positional offsets. The `baseline_*` tables are per-component min-max
/// ranges used only by the non-equivariant baseline variant.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalizer {
    pub s_pc: f64,
    pub s_ac: f64,
    pub obs_scalar_minmax: Vec<(f64, f64)>,
    pub action_scalar_minmax: Vec<(f64, f64)>,
    pub baseline_cloud_minmax: [(f64, f64); 3],
    pub baseline_pos_minmax: Vec<[(f64, f64); 3]>,
    pub baseline_vpart_minmax: Vec<[(f64, f64); 3]>,
}

impl Normalizer {
    /// Identity normalization: unit scales, scalar channels mapped through
    /// the trivial `[-1, 1]` range.
    pub fn identity(obs_scalars: usize, action_scalars: usize, positions: usize, v_parts: usize) -> Normalizer {
        Normalizer {
            s_pc: 1.0,
            s_ac: 1.0,
            obs_scalar_minmax: vec![(-1.0, 1.0); obs_scalars],
            action_scalar_minmax: vec![(-1.0, 1.0); action_scalars],
            baseline_cloud_minmax: [(-1.0, 1.0); 3],
            baseline_pos_minmax: vec![[(-1.0, 1.0); 3]; positions],
            baseline_vpart_minmax: vec![[(-1.0, 1.0); 3]; v_parts],
        }
    }

    /// Velocity-entry divisor relative to the point divisor.
    pub fn scale_ratio(&self) -> f64 {
        self.s_ac / self.s_pc
    }

    pub fn norm_scalar(range: (f64, f64), x: f64) -> f64 {
        let (lo, hi) = range;
        if hi - lo < 1e-12 {
            0.0
        } else {
            2.0 * (x - lo) / (hi - lo) - 1.0
        }
    }

    pub fn denorm_scalar(range: (f64, f64), z: f64) -> f64 {
        let (lo, hi) = range;
        if hi - lo < 1e-12 {
            lo
        } else {
            lo + (z + 1.0) * (hi - lo) / 2.0
        }
    }

    /// Multiplier mapping z-space noise on a scalar channel back to raw
    /// units (an offset-free version of [`Normalizer::denorm_scalar`]).
    pub fn scalar_noise_scale(range: (f64, f64)) -> f64 {
        let (lo, hi) = range;
        if hi - lo < 1e-12 {
            0.0
        } else {
            (hi - lo) / 2.0
        }
    }
}

/// Fit the normalizer on a subset of `(observation, action)` pairs: `s_pc`
/// is the mean canonical cloud scale, `s_ac` the mean action v-part
/// magnitude, and all scalar/baseline channels get min-max ranges.
pub fn fit_normalizer<'a, I>(pairs: I, layout: &ActionLayout) -> Result<Normalizer, DiffusionError>
where
    I: IntoIterator<Item = (&'a Observation, &'a Action)>,
{
    let mut n_frames = 0usize;
    let mut sum_scale = 0.0;
    let mut n_v = 0usize;
    let mut sum_vmag = 0.0;
    let mut obs_scalar: Vec<(f64, f64)> = Vec::new();
    let mut act_scalar: Vec<(f64, f64)> = Vec::new();
    let mut cloud_mm = [(f64::INFINITY, f64::NEG_INFINITY); 3];
    let mut pos_mm: Vec<[(f64, f64); 3]> = Vec::new();
    let mut vpart_mm: Vec<[(f64, f64); 3]> = vec![[(f64::INFINITY, f64::NEG_INFINITY); 3]; layout.v_kinds.len()];

    let stretch = |mm: &mut (f64, f64), x: f64| {
        mm.0 = mm.0.min(x);
        mm.1 = mm.1.max(x);
    };

    for (obs, action) in pairs {
        if let Ok((_, _, theta_s)) = crate::encoder::canonicalize(&obs.cloud) {
            sum_scale += theta_s;
            n_frames += 1;
        }
        for p in obs.cloud.iter() {
            for (c, mm) in cloud_mm.iter_mut().enumerate() {
                stretch(mm, p.to_array()[c]);
            }
        }
        if pos_mm.len() < obs.proprio.positions.len() {
            pos_mm.resize(obs.proprio.positions.len(), [(f64::INFINITY, f64::NEG_INFINITY); 3]);
        }
        for (i, p) in obs.proprio.positions.iter().enumerate() {
            for (c, mm) in pos_mm[i].iter_mut().enumerate() {
                stretch(mm, p.to_array()[c]);
            }
        }
        if obs_scalar.len() < obs.proprio.scalars.len() {
            obs_scalar.resize(obs.proprio.scalars.len(), (f64::INFINITY, f64::NEG_INFINITY));
        }
        for (i, &x) in obs.proprio.scalars.iter().enumerate() {
            stretch(&mut obs_scalar[i], x);
        }

        for (i, v) in action.v_parts.iter().enumerate() {
            sum_vmag += v.norm();
            n_v += 1;
            for (c, mm) in vpart_mm[i].iter_mut().enumerate() {
                stretch(mm, v.to_array()[c]);
            }
        }
        if act_scalar.len() < action.scalars.len() {
            act_scalar.resize(action.scalars.len(), (f64::INFINITY, f64::NEG_INFINITY));
        }
        for (i, &x) in action.scalars.iter().enumerate() {
            stretch(&mut act_scalar[i], x);
        }
    }

    if n_frames == 0 {
        return Err(DiffusionError::EmptyDataset);
    }
    let s_pc = sum_scale / n_frames as f64;
    let s_ac = if n_v > 0 { sum_vmag / n_v as f64 } else { 1.0 };
    Ok(Normalizer {
        s_pc: if s_pc > 0.0 { s_pc } else { 1.0 },
        s_ac: if s_ac > 0.0 { s_ac } else { 1.0 },
        obs_scalar_minmax: obs_scalar,
        action_scalar_minmax: act_scalar,
        baseline_cloud_minmax: cloud_mm,
        baseline_pos_minmax: pos_mm,
        baseline_vpart_minmax: vpart_mm,
    })
}

// ---------------------------------------------------------------------------
// NoiseSchedule
// ---------------------------------------------------------------------------

/// β/α/ᾱ tables for `K` diffusion steps (index 0 ↔ step k = 1).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Squared-cosine schedule. `ᾱ(k) = f(k)/f(0)` with
/// `f(k) = cos²((k/K + s)/(1 + s) · π/2)`, `s = 0.008`, and per-step betas
/// clipped to 0.999.
pub fn make_schedule(steps: usize) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::EmptySchedule);
    }
    let f = |k: f64| {
        let s = 0.008;
        let x = (k / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
        x.cos() * x.cos()
    };
    let f0 = f(0.0);
    let mut beta = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut running = 1.0;
    for k in 1..=steps {
        let b = (1.0 - (f(k as f64) / f0) / (f((k - 1) as f64) / f0)).clamp(0.0, 0.999);
        beta.push(b);
        alpha.push(1.0 - b);
        running *= 1.0 - b;
        alpha_bar.push(running);
    }
    Ok(NoiseSchedule { steps, beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    fn check(&self, k: usize) -> Result<(), DiffusionError> {
        if k == 0 || k > self.steps {
            Err(DiffusionError::StepOutOfRange { k, max: self.steps })
        } else {
            Ok(())
        }
    }

    /// `ᾱ_k`, with the convention `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }
}

/// Sampler selection for [`sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Full stochastic chain over all K steps.
    Ddpm,
    /// Deterministic (η = 0) sampler on an evenly strided sub-schedule.
    Ddim { steps: usize },
}

// ---------------------------------------------------------------------------
// Noise sources
// ---------------------------------------------------------------------------

/// Source of the sampler's z-space Gaussian draws. The replay variant is
/// what the seeded equivariance suite uses: it feeds back a recorded stream
/// with the group transform applied.
pub trait NoiseSource {
    fn draw(&mut self, layout: &ActionLayout, horizon: usize) -> ZAction;
}

/// Seeded Gaussian draws (records nothing).
pub struct SeededNoise {
    pub rng: Rng,
}

impl NoiseSource for SeededNoise {
    fn draw(&mut self, layout: &ActionLayout, horizon: usize) -> ZAction {
        ZAction::randn(layout, horizon, &mut self.rng)
    }
}

/// Seeded draws that also keep a copy of everything drawn.
pub struct RecordingNoise {
    pub rng: Rng,
    pub drawn: Vec<ZAction>,
}

impl RecordingNoise {
    pub fn new(rng: Rng) -> Self {
        RecordingNoise { rng, drawn: Vec::new() }
    }
}

impl NoiseSource for RecordingNoise {
    fn draw(&mut self, layout: &ActionLayout, horizon: usize) -> ZAction {
        let z = ZAction::randn(layout, horizon, &mut self.rng);
        self.drawn.push(z.clone());
        z
    }
}

/// Replays a recorded stream (typically after transforming it).
pub struct ReplayNoise {
    pub stream: std::collections::VecDeque<ZAction>,
}

impl ReplayNoise {
    pub fn new(stream: Vec<ZAction>) -> Self {
        ReplayNoise { stream: stream.into() }
    }
}

impl NoiseSource for ReplayNoise {
    fn draw(&mut self, _layout: &ActionLayout, _horizon: usize) -> ZAction {
        self.stream.pop_front().expect("replay stream exhausted")
    }
}

// ---------------------------------------------------------------------------
// Forward process and training loss
// ---------------------------------------------------------------------------

/// `A_k = √ᾱ_k · A_0 + √(1−ᾱ_k) · ε` in z-space.
pub fn forward_noise(
    z0: &ZAction,
    k: usize,
    eps: &ZAction,
    schedule: &NoiseSchedule,
) -> Result<ZAction, DiffusionError> {
    schedule.check(k)?;
    let ab = schedule.alpha_bar_at(k);
    Ok(ZAction::lin_comb(ab.sqrt(), z0, (1.0 - ab).sqrt(), eps))
}

/// Invert [`forward_noise`] given the realized noise.
pub fn invert_forward_noise(
    zk: &ZAction,
    k: usize,
    eps: &ZAction,
    schedule: &NoiseSchedule,
) -> Result<ZAction, DiffusionError> {
    schedule.check(k)?;
    let ab = schedule.alpha_bar_at(k);
    Ok(ZAction::lin_comb(
        1.0 / ab.sqrt(),
        zk,
        -(1.0 - ab).sqrt() / ab.sqrt(),
        eps,
    ))
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

/// The reverse update with a given noise estimate:
/// `z_{k-1} = 1/√α_k · (z_k − γ ε̂ + σ ζ)` with
/// `γ = (1−α_k)/√(1−ᾱ_k)`, `σ² = β_k`, and no noise at the terminal step
/// `k = 1`.
pub fn ddpm_update(
    layout: &ActionLayout,
    horizon: usize,
    zk: &ZAction,
    eps_hat: &ZAction,
    k: usize,
    schedule: &NoiseSchedule,
    noise: &mut dyn NoiseSource,
) -> Result<ZAction, DiffusionError> {
    schedule.check(k)?;
    let alpha = schedule.alpha[k - 1];
    let ab = schedule.alpha_bar_at(k);
    let gamma = (1.0 - alpha) / (1.0 - ab).sqrt();
    let mut inner = ZAction::lin_comb(1.0, zk, -gamma, eps_hat);
    if k > 1 {
        let sigma = schedule.beta[k - 1].sqrt();
        let zeta = noise.draw(layout, horizon);
        inner = ZAction::lin_comb(1.0, &inner, sigma, &zeta);
    }
    Ok(inner.scaled(1.0 / alpha.sqrt()))
}

/// One reverse DDPM step in z-space using the model's noise estimate.
pub fn ddpm_step_z(
    model: &PolicyModel,
    params: &ParamSet,
    norm: &Normalizer,
    obs: &[Observation],
    zk: &ZAction,
    k: usize,
    schedule: &NoiseSchedule,
    noise: &mut dyn NoiseSource,
) -> Result<ZAction, DiffusionError> {
    schedule.check(k)?;
    let eps_hat = model.predict_noise_z(params, norm, obs, zk, k)?;
    ddpm_update(
        &model.cfg().layout,
        model.cfg().pred_horizon,
        zk,
        &eps_hat,
        k,
        schedule,
        noise,
    )
}

/// Raw task-coordinate surface of [`ddpm_step_z`]: takes and returns action
/// sequences in task coordinates.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_step(
    model: &PolicyModel,
    params: &ParamSet,
    norm: &Normalizer,
    obs: &[Observation],
    noisy: &[Action],
    k: usize,
    schedule: &NoiseSchedule,
    noise: &mut dyn NoiseSource,
) -> Result<Vec<Action>, DiffusionError> {
    let zk = model.action_to_z(norm, obs, noisy)?;
    let prev = ddpm_step_z(model, params, norm, obs, &zk, k, schedule, noise)?;
    Ok(model.z_to_action_linear(norm, obs, &prev)?)
}

/// Evenly strided descending DDIM sub-schedule, ending at 0.
pub fn ddim_taus(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, total);
    let mut taus: Vec<usize> = (1..=steps)
        .map(|i| ((i * total) as f64 / steps as f64).round() as usize)
        .collect();
    taus.dedup();
    taus.reverse();
    taus
}

/// Draw `A^K` from the prior and run the configured sampler to `A^0`,
/// returning the action sequence in task coordinates (de-normalized and
/// de-canonicalized, directions re-normalized).
pub fn sample(
    model: &PolicyModel,
    params: &ParamSet,
    norm: &Normalizer,
    obs: &[Observation],
    schedule: &NoiseSchedule,
    sampler: SamplerKind,
    noise: &mut dyn NoiseSource,
) -> Result<Vec<Action>, DiffusionError> {
    let z0 = sample_z(model, params, norm, obs, schedule, sampler, noise)?;
    Ok(model.z_to_action(norm, obs, &z0)?)
}

/// z-space sampler core shared by [`sample`] and the equivariance suites.
pub fn sample_z(
    model: &PolicyModel,
    params: &ParamSet,
    norm: &Normalizer,
    obs: &[Observation],
    schedule: &NoiseSchedule,
    sampler: SamplerKind,
    noise: &mut dyn NoiseSource,
) -> Result<ZAction, DiffusionError> {
    let layout = &model.cfg().layout;
    let horizon = model.cfg().pred_horizon;
    let mut z = noise.draw(layout, horizon);
    match sampler {
        SamplerKind::Ddpm => {
            for k in (1..=schedule.steps).rev() {
                z = ddpm_step_z(model, params, norm, obs, &z, k, schedule, noise)?;
            }
        }
        SamplerKind::Ddim { steps } => {
            let taus = ddim_taus(schedule.steps, steps);
            for (i, &tau) in taus.iter().enumerate() {
                let next = if i + 1 < taus.len() { taus[i + 1] } else { 0 };
                let eps_hat = model.predict_noise_z(params, norm, obs, &z, tau)?;
                let ab_t = schedule.alpha_bar_at(tau);
                let ab_n = schedule.alpha_bar_at(next);
                // η = 0: z_next = √ᾱ_next · ẑ₀ + √(1−ᾱ_next) · ε̂
                let z0_hat = ZAction::lin_comb(
                    1.0 / ab_t.sqrt(),
                    &z,
                    -(1.0 - ab_t).sqrt() / ab_t.sqrt(),
                    &eps_hat,
                );
                z = ZAction::lin_comb(ab_n.sqrt(), &z0_hat, (1.0 - ab_n).sqrt(), &eps_hat);
            }
        }
    }
    Ok(z)
}

// ---------------------------------------------------------------------------
// Training loss
// ---------------------------------------------------------------------------

/// One training sample: an observation window and the expert action
/// sequence over the prediction horizon, both in task coordinates.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub obs: Vec<Observation>,
    pub actions: Vec<Action>,
}

/// Mean-squared noise-prediction loss over a batch, with per-sample
/// uniformly drawn diffusion steps and z-space Gaussian targets. Returns the
/// loss value and parameter gradients; per-sample tapes are evaluated
/// independently and accumulated in batch order.
pub fn training_loss(
    model: &PolicyModel,
    params: &ParamSet,
    norm: &Normalizer,
    batch: &[TrainSample],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(f64, crate::autodiff::Gradients), DiffusionError> {
    // Draw all per-sample randomness up front so parallel execution cannot
    // change the stream.
    let draws: Vec<(usize, ZAction)> = (0..batch.len())
        .map(|i| {
            let mut r = rng.derive(i as u64);
            let k = 1 + r.below(schedule.steps);
            let eps = ZAction::randn(&model.cfg().layout, model.cfg().pred_horizon, &mut r);
            (k, eps)
        })
        .collect();
    // Advance the caller's stream once per batch.
    let _ = rng.next_u64();

    let shard_size = 8usize;
    let shards: Vec<(usize, &[TrainSample])> = batch
        .chunks(shard_size)
        .enumerate()
        .map(|(i, c)| (i * shard_size, c))
        .collect();

    use rayon::prelude::*;
    let partials: Vec<Result<(f64, crate::autodiff::Gradients), DiffusionError>> = shards
        .par_iter()
        .map(|(offset, shard)| {
            let mut loss_sum = 0.0;
            let mut grads: Option<crate::autodiff::Gradients> = None;
            for (j, sample) in shard.iter().enumerate() {
                let (k, eps) = &draws[offset + j];
                let (value, g) = sample_loss(model, params, norm, sample, *k, eps, schedule)?;
                loss_sum += value;
                match &mut grads {
                    Some(acc) => acc.accumulate(&g),
                    none => *none = Some(g),
                }
            }
            Ok((loss_sum, grads.expect("non-empty shard")))
        })
        .collect();

    let mut total = 0.0;
    let mut acc: Option<crate::autodiff::Gradients> = None;
    for part in partials {
        let (value, g) = part?;
        total += value;
        match &mut acc {
            Some(a) => a.accumulate(&g),
            none => *none = Some(g),
        }
    }
    let n = batch.len() as f64;
    let mut grads = acc.expect("non-empty batch");
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Loss and gradients for one `(sample, k, ε)` triple.
fn sample_loss(
    model: &PolicyModel,
    params: &ParamSet,
    norm: &Normalizer,
    sample: &TrainSample,
    k: usize,
    eps: &ZAction,
    schedule: &NoiseSchedule,
) -> Result<(f64, crate::autodiff::Gradients), DiffusionError> {
    let z0 = model.action_to_z(norm, &sample.obs, &sample.actions)?;
    let zk = forward_noise(&z0, k, eps, schedule)?;
    let mut ctx = crate::vn::Ctx::new(params);
    let (eps_v, eps_s) = model.forward_z(&mut ctx, norm, &sample.obs, &zk, k)?;
    // Σ over all channels of (ε̂ − ε)², divided by the total element count.
    let mut terms = Vec::new();
    let mut count = 0usize;
    if let Some(ev) = eps_v {
        let target = ctx.leaf(eps.vectors.clone().expect("layout has vector channels"));
        let diff = ctx.tape.sub(ev, target)?;
        let sq = ctx.tape.mul(diff, diff)?;
        count += ctx.tape.value(sq).numel();
        terms.push(ctx.tape.sum_all(sq));
    }
    if let Some(es) = eps_s {
        let target = ctx.leaf(eps.scalars.clone().expect("layout has scalar channels"));
        let diff = ctx.tape.sub(es, target)?;
        let sq = ctx.tape.mul(diff, diff)?;
        count += ctx.tape.value(sq).numel();
        terms.push(ctx.tape.sum_all(sq));
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = ctx.tape.add(total, *t)?;
    }
    let loss = ctx.tape.scale(total, 1.0 / count as f64);
    let grads = ctx.tape.backward(loss)?;
    Ok((ctx.tape.value(loss).item(), grads))
}
