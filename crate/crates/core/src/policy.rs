//! Noise-prediction policies: input routing, the SO(3)-equivariant
//! conditional U-net, output assembly, and the plain (non-equivariant)
//! baseline sharing the same scaffold.
//!
//! The equivariant path works as follows. The most recent observation frame
//! is encoded into `Θ = (Θ_R, Θ_inv, Θ_c, Θ_s)`. Noisy actions are mapped
//! into invariant coordinates (`build`-side of Eq. `Z_a`): point entries are
//! centred on `Θ_c` and divided by `Θ_s`, velocity entries divided by `Θ_s`
//! and the global scale ratio, directions kept, scalars min-max normalized.
//! Conditioning (`Z_c`) stacks `Θ_R` with canonicalized proprioception on
//! the vector side and `Θ_inv`, proprio scalars and the diffusion-step
//! embedding on the scalar side — `Θ_inv` is invariant, so it routes into
//! the scalar channels. A U-net over the prediction horizon with
//! vector-neuron convolutions and equivariant FiLM predicts the noise,
//! which is assembled back with `Θ_s` only: noise is displacement-like and
//! never picks up the centroid.

use thiserror::Error;

use crate::autodiff::{AdError, ParamSet, Tensor, ValueId};
use crate::diffusion::Normalizer;
use crate::encoder::{canonicalize, EncoderConfig, EncoderError, EquiEncoder};
use crate::geom::{FieldKind, PointCloud, Rng, Vec3};
use crate::vn::{
    scalar_layer_norm, vec_layer_norm, Ctx, FFuse, GeomFeature, ScalarLinear, VecConv1d,
    VecFilm, VecLinear, VnNonlin,
};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("action layout mismatch: {0}")]
    Layout(String),
    #[error("observation window has {got} frames, expected {want}")]
    Horizon { want: usize, got: usize },
    #[error("proprioception has {got} {what}, expected {want}")]
    Proprio { what: &'static str, want: usize, got: usize },
    #[error("direction not normalized (norm = {0})")]
    Direction(f64),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

// ---------------------------------------------------------------------------
// Observation / action data model
// ---------------------------------------------------------------------------

/// Robot proprioception split by transformation behaviour: positions
/// (points), unit directions, and scalars.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProprioState {
    pub positions: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub scalars: Vec<f64>,
}

impl ProprioState {
    pub fn positions_only(positions: Vec<Vec3>) -> ProprioState {
        ProprioState { positions, directions: Vec::new(), scalars: Vec::new() }
    }
}

/// One observation frame: scene point cloud plus proprioception.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Observation {
    pub cloud: PointCloud,
    pub proprio: ProprioState,
}

/// One action: v-part entries (their point/vector kinds live in the
/// [`ActionLayout`]), unit directions, and scalars.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Action {
    pub v_parts: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub scalars: Vec<f64>,
}

impl Action {
    pub fn from_v_parts(v_parts: Vec<Vec3>) -> Action {
        Action { v_parts, directions: Vec::new(), scalars: Vec::new() }
    }
}

/// Field layout of an action: the kind of every v-part entry plus the
/// number of direction and scalar entries.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ActionLayout {
    pub v_kinds: Vec<FieldKind>,
    pub num_directions: usize,
    pub num_scalars: usize,
}

impl ActionLayout {
    pub fn new(v_kinds: Vec<FieldKind>, num_directions: usize, num_scalars: usize) -> ActionLayout {
        assert!(
            v_kinds.iter().all(|k| matches!(k, FieldKind::Point | FieldKind::Vector)),
            "v-part entries must be point- or vector-kind"
        );
        ActionLayout { v_kinds, num_directions, num_scalars }
    }

    /// Vector channels carried through the network (v-parts ++ directions).
    pub fn vec_channels(&self) -> usize {
        self.v_kinds.len() + self.num_directions
    }

    pub fn check(&self, action: &Action) -> Result<(), PolicyError> {
        if action.v_parts.len() != self.v_kinds.len()
            || action.directions.len() != self.num_directions
            || action.scalars.len() != self.num_scalars
        {
            return Err(PolicyError::Layout(format!(
                "action has {}/{}/{} v-parts/directions/scalars, layout wants {}/{}/{}",
                action.v_parts.len(),
                action.directions.len(),
                action.scalars.len(),
                self.v_kinds.len(),
                self.num_directions,
                self.num_scalars
            )));
        }
        Ok(())
    }
}

/// Entry counts of the proprioception fields.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProprioLayout {
    pub num_positions: usize,
    pub num_directions: usize,
    pub num_scalars: usize,
}

impl ProprioLayout {
    pub fn check(&self, p: &ProprioState) -> Result<(), PolicyError> {
        if p.positions.len() != self.num_positions {
            return Err(PolicyError::Proprio {
                what: "positions",
                want: self.num_positions,
                got: p.positions.len(),
            });
        }
        if p.directions.len() != self.num_directions {
            return Err(PolicyError::Proprio {
                what: "directions",
                want: self.num_directions,
                got: p.directions.len(),
            });
        }
        if p.scalars.len() != self.num_scalars {
            return Err(PolicyError::Proprio {
                what: "scalars",
                want: self.num_scalars,
                got: p.scalars.len(),
            });
        }
        for d in &p.directions {
            let n = d.norm();
            if (n - 1.0).abs() > crate::geom::DIRECTION_TOL {
                return Err(PolicyError::Direction(n));
            }
        }
        Ok(())
    }
}

/// Network variant: the equivariant policy or the plain baseline with the
/// identical U-net scaffold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Equi,
    Plain,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PolicyConfig {
    /// Observation horizon T_o.
    pub obs_horizon: usize,
    /// Prediction horizon T_p (must be divisible by 4: two down-stages).
    pub pred_horizon: usize,
    /// Action horizon T_a (≤ T_p).
    pub act_horizon: usize,
    pub layout: ActionLayout,
    pub proprio: ProprioLayout,
    pub encoder: EncoderConfig,
    /// U-net channel widths per stage `[c0, c1, c2]`.
    pub unet_channels: [usize; 3],
    /// Hidden width of the FiLM gain networks.
    pub film_hidden: usize,
    /// Dimension of the sinusoidal diffusion-step embedding.
    pub pos_emb_dim: usize,
    /// Channel cap for Gram invariants of the conditioning vectors.
    pub gram_cap: usize,
    /// Baseline-only: point encoder feature width.
    pub plain_encoder_width: usize,
}

impl PolicyConfig {
    /// Push-T desk-scale configuration: one absolute-position target entry,
    /// agent position as the only proprioception.
    pub fn pusht_default() -> PolicyConfig {
        PolicyConfig {
            obs_horizon: 2,
            pred_horizon: 16,
            act_horizon: 8,
            layout: ActionLayout::new(vec![FieldKind::Point], 0, 0),
            proprio: ProprioLayout { num_positions: 1, num_directions: 0, num_scalars: 0 },
            encoder: EncoderConfig::default(),
            unet_channels: [12, 24, 24],
            film_hidden: 64,
            pos_emb_dim: 64,
            gram_cap: 8,
            plain_encoder_width: 48,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.act_horizon > self.pred_horizon {
            return Err(PolicyError::Layout(format!(
                "action horizon {} exceeds prediction horizon {}",
                self.act_horizon, self.pred_horizon
            )));
        }
        if self.pred_horizon % 4 != 0 {
            return Err(PolicyError::Layout(format!(
                "prediction horizon {} must be divisible by 4",
                self.pred_horizon
            )));
        }
        Ok(())
    }

    pub fn check_window(&self, obs: &[Observation]) -> Result<(), PolicyError> {
        if obs.len() != self.obs_horizon {
            return Err(PolicyError::Horizon { want: self.obs_horizon, got: obs.len() });
        }
        for frame in obs {
            self.proprio.check(&frame.proprio)?;
        }
        Ok(())
    }
}

/// Sinusoidal embedding of the diffusion step.
pub fn pos_emb(k: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = 10_000f64.powf(-2.0 * i as f64 / dim as f64);
        data[i] = (k as f64 * freq).sin();
        data[half + i] = (k as f64 * freq).cos();
    }
    Tensor::new(vec![dim], data).expect("pos_emb shape")
}

// ---------------------------------------------------------------------------
// Invariant action coordinates (z-space)
// ---------------------------------------------------------------------------

/// Action sequence in the coordinates the diffusion chain operates on:
/// vector channels `[T, C, 3]` (v-parts then directions) and scalar
/// channels `[T, S]`. Absent sides mean zero channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ZAction {
    pub vectors: Option<Tensor>,
    pub scalars: Option<Tensor>,
}

impl ZAction {
    pub fn zeros(layout: &ActionLayout, horizon: usize) -> ZAction {
        let vectors = (layout.vec_channels() > 0)
            .then(|| Tensor::zeros(&[horizon, layout.vec_channels(), 3]));
        let scalars = (layout.num_scalars > 0).then(|| Tensor::zeros(&[horizon, layout.num_scalars]));
        ZAction { vectors, scalars }
    }

    pub fn randn(layout: &ActionLayout, horizon: usize, rng: &mut Rng) -> ZAction {
        let mut z = ZAction::zeros(layout, horizon);
        if let Some(v) = &mut z.vectors {
            for x in v.data_mut() {
                *x = rng.normal();
            }
        }
        if let Some(s) = &mut z.scalars {
            for x in s.data_mut() {
                *x = rng.normal();
            }
        }
        z
    }

    /// `a·x + b·y` elementwise.
    pub fn lin_comb(a: f64, x: &ZAction, b: f64, y: &ZAction) -> ZAction {
        let comb = |p: &Option<Tensor>, q: &Option<Tensor>| -> Option<Tensor> {
            match (p, q) {
                (Some(p), Some(q)) => {
                    let mut out = p.clone();
                    for (o, (xv, yv)) in out
                        .data_mut()
                        .iter_mut()
                        .zip(p.data().iter().zip(q.data()))
                    {
                        *o = a * xv + b * yv;
                    }
                    Some(out)
                }
                (None, None) => None,
                _ => panic!("mismatched ZAction layouts"),
            }
        };
        ZAction { vectors: comb(&x.vectors, &y.vectors), scalars: comb(&x.scalars, &y.scalars) }
    }

    pub fn scaled(&self, k: f64) -> ZAction {
        let scale = |t: &Option<Tensor>| {
            t.as_ref().map(|t| {
                let mut out = t.clone();
                for x in out.data_mut() {
                    *x *= k;
                }
                out
            })
        };
        ZAction { vectors: scale(&self.vectors), scalars: scale(&self.scalars) }
    }

    /// Flatten to a single vector (vector channels then scalars).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(v) = &self.vectors {
            out.extend_from_slice(v.data());
        }
        if let Some(s) = &self.scalars {
            out.extend_from_slice(s.data());
        }
        out
    }

    pub fn numel(&self) -> usize {
        self.vectors.as_ref().map_or(0, Tensor::numel)
            + self.scalars.as_ref().map_or(0, Tensor::numel)
    }
}

/// Per-entry multipliers from z-space to raw displacement noise (no
/// translation): points and vectors scale, directions and min-max scalars
/// get their fixed factors.
struct ZScales {
    point: f64,
    vector: f64,
}

fn theta_for(obs: &[Observation]) -> Result<(Vec3, f64), PolicyError> {
    let frame = obs.last().ok_or(PolicyError::Horizon { want: 1, got: 0 })?;
    let (_, theta_c, theta_s) = canonicalize(&frame.cloud)?;
    Ok((theta_c, theta_s))
}

// ---------------------------------------------------------------------------
// Equivariant network
// ---------------------------------------------------------------------------

/// One U-net stage: temporal convolution, invariant layer norm, gated
/// nonlinearity, and equivariant FiLM conditioning, on both streams.
#[derive(Debug, Clone)]
struct EquiBlock {
    conv_v: VecConv1d,
    conv_s: Option<VecConv1d>,
    nonlin: VnNonlin,
    film: VecFilm,
}

impl EquiBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        s_in: usize,
        s_out: usize,
        cond_vec: usize,
        cond_scalar: usize,
        film_hidden: usize,
        gram_cap: usize,
        rng: &mut Rng,
    ) -> Result<EquiBlock, AdError> {
        let conv_v = VecConv1d::new(params, &format!("{name}.conv_v"), c_in, c_out, 3, 1, 1, rng)?;
        let conv_s = if s_in > 0 {
            Some(VecConv1d::new(params, &format!("{name}.conv_s"), s_in, s_out, 3, 1, 1, rng)?)
        } else {
            None
        };
        let nonlin = VnNonlin::new(params, &format!("{name}.nonlin"), c_out, rng)?;
        let film = VecFilm::new(
            params,
            name,
            cond_vec,
            cond_scalar,
            gram_cap,
            film_hidden,
            c_out,
            s_out,
            rng,
        )?;
        Ok(EquiBlock { conv_v, conv_s, nonlin, film })
    }

    fn forward(&self, ctx: &mut Ctx, f: GeomFeature, cond: GeomFeature) -> Result<GeomFeature, AdError> {
        let v = self.conv_v.forward(ctx, f.vectors.expect("vector stream present"))?;
        let v = vec_layer_norm(&mut ctx.tape, v)?;
        let v = self.nonlin.forward(ctx, v)?;
        let s = match (&self.conv_s, f.scalars) {
            (Some(conv), Some(s)) => {
                let s = conv.forward(ctx, s)?;
                let s = scalar_layer_norm(&mut ctx.tape, s)?;
                Some(ctx.tape.relu(s)?)
            }
            _ => None,
        };
        self.film.forward(ctx, GeomFeature::new(Some(v), s), cond)
    }
}

#[derive(Debug, Clone)]
struct EquiNet {
    encoder: EquiEncoder,
    stem: FFuse,
    scalar_stem: Option<ScalarLinear>,
    d1: EquiBlock,
    pool1_v: VecConv1d,
    pool1_s: Option<VecConv1d>,
    d2: EquiBlock,
    pool2_v: VecConv1d,
    pool2_s: Option<VecConv1d>,
    mid: EquiBlock,
    u1: EquiBlock,
    u2: EquiBlock,
    head_v: VecLinear,
    head_s: Option<ScalarLinear>,
}

impl EquiNet {
    fn new(params: &mut ParamSet, cfg: &PolicyConfig, rng: &mut Rng) -> Result<EquiNet, AdError> {
        let [c0, c1, c2] = cfg.unet_channels;
        let ca = cfg.layout.vec_channels();
        let sa = cfg.layout.num_scalars;
        let (s0, s1, s2) = if sa > 0 { (c0, c1, c2) } else { (0, 0, 0) };

        // Conditioning channel counts (see build_conditioning).
        let cond_vec = cfg.encoder.out_channels
            + cfg.obs_horizon * (cfg.proprio.num_positions + cfg.proprio.num_directions);
        let m = cfg.encoder.out_channels.min(cfg.encoder.gram_cap);
        let cond_scalar =
            m * (m + 1) / 2 + cfg.obs_horizon * cfg.proprio.num_scalars + cfg.pos_emb_dim;

        let encoder = EquiEncoder::new(params, "enc", cfg.encoder.clone(), rng)?;
        let stem = FFuse::new(params, "stem", ca, sa, c0, rng)?;
        let scalar_stem = if sa > 0 {
            Some(ScalarLinear::new(params, "stem.scalar", sa, s0, rng)?)
        } else {
            None
        };
        let mk_block = |params: &mut ParamSet, name: &str, ci, co, si, so, rng: &mut Rng| {
            EquiBlock::new(
                params,
                name,
                ci,
                co,
                si,
                so,
                cond_vec,
                cond_scalar,
                cfg.film_hidden,
                cfg.gram_cap,
                rng,
            )
        };
        let d1 = mk_block(params, "d1", c0, c0, s0, s0, rng)?;
        let pool1_v = VecConv1d::new(params, "pool1.v", c0, c1, 3, 2, 1, rng)?;
        let pool1_s = (sa > 0)
            .then(|| VecConv1d::new(params, "pool1.s", s0, s1, 3, 2, 1, rng))
            .transpose()?;
        let d2 = mk_block(params, "d2", c1, c1, s1, s1, rng)?;
        let pool2_v = VecConv1d::new(params, "pool2.v", c1, c2, 3, 2, 1, rng)?;
        let pool2_s = (sa > 0)
            .then(|| VecConv1d::new(params, "pool2.s", s1, s2, 3, 2, 1, rng))
            .transpose()?;
        let mid = mk_block(params, "mid", c2, c2, s2, s2, rng)?;
        let u1 = mk_block(params, "u1", c2 + c1, c1, s2 + s1, s1, rng)?;
        let u2 = mk_block(params, "u2", c1 + c0, c0, s1 + s0, s0, rng)?;
        let head_v = VecLinear::new_zero(params, "head.v", c0, ca)?;
        let head_s = (sa > 0)
            .then(|| ScalarLinear::new_zero(params, "head.s", s0, sa))
            .transpose()?;
        Ok(EquiNet {
            encoder,
            stem,
            scalar_stem,
            d1,
            pool1_v,
            pool1_s,
            d2,
            pool2_v,
            pool2_s,
            mid,
            u1,
            u2,
            head_v,
            head_s,
        })
    }

    /// Conditioning `Z_c`: vector channels `[Θ_R, (S'ˣ − Θ_c)/Θ_s, S'ᵈ]`
    /// over the observation window; scalar channels `[Θ_inv, S'ˢ,
    /// pos_emb(k)]` (`Θ_inv` is invariant, so it lives on the scalar side).
    fn build_conditioning(
        &self,
        ctx: &mut Ctx,
        cfg: &PolicyConfig,
        norm: &Normalizer,
        obs: &[Observation],
        latent: &crate::encoder::EncoderLatent,
        k: usize,
    ) -> Result<GeomFeature, PolicyError> {
        let inv_s = 1.0 / latent.theta_s;
        let mut vec_data = Vec::new();
        let mut scalar_data = Vec::new();
        for frame in obs {
            for p in &frame.proprio.positions {
                let q = (*p - latent.theta_c) * inv_s;
                vec_data.extend_from_slice(&[q.x, q.y, q.z]);
            }
            for d in &frame.proprio.directions {
                vec_data.extend_from_slice(&[d.x, d.y, d.z]);
            }
            for (i, &x) in frame.proprio.scalars.iter().enumerate() {
                scalar_data.push(Normalizer::norm_scalar(norm.obs_scalar_minmax[i], x));
            }
        }
        let mut vec_parts = vec![latent.theta_r];
        if !vec_data.is_empty() {
            let n = vec_data.len() / 3;
            vec_parts.push(ctx.leaf(Tensor::new(vec![n, 3], vec_data).expect("proprio tensor")));
            // theta_r is [C,3]; proprio channels are [n,3]; concat on axis 0.
        }
        let vectors = if vec_parts.len() == 1 {
            vec_parts[0]
        } else {
            ctx.tape.concat(&vec_parts, 0)?
        };

        let emb = pos_emb(k, cfg.pos_emb_dim);
        let mut scalar_parts = vec![latent.theta_inv];
        if !scalar_data.is_empty() {
            let n = scalar_data.len();
            scalar_parts.push(ctx.leaf(Tensor::new(vec![n], scalar_data).expect("scalar tensor")));
        }
        scalar_parts.push(ctx.leaf(emb));
        let scalars = ctx.tape.concat(&scalar_parts, 0)?;
        Ok(GeomFeature::new(Some(vectors), Some(scalars)))
    }

    fn forward_z(
        &self,
        ctx: &mut Ctx,
        cfg: &PolicyConfig,
        norm: &Normalizer,
        obs: &[Observation],
        z: &ZAction,
        k: usize,
    ) -> Result<(Option<ValueId>, Option<ValueId>), PolicyError> {
        let latent = self.encoder.encode(ctx, &obs[obs.len() - 1].cloud)?;
        let cond = self.build_conditioning(ctx, cfg, norm, obs, &latent, k)?;

        let zv = ctx.leaf(z.vectors.clone().expect("layout has vector channels"));
        let zs = z.scalars.clone().map(|s| ctx.leaf(s));
        let v0 = self.stem.forward(ctx, zv, zs)?;
        let s0 = match (&self.scalar_stem, zs) {
            (Some(stem), Some(s)) => Some(stem.forward(ctx, s)?),
            _ => None,
        };

        let f0 = GeomFeature::new(Some(v0), s0);
        let d1 = self.d1.forward(ctx, f0, cond)?;
        let p1v = self.pool1_v.forward(ctx, d1.vectors.unwrap())?;
        let p1s = match (&self.pool1_s, d1.scalars) {
            (Some(c), Some(s)) => Some(c.forward(ctx, s)?),
            _ => None,
        };
        let d2 = self.d2.forward(ctx, GeomFeature::new(Some(p1v), p1s), cond)?;
        let p2v = self.pool2_v.forward(ctx, d2.vectors.unwrap())?;
        let p2s = match (&self.pool2_s, d2.scalars) {
            (Some(c), Some(s)) => Some(c.forward(ctx, s)?),
            _ => None,
        };
        let mid = self.mid.forward(ctx, GeomFeature::new(Some(p2v), p2s), cond)?;

        let up1v = ctx.tape.upsample_t(mid.vectors.unwrap(), 2)?;
        let cat1v = ctx.tape.concat(&[up1v, d2.vectors.unwrap()], 1)?;
        let cat1s = match (mid.scalars, d2.scalars) {
            (Some(m), Some(d)) => {
                let up = ctx.tape.upsample_t(m, 2)?;
                Some(ctx.tape.concat(&[up, d], 1)?)
            }
            _ => None,
        };
        let u1 = self.u1.forward(ctx, GeomFeature::new(Some(cat1v), cat1s), cond)?;

        let up2v = ctx.tape.upsample_t(u1.vectors.unwrap(), 2)?;
        let cat2v = ctx.tape.concat(&[up2v, d1.vectors.unwrap()], 1)?;
        let cat2s = match (u1.scalars, d1.scalars) {
            (Some(m), Some(d)) => {
                let up = ctx.tape.upsample_t(m, 2)?;
                Some(ctx.tape.concat(&[up, d], 1)?)
            }
            _ => None,
        };
        let u2 = self.u2.forward(ctx, GeomFeature::new(Some(cat2v), cat2s), cond)?;

        let eps_v = self.head_v.forward(ctx, u2.vectors.unwrap())?;
        let eps_s = match (&self.head_s, u2.scalars) {
            (Some(h), Some(s)) => Some(h.forward(ctx, s)?),
            _ => None,
        };
        Ok((Some(eps_v), eps_s))
    }
}

// ---------------------------------------------------------------------------
// Plain (baseline) network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct PlainBlock {
    conv: VecConv1d,
    film_hidden: ScalarLinear,
    film_head: ScalarLinear,
    c_out: usize,
}

impl PlainBlock {
    fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        cond_dim: usize,
        film_hidden: usize,
        rng: &mut Rng,
    ) -> Result<PlainBlock, AdError> {
        Ok(PlainBlock {
            conv: VecConv1d::new(params, &format!("{name}.conv"), c_in, c_out, 3, 1, 1, rng)?,
            film_hidden: ScalarLinear::new(params, &format!("{name}.film.hidden"), cond_dim, film_hidden, rng)?,
            film_head: ScalarLinear::new_zero(params, &format!("{name}.film.head"), film_hidden, 2 * c_out)?,
            c_out,
        })
    }

    fn forward(&self, ctx: &mut Ctx, x: ValueId, cond: ValueId) -> Result<ValueId, AdError> {
        let x = self.conv.forward(ctx, x)?;
        let x = scalar_layer_norm(&mut ctx.tape, x)?;
        let x = ctx.tape.relu(x)?;
        let h = self.film_hidden.forward(ctx, cond)?;
        let h = ctx.tape.relu(h)?;
        let raw = self.film_head.forward(ctx, h)?;
        let g = ctx.tape.slice(raw, 0, 0, self.c_out)?;
        let gamma = ctx.tape.shift(g, 1.0);
        let beta = ctx.tape.slice(raw, 0, self.c_out, self.c_out)?;
        let t = ctx.tape.shape(x)[0];
        let gamma_t = ctx.tape.repeat0(gamma, t)?;
        let scaled = ctx.tape.mul(x, gamma_t)?;
        ctx.tape.add_suffix(scaled, beta)
    }
}

#[derive(Debug, Clone)]
struct PlainNet {
    enc_l1: ScalarLinear,
    enc_l2: ScalarLinear,
    stem: ScalarLinear,
    d1: PlainBlock,
    pool1: VecConv1d,
    d2: PlainBlock,
    pool2: VecConv1d,
    mid: PlainBlock,
    u1: PlainBlock,
    u2: PlainBlock,
    head: ScalarLinear,
}

impl PlainNet {
    fn new(params: &mut ParamSet, cfg: &PolicyConfig, rng: &mut Rng) -> Result<PlainNet, AdError> {
        let e = cfg.plain_encoder_width;
        let d = 3 * cfg.layout.vec_channels() + cfg.layout.num_scalars;
        // Widths mirror the equivariant scaffold: each vector channel there
        // carries three coordinates.
        let c0 = 3 * cfg.unet_channels[0];
        let c1 = 3 * cfg.unet_channels[1];
        let c2 = 3 * cfg.unet_channels[2];
        let cond_dim = e
            + cfg.obs_horizon
                * (3 * (cfg.proprio.num_positions + cfg.proprio.num_directions)
                    + cfg.proprio.num_scalars)
            + cfg.pos_emb_dim;
        Ok(PlainNet {
            enc_l1: ScalarLinear::new(params, "enc.l1", 3, e, rng)?,
            enc_l2: ScalarLinear::new(params, "enc.l2", e, e, rng)?,
            stem: ScalarLinear::new(params, "stem", d, c0, rng)?,
            d1: PlainBlock::new(params, "d1", c0, c0, cond_dim, cfg.film_hidden, rng)?,
            pool1: VecConv1d::new(params, "pool1", c0, c1, 3, 2, 1, rng)?,
            d2: PlainBlock::new(params, "d2", c1, c1, cond_dim, cfg.film_hidden, rng)?,
            pool2: VecConv1d::new(params, "pool2", c1, c2, 3, 2, 1, rng)?,
            mid: PlainBlock::new(params, "mid", c2, c2, cond_dim, cfg.film_hidden, rng)?,
            u1: PlainBlock::new(params, "u1", c2 + c1, c1, cond_dim, cfg.film_hidden, rng)?,
            u2: PlainBlock::new(params, "u2", c1 + c0, c0, cond_dim, cfg.film_hidden, rng)?,
            head: ScalarLinear::new_zero(params, "head", c0, d)?,
        })
    }

    fn build_conditioning(
        &self,
        ctx: &mut Ctx,
        cfg: &PolicyConfig,
        norm: &Normalizer,
        obs: &[Observation],
        k: usize,
    ) -> Result<ValueId, AdError> {
        // Point encoder on the most recent frame, min-max normalized.
        let frame = &obs[obs.len() - 1];
        let n = frame.cloud.len();
        let mut data = Vec::with_capacity(n * 3);
        for p in frame.cloud.iter() {
            let a = p.to_array();
            for c in 0..3 {
                data.push(Normalizer::norm_scalar(norm.baseline_cloud_minmax[c], a[c]));
            }
        }
        let pts = ctx.leaf(Tensor::new(vec![n, 3], data).expect("cloud tensor"));
        let h = self.enc_l1.forward(ctx, pts)?;
        let h = ctx.tape.relu(h)?;
        let h = self.enc_l2.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let pooled = ctx.tape.mean_axis0(h)?; // [E]

        let mut rest = Vec::new();
        for frame in obs {
            for (i, p) in frame.proprio.positions.iter().enumerate() {
                let a = p.to_array();
                for c in 0..3 {
                    rest.push(Normalizer::norm_scalar(norm.baseline_pos_minmax[i][c], a[c]));
                }
            }
            for d in &frame.proprio.directions {
                rest.extend_from_slice(&d.to_array());
            }
            for (i, &x) in frame.proprio.scalars.iter().enumerate() {
                rest.push(Normalizer::norm_scalar(norm.obs_scalar_minmax[i], x));
            }
        }
        let emb = pos_emb(k, cfg.pos_emb_dim);
        let mut parts = vec![pooled];
        if !rest.is_empty() {
            let n = rest.len();
            parts.push(ctx.leaf(Tensor::new(vec![n], rest).expect("proprio tensor")));
        }
        parts.push(ctx.leaf(emb));
        ctx.tape.concat(&parts, 0)
    }

    fn forward_z(
        &self,
        ctx: &mut Ctx,
        cfg: &PolicyConfig,
        norm: &Normalizer,
        obs: &[Observation],
        z: &ZAction,
        k: usize,
    ) -> Result<(Option<ValueId>, Option<ValueId>), PolicyError> {
        let cond = self.build_conditioning(ctx, cfg, norm, obs, k)?;
        let t = cfg.pred_horizon;
        let cv = cfg.layout.vec_channels();
        let sa = cfg.layout.num_scalars;

        // Flatten z into per-step scalar features [T, 3·Cv + Sa].
        let mut parts = Vec::new();
        if let Some(v) = &z.vectors {
            let vid = ctx.leaf(v.clone());
            parts.push(ctx.tape.reshape(vid, &[t, 3 * cv])?);
        }
        if let Some(s) = &z.scalars {
            parts.push(ctx.leaf(s.clone()));
        }
        let x = if parts.len() == 1 { parts[0] } else { ctx.tape.concat(&parts, 1)? };

        let x = self.stem.forward(ctx, x)?;
        let d1 = self.d1.forward(ctx, x, cond)?;
        let p1 = self.pool1.forward(ctx, d1)?;
        let d2 = self.d2.forward(ctx, p1, cond)?;
        let p2 = self.pool2.forward(ctx, d2)?;
        let mid = self.mid.forward(ctx, p2, cond)?;
        let up1 = ctx.tape.upsample_t(mid, 2)?;
        let cat1 = ctx.tape.concat(&[up1, d2], 1)?;
        let u1 = self.u1.forward(ctx, cat1, cond)?;
        let up2 = ctx.tape.upsample_t(u1, 2)?;
        let cat2 = ctx.tape.concat(&[up2, d1], 1)?;
        let u2 = self.u2.forward(ctx, cat2, cond)?;
        let out = self.head.forward(ctx, u2)?; // [T, 3Cv + Sa]

        let eps_v = if cv > 0 {
            let sl = ctx.tape.slice(out, 1, 0, 3 * cv)?;
            Some(ctx.tape.reshape(sl, &[t, cv, 3])?)
        } else {
            None
        };
        let eps_s = if sa > 0 {
            Some(ctx.tape.slice(out, 1, 3 * cv, sa)?)
        } else {
            None
        };
        Ok((eps_v, eps_s))
    }
}

// ---------------------------------------------------------------------------
// PolicyModel
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Net {
    Equi(Box<EquiNet>),
    Plain(Box<PlainNet>),
}

/// A noise-prediction policy: either the SIM(3)-equivariant network or the
/// plain baseline with the same U-net scaffold.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    cfg: PolicyConfig,
    net: Net,
}

impl PolicyModel {
    pub fn build(
        kind: ModelKind,
        cfg: PolicyConfig,
        params: &mut ParamSet,
        rng: &mut Rng,
    ) -> Result<PolicyModel, PolicyError> {
        cfg.validate()?;
        let net = match kind {
            ModelKind::Equi => Net::Equi(Box::new(EquiNet::new(params, &cfg, rng)?)),
            ModelKind::Plain => Net::Plain(Box::new(PlainNet::new(params, &cfg, rng)?)),
        };
        Ok(PolicyModel { cfg, net })
    }

    pub fn kind(&self) -> ModelKind {
        match &self.net {
            Net::Equi(_) => ModelKind::Equi,
            Net::Plain(_) => ModelKind::Plain,
        }
    }

    /// The point-cloud encoder, present on the equivariant variant.
    pub fn encoder(&self) -> Option<&EquiEncoder> {
        match &self.net {
            Net::Equi(net) => Some(&net.encoder),
            Net::Plain(_) => None,
        }
    }

    pub fn cfg(&self) -> &PolicyConfig {
        &self.cfg
    }

    /// Map a raw action sequence into the invariant coordinates the
    /// diffusion chain runs on.
    pub fn action_to_z(
        &self,
        norm: &Normalizer,
        obs: &[Observation],
        actions: &[Action],
    ) -> Result<ZAction, PolicyError> {
        self.check_sequence(actions)?;
        let layout = &self.cfg.layout;
        let t = self.cfg.pred_horizon;
        let mut z = ZAction::zeros(layout, t);
        match self.kind() {
            ModelKind::Equi => {
                let (theta_c, theta_s) = theta_for(obs)?;
                let inv_s = 1.0 / theta_s;
                let rho = norm.scale_ratio();
                for (ti, a) in actions.iter().enumerate() {
                    let v = z.vectors.as_mut().expect("vector channels");
                    for (i, (&p, kind)) in a.v_parts.iter().zip(&layout.v_kinds).enumerate() {
                        let q = match kind {
                            FieldKind::Point => (p - theta_c) * inv_s,
                            FieldKind::Vector => p * (inv_s / rho),
                            _ => unreachable!("layout validated"),
                        };
                        write_vec3(v, t, ti, i, q);
                    }
                    for (j, &d) in a.directions.iter().enumerate() {
                        let v = z.vectors.as_mut().unwrap();
                        write_vec3(v, t, ti, layout.v_kinds.len() + j, d);
                    }
                    if let Some(s) = z.scalars.as_mut() {
                        for (j, &x) in a.scalars.iter().enumerate() {
                            s.data_mut()[ti * layout.num_scalars + j] =
                                Normalizer::norm_scalar(norm.action_scalar_minmax[j], x);
                        }
                    }
                }
            }
            ModelKind::Plain => {
                for (ti, a) in actions.iter().enumerate() {
                    let v = z.vectors.as_mut().expect("vector channels");
                    for (i, &p) in a.v_parts.iter().enumerate() {
                        let arr = p.to_array();
                        let q = Vec3::new(
                            Normalizer::norm_scalar(norm.baseline_vpart_minmax[i][0], arr[0]),
                            Normalizer::norm_scalar(norm.baseline_vpart_minmax[i][1], arr[1]),
                            Normalizer::norm_scalar(norm.baseline_vpart_minmax[i][2], arr[2]),
                        );
                        write_vec3(v, t, ti, i, q);
                    }
                    for (j, &d) in a.directions.iter().enumerate() {
                        let v = z.vectors.as_mut().unwrap();
                        write_vec3(v, t, ti, layout.v_kinds.len() + j, d);
                    }
                    if let Some(s) = z.scalars.as_mut() {
                        for (j, &x) in a.scalars.iter().enumerate() {
                            s.data_mut()[ti * layout.num_scalars + j] =
                                Normalizer::norm_scalar(norm.action_scalar_minmax[j], x);
                        }
                    }
                }
            }
        }
        Ok(z)
    }

    /// Final action assembly: de-canonicalize, de-normalize, and re-project
    /// direction entries to unit norm.
    pub fn z_to_action(
        &self,
        norm: &Normalizer,
        obs: &[Observation],
        z: &ZAction,
    ) -> Result<Vec<Action>, PolicyError> {
        let mut actions = self.z_to_action_linear(norm, obs, z)?;
        for a in &mut actions {
            for d in &mut a.directions {
                let n = d.norm();
                if n > 1e-12 {
                    *d = *d * (1.0 / n);
                }
            }
        }
        Ok(actions)
    }

    /// Inverse of [`PolicyModel::action_to_z`] without the direction
    /// re-normalization (the linear part of the assembly).
    pub fn z_to_action_linear(
        &self,
        norm: &Normalizer,
        obs: &[Observation],
        z: &ZAction,
    ) -> Result<Vec<Action>, PolicyError> {
        let layout = &self.cfg.layout;
        let t = self.cfg.pred_horizon;
        let mut out = Vec::with_capacity(t);
        let equi_theta = match self.kind() {
            ModelKind::Equi => Some(theta_for(obs)?),
            ModelKind::Plain => None,
        };
        for ti in 0..t {
            let mut a = Action { v_parts: Vec::new(), directions: Vec::new(), scalars: Vec::new() };
            if let Some(v) = &z.vectors {
                for (i, kind) in layout.v_kinds.iter().enumerate() {
                    let q = read_vec3(v, t, ti, i);
                    let p = match (&equi_theta, kind) {
                        (Some((theta_c, theta_s)), FieldKind::Point) => q * *theta_s + *theta_c,
                        (Some((_, theta_s)), FieldKind::Vector) => {
                            q * (*theta_s * norm.scale_ratio())
                        }
                        (None, _) => {
                            let arr = q.to_array();
                            Vec3::new(
                                Normalizer::denorm_scalar(norm.baseline_vpart_minmax[i][0], arr[0]),
                                Normalizer::denorm_scalar(norm.baseline_vpart_minmax[i][1], arr[1]),
                                Normalizer::denorm_scalar(norm.baseline_vpart_minmax[i][2], arr[2]),
                            )
                        }
                        _ => unreachable!("layout validated"),
                    };
                    a.v_parts.push(p);
                }
                for j in 0..layout.num_directions {
                    a.directions.push(read_vec3(v, t, ti, layout.v_kinds.len() + j));
                }
            }
            if let Some(s) = &z.scalars {
                for j in 0..layout.num_scalars {
                    a.scalars.push(Normalizer::denorm_scalar(
                        norm.action_scalar_minmax[j],
                        s.data()[ti * layout.num_scalars + j],
                    ));
                }
            }
            out.push(a);
        }
        Ok(out)
    }

    /// Map z-space noise to raw displacement noise: rotation/scale apply,
    /// the centroid never does.
    pub fn noise_z_to_raw(
        &self,
        norm: &Normalizer,
        obs: &[Observation],
        eps: &ZAction,
    ) -> Result<Vec<Action>, PolicyError> {
        let scales = self.noise_scales(norm, obs)?;
        let layout = &self.cfg.layout;
        let t = self.cfg.pred_horizon;
        let mut out = Vec::with_capacity(t);
        for ti in 0..t {
            let mut a = Action { v_parts: Vec::new(), directions: Vec::new(), scalars: Vec::new() };
            if let Some(v) = &eps.vectors {
                for (i, kind) in layout.v_kinds.iter().enumerate() {
                    let q = read_vec3(v, t, ti, i);
                    let s = match kind {
                        FieldKind::Point => scales.point,
                        FieldKind::Vector => scales.vector,
                        _ => unreachable!(),
                    };
                    a.v_parts.push(q * s);
                }
                for j in 0..layout.num_directions {
                    a.directions.push(read_vec3(v, t, ti, layout.v_kinds.len() + j));
                }
            }
            if let Some(s) = &eps.scalars {
                for j in 0..layout.num_scalars {
                    let k = Normalizer::scalar_noise_scale(norm.action_scalar_minmax[j]);
                    a.scalars.push(s.data()[ti * layout.num_scalars + j] * k);
                }
            }
            out.push(a);
        }
        Ok(out)
    }

    /// Inverse of [`PolicyModel::noise_z_to_raw`].
    pub fn noise_raw_to_z(
        &self,
        norm: &Normalizer,
        obs: &[Observation],
        noise: &[Action],
    ) -> Result<ZAction, PolicyError> {
        self.check_sequence(noise)?;
        let scales = self.noise_scales(norm, obs)?;
        let layout = &self.cfg.layout;
        let t = self.cfg.pred_horizon;
        let mut z = ZAction::zeros(layout, t);
        for (ti, a) in noise.iter().enumerate() {
            if let Some(v) = z.vectors.as_mut() {
                for (i, kind) in layout.v_kinds.iter().enumerate() {
                    let s = match kind {
                        FieldKind::Point => scales.point,
                        FieldKind::Vector => scales.vector,
                        _ => unreachable!(),
                    };
                    write_vec3(v, t, ti, i, a.v_parts[i] * (1.0 / s));
                }
                for j in 0..layout.num_directions {
                    write_vec3(v, t, ti, layout.v_kinds.len() + j, a.directions[j]);
                }
            }
            if let Some(s) = z.scalars.as_mut() {
                for j in 0..layout.num_scalars {
                    let k = Normalizer::scalar_noise_scale(norm.action_scalar_minmax[j]);
                    s.data_mut()[ti * layout.num_scalars + j] =
                        if k > 0.0 { a.scalars[j] / k } else { 0.0 };
                }
            }
        }
        Ok(z)
    }

    fn noise_scales(&self, norm: &Normalizer, obs: &[Observation]) -> Result<ZScales, PolicyError> {
        match self.kind() {
            ModelKind::Equi => {
                let (_, theta_s) = theta_for(obs)?;
                Ok(ZScales { point: theta_s, vector: theta_s * norm.scale_ratio() })
            }
            // The baseline's z-space is per-component min-max; treat its
            // noise scale as the mean half-range (diagnostic surface only).
            ModelKind::Plain => {
                let mean_half = |mm: &[[(f64, f64); 3]]| {
                    let mut acc = 0.0;
                    let mut n = 0;
                    for entry in mm {
                        for &(lo, hi) in entry {
                            acc += (hi - lo) / 2.0;
                            n += 1;
                        }
                    }
                    if n > 0 {
                        acc / n as f64
                    } else {
                        1.0
                    }
                };
                let s = mean_half(&norm.baseline_vpart_minmax);
                Ok(ZScales { point: s, vector: s })
            }
        }
    }

    /// Per-pass network forward in z-space; returns tape ids for the noise
    /// estimate so callers can build losses on top.
    pub fn forward_z(
        &self,
        ctx: &mut Ctx,
        norm: &Normalizer,
        obs: &[Observation],
        z: &ZAction,
        k: usize,
    ) -> Result<(Option<ValueId>, Option<ValueId>), PolicyError> {
        self.cfg.check_window(obs)?;
        match &self.net {
            Net::Equi(net) => net.forward_z(ctx, &self.cfg, norm, obs, z, k),
            Net::Plain(net) => net.forward_z(ctx, &self.cfg, norm, obs, z, k),
        }
    }

    /// z-space noise prediction as plain values.
    pub fn predict_noise_z(
        &self,
        params: &ParamSet,
        norm: &Normalizer,
        obs: &[Observation],
        z: &ZAction,
        k: usize,
    ) -> Result<ZAction, PolicyError> {
        let mut ctx = Ctx::new(params);
        let (ev, es) = self.forward_z(&mut ctx, norm, obs, z, k)?;
        Ok(ZAction {
            vectors: ev.map(|id| ctx.tape.value(id).clone()),
            scalars: es.map(|id| ctx.tape.value(id).clone()),
        })
    }

    /// Raw task-coordinate surface: noisy actions in, displacement-like
    /// noise estimate out (rotates and scales with the inputs, never
    /// translates).
    pub fn predict_noise(
        &self,
        params: &ParamSet,
        norm: &Normalizer,
        obs: &[Observation],
        noisy: &[Action],
        k: usize,
    ) -> Result<Vec<Action>, PolicyError> {
        let z = self.action_to_z(norm, obs, noisy)?;
        let eps = self.predict_noise_z(params, norm, obs, &z, k)?;
        self.noise_z_to_raw(norm, obs, &eps)
    }

    fn check_sequence(&self, actions: &[Action]) -> Result<(), PolicyError> {
        if actions.len() != self.cfg.pred_horizon {
            return Err(PolicyError::Layout(format!(
                "sequence length {} != prediction horizon {}",
                actions.len(),
                self.cfg.pred_horizon
            )));
        }
        for a in actions {
            self.cfg.layout.check(a)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Group actions on observations and actions
// ---------------------------------------------------------------------------

/// Apply a similarity transform to an observation: cloud and proprio
/// positions as points, proprio directions by rotation, scalars untouched.
pub fn transform_observation(
    t: &crate::geom::Sim3,
    obs: &Observation,
) -> Result<Observation, crate::geom::GeomError> {
    let mut proprio = ProprioState {
        positions: obs.proprio.positions.iter().map(|&p| t.apply_point(p)).collect(),
        directions: Vec::with_capacity(obs.proprio.directions.len()),
        scalars: obs.proprio.scalars.clone(),
    };
    for d in &obs.proprio.directions {
        proprio.directions.push(t.apply_direction(*d)?);
    }
    Ok(Observation { cloud: t.apply_cloud(&obs.cloud), proprio })
}

/// Apply a similarity transform to an action per its layout: point entries
/// get the full action, vector entries rotation and scale, directions
/// rotation, scalars nothing.
pub fn transform_action(
    t: &crate::geom::Sim3,
    layout: &ActionLayout,
    a: &Action,
) -> Result<Action, crate::geom::GeomError> {
    let mut out = Action {
        v_parts: Vec::with_capacity(a.v_parts.len()),
        directions: Vec::with_capacity(a.directions.len()),
        scalars: a.scalars.clone(),
    };
    for (v, kind) in a.v_parts.iter().zip(&layout.v_kinds) {
        out.v_parts.push(match kind {
            FieldKind::Point => t.apply_point(*v),
            FieldKind::Vector => t.apply_vector(*v),
            _ => unreachable!("layout validated"),
        });
    }
    for d in &a.directions {
        out.directions.push(t.apply_direction(*d)?);
    }
    Ok(out)
}

/// Noise transforms like a displacement: every v-part entry (point- or
/// vector-kind) picks up rotation and scale but no translation; direction
/// entries rotate without unit-norm enforcement.
pub fn transform_noise_action(t: &crate::geom::Sim3, a: &Action) -> Action {
    Action {
        v_parts: a.v_parts.iter().map(|&v| t.apply_vector(v)).collect(),
        directions: a.directions.iter().map(|&d| t.rotation().mul_vec(d)).collect(),
        scalars: a.scalars.clone(),
    }
}

impl ZAction {
    /// Rotate the vector channels (z-space is scale- and translation-free,
    /// so the group acts by rotation alone).
    pub fn rotated(&self, r: &crate::geom::Mat3) -> ZAction {
        ZAction {
            vectors: self.vectors.as_ref().map(|v| crate::vn::rotate_vectors(v, r)),
            scalars: self.scalars.clone(),
        }
    }
}

fn write_vec3(t: &mut Tensor, _horizon: usize, ti: usize, channel: usize, v: Vec3) {
    let c = t.shape()[1];
    let base = (ti * c + channel) * 3;
    let d = t.data_mut();
    d[base] = v.x;
    d[base + 1] = v.y;
    d[base + 2] = v.z;
}

fn read_vec3(t: &Tensor, _horizon: usize, ti: usize, channel: usize) -> Vec3 {
    let c = t.shape()[1];
    let base = (ti * c + channel) * 3;
    Vec3::new(t.data()[base], t.data()[base + 1], t.data()[base + 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{random_sim3, Sim3};

    /// Layout exercising every field kind.
    fn rich_config() -> PolicyConfig {
        PolicyConfig {
            obs_horizon: 2,
            pred_horizon: 8,
            act_horizon: 4,
            layout: ActionLayout::new(vec![FieldKind::Point, FieldKind::Vector], 1, 2),
            proprio: ProprioLayout { num_positions: 2, num_directions: 1, num_scalars: 2 },
            encoder: EncoderConfig {
                num_layers: 2,
                hidden_channels: 8,
                points_in: 8,
                out_channels: 6,
                knn: 4,
                gram_cap: 8,
            },
            unet_channels: [6, 8, 8],
            film_hidden: 16,
            pos_emb_dim: 16,
            gram_cap: 8,
            plain_encoder_width: 16,
        }
    }

    fn rand_observation(cfg: &PolicyConfig, rng: &mut Rng) -> Observation {
        let cloud = PointCloud::new(
            (0..cfg.encoder.points_in)
                .map(|_| Vec3::new(rng.range(-2.0, 2.0), rng.range(-2.0, 2.0), rng.range(-2.0, 2.0)))
                .collect(),
        )
        .unwrap();
        let mut proprio = ProprioState {
            positions: (0..cfg.proprio.num_positions)
                .map(|_| Vec3::new(rng.range(-2.0, 2.0), rng.range(-2.0, 2.0), rng.range(-2.0, 2.0)))
                .collect(),
            directions: Vec::new(),
            scalars: (0..cfg.proprio.num_scalars).map(|_| rng.range(-1.0, 1.0)).collect(),
        };
        for _ in 0..cfg.proprio.num_directions {
            let v = Vec3::new(rng.normal(), rng.normal(), rng.normal());
            proprio.directions.push(v.normalized().unwrap());
        }
        Observation { cloud, proprio }
    }

    fn rand_window(cfg: &PolicyConfig, rng: &mut Rng) -> Vec<Observation> {
        (0..cfg.obs_horizon).map(|_| rand_observation(cfg, rng)).collect()
    }

    fn rand_actions(cfg: &PolicyConfig, rng: &mut Rng) -> Vec<Action> {
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
                    a.directions.push(v.normalized().unwrap());
                }
                a
            })
            .collect()
    }

    fn norm_for(cfg: &PolicyConfig) -> Normalizer {
        Normalizer::identity(
            cfg.proprio.num_scalars,
            cfg.layout.num_scalars,
            cfg.proprio.num_positions,
            cfg.layout.v_kinds.len(),
        )
    }

    fn build_equi(cfg: &PolicyConfig, seed: u64) -> (ParamSet, PolicyModel) {
        let mut params = ParamSet::new();
        let mut rng = Rng::seed_from(seed);
        let model = PolicyModel::build(ModelKind::Equi, cfg.clone(), &mut params, &mut rng).unwrap();
        (params, model)
    }

    #[test]
    fn action_repr_identity_canonicalization_passes_values() {
        // Cloud with centroid 0 and unit mean distance → Θ_c = 0, Θ_s = 1,
        // so z equals the raw action fields.
        let cfg = rich_config();
        let (_, model) = build_equi(&cfg, 1);
        let norm = norm_for(&cfg);
        let mut rng = Rng::seed_from(2);
        let mut obs = rand_window(&cfg, &mut rng);
        // Rescale the last cloud to exact unit canonicalization.
        let (_, c, s) = canonicalize(&obs[1].cloud).unwrap();
        let pts: Vec<Vec3> = obs[1].cloud.iter().map(|&p| (p - c) * (1.0 / s)).collect();
        obs[1].cloud = PointCloud::new(pts).unwrap();
        let actions = rand_actions(&cfg, &mut rng);
        let z = model.action_to_z(&norm, &obs, &actions).unwrap();
        let v = z.vectors.as_ref().unwrap();
        for (ti, a) in actions.iter().enumerate() {
            for (i, &p) in a.v_parts.iter().enumerate() {
                let q = read_vec3(v, cfg.pred_horizon, ti, i);
                assert!((q - p).norm() < 1e-9, "v-part {i} at t={ti} changed");
            }
            for (j, &d) in a.directions.iter().enumerate() {
                let q = read_vec3(v, cfg.pred_horizon, ti, cfg.layout.v_kinds.len() + j);
                assert!((q - d).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn action_repr_divides_vector_entries_by_scale() {
        // Doubling Θ_s (by scaling the cloud) halves vector-kind channels.
        let cfg = rich_config();
        let (_, model) = build_equi(&cfg, 3);
        let norm = norm_for(&cfg);
        let mut rng = Rng::seed_from(4);
        let obs = rand_window(&cfg, &mut rng);
        let actions = rand_actions(&cfg, &mut rng);
        let z1 = model.action_to_z(&norm, &obs, &actions).unwrap();
        let mut scaled = obs.clone();
        let doubler = Sim3::new(crate::geom::Mat3::IDENTITY, Vec3::ZERO, 2.0).unwrap();
        scaled[1] = transform_observation(&doubler, &obs[1]).unwrap();
        let z2 = model.action_to_z(&norm, &scaled, &actions).unwrap();
        let (v1, v2) = (z1.vectors.unwrap(), z2.vectors.unwrap());
        // vector-kind entry is channel 1
        for ti in 0..cfg.pred_horizon {
            let a = read_vec3(&v1, cfg.pred_horizon, ti, 1);
            let b = read_vec3(&v2, cfg.pred_horizon, ti, 1);
            assert!((b * 2.0 - a).norm() < 1e-9 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn action_repr_is_invariant_under_sim3() {
        // Transforming observation and action together leaves z exactly
        // rotation-covariant: vector channels rotate, scalars fixed.
        let cfg = rich_config();
        let (_, model) = build_equi(&cfg, 5);
        let norm = norm_for(&cfg);
        let mut rng = Rng::seed_from(6);
        let obs = rand_window(&cfg, &mut rng);
        let actions = rand_actions(&cfg, &mut rng);
        let z = model.action_to_z(&norm, &obs, &actions).unwrap();
        for _ in 0..100 {
            let t = random_sim3(&mut rng, 5.0);
            let tobs: Vec<Observation> =
                obs.iter().map(|o| transform_observation(&t, o).unwrap()).collect();
            let tact: Vec<Action> = actions
                .iter()
                .map(|a| transform_action(&t, &cfg.layout, a).unwrap())
                .collect();
            let tz = model.action_to_z(&norm, &tobs, &tact).unwrap();
            let want = z.rotated(t.rotation());
            let err = crate::vn::max_rel_err(tz.vectors.as_ref().unwrap(), want.vectors.as_ref().unwrap());
            assert!(err < 1e-9, "z vectors rel err {err}");
            assert_eq!(tz.scalars, z.scalars);
        }
    }

    #[test]
    fn assemble_round_trips_actions() {
        let cfg = rich_config();
        let (_, model) = build_equi(&cfg, 7);
        let norm = norm_for(&cfg);
        let mut rng = Rng::seed_from(8);
        let obs = rand_window(&cfg, &mut rng);
        let actions = rand_actions(&cfg, &mut rng);
        let z = model.action_to_z(&norm, &obs, &actions).unwrap();
        let back = model.z_to_action(&norm, &obs, &z).unwrap();
        for (a, b) in actions.iter().zip(&back) {
            for (x, y) in a.v_parts.iter().zip(&b.v_parts) {
                assert!((*x - *y).norm() < 1e-12 * (1.0 + x.norm()));
            }
            for (x, y) in a.directions.iter().zip(&b.directions) {
                assert!((*x - *y).norm() < 1e-12);
            }
            for (x, y) in a.scalars.iter().zip(&b.scalars) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn assembled_directions_are_unit_norm() {
        let cfg = rich_config();
        let (_, model) = build_equi(&cfg, 9);
        let norm = norm_for(&cfg);
        let mut rng = Rng::seed_from(10);
        let obs = rand_window(&cfg, &mut rng);
        let z = ZAction::randn(&cfg.layout, cfg.pred_horizon, &mut rng);
        let actions = model.z_to_action(&norm, &obs, &z).unwrap();
        for a in &actions {
            for d in &a.directions {
                assert!((d.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_initialized_head_predicts_zero_noise() {
        let cfg = rich_config();
        let (params, model) = build_equi(&cfg, 11);
        let norm = norm_for(&cfg);
        let mut rng = Rng::seed_from(12);
        let obs = rand_window(&cfg, &mut rng);
        let z = ZAction::randn(&cfg.layout, cfg.pred_horizon, &mut rng);
        let eps = model.predict_noise_z(&params, &norm, &obs, &z, 7).unwrap();
        for x in eps.flat() {
            assert_eq!(x, 0.0);
        }
        // Plain variant shares the contract.
        let mut params2 = ParamSet::new();
        let plain =
            PolicyModel::build(ModelKind::Plain, cfg.clone(), &mut params2, &mut Rng::seed_from(13))
                .unwrap();
        let eps = plain.predict_noise_z(&params2, &norm, &obs, &z, 7).unwrap();
        for x in eps.flat() {
            assert_eq!(x, 0.0);
        }
    }

    #[test]
    fn pos_emb_distinguishes_steps_and_k_enters_scalars_only() {
        let cfg = rich_config();
        let (params, model) = build_equi(&cfg, 14);
        let norm = norm_for(&cfg);
        let mut rng = Rng::seed_from(15);
        // Randomize every zero-initialized head (output and FiLM) so k can
        // reach the output at all.
        let mut params = params;
        for slot in 0..params.len() {
            if params.value(slot).data().iter().all(|&x| x == 0.0) {
                let shape = params.value(slot).shape().to_vec();
                let n: usize = shape.iter().product();
                params.get_mut(slot).value =
                    Tensor::new(shape, (0..n).map(|_| rng.normal() * 0.3).collect()).unwrap();
            }
        }
        let obs = rand_window(&cfg, &mut rng);
        let z = ZAction::randn(&cfg.layout, cfg.pred_horizon, &mut rng);
        let e1 = model.predict_noise_z(&params, &norm, &obs, &z, 3).unwrap();
        let e2 = model.predict_noise_z(&params, &norm, &obs, &z, 77).unwrap();
        let d: f64 = e1
            .flat()
            .iter()
            .zip(e2.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d > 1e-9, "changing k must change the prediction");
    }

    #[test]
    fn conditioning_zeroes_position_at_centroid() {
        // A proprio position equal to Θ_c canonicalizes to the zero vector.
        let cfg = rich_config();
        let mut rng = Rng::seed_from(16);
        let obs = rand_observation(&cfg, &mut rng);
        let (_, theta_c, theta_s) = canonicalize(&obs.cloud).unwrap();
        let q = (theta_c - theta_c) * (1.0 / theta_s);
        assert_eq!(q, Vec3::ZERO);
    }

    #[test]
    fn layout_and_horizon_mismatches_error() {
        let cfg = rich_config();
        let (params, model) = build_equi(&cfg, 17);
        let norm = norm_for(&cfg);
        let mut rng = Rng::seed_from(18);
        let obs = rand_window(&cfg, &mut rng);
        let mut actions = rand_actions(&cfg, &mut rng);
        actions.pop();
        assert!(matches!(
            model.action_to_z(&norm, &obs, &actions),
            Err(PolicyError::Layout(_))
        ));
        let z = ZAction::randn(&cfg.layout, cfg.pred_horizon, &mut rng);
        let short = &obs[..1];
        assert!(matches!(
            model.predict_noise_z(&params, &norm, short, &z, 1),
            Err(PolicyError::Horizon { .. })
        ));
    }

    #[test]
    fn pos_emb_has_unit_components() {
        let e = pos_emb(13, 32);
        assert_eq!(e.numel(), 32);
        for x in e.data() {
            assert!(x.abs() <= 1.0);
        }
        assert_ne!(pos_emb(1, 32), pos_emb(2, 32));
    }
}
