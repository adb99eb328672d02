//! Vector-neuron layer family.
//!
//! Every layer here is SO(3)-equivariant by construction: vector channels
//! (each a 3-vector) are only ever mixed by channel weights, gated by
//! rotation-invariant scalars, or rescaled by invariant norms. Scalar
//! channels ride along untouched by rotations. The numerical equivariance
//! suite at the bottom checks `L(V·Rᵀ) = L(V)·Rᵀ` for every layer.

use crate::autodiff::{AdError, ParamSet, Tape, Tensor, ValueId};
use crate::geom::{Mat3, Rng};

/// Degenerate-direction guard for [`VnNonlin`]: predicted directions with a
/// norm below this pass the input through unchanged.
pub const NONLIN_DIR_EPS: f64 = 1e-12;

/// Invariant divisor guard for [`vec_layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Forward-pass context: a tape plus memoized parameter bindings, so each
/// parameter appears on the tape exactly once per pass.
pub struct Ctx<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    bound: Vec<Option<ValueId>>,
}

impl<'p> Ctx<'p> {
    pub fn new(params: &'p ParamSet) -> Ctx<'p> {
        Ctx {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    /// Tape id of parameter `slot`, binding it on first use.
    pub fn p(&mut self, slot: usize) -> ValueId {
        if self.bound.len() < self.params.len() {
            self.bound.resize(self.params.len(), None);
        }
        match self.bound[slot] {
            Some(id) => id,
            None => {
                let id = self.tape.param(slot, self.params.value(slot).clone());
                self.bound[slot] = Some(id);
                id
            }
        }
    }

    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        self.tape.leaf(t)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        self.tape.value(id)
    }
}

/// Dual-channel feature: vector channels `[.., C_v, 3]` and scalar channels
/// `[.., C_s]`. Either side may be absent (zero channels).
#[derive(Debug, Clone, Copy)]
pub struct GeomFeature {
    pub vectors: Option<ValueId>,
    pub scalars: Option<ValueId>,
}

impl GeomFeature {
    pub fn vectors_only(v: ValueId) -> GeomFeature {
        GeomFeature { vectors: Some(v), scalars: None }
    }

    pub fn new(vectors: Option<ValueId>, scalars: Option<ValueId>) -> GeomFeature {
        GeomFeature { vectors, scalars }
    }
}

fn gaussian_init(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * scale).collect())
        .expect("shape/data agree by construction")
}

// ---------------------------------------------------------------------------
// VecLinear
// ---------------------------------------------------------------------------

/// Channel-mixing linear map on vector features; never mixes spatial
/// components, hence rotation-equivariant for any weights.
#[derive(Debug, Clone)]
pub struct VecLinear {
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl VecLinear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut Rng,
    ) -> Result<VecLinear, AdError> {
        let w = params.add(name, gaussian_init(rng, &[c_out, c_in], c_in))?;
        Ok(VecLinear { w, c_in, c_out })
    }

    pub fn new_zero(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<VecLinear, AdError> {
        let w = params.add(name, Tensor::zeros(&[c_out, c_in]))?;
        Ok(VecLinear { w, c_in, c_out })
    }

    pub fn forward(&self, ctx: &mut Ctx, v: ValueId) -> Result<ValueId, AdError> {
        let w = ctx.p(self.w);
        ctx.tape.channel_mix_v(w, v)
    }
}

// ---------------------------------------------------------------------------
// VnNonlin
// ---------------------------------------------------------------------------

/// Direction-gated vector nonlinearity. With per-channel predicted
/// direction `dᵢ`: keep `vᵢ` when `⟨vᵢ, dᵢ⟩ ≥ 0`, otherwise remove the
/// component along `d̂ᵢ`. Channels whose predicted direction has norm below
/// [`NONLIN_DIR_EPS`] pass through unchanged.
#[derive(Debug, Clone)]
pub struct VnNonlin {
    pub dir: VecLinear,
}

impl VnNonlin {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        channels: usize,
        rng: &mut Rng,
    ) -> Result<VnNonlin, AdError> {
        Ok(VnNonlin {
            dir: VecLinear::new(params, name, channels, channels, rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, v: ValueId) -> Result<ValueId, AdError> {
        let d = self.dir.forward(ctx, v)?;
        let t = &mut ctx.tape;
        let d_norm = t.vector_norm(d)?; // [.., C]
        // Divide by the exact norm where ‖d‖ ≥ eps; degenerate channels use a
        // dummy divisor of 1 and are overridden by the outer select below.
        let ones = t.leaf(Tensor::filled(t.shape(d_norm), 1.0));
        let valid_gate = t.shift(d_norm, -NONLIN_DIR_EPS);
        let safe = t.select_ge_s(d_norm, ones, valid_gate)?;
        let inv = t.recip(safe);
        let d_hat = t.mul_prefix(d, inv)?;
        let along = t.inner(v, d_hat)?; // ⟨v, d̂⟩
        let proj = t.mul_prefix(d_hat, along)?;
        let rejected = t.sub(v, proj)?;
        let gate = t.inner(v, d)?;
        let kept = t.select_ge_v(v, rejected, gate)?;
        // Degenerate directions: gate on NONLIN_DIR_EPS − ‖d‖.
        let neg_norm = t.scale(d_norm, -1.0);
        let degenerate_gate = t.shift(neg_norm, NONLIN_DIR_EPS);
        t.select_ge_v(v, kept, degenerate_gate)
    }
}

// ---------------------------------------------------------------------------
// VecConv1d
// ---------------------------------------------------------------------------

/// Temporal 1D convolution applied independently to the x/y/z component
/// planes; channels mix through the kernel only.
#[derive(Debug, Clone)]
pub struct VecConv1d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl VecConv1d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel_width: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Result<VecConv1d, AdError> {
        let kernel = params.add(
            name,
            gaussian_init(rng, &[c_out, c_in, kernel_width], c_in * kernel_width),
        )?;
        Ok(VecConv1d { kernel, stride, pad })
    }

    pub fn forward(&self, ctx: &mut Ctx, f: ValueId) -> Result<ValueId, AdError> {
        let k = ctx.p(self.kernel);
        ctx.tape.conv1d(k, f, self.stride, self.pad)
    }
}

// ---------------------------------------------------------------------------
// vec_layer_norm
// ---------------------------------------------------------------------------

/// Divide each timestep's vector channels by the RMS of their norms plus
/// [`LAYER_NORM_EPS`]. The divisor is rotation-invariant, so equivariance is
/// preserved; scaling the input scales the divisor, so the output is
/// scale-stable.
pub fn vec_layer_norm(tape: &mut Tape, v: ValueId) -> Result<ValueId, AdError> {
    let nsq = tape.inner(v, v)?; // [.., C]
    let msq = tape.mean_last(nsq)?; // [..]
    let rms = tape.sqrt(msq);
    let denom = tape.shift(rms, LAYER_NORM_EPS);
    let inv = tape.recip(denom);
    tape.mul_prefix(v, inv)
}

/// Scalar-stream companion of [`vec_layer_norm`].
pub fn scalar_layer_norm(tape: &mut Tape, x: ValueId) -> Result<ValueId, AdError> {
    let sq = tape.mul(x, x)?;
    let msq = tape.mean_last(sq)?;
    let rms = tape.sqrt(msq);
    let denom = tape.shift(rms, LAYER_NORM_EPS);
    let inv = tape.recip(denom);
    tape.mul_prefix(x, inv)
}

// ---------------------------------------------------------------------------
// invariants_from_vectors
// ---------------------------------------------------------------------------

/// Pairwise inner products of the first `min(C, cap)` channels: the minimal
/// exactly rotation-invariant summary of a vector feature.
pub fn invariants_from_vectors(
    tape: &mut Tape,
    v: ValueId,
    cap: usize,
) -> Result<ValueId, AdError> {
    tape.gram_upper(v, cap)
}

// ---------------------------------------------------------------------------
// ScalarLinear
// ---------------------------------------------------------------------------

/// Plain affine map on scalar channels (`[C_in] → [C_out]`, optionally with
/// a leading time axis).
#[derive(Debug, Clone)]
pub struct ScalarLinear {
    pub w: usize,
    pub b: usize,
}

impl ScalarLinear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut Rng,
    ) -> Result<ScalarLinear, AdError> {
        let w = params.add(&format!("{name}.w"), gaussian_init(rng, &[c_out, c_in], c_in))?;
        let b = params.add(&format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(ScalarLinear { w, b })
    }

    pub fn new_zero(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<ScalarLinear, AdError> {
        let w = params.add(&format!("{name}.w"), Tensor::zeros(&[c_out, c_in]))?;
        let b = params.add(&format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(ScalarLinear { w, b })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: ValueId) -> Result<ValueId, AdError> {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        let y = ctx.tape.channel_mix_s(w, x)?;
        ctx.tape.add_suffix(y, b)
    }
}

// ---------------------------------------------------------------------------
// VecFilm
// ---------------------------------------------------------------------------

/// Equivariant feature-wise modulation. Gains are predicted from invariant
/// inputs only (conditioning scalars plus Gram invariants of conditioning
/// vectors) so they commute with rotation; vector biases come from a
/// [`VecLinear`] over the conditioning vectors. Zero-initialized heads give
/// the identity modulation γ = 1, β = 0.
#[derive(Debug, Clone)]
pub struct VecFilm {
    hidden: ScalarLinear,
    head: ScalarLinear,
    beta: Option<VecLinear>,
    gram_cap: usize,
    c_v: usize,
    c_s: usize,
}

impl VecFilm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cond_vec_channels: usize,
        cond_scalar_channels: usize,
        gram_cap: usize,
        hidden_width: usize,
        c_v: usize,
        c_s: usize,
        rng: &mut Rng,
    ) -> Result<VecFilm, AdError> {
        let m = cond_vec_channels.min(gram_cap);
        let inv_dim = cond_scalar_channels + m * (m + 1) / 2;
        let hidden = ScalarLinear::new(params, &format!("{name}.film.hidden"), inv_dim, hidden_width, rng)?;
        let head = ScalarLinear::new_zero(params, &format!("{name}.film.head"), hidden_width, c_v + 2 * c_s)?;
        let beta = if cond_vec_channels > 0 && c_v > 0 {
            Some(VecLinear::new_zero(
                params,
                &format!("{name}.film.beta"),
                cond_vec_channels,
                c_v,
            )?)
        } else {
            None
        };
        Ok(VecFilm { hidden, head, beta, gram_cap, c_v, c_s })
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        f: GeomFeature,
        cond: GeomFeature,
    ) -> Result<GeomFeature, AdError> {
        // Invariant conditioning: scalars ++ Gram of vector channels.
        let mut inv_parts = Vec::new();
        if let Some(s) = cond.scalars {
            inv_parts.push(s);
        }
        if let Some(v) = cond.vectors {
            inv_parts.push(invariants_from_vectors(&mut ctx.tape, v, self.gram_cap)?);
        }
        if inv_parts.is_empty() {
            return Err(AdError::BadShape {
                op: "vec_film",
                msg: "conditioning carries neither vector nor scalar channels",
                shape: vec![],
            });
        }
        let inv = if inv_parts.len() == 1 {
            inv_parts[0]
        } else {
            ctx.tape.concat(&inv_parts, 0)?
        };
        let h = self.hidden.forward(ctx, inv)?;
        let h = ctx.tape.relu(h)?;
        let raw = self.head.forward(ctx, h)?; // [c_v + 2*c_s]

        let mut out = GeomFeature::new(None, None);
        if let Some(fv) = f.vectors {
            let g = ctx.tape.slice(raw, 0, 0, self.c_v)?;
            let gamma = ctx.tape.shift(g, 1.0);
            let gamma = self.broadcast_gain(ctx, gamma, fv)?;
            let mut v = ctx.tape.mul_prefix(fv, gamma)?;
            if let (Some(beta), Some(cv)) = (&self.beta, cond.vectors) {
                let b = beta.forward(ctx, cv)?;
                v = ctx.tape.add_suffix(v, b)?;
            }
            out.vectors = Some(v);
        }
        if let Some(fs) = f.scalars {
            let g = ctx.tape.slice(raw, 0, self.c_v, self.c_s)?;
            let gamma = ctx.tape.shift(g, 1.0);
            let gamma = self.broadcast_gain(ctx, gamma, fs)?;
            let scaled = ctx.tape.mul_prefix(fs, gamma)?;
            let beta_s = ctx.tape.slice(raw, 0, self.c_v + self.c_s, self.c_s)?;
            out.scalars = Some(ctx.tape.add_suffix(scaled, beta_s)?);
        }
        Ok(out)
    }

    /// Expand per-channel gains over a leading time axis when present.
    fn broadcast_gain(
        &self,
        ctx: &mut Ctx,
        gain: ValueId,
        like: ValueId,
    ) -> Result<ValueId, AdError> {
        let target_rank = ctx.tape.shape(like).len();
        let has_time = target_rank == 3 || (target_rank == 2 && ctx.tape.shape(like)[1] != 3);
        if has_time {
            let t = ctx.tape.shape(like)[0];
            ctx.tape.repeat0(gain, t)
        } else {
            Ok(gain)
        }
    }
}

// ---------------------------------------------------------------------------
// FFuse
// ---------------------------------------------------------------------------

/// Fusion layer taking vector information first and scalar information
/// second: vectors pass through a [`VecLinear`], scalars modulate the result
/// through invariant per-channel gains. With no scalars it reduces to the
/// plain linear map.
#[derive(Debug, Clone)]
pub struct FFuse {
    pub lin: VecLinear,
    gain: Option<ScalarLinear>,
}

impl FFuse {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        vec_in: usize,
        scalar_in: usize,
        c_out: usize,
        rng: &mut Rng,
    ) -> Result<FFuse, AdError> {
        let lin = VecLinear::new(params, &format!("{name}.fuse.lin"), vec_in, c_out, rng)?;
        let gain = if scalar_in > 0 {
            Some(ScalarLinear::new(
                params,
                &format!("{name}.fuse.gain"),
                scalar_in,
                c_out,
                rng,
            )?)
        } else {
            None
        };
        Ok(FFuse { lin, gain })
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        vectors: ValueId,
        scalars: Option<ValueId>,
    ) -> Result<ValueId, AdError> {
        let base = self.lin.forward(ctx, vectors)?;
        match (&self.gain, scalars) {
            (Some(gain), Some(s)) => {
                let g = gain.forward(ctx, s)?;
                let g = ctx.tape.shift(g, 1.0);
                ctx.tape.mul_prefix(base, g)
            }
            _ => Ok(base),
        }
    }
}

// ---------------------------------------------------------------------------
// Rotation helpers (used by property suites and the equivariance audit)
// ---------------------------------------------------------------------------

/// Apply a rotation to every 3-vector in a `[.., C, 3]` tensor.
pub fn rotate_vectors(t: &Tensor, r: &Mat3) -> Tensor {
    debug_assert_eq!(*t.shape().last().unwrap(), 3);
    let mut out = t.clone();
    let data = out.data_mut();
    for c in 0..data.len() / 3 {
        let v = crate::geom::Vec3::new(data[c * 3], data[c * 3 + 1], data[c * 3 + 2]);
        let w = r.mul_vec(v);
        data[c * 3] = w.x;
        data[c * 3 + 1] = w.y;
        data[c * 3 + 2] = w.z;
    }
    out
}

/// Max-norm relative difference `‖a − b‖∞ / (‖b‖∞ + 1e-12)`.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel err over mismatched shapes");
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        diff = diff.max((x - y).abs());
        scale = scale.max(y.abs());
    }
    diff / (scale + 1e-12)
}
