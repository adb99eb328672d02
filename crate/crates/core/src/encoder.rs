//! SIM(3)-equivariant point-cloud encoder.
//!
//! Translation and scale are removed up front by canonicalizing the cloud
//! around its centroid `Θ_c` and mean point-to-centroid distance `Θ_s`; the
//! remaining rotation dependence is carried equivariantly through a
//! PointNet-style stack of vector-neuron layers with mean-pooled
//! aggregation. The latent is `Θ = (Θ_R, Θ_inv, Θ_c, Θ_s)`: equivariant
//! vector channels, their Gram invariants, centroid and scale.

use thiserror::Error;

use crate::autodiff::{AdError, ParamSet, Tensor, ValueId};
use crate::geom::{PointCloud, Rng, Vec3};
use crate::vn::{invariants_from_vectors, Ctx, VecLinear, VnNonlin};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("degenerate cloud: zero scale")]
    DegenerateCloud,
    #[error("cloud must contain at least two points, got {0}")]
    TooFewPoints(usize),
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_channels: usize,
    /// Clouds are resampled to this size before encoding.
    pub points_in: usize,
    /// Vector channels in `Θ_R`.
    pub out_channels: usize,
    /// Neighbourhood size for configs deeper than the global-pooling stack.
    pub knn: usize,
    /// Channel cap for the Gram invariants `Θ_inv`.
    pub gram_cap: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // Push-T scale: small clouds, two layers, one global pooling stage.
        EncoderConfig {
            num_layers: 2,
            hidden_channels: 16,
            points_in: 8,
            out_channels: 8,
            knn: 16,
            gram_cap: 8,
        }
    }
}

/// Encoder latent. `theta_r`/`theta_inv` live on the tape (they carry
/// parameter gradients); centroid and scale are plain values since they
/// depend on the input cloud only.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLatent {
    pub theta_r: ValueId,
    pub theta_inv: ValueId,
    pub theta_c: Vec3,
    pub theta_s: f64,
}

/// Center a cloud on its centroid and normalize by the mean
/// point-to-centroid distance.
///
/// Returns `(X', Θ_c, Θ_s)` with `X' = (X − Θ_c)/Θ_s`. Fails on clouds of
/// fewer than two points or with all points coincident.
pub fn canonicalize(cloud: &PointCloud) -> Result<(PointCloud, Vec3, f64), EncoderError> {
    let n = cloud.len();
    if n < 2 {
        return Err(EncoderError::TooFewPoints(n));
    }
    let centroid = cloud.centroid();
    let mean_dist = cloud.iter().map(|&p| (p - centroid).norm()).sum::<f64>() / n as f64;
    if mean_dist <= f64::EPSILON * (1.0 + centroid.norm()) {
        return Err(EncoderError::DegenerateCloud);
    }
    let inv = 1.0 / mean_dist;
    let canonical = PointCloud::new(
        cloud.iter().map(|&p| (p - centroid) * inv).collect(),
    )
    .expect("canonical cloud inherits validity");
    Ok((canonical, centroid, mean_dist))
}

/// Resample a cloud to exactly `n` points: uniformly without replacement
/// when the cloud is at least that large (a permutation when `n == N`),
/// uniformly with replacement otherwise.
pub fn resample(cloud: &PointCloud, n: usize, rng: &mut Rng) -> PointCloud {
    let points = cloud.points();
    let picked: Vec<Vec3> = if points.len() >= n {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        rng.shuffle(&mut idx);
        idx[..n].iter().map(|&i| points[i]).collect()
    } else {
        (0..n).map(|_| points[rng.below(points.len())]).collect()
    };
    PointCloud::new(picked).expect("resampled cloud is non-empty")
}

/// PointNet-style equivariant encoder: per-point vector-neuron layers with
/// mean-pooled context between layers and a global mean pool at the end.
#[derive(Debug, Clone)]
pub struct EquiEncoder {
    pub cfg: EncoderConfig,
    lift: VecLinear,
    lift_nonlin: VnNonlin,
    blocks: Vec<(VecLinear, VnNonlin)>,
    head: VecLinear,
}

impl EquiEncoder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cfg: EncoderConfig,
        rng: &mut Rng,
    ) -> Result<EquiEncoder, AdError> {
        assert!(cfg.num_layers >= 1, "encoder needs at least one layer");
        let h = cfg.hidden_channels;
        // Two input channels per point: the point itself and the cloud's
        // norm-weighted centroid. A single channel would leave every
        // per-point feature parallel to x_i, and the global mean of a
        // centred cloud then collapses to zero.
        let lift = VecLinear::new(params, &format!("{name}.lift"), 2, h, rng)?;
        let lift_nonlin = VnNonlin::new(params, &format!("{name}.lift.nonlin"), h, rng)?;
        let mut blocks = Vec::new();
        for layer in 1..cfg.num_layers {
            // Each deeper layer sees [self ++ neighbourhood context].
            let lin = VecLinear::new(params, &format!("{name}.l{layer}"), 2 * h, h, rng)?;
            let nonlin = VnNonlin::new(params, &format!("{name}.l{layer}.nonlin"), h, rng)?;
            blocks.push((lin, nonlin));
        }
        let head = VecLinear::new(params, &format!("{name}.head"), h, cfg.out_channels, rng)?;
        Ok(EquiEncoder { cfg, lift, lift_nonlin, blocks, head })
    }

    pub fn encode(&self, ctx: &mut Ctx, cloud: &PointCloud) -> Result<EncoderLatent, EncoderError> {
        let (canonical, theta_c, theta_s) = canonicalize(cloud)?;
        let n = canonical.len();
        let anchor = norm_weighted_centroid(&canonical);
        let mut data = Vec::with_capacity(n * 6);
        for p in canonical.iter() {
            data.extend_from_slice(&[p.x, p.y, p.z, anchor.x, anchor.y, anchor.z]);
        }
        let x = ctx.leaf(Tensor::new(vec![n, 2, 3], data).expect("cloud tensor"));

        let mut feat = self.lift.forward(ctx, x)?; // [N, H, 3]
        feat = self.lift_nonlin.forward(ctx, feat)?;

        // Shallow configs aggregate globally; deeper ones over kNN
        // neighbourhoods (computed on canonical coordinates, so the graph is
        // similarity-invariant).
        let neighbor_mix = if self.blocks.len() > 1 {
            Some(ctx.leaf(knn_mean_matrix(&canonical, self.cfg.knn)))
        } else {
            None
        };
        for (lin, nonlin) in &self.blocks {
            let context = match &neighbor_mix {
                None => {
                    let pooled = ctx.tape.mean_axis0(feat)?; // [H, 3]
                    ctx.tape.repeat0(pooled, n)?
                }
                Some(mix) => {
                    let h = ctx.tape.shape(feat)[1];
                    let flat = ctx.tape.reshape(feat, &[n, h * 3])?;
                    let mixed = ctx.tape.matmul(*mix, flat)?;
                    ctx.tape.reshape(mixed, &[n, h, 3])?
                }
            };
            let stacked = ctx.tape.concat(&[feat, context], 1)?; // [N, 2H, 3]
            feat = lin.forward(ctx, stacked)?;
            feat = nonlin.forward(ctx, feat)?;
        }

        let pooled = ctx.tape.mean_axis0(feat)?; // [H, 3]
        let theta_r = self.head.forward(ctx, pooled)?; // [C, 3]
        let theta_inv = invariants_from_vectors(&mut ctx.tape, theta_r, self.cfg.gram_cap)?;
        Ok(EncoderLatent { theta_r, theta_inv, theta_c, theta_s })
    }
}

/// Norm-weighted centroid `Σ‖xⱼ‖·xⱼ / Σ‖xⱼ‖`: a rotation-equivariant,
/// permutation- and duplication-invariant anchor that is generically
/// non-zero on centred clouds.
fn norm_weighted_centroid(cloud: &PointCloud) -> Vec3 {
    let mut acc = Vec3::ZERO;
    let mut total = 0.0;
    for &p in cloud.iter() {
        let w = p.norm();
        acc = acc + p * w;
        total += w;
    }
    if total > 0.0 {
        acc * (1.0 / total)
    } else {
        Vec3::ZERO
    }
}

/// Row-stochastic `[N, N]` matrix averaging each point's `k` nearest
/// neighbours (self included); ties break on index.
fn knn_mean_matrix(cloud: &PointCloud, k: usize) -> Tensor {
    let pts = cloud.points();
    let n = pts.len();
    let k = k.min(n);
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let mut by_dist: Vec<(f64, usize)> = (0..n)
            .map(|j| ((pts[i] - pts[j]).norm_sq(), j))
            .collect();
        by_dist.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let w = 1.0 / k as f64;
        for &(_, j) in by_dist.iter().take(k) {
            m.data_mut()[i * n + j] = w;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Gradients, ParamSet};
    use crate::geom::{random_sim3, Rng, Sim3};
    use crate::vn::{max_rel_err, rotate_vectors};

    fn rand_cloud(rng: &mut Rng, n: usize, extent: f64) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.range(-extent, extent),
                        rng.range(-extent, extent),
                        rng.range(-extent, extent),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn canonicalize_cube_corners() {
        // Corners of the ±1 cube: centroid 0, every corner at distance √3.
        let mut corners = Vec::new();
        for &x in &[-1.0, 1.0] {
            for &y in &[-1.0, 1.0] {
                for &z in &[-1.0, 1.0] {
                    corners.push(Vec3::new(x, y, z));
                }
            }
        }
        let cloud = PointCloud::new(corners).unwrap();
        let (canonical, theta_c, theta_s) = canonicalize(&cloud).unwrap();
        assert!(theta_c.norm() < 1e-12);
        assert!((theta_s - 3.0f64.sqrt()).abs() < 1e-12);
        let mean = canonical.centroid();
        assert!(mean.norm() < 1e-12);
        let mean_norm =
            canonical.iter().map(|p| p.norm()).sum::<f64>() / canonical.len() as f64;
        assert!((mean_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn canonicalize_translation_shifts_centroid_only() {
        let mut rng = Rng::seed_from(1);
        let cloud = rand_cloud(&mut rng, 12, 5.0);
        let t = Vec3::new(3.0, -7.0, 0.5);
        let moved = PointCloud::new(cloud.iter().map(|&p| p + t).collect()).unwrap();
        let (base, c0, s0) = canonicalize(&cloud).unwrap();
        let (shifted, c1, s1) = canonicalize(&moved).unwrap();
        assert!((c1 - (c0 + t)).norm() < 1e-12 * (1.0 + c1.norm()));
        assert!((s1 - s0).abs() < 1e-12 * s0);
        for (a, b) in shifted.iter().zip(base.iter()) {
            assert!((*a - *b).norm() < 1e-12);
        }
    }

    #[test]
    fn canonicalize_transforms_covariantly() {
        let mut rng = Rng::seed_from(2);
        for _ in 0..50 {
            let cloud = rand_cloud(&mut rng, 10, 4.0);
            let t = random_sim3(&mut rng, 8.0);
            let (base, c0, s0) = canonicalize(&cloud).unwrap();
            let (moved, c1, s1) = canonicalize(&t.apply_cloud(&cloud)).unwrap();
            assert!((c1 - t.apply_point(c0)).norm() < 1e-9 * (1.0 + c1.norm()));
            assert!((s1 - t.scale() * s0).abs() < 1e-9 * s1);
            for (a, b) in moved.iter().zip(base.iter()) {
                let rotated = t.rotation().mul_vec(*b);
                assert!((*a - rotated).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn canonicalize_rejects_degenerate_clouds() {
        let cloud =
            PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0); 5]).unwrap();
        match canonicalize(&cloud) {
            Err(EncoderError::DegenerateCloud) => {}
            other => panic!("expected degenerate-cloud error, got {other:?}"),
        }
        let single = PointCloud::new(vec![Vec3::ZERO]).unwrap();
        assert!(matches!(canonicalize(&single), Err(EncoderError::TooFewPoints(1))));
    }

    fn encoder_fixture(layers: usize) -> (ParamSet, EquiEncoder) {
        let mut params = ParamSet::new();
        let mut rng = Rng::seed_from(42);
        let cfg = EncoderConfig {
            num_layers: layers,
            hidden_channels: 8,
            points_in: 8,
            out_channels: 6,
            knn: 4,
            gram_cap: 8,
        };
        let enc = EquiEncoder::new(&mut params, "enc", cfg, &mut rng).unwrap();
        (params, enc)
    }

    fn encode_values(
        params: &ParamSet,
        enc: &EquiEncoder,
        cloud: &PointCloud,
    ) -> (Tensor, Tensor, Vec3, f64) {
        let mut ctx = Ctx::new(params);
        let latent = enc.encode(&mut ctx, cloud).unwrap();
        (
            ctx.value(latent.theta_r).clone(),
            ctx.value(latent.theta_inv).clone(),
            latent.theta_c,
            latent.theta_s,
        )
    }

    #[test]
    fn encode_satisfies_full_sim3_contract() {
        let (params, enc) = encoder_fixture(2);
        let mut rng = Rng::seed_from(7);
        let cloud = rand_cloud(&mut rng, 8, 3.0);
        let (theta_r, theta_inv, theta_c, theta_s) = encode_values(&params, &enc, &cloud);
        for _ in 0..100 {
            let t = random_sim3(&mut rng, 6.0);
            let (tr, tinv, tc, ts) = encode_values(&params, &enc, &t.apply_cloud(&cloud));
            // Θ_R rotates, independent of scale and translation.
            let want_r = rotate_vectors(&theta_r, t.rotation());
            assert!(max_rel_err(&tr, &want_r) < 1e-8, "theta_R not equivariant");
            assert!(max_rel_err(&tinv, &theta_inv) < 1e-8, "theta_inv not invariant");
            assert!((tc - t.apply_point(theta_c)).norm() < 1e-8 * (1.0 + tc.norm()));
            assert!((ts - t.scale() * theta_s).abs() < 1e-8 * ts);
        }
    }

    #[test]
    fn encode_deep_config_is_equivariant_too() {
        let (params, enc) = encoder_fixture(4);
        let mut rng = Rng::seed_from(8);
        let cloud = rand_cloud(&mut rng, 16, 3.0);
        let (theta_r, theta_inv, ..) = encode_values(&params, &enc, &cloud);
        for _ in 0..20 {
            let t = random_sim3(&mut rng, 6.0);
            let (tr, tinv, ..) = encode_values(&params, &enc, &t.apply_cloud(&cloud));
            assert!(max_rel_err(&tr, &rotate_vectors(&theta_r, t.rotation())) < 1e-8);
            assert!(max_rel_err(&tinv, &theta_inv) < 1e-8);
        }
    }

    #[test]
    fn encode_is_permutation_invariant() {
        let (params, enc) = encoder_fixture(2);
        let mut rng = Rng::seed_from(9);
        let cloud = rand_cloud(&mut rng, 8, 3.0);
        let (theta_r, theta_inv, ..) = encode_values(&params, &enc, &cloud);
        for _ in 0..20 {
            let mut pts = cloud.points().to_vec();
            rng.shuffle(&mut pts);
            let shuffled = PointCloud::new(pts).unwrap();
            let (tr, tinv, ..) = encode_values(&params, &enc, &shuffled);
            assert!(max_rel_err(&tr, &theta_r) < 1e-12);
            assert!(max_rel_err(&tinv, &theta_inv) < 1e-12);
        }
    }

    #[test]
    fn encode_unchanged_by_duplicating_points() {
        // Mean pooling: doubling every point leaves all pooled features
        // fixed (global-pooling configuration).
        let (params, enc) = encoder_fixture(2);
        let mut rng = Rng::seed_from(10);
        let cloud = rand_cloud(&mut rng, 8, 3.0);
        let mut doubled = cloud.points().to_vec();
        doubled.extend_from_slice(cloud.points());
        let doubled = PointCloud::new(doubled).unwrap();
        let (theta_r, theta_inv, theta_c, theta_s) = encode_values(&params, &enc, &cloud);
        let (tr, tinv, tc, ts) = encode_values(&params, &enc, &doubled);
        assert!(max_rel_err(&tr, &theta_r) < 1e-9);
        assert!(max_rel_err(&tinv, &theta_inv) < 1e-9);
        assert!((tc - theta_c).norm() < 1e-9);
        assert!((ts - theta_s).abs() < 1e-9);
    }

    #[test]
    fn encoder_passes_grad_check() {
        let (params, enc) = encoder_fixture(2);
        let mut rng = Rng::seed_from(11);
        let cloud = rand_cloud(&mut rng, 8, 3.0);
        let f = |p: &ParamSet| -> Result<(f64, Gradients), AdError> {
            let mut ctx = Ctx::new(p);
            let latent = enc.encode(&mut ctx, &cloud).map_err(|e| match e {
                EncoderError::Ad(a) => a,
                other => panic!("unexpected encode error: {other}"),
            })?;
            let norms = ctx.tape.vector_norm(latent.theta_r)?;
            let a = ctx.tape.mean_all(norms);
            let b = ctx.tape.mean_all(latent.theta_inv);
            let loss = ctx.tape.add(a, b)?;
            let grads = ctx.tape.backward(loss)?;
            Ok((ctx.tape.value(loss).item(), grads))
        };
        let err = grad_check(&f, &params, 1e-5).unwrap();
        assert!(err < 1e-6, "encoder grad check: {err}");
    }

    #[test]
    fn resample_same_size_is_permutation() {
        let mut rng = Rng::seed_from(12);
        let cloud = rand_cloud(&mut rng, 8, 3.0);
        let out = resample(&cloud, 8, &mut rng);
        let mut want: Vec<[u64; 3]> = cloud
            .iter()
            .map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])
            .collect();
        let mut got: Vec<[u64; 3]> = out
            .iter()
            .map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])
            .collect();
        want.sort();
        got.sort();
        assert_eq!(want, got);
    }

    #[test]
    fn resample_upsamples_with_replacement() {
        let mut rng = Rng::seed_from(13);
        let cloud = rand_cloud(&mut rng, 3, 1.0);
        let out = resample(&cloud, 10, &mut rng);
        assert_eq!(out.len(), 10);
        for p in out.iter() {
            assert!(cloud.iter().any(|q| (*p - *q).norm() == 0.0));
        }
    }

    #[test]
    fn resample_selection_is_uniform_chi_squared() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rng = Rng::seed_from(14);
        let n = 8usize;
        let cloud = rand_cloud(&mut rng, n, 3.0);
        let trials = 10_000;
        let mut counts = vec![0usize; n];
        for _ in 0..trials {
            let picked = resample(&cloud, 4, &mut rng);
            for p in picked.iter() {
                let idx = cloud
                    .iter()
                    .position(|q| (*p - *q).norm() == 0.0)
                    .expect("resampled point comes from the cloud");
                counts[idx] += 1;
            }
        }
        let expected = (trials * 4) as f64 / n as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let dist = ChiSquared::new((n - 1) as f64).unwrap();
        let critical = dist.inverse_cdf(0.99);
        assert!(chi2 < critical, "chi2 = {chi2:.2}, critical = {critical:.2}");
    }

    #[test]
    fn encode_propagates_degenerate_cloud_error() {
        let (params, enc) = encoder_fixture(2);
        let cloud = PointCloud::new(vec![Vec3::new(2.0, 2.0, 2.0); 4]).unwrap();
        let mut ctx = Ctx::new(&params);
        assert!(matches!(
            enc.encode(&mut ctx, &cloud),
            Err(EncoderError::DegenerateCloud)
        ));
    }

    #[test]
    fn theta_s_independent_under_pure_rotation() {
        let (params, enc) = encoder_fixture(2);
        let mut rng = Rng::seed_from(15);
        let cloud = rand_cloud(&mut rng, 8, 3.0);
        let (_, _, _, s0) = encode_values(&params, &enc, &cloud);
        let rot = Sim3::new(crate::geom::random_rotation(&mut rng), Vec3::ZERO, 1.0).unwrap();
        let (_, _, _, s1) = encode_values(&params, &enc, &rot.apply_cloud(&cloud));
        assert!((s0 - s1).abs() < 1e-12 * s0);
    }
}
