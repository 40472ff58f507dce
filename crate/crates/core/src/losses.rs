//! Training objectives: photometric L1, Eikonal regularity, silhouette BCE,
//! material smoothness, metallic sparsity, environment-light regularization,
//! and their weighted total.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::camera::{vcross, vdot, vnormalize, Vec3};
use crate::error::{Error, Result};
use crate::fields::MaterialNodes;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_eikonal: f64,
    pub lambda_mask: f64,
    pub lambda_mat: f64,
    pub lambda_metal: f64,
    pub lambda_light_int: f64,
    pub lambda_light_smooth: f64,
    /// Perceptual term is out of scope; anything but zero is rejected.
    pub lambda_lpips: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 1.0,
            lambda_eikonal: 0.1,
            lambda_mask: 0.5,
            lambda_mat: 0.01,
            lambda_metal: 0.01,
            lambda_light_int: 0.001,
            lambda_light_smooth: 0.01,
            lambda_lpips: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_l1", self.lambda_l1),
            ("lambda_eikonal", self.lambda_eikonal),
            ("lambda_mask", self.lambda_mask),
            ("lambda_mat", self.lambda_mat),
            ("lambda_metal", self.lambda_metal),
            ("lambda_light_int", self.lambda_light_int),
            ("lambda_light_smooth", self.lambda_light_smooth),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be a non-negative finite number, got {v}"
                )));
            }
        }
        if self.lambda_lpips != 0.0 {
            return Err(Error::InvalidArgument(
                "lambda_lpips must be 0: the perceptual term is not supported".into(),
            ));
        }
        Ok(())
    }
}

/// Mean absolute color error over rays and channels.
pub fn photometric_loss(t: &mut Tape, pred: NodeId, gt: NodeId) -> Result<NodeId> {
    let d = t.sub(pred, gt)?;
    let a = t.abs(d);
    Ok(t.mean(a))
}

/// Mean squared deviation of SDF gradient norms from one.
pub fn eikonal_loss(t: &mut Tape, gradient_norms: NodeId) -> Result<NodeId> {
    let r = t.add_const(gradient_norms, -1.0);
    let sq = t.square(r);
    Ok(t.mean(sq))
}

/// Binary cross-entropy between accumulated opacities and the silhouette
/// masks, with opacities clamped to [1e-5, 1 - 1e-5].
pub fn mask_loss(t: &mut Tape, opacity: NodeId, masks: &[bool]) -> Result<NodeId> {
    let n = t.shape(opacity)[0];
    if n != masks.len() {
        return Err(Error::ShapeMismatch {
            op: "mask_loss",
            lhs: vec![n],
            rhs: vec![masks.len()],
        });
    }
    let o = t.clamp(opacity, 1e-5, 1.0 - 1e-5);
    let mut mv = Array2::zeros((n, 1));
    for (i, m) in masks.iter().enumerate() {
        mv[[i, 0]] = if *m { 1.0 } else { 0.0 };
    }
    let m = t.leaf_mat(mv);
    let ln_o = t.log(o)?;
    let neg_o = t.neg(o);
    let one_minus_o = t.add_const(neg_o, 1.0);
    let ln_1mo = t.log(one_minus_o)?;
    let neg_m = t.neg(m);
    let one_minus_m = t.add_const(neg_m, 1.0);
    let pos = t.mul(m, ln_o)?;
    let negt = t.mul(one_minus_m, ln_1mo)?;
    let s = t.add(pos, negt)?;
    let nl = t.neg(s);
    Ok(t.mean(nl))
}

/// Mean over points of `|albedo(x) - albedo(x + eps)|_1 + |r(x) - r(x + eps)|`
/// for material samples queried at surface points and at tangentially
/// perturbed copies.
pub fn material_smoothness_loss(
    t: &mut Tape,
    at: &MaterialNodes,
    perturbed: &MaterialNodes,
) -> Result<NodeId> {
    let da = t.sub(at.albedo, perturbed.albedo)?;
    let da = t.abs(da);
    let ones = t.leaf_mat(Array2::from_elem((3, 1), 1.0));
    let da_sum = t.matmul(da, ones)?;
    let dr = t.sub(at.roughness, perturbed.roughness)?;
    let dr = t.abs(dr);
    let per_point = t.add(da_sum, dr)?;
    Ok(t.mean(per_point))
}

/// Random unit tangential offsets of length `eps` at surface points.
pub fn tangential_offsets(
    points: &Array2<f64>,
    normals: &Array2<f64>,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let p = points.nrows();
    let mut out = Array2::zeros((p, 3));
    for i in 0..p {
        let n: Vec3 = [normals[[i, 0]], normals[[i, 1]], normals[[i, 2]]];
        // Random direction, projected into the tangent plane; retry the rare
        // near-parallel draw.
        let dir = loop {
            let v: Vec3 = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let tangent = vcross(n, v);
            let len = vdot(tangent, tangent).sqrt();
            if len > 1e-6 {
                break vnormalize(tangent);
            }
        };
        for c in 0..3 {
            out[[i, c]] = points[[i, c]] + eps * dir[c];
        }
    }
    out
}

/// Mean of `m (1 - m)` over surface metallic values.
pub fn metallic_sparsity_loss(t: &mut Tape, metallic: NodeId) -> Result<NodeId> {
    let neg = t.neg(metallic);
    let om = t.add_const(neg, 1.0);
    let prod = t.mul(metallic, om)?;
    Ok(t.mean(prod))
}

/// Deterministic Fibonacci-spiral directions over the full sphere.
pub fn fibonacci_sphere(k: usize) -> Vec<Vec3> {
    let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
    (0..k)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / k as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * std::f64::consts::PI * (i as f64 / golden).fract();
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Environment-light priors: mean radiance over K deterministic sphere
/// directions and mean L1 difference over nearest-neighbor direction pairs.
pub fn light_regularization<FL>(
    t: &mut Tape,
    k: usize,
    light: &mut FL,
) -> Result<(NodeId, NodeId)>
where
    FL: FnMut(&mut Tape, NodeId) -> Result<NodeId>,
{
    if k < 16 {
        return Err(Error::InvalidArgument(format!(
            "light regularization needs at least 16 directions, got {k}"
        )));
    }
    let dirs = fibonacci_sphere(k);
    let mut dm = Array2::zeros((k, 3));
    for (i, d) in dirs.iter().enumerate() {
        for c in 0..3 {
            dm[[i, c]] = d[c];
        }
    }
    let dn = t.leaf_mat(dm);
    let radiance = light(t, dn)?;
    let intensity = t.mean(radiance);

    // Nearest neighbor of each direction by angle.
    let nn: Vec<usize> = (0..k)
        .map(|i| {
            let mut best = usize::MAX;
            let mut best_dot = -2.0;
            for j in 0..k {
                if j == i {
                    continue;
                }
                let d = vdot(dirs[i], dirs[j]);
                if d > best_dot {
                    best_dot = d;
                    best = j;
                }
            }
            best
        })
        .collect();
    let neighbor = t.gather_rows(radiance, &nn)?;
    let diff = t.sub(radiance, neighbor)?;
    let ad = t.abs(diff);
    let ones = t.leaf_mat(Array2::from_elem((3, 1), 1.0));
    let per_pair = t.matmul(ad, ones)?;
    let smoothness = t.mean(per_pair);
    Ok((intensity, smoothness))
}

/// The individual (unweighted) loss term nodes for one batch.
pub struct LossTerms {
    pub photometric: NodeId,
    pub eikonal: NodeId,
    pub mask: NodeId,
    pub material_smoothness: NodeId,
    pub metallic_sparsity: NodeId,
    pub light_intensity: NodeId,
    pub light_smoothness: NodeId,
}

/// Forward values of every term and the weighted total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub photometric: f64,
    pub eikonal: f64,
    pub mask: f64,
    pub material_smoothness: f64,
    pub metallic_sparsity: f64,
    pub light_intensity: f64,
    pub light_smoothness: f64,
    pub total: f64,
}

/// Weighted sum of all terms; returns the scalar total node plus the forward
/// breakdown for logging.
pub fn total_loss(
    t: &mut Tape,
    terms: &LossTerms,
    weights: &LossWeights,
) -> Result<(NodeId, LossBreakdown)> {
    weights.validate()?;
    let pairs = [
        (terms.photometric, weights.lambda_l1),
        (terms.eikonal, weights.lambda_eikonal),
        (terms.mask, weights.lambda_mask),
        (terms.material_smoothness, weights.lambda_mat),
        (terms.metallic_sparsity, weights.lambda_metal),
        (terms.light_intensity, weights.lambda_light_int),
        (terms.light_smoothness, weights.lambda_light_smooth),
    ];
    let mut total: Option<NodeId> = None;
    for (node, lambda) in pairs {
        let scaled = t.scale(node, lambda);
        total = Some(match total {
            None => scaled,
            Some(acc) => t.add(acc, scaled)?,
        });
    }
    let total = total.expect("non-empty term list");
    let breakdown = LossBreakdown {
        photometric: t.scalar_value(terms.photometric),
        eikonal: t.scalar_value(terms.eikonal),
        mask: t.scalar_value(terms.mask),
        material_smoothness: t.scalar_value(terms.material_smoothness),
        metallic_sparsity: t.scalar_value(terms.metallic_sparsity),
        light_intensity: t.scalar_value(terms.light_intensity),
        light_smoothness: t.scalar_value(terms.light_smoothness),
        total: t.scalar_value(total),
    };
    Ok((total, breakdown))
}

/// Sample points for the Eikonal term: half near the given surface points
/// (Gaussian noise, sigma 0.05), half uniform in the centered cube of the
/// given half extent. With no surface points, all are uniform.
pub fn eikonal_sample_points(
    surface: &[Vec3],
    half_extent: f64,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let mut out = Array2::zeros((m, 3));
    let near = if surface.is_empty() { 0 } else { m / 2 };
    for i in 0..m {
        if i < near {
            let base = surface[rng.random_range(0..surface.len())];
            for c in 0..3 {
                out[[i, c]] = base[c] + 0.05 * crate::fields::normal_sample(rng);
            }
        } else {
            for c in 0..3 {
                out[[i, c]] = rng.random_range(-half_extent..half_extent);
            }
        }
    }
    out
}
