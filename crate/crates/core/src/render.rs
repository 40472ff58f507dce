//! Differentiable SDF volume rendering: the SDF-to-density transform, the
//! transmittance/weight recurrence, per-ray color compositing with a shading
//! cutoff, and surface-point extraction at the weight argmax.

use ndarray::Array2;

use crate::autodiff::{NodeId, Tape};
use crate::camera::{vadd, vscale, RayBundle, Vec3};
use crate::error::Result;

/// Skip BRDF evaluation at samples whose compositing weight falls below this.
pub const SHADING_CUTOFF: f64 = 1e-3;

/// Density from signed distance: `sigma = kappa * sigmoid(-kappa * s)` with
/// the sharpness stored as `log kappa` (a scalar node) so it stays positive
/// while being optimized freely.
pub fn sdf_to_density(t: &mut Tape, sdf: NodeId, log_kappa: NodeId) -> Result<NodeId> {
    let kappa = t.exp(log_kappa);
    let neg_s = t.neg(sdf);
    let ks = t.mul(neg_s, kappa)?;
    let sg = t.sigmoid(ks);
    t.mul(sg, kappa)
}

/// Alpha-compositing weights from per-sample densities and depth steps, both
/// shaped (rays, samples).
///
/// `alpha_j = 1 - exp(-sigma_j delta_j)`, `T_j = prod_{k<j} (1 - alpha_k)`,
/// `w_j = T_j alpha_j`. The cumulative product is computed as
/// `exp(-cumsum(sigma delta))` with an exclusive cumulative sum realized as a
/// matmul against a constant strictly-upper-triangular matrix, keeping the
/// whole recurrence in differentiable ops.
pub fn compute_weights(t: &mut Tape, sigma: NodeId, deltas: NodeId) -> Result<(NodeId, NodeId)> {
    let s = t.shape(sigma)[1];
    let sd = t.mul(sigma, deltas)?;

    let mut tri = Array2::<f64>::zeros((s, s));
    for k in 0..s {
        for j in k + 1..s {
            tri[[k, j]] = 1.0;
        }
    }
    let tri = t.leaf_mat(tri);
    let cum = t.matmul(sd, tri)?;
    let neg_cum = t.neg(cum);
    let trans = t.exp(neg_cum);

    let neg_sd = t.neg(sd);
    let e = t.exp(neg_sd);
    let neg_e = t.neg(e);
    let alpha = t.add_const(neg_e, 1.0);

    let weights = t.mul(trans, alpha)?;
    Ok((weights, trans))
}

/// Everything the renderer returns for a batch of rays, as graph nodes plus
/// per-ray bookkeeping.
pub struct RayRenderNodes {
    /// (rays, 3) composited color.
    pub color: NodeId,
    /// (rays, 1) accumulated opacity, sum of weights.
    pub opacity: NodeId,
    /// (rays, samples).
    pub weights: NodeId,
    /// (rays, samples).
    pub transmittance: NodeId,
    /// Rays where a sample above the cutoff had to be zeroed (invalid normal).
    pub degenerate_shading: Vec<bool>,
    /// Flattened ray-major sample indices that were actually shaded.
    pub shaded_samples: Vec<usize>,
}

/// Shaded colors for a selected set of sample points.
pub struct ShadedSamples {
    /// (selected, 3) radiance.
    pub color: NodeId,
    /// Rows whose shading is unusable and must contribute zero.
    pub invalid: Vec<bool>,
}

/// Render a batch of rays.
///
/// `sdf_fn` maps (m, 3) points to (m, 1) signed distances; `shader` maps the
/// selected sample positions and their outgoing (toward-camera) unit
/// directions to radiance. Shading runs only at samples whose weight is at
/// least the cutoff; all other samples contribute exactly zero color.
pub fn render_rays<FS, FC>(
    t: &mut Tape,
    bundle: &RayBundle,
    log_kappa: NodeId,
    cutoff: f64,
    sdf_fn: &mut FS,
    shader: &mut FC,
) -> Result<RayRenderNodes>
where
    FS: FnMut(&mut Tape, NodeId) -> Result<NodeId>,
    FC: FnMut(&mut Tape, NodeId, NodeId) -> Result<ShadedSamples>,
{
    let n = bundle.num_rays();
    let s = bundle.samples_per_ray;

    let pos = t.leaf_mat(bundle.sample_positions.clone());
    let sdf_flat = sdf_fn(t, pos)?;
    let sdf = t.reshape(sdf_flat, &[n, s])?;
    let sigma = sdf_to_density(t, sdf, log_kappa)?;
    let deltas = t.leaf_mat(bundle.deltas.clone());
    let (weights, transmittance) = compute_weights(t, sigma, deltas)?;

    let ones = t.leaf_mat(Array2::from_elem((s, 1), 1.0));
    let opacity = t.matmul(weights, ones)?;

    // Select the samples worth shading from the forward weights.
    let wdata = t.data(weights).clone();
    let mut selected = Vec::new();
    for i in 0..n {
        for j in 0..s {
            if wdata[[i, j]] >= cutoff {
                selected.push(i * s + j);
            }
        }
    }

    let mut degenerate_shading = vec![false; n];
    let color = if selected.is_empty() {
        t.leaf_mat(Array2::zeros((n, 3)))
    } else {
        let m = selected.len();
        let pos_sel = t.gather_rows(pos, &selected)?;
        let mut wo = Array2::zeros((m, 3));
        for (r, &flat) in selected.iter().enumerate() {
            let ray = flat / s;
            for c in 0..3 {
                wo[[r, c]] = -bundle.directions[[ray, c]];
            }
        }
        let wo = t.leaf_mat(wo);
        let shaded = shader(t, pos_sel, wo)?;

        let mut mask = Array2::from_elem((m, 3), 1.0);
        for (r, bad) in shaded.invalid.iter().enumerate() {
            if *bad {
                for c in 0..3 {
                    mask[[r, c]] = 0.0;
                }
                degenerate_shading[selected[r] / s] = true;
            }
        }
        let mask = t.leaf_mat(mask);
        let c_masked = t.mul(shaded.color, mask)?;

        let w_flat = t.reshape(weights, &[n * s, 1])?;
        let w_sel = t.gather_rows(w_flat, &selected)?;
        let w3 = t.tile_col(w_sel, 3)?;
        let wc = t.mul(c_masked, w3)?;

        // Scatter-add the weighted sample colors back onto their rays.
        let mut scatter = Array2::<f64>::zeros((n, m));
        for (r, &flat) in selected.iter().enumerate() {
            scatter[[flat / s, r]] = 1.0;
        }
        let scatter = t.leaf_mat(scatter);
        t.matmul(scatter, wc)?
    };

    Ok(RayRenderNodes {
        color,
        opacity,
        weights,
        transmittance,
        degenerate_shading,
        shaded_samples: selected,
    })
}

/// Surface sample at the weight argmax of a hitting ray.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceHit {
    pub sample: usize,
    pub depth: f64,
    pub position: Vec3,
}

/// Index of the largest weight, ties broken toward the smallest index.
pub(crate) fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Per-ray surface points: the sample of maximal weight, for rays whose
/// accumulated opacity exceeds 0.5. Misses yield `None`.
pub fn surface_points(
    t: &Tape,
    out: &RayRenderNodes,
    bundle: &RayBundle,
) -> Vec<Option<SurfaceHit>> {
    let n = bundle.num_rays();
    let s = bundle.samples_per_ray;
    let wdata = t.data(out.weights);
    let odata = t.data(out.opacity);
    (0..n)
        .map(|i| {
            if odata[[i, 0]] <= 0.5 {
                return None;
            }
            let row: Vec<f64> = (0..s).map(|j| wdata[[i, j]]).collect();
            let j = argmax_row(&row);
            let depth = bundle.depths[[i, j]];
            let o = [
                bundle.origins[[i, 0]],
                bundle.origins[[i, 1]],
                bundle.origins[[i, 2]],
            ];
            let d = [
                bundle.directions[[i, 0]],
                bundle.directions[[i, 1]],
                bundle.directions[[i, 2]],
            ];
            Some(SurfaceHit {
                sample: j,
                depth,
                position: vadd(o, vscale(d, depth)),
            })
        })
        .collect()
}
