//! Quantitative evaluation: Chamfer distance and normal consistency between
//! meshes, PSNR and SSIM between images.

use std::collections::HashMap;

use ndarray::{ArrayD, ArrayView2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{vcross, vdot, vnorm, vnormalize, vsub, Vec3};
use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;

/// PSNR is capped here instead of going to infinity for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// `10 log10(peak^2 / MSE)`, capped at 100 dB for MSE below 1e-10.
pub fn psnr(a: &ArrayD<f64>, b: &ArrayD<f64>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("psnr of empty images".into()));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

fn ssim_channel(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let (h, w) = a.dim();
    let win = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = win[dy] * win[dx];
                    let x = a[[cy + dy - half, cx + dx - half]];
                    let y = b[[cy + dy - half, cx + dx - half]];
                    mu_a += wgt * x;
                    mu_b += wgt * y;
                    aa += wgt * x * x;
                    bb += wgt * y * y;
                    ab += wgt * x * y;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            total += s;
            count += 1;
        }
    }
    total / count as f64
}

/// Mean SSIM over an 11x11 Gaussian window (sigma 1.5, standard constants),
/// averaged over all fully contained windows and channels. Accepts (H, W) or
/// (H, W, C) images; both sides must exceed the window.
pub fn ssim(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (h, w, channels) = match a.shape() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(Error::InvalidArgument(format!(
                "ssim expects (H, W) or (H, W, C) images, got {other:?}"
            )))
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images at least {SSIM_WINDOW} pixels per side, got {h}x{w}"
        )));
    }
    let mut total = 0.0;
    for c in 0..channels {
        let (va, vb) = if a.ndim() == 2 {
            (
                a.view().into_dimensionality().unwrap(),
                b.view().into_dimensionality().unwrap(),
            )
        } else {
            let a3 = a.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let b3 = b.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            (
                a3.index_axis_move(ndarray::Axis(2), c),
                b3.index_axis_move(ndarray::Axis(2), c),
            )
        };
        total += ssim_channel(va, vb);
    }
    Ok(total / channels as f64)
}

// ---------------------------------------------------------------------------
// Surface sampling and nearest-neighbor queries
// ---------------------------------------------------------------------------

/// A point sampled from a mesh surface together with its face normal.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceSample {
    pub position: Vec3,
    pub normal: Vec3,
}

/// Area-weighted uniform surface sampling, deterministic given the seed.
pub fn sample_mesh_surface(
    mesh: &TriangleMesh,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<SurfaceSample>> {
    if mesh.is_empty() {
        return Err(Error::Mesh("cannot sample an empty mesh".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    let mut face_normals = Vec::with_capacity(mesh.faces.len());
    for f in &mesh.faces {
        let e1 = vsub(mesh.vertices[f[1]], mesh.vertices[f[0]]);
        let e2 = vsub(mesh.vertices[f[2]], mesh.vertices[f[0]]);
        let cr = vcross(e1, e2);
        let area = 0.5 * vnorm(cr);
        total += area;
        cumulative.push(total);
        face_normals.push(if vnorm(cr) > 1e-18 {
            vnormalize(cr)
        } else {
            [0.0, 0.0, 1.0]
        });
    }
    if total <= 0.0 {
        return Err(Error::Mesh("mesh has zero surface area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let target = rng.random_range(0.0..total);
        let fi = cumulative.partition_point(|&c| c < target);
        let fi = fi.min(mesh.faces.len() - 1);
        let f = mesh.faces[fi];
        let (a, b, c) = (
            mesh.vertices[f[0]],
            mesh.vertices[f[1]],
            mesh.vertices[f[2]],
        );
        // Uniform barycentric via the square-root trick.
        let r1: f64 = rng.random_range(0.0..1.0);
        let r2: f64 = rng.random_range(0.0..1.0);
        let s = r1.sqrt();
        let (u, v, w) = (1.0 - s, s * (1.0 - r2), s * r2);
        let p = [
            u * a[0] + v * b[0] + w * c[0],
            u * a[1] + v * b[1] + w * c[1],
            u * a[2] + v * b[2] + w * c[2],
        ];
        out.push(SurfaceSample {
            position: p,
            normal: face_normals[fi],
        });
    }
    Ok(out)
}

/// Uniform-grid nearest-neighbor index over a fixed point set.
pub struct PointIndex {
    cell: f64,
    origin: Vec3,
    grid: HashMap<(i64, i64, i64), Vec<u32>>,
    points: Vec<Vec3>,
    cell_min: (i64, i64, i64),
    cell_max: (i64, i64, i64),
}

impl PointIndex {
    pub fn build(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("empty point set".into()));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in &points {
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        // Cell size from the largest extent so degenerate (flat or linear)
        // point sets still get a well-conditioned grid.
        let max_extent = (0..3)
            .map(|c| hi[c] - lo[c])
            .fold(0.0f64, f64::max)
            .max(1e-9);
        let cell = (max_extent / (points.len() as f64).cbrt()).max(1e-9);
        let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        let key = |p: &Vec3| {
            (
                ((p[0] - lo[0]) / cell).floor() as i64,
                ((p[1] - lo[1]) / cell).floor() as i64,
                ((p[2] - lo[2]) / cell).floor() as i64,
            )
        };
        let mut cmin = key(&points[0]);
        let mut cmax = cmin;
        for (i, p) in points.iter().enumerate() {
            let k = key(p);
            cmin = (cmin.0.min(k.0), cmin.1.min(k.1), cmin.2.min(k.2));
            cmax = (cmax.0.max(k.0), cmax.1.max(k.1), cmax.2.max(k.2));
            grid.entry(k).or_default().push(i as u32);
        }
        Ok(Self {
            cell,
            origin: lo,
            grid,
            points,
            cell_min: cmin,
            cell_max: cmax,
        })
    }

    /// Index and distance of the nearest stored point.
    pub fn nearest(&self, q: Vec3) -> (usize, f64) {
        let qc = (
            ((q[0] - self.origin[0]) / self.cell).floor() as i64,
            ((q[1] - self.origin[1]) / self.cell).floor() as i64,
            ((q[2] - self.origin[2]) / self.cell).floor() as i64,
        );
        let max_ring = [
            (qc.0 - self.cell_min.0).abs(),
            (qc.0 - self.cell_max.0).abs(),
            (qc.1 - self.cell_min.1).abs(),
            (qc.1 - self.cell_max.1).abs(),
            (qc.2 - self.cell_min.2).abs(),
            (qc.2 - self.cell_max.2).abs(),
        ]
        .into_iter()
        .max()
        .unwrap();
        let mut best = (usize::MAX, f64::INFINITY);
        for ring in 0..=max_ring {
            // Any cell at Chebyshev distance `ring` is at least
            // (ring - 1) * cell away; once that exceeds the best distance, no
            // farther ring can improve it.
            if best.1.is_finite() && (ring as f64 - 1.0) * self.cell > best.1 {
                break;
            }
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) =
                            self.grid.get(&(qc.0 + dx, qc.1 + dy, qc.2 + dz))
                        {
                            for &i in ids {
                                let d = vnorm(vsub(self.points[i as usize], q));
                                if d < best.1 {
                                    best = (i as usize, d);
                                }
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

fn check_sampling_args(a: &TriangleMesh, b: &TriangleMesh, n_samples: usize) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Mesh("mesh metrics need non-empty meshes".into()));
    }
    if n_samples < 1000 {
        return Err(Error::InvalidArgument(format!(
            "mesh metrics need at least 1000 samples, got {n_samples}"
        )));
    }
    Ok(())
}

/// Symmetric Chamfer distance with explicit per-mesh sample seeds; exposed so
/// the symmetry `cd(A, B; sa, sb) = cd(B, A; sb, sa)` is testable directly.
pub fn chamfer_with_seeds(
    a: &TriangleMesh,
    seed_a: u64,
    b: &TriangleMesh,
    seed_b: u64,
    n_samples: usize,
) -> Result<f64> {
    check_sampling_args(a, b, n_samples)?;
    let sa = sample_mesh_surface(a, n_samples, seed_a)?;
    let sb = sample_mesh_surface(b, n_samples, seed_b)?;
    let ia = PointIndex::build(sa.iter().map(|s| s.position).collect())?;
    let ib = PointIndex::build(sb.iter().map(|s| s.position).collect())?;
    let a_to_b: f64 = sa.iter().map(|s| ib.nearest(s.position).1).sum::<f64>()
        / n_samples as f64;
    let b_to_a: f64 = sb.iter().map(|s| ia.nearest(s.position).1).sum::<f64>()
        / n_samples as f64;
    Ok(0.5 * (a_to_b + b_to_a))
}

/// Symmetric mean nearest-neighbor distance over area-weighted surface
/// samples (n per mesh), deterministic given the seed.
pub fn chamfer_distance(
    a: &TriangleMesh,
    b: &TriangleMesh,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    chamfer_with_seeds(a, seed, b, seed.wrapping_add(1), n_samples)
}

/// Symmetric mean angular error in degrees between sample normals and the
/// normal at the nearest sample of the other mesh.
pub fn normal_consistency(
    a: &TriangleMesh,
    b: &TriangleMesh,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    check_sampling_args(a, b, n_samples)?;
    let sa = sample_mesh_surface(a, n_samples, seed)?;
    let sb = sample_mesh_surface(b, n_samples, seed.wrapping_add(1))?;
    let ia = PointIndex::build(sa.iter().map(|s| s.position).collect())?;
    let ib = PointIndex::build(sb.iter().map(|s| s.position).collect())?;
    let angle = |n1: Vec3, n2: Vec3| vdot(n1, n2).clamp(-1.0, 1.0).acos().to_degrees();
    let a_to_b: f64 = sa
        .iter()
        .map(|s| angle(s.normal, sb[ib.nearest(s.position).0].normal))
        .sum::<f64>()
        / n_samples as f64;
    let b_to_a: f64 = sb
        .iter()
        .map(|s| angle(s.normal, sa[ia.nearest(s.position).0].normal))
        .sum::<f64>()
        / n_samples as f64;
    Ok(0.5 * (a_to_b + b_to_a))
}
