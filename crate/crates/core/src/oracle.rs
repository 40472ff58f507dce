//! Synthetic ground truth: analytic SDF scenes with known spatially-varying
//! PBR materials and known environment light, a sphere-tracing forward
//! renderer that shares the shading machinery with training, and dataset
//! generation.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::camera::{
    vadd, vdot, vnorm, vnormalize, vscale, vsub, Camera, CameraRecord, CamerasFile, Vec3,
};
use crate::error::{Error, Result};
use crate::fields::MaterialNodes;
use crate::io::{write_linear_png, write_mask_png, write_pfm, LinearImage, Mask};
use crate::shading::shade;

/// Closed-form signed-distance composite.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnalyticSdf {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    #[serde(rename = "box")]
    Cuboid {
        center: Vec3,
        half_extents: Vec3,
    },
    /// Torus around the z axis through `center`.
    Torus {
        center: Vec3,
        major_radius: f64,
        minor_radius: f64,
    },
    Union {
        a: Box<AnalyticSdf>,
        b: Box<AnalyticSdf>,
    },
    Subtraction {
        a: Box<AnalyticSdf>,
        b: Box<AnalyticSdf>,
    },
    SmoothUnion {
        a: Box<AnalyticSdf>,
        b: Box<AnalyticSdf>,
        blend: f64,
    },
}

impl AnalyticSdf {
    pub fn eval(&self, p: Vec3) -> f64 {
        match self {
            AnalyticSdf::Sphere { center, radius } => vnorm(vsub(p, *center)) - radius,
            AnalyticSdf::Cuboid {
                center,
                half_extents,
            } => {
                let q = [
                    (p[0] - center[0]).abs() - half_extents[0],
                    (p[1] - center[1]).abs() - half_extents[1],
                    (p[2] - center[2]).abs() - half_extents[2],
                ];
                let outside = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                vnorm(outside) + inside
            }
            AnalyticSdf::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                let d = vsub(p, *center);
                let ring = (d[0] * d[0] + d[1] * d[1]).sqrt() - major_radius;
                (ring * ring + d[2] * d[2]).sqrt() - minor_radius
            }
            AnalyticSdf::Union { a, b } => a.eval(p).min(b.eval(p)),
            AnalyticSdf::Subtraction { a, b } => a.eval(p).max(-b.eval(p)),
            AnalyticSdf::SmoothUnion { a, b, blend } => {
                let (da, db) = (a.eval(p), b.eval(p));
                let h = (0.5 + 0.5 * (db - da) / blend).clamp(0.0, 1.0);
                db * (1.0 - h) + da * h - blend * h * (1.0 - h)
            }
        }
    }

    /// Outward unit normal by central differences (step 1e-5).
    pub fn normal(&self, p: Vec3) -> Vec3 {
        let h = 1e-5;
        let mut g = [0.0; 3];
        for c in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[c] += h;
            pm[c] -= h;
            g[c] = (self.eval(pp) - self.eval(pm)) / (2.0 * h);
        }
        vnormalize(g)
    }
}

/// PBR parameters at a point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PbrParams {
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

impl PbrParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.albedo.iter().all(|a| (0.0..=1.0).contains(a))
            && (0.01..=1.0).contains(&self.roughness)
            && (0.0..=1.0).contains(&self.metallic);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "material parameters out of range: {self:?}"
            )))
        }
    }
}

/// Procedural ground-truth material field.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MaterialModel {
    Uniform { params: PbrParams },
    /// Split by the sign of `dot(x, axis)`.
    Hemispheres {
        axis: Vec3,
        positive: PbrParams,
        negative: PbrParams,
    },
    /// `stripe` where `|dot(x, axis) - offset| < half_width`, else `base`.
    Stripe {
        axis: Vec3,
        offset: f64,
        half_width: f64,
        base: PbrParams,
        stripe: PbrParams,
    },
}

impl MaterialModel {
    pub fn eval(&self, x: Vec3) -> PbrParams {
        match self {
            MaterialModel::Uniform { params } => *params,
            MaterialModel::Hemispheres {
                axis,
                positive,
                negative,
            } => {
                if vdot(x, *axis) >= 0.0 {
                    *positive
                } else {
                    *negative
                }
            }
            MaterialModel::Stripe {
                axis,
                offset,
                half_width,
                base,
                stripe,
            } => {
                if (vdot(x, *axis) - offset).abs() < *half_width {
                    *stripe
                } else {
                    *base
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MaterialModel::Uniform { params } => params.validate(),
            MaterialModel::Hemispheres {
                positive, negative, ..
            } => {
                positive.validate()?;
                negative.validate()
            }
            MaterialModel::Stripe { base, stripe, .. } => {
                base.validate()?;
                stripe.validate()
            }
        }
    }
}

/// Ground-truth environment light.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LightModel {
    Constant {
        radiance: [f64; 3],
    },
    /// Ambient floor plus up to four von Mises-Fisher lobes.
    Lobes {
        ambient: [f64; 3],
        lobes: Vec<VmfLobe>,
    },
    /// Equirectangular table, bilinearly interpolated.
    Equirect {
        width: usize,
        height: usize,
        /// Row-major H x W x 3.
        data: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VmfLobe {
    pub direction: Vec3,
    pub sharpness: f64,
    pub radiance: [f64; 3],
}

impl LightModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            LightModel::Constant { .. } => Ok(()),
            LightModel::Lobes { lobes, .. } => {
                if lobes.len() > 4 {
                    return Err(Error::InvalidArgument(format!(
                        "at most 4 light lobes supported, got {}",
                        lobes.len()
                    )));
                }
                Ok(())
            }
            LightModel::Equirect {
                width,
                height,
                data,
            } => {
                if data.len() != width * height * 3 {
                    return Err(Error::InvalidArgument(
                        "equirect light table size mismatch".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, dir: Vec3) -> [f64; 3] {
        match self {
            LightModel::Constant { radiance } => *radiance,
            LightModel::Lobes { ambient, lobes } => {
                let mut out = *ambient;
                for lobe in lobes {
                    let mu = vnormalize(lobe.direction);
                    let w = (lobe.sharpness * (vdot(mu, dir) - 1.0)).exp();
                    for c in 0..3 {
                        out[c] += lobe.radiance[c] * w;
                    }
                }
                out
            }
            LightModel::Equirect {
                width,
                height,
                data,
            } => {
                let (w, h) = (*width, *height);
                let theta = dir[2].clamp(-1.0, 1.0).acos();
                let phi = dir[1].atan2(dir[0]);
                let u = (phi + std::f64::consts::PI) / std::f64::consts::TAU * w as f64 - 0.5;
                let v = theta / std::f64::consts::PI * h as f64 - 0.5;
                let sample = |x: isize, y: isize, c: usize| -> f64 {
                    let x = x.rem_euclid(w as isize) as usize;
                    let y = y.clamp(0, h as isize - 1) as usize;
                    data[(y * w + x) * 3 + c]
                };
                let (x0, y0) = (u.floor(), v.floor());
                let (fx, fy) = (u - x0, v - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let mut out = [0.0; 3];
                for c in 0..3 {
                    let top = sample(x0, y0, c) * (1.0 - fx) + sample(x0 + 1, y0, c) * fx;
                    let bot = sample(x0, y0 + 1, c) * (1.0 - fx) + sample(x0 + 1, y0 + 1, c) * fx;
                    out[c] = top * (1.0 - fy) + bot * fy;
                }
                out
            }
        }
    }
}

/// A complete ground-truth scene recipe; this is what `material_gt.json`
/// stores.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnalyticScene {
    pub sdf: AnalyticSdf,
    pub material: MaterialModel,
    pub light: LightModel,
}

impl AnalyticScene {
    pub fn validate(&self) -> Result<()> {
        self.material.validate()?;
        self.light.validate()
    }
}

/// The three stock scenes: `sphere`, `bimaterial`, `csg`.
pub fn stock_scene(name: &str) -> Result<AnalyticScene> {
    let default_light = LightModel::Lobes {
        ambient: [0.25, 0.25, 0.28],
        lobes: vec![
            VmfLobe {
                direction: vnormalize([0.4, -0.3, 0.85]),
                sharpness: 8.0,
                radiance: [0.9, 0.85, 0.7],
            },
            VmfLobe {
                direction: vnormalize([-0.7, 0.2, -0.4]),
                sharpness: 4.0,
                radiance: [0.25, 0.3, 0.5],
            },
        ],
    };
    let scene = match name {
        "sphere" => AnalyticScene {
            sdf: AnalyticSdf::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.8,
            },
            material: MaterialModel::Uniform {
                params: PbrParams {
                    albedo: [0.6, 0.2, 0.2],
                    roughness: 0.6,
                    metallic: 0.0,
                },
            },
            light: default_light,
        },
        "bimaterial" => AnalyticScene {
            sdf: AnalyticSdf::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.8,
            },
            material: MaterialModel::Hemispheres {
                axis: [0.0, 1.0, 0.0],
                positive: PbrParams {
                    albedo: [0.7, 0.25, 0.1],
                    roughness: 0.4,
                    metallic: 0.0,
                },
                negative: PbrParams {
                    albedo: [0.1, 0.3, 0.7],
                    roughness: 0.8,
                    metallic: 0.0,
                },
            },
            light: default_light,
        },
        "csg" => AnalyticScene {
            sdf: AnalyticSdf::Subtraction {
                a: Box::new(AnalyticSdf::Torus {
                    center: [0.0, 0.0, 0.0],
                    major_radius: 0.55,
                    minor_radius: 0.25,
                }),
                b: Box::new(AnalyticSdf::Cuboid {
                    center: [0.0, 0.6, 0.0],
                    half_extents: [0.9, 0.35, 0.12],
                }),
            },
            material: MaterialModel::Stripe {
                axis: [1.0, 0.0, 0.0],
                offset: 0.0,
                half_width: 0.18,
                base: PbrParams {
                    albedo: [0.5, 0.5, 0.4],
                    roughness: 0.6,
                    metallic: 0.0,
                },
                stripe: PbrParams {
                    albedo: [0.9, 0.7, 0.3],
                    roughness: 0.35,
                    metallic: 1.0,
                },
            },
            light: default_light,
        },
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown stock scene `{other}` (expected sphere, bimaterial or csg)"
            )))
        }
    };
    Ok(scene)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OracleRenderConfig {
    pub max_steps: usize,
    pub tolerance: f64,
    /// Hemisphere quadrature size for ground-truth shading.
    pub k_gt: usize,
}

impl Default for OracleRenderConfig {
    fn default() -> Self {
        Self {
            max_steps: 256,
            tolerance: 1e-6,
            k_gt: 256,
        }
    }
}

impl OracleRenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tolerance <= 0.0 {
            return Err(Error::InvalidArgument(
                "sphere-trace tolerance must be positive".into(),
            ));
        }
        if self.k_gt < 256 {
            return Err(Error::InvalidArgument(format!(
                "ground-truth quadrature needs k_gt >= 256, got {}",
                self.k_gt
            )));
        }
        Ok(())
    }
}

/// A sphere-trace hit.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceHit {
    pub depth: f64,
    pub position: Vec3,
    pub normal: Vec3,
}

/// March `|sdf|` along the ray until it drops below the tolerance.
pub fn sphere_trace(
    sdf: &AnalyticSdf,
    origin: Vec3,
    dir: Vec3,
    t_near: f64,
    t_far: f64,
    cfg: &OracleRenderConfig,
) -> Option<TraceHit> {
    let mut t = t_near;
    for _ in 0..cfg.max_steps {
        let p = vadd(origin, vscale(dir, t));
        let d = sdf.eval(p);
        if d.abs() < cfg.tolerance {
            return Some(TraceHit {
                depth: t,
                position: p,
                normal: sdf.normal(p),
            });
        }
        t += d;
        if t > t_far || t < t_near - 0.5 {
            return None;
        }
    }
    None
}

/// Shade a batch of oracle surface hits with the shared BRDF/quadrature
/// machinery, using the scene's ground-truth material and light.
pub fn shade_hits(scene: &AnalyticScene, hits: &[TraceHit], view_dirs: &[Vec3], k: usize) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::with_capacity(hits.len());
    // Chunked so the tape for a full image stays small.
    const CHUNK: usize = 128;
    for (hs, ws) in hits.chunks(CHUNK).zip(view_dirs.chunks(CHUNK)) {
        let m = hs.len();
        let mut t = Tape::new();
        let mut alb = Array2::zeros((m, 3));
        let mut rough = Array2::zeros((m, 1));
        let mut metal = Array2::zeros((m, 1));
        let mut nrm = Array2::zeros((m, 3));
        let mut wo = Array2::zeros((m, 3));
        for (i, (h, d)) in hs.iter().zip(ws).enumerate() {
            let params = scene.material.eval(h.position);
            for c in 0..3 {
                alb[[i, c]] = params.albedo[c];
                nrm[[i, c]] = h.normal[c];
                wo[[i, c]] = -d[c];
            }
            rough[[i, 0]] = params.roughness;
            metal[[i, 0]] = params.metallic;
        }
        let mat = MaterialNodes {
            albedo: t.leaf_mat(alb),
            roughness: t.leaf_mat(rough),
            metallic: t.leaf_mat(metal),
        };
        let n = t.leaf_mat(nrm);
        let wo = t.leaf_mat(wo);
        let light = scene.light.clone();
        let res = shade(&mut t, &mat, n, wo, k, &mut |t, wi| {
            let dirs = t.data(wi).clone();
            let rows = dirs.shape()[0];
            let mut rad = Array2::zeros((rows, 3));
            for i in 0..rows {
                let v = light.eval([dirs[[i, 0]], dirs[[i, 1]], dirs[[i, 2]]]);
                for c in 0..3 {
                    rad[[i, c]] = v[c];
                }
            }
            Ok(t.leaf_mat(rad))
        })?;
        let d = t.data(res.radiance);
        for i in 0..m {
            out.push([d[[i, 0]], d[[i, 1]], d[[i, 2]]]);
        }
    }
    Ok(out)
}

/// Ground-truth render of one view: linear image, silhouette mask, depth map
/// (zero where the ray misses).
pub fn forward_render(
    scene: &AnalyticScene,
    camera: &Camera,
    t_near: f64,
    t_far: f64,
    cfg: &OracleRenderConfig,
) -> Result<(LinearImage, Mask, Array2<f64>)> {
    cfg.validate()?;
    scene.validate()?;
    let (w, h) = (camera.width, camera.height);
    let mut image = LinearImage::zeros((h, w, 3));
    let mut mask = Mask::from_elem((h, w), false);
    let mut depth = Array2::zeros((h, w));
    let mut hits = Vec::new();
    let mut dirs = Vec::new();
    let mut pixels = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (o, d) = camera.generate_ray(x as f64, y as f64)?;
            if let Some(hit) = sphere_trace(&scene.sdf, o, d, t_near, t_far, cfg) {
                mask[[y, x]] = true;
                depth[[y, x]] = hit.depth;
                hits.push(hit);
                dirs.push(d);
                pixels.push((y, x));
            }
        }
    }
    let colors = shade_hits(scene, &hits, &dirs, cfg.k_gt)?;
    for ((y, x), c) in pixels.into_iter().zip(colors) {
        for ch in 0..3 {
            image[[y, x, ch]] = c[ch];
        }
    }
    Ok((image, mask, depth))
}

/// Render the ground-truth light into an equirectangular map.
pub fn render_light_map(light: &LightModel, width: usize, height: usize) -> LinearImage {
    let mut img = LinearImage::zeros((height, width, 3));
    for y in 0..height {
        let theta = (y as f64 + 0.5) / height as f64 * std::f64::consts::PI;
        for x in 0..width {
            let phi = (x as f64 + 0.5) / width as f64 * std::f64::consts::TAU - std::f64::consts::PI;
            let dir = [
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            ];
            let v = light.eval(dir);
            for c in 0..3 {
                img[[y, x, c]] = v[c];
            }
        }
    }
    img
}

/// Default near/far bounds for oracle cameras on the radius-2.5 sphere.
pub const ORACLE_T_NEAR: f64 = 1.0;
pub const ORACLE_T_FAR: f64 = 4.0;

/// Deterministic oracle camera rig: Fibonacci directions on the radius-2.5
/// sphere with small seeded jitter, all looking at the origin.
pub fn oracle_cameras(n_views: usize, resolution: usize, seed: u64) -> Result<Vec<Camera>> {
    if n_views < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 views, got {n_views}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let w = resolution as f64;
    let intr = [1.4 * w, 1.4 * w, w / 2.0, w / 2.0];
    let mut cams = Vec::with_capacity(n_views);
    for i in 0..n_views {
        // Squeeze z slightly away from the poles before jittering.
        let z = (1.0 - (2.0 * i as f64 + 1.0) / n_views as f64) * 0.95;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let phi = std::f64::consts::TAU * (i as f64 / golden).fract();
        let mut dir = [r * phi.cos(), r * phi.sin(), z];
        for c in &mut dir {
            *c += rng.random_range(-0.05..0.05);
        }
        let eye = vscale(vnormalize(dir), 2.5);
        let fwd = vnormalize(vsub([0.0, 0.0, 0.0], eye));
        let up = if fwd[1].abs() > 0.9 {
            [0.0, 0.0, 1.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        cams.push(Camera::look_at(
            eye,
            [0.0, 0.0, 0.0],
            up,
            intr,
            resolution,
            resolution,
        ));
    }
    Ok(cams)
}

/// Generate a dataset directory in the standard layout: `cameras.json`,
/// `images/`, `masks/`, `light_gt.pfm`, `material_gt.json`.
pub fn generate_dataset(
    scene: &AnalyticScene,
    n_views: usize,
    resolution: usize,
    seed: u64,
    cfg: &OracleRenderConfig,
    out_dir: &Path,
) -> Result<()> {
    cfg.validate()?;
    scene.validate()?;
    let cams = oracle_cameras(n_views, resolution, seed)?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let mut records = Vec::with_capacity(n_views);
    for (i, cam) in cams.iter().enumerate() {
        let (img, mask, _depth) = forward_render(scene, cam, ORACLE_T_NEAR, ORACLE_T_FAR, cfg)?;
        write_linear_png(&out_dir.join(format!("images/view_{i:04}.png")), &img)?;
        write_mask_png(&out_dir.join(format!("masks/view_{i:04}.png")), &mask)?;
        records.push(CameraRecord::from_camera(cam));
    }
    let cameras = CamerasFile {
        t_near: ORACLE_T_NEAR,
        t_far: ORACLE_T_FAR,
        views: records,
    };
    let json = serde_json::to_string_pretty(&cameras)?;
    std::fs::write(out_dir.join("cameras.json"), json)?;
    write_pfm(
        &out_dir.join("light_gt.pfm"),
        &render_light_map(&scene.light, 128, 64),
    )?;
    let recipe = serde_json::to_string_pretty(scene)?;
    std::fs::write(out_dir.join("material_gt.json"), recipe)?;
    Ok(())
}

/// Load a scene recipe back from `material_gt.json`.
pub fn load_scene(path: &Path) -> Result<AnalyticScene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Dataset {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let scene: AnalyticScene = serde_json::from_str(&text).map_err(|e| Error::Dataset {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    scene.validate()?;
    Ok(scene)
}
