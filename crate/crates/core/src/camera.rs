//! Pinhole camera model, dataset ingestion, ray generation and stratified
//! depth sampling.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_linear_png, read_mask_png, read_pfm, LinearImage, Mask};

pub type Vec3 = [f64; 3];

pub fn vsub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
pub fn vadd(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
pub fn vscale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
pub fn vdot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
pub fn vcross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
pub fn vnorm(a: Vec3) -> f64 {
    vdot(a, a).sqrt()
}
pub fn vnormalize(a: Vec3) -> Vec3 {
    let n = vnorm(a);
    vscale(a, 1.0 / n)
}

/// Pinhole camera with a world-from-camera rigid transform. Camera space is
/// +z forward, +x right, +y down (image rows grow with +y).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// (fx, fy, cx, cy) in pixels.
    pub intrinsics: [f64; 4],
    /// Rotation part of world-from-camera, row-major.
    pub rotation: [[f64; 3]; 3],
    /// Camera center in world coordinates.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let [fx, fy, cx, cy] = self.intrinsics;
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive: fx={fx}, fy={fy}"
            )));
        }
        if cx < 0.0 || cx >= self.width as f64 || cy < 0.0 || cy >= self.height as f64 {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {}x{}",
                self.width, self.height
            )));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(
                        "camera rotation is not orthonormal".into(),
                    ));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "camera rotation determinant {det} != 1"
            )));
        }
        Ok(())
    }

    fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    /// World-space ray through continuous pixel coordinates `(u, v)` using the
    /// pixel-center (+0.5) convention. Returns `(origin, unit direction)`.
    pub fn generate_ray(&self, u: f64, v: f64) -> Result<(Vec3, Vec3)> {
        if u < 0.0 || u >= self.width as f64 || v < 0.0 || v >= self.height as f64 {
            return Err(Error::InvalidArgument(format!(
                "pixel ({u}, {v}) outside {}x{}",
                self.width, self.height
            )));
        }
        let [fx, fy, cx, cy] = self.intrinsics;
        let dir_cam = [(u + 0.5 - cx) / fx, (v + 0.5 - cy) / fy, 1.0];
        let dir = vnormalize(self.rotate(dir_cam));
        Ok((self.translation, dir))
    }

    /// Project a world point to continuous pixel coordinates and depth.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let rel = vsub(p, self.translation);
        // camera-from-world rotation is the transpose
        let r = &self.rotation;
        let cam = [
            r[0][0] * rel[0] + r[1][0] * rel[1] + r[2][0] * rel[2],
            r[0][1] * rel[0] + r[1][1] * rel[1] + r[2][1] * rel[2],
            r[0][2] * rel[0] + r[1][2] * rel[1] + r[2][2] * rel[2],
        ];
        if cam[2] <= 0.0 {
            return None;
        }
        let [fx, fy, cx, cy] = self.intrinsics;
        let u = fx * cam[0] / cam[2] + cx - 0.5;
        let v = fy * cam[1] / cam[2] + cy - 0.5;
        Some((u, v, cam[2]))
    }

    /// Look-at constructor: camera at `eye` looking toward `target`, with a
    /// world up hint.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up_hint: Vec3,
        intrinsics: [f64; 4],
        width: usize,
        height: usize,
    ) -> Self {
        let forward = vnormalize(vsub(target, eye));
        let right = vnormalize(vcross(forward, up_hint));
        let down = vcross(forward, right);
        // Columns of world-from-camera are the camera axes in world space.
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Camera {
            intrinsics,
            rotation,
            translation: eye,
            width,
            height,
        }
    }
}

#[derive(Debug, Clone)]
pub struct View {
    pub image: LinearImage,
    pub mask: Mask,
    pub camera: Camera,
}

#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub views: Vec<View>,
    pub t_near: f64,
    pub t_far: f64,
    /// Ground-truth environment map, when the dataset was oracle-generated.
    pub light_gt: Option<LinearImage>,
    /// Scene recipe JSON, when present (oracle datasets).
    pub material_gt_path: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CameraRecord {
    pub intrinsics: [f64; 4],
    /// 3x4 world-from-camera, row-major: [r00 r01 r02 t0 | r10 ... | ...].
    pub extrinsics: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CamerasFile {
    pub t_near: f64,
    pub t_far: f64,
    pub views: Vec<CameraRecord>,
}

impl CameraRecord {
    pub fn from_camera(c: &Camera) -> Self {
        let mut e = Vec::with_capacity(12);
        for i in 0..3 {
            for j in 0..3 {
                e.push(c.rotation[i][j]);
            }
            e.push(c.translation[i]);
        }
        CameraRecord {
            intrinsics: c.intrinsics,
            extrinsics: e,
            width: c.width,
            height: c.height,
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        if self.extrinsics.len() != 12 {
            return Err(Error::InvalidArgument(format!(
                "extrinsics must have 12 entries, got {}",
                self.extrinsics.len()
            )));
        }
        let e = &self.extrinsics;
        let cam = Camera {
            intrinsics: self.intrinsics,
            rotation: [
                [e[0], e[1], e[2]],
                [e[4], e[5], e[6]],
                [e[8], e[9], e[10]],
            ],
            translation: [e[3], e[7], e[11]],
            width: self.width,
            height: self.height,
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// Load a dataset directory: `cameras.json`, `images/view_%04d.png`,
/// `masks/view_%04d.png`, optional `light_gt.pfm` and `material_gt.json`.
pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let cam_path = dir.join("cameras.json");
    let text = std::fs::read_to_string(&cam_path).map_err(|e| Error::Dataset {
        path: cam_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let cams: CamerasFile = serde_json::from_str(&text).map_err(|e| Error::Dataset {
        path: cam_path.display().to_string(),
        detail: e.to_string(),
    })?;
    if !(cams.t_near > 0.0 && cams.t_near < cams.t_far) {
        return Err(Error::Dataset {
            path: cam_path.display().to_string(),
            detail: format!("invalid bounds t_near={} t_far={}", cams.t_near, cams.t_far),
        });
    }
    if cams.views.is_empty() {
        return Err(Error::Dataset {
            path: cam_path.display().to_string(),
            detail: "no views".into(),
        });
    }
    let mut views = Vec::with_capacity(cams.views.len());
    let (w0, h0) = (cams.views[0].width, cams.views[0].height);
    for (i, rec) in cams.views.iter().enumerate() {
        if rec.width != w0 || rec.height != h0 {
            return Err(Error::Dataset {
                path: cam_path.display().to_string(),
                detail: format!("view {i} resolution differs from view 0"),
            });
        }
        let camera = rec.to_camera().map_err(|e| Error::Dataset {
            path: cam_path.display().to_string(),
            detail: format!("view {i}: {e}"),
        })?;
        let img_path = dir.join(format!("images/view_{i:04}.png"));
        let image = read_linear_png(&img_path).map_err(|e| Error::Dataset {
            path: img_path.display().to_string(),
            detail: e.to_string(),
        })?;
        let mask_path = dir.join(format!("masks/view_{i:04}.png"));
        let mask = read_mask_png(&mask_path).map_err(|e| Error::Dataset {
            path: mask_path.display().to_string(),
            detail: e.to_string(),
        })?;
        if image.dim() != (h0, w0, 3) {
            return Err(Error::Dataset {
                path: img_path.display().to_string(),
                detail: format!("image is {:?}, camera says {h0}x{w0}", image.dim()),
            });
        }
        if mask.dim() != (h0, w0) {
            return Err(Error::Dataset {
                path: mask_path.display().to_string(),
                detail: format!("mask is {:?}, camera says {h0}x{w0}", mask.dim()),
            });
        }
        views.push(View {
            image,
            mask,
            camera,
        });
    }
    let light_path = dir.join("light_gt.pfm");
    let light_gt = if light_path.exists() {
        Some(read_pfm(&light_path)?)
    } else {
        None
    };
    let mat_path = dir.join("material_gt.json");
    let material_gt_path = mat_path.exists().then_some(mat_path);
    Ok(SceneDataset {
        views,
        t_near: cams.t_near,
        t_far: cams.t_far,
        light_gt,
        material_gt_path,
    })
}

/// A batch of camera rays with ground truth and stratified depth samples.
#[derive(Debug, Clone)]
pub struct RayBundle {
    pub origins: Array2<f64>,
    pub directions: Array2<f64>,
    pub gt_colors: Array2<f64>,
    pub gt_masks: Vec<bool>,
    /// (n * s, 3) flattened sample positions, ray-major.
    pub sample_positions: Array2<f64>,
    /// (n, s) sample depths, strictly increasing per ray.
    pub depths: Array2<f64>,
    /// (n, s) forward differences of depth; last entry is t_far - t_last.
    pub deltas: Array2<f64>,
    pub samples_per_ray: usize,
}

impl RayBundle {
    pub fn num_rays(&self) -> usize {
        self.origins.nrows()
    }
}

/// Draw `n` rays uniformly over all views and pixels, with `s` stratified
/// depth samples per ray. Deterministic given the seed.
pub fn sample_ray_batch(ds: &SceneDataset, n: usize, s: usize, seed: u64) -> Result<RayBundle> {
    if n < 1 || s < 2 {
        return Err(Error::InvalidArgument(format!(
            "need n >= 1 rays and s >= 2 samples, got n={n}, s={s}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, _) = ds.views[0].image.dim();
    let mut origins = Array2::zeros((n, 3));
    let mut directions = Array2::zeros((n, 3));
    let mut gt_colors = Array2::zeros((n, 3));
    let mut gt_masks = Vec::with_capacity(n);
    let mut depths = Array2::zeros((n, s));
    let mut deltas = Array2::zeros((n, s));
    let mut positions = Array2::zeros((n * s, 3));
    let bin = (ds.t_far - ds.t_near) / s as f64;
    for i in 0..n {
        let vi = rng.random_range(0..ds.views.len());
        let u = rng.random_range(0..w);
        let v = rng.random_range(0..h);
        let view = &ds.views[vi];
        let (o, d) = view.camera.generate_ray(u as f64, v as f64)?;
        for k in 0..3 {
            origins[[i, k]] = o[k];
            directions[[i, k]] = d[k];
            gt_colors[[i, k]] = view.image[[v, u, k]];
        }
        gt_masks.push(view.mask[[v, u]]);
        for j in 0..s {
            let jitter: f64 = rng.random_range(0.0..1.0);
            depths[[i, j]] = ds.t_near + (j as f64 + jitter) * bin;
        }
        for j in 0..s {
            deltas[[i, j]] = if j + 1 < s {
                depths[[i, j + 1]] - depths[[i, j]]
            } else {
                ds.t_far - depths[[i, j]]
            };
            let t = depths[[i, j]];
            for k in 0..3 {
                positions[[i * s + j, k]] = o[k] + t * d[k];
            }
        }
    }
    Ok(RayBundle {
        origins,
        directions,
        gt_colors,
        gt_masks,
        sample_positions: positions,
        depths,
        deltas,
        samples_per_ray: s,
    })
}

/// Stratified depths for a single ray (used by full-frame rendering).
pub fn stratified_depths(t_near: f64, t_far: f64, s: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let bin = (t_far - t_near) / s as f64;
    Array1::from_iter((0..s).map(|j| {
        let jitter: f64 = rng.random_range(0.0..1.0);
        t_near + (j as f64 + jitter) * bin
    }))
}
