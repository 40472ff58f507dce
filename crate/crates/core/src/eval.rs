//! Evaluation of trained fields: rendering to images, mesh extraction with
//! baked attributes, material-map accuracy against a ground-truth recipe,
//! novel-view and relighting quality, and the aggregated report.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::camera::{Camera, RayBundle, SceneDataset, Vec3};
use crate::error::{Error, Result};
use crate::fields::{
    geometry_query, geometry_sdf, light_query, material_query, Fields, ParamBinding, ParamStore,
};
use crate::io::{LinearImage, Mask};
use crate::mesh::{bake_attributes, marching_cubes, Bounds, TriangleMesh};
use crate::metrics::{chamfer_distance, normal_consistency, psnr, ssim, PSNR_CAP_DB};
use crate::oracle::{forward_render, AnalyticScene, LightModel, OracleRenderConfig, VmfLobe};
use crate::render::{render_rays, ShadedSamples, SHADING_CUTOFF};
use crate::shading::shade;
use crate::trainer::{TrainState, LOG_KAPPA};

/// Deterministic rendering parameters for trained-field images.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    pub samples_per_ray: usize,
    pub quadrature: usize,
    /// Rays rendered per tape to bound memory.
    pub chunk_rays: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            samples_per_ray: 64,
            quadrature: 32,
            chunk_rays: 64,
        }
    }
}

fn bundle_for_rays(
    rays: &[(Vec3, Vec3)],
    t_near: f64,
    t_far: f64,
    s: usize,
) -> RayBundle {
    let n = rays.len();
    let bin = (t_far - t_near) / s as f64;
    let mut origins = Array2::zeros((n, 3));
    let mut directions = Array2::zeros((n, 3));
    let mut depths = Array2::zeros((n, s));
    let mut deltas = Array2::zeros((n, s));
    let mut positions = Array2::zeros((n * s, 3));
    for (i, (o, d)) in rays.iter().enumerate() {
        for c in 0..3 {
            origins[[i, c]] = o[c];
            directions[[i, c]] = d[c];
        }
        for j in 0..s {
            let tj = t_near + (j as f64 + 0.5) * bin;
            depths[[i, j]] = tj;
            deltas[[i, j]] = bin;
            for c in 0..3 {
                positions[[i * s + j, c]] = o[c] + tj * d[c];
            }
        }
    }
    RayBundle {
        origins,
        directions,
        gt_colors: Array2::zeros((n, 3)),
        gt_masks: vec![true; n],
        sample_positions: positions,
        depths,
        deltas,
        samples_per_ray: s,
    }
}

/// Render one camera's full image from trained fields. Depth samples sit at
/// fixed bin centers (no jitter), so renders are deterministic. When
/// `light_override` is given it replaces the learned light field, which is
/// how relighting works.
pub fn render_fields_image(
    fields: &Fields,
    store: &ParamStore,
    camera: &Camera,
    t_near: f64,
    t_far: f64,
    settings: &RenderSettings,
    light_override: Option<&LightModel>,
) -> Result<(LinearImage, Mask)> {
    let (h, w) = (camera.height, camera.width);
    let mut image = Array3::zeros((h, w, 3));
    let mut mask = Array2::from_elem((h, w), false);
    let mut rays = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            rays.push(camera.generate_ray(x as f64, y as f64)?);
        }
    }
    for (ci, chunk) in rays.chunks(settings.chunk_rays.max(1)).enumerate() {
        let bundle = bundle_for_rays(chunk, t_near, t_far, settings.samples_per_ray);
        let mut t = Tape::new();
        let bind = ParamBinding::bind(&mut t, store, &["geo.", "mat.", "light.", LOG_KAPPA]);
        let log_kappa = bind.node(LOG_KAPPA);
        let out = render_rays(
            &mut t,
            &bundle,
            log_kappa,
            SHADING_CUTOFF,
            &mut |t, pos| geometry_sdf(t, &fields.geometry, &bind, pos),
            &mut |t, pos, wo| {
                let g = geometry_query(t, &fields.geometry, &bind, pos)?;
                let m = material_query(t, &fields.material, &bind, pos)?;
                let sh = shade(t, &m, g.normal, wo, settings.quadrature, &mut |t, dirs| {
                    match light_override {
                        None => light_query(t, &fields.light, &bind, dirs),
                        Some(light) => {
                            let d = t.data(dirs).clone();
                            let k = d.shape()[0];
                            let mut vals = Array2::zeros((k, 3));
                            for i in 0..k {
                                let dir = [d[[i, 0]], d[[i, 1]], d[[i, 2]]];
                                let l = light.eval(dir);
                                for c in 0..3 {
                                    vals[[i, c]] = l[c];
                                }
                            }
                            Ok(t.leaf_mat(vals))
                        }
                    }
                })?;
                Ok(ShadedSamples {
                    color: sh.radiance,
                    invalid: g.invalid,
                })
            },
        )?;
        let colors = t.data(out.color);
        let opacity = t.data(out.opacity);
        for (i, _) in chunk.iter().enumerate() {
            let pixel = ci * settings.chunk_rays.max(1) + i;
            let (y, x) = (pixel / w, pixel % w);
            for c in 0..3 {
                image[[y, x, c]] = colors[[i, c]];
            }
            mask[[y, x]] = opacity[[i, 0]] > 0.5;
        }
    }
    Ok((image, mask))
}

/// Extract the zero level set of the trained geometry field and bake normals
/// and material attributes at the vertices. Returns the mesh and the count of
/// degenerate-gradient fallbacks.
pub fn extract_trained_mesh(
    fields: &Fields,
    store: &ParamStore,
    bounds: Bounds,
    resolution: usize,
) -> Result<(TriangleMesh, usize)> {
    let mut sdf_eval = |pts: &Array2<f64>| -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let bind = ParamBinding::bind(&mut t, store, &["geo."]);
        let x = t.leaf_mat(pts.clone());
        let sdf = geometry_sdf(&mut t, &fields.geometry, &bind, x)?;
        let d = t.data(sdf);
        Ok((0..pts.nrows()).map(|i| d[[i, 0]]).collect())
    };
    let mut mesh = marching_cubes(&mut sdf_eval, bounds, resolution)?;
    if mesh.is_empty() {
        return Ok((mesh, 0));
    }
    let mut normal_fn = |pts: &Array2<f64>| -> Result<(Array2<f64>, Vec<bool>)> {
        let mut t = Tape::new();
        let bind = ParamBinding::bind(&mut t, store, &["geo."]);
        let x = t.leaf_mat(pts.clone());
        let g = geometry_query(&mut t, &fields.geometry, &bind, x)?;
        let nd = t.data(g.normal);
        let mut n = Array2::zeros((pts.nrows(), 3));
        for i in 0..pts.nrows() {
            for c in 0..3 {
                n[[i, c]] = nd[[i, c]];
            }
        }
        Ok((n, g.invalid))
    };
    let mut material_fn = |pts: &Array2<f64>| -> Result<Array2<f64>> {
        let mut t = Tape::new();
        let bind = ParamBinding::bind(&mut t, store, &["mat."]);
        let x = t.leaf_mat(pts.clone());
        let m = material_query(&mut t, &fields.material, &bind, x)?;
        let (a, r, mt) = (t.data(m.albedo), t.data(m.roughness), t.data(m.metallic));
        let mut out = Array2::zeros((pts.nrows(), 5));
        for i in 0..pts.nrows() {
            for c in 0..3 {
                out[[i, c]] = a[[i, c]];
            }
            out[[i, 3]] = r[[i, 0]];
            out[[i, 4]] = mt[[i, 0]];
        }
        Ok(out)
    };
    let fallbacks = bake_attributes(&mut mesh, &mut normal_fn, &mut material_fn)?;
    Ok((mesh, fallbacks))
}

/// Query the trained material field at arbitrary points, as (m, 5) rows.
pub fn trained_material_eval<'a>(
    fields: &'a Fields,
    store: &'a ParamStore,
) -> impl FnMut(&Array2<f64>) -> Result<Array2<f64>> + 'a {
    move |pts: &Array2<f64>| {
        let mut t = Tape::new();
        let bind = ParamBinding::bind(&mut t, store, &["mat."]);
        let x = t.leaf_mat(pts.clone());
        let m = material_query(&mut t, &fields.material, &bind, x)?;
        let (a, r, mt) = (t.data(m.albedo), t.data(m.roughness), t.data(m.metallic));
        let mut out = Array2::zeros((pts.nrows(), 5));
        for i in 0..pts.nrows() {
            for c in 0..3 {
                out[[i, c]] = a[[i, c]];
            }
            out[[i, 3]] = r[[i, 0]];
            out[[i, 4]] = mt[[i, 0]];
        }
        Ok(out)
    }
}

/// Points on the ground-truth surface, found by Newton projection of random
/// cube samples onto the recipe SDF's zero set. Deterministic given the seed.
pub fn ground_truth_surface_points(
    scene: &AnalyticScene,
    n_points: usize,
    seed: u64,
) -> Result<Vec<Vec3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_points);
    let mut attempts = 0usize;
    while out.len() < n_points {
        attempts += 1;
        if attempts > n_points * 100 {
            return Err(Error::InvalidArgument(
                "could not find enough ground-truth surface points; \
                 does the recipe contain a surface?"
                    .into(),
            ));
        }
        let mut x: Vec3 = [
            rng.random_range(-1.2..1.2),
            rng.random_range(-1.2..1.2),
            rng.random_range(-1.2..1.2),
        ];
        let mut ok = false;
        for _ in 0..50 {
            let f = scene.sdf.eval(x);
            if f.abs() < 1e-9 {
                ok = true;
                break;
            }
            let n = scene.sdf.normal(x);
            for c in 0..3 {
                x[c] -= f * n[c];
            }
        }
        if ok && x.iter().all(|v| v.abs() <= 1.5) {
            out.push(x);
        }
    }
    Ok(out)
}

/// Per-attribute PSNR of a material predictor against the recipe's material
/// model, evaluated at ground-truth surface points.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MaterialPsnr {
    pub albedo: f64,
    pub roughness: f64,
    pub metallic: f64,
}

pub fn material_map_error(
    material_fn: &mut dyn FnMut(&Array2<f64>) -> Result<Array2<f64>>,
    scene: &AnalyticScene,
    n_points: usize,
    seed: u64,
) -> Result<MaterialPsnr> {
    let points = ground_truth_surface_points(scene, n_points, seed)?;
    let m = points.len();
    let mut pts = Array2::zeros((m, 3));
    for (i, p) in points.iter().enumerate() {
        for c in 0..3 {
            pts[[i, c]] = p[c];
        }
    }
    let pred = material_fn(&pts)?;
    if pred.nrows() != m || pred.ncols() != 5 {
        return Err(Error::InvalidArgument(
            "material predictor must return (m, 5) rows".into(),
        ));
    }
    let mut gt = Array2::zeros((m, 5));
    for (i, p) in points.iter().enumerate() {
        let params = scene.material.eval(*p);
        for c in 0..3 {
            gt[[i, c]] = params.albedo[c];
        }
        gt[[i, 3]] = params.roughness;
        gt[[i, 4]] = params.metallic;
    }
    let slice = |a: &Array2<f64>, lo: usize, hi: usize| -> ArrayD<f64> {
        a.slice(ndarray::s![.., lo..hi]).to_owned().into_dyn()
    };
    Ok(MaterialPsnr {
        albedo: psnr(&slice(&pred, 0, 3), &slice(&gt, 0, 3), 1.0)?,
        roughness: psnr(&slice(&pred, 3, 4), &slice(&gt, 3, 4), 1.0)?,
        metallic: psnr(&slice(&pred, 4, 5), &slice(&gt, 4, 5), 1.0)?,
    })
}

/// Mean PSNR over cameras of the trained reconstruction rendered under a
/// novel light, against the oracle's forward render of the true scene under
/// that same light.
pub fn relighting_eval(
    fields: &Fields,
    store: &ParamStore,
    scene: &AnalyticScene,
    cameras: &[Camera],
    novel_light: &LightModel,
    t_near: f64,
    t_far: f64,
    settings: &RenderSettings,
    oracle_cfg: &OracleRenderConfig,
) -> Result<f64> {
    if cameras.is_empty() {
        return Err(Error::InvalidArgument("relighting needs cameras".into()));
    }
    let relit_scene = AnalyticScene {
        light: novel_light.clone(),
        ..scene.clone()
    };
    let mut total = 0.0;
    for cam in cameras {
        let (ours, _) = render_fields_image(
            fields,
            store,
            cam,
            t_near,
            t_far,
            settings,
            Some(novel_light),
        )?;
        let (truth, _, _) = forward_render(&relit_scene, cam, t_near, t_far, oracle_cfg)?;
        total += psnr(&ours.into_dyn(), &truth.into_dyn(), 1.0)?;
    }
    Ok(total / cameras.len() as f64)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViewQuality {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RelightQuality {
    pub light: String,
    pub psnr: f64,
}

/// Evaluation summary. Ground-truth-dependent fields are `None` when the
/// dataset carries no scene recipe (`material_gt.json`); novel-view quality
/// only needs the images themselves.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    /// Symmetric Chamfer distance in scene units.
    pub chamfer: Option<f64>,
    pub normal_consistency_deg: Option<f64>,
    pub novel_view: Vec<ViewQuality>,
    pub material: Option<MaterialPsnr>,
    pub relighting: Vec<RelightQuality>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.chamfer {
            if !(c >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "chamfer must be non-negative, got {c}"
                )));
            }
        }
        let psnr_ok = |v: f64| v.is_finite() && v <= PSNR_CAP_DB;
        for v in &self.novel_view {
            if !psnr_ok(v.psnr) || !(-1.0..=1.0).contains(&v.ssim) {
                return Err(Error::InvalidArgument(format!(
                    "view {} has invalid quality values (psnr {}, ssim {})",
                    v.view, v.psnr, v.ssim
                )));
            }
        }
        if let Some(mat) = &self.material {
            for m in [mat.albedo, mat.roughness, mat.metallic] {
                if !psnr_ok(m) {
                    return Err(Error::InvalidArgument(format!("invalid material PSNR {m}")));
                }
            }
        }
        for r in &self.relighting {
            if !psnr_ok(r.psnr) {
                return Err(Error::InvalidArgument(format!(
                    "invalid relighting PSNR for `{}`: {}",
                    r.light, r.psnr
                )));
            }
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let report: Self = serde_json::from_str(&text)?;
        report.validate()?;
        Ok(report)
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<28}{:>12}\n", "metric", "value"));
        if let Some(c) = self.chamfer {
            s.push_str(&format!("{:<28}{:>12.6}\n", "chamfer", c));
        }
        if let Some(nc) = self.normal_consistency_deg {
            s.push_str(&format!("{:<28}{:>12.3}\n", "normal consistency (deg)", nc));
        }
        for v in &self.novel_view {
            s.push_str(&format!(
                "{:<28}{:>12.3}\n",
                format!("view {} PSNR (dB)", v.view),
                v.psnr
            ));
            s.push_str(&format!(
                "{:<28}{:>12.4}\n",
                format!("view {} SSIM", v.view),
                v.ssim
            ));
        }
        if let Some(mat) = &self.material {
            s.push_str(&format!("{:<28}{:>12.3}\n", "albedo PSNR (dB)", mat.albedo));
            s.push_str(&format!(
                "{:<28}{:>12.3}\n",
                "roughness PSNR (dB)", mat.roughness
            ));
            s.push_str(&format!(
                "{:<28}{:>12.3}\n",
                "metallic PSNR (dB)", mat.metallic
            ));
        }
        for r in &self.relighting {
            s.push_str(&format!(
                "{:<28}{:>12.3}\n",
                format!("relight `{}` PSNR (dB)", r.light),
                r.psnr
            ));
        }
        s
    }
}

/// Novel-view quality of trained fields against held-out dataset views.
pub fn novel_view_eval(
    fields: &Fields,
    store: &ParamStore,
    ds: &SceneDataset,
    view_indices: &[usize],
    settings: &RenderSettings,
) -> Result<Vec<ViewQuality>> {
    let mut out = Vec::with_capacity(view_indices.len());
    for &vi in view_indices {
        let view = ds.views.get(vi).ok_or_else(|| {
            Error::InvalidArgument(format!("view index {vi} out of range"))
        })?;
        let (img, _) = render_fields_image(
            fields,
            store,
            &view.camera,
            ds.t_near,
            ds.t_far,
            settings,
            None,
        )?;
        let p = psnr(&img.clone().into_dyn(), &view.image.clone().into_dyn(), 1.0)?;
        let s = ssim(&img.into_dyn(), &view.image.clone().into_dyn())?;
        out.push(ViewQuality {
            view: vi,
            psnr: p,
            ssim: s,
        });
    }
    Ok(out)
}

/// Convenience: the trained state's field/parameter pair.
pub fn state_fields(state: &TrainState) -> (&Fields, &ParamStore) {
    (&state.fields, &state.store)
}

/// Fixed pair of novel lights for relighting evaluation: a warm constant
/// environment and a cool sky with one sharp lobe.
pub fn standard_novel_lights() -> Vec<(String, LightModel)> {
    let d = crate::camera::vnormalize([-1.0, 0.5, 0.8]);
    vec![
        (
            "warm_constant".into(),
            LightModel::Constant {
                radiance: [0.9, 0.7, 0.5],
            },
        ),
        (
            "cool_lobe".into(),
            LightModel::Lobes {
                ambient: [0.15, 0.18, 0.25],
                lobes: vec![VmfLobe {
                    direction: d,
                    sharpness: 12.0,
                    radiance: [1.5, 1.8, 2.4],
                }],
            },
        ),
    ]
}

/// Knobs for the aggregate evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub render: RenderSettings,
    /// Grid resolution for the trained-field mesh.
    pub mesh_resolution: usize,
    /// Grid resolution for the ground-truth reference mesh.
    pub reference_resolution: usize,
    pub mesh_half_extent: f64,
    pub chamfer_samples: usize,
    pub material_points: usize,
    /// How many dataset cameras to render under each novel light.
    pub relight_cameras: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            render: RenderSettings::default(),
            mesh_resolution: 64,
            reference_resolution: 96,
            mesh_half_extent: 1.2,
            chamfer_samples: 20_000,
            material_points: 2_000,
            relight_cameras: 2,
            seed: 0,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.mesh_resolution < 8 || self.reference_resolution < 8 {
            return Err(Error::InvalidArgument(
                "mesh resolutions must be at least 8".into(),
            ));
        }
        if !(self.mesh_half_extent > 0.0) {
            return Err(Error::InvalidArgument(
                "mesh half extent must be positive".into(),
            ));
        }
        if self.chamfer_samples < 1000 {
            return Err(Error::InvalidArgument(
                "chamfer needs at least 1000 samples".into(),
            ));
        }
        if self.material_points == 0 || self.relight_cameras == 0 {
            return Err(Error::InvalidArgument(
                "material points and relight cameras must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Triangulate the recipe SDF as the geometry reference.
pub fn reference_mesh(
    scene: &AnalyticScene,
    bounds: Bounds,
    resolution: usize,
) -> Result<TriangleMesh> {
    let mut f = |pts: &Array2<f64>| -> Result<Vec<f64>> {
        Ok((0..pts.nrows())
            .map(|i| scene.sdf.eval([pts[[i, 0]], pts[[i, 1]], pts[[i, 2]]]))
            .collect())
    };
    marching_cubes(&mut f, bounds, resolution)
}

/// Full evaluation of a trained state against a dataset. Geometry, material
/// and relighting scores need the ground-truth recipe; without one only the
/// novel-view block is filled in.
pub fn evaluate(
    fields: &Fields,
    store: &ParamStore,
    ds: &SceneDataset,
    scene: Option<&AnalyticScene>,
    view_indices: &[usize],
    settings: &EvalSettings,
    oracle_cfg: &OracleRenderConfig,
) -> Result<EvalReport> {
    settings.validate()?;
    let novel_view = novel_view_eval(fields, store, ds, view_indices, &settings.render)?;

    let mut report = EvalReport {
        chamfer: None,
        normal_consistency_deg: None,
        novel_view,
        material: None,
        relighting: Vec::new(),
    };
    let Some(scene) = scene else {
        report.validate()?;
        return Ok(report);
    };

    let bounds = Bounds::cube(settings.mesh_half_extent);
    let (mesh, _) = extract_trained_mesh(fields, store, bounds, settings.mesh_resolution)?;
    let truth = reference_mesh(scene, bounds, settings.reference_resolution)?;
    report.chamfer = Some(chamfer_distance(
        &mesh,
        &truth,
        settings.chamfer_samples,
        settings.seed,
    )?);
    report.normal_consistency_deg = Some(normal_consistency(
        &mesh,
        &truth,
        settings.chamfer_samples,
        settings.seed,
    )?);

    let mut material_fn = trained_material_eval(fields, store);
    report.material = Some(material_map_error(
        &mut material_fn,
        scene,
        settings.material_points,
        settings.seed,
    )?);

    let n_cams = settings.relight_cameras.min(ds.views.len());
    let cams: Vec<Camera> = ds.views[..n_cams]
        .iter()
        .map(|v| v.camera.clone())
        .collect();
    for (name, light) in standard_novel_lights() {
        let p = relighting_eval(
            fields,
            store,
            scene,
            &cams,
            &light,
            ds.t_near,
            ds.t_far,
            &settings.render,
            oracle_cfg,
        )?;
        report.relighting.push(RelightQuality {
            light: name,
            psnr: p,
        });
    }
    report.validate()?;
    Ok(report)
}
