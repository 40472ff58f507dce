//! Adam optimization with exponential learning-rate decay, the end-to-end
//! training loop, and binary checkpointing with bit-exact resume.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::camera::{sample_ray_batch, SceneDataset, Vec3};
use crate::error::{Error, Result};
use crate::fields::{
    geometry_query, geometry_sdf, init_fields, light_query, material_query, FieldConfig, Fields,
    ParamBinding, ParamStore,
};
use crate::losses::{
    eikonal_loss, eikonal_sample_points, light_regularization, mask_loss, material_smoothness_loss,
    metallic_sparsity_loss, photometric_loss, tangential_offsets, total_loss, LossBreakdown,
    LossTerms, LossWeights,
};
use crate::render::{render_rays, surface_points, ShadedSamples, SHADING_CUTOFF};
use crate::shading::shade;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name under which the density-sharpness parameter lives in the store; it is
/// optimized jointly with the network weights.
pub const LOG_KAPPA: &str = "log_kappa";

const CHECKPOINT_MAGIC: &[u8; 8] = b"MDSDFCK\x01";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub iterations: usize,
    /// Rays per batch.
    pub batch_rays: usize,
    /// Depth samples per ray.
    pub samples_per_ray: usize,
    /// Hemisphere quadrature directions for shading.
    pub quadrature: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Per-iteration decay factor; `None` picks the factor so the final
    /// iteration runs at `lr0 / 10`.
    pub decay: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    pub fields: FieldConfig,
    /// Number of Eikonal sample points per iteration.
    pub eikonal_points: usize,
    /// Half extent of the cube the uniform Eikonal samples are drawn from.
    pub eikonal_half_extent: f64,
    /// Sphere directions for the light priors.
    pub light_reg_directions: usize,
    /// Tangential perturbation length for the material smoothness prior.
    pub smoothness_eps: f64,
    /// Initial value of the jointly optimized density sharpness, as ln(kappa).
    pub init_log_kappa: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_rays: 512,
            samples_per_ray: 64,
            quadrature: 32,
            lr0: 5e-4,
            decay: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_interval: 500,
            log_interval: 10,
            fields: FieldConfig::default(),
            eikonal_points: 64,
            eikonal_half_extent: 1.5,
            light_reg_directions: 32,
            smoothness_eps: 0.01,
            init_log_kappa: 20f64.ln(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if self.batch_rays < 1 || self.samples_per_ray < 2 {
            return Err(Error::InvalidArgument(format!(
                "need batch_rays >= 1 and samples_per_ray >= 2, got {} and {}",
                self.batch_rays, self.samples_per_ray
            )));
        }
        if self.quadrature < 8 {
            return Err(Error::InvalidArgument(
                "quadrature must be at least 8 directions".into(),
            ));
        }
        if let Some(d) = self.decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "decay must be in (0, 1], got {d}"
                )));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be in (0, 1), got {b}"
                )));
            }
        }
        if !(self.lr0 > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(
                "lr0 and epsilon must be positive".into(),
            ));
        }
        if self.eikonal_points < 1 || !(self.eikonal_half_extent > 0.0) {
            return Err(Error::InvalidArgument(
                "need at least one Eikonal point and a positive half extent".into(),
            ));
        }
        if !(self.smoothness_eps > 0.0) {
            return Err(Error::InvalidArgument(
                "smoothness_eps must be positive".into(),
            ));
        }
        if self.checkpoint_interval < 1 || self.log_interval < 1 {
            return Err(Error::InvalidArgument(
                "checkpoint_interval and log_interval must be >= 1".into(),
            ));
        }
        self.weights.validate()
    }

    /// Per-iteration decay factor: the explicit value, or the one that brings
    /// the final iteration to `lr0 / 10`.
    pub fn decay_factor(&self) -> f64 {
        match self.decay {
            Some(d) => d,
            None if self.iterations > 1 => 0.1f64.powf(1.0 / (self.iterations as f64 - 1.0)),
            None => 1.0,
        }
    }
}

/// Learning rate at a given iteration: `lr0 * decay^iter`.
pub fn lr_schedule(iter: usize, cfg: &TrainingConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor().powi(iter as i32)
}

/// Per-parameter Adam moments plus the shared step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: IndexMap<String, ArrayD<f64>>,
    pub v: IndexMap<String, ArrayD<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, data) in &store.entries {
            m.insert(name.clone(), ArrayD::zeros(data.raw_dim()));
            v.insert(name.clone(), ArrayD::zeros(data.raw_dim()));
        }
        Self { m, v, step: 0 }
    }
}

/// One Adam update over every parameter in the store. Parameters without a
/// gradient entry receive a zero gradient (their moments still decay).
pub fn adam_step(
    store: &mut ParamStore,
    grads: &IndexMap<String, ArrayD<f64>>,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of parameter `{name}`"),
            });
        }
        if !store.entries.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "gradient for unknown parameter `{name}`"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, theta) in store.entries.iter_mut() {
        let zero = ArrayD::zeros(theta.raw_dim());
        let g = grads.get(name).unwrap_or(&zero);
        let m = state.m.get_mut(name).expect("moment mirrors parameter");
        let v = state.v.get_mut(name).expect("moment mirrors parameter");
        ndarray::Zip::from(theta)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|th, m, v, g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *th -= lr * mhat / (vhat.sqrt() + epsilon);
            });
    }
    Ok(())
}

/// Everything the loop mutates: the field definitions, their parameters
/// (including `log_kappa`), the optimizer moments, and the iteration cursor.
pub struct TrainState {
    pub fields: Fields,
    pub store: ParamStore,
    pub adam: AdamState,
    pub iteration: usize,
}

/// Fresh state from a config: field parameters seeded from `cfg.seed`, the
/// density sharpness at its configured initial value, zero Adam moments.
pub fn init_train_state(cfg: &TrainingConfig) -> Result<TrainState> {
    cfg.validate()?;
    let (fields, mut store) = init_fields(cfg.seed, &cfg.fields);
    store.insert(
        LOG_KAPPA,
        ArrayD::from_elem(IxDyn(&[1]), cfg.init_log_kappa),
    );
    let adam = AdamState::new(&store);
    Ok(TrainState {
        fields,
        store,
        adam,
        iteration: 0,
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-iteration stream seed: one base seed split by iteration
/// and purpose, so every random draw is reproducible regardless of evaluation
/// order.
pub fn stream_seed(seed: u64, iter: usize, stream: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(iter as u64)) ^ stream)
}

const STREAM_RAYS: u64 = 1;
const STREAM_EIKONAL: u64 = 2;
const STREAM_SMOOTHNESS: u64 = 3;

/// Forward pass plus backward for one iteration's batch, without touching the
/// parameters: returns the loss breakdown and the named gradients.
pub fn iteration_losses(
    cfg: &TrainingConfig,
    ds: &SceneDataset,
    state: &TrainState,
    iter: usize,
) -> Result<(LossBreakdown, IndexMap<String, ArrayD<f64>>)> {
    let bundle = sample_ray_batch(
        ds,
        cfg.batch_rays,
        cfg.samples_per_ray,
        stream_seed(cfg.seed, iter, STREAM_RAYS),
    )?;

    let mut t = Tape::new();
    let bind = ParamBinding::bind(&mut t, &state.store, &["geo.", "mat.", "light.", LOG_KAPPA]);
    let log_kappa = bind.node(LOG_KAPPA);

    let fields = &state.fields;
    let out = {
        let bind = &bind;
        render_rays(
            &mut t,
            &bundle,
            log_kappa,
            SHADING_CUTOFF,
            &mut |t, pos| geometry_sdf(t, &fields.geometry, bind, pos),
            &mut |t, pos, wo| {
                let g = geometry_query(t, &fields.geometry, bind, pos)?;
                let m = material_query(t, &fields.material, bind, pos)?;
                let sh = shade(t, &m, g.normal, wo, cfg.quadrature, &mut |t, dirs| {
                    light_query(t, &fields.light, bind, dirs)
                })?;
                Ok(ShadedSamples {
                    color: sh.radiance,
                    invalid: g.invalid,
                })
            },
        )?
    };

    let gt = t.leaf_mat(bundle.gt_colors.clone());
    let photometric = photometric_loss(&mut t, out.color, gt)?;
    let mask = mask_loss(&mut t, out.opacity, &bundle.gt_masks)?;

    // Surface points from this batch feed the geometric and material priors.
    let hits = surface_points(&t, &out, &bundle);
    let surf: Vec<Vec3> = hits.iter().flatten().map(|h| h.position).collect();

    let mut eik_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, iter, STREAM_EIKONAL));
    let eik_points = eikonal_sample_points(
        &surf,
        cfg.eikonal_half_extent,
        cfg.eikonal_points,
        &mut eik_rng,
    );
    let eik_in = t.leaf_mat(eik_points);
    let eik_geo = geometry_query(&mut t, &fields.geometry, &bind, eik_in)?;
    let eik_norms = t.norm_rows(eik_geo.gradient)?;
    let eikonal = eikonal_loss(&mut t, eik_norms)?;

    let (material_smoothness, metallic_sparsity) = if surf.is_empty() {
        (t.leaf_scalar(0.0), t.leaf_scalar(0.0))
    } else {
        let mut pts = Array2::zeros((surf.len(), 3));
        for (i, p) in surf.iter().enumerate() {
            for c in 0..3 {
                pts[[i, c]] = p[c];
            }
        }
        let surf_in = t.leaf_mat(pts.clone());
        let surf_geo = geometry_query(&mut t, &fields.geometry, &bind, surf_in)?;
        let normals = {
            let nd = t.data(surf_geo.normal);
            let mut n = Array2::zeros((surf.len(), 3));
            for i in 0..surf.len() {
                for c in 0..3 {
                    n[[i, c]] = nd[[i, c]];
                }
            }
            n
        };
        let mut sm_rng =
            ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, iter, STREAM_SMOOTHNESS));
        let perturbed = tangential_offsets(&pts, &normals, cfg.smoothness_eps, &mut sm_rng);
        let at = material_query(&mut t, &fields.material, &bind, surf_in)?;
        let pert_in = t.leaf_mat(perturbed);
        let pert = material_query(&mut t, &fields.material, &bind, pert_in)?;
        (
            material_smoothness_loss(&mut t, &at, &pert)?,
            metallic_sparsity_loss(&mut t, at.metallic)?,
        )
    };

    let (light_intensity, light_smoothness) =
        light_regularization(&mut t, cfg.light_reg_directions, &mut |t, dirs| {
            light_query(t, &fields.light, &bind, dirs)
        })?;

    let terms = LossTerms {
        photometric,
        eikonal,
        mask,
        material_smoothness,
        metallic_sparsity,
        light_intensity,
        light_smoothness,
    };
    let (total, breakdown) = total_loss(&mut t, &terms, &cfg.weights)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite {
            context: format!("total loss at iteration {iter}"),
        });
    }

    let table = t.backward(total)?;
    let mut grads: IndexMap<String, ArrayD<f64>> = IndexMap::new();
    for (name, node) in &bind.nodes {
        if let Some(g) = table.get(*node) {
            grads.insert(name.clone(), g.clone());
        }
    }
    Ok((breakdown, grads))
}

/// Run one optimization step and return the loss breakdown.
pub fn train_iteration(
    cfg: &TrainingConfig,
    ds: &SceneDataset,
    state: &mut TrainState,
) -> Result<LossBreakdown> {
    let iter = state.iteration;
    let (breakdown, grads) = iteration_losses(cfg, ds, state, iter)?;
    adam_step(
        &mut state.store,
        &grads,
        &mut state.adam,
        lr_schedule(iter, cfg),
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
    )?;
    state.iteration += 1;
    Ok(breakdown)
}

/// Current density sharpness `kappa = exp(log_kappa)`.
pub fn current_kappa(state: &TrainState) -> f64 {
    let lk = state.store.get(LOG_KAPPA).expect("log_kappa present");
    lk[[0]].exp()
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    iteration: usize,
    adam_step: u64,
    config_hash: u64,
    config: TrainingConfig,
}

/// FNV-1a over the canonical JSON serialization of the config.
pub fn config_hash(cfg: &TrainingConfig) -> u64 {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

fn write_named_array<W: Write>(w: &mut W, name: &str, data: &ArrayD<f64>) -> Result<()> {
    w.write_u64::<LittleEndian>(name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    w.write_u64::<LittleEndian>(data.ndim() as u64)?;
    for d in data.shape() {
        w.write_u64::<LittleEndian>(*d as u64)?;
    }
    for v in data.iter() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_named_array<R: Read>(r: &mut R) -> Result<(String, ArrayD<f64>)> {
    let name_len = r.read_u64::<LittleEndian>()? as usize;
    if name_len > 1 << 20 {
        return Err(Error::Checkpoint("implausible array name length".into()));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Checkpoint("array name is not valid UTF-8".into()))?;
    let ndim = r.read_u64::<LittleEndian>()? as usize;
    if ndim > 8 {
        return Err(Error::Checkpoint(format!(
            "array `{name}` has implausible rank {ndim}"
        )));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut len = 1usize;
    for _ in 0..ndim {
        let d = r.read_u64::<LittleEndian>()? as usize;
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::Checkpoint(format!("array `{name}` dimensions overflow")))?;
        dims.push(d);
    }
    if len > 1 << 28 {
        return Err(Error::Checkpoint(format!(
            "array `{name}` is implausibly large ({len} elements)"
        )));
    }
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        values.push(r.read_f64::<LittleEndian>()?);
    }
    let arr = ArrayD::from_shape_vec(IxDyn(&dims), values)
        .map_err(|e| Error::Checkpoint(format!("array `{name}`: {e}")))?;
    Ok((name, arr))
}

/// Atomically write a checkpoint: parameters, optimizer moments, iteration
/// cursor and config, as named little-endian f64 arrays behind a versioned
/// header.
pub fn save_checkpoint(path: &Path, cfg: &TrainingConfig, state: &TrainState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC)?;
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            iteration: state.iteration,
            adam_step: state.adam.step,
            config_hash: config_hash(cfg),
            config: cfg.clone(),
        };
        let meta_bytes = serde_json::to_vec(&meta)?;
        w.write_u64::<LittleEndian>(meta_bytes.len() as u64)?;
        w.write_all(&meta_bytes)?;
        let count = state.store.entries.len() * 3;
        w.write_u64::<LittleEndian>(count as u64)?;
        for (name, data) in &state.store.entries {
            write_named_array(&mut w, name, data)?;
        }
        for (name, data) in &state.adam.m {
            write_named_array(&mut w, &format!("adam.m.{name}"), data)?;
        }
        for (name, data) in &state.adam.v {
            write_named_array(&mut w, &format!("adam.v.{name}"), data)?;
        }
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// A loaded checkpoint, not yet turned into a training state.
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub config_hash: u64,
    pub iteration: usize,
    pub state: TrainState,
}

/// Read a checkpoint archive back. Fails on magic/version mismatch or any
/// truncation without applying partial state.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(
            "bad magic: not a checkpoint archive".into(),
        ));
    }
    let meta_len = r.read_u64::<LittleEndian>()? as usize;
    if meta_len > 1 << 24 {
        return Err(Error::Checkpoint("implausible metadata length".into()));
    }
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)
        .map_err(|_| Error::Checkpoint("truncated metadata block".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("metadata does not parse: {e}")))?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {})",
            meta.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    let count = r.read_u64::<LittleEndian>()? as usize;
    if count > 1 << 16 {
        return Err(Error::Checkpoint("implausible array count".into()));
    }
    let mut store = ParamStore::default();
    let mut m = IndexMap::new();
    let mut v = IndexMap::new();
    for _ in 0..count {
        let (name, arr) =
            read_named_array(&mut r).map_err(|e| match e {
                Error::Io(_) => Error::Checkpoint("truncated array data".into()),
                other => other,
            })?;
        if let Some(rest) = name.strip_prefix("adam.m.") {
            m.insert(rest.to_string(), arr);
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            v.insert(rest.to_string(), arr);
        } else {
            store.insert(name, arr);
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after archive".into()));
    }
    for name in store.entries.keys() {
        if !m.contains_key(name) || !v.contains_key(name) {
            return Err(Error::Checkpoint(format!(
                "missing optimizer moments for `{name}`"
            )));
        }
    }
    if store.get(LOG_KAPPA).is_none() {
        return Err(Error::Checkpoint("missing log_kappa parameter".into()));
    }
    let fields = Fields::from_config(&meta.config.fields);
    Ok(Checkpoint {
        config_hash: meta.config_hash,
        iteration: meta.iteration,
        state: TrainState {
            fields,
            store,
            adam: AdamState {
                m,
                v,
                step: meta.adam_step,
            },
            iteration: meta.iteration,
        },
        config: meta.config,
    })
}

// ---------------------------------------------------------------------------
// Training loop driver
// ---------------------------------------------------------------------------

/// Artifact paths produced by a training run.
pub struct TrainArtifacts {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

pub const LOG_HEADER: &str = "iteration,photometric,eikonal,mask,material_smoothness,\
metallic_sparsity,light_intensity,light_smoothness,total,lr,kappa";

fn log_row(iter: usize, b: &LossBreakdown, lr: f64, kappa: f64) -> String {
    format!(
        "{iter},{},{},{},{},{},{},{},{},{lr},{kappa}",
        b.photometric,
        b.eikonal,
        b.mask,
        b.material_smoothness,
        b.metallic_sparsity,
        b.light_intensity,
        b.light_smoothness,
        b.total
    )
}

/// Run (or resume) training to `cfg.iterations`, writing `checkpoint.bin` and
/// `train_log.csv` under `out_dir`. On resume the checkpoint config must hash
/// to the same value as `cfg` unless `force` is set. A non-finite loss aborts
/// with the last on-disk checkpoint retained.
pub fn train(
    cfg: &TrainingConfig,
    ds: &SceneDataset,
    out_dir: &Path,
    resume_from: Option<&Path>,
    force: bool,
) -> Result<(TrainState, TrainArtifacts, Vec<LossBreakdown>)> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let checkpoint_path = out_dir.join("checkpoint.bin");
    let log_path = out_dir.join("train_log.csv");

    let mut state = match resume_from {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config_hash != config_hash(cfg) {
                if !force {
                    return Err(Error::Checkpoint(
                        "checkpoint was written under a different config; \
                         pass force to resume anyway"
                            .into(),
                    ));
                }
                eprintln!(
                    "warning: resuming from a checkpoint with a different config hash"
                );
            }
            ck.state
        }
        None => init_train_state(cfg)?,
    };

    let mut log = {
        let fresh = state.iteration == 0 || !log_path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?;
        let mut w = BufWriter::new(file);
        if fresh && w.get_ref().metadata()?.len() == 0 {
            writeln!(w, "{LOG_HEADER}")?;
        }
        w
    };

    let mut history = Vec::new();
    while state.iteration < cfg.iterations {
        let iter = state.iteration;
        let lr = lr_schedule(iter, cfg);
        let breakdown = train_iteration(cfg, ds, &mut state)?;
        if iter % cfg.log_interval == 0 || iter + 1 == cfg.iterations {
            writeln!(log, "{}", log_row(iter, &breakdown, lr, current_kappa(&state)))?;
            log.flush()?;
        }
        if (iter + 1) % cfg.checkpoint_interval == 0 || iter + 1 == cfg.iterations {
            save_checkpoint(&checkpoint_path, cfg, &state)?;
        }
        history.push(breakdown);
    }
    Ok((
        state,
        TrainArtifacts {
            checkpoint_path,
            log_path,
        },
        history,
    ))
}
