//! The three neural fields: geometry (SDF), material (PBR parameters) and
//! environment light, plus positional encoding and initialization.
//!
//! Networks are plain MLPs whose parameters live in a [`ParamStore`] keyed by
//! name; a forward pass leafs the needed arrays into a [`Tape`] so gradients
//! flow to the store through the returned binding.

use indexmap::IndexMap;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};

/// Sinusoidal positional encoding. Output order per coordinate block:
/// `[x (if include_input), sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)]`
/// where each block spans all input coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PositionalEncodingConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl PositionalEncodingConfig {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        let base = if self.include_input { input_dim } else { 0 };
        base + input_dim * 2 * self.num_frequencies
    }

    /// Encode a batch of points (n, d) -> (n, output_dim).
    pub fn encode(&self, t: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut parts = Vec::new();
        if self.include_input {
            parts.push(x);
        }
        for l in 0..self.num_frequencies {
            let freq = (1u64 << l) as f64 * std::f64::consts::PI;
            let sx = t.scale(x, freq);
            parts.push(t.sin(sx));
            parts.push(t.cos(sx));
        }
        if parts.is_empty() {
            return Ok(x);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        t.concat(&parts, 1)
    }

    /// Encode and also build, as graph nodes, the directional derivatives of
    /// the encoding w.r.t. each input coordinate: `d enc / d x_k` for
    /// `k = 0..d`. Each derivative has the encoding's shape and is nonzero
    /// only in the slots belonging to coordinate `k`.
    pub fn encode_with_jacobian(
        &self,
        t: &mut Tape,
        x: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let shape = t.shape(x).to_vec();
        let (n, d) = (shape[0], shape[1]);
        let enc = self.encode(t, x)?;

        // Constant per-coordinate masks (n, d) with ones in column k.
        let mut masks = Vec::with_capacity(d);
        for k in 0..d {
            let mut m = Array2::<f64>::zeros((n, d));
            m.column_mut(k).fill(1.0);
            masks.push(t.leaf_mat(m));
        }

        let mut jac = Vec::with_capacity(d);
        for k in 0..d {
            let mut parts = Vec::new();
            if self.include_input {
                parts.push(masks[k]);
            }
            for l in 0..self.num_frequencies {
                let freq = (1u64 << l) as f64 * std::f64::consts::PI;
                let sx = t.scale(x, freq);
                // d sin(fx)/dx_k = f cos(fx) masked; d cos(fx)/dx_k = -f sin(fx) masked
                let c = t.cos(sx);
                let cf = t.scale(c, freq);
                parts.push(t.mul(cf, masks[k])?);
                let s = t.sin(sx);
                let sf = t.scale(s, -freq);
                parts.push(t.mul(sf, masks[k])?);
            }
            let dk = if parts.len() == 1 {
                parts[0]
            } else {
                t.concat(&parts, 1)?
            };
            jac.push(dk);
        }
        Ok((enc, jac))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub enum Activation {
    /// `softplus(beta x)/beta`; smooth ReLU used inside the geometry MLP.
    Softplus { beta: f64 },
    Relu,
}

/// Shape and wiring of one field MLP. `num_layers` counts linear layers; the
/// last one produces `out_dim` raw head values. `skip_at` feeds the encoded
/// input again into that layer's input.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub num_layers: usize,
    pub out_dim: usize,
    pub skip_at: Option<usize>,
    pub activation: Activation,
    pub encoding: PositionalEncodingConfig,
}

/// Named parameter arrays in a stable iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub entries: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, data: ArrayD<f64>) {
        self.entries.insert(name.into(), data);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name)
    }
}

/// Tape ids of the parameters a forward pass leafed in, so callers can map
/// gradient-table entries back to store names.
#[derive(Debug, Clone, Default)]
pub struct ParamBinding {
    pub nodes: IndexMap<String, NodeId>,
}

impl ParamBinding {
    /// Leaf every parameter with the given prefix into the tape.
    pub fn bind(t: &mut Tape, store: &ParamStore, prefixes: &[&str]) -> Self {
        let mut nodes = IndexMap::new();
        for (name, data) in &store.entries {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                nodes.insert(name.clone(), t.leaf(data.clone()));
            }
        }
        Self { nodes }
    }

    pub fn node(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }
}

/// One of the three fields, identified by its parameter prefix
/// (`geo`, `mat`, `light`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FieldNetwork {
    pub prefix: String,
    pub cfg: MlpConfig,
}

impl FieldNetwork {
    fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{}", self.prefix, layer)
    }
    fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{}", self.prefix, layer)
    }

    /// Input width of linear layer `l`.
    fn layer_in_dim(&self, l: usize) -> usize {
        let enc_dim = self.cfg.encoding.output_dim(self.cfg.input_dim);
        if l == 0 {
            enc_dim
        } else if self.cfg.skip_at == Some(l) {
            self.cfg.hidden_width + enc_dim
        } else {
            self.cfg.hidden_width
        }
    }

    fn layer_out_dim(&self, l: usize) -> usize {
        if l + 1 == self.cfg.num_layers {
            self.cfg.out_dim
        } else {
            self.cfg.hidden_width
        }
    }

    fn apply_activation(&self, t: &mut Tape, pre: NodeId) -> NodeId {
        match self.cfg.activation {
            Activation::Softplus { beta } => t.softplus(pre, beta),
            Activation::Relu => t.max_const(pre, 0.0),
        }
    }

    /// Raw head values (n, out_dim) for a batch of encoded inputs.
    pub fn forward(&self, t: &mut Tape, b: &ParamBinding, x: NodeId) -> Result<NodeId> {
        let enc = self.cfg.encoding.encode(t, x)?;
        let mut h = enc;
        for l in 0..self.cfg.num_layers {
            let input = if self.cfg.skip_at == Some(l) && l > 0 {
                t.concat(&[h, enc], 1)?
            } else {
                h
            };
            let w = b.node(&self.weight_name(l));
            let bias = b.node(&self.bias_name(l));
            let pre = t.matmul(input, w)?;
            let pre = t.add(pre, bias)?;
            h = if l + 1 == self.cfg.num_layers {
                pre
            } else {
                self.apply_activation(t, pre)
            };
        }
        Ok(h)
    }

    /// Forward pass that additionally propagates, as graph nodes, the exact
    /// derivative of every raw output w.r.t. the input coordinates. Returns
    /// `(raw (n, out), input_grads)` where `input_grads[k]` is the (n, out)
    /// derivative w.r.t. input coordinate `k`.
    ///
    /// This keeps the gradient inside the first-order graph, so losses built
    /// on it (normals, Eikonal) backpropagate to the parameters without any
    /// second-order machinery.
    pub fn forward_with_input_grad(
        &self,
        t: &mut Tape,
        b: &ParamBinding,
        x: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let d = self.cfg.input_dim;
        let (enc, enc_jac) = self.cfg.encoding.encode_with_jacobian(t, x)?;
        let mut h = enc;
        let mut dh: Vec<NodeId> = enc_jac.clone();
        for l in 0..self.cfg.num_layers {
            let (input, dinput) = if self.cfg.skip_at == Some(l) && l > 0 {
                let cat = t.concat(&[h, enc], 1)?;
                let mut dcat = Vec::with_capacity(d);
                for k in 0..d {
                    dcat.push(t.concat(&[dh[k], enc_jac[k]], 1)?);
                }
                (cat, dcat)
            } else {
                (h, dh.clone())
            };
            let w = b.node(&self.weight_name(l));
            let bias = b.node(&self.bias_name(l));
            let pre = t.matmul(input, w)?;
            let pre = t.add(pre, bias)?;
            let mut dpre = Vec::with_capacity(d);
            for k in 0..d {
                dpre.push(t.matmul(dinput[k], w)?);
            }
            if l + 1 == self.cfg.num_layers {
                h = pre;
                dh = dpre;
            } else {
                h = self.apply_activation(t, pre);
                // act'(pre) elementwise
                let dact = match self.cfg.activation {
                    Activation::Softplus { beta } => {
                        let sp = t.scale(pre, beta);
                        t.sigmoid(sp)
                    }
                    Activation::Relu => {
                        // Step function: 1 where pre >= 0. Realized as the
                        // gradient-free value of max(pre, 0) / pre is unsafe at
                        // zero, so use sigmoid of a huge slope is also bad; we
                        // instead differentiate max_const analytically below.
                        let stepped = t.data(pre).mapv(|v| if v >= 0.0 { 1.0 } else { 0.0 });
                        t.leaf(stepped)
                    }
                };
                dh = Vec::with_capacity(d);
                for k in 0..d {
                    dh.push(t.mul(dpre[k], dact)?);
                }
            }
        }
        Ok((h, dh))
    }
}

pub fn geometry_network_config(hidden: usize, layers: usize) -> MlpConfig {
    MlpConfig {
        input_dim: 3,
        hidden_width: hidden,
        num_layers: layers,
        out_dim: 1,
        skip_at: Some(layers / 2),
        activation: Activation::Softplus { beta: 100.0 },
        encoding: PositionalEncodingConfig {
            num_frequencies: 6,
            include_input: true,
        },
    }
}

pub fn material_network_config(hidden: usize, layers: usize) -> MlpConfig {
    MlpConfig {
        input_dim: 3,
        hidden_width: hidden,
        num_layers: layers,
        out_dim: 5,
        skip_at: Some(layers / 2),
        activation: Activation::Relu,
        encoding: PositionalEncodingConfig {
            num_frequencies: 4,
            include_input: true,
        },
    }
}

pub fn light_network_config(hidden: usize, layers: usize) -> MlpConfig {
    MlpConfig {
        input_dim: 3,
        hidden_width: hidden,
        num_layers: layers,
        out_dim: 3,
        skip_at: None,
        activation: Activation::Relu,
        encoding: PositionalEncodingConfig {
            num_frequencies: 2,
            include_input: true,
        },
    }
}

/// Sizes of the three field networks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub geometry_hidden: usize,
    pub geometry_layers: usize,
    pub material_hidden: usize,
    pub material_layers: usize,
    pub light_hidden: usize,
    pub light_layers: usize,
    /// Radius of the initial SDF sphere.
    pub init_radius: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            geometry_hidden: 256,
            geometry_layers: 8,
            material_hidden: 256,
            material_layers: 8,
            light_hidden: 128,
            light_layers: 4,
            init_radius: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fields {
    pub geometry: FieldNetwork,
    pub material: FieldNetwork,
    pub light: FieldNetwork,
}

impl Fields {
    pub fn from_config(cfg: &FieldConfig) -> Self {
        Self {
            geometry: FieldNetwork {
                prefix: "geo".into(),
                cfg: geometry_network_config(cfg.geometry_hidden, cfg.geometry_layers),
            },
            material: FieldNetwork {
                prefix: "mat".into(),
                cfg: material_network_config(cfg.material_hidden, cfg.material_layers),
            },
            light: FieldNetwork {
                prefix: "light".into(),
                cfg: light_network_config(cfg.light_hidden, cfg.light_layers),
            },
        }
    }
}

pub(crate) fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per normal, second discarded.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Geometric (sphere) initialization of the SDF net so that
/// `f_geo(x) ~ |x| - r0` at init. Hidden weights are zero-mean with
/// `sqrt(2/fan_out)` scale, the final layer is biased to `-r0`, and all
/// encoding columns beyond the raw coordinates start at zero.
fn init_geometry(store: &mut ParamStore, net: &FieldNetwork, r0: f64, rng: &mut ChaCha8Rng) {
    let cfg = &net.cfg;
    for l in 0..cfg.num_layers {
        let (din, dout) = (net.layer_in_dim(l), net.layer_out_dim(l));
        let mut w = Array2::<f64>::zeros((din, dout));
        let mut bvec = ArrayD::zeros(IxDyn(&[dout]));
        if l + 1 == cfg.num_layers {
            let mu = (std::f64::consts::PI / din as f64).sqrt();
            for i in 0..din {
                for j in 0..dout {
                    w[[i, j]] = mu + 1e-4 * normal_sample(rng);
                }
            }
            bvec.fill(-r0);
        } else {
            let std = (2.0 / dout as f64).sqrt();
            for i in 0..din {
                for j in 0..dout {
                    w[[i, j]] = std * normal_sample(rng);
                }
            }
            // Zero the columns fed by the sinusoidal part of the encoding so
            // the net starts out as a function of the raw coordinates only.
            if l == 0 {
                for i in cfg.input_dim..din {
                    for j in 0..dout {
                        w[[i, j]] = 0.0;
                    }
                }
            } else if cfg.skip_at == Some(l) {
                let skip_start = cfg.hidden_width + cfg.input_dim;
                for i in skip_start..din {
                    for j in 0..dout {
                        w[[i, j]] = 0.0;
                    }
                }
            }
        }
        store.insert(net.weight_name(l), w.into_dyn());
        store.insert(net.bias_name(l), bvec);
    }

    // Finite widths leave the random init with a gradient norm systematically
    // off 1. Probe the field at fixed unit-ball points and rescale the head so
    // the mean gradient norm is 1, then re-center the bias to f(0) = -r0.
    let probe = {
        let mut m = Array2::<f64>::zeros((128, 3));
        let mut i = 0;
        while i < 128 {
            let p = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                for k in 0..3 {
                    m[[i, k]] = p[k];
                }
                i += 1;
            }
        }
        m
    };
    let last = cfg.num_layers - 1;
    for _ in 0..2 {
        let mut t = Tape::new();
        let b = ParamBinding::bind(&mut t, store, &[&net.prefix]);
        let x = t.leaf_mat(probe.clone());
        let (_, dcols) = net
            .forward_with_input_grad(&mut t, &b, x)
            .expect("init probe");
        let grad = t.concat(&dcols, 1).expect("init probe");
        let norms = t.norm_rows(grad).expect("init probe");
        let mean: f64 = t.data(norms).iter().sum::<f64>() / 128.0;
        if mean > 1e-6 {
            store
                .entries
                .get_mut(&net.weight_name(last))
                .unwrap()
                .mapv_inplace(|v| v / mean);
            store
                .entries
                .get_mut(&net.bias_name(last))
                .unwrap()
                .mapv_inplace(|v| v / mean);
        }
    }
    // Pin f(0) = -r0 exactly.
    let f0 = {
        let mut t = Tape::new();
        let b = ParamBinding::bind(&mut t, store, &[&net.prefix]);
        let x = t.leaf_mat(Array2::<f64>::zeros((1, 3)));
        let s = net.forward(&mut t, &b, x).expect("init probe");
        t.data(s)[[0, 0]]
    };
    store
        .entries
        .get_mut(&net.bias_name(last))
        .unwrap()
        .mapv_inplace(|v| v - (f0 + r0));
}

/// Fan-in scaled init for material / light networks.
fn init_generic(store: &mut ParamStore, net: &FieldNetwork, rng: &mut ChaCha8Rng) {
    let cfg = &net.cfg;
    for l in 0..cfg.num_layers {
        let (din, dout) = (net.layer_in_dim(l), net.layer_out_dim(l));
        let std = (2.0 / din as f64).sqrt();
        let last = l + 1 == cfg.num_layers;
        let mut w = Array2::<f64>::zeros((din, dout));
        for i in 0..din {
            for j in 0..dout {
                // Keep the head small at init so squashed outputs start near
                // their midpoints.
                let s = if last { 0.1 * std } else { std };
                w[[i, j]] = s * normal_sample(rng);
            }
        }
        store.insert(net.weight_name(l), w.into_dyn());
        store.insert(net.bias_name(l), ArrayD::zeros(IxDyn(&[dout])));
    }
}

/// Deterministically initialize all three fields from a seed.
pub fn init_fields(seed: u64, cfg: &FieldConfig) -> (Fields, ParamStore) {
    let fields = Fields::from_config(cfg);
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_geometry(&mut store, &fields.geometry, cfg.init_radius, &mut rng);
    init_generic(&mut store, &fields.material, &mut rng);
    init_generic(&mut store, &fields.light, &mut rng);
    (fields, store)
}

/// SDF value, gradient and unit normal at a batch of points, all as graph
/// nodes. `invalid[i]` marks rows whose gradient norm fell below 1e-9; their
/// normal is unreliable and shading must skip them.
pub struct GeometrySampleNodes {
    pub sdf: NodeId,
    pub gradient: NodeId,
    pub normal: NodeId,
    pub invalid: Vec<bool>,
}

/// Query the geometry field with analytic input gradients and normals.
pub fn geometry_query(
    t: &mut Tape,
    net: &FieldNetwork,
    b: &ParamBinding,
    x: NodeId,
) -> Result<GeometrySampleNodes> {
    let (sdf, dcols) = net.forward_with_input_grad(t, b, x)?;
    let gradient = t.concat(&dcols, 1)?;
    let norm = t.norm_rows(gradient)?;
    let safe = t.max_const(norm, 1e-12);
    let ncols = t.shape(gradient)[1];
    let tiled = t.tile_col(safe, ncols)?;
    let normal = t.div(gradient, tiled)?;
    let invalid = (0..t.shape(norm)[0])
        .map(|i| t.data(norm)[[i, 0]] < 1e-9)
        .collect();
    Ok(GeometrySampleNodes {
        sdf,
        gradient,
        normal,
        invalid,
    })
}

/// SDF values only (no input gradient), for density evaluation along rays.
pub fn geometry_sdf(
    t: &mut Tape,
    net: &FieldNetwork,
    b: &ParamBinding,
    x: NodeId,
) -> Result<NodeId> {
    net.forward(t, b, x)
}

pub struct MaterialNodes {
    pub albedo: NodeId,
    pub roughness: NodeId,
    pub metallic: NodeId,
}

/// Squashed PBR parameters at a batch of points: albedo in [0,1]^3,
/// roughness in [0.01, 1], metallic in [0,1].
pub fn material_query(
    t: &mut Tape,
    net: &FieldNetwork,
    b: &ParamBinding,
    x: NodeId,
) -> Result<MaterialNodes> {
    let raw = net.forward(t, b, x)?;
    let sq = t.sigmoid(raw);
    let albedo = t.slice_cols(sq, 0, 3)?;
    let rough_raw = t.slice_cols(sq, 3, 4)?;
    let roughness = t.clamp(rough_raw, 0.01, 1.0);
    let metallic = t.slice_cols(sq, 4, 5)?;
    Ok(MaterialNodes {
        albedo,
        roughness,
        metallic,
    })
}

/// Environment radiance for a batch of unit directions, softplus-squashed so
/// it is non-negative for any parameters.
pub fn light_query(
    t: &mut Tape,
    net: &FieldNetwork,
    b: &ParamBinding,
    dirs: NodeId,
) -> Result<NodeId> {
    let data = t.data(dirs);
    for i in 0..data.shape()[0] {
        let n2: f64 = (0..3).map(|k| data[[i, k]] * data[[i, k]]).sum();
        if (n2.sqrt() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "light_query direction {i} is not unit length (norm {})",
                n2.sqrt()
            )));
        }
    }
    let raw = net.forward(t, b, dirs)?;
    Ok(t.softplus(raw, 1.0))
}
