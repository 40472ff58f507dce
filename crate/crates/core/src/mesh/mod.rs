//! Marching Cubes extraction of the SDF zero level set and baking of
//! per-vertex normals and PBR attributes, plus OBJ/PLY export.

mod tables;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::camera::{vcross, vnorm, vsub, Vec3};
use crate::error::{Error, Result};
use tables::{CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRIANGLE_TABLE};

/// Indexed triangle mesh with optional per-vertex normals and PBR attributes
/// (albedo RGB, roughness, metallic).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    /// Unit normals, one per vertex; empty until baked.
    pub normals: Vec<[f64; 3]>,
    /// Albedo RGB, roughness, metallic per vertex; empty until baked.
    pub pbr: Vec<[f64; 5]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty() || self.faces.is_empty()
    }

    /// Structural checks: indices in range, no degenerate faces, unit normals
    /// and in-range PBR values where present.
    pub fn validate(&self) -> Result<()> {
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                if v >= self.vertices.len() {
                    return Err(Error::Mesh(format!(
                        "face {fi} references vertex {v} out of {}",
                        self.vertices.len()
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Mesh(format!("face {fi} is degenerate: {f:?}")));
            }
        }
        if !self.normals.is_empty() {
            if self.normals.len() != self.vertices.len() {
                return Err(Error::Mesh("normal count != vertex count".into()));
            }
            for (i, n) in self.normals.iter().enumerate() {
                if (vnorm(*n) - 1.0).abs() > 1e-6 {
                    return Err(Error::Mesh(format!(
                        "normal {i} is not unit length ({})",
                        vnorm(*n)
                    )));
                }
            }
        }
        if !self.pbr.is_empty() {
            if self.pbr.len() != self.vertices.len() {
                return Err(Error::Mesh("PBR attribute count != vertex count".into()));
            }
            for (i, p) in self.pbr.iter().enumerate() {
                let ok = p[0..3].iter().all(|a| (0.0..=1.0).contains(a))
                    && (0.01..=1.0).contains(&p[3])
                    && (0.0..=1.0).contains(&p[4]);
                if !ok {
                    return Err(Error::Mesh(format!(
                        "PBR attributes of vertex {i} out of range: {p:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// V - E + F over the unique undirected edges.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::HashSet::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.faces.len() as i64
    }
}

/// Evaluate a scalar field over a chunked list of points. The callback gets an
/// (m, 3) matrix and returns m values; chunking bounds the caller's per-call
/// working set (a fresh autodiff tape per chunk, for network fields).
pub type FieldEval<'a> = &'a mut dyn FnMut(&Array2<f64>) -> Result<Vec<f64>>;

const EVAL_CHUNK: usize = 4096;

fn eval_chunked(f: FieldEval, points: &[Vec3]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(EVAL_CHUNK) {
        let mut m = Array2::zeros((chunk.len(), 3));
        for (i, p) in chunk.iter().enumerate() {
            for c in 0..3 {
                m[[i, c]] = p[c];
            }
        }
        let vals = f(&m)?;
        if vals.len() != chunk.len() {
            return Err(Error::Mesh(format!(
                "field evaluator returned {} values for {} points",
                vals.len(),
                chunk.len()
            )));
        }
        out.extend(vals);
    }
    Ok(out)
}

/// Axis-aligned extraction bounds.
#[derive(Debug, Clone, Copy)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn cube(half_extent: f64) -> Self {
        Self {
            min: [-half_extent; 3],
            max: [half_extent; 3],
        }
    }
}

/// Standard 256-case Marching Cubes with linear edge interpolation, vertices
/// deduplicated per grid edge. `resolution` is the number of cells per axis.
/// A field with no sign change inside the bounds yields an empty mesh (check
/// `is_empty`).
pub fn marching_cubes(
    sdf: FieldEval,
    bounds: Bounds,
    resolution: usize,
) -> Result<TriangleMesh> {
    if resolution < 8 {
        return Err(Error::InvalidArgument(format!(
            "marching cubes resolution must be >= 8, got {resolution}"
        )));
    }
    for c in 0..3 {
        if !(bounds.max[c] > bounds.min[c]) {
            return Err(Error::InvalidArgument(
                "marching cubes bounds must have positive extent".into(),
            ));
        }
    }
    let r = resolution;
    let n = r + 1;
    let step: Vec3 = [
        (bounds.max[0] - bounds.min[0]) / r as f64,
        (bounds.max[1] - bounds.min[1]) / r as f64,
        (bounds.max[2] - bounds.min[2]) / r as f64,
    ];
    let grid_point = |i: usize, j: usize, k: usize| -> Vec3 {
        [
            bounds.min[0] + i as f64 * step[0],
            bounds.min[1] + j as f64 * step[1],
            bounds.min[2] + k as f64 * step[2],
        ]
    };

    // One pass over the full grid, cached.
    let mut points = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                points.push(grid_point(i, j, k));
            }
        }
    }
    let values = eval_chunked(sdf, &points)?;
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("SDF value at grid point {bad}"),
        });
    }
    let at = |i: usize, j: usize, k: usize| values[(k * n + j) * n + i];

    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    // Global edge key: (min corner grid index, axis).
    let mut edge_vertex: HashMap<(usize, usize, usize, u8), usize> = HashMap::new();

    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                let mut cube_index = 0usize;
                let mut corner_vals = [0.0; 8];
                for (c, (dx, dy, dz)) in CORNER_OFFSETS.iter().enumerate() {
                    let v = at(i + dx, j + dy, k + dz);
                    corner_vals[c] = v;
                    if v < 0.0 {
                        cube_index |= 1 << c;
                    }
                }
                if EDGE_TABLE[cube_index] == 0 {
                    continue;
                }
                let mut edge_to_vertex = [usize::MAX; 12];
                for e in 0..12 {
                    if EDGE_TABLE[cube_index] & (1 << e) == 0 {
                        continue;
                    }
                    let (ca, cb) = EDGE_CORNERS[e];
                    let (ax, ay, az) = CORNER_OFFSETS[ca];
                    let (bx, by, bz) = CORNER_OFFSETS[cb];
                    let ga = (i + ax, j + ay, k + az);
                    let gb = (i + bx, j + by, k + bz);
                    let (lo, hi) = if ga <= gb { (ga, gb) } else { (gb, ga) };
                    let axis = if lo.0 != hi.0 {
                        0u8
                    } else if lo.1 != hi.1 {
                        1
                    } else {
                        2
                    };
                    let key = (lo.0, lo.1, lo.2, axis);
                    let idx = *edge_vertex.entry(key).or_insert_with(|| {
                        let fa = corner_vals[ca];
                        let fb = corner_vals[cb];
                        let pa = grid_point(ga.0, ga.1, ga.2);
                        let pb = grid_point(gb.0, gb.1, gb.2);
                        let t = if (fb - fa).abs() < 1e-300 {
                            0.5
                        } else {
                            ((0.0 - fa) / (fb - fa)).clamp(0.0, 1.0)
                        };
                        let p = [
                            pa[0] + t * (pb[0] - pa[0]),
                            pa[1] + t * (pb[1] - pa[1]),
                            pa[2] + t * (pb[2] - pa[2]),
                        ];
                        vertices.push(p);
                        vertices.len() - 1
                    });
                    edge_to_vertex[e] = idx;
                }
                let tri = &TRIANGLE_TABLE[cube_index];
                let mut s = 0;
                while tri[s] >= 0 {
                    // The table's winding is inward for negative-inside SDFs;
                    // swap two indices so face normals point outward.
                    let a = edge_to_vertex[tri[s] as usize];
                    let b = edge_to_vertex[tri[s + 2] as usize];
                    let c = edge_to_vertex[tri[s + 1] as usize];
                    // Edge-deduplicated vertices can coincide; drop the sliver.
                    if a != b && b != c && a != c {
                        faces.push([a, b, c]);
                    }
                    s += 3;
                }
            }
        }
    }

    Ok(TriangleMesh {
        vertices,
        faces,
        normals: Vec::new(),
        pbr: Vec::new(),
    })
}

/// Area-weighted face-normal accumulation, as the fallback for vertices where
/// the field gradient is degenerate.
pub fn area_weighted_vertex_normals(mesh: &TriangleMesh) -> Vec<[f64; 3]> {
    let mut acc = vec![[0.0f64; 3]; mesh.vertices.len()];
    for f in &mesh.faces {
        let [a, b, c] = *f;
        let e1 = vsub(mesh.vertices[b], mesh.vertices[a]);
        let e2 = vsub(mesh.vertices[c], mesh.vertices[a]);
        let cr = vcross(e1, e2);
        for &v in f {
            for k in 0..3 {
                acc[v][k] += cr[k];
            }
        }
    }
    acc.iter()
        .map(|n| {
            let l = vnorm(*n);
            if l > 1e-12 {
                [n[0] / l, n[1] / l, n[2] / l]
            } else {
                [0.0, 0.0, 1.0]
            }
        })
        .collect()
}

/// Per-vertex normals from the geometry field and PBR attributes from the
/// material field.
///
/// `normal_fn` returns, for an (m, 3) batch of points, the (m, 3) normalized
/// field gradients plus a per-row degeneracy flag; degenerate rows fall back
/// to the area-weighted face normal. `material_fn` returns (m, 5) attribute
/// rows (albedo RGB, roughness, metallic). Returns the fallback count.
pub fn bake_attributes(
    mesh: &mut TriangleMesh,
    normal_fn: &mut dyn FnMut(&Array2<f64>) -> Result<(Array2<f64>, Vec<bool>)>,
    material_fn: &mut dyn FnMut(&Array2<f64>) -> Result<Array2<f64>>,
) -> Result<usize> {
    if mesh.is_empty() {
        return Err(Error::Mesh("cannot bake attributes on an empty mesh".into()));
    }
    let fallback_normals = area_weighted_vertex_normals(mesh);
    let mut normals = vec![[0.0f64; 3]; mesh.vertices.len()];
    let mut pbr = vec![[0.0f64; 5]; mesh.vertices.len()];
    let mut fallbacks = 0usize;
    let verts = mesh.vertices.clone();
    for (chunk_start, chunk) in verts
        .chunks(EVAL_CHUNK)
        .enumerate()
        .map(|(ci, c)| (ci * EVAL_CHUNK, c))
    {
        let mut m = Array2::zeros((chunk.len(), 3));
        for (i, p) in chunk.iter().enumerate() {
            for c in 0..3 {
                m[[i, c]] = p[c];
            }
        }
        let (n, degenerate) = normal_fn(&m)?;
        if n.nrows() != chunk.len() || degenerate.len() != chunk.len() {
            return Err(Error::Mesh("normal evaluator row count mismatch".into()));
        }
        let attrs = material_fn(&m)?;
        if attrs.nrows() != chunk.len() || attrs.ncols() != 5 {
            return Err(Error::Mesh("material evaluator shape mismatch".into()));
        }
        for i in 0..chunk.len() {
            let vi = chunk_start + i;
            if degenerate[i] {
                normals[vi] = fallback_normals[vi];
                fallbacks += 1;
            } else {
                let row = [n[[i, 0]], n[[i, 1]], n[[i, 2]]];
                let l = vnorm(row);
                if l > 1e-9 {
                    normals[vi] = [row[0] / l, row[1] / l, row[2] / l];
                } else {
                    normals[vi] = fallback_normals[vi];
                    fallbacks += 1;
                }
            }
            for c in 0..5 {
                pbr[vi][c] = attrs[[i, c]];
            }
        }
    }
    mesh.normals = normals;
    mesh.pbr = pbr;
    Ok(fallbacks)
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Sidecar CSV path for an OBJ export: same stem with extension `pbr.csv`.
pub fn obj_sidecar_path(obj_path: &Path) -> PathBuf {
    obj_path.with_extension("pbr.csv")
}

/// Write an OBJ (positions, normals, 1-based `v//vn` faces) and a sidecar CSV
/// with one row per vertex: index, albedo RGB, roughness, metallic.
pub fn export_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    if mesh.is_empty() {
        return Err(Error::Mesh("refusing to export an empty mesh".into()));
    }
    mesh.validate()?;
    if mesh.normals.is_empty() || mesh.pbr.is_empty() {
        return Err(Error::Mesh(
            "mesh must be baked (normals and PBR attributes) before export".into(),
        ));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for n in &mesh.normals {
        writeln!(w, "vn {} {} {}", n[0], n[1], n[2])?;
    }
    for f in &mesh.faces {
        writeln!(
            w,
            "f {}//{} {}//{} {}//{}",
            f[0] + 1,
            f[0] + 1,
            f[1] + 1,
            f[1] + 1,
            f[2] + 1,
            f[2] + 1
        )?;
    }
    w.flush()?;

    let mut csv = BufWriter::new(std::fs::File::create(obj_sidecar_path(path))?);
    writeln!(csv, "vertex,albedo_r,albedo_g,albedo_b,roughness,metallic")?;
    for (i, p) in mesh.pbr.iter().enumerate() {
        writeln!(csv, "{i},{},{},{},{},{}", p[0], p[1], p[2], p[3], p[4])?;
    }
    csv.flush()?;
    Ok(())
}

/// Write a binary little-endian PLY with per-vertex properties
/// `x y z nx ny nz red green blue roughness metallic`, all 32-bit floats,
/// and uchar-counted int vertex index lists per face.
pub fn export_ply(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    if mesh.is_empty() {
        return Err(Error::Mesh("refusing to export an empty mesh".into()));
    }
    mesh.validate()?;
    if mesh.normals.is_empty() || mesh.pbr.is_empty() {
        return Err(Error::Mesh(
            "mesh must be baked (normals and PBR attributes) before export".into(),
        ));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        mesh.vertices.len()
    )?;
    for prop in [
        "x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "roughness", "metallic",
    ] {
        writeln!(w, "property float {prop}")?;
    }
    write!(
        w,
        "element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.faces.len()
    )?;
    for i in 0..mesh.vertices.len() {
        let v = mesh.vertices[i];
        let n = mesh.normals[i];
        let p = mesh.pbr[i];
        for val in [
            v[0], v[1], v[2], n[0], n[1], n[2], p[0], p[1], p[2], p[3], p[4],
        ] {
            w.write_f32::<LittleEndian>(val as f32)?;
        }
    }
    for f in &mesh.faces {
        w.write_u8(3)?;
        for &v in f {
            w.write_i32::<LittleEndian>(v as i32)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read back a PLY written by [`export_ply`]. Only that exact layout is
/// supported.
pub fn import_ply(path: &Path) -> Result<TriangleMesh> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Mesh("PLY header ended prematurely".into()));
        }
        header.push_str(&line);
        if line.trim_end() == "end_header" {
            break;
        }
        if header.len() > 1 << 16 {
            return Err(Error::Mesh("implausibly long PLY header".into()));
        }
    }
    if !header.starts_with("ply\nformat binary_little_endian 1.0\n") {
        return Err(Error::Mesh("not a binary little-endian PLY".into()));
    }
    let grab = |tag: &str| -> Result<usize> {
        header
            .lines()
            .find_map(|l| l.strip_prefix(tag))
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Mesh(format!("missing `{tag}` in PLY header")))
    };
    let nv = grab("element vertex ")?;
    let nf = grab("element face ")?;
    let mut mesh = TriangleMesh::default();
    for _ in 0..nv {
        let mut row = [0f64; 11];
        for v in row.iter_mut() {
            *v = r.read_f32::<LittleEndian>()? as f64;
        }
        mesh.vertices.push([row[0], row[1], row[2]]);
        mesh.normals.push([row[3], row[4], row[5]]);
        mesh.pbr.push([row[6], row[7], row[8], row[9], row[10]]);
    }
    for _ in 0..nf {
        let cnt = r.read_u8()?;
        if cnt != 3 {
            return Err(Error::Mesh(format!("non-triangle face (count {cnt})")));
        }
        let mut f = [0usize; 3];
        for v in f.iter_mut() {
            let idx = r.read_i32::<LittleEndian>()?;
            if idx < 0 {
                return Err(Error::Mesh("negative vertex index".into()));
            }
            *v = idx as usize;
        }
        mesh.faces.push(f);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Mesh("trailing bytes after PLY data".into()));
    }
    Ok(mesh)
}
