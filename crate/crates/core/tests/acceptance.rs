//! Acceptance suite: one test per release criterion, each printing a single
//! PASS/FAIL line (visible with `--nocapture`).
//!
//! The end-to-end training criteria (7-9) run on reduced network widths and
//! batch sizes so the whole suite stays tractable on a single CPU core; the
//! quantities they assert (loss reduction, geometric accuracy, albedo
//! recovery, ablation ordering, bit-exact determinism) are size-independent.

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;

use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use matdecomp_core::autodiff::{finite_difference_check, NodeId, Tape};
use matdecomp_core::camera::{load_dataset, vdot, vnormalize, RayBundle, SceneDataset, Vec3};
use matdecomp_core::eval::{
    evaluate, ground_truth_surface_points, state_fields, trained_material_eval, EvalReport,
    EvalSettings, RenderSettings,
};
use matdecomp_core::fields::{geometry_query, init_fields, FieldConfig, MaterialNodes, ParamBinding};
use matdecomp_core::losses::{eikonal_loss, LossWeights};
use matdecomp_core::mesh::{marching_cubes, Bounds};
use matdecomp_core::metrics::{chamfer_with_seeds, psnr, ssim, PointIndex};
use matdecomp_core::oracle::{
    generate_dataset, stock_scene, AnalyticSdf, AnalyticScene, OracleRenderConfig,
};
use matdecomp_core::render::{render_rays, ShadedSamples};
use matdecomp_core::shading::{brdf_eval, build_quadrature, shade};
use matdecomp_core::trainer::{
    init_train_state, iteration_losses, train, TrainState, TrainingConfig,
};

fn criterion(n: usize, desc: &str, f: impl FnOnce()) {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(()) => println!("criterion {n}: PASS - {desc}"),
        Err(e) => {
            println!("criterion {n}: FAIL - {desc}");
            resume_unwind(e);
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn random_hemi(rng: &mut ChaCha8Rng, n: Vec3, min_cos: f64) -> Vec3 {
    loop {
        let v = random_unit(rng);
        if vdot(v, n) > min_cos {
            return v;
        }
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: autodiff vs finite differences
// ---------------------------------------------------------------------------

/// Check one tape program: `x` fills row-major (2, 3) leaves, `build` maps
/// them to any node, the check target is its sum.
fn check_program(
    name: &str,
    n_inputs: usize,
    base: &[f64],
    build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
) {
    assert_eq!(base.len(), n_inputs * 6);
    let worst = finite_difference_check(
        |x: &[f64]| {
            let mut t = Tape::new();
            let leaves: Vec<NodeId> = (0..n_inputs)
                .map(|i| {
                    let m = Array2::from_shape_vec((2, 3), x[i * 6..(i + 1) * 6].to_vec()).unwrap();
                    t.leaf_mat(m)
                })
                .collect();
            let out = build(&mut t, &leaves);
            let loss = t.sum(out);
            let grads = t.backward(loss)?;
            let mut g = Vec::with_capacity(base.len());
            for leaf in &leaves {
                match grads.get(*leaf) {
                    Some(a) => g.extend(a.iter().copied()),
                    None => g.extend(std::iter::repeat(0.0).take(6)),
                }
            }
            Ok((t.scalar_value(loss), g))
        },
        base,
        1e-5,
    )
    .unwrap();
    assert!(worst < 1e-4, "op `{name}`: max relative error {worst:.3e}");
}

fn criterion_1_body() {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let mut vals = |n: usize| -> Vec<f64> {
        (0..n * 6).map(|_| rng.random_range(0.3..1.7)).collect()
    };

    let one = vals(1);
    let two = vals(2);
    check_program("add", 2, &two, |t, l| t.add(l[0], l[1]).unwrap());
    check_program("sub", 2, &two, |t, l| t.sub(l[0], l[1]).unwrap());
    check_program("mul", 2, &two, |t, l| t.mul(l[0], l[1]).unwrap());
    check_program("div", 2, &two, |t, l| t.div(l[0], l[1]).unwrap());
    check_program("neg", 1, &one, |t, l| t.neg(l[0]));
    check_program("abs", 1, &one, |t, l| t.abs(l[0]));
    check_program("square", 1, &one, |t, l| t.square(l[0]));
    check_program("sqrt", 1, &one, |t, l| t.sqrt(l[0]).unwrap());
    check_program("exp", 1, &one, |t, l| t.exp(l[0]));
    check_program("log", 1, &one, |t, l| t.log(l[0]).unwrap());
    check_program("sin", 1, &one, |t, l| t.sin(l[0]));
    check_program("cos", 1, &one, |t, l| t.cos(l[0]));
    check_program("sigmoid", 1, &one, |t, l| t.sigmoid(l[0]));
    check_program("softplus", 1, &one, |t, l| t.softplus(l[0], 1.5));
    check_program("max_const (interior)", 1, &one, |t, l| t.max_const(l[0], 0.1));
    check_program("clamp (interior)", 1, &one, |t, l| t.clamp(l[0], 0.0, 5.0));
    check_program("scale", 1, &one, |t, l| t.scale(l[0], -2.5));
    check_program("add_const", 1, &one, |t, l| t.add_const(l[0], 3.0));
    check_program("sum", 1, &one, |t, l| t.sum(l[0]));
    check_program("mean", 1, &one, |t, l| t.mean(l[0]));
    check_program("dot_rows", 2, &two, |t, l| t.dot_rows(l[0], l[1]).unwrap());
    check_program("norm_rows", 1, &one, |t, l| t.norm_rows(l[0]).unwrap());
    check_program("tile_col", 1, &one, |t, l| {
        let d = t.dot_rows(l[0], l[0]).unwrap();
        let tiled = t.tile_col(d, 3).unwrap();
        t.mul(tiled, l[0]).unwrap()
    });
    check_program("matmul", 2, &two, |t, l| {
        let bt = t.reshape(l[1], &[3, 2]).unwrap();
        t.matmul(l[0], bt).unwrap()
    });
    check_program("reshape", 1, &one, |t, l| {
        let r = t.reshape(l[0], &[6, 1]).unwrap();
        t.square(r)
    });
    check_program("slice_cols", 1, &one, |t, l| {
        let s = t.slice_cols(l[0], 1, 3).unwrap();
        t.square(s)
    });
    check_program("slice_rows", 1, &one, |t, l| {
        let s = t.slice_rows(l[0], 0, 1).unwrap();
        t.exp(s)
    });
    check_program("gather_rows", 1, &one, |t, l| {
        let g = t.gather_rows(l[0], &[1, 0, 1]).unwrap();
        t.square(g)
    });
    check_program("concat", 2, &two, |t, l| {
        let c = t.concat(&[l[0], l[1]], 0).unwrap();
        t.square(c)
    });

    // End-to-end: gradients of the full per-iteration total loss on a 4-ray
    // micro-batch, checked at a random subset of parameters.
    let dir = tempfile::tempdir().unwrap();
    let scene = stock_scene("sphere").unwrap();
    generate_dataset(&scene, 2, 16, 5, &OracleRenderConfig::default(), dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let cfg = TrainingConfig {
        iterations: 2,
        batch_rays: 4,
        samples_per_ray: 12,
        quadrature: 8,
        eikonal_points: 6,
        light_reg_directions: 16,
        fields: tiny_fields(),
        seed: 3,
        ..TrainingConfig::default()
    };
    let state = init_train_state(&cfg).unwrap();

    // Pick coordinates spread over every parameter tensor.
    let mut coords: Vec<(String, usize)> = Vec::new();
    let mut pick = ChaCha8Rng::seed_from_u64(8);
    for (name, arr) in &state.store.entries {
        coords.push((name.clone(), pick.random_range(0..arr.len())));
    }
    let base: Vec<f64> = coords
        .iter()
        .map(|(n, i)| state.store.entries[n].as_slice().unwrap()[*i])
        .collect();

    let worst = finite_difference_check(
        |x: &[f64]| {
            let mut s = TrainState {
                fields: state.fields.clone(),
                store: state.store.clone(),
                adam: state.adam.clone(),
                iteration: state.iteration,
            };
            for ((name, idx), v) in coords.iter().zip(x) {
                s.store.entries[name].as_slice_mut().unwrap()[*idx] = *v;
            }
            let (breakdown, grads) = iteration_losses(&cfg, &ds, &s, 0)?;
            let g = coords
                .iter()
                .map(|(n, i)| match grads.get(n) {
                    Some(a) => a.iter().nth(*i).copied().unwrap(),
                    None => 0.0,
                })
                .collect();
            Ok((breakdown.total, g))
        },
        &base,
        1e-5,
    )
    .unwrap();
    assert!(
        worst < 1e-3,
        "end-to-end loss gradient: max relative error {worst:.3e}"
    );
}

#[test]
fn criterion_1_autodiff_matches_finite_differences() {
    criterion(
        1,
        "analytic gradients match central differences for all ops (< 1e-4) \
         and the full training loss (< 1e-3)",
        criterion_1_body,
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: BRDF physics
// ---------------------------------------------------------------------------

fn brdf_batch(
    mats: &[([f64; 3], f64, f64)],
    ns: &[Vec3],
    wis: &[Vec3],
    wos: &[Vec3],
) -> Vec<[f64; 3]> {
    let rows = mats.len();
    let mut t = Tape::new();
    let pack = |t: &mut Tape, v: &[Vec3]| {
        t.leaf_mat(Array2::from_shape_fn((v.len(), 3), |(i, c)| v[i][c]))
    };
    let mat = MaterialNodes {
        albedo: t.leaf_mat(Array2::from_shape_fn((rows, 3), |(i, c)| mats[i].0[c])),
        roughness: t.leaf_mat(Array2::from_shape_fn((rows, 1), |(i, _)| mats[i].1)),
        metallic: t.leaf_mat(Array2::from_shape_fn((rows, 1), |(i, _)| mats[i].2)),
    };
    let n = pack(&mut t, ns);
    let wi = pack(&mut t, wis);
    let wo = pack(&mut t, wos);
    let f = brdf_eval(&mut t, &mat, n, wi, wo).unwrap();
    let d = t.data(f);
    (0..rows).map(|i| [d[[i, 0]], d[[i, 1]], d[[i, 2]]]).collect()
}

fn criterion_2_body() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mats = Vec::new();
    let (mut ns, mut wis, mut wos) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..1000 {
        let n = random_unit(&mut rng);
        ns.push(n);
        wis.push(random_hemi(&mut rng, n, 0.0));
        wos.push(random_hemi(&mut rng, n, 0.0));
        mats.push((
            [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ],
            rng.random_range(0.01..1.0),
            rng.random_range(0.0..1.0),
        ));
    }
    let fwd = brdf_batch(&mats, &ns, &wis, &wos);
    let rev = brdf_batch(&mats, &ns, &wos, &wis);
    for i in 0..1000 {
        for c in 0..3 {
            assert!(fwd[i][c] >= 0.0, "negative BRDF value at row {i}");
            assert!(
                (fwd[i][c] - rev[i][c]).abs() < 1e-10,
                "reciprocity broken at row {i}: {:?} vs {:?}",
                fwd[i],
                rev[i]
            );
        }
    }

    // White furnace through the K = 64 shading quadrature. Restricted to
    // roughness >= 0.6 so the quadrature resolves the specular lobe, and to
    // views above grazing where the diffuse/specular energy split of the
    // pinned k_d model is within its stated tolerance.
    let rows = 100;
    let mut mats = Vec::new();
    let (mut ns, mut wos) = (Vec::new(), Vec::new());
    for _ in 0..rows {
        let n = random_unit(&mut rng);
        ns.push(n);
        wos.push(random_hemi(&mut rng, n, 0.35));
        mats.push(([1.0, 1.0, 1.0], rng.random_range(0.6..1.0), 0.0));
    }
    let mut t = Tape::new();
    let mat = MaterialNodes {
        albedo: t.leaf_mat(Array2::from_elem((rows, 3), 1.0)),
        roughness: t.leaf_mat(Array2::from_shape_fn((rows, 1), |(i, _)| mats[i].1)),
        metallic: t.leaf_mat(Array2::zeros((rows, 1))),
    };
    let n = t.leaf_mat(Array2::from_shape_fn((rows, 3), |(i, c)| ns[i][c]));
    let wo = t.leaf_mat(Array2::from_shape_fn((rows, 3), |(i, c)| wos[i][c]));
    let res = shade(&mut t, &mat, n, wo, 64, &mut |t, wi| {
        let r = t.shape(wi)[0];
        Ok(t.leaf_mat(Array2::from_elem((r, 3), 1.0)))
    })
    .unwrap();
    let d = t.data(res.radiance);
    for i in 0..rows {
        for c in 0..3 {
            assert!(
                d[[i, c]] <= 1.05,
                "furnace row {i} (roughness {}): reflectance {}",
                mats[i].1,
                d[[i, c]]
            );
        }
    }
}

#[test]
fn criterion_2_brdf_physics() {
    criterion(
        2,
        "BRDF reciprocity to 1e-10 over 1000 configs, non-negativity, and \
         white-furnace reflectance <= 1.05 over 100 configs at K = 64",
        criterion_2_body,
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: Lambertian closed form
// ---------------------------------------------------------------------------

fn criterion_3_body() {
    let albedos = [[0.8, 0.35, 0.1], [0.2, 0.9, 0.55], [1.0, 1.0, 1.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for alb in albedos {
        let n = random_unit(&mut rng);
        let q = build_quadrature(n, 64);
        let mut out = [0.0; 3];
        for d in &q.directions {
            let cos = vdot(*d, n);
            for c in 0..3 {
                out[c] += q.weight * alb[c] / std::f64::consts::PI * cos;
            }
        }
        for c in 0..3 {
            assert!(
                (out[c] - alb[c]).abs() / alb[c] < 0.02,
                "Lambertian quadrature channel {c}: {} vs albedo {}",
                out[c],
                alb[c]
            );
        }
    }
}

#[test]
fn criterion_3_lambertian_closed_form() {
    criterion(
        3,
        "pure-Lambertian shading under constant unit light returns the albedo \
         within 2% at K = 64",
        criterion_3_body,
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: volume-rendering invariants
// ---------------------------------------------------------------------------

fn criterion_4_body() {
    let radius = 0.8;
    let (t_near, t_far) = (1.0, 4.0);
    let s = 32;
    let n_rays = 400;
    let mut rng = ChaCha8Rng::seed_from_u64(19);

    let mut origins = Array2::zeros((n_rays, 3));
    let mut directions = Array2::zeros((n_rays, 3));
    let mut depths = Array2::zeros((n_rays, s));
    let mut deltas = Array2::zeros((n_rays, s));
    let mut positions = Array2::zeros((n_rays * s, 3));
    let bin = (t_far - t_near) / s as f64;
    for i in 0..n_rays {
        let o = random_unit(&mut rng).map(|v| v * 2.5);
        // Aim near (not exactly at) the center so some rays miss.
        let target = [
            rng.random_range(-1.2..1.2),
            rng.random_range(-1.2..1.2),
            rng.random_range(-1.2..1.2),
        ];
        let d = vnormalize([target[0] - o[0], target[1] - o[1], target[2] - o[2]]);
        for c in 0..3 {
            origins[[i, c]] = o[c];
            directions[[i, c]] = d[c];
        }
        for j in 0..s {
            let t = t_near + (j as f64 + 0.5) * bin;
            depths[[i, j]] = t;
            deltas[[i, j]] = bin;
            for c in 0..3 {
                positions[[i * s + j, c]] = o[c] + t * d[c];
            }
        }
    }
    let bundle = RayBundle {
        origins: origins.clone(),
        directions: directions.clone(),
        gt_colors: Array2::zeros((n_rays, 3)),
        gt_masks: vec![false; n_rays],
        sample_positions: positions,
        depths: depths.clone(),
        deltas,
        samples_per_ray: s,
    };

    let mut t = Tape::new();
    let log_kappa = t.leaf_scalar(100.0f64.ln());
    let mut sdf_fn = |t: &mut Tape, pos: NodeId| {
        let p = t.data(pos).clone();
        let rows = p.shape()[0];
        let vals = Array2::from_shape_fn((rows, 1), |(i, _)| {
            let x = [p[[i, 0]], p[[i, 1]], p[[i, 2]]];
            (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt() - radius
        });
        Ok(t.leaf_mat(vals))
    };
    let mut shader = |t: &mut Tape, pos: NodeId, _wo: NodeId| {
        let rows = t.shape(pos)[0];
        Ok(ShadedSamples {
            color: t.leaf_mat(Array2::from_elem((rows, 3), 0.5)),
            invalid: vec![false; rows],
        })
    };
    let out = render_rays(&mut t, &bundle, log_kappa, 1e-3, &mut sdf_fn, &mut shader).unwrap();

    let w = t.data(out.weights).clone();
    let trans = t.data(out.transmittance).clone();
    let opacity = t.data(out.opacity).clone();
    let mut checked_hits = 0;
    let mut depth_ok = 0;
    for i in 0..n_rays {
        let sum_w: f64 = (0..s).map(|j| w[[i, j]]).sum();
        assert!(
            (-1e-12..=1.0 + 1e-12).contains(&sum_w),
            "ray {i}: weight sum {sum_w}"
        );
        assert!((sum_w - opacity[[i, 0]]).abs() < 1e-12);
        for j in 1..s {
            assert!(
                trans[[i, j]] <= trans[[i, j - 1]] + 1e-15,
                "ray {i}: transmittance not monotone at {j}"
            );
        }
        // alpha_j = w_j / T_j; sum w = 1 - prod(1 - alpha).
        let mut prod = 1.0;
        for j in 0..s {
            let tj = trans[[i, j]];
            if tj > 0.0 {
                prod *= 1.0 - w[[i, j]] / tj;
            }
        }
        assert!(
            (sum_w - (1.0 - prod)).abs() < 1e-12,
            "ray {i}: alpha-compositing identity violated"
        );

        // Closed-form first intersection with the sphere.
        let o = [origins[[i, 0]], origins[[i, 1]], origins[[i, 2]]];
        let d = [directions[[i, 0]], directions[[i, 1]], directions[[i, 2]]];
        let b = vdot(o, d);
        let c = vdot(o, o) - radius * radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            continue;
        }
        let t_hit = -b - disc.sqrt();
        if t_hit < t_near || t_hit > t_far {
            continue;
        }
        checked_hits += 1;
        let mut argmax = 0;
        for j in 1..s {
            if w[[i, j]] > w[[i, argmax]] {
                argmax = j;
            }
        }
        if (depths[[i, argmax]] - t_hit).abs() <= bin {
            depth_ok += 1;
        }
    }
    assert!(checked_hits > 50, "too few hitting rays ({checked_hits})");
    let frac = depth_ok as f64 / checked_hits as f64;
    assert!(
        frac >= 0.99,
        "argmax-weight depth within one spacing for only {:.1}% of {checked_hits} hits",
        frac * 100.0
    );
}

#[test]
fn criterion_4_volume_rendering_invariants() {
    criterion(
        4,
        "weight sums in [0,1], monotone transmittance, alpha-compositing \
         identity to 1e-12, argmax depth within one sample spacing for >= 99% \
         of hitting rays",
        criterion_4_body,
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: Eikonal exactness
// ---------------------------------------------------------------------------

fn criterion_5_body() {
    // Finite-difference gradient norms of true distance fields, away from
    // curvature seams where the FD stencil itself is inexact.
    let prims = [
        AnalyticSdf::Sphere {
            center: [0.1, -0.2, 0.3],
            radius: 0.7,
        },
        AnalyticSdf::Cuboid {
            center: [0.0, 0.0, 0.0],
            half_extents: [0.5, 0.4, 0.6],
        },
        AnalyticSdf::Torus {
            center: [0.0, 0.0, 0.0],
            major_radius: 0.6,
            minor_radius: 0.2,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut norms = Vec::new();
    for sdf in &prims {
        let mut taken = 0;
        while taken < 200 {
            let p = [
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
            ];
            if !fd_point_is_smooth(sdf, p) {
                continue;
            }
            taken += 1;
            let h = 1e-5;
            let mut g = [0.0; 3];
            for c in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[c] += h;
                pm[c] -= h;
                g[c] = (sdf.eval(pp) - sdf.eval(pm)) / (2.0 * h);
            }
            norms.push((g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt());
        }
    }
    let mut t = Tape::new();
    let node = t.leaf(
        Array1::from_vec(norms.clone())
            .into_shape_with_order((norms.len(), 1))
            .unwrap()
            .into_dyn(),
    );
    let loss = eikonal_loss(&mut t, node).unwrap();
    let v = t.scalar_value(loss);
    assert!(v < 1e-10, "analytic-primitive Eikonal loss {v:.3e}");

    // Sphere-initialized geometry network: approximately a distance field
    // out of the box.
    let (fields, store) = init_fields(42, &FieldConfig::default());
    let pts = Array2::from_shape_fn((256, 3), |_| rng.random_range(-1.2..1.2));
    let mut t = Tape::new();
    let bind = ParamBinding::bind(&mut t, &store, &["geo."]);
    let x = t.leaf_mat(pts);
    let g = geometry_query(&mut t, &fields.geometry, &bind, x).unwrap();
    let gn = t.norm_rows(g.gradient).unwrap();
    let loss = eikonal_loss(&mut t, gn).unwrap();
    let v = t.scalar_value(loss);
    assert!(v < 0.1, "initialized-field Eikonal residual {v}");
}

fn fd_point_is_smooth(sdf: &AnalyticSdf, p: Vec3) -> bool {
    match sdf {
        AnalyticSdf::Sphere { center, .. } => {
            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            vdot(d, d).sqrt() > 0.05
        }
        AnalyticSdf::Cuboid {
            center,
            half_extents,
        } => {
            let q = [
                (p[0] - center[0]).abs() - half_extents[0],
                (p[1] - center[1]).abs() - half_extents[1],
                (p[2] - center[2]).abs() - half_extents[2],
            ];
            // Keep points that are clearly in a single face/corner regime.
            let positives = q.iter().filter(|v| **v > 0.0).count();
            let near_seam = q.iter().any(|v| v.abs() < 0.05);
            (positives == 1 && !near_seam) || (positives == 0 && !near_seam)
        }
        AnalyticSdf::Torus {
            center,
            major_radius,
            ..
        } => {
            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            let ring = ((d[0] * d[0] + d[1] * d[1]).sqrt() - major_radius).hypot(d[2]);
            ring > 0.05 && (d[0] * d[0] + d[1] * d[1]).sqrt() > 0.05
        }
        _ => false,
    }
}

#[test]
fn criterion_5_eikonal_exactness() {
    criterion(
        5,
        "Eikonal loss < 1e-10 on analytic distance fields; sphere-initialized \
         geometry field residual < 0.1",
        criterion_5_body,
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: Marching Cubes convergence
// ---------------------------------------------------------------------------

fn mc_sphere(radius: f64, res: usize) -> matdecomp_core::mesh::TriangleMesh {
    let mut f = |pts: &Array2<f64>| {
        Ok((0..pts.nrows())
            .map(|i| {
                let p = [pts[[i, 0]], pts[[i, 1]], pts[[i, 2]]];
                vdot(p, p).sqrt() - radius
            })
            .collect())
    };
    marching_cubes(&mut f, Bounds::cube(1.2), res).unwrap()
}

fn fib_sphere(n: usize, r: f64) -> Vec<Vec3> {
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = std::f64::consts::TAU * (i as f64 / golden).fract();
            [r * rho * phi.cos(), r * rho * phi.sin(), r * z]
        })
        .collect()
}

/// Symmetric point-cloud Chamfer distance.
fn cloud_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    let ia = PointIndex::build(a.to_vec()).unwrap();
    let ib = PointIndex::build(b.to_vec()).unwrap();
    let ab: f64 = a.iter().map(|p| ib.nearest(*p).1).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|p| ia.nearest(*p).1).sum::<f64>() / b.len() as f64;
    0.5 * (ab + ba)
}

fn criterion_6_body() {
    // Point-cloud Chamfer between the extracted vertex set and a dense
    // quasi-uniform sampling of the exact sphere.
    let reference = fib_sphere(200_000, 0.8);
    let m64 = mc_sphere(0.8, 64);
    let m32 = mc_sphere(0.8, 32);
    let cell64 = 2.4 / 64.0;
    let c64 = cloud_chamfer(&m64.vertices, &reference);
    let c32 = cloud_chamfer(&m32.vertices, &reference);
    assert!(
        c64 < 2.0 * cell64,
        "Chamfer at R = 64 is {c64}, cell size {cell64}"
    );
    let ratio = c32 / c64;
    assert!(
        (1.5..=2.5).contains(&ratio),
        "refinement ratio {ratio} outside [1.5, 2.5] (c32 {c32}, c64 {c64})"
    );
    assert_eq!(m64.euler_characteristic(), 2, "extraction is not a sphere");
}

#[test]
fn criterion_6_marching_cubes_convergence() {
    criterion(
        6,
        "sphere extraction Chamfer < 2 cells at R = 64, halves from R = 32 \
         (+-25%), Euler characteristic 2",
        criterion_6_body,
    );
}

// ---------------------------------------------------------------------------
// Criteria 7-9: end-to-end training runs
// ---------------------------------------------------------------------------

fn tiny_fields() -> FieldConfig {
    FieldConfig {
        geometry_hidden: 16,
        geometry_layers: 3,
        material_hidden: 16,
        material_layers: 3,
        light_hidden: 16,
        light_layers: 2,
        init_radius: 0.5,
    }
}

fn desk_fields() -> FieldConfig {
    FieldConfig {
        geometry_hidden: 32,
        geometry_layers: 3,
        material_hidden: 32,
        material_layers: 3,
        light_hidden: 32,
        light_layers: 2,
        init_radius: 0.5,
    }
}

fn desk_config(seed: u64) -> TrainingConfig {
    TrainingConfig {
        iterations: 5000,
        batch_rays: 32,
        samples_per_ray: 24,
        quadrature: 12,
        lr0: 1e-3,
        checkpoint_interval: 5000,
        log_interval: 100,
        eikonal_points: 32,
        light_reg_directions: 16,
        fields: desk_fields(),
        seed,
        ..TrainingConfig::default()
    }
}

fn desk_eval_settings() -> EvalSettings {
    EvalSettings {
        render: RenderSettings {
            samples_per_ray: 24,
            quadrature: 12,
            chunk_rays: 64,
        },
        mesh_resolution: 64,
        reference_resolution: 96,
        mesh_half_extent: 1.2,
        chamfer_samples: 20_000,
        material_points: 1_000,
        relight_cameras: 1,
        seed: 0,
    }
}

struct Flagship {
    _dir: tempfile::TempDir,
    data_dir: PathBuf,
    scene: AnalyticScene,
    cfg: TrainingConfig,
    ds: SceneDataset,
    state: TrainState,
    checkpoint_bytes: Vec<u8>,
    losses: Vec<f64>,
    report: EvalReport,
}

fn flagship_report(state: &TrainState, ds: &SceneDataset, scene: &AnalyticScene) -> EvalReport {
    let (fields, store) = state_fields(state);
    evaluate(
        fields,
        store,
        ds,
        Some(scene),
        &[0, 1],
        &desk_eval_settings(),
        &OracleRenderConfig::default(),
    )
    .unwrap()
}

fn flagship() -> &'static Flagship {
    static RUN: OnceLock<Flagship> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let scene = stock_scene("sphere").unwrap();
        generate_dataset(
            &scene,
            16,
            64,
            7,
            &OracleRenderConfig::default(),
            &data_dir,
        )
        .unwrap();
        let ds = load_dataset(&data_dir).unwrap();
        let cfg = desk_config(17);
        let run_dir = dir.path().join("run");
        let (state, artifacts, losses) = train(&cfg, &ds, &run_dir, None, false).unwrap();
        let checkpoint_bytes = std::fs::read(&artifacts.checkpoint_path).unwrap();
        let report = flagship_report(&state, &ds, &scene);
        Flagship {
            data_dir,
            scene,
            cfg,
            ds,
            state,
            checkpoint_bytes,
            losses: losses.iter().map(|b| b.total).collect(),
            report,
            _dir: dir,
        }
    })
}

fn criterion_7_body() {
    let f = flagship();
    let head: f64 = f.losses[..50].iter().sum::<f64>() / 50.0;
    let tail: f64 = f.losses[f.losses.len() - 50..].iter().sum::<f64>() / 50.0;
    let drop = 1.0 - tail / head;
    assert!(
        drop >= 0.8,
        "total loss dropped only {:.1}% (from {head:.4} to {tail:.4})",
        drop * 100.0
    );

    let chamfer = f.report.chamfer.unwrap();
    assert!(chamfer < 0.05, "Chamfer to the true sphere is {chamfer}");

    let pts = ground_truth_surface_points(&f.scene, 500, 3).unwrap();
    let m = pts.len();
    let coords = Array2::from_shape_fn((m, 3), |(i, c)| pts[i][c]);
    let (fields, store) = state_fields(&f.state);
    let mat = trained_material_eval(fields, store)(&coords).unwrap();
    let gt_albedo = [0.6, 0.2, 0.2];
    for c in 0..3 {
        let mean: f64 = (0..m).map(|i| mat[[i, c]]).sum::<f64>() / m as f64;
        assert!(
            (mean - gt_albedo[c]).abs() < 0.15,
            "mean recovered albedo channel {c}: {mean} vs {}",
            gt_albedo[c]
        );
    }
}

#[test]
fn criterion_7_end_to_end_sphere_recovery() {
    criterion(
        7,
        "5000-iteration sphere run: >= 80% loss drop, Chamfer < 0.05, mean \
         albedo within 0.15 per channel",
        criterion_7_body,
    );
}

fn criterion_8_body() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let scene = stock_scene("bimaterial").unwrap();
    generate_dataset(
        &scene,
        16,
        64,
        7,
        &OracleRenderConfig::default(),
        &data_dir,
    )
    .unwrap();
    let ds = load_dataset(&data_dir).unwrap();

    let with_priors = desk_config(23);
    let mut without_priors = desk_config(23);
    without_priors.weights = LossWeights {
        lambda_mat: 0.0,
        lambda_metal: 0.0,
        ..with_priors.weights.clone()
    };

    let mut psnrs = Vec::new();
    for (label, cfg) in [("with", &with_priors), ("without", &without_priors)] {
        let run_dir = dir.path().join(label);
        let (state, _, _) = train(cfg, &ds, &run_dir, None, false).unwrap();
        let (fields, store) = state_fields(&state);
        let mut material_fn = trained_material_eval(fields, store);
        let err = matdecomp_core::eval::material_map_error(&mut material_fn, &scene, 1000, 5)
            .unwrap();
        psnrs.push(err.albedo);
    }
    assert!(
        psnrs[0] > psnrs[1],
        "albedo PSNR with priors ({:.3} dB) does not exceed the ablation \
         ({:.3} dB)",
        psnrs[0],
        psnrs[1]
    );
}

#[test]
fn criterion_8_material_prior_ablation() {
    criterion(
        8,
        "bi-material scene: albedo PSNR with default material priors strictly \
         exceeds the lambda_mat = lambda_metal = 0 ablation",
        criterion_8_body,
    );
}

fn criterion_9_body() {
    let f = flagship();
    let dir = tempfile::tempdir().unwrap();
    let rerun_dir = dir.path().join("rerun");
    let (state, artifacts, _) = train(&f.cfg, &f.ds, &rerun_dir, None, false).unwrap();
    let bytes = std::fs::read(&artifacts.checkpoint_path).unwrap();
    assert_eq!(
        bytes, f.checkpoint_bytes,
        "repeated run produced a different checkpoint"
    );
    let report = flagship_report(&state, &f.ds, &f.scene);
    assert_eq!(report, f.report, "repeated run produced a different report");
    // The dataset itself also regenerates identically.
    let data2 = dir.path().join("data2");
    generate_dataset(
        &f.scene,
        16,
        64,
        7,
        &OracleRenderConfig::default(),
        &data2,
    )
    .unwrap();
    let a = std::fs::read(f.data_dir.join("images/view_0000.png")).unwrap();
    let b = std::fs::read(data2.join("images/view_0000.png")).unwrap();
    assert_eq!(a, b, "dataset regeneration differs");
}

#[test]
fn criterion_9_determinism() {
    criterion(
        9,
        "repeating the flagship run with the same seed gives a bit-identical \
         checkpoint and an identical evaluation report",
        criterion_9_body,
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: metric sanity
// ---------------------------------------------------------------------------

fn criterion_10_body() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let img: ArrayD<f64> =
        Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0..0.8)).into_dyn();
    assert_eq!(psnr(&img, &img, 1.0).unwrap(), 100.0);
    let off = img.mapv(|v| v + 0.1);
    let p = psnr(&img, &off, 1.0).unwrap();
    assert!((p - 20.0).abs() < 1e-9, "MSE 0.01 gave {p} dB");

    let big: ArrayD<f64> =
        Array2::from_shape_fn((24, 24), |_| rng.random_range(0.0..1.0)).into_dyn();
    assert_eq!(ssim(&big, &big).unwrap(), 1.0);

    // Chamfer symmetry and the parallel-planes offset check.
    let square = |z: f64| matdecomp_core::mesh::TriangleMesh {
        vertices: vec![[0.0, 0.0, z], [1.0, 0.0, z], [1.0, 1.0, z], [0.0, 1.0, z]],
        faces: vec![[0, 1, 2], [0, 2, 3]],
        normals: vec![],
        pbr: vec![],
    };
    let (a, b) = (square(0.0), square(0.1));
    let ab = chamfer_with_seeds(&a, 4, &b, 9, 4000).unwrap();
    let ba = chamfer_with_seeds(&b, 9, &a, 4, 4000).unwrap();
    assert_eq!(ab, ba, "Chamfer is not symmetric");
    assert!(
        (ab - 0.1).abs() / 0.1 < 0.01,
        "parallel planes at offset 0.1 scored {ab}"
    );
}

#[test]
fn criterion_10_metric_sanity() {
    criterion(
        10,
        "PSNR cap and exact 20 dB at MSE 0.01, SSIM identity, Chamfer \
         symmetry and 1% parallel-plane accuracy",
        criterion_10_body,
    );
}
