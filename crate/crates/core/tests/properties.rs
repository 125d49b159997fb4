use nalgebra::{DMatrix, Matrix3, Rotation3, Unit, Vector3};
use proptest::prelude::*;

use nanoinv::condvae::{kl_standard_normal, CondVae, CondVaeShape};
use nanoinv::diffusion::{q_sample, NoiseSchedule, SkipPlan};
use nanoinv::geomrecover::{refine_coords, spectral_embed, LaplacianMisfit, RefineOptions};
use nanoinv::graphrep::{block_merge, block_split, encode_with_norm, kernel, laplacian_block, laplacian_encode};
use nanoinv::latentvae::kl_diagonal;
use nanoinv::nn::{grad_eval, Adan, AdamW, RngStream, Tape, Tensor};
use nanoinv::pdfsim::{debye_structure_function, pdf_from_structure, pdf_with_q_step, DebyeParams, Q_STEP};
use nanoinv::pipeline::{rwp, Checkpoint, EvalReport, EvalRow, Profile};
use nanoinv::structgen::{generate_cluster, AtomBounds, AtomCloud, SizeParams, StructureKind};

fn cloud_from(seed: u64, n: usize) -> AtomCloud {
    let mut rng = RngStream::new(seed);
    let radius = 1.5 * (n as f64).cbrt() + 1.0;
    let mut pts: Vec<[f64; 3]> = Vec::new();
    while pts.len() < n {
        let p = [0, 1, 2].map(|_| rng.uniform_in(-radius, radius));
        if pts.iter().all(|q| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>() > 1.0) {
            pts.push(p);
        }
    }
    AtomCloud::new(pts, None, 4.0)
}

fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let r = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle);
    let m = r.matrix();
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| m[(i, j)]))
}

fn maps_onto_itself(cloud: &AtomCloud, rot: &[[f64; 3]; 3]) -> bool {
    let moved = cloud.transformed(rot, [0.0; 3]);
    let c = cloud.centroid();
    moved.coords().iter().all(|p| {
        let p = [p[0] + c[0], p[1] + c[1], p[2] + c[2]];
        cloud.coords().iter().any(|q| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>() < 1e-12)
    })
}

fn farthest_atom(cloud: &AtomCloud) -> [f64; 3] {
    let c = cloud.centroid();
    let rel = |p: &[f64; 3]| [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
    let norm = |p: [f64; 3]| p.iter().map(|v| v * v).sum::<f64>();
    cloud.coords().iter().map(rel).max_by(|a, b| norm(*a).total_cmp(&norm(*b))).unwrap()
}

/// Axis of the inertia tensor whose eigenvalue is farthest from the other two.
fn unique_inertia_axis(cloud: &AtomCloud) -> [f64; 3] {
    let c = cloud.centroid();
    let mut m = Matrix3::zeros();
    for p in cloud.coords() {
        let v = Vector3::new(p[0] - c[0], p[1] - c[1], p[2] - c[2]);
        m += Matrix3::identity() * v.norm_squared() - v * v.transpose();
    }
    let e = m.symmetric_eigen();
    let l = e.eigenvalues;
    let k = (0..3)
        .max_by(|&a, &b| {
            let gap = |i: usize| (0..3).filter(|&j| j != i).map(|j| (l[i] - l[j]).abs()).fold(f64::MAX, f64::min);
            gap(a).total_cmp(&gap(b))
        })
        .unwrap();
    let v = e.eigenvectors.column(k);
    [v[0], v[1], v[2]]
}

fn lattice_quantum(kind: StructureKind, a: f64) -> f64 {
    match kind {
        StructureKind::Fcc | StructureKind::Bcc => a * a / 4.0,
        StructureKind::Sc => a * a,
        _ => a * a / 6.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn tensor_length_matches_shape(dims in prop::collection::vec(1usize..5, 1..4), extra in 1usize..3) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::<f64>::new(dims.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::<f64>::new(dims, vec![0.0; n + extra]).is_err());
    }

    #[test]
    fn gradients_are_linear_in_the_loss(seed in 0u64..1000) {
        let mut rng = RngStream::new(seed);
        let x: Tensor<f64> = rng.normal_tensor(&[3, 4]);
        let w: Tensor<f64> = rng.normal_tensor(&[4, 2]);
        let grads = |which: u8| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let y = tape.matmul(xv, wv).unwrap();
            let t = tape.tanh(y);
            let l1 = tape.sum(t);
            let s = tape.square(y);
            let l2 = tape.mean(s);
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            grad_eval(&tape, loss, &[xv, wv]).unwrap()
        };
        let (a, b, both) = (grads(0), grads(1), grads(2));
        for i in 0..2 {
            for ((p, q), r) in a[i].data().iter().zip(b[i].data()).zip(both[i].data()) {
                prop_assert!((p + q - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_rate_optimizer_leaves_parameters(seed in 0u64..1000) {
        let mut rng = RngStream::new(seed);
        let mut params: Vec<Tensor<f32>> = vec![rng.normal_tensor(&[5]), rng.normal_tensor(&[2, 3])];
        let grads: Vec<Tensor<f32>> = params.iter().map(|p| rng.normal_tensor(p.shape())).collect();
        let before = params.clone();
        let mut adamw = AdamW::new(0.0).with_weight_decay(0.1);
        let mut adan = Adan::new(0.0);
        for _ in 0..3 {
            adamw.step(&mut params, &grads).unwrap();
            adan.step(&mut params, &grads).unwrap();
        }
        prop_assert_eq!(params, before);
    }

    #[test]
    fn random_streams_replay(seed in any::<u64>(), stream in 0u64..64) {
        let a: Vec<f64> = { let mut r = RngStream::new(seed).fork(stream); (0..16).map(|_| r.normal()).collect() };
        let b: Vec<f64> = { let mut r = RngStream::new(seed).fork(stream); (0..16).map(|_| r.normal()).collect() };
        prop_assert_eq!(a, b);
    }

    #[test]
    fn lattice_distances_are_quantised(kind_ix in 0usize..4, a in 3.6f64..4.2, cutoff in 0.9f64..1.4) {
        let kind = [StructureKind::Fcc, StructureKind::Bcc, StructureKind::Sc, StructureKind::Hcp][kind_ix];
        let Ok(cloud) = generate_cluster(kind, SizeParams::Cutoff(cutoff * a), a, AtomBounds { min: 2, max: 400 }) else {
            return Ok(());
        };
        let q = lattice_quantum(kind, a);
        for d in cloud.pair_distances() {
            let m = d * d / q;
            prop_assert!((m - m.round()).abs() < 1e-6, "{kind}: d^2/q = {m}");
        }
    }

    #[test]
    fn generated_clusters_respect_bounds(kind_ix in 0usize..7, size in 1usize..4, a in 3.6f64..4.2) {
        let kind = StructureKind::ALL[kind_ix];
        let params = match kind {
            StructureKind::Ico => SizeParams::Shells(size.min(2)),
            StructureKind::Dec => SizeParams::Decahedron { p: size, q: 2, r: size % 2 },
            StructureKind::Oct => SizeParams::Edge(size + 1),
            _ => SizeParams::Cutoff(a * (0.8 + 0.25 * size as f64)),
        };
        let bounds = AtomBounds { min: 5, max: 256 };
        if let Ok(c) = generate_cluster(kind, params, a, bounds) {
            prop_assert!(c.len() >= 5 && c.len() <= 256);
            prop_assert!(c.min_distance().unwrap() > 0.5);
            prop_assert!(c.centroid().iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn pdf_ignores_rigid_motion(seed in 0u64..500, n in 2usize..12) {
        let cloud = cloud_from(seed, n);
        let params = DebyeParams { r_step: 0.1, r_max: 15.0, ..DebyeParams::default() };
        let mut rng = RngStream::new(seed + 1);
        let axis = [rng.normal(), rng.normal(), rng.normal()];
        let moved = cloud.transformed(&rotation(axis, rng.uniform_in(0.0, 6.0)), [3.0, -1.0, 2.0]);
        let g1 = pdf_from_structure(&cloud, &params).unwrap();
        let g2 = pdf_from_structure(&moved, &params).unwrap();
        let worst = g1.g.iter().zip(&g2.g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn laplacian_block_algebra(seed in 0u64..500, n in 2usize..20) {
        let cloud = cloud_from(seed, n);
        let l = laplacian_block(cloud.coords(), 5.0);
        for i in 0..n {
            prop_assert!(l.chunks(n).nth(i).unwrap().iter().sum::<f64>().abs() < 1e-9);
            prop_assert!(l[i * n + i] >= 0.0);
            for j in 0..n {
                prop_assert_eq!(l[i * n + j], l[j * n + i]);
                if i != j {
                    prop_assert!(l[i * n + j] <= 0.0);
                }
            }
        }
        let eig = DMatrix::from_row_slice(n, n, &l).symmetric_eigenvalues();
        let top = eig.max();
        prop_assert!(eig.min() > -1e-9);
        prop_assert_eq!(eig.iter().filter(|v| v.abs() < 1e-9 * top.max(1.0)).count(), 1);
        let img = laplacian_encode(&cloud, 5.0, 24).unwrap();
        for i in n..24 {
            for j in 0..24 {
                prop_assert_eq!(img.at(i, j), 0.0);
                prop_assert_eq!(img.at(j, i), 0.0);
            }
        }
    }

    #[test]
    fn kernel_decreases_with_distance(d1 in 0.5f64..10.0, gap in 0.01f64..5.0) {
        prop_assert!(kernel(d1 * d1, 5.0) > kernel((d1 + gap).powi(2), 5.0));
    }

    #[test]
    fn block_split_round_trip(seed in 0u64..500, half in 1usize..9) {
        let n = 2 * half;
        let mut rng = RngStream::new(seed);
        let m: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let back = block_merge(&block_split(&m, n).unwrap(), n).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn refinement_never_increases_the_misfit(seed in 0u64..300, n in 3usize..10) {
        let cloud = cloud_from(seed, n);
        let img = encode_with_norm(&cloud, 5.0, 16, 16.0).unwrap();
        let obj = LaplacianMisfit::from_image(&img).unwrap();
        let mut rng = RngStream::new(seed + 7);
        let start: Vec<[f64; 3]> = cloud.coords().iter().map(|p| p.map(|v| v + rng.normal())).collect();
        let flat: Vec<f64> = start.iter().flatten().copied().collect();
        let f0 = obj.value(&flat);
        let opts = RefineOptions { max_iterations: 50, ..RefineOptions::default() };
        let res = refine_coords(&img, &start, &opts).unwrap();
        prop_assert!(res.final_mse >= 0.0 && res.final_mse <= f0);
        prop_assert!(res.coords.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn spectral_values_are_positive_and_sorted(seed in 0u64..300, n in 4usize..16) {
        let img = laplacian_encode(&cloud_from(seed, n), 5.0, 16).unwrap();
        let init = spectral_embed(&img).unwrap();
        prop_assert!(init.eigenvalues.iter().all(|&v| v > 0.0));
        prop_assert!(init.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn kl_is_nonnegative(seed in 0u64..1000) {
        let mut rng = RngStream::new(seed);
        let mu: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let var: Vec<f64> = (0..6).map(|_| rng.uniform_in(0.05, 4.0)).collect();
        let mp: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let vp: Vec<f64> = (0..6).map(|_| rng.uniform_in(0.05, 4.0)).collect();
        prop_assert!(kl_standard_normal(&mu, &var) >= 0.0);
        prop_assert!(kl_diagonal(&mu, &var, &mp, &vp) >= 0.0);
        prop_assert!(kl_diagonal(&mu, &var, &mu, &var).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_well_formed(steps in 1usize..300, lo in 1e-5f64..1e-2, span in 0.0f64..0.3) {
        let s = NoiseSchedule::linear(steps, lo, lo + span).unwrap();
        for t in 1..=steps {
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-12);
            prop_assert!(s.posterior_variance(t) <= s.beta(t));
        }
    }

    #[test]
    fn skip_coefficients_satisfy_the_blend_identities(t1 in 0usize..100, gap in 1usize..100) {
        let s = Profile::desk().schedule().unwrap();
        let t2 = (t1 + gap).min(100);
        prop_assume!(t1 < t2);
        let plan = SkipPlan::new(t1, t2, &s).unwrap();
        let (a1, a2) = (s.alpha_bar(t1), s.alpha_bar(t2));
        prop_assert!((plan.a + plan.u * a2.sqrt() - a1.sqrt()).abs() < 1e-12);
        prop_assert!((plan.u * (1.0 - a2).sqrt() - (1.0 - a1).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rwp_is_nonnegative(seed in 0u64..1000) {
        let mut rng = RngStream::new(seed);
        let a: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
        prop_assert!(rwp(&a, &b, None).unwrap() >= 0.0);
    }

    #[test]
    fn report_medians_follow_rows(values in prop::collection::vec(0.0f64..3.0, 1..20)) {
        let rows: Vec<EvalRow> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| EvalRow { name: format!("s{i}"), kind: ["A", "B"][i % 2].into(), natoms: 5, rwp: v, seconds: 0.0 })
            .collect();
        let report = EvalReport { rows };
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len() / 2;
        let expect = if sorted.len() % 2 == 1 { sorted[m] } else { 0.5 * (sorted[m - 1] + sorted[m]) };
        prop_assert_eq!(report.total_median(), expect);
        for (kind, med) in report.medians() {
            let mut v: Vec<f64> = report.rows.iter().filter(|r| r.kind == kind).map(|r| r.rwp).collect();
            v.sort_by(f64::total_cmp);
            let h = v.len() / 2;
            let e = if v.len() % 2 == 1 { v[h] } else { 0.5 * (v[h - 1] + v[h]) };
            prop_assert_eq!(med, e);
        }
    }

    #[test]
    fn checkpoints_round_trip_and_check_profile(seed in 0u64..1000, hash in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let mut ck = Checkpoint::new(hash);
        ck.insert("a.w", rng.normal_tensor(&[3, 2]));
        ck.insert("b", rng.normal_tensor(&[4]));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert!(back.require_profile(hash).is_ok());
        prop_assert!(back.require_profile(hash ^ 1).is_err());
    }
}

#[test]
fn close_packed_clusters_keep_their_symmetry() {
    let a = 4.08;
    let bounds = AtomBounds { min: 5, max: 400 };
    for shells in 1..=2 {
        let ico = generate_cluster(StructureKind::Ico, SizeParams::Shells(shells), a, bounds).unwrap();
        assert!(maps_onto_itself(&ico, &rotation(farthest_atom(&ico), 0.4 * std::f64::consts::PI)));
    }
    for m in 2..=4 {
        let oct = generate_cluster(StructureKind::Oct, SizeParams::Edge(m), a, bounds).unwrap();
        assert!(maps_onto_itself(&oct, &rotation(farthest_atom(&oct), 0.5 * std::f64::consts::PI)));
    }
    for (p, q, r) in [(2, 2, 0), (3, 2, 1), (2, 3, 1)] {
        let dec = generate_cluster(StructureKind::Dec, SizeParams::Decahedron { p, q, r }, a, bounds).unwrap();
        assert!(maps_onto_itself(&dec, &rotation(unique_inertia_axis(&dec), 0.4 * std::f64::consts::PI)), "dec {p} {q} {r}");
    }
}

#[test]
fn doubling_quadrature_resolution_barely_moves_g() {
    let cloud = generate_cluster(StructureKind::Ico, SizeParams::Shells(2), 4.08, AtomBounds::default()).unwrap();
    let params = DebyeParams { r_step: 0.05, ..DebyeParams::default() };
    let coarse = pdf_with_q_step(&cloud, &params, Q_STEP).unwrap();
    let fine = pdf_with_q_step(&cloud, &params, Q_STEP / 2.0).unwrap();
    let worst = coarse.g.iter().zip(&fine.g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn thermal_damping_shrinks_the_structure_function() {
    let cloud = generate_cluster(StructureKind::Oct, SizeParams::Edge(3), 4.08, AtomBounds::default()).unwrap();
    let q = [3.0, 8.0, 15.0];
    let mut last = vec![f64::INFINITY; q.len()];
    for b in [0.0, 0.3, 1.0, 3.0, 10.0, 100.0] {
        let params = DebyeParams { b_iso: b, ..DebyeParams::default() };
        let f = debye_structure_function(&cloud, &params, &q).unwrap();
        for (l, v) in last.iter_mut().zip(&f) {
            assert!(v.abs() < *l);
            *l = v.abs();
        }
    }
    assert!(last[2] < 1e-9, "{last:?}");
}

#[test]
fn noising_in_one_step_matches_the_closed_form() {
    let s = NoiseSchedule::linear(50, 1e-3, 0.2).unwrap();
    let t = 30;
    let draws = 10_000;
    let mut rng = RngStream::new(77);
    let z0 = 1.5;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..draws {
        let mut z = z0;
        for k in 1..=t {
            z = s.alpha(k).sqrt() * z + s.beta(k).sqrt() * rng.normal();
        }
        sum += z;
        sq += z * z;
    }
    let mean = sum / draws as f64;
    let var = sq / draws as f64 - mean * mean;
    let ab = s.alpha_bar(t);
    let closed = q_sample(&Tensor::<f64>::scalar(z0), t, &Tensor::scalar(0.0), &s).unwrap().data()[0];
    assert!((closed - ab.sqrt() * z0).abs() < 1e-15);
    assert!((mean - closed).abs() < 0.02 * closed.abs().max(1.0), "mean {mean} vs {closed}");
    assert!((var - (1.0 - ab)).abs() < 0.02 * (1.0 - ab), "var {var} vs {}", 1.0 - ab);
}

#[test]
fn condition_loss_ignores_batch_order() {
    let shape = CondVaeShape { channels: 2, length: 16, latent_channels: 2, latent_length: 4, width: 4 };
    let vae = CondVae::new(shape, &mut RngStream::new(3)).unwrap();
    let mut rng = RngStream::new(4);
    let batch: Vec<Tensor<f32>> = (0..5).map(|_| rng.normal_tensor(&[2, 16])).collect();
    let eps: Vec<Tensor<f32>> = (0..5).map(|_| rng.normal_tensor(&[2, 1, 4])).collect();
    let loss = |order: &[usize]| {
        let b: Vec<Tensor<f32>> = order.iter().map(|&i| batch[i].clone()).collect();
        let e = Tensor::stack(&order.iter().map(|&i| eps[i].clone()).collect::<Vec<_>>()).unwrap();
        vae.batch_loss(&b, &e, 1e-3).unwrap().total
    };
    let a = loss(&[0, 1, 2, 3, 4]);
    let b = loss(&[3, 0, 4, 2, 1]);
    assert!((a - b).abs() < 1e-6 * a.abs().max(1.0), "{a} vs {b}");
}
