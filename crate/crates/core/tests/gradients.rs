mod common;

use nanoinv::structgen::{generate_cluster, AtomBounds, SizeParams, StructureKind};

#[test]
fn every_primitive_matches_central_differences() {
    for (name, err) in common::primitive_errors() {
        assert!(err < 1e-5, "{name}: relative error {err:.3e}");
    }
}

#[test]
fn refinement_gradient_matches_central_differences() {
    let kinds = [
        (StructureKind::Ico, SizeParams::Shells(1)),
        (StructureKind::Fcc, SizeParams::Cutoff(4.1)),
        (StructureKind::Oct, SizeParams::Edge(3)),
    ];
    for (i, (kind, size)) in kinds.into_iter().enumerate() {
        let cloud = generate_cluster(kind, size, 4.08, AtomBounds::default()).unwrap();
        let err = common::refine_gradient_error(&cloud, i as u64);
        assert!(err < 1e-5, "{kind}: relative error {err:.3e}");
    }
}
