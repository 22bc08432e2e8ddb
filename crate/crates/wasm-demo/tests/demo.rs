use protune_wasm_demo::demo;

const W: usize = 64 * 4;

fn halves(rgba: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let (mut l, mut r) = (Vec::new(), Vec::new());
    for row in rgba.chunks(W) {
        l.extend_from_slice(&row[..W / 2]);
        r.extend_from_slice(&row[W / 2..]);
    }
    (l, r)
}

#[test]
fn corruption_preview_layout() {
    let a = demo::corruption_preview("gaussian_noise", 1, 4, 7).unwrap();
    let b = demo::corruption_preview("gaussian_noise", 5, 4, 7).unwrap();
    assert_eq!(a.len(), 64 * 32 * 4);
    assert!(a.chunks(4).all(|p| p[3] == 255));
    let ((la, ra), (lb, rb)) = (halves(&a), halves(&b));
    assert_eq!(la, lb);
    assert_ne!(ra, rb);
    assert_eq!(a, demo::corruption_preview("gaussian_noise", 1, 4, 7).unwrap());
}

#[test]
fn corruption_inputs_validated() {
    assert!(demo::corruption_preview("fog", 1, 0, 0).is_err());
    assert!(demo::corruption_preview("contrast", 6, 0, 0).is_err());
    assert!(demo::corruption_preview("contrast", 1, 10, 0).is_err());
}

#[test]
fn corruption_curve_increases() {
    for kind in ["gaussian_noise", "gaussian_blur", "contrast", "occlusion"] {
        let c = demo::corruption_curve(kind, 3).unwrap();
        assert!(c.windows(2).all(|w| w[1] > w[0]), "{kind}: {c:?}");
    }
}

#[test]
fn longtail_profile_endpoints() {
    let p = demo::longtail(10, 5000, 100.0).unwrap();
    assert_eq!((p[0], p[9]), (5000, 50));
    assert!(demo::longtail(10, 5000, 0.5).is_err());
    assert!(demo::longtail(0, 5000, 10.0).is_err());
}

#[test]
fn block_params_by_hand() {
    // C=256, C_b=64, k=5, SE hidden 16
    let expected = (256 * 64 + 64) + (64 * 25 + 64) + (64 * 256 + 256) + (256 * 16 + 16) + (16 * 256 + 256) + 1;
    assert_eq!(demo::block_params(256, 4, 5, 16, true).unwrap(), expected);
    assert_eq!(demo::block_params(256, 4, 5, 16, false).unwrap(), expected - 1);
    assert!(demo::block_params(256, 4, 4, 16, true).is_err());
}

#[test]
fn policy_params_equalities() {
    let n = |p| demo::policy_params("vit", p, 2, 5).unwrap();
    assert_eq!(n("F1"), n("L1"));
    assert_eq!(n("F5"), n("U5"));
    assert!(demo::policy_params("cnn", "U5", 4, 5).is_err());
    assert!(demo::policy_params("mlp", "F1", 4, 5).is_err());
}

#[test]
fn zero_beta_blend_is_identity() {
    let (l, r) = halves(&demo::blend_preview(0.0, 5, 2, 1).unwrap());
    assert_eq!(l, r);
    let (l, r) = halves(&demo::blend_preview(2.0, 5, 2, 1).unwrap());
    assert_ne!(l, r);
}
