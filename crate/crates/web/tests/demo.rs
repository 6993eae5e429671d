use pdr_core::Tensor;
use pdr_web::{perturbation_rgba, ssim_map_rgba, to_rgba, Demo, SIDE};

#[test]
fn baseline_and_pdr_views_are_consistent() {
    let demo = Demo::build(3, 1).unwrap();
    let eps = 8.0 / 255.0;
    let base = demo.run_baseline(0, "ifgsm", eps).unwrap();
    assert!(base.linf() <= eps + 1e-9);
    assert_eq!(base.side(), SIDE);
    assert_eq!(base.adversarial().len(), 4 * SIDE * SIDE);
    assert_eq!(base.ssim_map().len(), 4 * base.map_side() * base.map_side());
    assert!(base.lambdas().is_empty());
    assert!((0.0..=1.0).contains(&base.ssim()));

    let p = demo.run_pdr(1, 0.98, 100.0, eps).unwrap();
    assert!(p.linf() <= eps + 1e-9);
    assert_eq!(p.lambdas().len(), p.iterations());
    assert_eq!(p.ssims().len(), p.iterations());
    assert_eq!(p.lambdas()[0], 100.0);
    assert_eq!(p.success(), p.predicted() != p.label());
}

#[test]
fn bad_requests_are_errors() {
    let demo = Demo::build(4, 1).unwrap();
    assert!(demo.run_baseline(0, "pgd", 0.03).is_err());
    assert!(demo.run_baseline(10_000, "fgsm", 0.03).is_err());
    assert!(demo.run_pdr(0, 1.5, 10.0, 0.03).is_err());
}

#[test]
fn identical_images_give_a_bright_ssim_map() {
    let x = Tensor::new(&[3, 12, 12], (0..432).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
    let res = pdr_core::perceptual::ssim(&x, &x, &Default::default()).unwrap();
    let map = ssim_map_rgba(&res.map);
    assert_eq!(map.len(), 4 * 2 * 2);
    assert!(map.chunks(4).all(|px| px == [255, 255, 0, 255]));
    assert!(perturbation_rgba(&x, &x, 0.1).chunks(4).all(|px| px == [128, 128, 128, 255]));
    assert_eq!(to_rgba(&x).len(), 4 * 144);
}
