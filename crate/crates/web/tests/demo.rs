use fedmitr::federation::PartitionKind;
use fedmitr_web::demo::{bound_curves, partition_counts, CurveInputs, InversionDemo};

#[test]
fn partition_counts_cover_every_sample() {
    let counts = partition_counts(PartitionKind::Dirichlet { alpha: 0.1 }, 4, 10, 30, 7).unwrap();
    assert_eq!(counts.len(), 40);
    for k in 0..10 {
        assert_eq!((0..4).map(|c| counts[c * 10 + k]).sum::<u32>(), 30);
    }
    let path = partition_counts(PartitionKind::Pathological { classes_per_client: 2 }, 5, 10, 20, 1).unwrap();
    for c in 0..5 {
        assert_eq!(path[c * 10..(c + 1) * 10].iter().filter(|&&v| v > 0).count(), 2);
    }
}

#[test]
fn bound_curves_start_at_zero_beta_and_grow() {
    let k = CurveInputs {
        mu: 1.0,
        c: 1.0,
        t: 100.0,
        n: 128.0,
        m: 1.0,
        delta: 0.05,
        r_emp: 0.1,
    };
    let pts = bound_curves(2.0, 21, &k).unwrap();
    assert_eq!(pts.len(), 21);
    assert_eq!(pts[0][1], 0.0);
    assert!(pts.windows(2).all(|w| w[1][1] > w[0][1] && w[1][2] > w[0][2]));
    assert!((pts[20][0] - 2.0).abs() < 1e-15);
    assert!(bound_curves(1.0, 5, &CurveInputs { n: 1.0, ..k }).is_err());
}

#[test]
fn inversion_view_reports_the_mask() {
    let demo = InversionDemo::new(3).unwrap();
    let v = demo.invert(2, 0.5, 20, 0.05, 11).unwrap();
    assert_eq!(v.pixels.len(), v.size * v.size);
    assert_eq!(v.active.len(), v.grid * v.grid);
    assert_eq!(v.active.iter().filter(|&&a| !a).count(), 8);
    assert!(v.cls_attention.iter().zip(&v.active).all(|(&a, &on)| on || a == 0.0));
    assert!(v.ce_last < v.ce_first);
    assert_eq!(demo.real_sample(2).len(), 256);
}
