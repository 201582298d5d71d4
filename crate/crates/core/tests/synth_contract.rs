//! Synthetic pair generator: geometry of each misalignment type.

use wmnet_core::synth::{generate_pair, object_mask, MisalignmentSpec, Visibility};

fn centroid(mask: &[bool], n: usize) -> (f64, f64) {
    let (mut sx, mut sy, mut k) = (0.0, 0.0, 0.0);
    for (idx, &m) in mask.iter().enumerate() {
        if m {
            sx += (idx % n) as f64;
            sy += (idx / n) as f64;
            k += 1.0;
        }
    }
    (sx / k, sy / k)
}

#[test]
fn deterministic_per_seed() {
    let spec = MisalignmentSpec::heavy();
    let a = generate_pair(11, &spec, 64).unwrap();
    let b = generate_pair(11, &spec, 64).unwrap();
    assert_eq!(a.rgb.data(), b.rgb.data());
    assert_eq!(a.ir.data(), b.ir.data());
    assert_eq!(a.gt, b.gt);
    let c = generate_pair(12, &spec, 64).unwrap();
    assert_ne!(a.ir.data(), c.ir.data());
}

#[test]
fn neutral_spec_keeps_modalities_registered() {
    let spec = MisalignmentSpec::neutral();
    for seed in 0..10 {
        let p = generate_pair(seed, &spec, 64).unwrap();
        for o in &p.scene.objects {
            assert_eq!(o.visibility, Visibility::Both);
            assert_eq!(object_mask(o, &spec, 64, true), object_mask(o, &spec, 64, false));
        }
    }
}

#[test]
fn offset_shifts_rgb_silhouettes_exactly() {
    let mut spec = MisalignmentSpec::neutral();
    spec.offset_x = 5.0;
    let p = generate_pair(4, &spec, 64).unwrap();
    for o in &p.scene.objects {
        // keep to objects whose shifted copy stays on the canvas
        if o.bbox().x2 + 5.0 >= 64.0 {
            continue;
        }
        let (ix, iy) = centroid(&object_mask(o, &spec, 64, false), 64);
        let (rx, ry) = centroid(&object_mask(o, &spec, 64, true), 64);
        assert!((rx - ix - 5.0).abs() < 1e-9 && (ry - iy).abs() < 1e-9);
    }
}

#[test]
fn offset_visible_in_rendered_rgb() {
    // RGB pixels inside an object's shifted footprint carry its colour.
    let mut spec = MisalignmentSpec::neutral();
    spec.offset_x = 5.0;
    for seed in 0..5 {
        let p = generate_pair(seed, &spec, 64).unwrap();
        for o in p.scene.objects.iter().filter(|o| o.class == 1) {
            let (cx, cy) = ((o.cx + 5.0) as usize, o.cy as usize);
            if cx >= 64 {
                continue;
            }
            let px = &p.rgb.data()[(cy * 64 + cx) * 3..][..3];
            for k in 0..3 {
                assert!((px[k] as f64 - o.colour[k]).abs() < 0.2, "seed {seed}");
            }
        }
    }
}

#[test]
fn full_deficiency_leaves_one_modality_per_object() {
    let mut spec = MisalignmentSpec::neutral();
    spec.deficiency_prob = 1.0;
    let mut seen = [false; 2];
    for seed in 0..20 {
        for o in generate_pair(seed, &spec, 64).unwrap().scene.objects {
            assert_ne!(o.visibility, Visibility::Both);
            seen[(o.visibility == Visibility::RgbOnly) as usize] = true;
        }
    }
    assert_eq!(seen, [true, true]);
}

#[test]
fn ground_truth_is_in_infrared_frame() {
    let spec = MisalignmentSpec::heavy();
    for seed in 0..10 {
        let p = generate_pair(seed, &spec, 64).unwrap();
        assert_eq!(p.gt.items.len(), p.scene.objects.len());
        for (d, o) in p.gt.items.iter().zip(&p.scene.objects) {
            assert_eq!(d.class, o.class);
            let (x, y) = d.bbox.center();
            assert!((x - o.cx).abs() < 1e-9 && (y - o.cy).abs() < 1e-9);
        }
    }
}

#[test]
fn resolution_ratio_blurs_rgb() {
    let mut low = MisalignmentSpec::neutral();
    low.resolution_ratio = 0.5;
    let tv = |v: &[f32]| -> f64 {
        (0..64 * 63).map(|i| ((v[(i + 64) * 3] - v[i * 3]) as f64).abs()).sum()
    };
    let mut sharper = 0;
    for seed in 0..5 {
        let a = generate_pair(seed, &MisalignmentSpec::neutral(), 64).unwrap();
        let b = generate_pair(seed, &low, 64).unwrap();
        sharper += (tv(a.rgb.data()) > tv(b.rgb.data())) as usize;
    }
    assert_eq!(sharper, 5);
}

#[test]
fn rejects_bad_inputs() {
    assert!(generate_pair(0, &MisalignmentSpec::neutral(), 4).is_err());
    let mut s = MisalignmentSpec::neutral();
    s.resolution_ratio = 0.0;
    assert!(generate_pair(0, &s, 64).is_err());
}

mod props {
    use proptest::prelude::*;
    use wmnet_core::synth::{generate_pair, MisalignmentSpec};

    fn spec() -> impl Strategy<Value = MisalignmentSpec> {
        (-8.0f64..8.0, -8.0f64..8.0, 0.25f64..2.0, 0.0f64..=1.0, 0.0f64..0.3, 0.1f64..1.5).prop_map(
            |(offset_x, offset_y, resolution_ratio, deficiency_prob, noise_sigma, illumination_gain)| MisalignmentSpec {
                offset_x,
                offset_y,
                resolution_ratio,
                deficiency_prob,
                noise_sigma,
                illumination_gain,
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pairs_are_bit_deterministic_and_in_range(seed: u64, s in spec(), canvas in 8usize..48) {
            let a = generate_pair(seed, &s, canvas).unwrap();
            let b = generate_pair(seed, &s, canvas).unwrap();
            prop_assert_eq!(a.rgb.data(), b.rgb.data());
            prop_assert_eq!(a.ir.data(), b.ir.data());
            prop_assert_eq!(&a.gt, &b.gt);
            prop_assert_eq!(a.rgb.shape(), &[canvas, canvas, 3]);
            prop_assert_eq!(a.ir.shape(), &[canvas, canvas, 1]);
            for v in a.rgb.data().iter().chain(a.ir.data()) {
                prop_assert!((0.0..=1.0).contains(v));
            }
            let n = canvas as f64;
            for d in &a.gt.items {
                let b = d.bbox;
                prop_assert!(0.0 <= b.x1 && b.x1 <= b.x2 && b.x2 <= n);
                prop_assert!(0.0 <= b.y1 && b.y1 <= b.y2 && b.y2 <= n);
                prop_assert!(d.class < 3);
                prop_assert_eq!(d.confidence, 1.0);
            }
        }
    }
}
