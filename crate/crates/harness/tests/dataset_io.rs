use wmnet_core::synth::MisalignmentSpec;
use wmnet_harness::data::{generate_split, read_split, write_dataset, Split};
use wmnet_harness::DatasetSpec;

fn spec() -> DatasetSpec {
    DatasetSpec {
        misalignment: MisalignmentSpec::heavy(),
        canvas: 32,
        train_size: 5,
        val_size: 3,
        seed: 11,
    }
}

#[test]
fn written_dataset_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec();
    write_dataset(&s, dir.path()).unwrap();

    let reread = DatasetSpec::load(&dir.path().join("spec.txt")).unwrap();
    assert_eq!(reread, s);

    for split in [Split::Train, Split::Val] {
        let orig = generate_split(&s, split).unwrap();
        let back = read_split(&dir.path().join(split.name())).unwrap();
        assert_eq!(orig.len(), back.len());
        for (a, b) in orig.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.gt, b.gt);
            assert_eq!(a.rgb.shape(), b.rgb.shape());
            assert_eq!(a.ir.shape(), b.ir.shape());
            // 8-bit quantisation
            assert!(a.rgb.max_abs_diff(&b.rgb) <= 0.5 / 255.0 + 1e-6);
            assert!(a.ir.max_abs_diff(&b.ir) <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn annotation_lines_have_the_documented_fields() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&spec(), dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("train/annotations.jsonl")).unwrap();
    assert!(text.lines().count() > 0);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["class", "image_id", "x1", "x2", "y1", "y2"]);
        assert!(v["x1"].as_f64().unwrap() <= v["x2"].as_f64().unwrap());
        assert!(v["y1"].as_f64().unwrap() <= v["y2"].as_f64().unwrap());
    }
}

#[test]
fn missing_split_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(read_split(&dir.path().join("val")).is_err());
}

#[test]
fn spec_file_parses_inline_keys() {
    let s = DatasetSpec::parse_str("# heavy\noffset_x=5\nresolution_ratio=0.75\ndeficiency_prob=0.2\ncanvas=32\n").unwrap();
    assert_eq!(s.canvas, 32);
    assert_eq!(s.misalignment.offset_x, 5.0);
    assert_eq!(s.misalignment.resolution_ratio, 0.75);
    assert!(DatasetSpec::parse_str("canvas=30\n").is_err());
    assert!(DatasetSpec::parse_str("deficiency_prob=1.5\n").is_err());
    assert!(DatasetSpec::parse_str("bogus=1\n").is_err());
}
