//! Generators checked against measurement oracles, plus the folder loader.

use std::path::Path;

use grid_core::condition::Label;
use grid_core::data::*;
use grid_core::io::{load_image, save_frames, save_png};
use grid_core::{unpack, Error, Frame, LayoutSpec};
use ndarray::Array3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Angle of the frame's centroid around `center`, clockwise from straight up
/// on screen (y grows downwards).
fn screen_angle(frame: &Frame, center: [f64; 2]) -> f64 {
    let (x, y) = centroid(frame).unwrap();
    (x - center[0]).atan2(center[1] - y).to_degrees()
}

fn wrap(deg: f64) -> f64 {
    (deg + 180.0).rem_euclid(360.0) - 180.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn translation_labels_match_centroid_drift(vx in -1.5f64..1.5, vy in -1.5f64..1.5, shape in 0usize..3) {
        prop_assume!(vx.abs().max(vy.abs()) > 0.2 && (vx.abs() - vy.abs()).abs() > 0.1);
        let spec = SequenceSpec {
            velocity: [vx, vy],
            shape: Shape::ALL[shape],
            size: Some(4.0),
            start: Some([24.0, 24.0]),
            ..SequenceSpec::new(SequenceKind::Translate, 6, 48, 48)
        };
        let seq = gen_sequence(&spec).unwrap();
        let (x0, y0) = centroid(&seq.frames[0]).unwrap();
        let (x5, y5) = centroid(&seq.frames[5]).unwrap();
        prop_assert!((x5 - x0 - 5.0 * vx).abs() <= 0.5);
        prop_assert!((y5 - y0 - 5.0 * vy).abs() <= 0.5);
        let expected = if vx.abs() > vy.abs() {
            if x5 > x0 { Label::TranslateRight } else { Label::TranslateLeft }
        } else if y5 > y0 { Label::TranslateDown } else { Label::TranslateUp };
        prop_assert_eq!(seq.labels[0], expected);
        prop_assert_eq!(seq.labels[1], Shape::ALL[shape].label());
    }

    #[test]
    fn rotation_labels_match_marker_direction(cw in any::<bool>(), triangle in any::<bool>()) {
        let step = if cw { 15.0 } else { -15.0 };
        let spec = SequenceSpec {
            angular_step: step,
            shape: if triangle { Shape::Triangle } else { Shape::Square },
            ..SequenceSpec::new(SequenceKind::RotateRing, 24, 48, 48)
        };
        let seq = gen_sequence(&spec).unwrap();
        let c = [24.0, 24.0];
        for k in 0..23 {
            let turn = wrap(screen_angle(&seq.frames[k + 1], c) - screen_angle(&seq.frames[k], c));
            prop_assert!((turn - step).abs() < 3.0, "frame {}: turned {}", k, turn);
        }
        prop_assert_eq!(seq.labels[0], if cw { Label::RotateCw } else { Label::RotateCcw });
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        let mut a = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ChaCha8Rng::seed_from_u64(seed);
        let sa = random_translation(8, 16, 16, &mut a);
        let sb = random_translation(8, 16, 16, &mut b);
        prop_assert_eq!(&sa, &sb);
        prop_assert_eq!(gen_sequence(&sa).unwrap(), gen_sequence(&sb).unwrap());
    }
}

#[test]
fn ring_closes_after_a_full_turn() {
    let spec = SequenceSpec::new(SequenceKind::RotateRing, 24, 32, 32);
    assert_eq!(spec.angular_step, 15.0);
    assert_eq!(spec.ring_radius, 2.0);
    assert_eq!(render_frame(&spec, 24).unwrap(), render_frame(&spec, 0).unwrap());
    assert_ne!(render_frame(&spec, 12).unwrap(), render_frame(&spec, 0).unwrap());
}

#[test]
fn zero_velocity_is_static() {
    let seq = gen_sequence(&SequenceSpec::new(SequenceKind::Translate, 5, 16, 16)).unwrap();
    assert!(seq.frames.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(seq.labels[0], Label::Static);
}

#[test]
fn bounce_stays_inside_the_frame() {
    let spec = SequenceSpec {
        velocity: [3.0, 1.7],
        size: Some(3.0),
        ..SequenceSpec::new(SequenceKind::Bounce, 40, 20, 24)
    };
    for f in gen_sequence(&spec).unwrap().frames {
        let mass: f64 = f.sum();
        assert!((mass - std::f64::consts::PI * 9.0).abs() < 2.0, "clipped: {mass}");
    }
}

#[test]
fn degradation_examples() {
    let frames: Vec<Frame> = (0..2)
        .map(|k| Array3::from_shape_fn((32, 32, 1), |(y, x, _)| ((x * 3 + y * 5 + k) % 7) as f64 / 7.0))
        .collect();
    let identity = DegradeSpec {
        gaussian_blur_sigma: 0.0,
        block_mask_ratio: 0.0,
        block_size: 8,
        seed: 0,
    };
    assert_eq!(degrade(&frames, &identity).unwrap(), frames);

    let spec = DegradeSpec { block_mask_ratio: 0.25, seed: 9, ..identity };
    let blocks = masked_blocks(&spec, 32, 32);
    assert_eq!(blocks.len(), 4);
    assert_eq!(blocks, masked_blocks(&spec, 32, 32));
    let out = degrade(&frames, &spec).unwrap();
    for f in &out {
        let zeroed = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .filter(|&(r, c)| {
                f.slice(ndarray::s![r * 8..r * 8 + 8, c * 8..c * 8 + 8, ..])
                    .iter()
                    .all(|&v| v == 0.0)
            })
            .count();
        assert_eq!(zeroed, 4);
    }

    let flat = Array3::from_elem((9, 11, 1), 0.37);
    let blurred = gaussian_blur(&flat, 1.7);
    assert!(blurred.iter().all(|&v| (v - 0.37).abs() < 1e-12));
    assert!(DegradeSpec { block_mask_ratio: 1.0, ..identity }.validate().is_err());
    assert!(DegradeSpec { gaussian_blur_sigma: -1.0, ..identity }.validate().is_err());
}

fn write_sequence(dir: &Path, n: usize, size: usize) -> Vec<Frame> {
    let frames: Vec<Frame> = (0..n)
        .map(|k| Array3::from_shape_fn((size, size, 1), |(y, x, _)| ((x + y + k) % 5 * 51) as f64 / 255.0))
        .collect();
    save_frames(dir, &frames).unwrap();
    frames
}

#[test]
fn folder_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let frames = write_sequence(dir.path(), 16, 8);
    std::fs::write(dir.path().join(LABEL_FILE), "TRANSLATE_LEFT, SHAPE_SQUARE\n").unwrap();
    let layout = LayoutSpec::new(4, 4, 8, 8, 1).unwrap();
    let (grid, cond) = load_folder(dir.path(), &layout).unwrap();
    assert_eq!(unpack(&grid).unwrap(), frames);
    assert_eq!(cond.content_labels, vec![Label::TranslateLeft, Label::ShapeSquare]);
    let rgb = LayoutSpec { channels: 3, ..layout };
    let (grid, _) = load_folder(dir.path(), &rgb).unwrap();
    assert_eq!(grid.data().shape(), &[32, 32, 3]);
}

#[test]
fn folder_errors_name_the_problem() {
    let layout = LayoutSpec::new(4, 4, 8, 8, 1).unwrap();

    let short = tempfile::tempdir().unwrap();
    write_sequence(short.path(), 15, 8);
    let err = load_folder(short.path(), &layout).unwrap_err();
    assert!(matches!(err, Error::CountMismatch { expected: 16, found: 15, .. }));
    assert!(err.to_string().contains("1 short"), "{err}");

    let mixed = tempfile::tempdir().unwrap();
    write_sequence(mixed.path(), 16, 8);
    let odd = mixed.path().join("frame_0003.png");
    save_png(&odd, &Array3::zeros((6, 8, 1))).unwrap();
    let names: Vec<_> = std::fs::read_dir(mixed.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 16, "{names:?}");
    match load_folder(mixed.path(), &layout).unwrap_err() {
        Error::SizeMismatch { path, got_h: 6, .. } => assert_eq!(path, odd),
        e => panic!("unexpected {e}"),
    }

    let broken = tempfile::tempdir().unwrap();
    write_sequence(broken.path(), 16, 8);
    let bad = broken.path().join("frame_0000.png");
    std::fs::write(&bad, b"not an image").unwrap();
    match load_folder(broken.path(), &layout).unwrap_err() {
        Error::UnreadableImage { path, .. } => assert_eq!(path, bad),
        e => panic!("unexpected {e}"),
    }
    assert!(load_image(&bad).is_err());
}

#[test]
fn synthetic_datasets_are_reproducible() {
    let layout = LayoutSpec::new(2, 3, 12, 12, 1).unwrap();
    for kind in [DatasetKind::Translate, DatasetKind::RotateRing, DatasetKind::Bounce] {
        let a = synth_dataset(kind, 3, &layout, 7).unwrap();
        assert_eq!(a, synth_dataset(kind, 3, &layout, 7).unwrap());
        assert_ne!(a, synth_dataset(kind, 3, &layout, 8).unwrap());
    }
}
