//! Packing and unpacking frames on grid layouts.

use grid_core::io::{decode_raw, encode_raw};
use grid_core::layout::cell_index;
use grid_core::{pack, unpack, Error, Frame, GridSize, GridTensor, LayoutSpec};
use ndarray::Array3;
use proptest::prelude::*;

fn frames_for(layout: &LayoutSpec, seed: u64) -> Vec<Frame> {
    let [h, w, c] = layout.frame_shape();
    (0..layout.frame_count())
        .map(|k| {
            Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
                ((seed as usize + k * 7919 + y * 131 + x * 17 + ch * 3) % 1009) as f64 / 1009.0
            })
        })
        .collect()
}

fn arb_layout() -> impl Strategy<Value = LayoutSpec> {
    (1usize..=5, 1usize..=5, 1usize..=6, 1usize..=6, prop::sample::select(vec![1usize, 3]))
        .prop_map(|(r, c, h, w, ch)| LayoutSpec::new(r, c, h, w, ch).unwrap())
}

proptest! {
    #[test]
    fn pack_then_unpack_is_identity(layout in arb_layout(), seed in any::<u32>()) {
        let frames = frames_for(&layout, seed as u64);
        let grid = pack(&frames, &layout).unwrap();
        prop_assert_eq!(grid.data().shape(), &layout.grid_shape()[..]);
        prop_assert_eq!(unpack(&grid).unwrap(), frames);
    }

    #[test]
    fn pixels_land_in_their_cell(layout in arb_layout(), seed in any::<u32>()) {
        let frames = frames_for(&layout, seed as u64);
        let grid = pack(&frames, &layout).unwrap();
        let [h, w, c] = layout.frame_shape();
        for r in 0..layout.rows {
            for col in 0..layout.cols {
                let k = r * layout.cols + col;
                prop_assert_eq!(cell_index(r, col, &layout).unwrap(), k);
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            prop_assert_eq!(grid.data()[[r * h + y, col * w + x, ch]], frames[k][[y, x, ch]]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn raw_encoding_roundtrips_at_f32(layout in arb_layout(), seed in any::<u32>()) {
        let grid = pack(&frames_for(&layout, seed as u64), &layout).unwrap();
        let rounded = GridTensor::new(grid.data().mapv(|v| v as f32 as f64), layout).unwrap();
        prop_assert_eq!(decode_raw(&encode_raw(&grid)).unwrap(), rounded);
    }
}

#[test]
fn wrong_frame_count_is_rejected() {
    let layout = LayoutSpec::new(2, 3, 4, 4, 1).unwrap();
    let frames = frames_for(&layout, 1);
    let err = pack(&frames[..5], &layout).unwrap_err();
    assert!(matches!(err, Error::FrameCountMismatch { expected: 6, got: 5 }));
}

#[test]
fn wrong_frame_shape_is_rejected() {
    let layout = LayoutSpec::new(1, 2, 4, 4, 1).unwrap();
    let frames = vec![Array3::zeros((4, 4, 1)), Array3::zeros((4, 5, 1))];
    assert!(matches!(
        pack(&frames, &layout).unwrap_err(),
        Error::FrameShapeMismatch { index: 1, .. }
    ));
}

#[test]
fn cell_index_out_of_range() {
    let layout = LayoutSpec::new(2, 2, 1, 1, 1).unwrap();
    assert!(matches!(
        cell_index(2, 0, &layout),
        Err(Error::IndexOutOfRange { row: 2, .. })
    ));
}

#[test]
fn empty_layouts_are_invalid() {
    assert!(LayoutSpec::new(0, 2, 4, 4, 1).is_err());
    assert!(LayoutSpec::new(2, 2, 0, 4, 1).is_err());
    assert!(LayoutSpec::new(2, 2, 4, 4, 0).is_err());
}

#[test]
fn grid_tensor_rejects_mismatched_data() {
    let layout = LayoutSpec::new(2, 2, 3, 3, 1).unwrap();
    assert!(GridTensor::new(Array3::zeros((6, 5, 1)), layout).is_err());
}

#[test]
fn grid_sizes_parse() {
    let g: GridSize = "4x6".parse().unwrap();
    assert_eq!((g.rows, g.cols), (4, 6));
    assert_eq!(g.to_string(), "4x6");
    for bad in ["4", "x4", "0x2", "4x", "ax2"] {
        assert!(bad.parse::<GridSize>().is_err(), "{bad}");
    }
}
