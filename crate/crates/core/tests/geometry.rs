use proptest::prelude::*;

use swin_mae::geometry::{
    cyclic_shift_with_mask, cyclic_unshift_grid, expand_index, invert_permutation, merge_index, partition_windows,
    patch_partition_index, reverse_windows, roll_index, shift_attention_mask, PatchSpec, TokenGrid,
};
use swin_mae::masking::RngState;
use swin_mae::tensor::Tensor;

fn grid(b: usize, h: usize, w: usize, dim: usize, seed: u64) -> TokenGrid {
    let mut r = RngState::new(seed);
    TokenGrid::new(h, w, Tensor::from_fn(&[b, h * w, dim], |_| r.uniform())).unwrap()
}

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&i| i < p.len() && !std::mem::replace(&mut seen[i], true))
}

proptest! {
    #[test]
    fn window_round_trip(b in 1usize..3, nh in 1usize..4, nw in 1usize..4, win in 1usize..4, seed in any::<u64>()) {
        let g = grid(b, nh * win, nw * win, 3, seed);
        let w = partition_windows(&g, win).unwrap();
        prop_assert_eq!(w.shape(), &[b * nh * nw, win * win, 3][..]);
        let back = reverse_windows(&w, b, nh * win, nw * win, win).unwrap();
        prop_assert!(back.data.bit_eq(&g.data));
    }

    #[test]
    fn shift_round_trip(n in 2usize..5, win in 2usize..4, seed in any::<u64>()) {
        let side = n * win;
        let shift = win / 2;
        let g = grid(1, side, side, 2, seed);
        let (s, mask) = cyclic_shift_with_mask(&g, shift, win).unwrap();
        prop_assert_eq!(mask.shape(), &[n * n, win * win, win * win][..]);
        let back = cyclic_unshift_grid(&s, shift).unwrap();
        prop_assert!(back.data.bit_eq(&g.data));
    }

    #[test]
    fn shift_mask_is_symmetric_with_open_diagonal(n in 2usize..5, win in 2usize..4) {
        let side = n * win;
        let m = shift_attention_mask(side, side, win, win / 2).unwrap();
        let k = win * win;
        for w in 0..n * n {
            for i in 0..k {
                prop_assert_eq!(m.at(&[w, i, i]), 0.0);
                for j in 0..k {
                    prop_assert_eq!(m.at(&[w, i, j]), m.at(&[w, j, i]));
                }
            }
        }
    }

    #[test]
    fn index_maps_are_permutations(h in 1usize..5, w in 1usize..5, f in 1usize..4) {
        let (h2, w2) = (2 * h, 2 * w);
        prop_assert!(is_permutation(&merge_index(h2, w2).unwrap()));
        prop_assert!(is_permutation(&roll_index(h2, w2, 1)));
        let e = expand_index(h, w, f);
        prop_assert!(is_permutation(&e));
        let inv = invert_permutation(&e);
        prop_assert!(e.iter().enumerate().all(|(i, &j)| inv[j] == i));
        let spec = PatchSpec { patch_side: f, image_h: h * f, image_w: w * f, channels: 2 };
        prop_assert!(is_permutation(&patch_partition_index(&spec).unwrap()));
    }
}

#[test]
fn odd_grids_cannot_merge() {
    assert!(merge_index(3, 4).is_err());
}

#[test]
fn non_divisible_windows_rejected() {
    let g = grid(1, 5, 5, 2, 0);
    assert!(partition_windows(&g, 2).is_err());
}
