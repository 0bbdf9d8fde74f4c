mod common;

use common::{memory_round_trip, placement_invariants, random_matrix, random_shape, shape_rng};
use pimsim::address_map::{AddressMap, DramGeometry};
use pimsim::layout::{convert_to_pim_aware, LayoutError, PimPlacement, PlacementPolicy};

#[test]
fn random_shapes_round_trip_through_memory() {
    let mut rng = shape_rng(11);
    for i in 0..200 {
        let s = random_shape(&mut rng);
        let p = PimPlacement::new(s.map.clone(), s.policy, s.out_dim, s.in_dim, 0).unwrap();
        let w = random_matrix(&mut rng, s.out_dim, s.in_dim);
        placement_invariants(&p).unwrap_or_else(|e| panic!("shape {i} {s:?}: {e}"));
        let back = memory_round_trip(&w, &p).unwrap_or_else(|e| panic!("shape {i} {s:?}: {e}"));
        assert_eq!(back, w, "shape {i}");
    }
}

#[test]
fn padding_is_zero_and_accounted() {
    let mut rng = shape_rng(3);
    for _ in 0..50 {
        let s = random_shape(&mut rng);
        let p = PimPlacement::new(s.map.clone(), s.policy, s.out_dim, s.in_dim, 0).unwrap();
        let w = random_matrix(&mut rng, s.out_dim, s.in_dim);
        let img = convert_to_pim_aware(&w, &p).unwrap();
        for m in s.out_dim..p.padded_out() {
            for k in 0..s.in_dim {
                let at = (p.address_of_element(m, k).unwrap() - img.base) as usize;
                assert_eq!(&img.bytes[at..at + 2], &[0, 0]);
            }
        }
        assert_eq!(p.padded_out() % (16 * s.policy.units()), 0);
        assert_eq!(p.padding_bytes(), p.padded_bytes() - s.out_dim * s.in_dim * 2);
    }
}

#[test]
fn row_must_be_most_significant() {
    use pimsim::address_map::Field::*;
    let g = DramGeometry { channels: 2, ..DramGeometry::default() };
    let map = AddressMap::new(g, &[Column, Bank, Row, Channel, Rank]).unwrap();
    let err = PimPlacement::new(map, PlacementPolicy::all_of(&g), 16, 16, 0).unwrap_err();
    assert!(matches!(err, LayoutError::Policy(_)));
}

#[test]
fn slab_beyond_bank_is_rejected() {
    let g = DramGeometry::default();
    let map = AddressMap::host_interleaved(g).unwrap();
    let err = PimPlacement::new(map, PlacementPolicy::all_of(&g), 4096, 4096, 0).unwrap_err();
    assert!(matches!(err, LayoutError::CapacityExceeded { .. }));
}
