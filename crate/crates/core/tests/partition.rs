mod common;

use bevcap::bev_partition::{
    build_view_map, sector_of_cell, sector_of_offset, view_mask, GridSpec, ViewIndex, NUM_VIEWS,
};
use bevcap::Error;
use proptest::prelude::*;

#[test]
fn default_raster_matches_angle_reference() {
    let grid = GridSpec::default();
    let map = build_view_map(&grid).unwrap();
    let reference = common::sector_raster(180, 180);
    for r in 0..180 {
        for c in 0..180 {
            assert_eq!(map.get(r, c).get(), reference[r][c], "cell ({r}, {c})");
        }
    }
}

#[test]
fn default_populations_follow_square_geometry() {
    let hist = build_view_map(&GridSpec::default()).unwrap().histogram();
    let mut reference = [0usize; NUM_VIEWS];
    for row in common::sector_raster(180, 180) {
        for v in row {
            reference[v] += 1;
        }
    }
    assert_eq!(hist, reference);
    // Front and back wedges end on one raster edge, the side wedges on two.
    assert_eq!(hist[0], hist[3]);
    assert!(hist[1] == hist[2] && hist[2] == hist[4] && hist[4] == hist[5], "{hist:?}");
    assert!(hist[0] < 32400 / 6 && hist[1] > 32400 / 6, "{hist:?}");
    assert_eq!(hist.iter().sum::<usize>(), 32400);
}

#[test]
fn straight_ahead_and_behind() {
    let grid = GridSpec::centered(9, 9);
    assert_eq!(sector_of_cell(0, 4, &grid).unwrap(), ViewIndex::FRONT);
    assert_eq!(sector_of_cell(8, 4, &grid).unwrap(), ViewIndex::BACK);
    assert_eq!(sector_of_cell(4, 4, &grid).unwrap(), ViewIndex::FRONT);
    // Exactly 90° and 270° sit on wedge boundaries; the lower bound is inclusive.
    assert_eq!(sector_of_cell(4, 8, &grid).unwrap(), ViewIndex::BACK_RIGHT);
    assert_eq!(sector_of_cell(4, 0, &grid).unwrap(), ViewIndex::FRONT_LEFT);
    assert_eq!(sector_of_cell(1, 6, &grid).unwrap(), ViewIndex::FRONT_RIGHT);
}

#[test]
fn two_by_two_has_four_labels() {
    let map = build_view_map(&GridSpec::centered(2, 2)).unwrap();
    let labels: Vec<usize> = map.flat().map(|v| v.get()).collect();
    // Angles −45°, 45°, −135°, 135° from the forward axis.
    assert_eq!(labels, vec![5, 1, 4, 2]);
}

#[test]
fn out_of_range_cell_is_rejected() {
    let grid = GridSpec::centered(4, 4);
    assert!(matches!(sector_of_cell(4, 0, &grid), Err(Error::InputDomain(_))));
    assert!(matches!(sector_of_cell(0, 9, &grid), Err(Error::InputDomain(_))));
}

#[test]
fn masks_form_a_disjoint_cover() {
    let map = build_view_map(&GridSpec::default()).unwrap();
    let masks: Vec<_> = (0..NUM_VIEWS).map(|v| view_mask(&map, v).unwrap()).collect();
    for r in 0..180 {
        for c in 0..180 {
            let hits = masks.iter().filter(|m| m[[r, c]]).count();
            assert_eq!(hits, 1, "cell ({r}, {c})");
        }
    }
    assert!(matches!(view_mask(&map, 6), Err(Error::InputDomain(_))));
}

#[test]
fn front_mask_is_the_forward_wedge() {
    let map = build_view_map(&GridSpec::default()).unwrap();
    let mask = view_mask(&map, 0).unwrap();
    for r in 0..180 {
        for c in 0..180 {
            let (dr, dc) = (r as f64 - 89.5, c as f64 - 89.5);
            let theta = dc.atan2(-dr).to_degrees();
            assert_eq!(mask[[r, c]], (-30.0..30.0).contains(&theta), "cell ({r}, {c})");
        }
    }
}

#[test]
fn invalid_grids_are_rejected() {
    assert!(build_view_map(&GridSpec::centered(0, 3)).is_err());
    let mut g = GridSpec::centered(4, 4);
    g.ego_row = 10.0;
    assert!(build_view_map(&g).is_err());
    let mut g = GridSpec::centered(4, 4);
    g.sector_offset_deg = 60.0;
    assert!(build_view_map(&g).is_err());
}

fn near_boundary(theta_deg: f64) -> bool {
    let rel = (theta_deg + 30.0).rem_euclid(60.0);
    rel < 1e-6 || rel > 60.0 - 1e-6
}

proptest! {
    #[test]
    fn rotating_by_sixty_degrees_advances_the_sector(theta in 0.0f64..360.0, radius in 0.1f64..500.0) {
        prop_assume!(!near_boundary(theta));
        let grid = GridSpec::default();
        let at = |deg: f64| {
            let t = deg.to_radians();
            sector_of_offset(&grid, -radius * t.cos(), radius * t.sin()).get()
        };
        prop_assert_eq!(at(theta + 60.0), (at(theta) + 1) % NUM_VIEWS);
    }

    #[test]
    fn every_cell_agrees_with_the_reference(h in 1usize..40, w in 1usize..40) {
        let map = build_view_map(&GridSpec::centered(h, w)).unwrap();
        let reference = common::sector_raster(h, w);
        let mut hist = [0usize; NUM_VIEWS];
        for r in 0..h {
            for c in 0..w {
                prop_assert_eq!(map.get(r, c).get(), reference[r][c]);
                hist[reference[r][c]] += 1;
            }
        }
        prop_assert_eq!(map.histogram(), hist);
        if h >= 4 && w >= 4 {
            prop_assert!(hist.iter().all(|&n| n > 0));
        }
    }

    #[test]
    fn building_twice_is_identical(h in 1usize..30, w in 1usize..30) {
        let g = GridSpec::centered(h, w);
        prop_assert_eq!(build_view_map(&g).unwrap(), build_view_map(&g).unwrap());
    }
}
