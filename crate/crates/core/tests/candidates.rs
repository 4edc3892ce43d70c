mod support;

use lesiondet::candidates::{candidates_at, extract_candidates, lesion_points, ProbabilityMap};
use lesiondet::dataset::LesionAnnotation;
use lesiondet::imaging::{BitGrid, Image};
use support::oracles::random_probability_map;

#[test]
fn retained_candidates_are_far_apart() {
    for seed in 0..200 {
        let map = random_probability_map(seed, 96, 80, 0.5);
        let cands = extract_candidates(&map, 0.5, 15.0).unwrap();
        for (i, a) in cands.iter().enumerate() {
            assert!(a.score > 0.5);
            for b in &cands[i + 1..] {
                let d = ((a.position_mm.0 - b.position_mm.0).powi(2) + (a.position_mm.1 - b.position_mm.1).powi(2)).sqrt();
                assert!(d > 15.0, "map {seed}: {d} mm");
            }
        }
        for w in cands.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }
}

#[test]
fn thresholds_are_nested() {
    let levels: Vec<f32> = (0..10).map(|k| 0.5 + 0.05 * k as f32).collect();
    for seed in 0..200 {
        let cands = extract_candidates(&random_probability_map(seed, 96, 80, 0.5), 0.5, 15.0).unwrap();
        for w in levels.windows(2) {
            let lo = candidates_at(&cands, w[0]);
            let hi = candidates_at(&cands, w[1]);
            assert!(hi.iter().all(|c| lo.contains(c)));
            assert!(hi.len() <= lo.len());
        }
    }
}

#[test]
fn every_above_threshold_pixel_is_covered() {
    for seed in 0..50 {
        let map = random_probability_map(seed, 64, 64, 0.5);
        let cands = extract_candidates(&map, 0.5, 15.0).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if map.get(x, y) > 0.5 {
                    let covered = cands.iter().any(|c| {
                        let d2 = (c.position_mm.0 - x as f64 * 0.5).powi(2) + (c.position_mm.1 - y as f64 * 0.5).powi(2);
                        d2 <= 15.0 * 15.0 && c.score >= map.get(x, y)
                    });
                    assert!(covered, "map {seed} pixel ({x}, {y})");
                }
            }
        }
    }
}

#[test]
fn empty_map_has_no_candidates() {
    let map = ProbabilityMap::new(Image::filled(32, 32, 0.2, 0.5).unwrap()).unwrap();
    assert!(extract_candidates(&map, 0.5, 15.0).unwrap().is_empty());
}

#[test]
fn lesion_point_is_the_mask_centroid() {
    let mask = BitGrid::from_fn(50, 50, |x, y| (10..20).contains(&x) && (30..34).contains(&y));
    let lesion = LesionAnnotation {
        id: "a".into(),
        mask,
        center_of_mass_mm: (0.0, 0.0),
    };
    let pts = lesion_points("img", &[lesion], 0.2).unwrap();
    assert!((pts[0].position_mm.0 - 14.5 * 0.2).abs() < 1e-12);
    assert!((pts[0].position_mm.1 - 31.5 * 0.2).abs() < 1e-12);
}
