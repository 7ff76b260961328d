use proptest::prelude::*;
use zonescm::panel::Zone;
use zonescm::regions::{build_border_regions, Side};
use zonescm::synthgen::{generate, GeneratorSpec, Topology};

fn planar(seed: u64, diagonal_prob: f64, deletion_prob: f64) -> GeneratorSpec {
    GeneratorSpec {
        topology: Topology::RandomPlanar {
            diagonal_prob,
            deletion_prob,
        },
        ..GeneratorSpec::small(seed)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn regions_nest_and_respect_sides(seed in 0u64..10_000, diag in 0.0f64..1.0, del in 0.0f64..0.3) {
        let data = generate(&planar(seed, diag, del)).unwrap();
        let regions = build_border_regions(&data.graph, &data.panel, Default::default(), 4).unwrap();
        for side in [Side::North, Side::South] {
            for d in 1..4 {
                prop_assert!(regions.members(d, side).is_subset(regions.members(d + 1, side)));
            }
            let zones = regions.boundary.zones(side);
            for id in regions.members(4, side) {
                let zone = data.panel.unit(id).unwrap().zone;
                prop_assert!(zones.contains(&zone), "{id} in {zone:?} listed on {side}");
            }
        }
        prop_assert!(regions.members(4, Side::North).is_disjoint(regions.members(4, Side::South)));
    }

    #[test]
    fn depth_one_touches_the_other_side(seed in 0u64..10_000) {
        let data = generate(&planar(seed, 0.5, 0.1)).unwrap();
        let regions = build_border_regions(&data.graph, &data.panel, Default::default(), 1).unwrap();
        for (side, other) in [(Side::North, Side::South), (Side::South, Side::North)] {
            let other_zones = regions.boundary.zones(other);
            for id in regions.members(1, side) {
                let touches = data.graph.neighbors(id).any(|n| {
                    let zone = data.panel.unit(n).unwrap().zone;
                    other_zones.contains(&zone) || (zone == Zone::Split && regions.boundary_split.contains(n))
                });
                prop_assert!(touches, "{id} has no neighbour across the boundary");
            }
        }
    }
}
