use std::collections::BTreeMap;

use proptest::prelude::*;

use qlcontrol::config::ExperimentConfig;
use qlcontrol::discretization::{Grid, TimeGrid};
use qlcontrol::experiment::duality_defect;
use qlcontrol::geometry::SpatialDomain;

const SMOKE: &str = include_str!("../../../configs/linear_1d_smoke.toml");

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sweep_points_cover_the_product(lengths in prop::collection::vec(1usize..5, 1..4)) {
        let mut axes = BTreeMap::new();
        for (i, &len) in lengths.iter().enumerate() {
            axes.insert(format!("axis{i}"), (0..len).map(|v| toml::Value::Integer(v as i64)).collect());
        }
        let points = ExperimentConfig::sweep_points(&axes);
        prop_assert_eq!(points.len(), lengths.iter().product::<usize>());
        for p in &points {
            prop_assert_eq!(p.len(), lengths.len());
        }
    }

    #[test]
    fn discrete_duality_is_exact(nodes in 8usize..40, half_steps in 8usize..40, horizon in 0.01f64..2.0, seed in any::<u64>()) {
        let grid = Grid::new(SpatialDomain::interval(0.0, 1.0, nodes).unwrap());
        let time = TimeGrid::new(horizon, 2 * half_steps).unwrap();
        prop_assert!(duality_defect(&grid, time, 2, seed).unwrap() <= 1e-10);
    }

    #[test]
    fn config_survives_serialization(seed in 0..=i64::MAX as u64, size in 1e-4f64..1e-1) {
        let mut config = ExperimentConfig::from_str(SMOKE, "smoke").unwrap();
        config.seed = seed;
        config.initial_data = qlcontrol::config::InitialDataSection::Random { size };
        let text = toml::to_string(&config).unwrap();
        let back = ExperimentConfig::from_str(&text, "other").unwrap();
        prop_assert_eq!(back, config);
    }

    #[test]
    fn seeds_beyond_toml_integers_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let mut config = ExperimentConfig::from_str(SMOKE, "smoke").unwrap();
        config.seed = seed;
        prop_assert!(config.validate().is_err());
    }
}
