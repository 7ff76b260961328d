use proptest::prelude::*;
use zonescm::did::{fit_did, DidSample, DidSpec, Observation, SeType};

fn sample(values: &[f64], units: usize) -> DidSample {
    let years = values.len() / units;
    let observations = values
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let unit = i / years;
            Observation {
                unit: format!("u{unit:02}"),
                year: 2016 + (i % years) as i32,
                treated: unit < units / 2,
                outcome: y,
                controls: Vec::new(),
            }
        })
        .collect();
    DidSample {
        treated_label: "north".into(),
        control_label: "south".into(),
        controls: Vec::new(),
        observations,
    }
}

fn panels() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (4usize..12).prop_flat_map(|units| (prop::collection::vec(-1.0f64..1.0, units * 7), Just(units)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn constant_shift_moves_only_the_intercept((values, units) in panels(), c in -5.0f64..5.0) {
        let spec = DidSpec::default();
        let a = fit_did(&sample(&values, units), &spec).unwrap();
        let shifted: Vec<f64> = values.iter().map(|y| y + c).collect();
        let b = fit_did(&sample(&shifted, units), &spec).unwrap();
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            if x.name == "Constant" {
                prop_assert!((y.estimate - x.estimate - c).abs() <= 1e-12 * (1.0 + c.abs()) * 10.0);
            } else {
                prop_assert!((y.estimate - x.estimate).abs() <= 1e-12, "{}: {} vs {}", x.name, x.estimate, y.estimate);
            }
        }
    }

    #[test]
    fn hc1_ignores_observation_order((values, units) in panels(), rotate in 1usize..50) {
        let spec = DidSpec { se_type: SeType::Hc1, ..DidSpec::default() };
        let s = sample(&values, units);
        let mut r = s.clone();
        let k = rotate % r.observations.len();
        r.observations.rotate_left(k);
        r.observations.reverse();
        let a = fit_did(&s, &spec).unwrap();
        let b = fit_did(&r, &spec).unwrap();
        prop_assert!((a.atet - b.atet).abs() <= 1e-12);
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            prop_assert_eq!(&x.name, &y.name);
            prop_assert!((x.se - y.se).abs() <= 1e-12 * (1.0 + x.se));
        }
    }

    #[test]
    fn p_values_are_probabilities((values, units) in panels()) {
        for se_type in [SeType::Hc1, SeType::ClusterByUnit] {
            for small_sample_t in [false, true] {
                let spec = DidSpec { se_type, small_sample_t, ..DidSpec::default() };
                let fit = fit_did(&sample(&values, units), &spec).unwrap();
                prop_assert!(fit.coefficients.iter().all(|c| (0.0..=1.0).contains(&c.p)));
            }
        }
    }
}
