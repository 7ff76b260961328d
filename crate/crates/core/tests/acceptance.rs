//! Acceptance suite: one PASS/FAIL line per criterion. Failures are
//! reported without failing the build unless `ACCEPTANCE_STRICT=1` is set.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zonescm::did::{did_2x2_oracle, did_placebo, fit_did, parallel_trends_test, DidSample, DidSpec, Observation};
use zonescm::inference::{donor_placebo_fits, in_time_placebo_series, rmspe_ratio_test};
use zonescm::panel::{PanelDataset, UnitMeta, Variable, YearMatrix, YearRange, Zone};
use zonescm::pipeline::{run, simulate, with_threads, RunConfig};
use zonescm::regions::{
    aggregate_region, build_border_regions, AdjacencyGraph, AggregateSeries, Boundary, RegionSet, Side,
};
use zonescm::scm::{fit_scm_series, inner_weights, weighted_objective, InnerConfig, PredictorSpec, ScmOptions};
use zonescm::synthgen::{generate, GeneratedData, GeneratorSpec, Topology};

const PRE: YearRange = YearRange {
    first: 2016,
    last: 2020,
};
const POST: YearRange = YearRange {
    first: 2021,
    last: 2022,
};
const ALL_YEARS: YearRange = YearRange {
    first: 2016,
    last: 2022,
};

/// Noise used by the recovery and null-panel criteria: 10% of the
/// calibrated outcome mean.
const SIGMA: f64 = 0.1 * 0.105;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn timed(name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    if let Some(b) = budget {
        if elapsed > b {
            o.pass = false;
            o.detail.push_str(&format!("; over budget {:.0} s", b.as_secs_f64()));
        }
    }
    println!(
        "{} {name}: {} [{:.1} s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    o.pass
}

fn random_series(label: &str, rng: &mut ChaCha8Rng) -> AggregateSeries {
    let level: f64 = rng.random_range(0.01..0.2);
    let growth: f64 = rng.random_range(1.1..1.8);
    let outcome = (0..ALL_YEARS.len())
        .map(|t| level * growth.powi(t as i32) * rng.random_range(0.9..1.1))
        .collect();
    let covariates = Variable::COVARIATES
        .iter()
        .map(|&v| {
            let values = (0..ALL_YEARS.len()).map(|_| rng.random_range(0.0..1.0)).collect();
            (v, (ALL_YEARS, values))
        })
        .collect();
    AggregateSeries {
        label: label.into(),
        members: vec![label.into()],
        years: ALL_YEARS,
        outcome,
        covariates,
    }
}

fn random_spec(n_predictors: usize, rng: &mut ChaCha8Rng) -> PredictorSpec {
    // at least one outcome lag, the rest split between lags and covariates
    let n_lags = rng.random_range(n_predictors.saturating_sub(5).max(1)..=n_predictors.min(PRE.len()));
    let mut lags: Vec<i32> = PRE.iter().collect();
    while lags.len() > n_lags {
        lags.remove(rng.random_range(0..lags.len()));
    }
    PredictorSpec {
        outcome_lag_years: lags,
        covariates: Variable::COVARIATES[..n_predictors - n_lags].to_vec(),
        ..PredictorSpec::default()
    }
}

fn on_simplex(x: &[f64]) -> bool {
    x.iter().all(|&v| v >= 0.0) && (x.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

fn simplex_feasibility() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad = 0;
    for i in 0..1000 {
        let n_donors = rng.random_range(3..=50);
        let spec = random_spec(rng.random_range(3..=10), &mut rng);
        let treated = random_series("T", &mut rng);
        let donors: Vec<AggregateSeries> = (0..n_donors)
            .map(|j| random_series(&format!("D{j:02}"), &mut rng))
            .collect();
        let options = ScmOptions {
            seed: i,
            ..ScmOptions::default()
        };
        let fit = fit_scm_series(&treated, &donors, &spec, PRE, POST, &options).expect("random instance fits");
        if !on_simplex(&fit.w) || !on_simplex(&fit.v) {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("{bad} of 1000 fits off the simplex"))
}

/// Minimum over the simplex grid with step 1/100 for up to four donors.
fn grid_minimum(x1: &[f64], x0: &DMatrix<f64>, v: &[f64]) -> f64 {
    let j = x0.ncols();
    let steps = 100usize;
    let mut best = f64::INFINITY;
    let mut w = vec![0.0; j];
    let mut counts = vec![0usize; j];
    loop {
        let used: usize = counts[..j - 1].iter().sum();
        if used <= steps {
            counts[j - 1] = steps - used;
            for (wk, c) in w.iter_mut().zip(&counts) {
                *wk = *c as f64 / steps as f64;
            }
            best = best.min(weighted_objective(x1, x0, v, &w));
        }
        // odometer over the first j - 1 counts
        let mut k = 0;
        loop {
            if k == j - 1 {
                return best;
            }
            counts[k] += 1;
            if counts[..j - 1].iter().sum::<usize>() <= steps {
                break;
            }
            counts[k] = 0;
            k += 1;
        }
    }
}

fn inner_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..200 {
        let j = rng.random_range(2..=4);
        let k = rng.random_range(2..=8);
        let x0 = DMatrix::from_fn(k, j, |_, _| rng.random_range(-2.0..2.0));
        let x1: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let v: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let sol = inner_weights(&x1, &x0, &v, &InnerConfig::default()).expect("valid instance");
        let excess = sol.objective - grid_minimum(&x1, &x0, &v);
        worst = worst.max(excess);
    }
    outcome(
        worst <= 1e-4,
        format!("largest excess over the grid optimum {worst:.3e} (limit 1e-4)"),
    )
}

fn self_match() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut min_weight, mut max_gap) = (f64::INFINITY, 0.0f64);
    for i in 0..50 {
        let treated = random_series("T", &mut rng);
        let mut donors: Vec<AggregateSeries> = (0..rng.random_range(5..40))
            .map(|j| random_series(&format!("D{j:02}"), &mut rng))
            .collect();
        let twin = AggregateSeries {
            label: "TWIN".into(),
            members: vec!["TWIN".into()],
            ..treated.clone()
        };
        let at = rng.random_range(0..=donors.len());
        donors.insert(at, twin);
        let options = ScmOptions {
            seed: i,
            ..ScmOptions::default()
        };
        let fit = fit_scm_series(&treated, &donors, &PredictorSpec::default(), PRE, POST, &options).unwrap();
        min_weight = min_weight.min(fit.weight_of("TWIN"));
        for y in PRE.iter() {
            max_gap = max_gap.max(fit.gap_at(y).unwrap().abs());
        }
    }
    outcome(
        min_weight >= 0.999 && max_gap <= 1e-6,
        format!("min twin weight {min_weight:.6}, max pre gap {max_gap:.2e} over 50 instances"),
    )
}

struct Prepared {
    data: GeneratedData,
    regions: RegionSet,
    treated: AggregateSeries,
    donors: Vec<AggregateSeries>,
}

fn prepare(spec: &GeneratorSpec) -> Prepared {
    let data = generate(spec).unwrap();
    let regions = build_border_regions(&data.graph, &data.panel, spec.boundary, 3).unwrap();
    let depth = spec.planted.depth;
    let treated = aggregate_region(&data.panel, regions.members(depth, Side::North), "treated").unwrap();
    let donors = data
        .panel
        .unit_ids_in_zones(&[Zone::SE3, Zone::SE4])
        .iter()
        .map(|id| AggregateSeries::from_unit(&data.panel, data.panel.unit_index(id).unwrap()))
        .collect();
    Prepared {
        data,
        regions,
        treated,
        donors,
    }
}

fn planted_recovery() -> Outcome {
    let mut gap_sums: BTreeMap<i32, f64> = BTreeMap::new();
    let mut p_values = Vec::new();
    let seeds = 20;
    let mut truth = BTreeMap::new();
    for seed in 0..seeds {
        let spec = GeneratorSpec {
            noise_sd: SIGMA,
            ..GeneratorSpec::small(seed)
        };
        let p = prepare(&spec);
        let options = ScmOptions {
            seed,
            ..ScmOptions::default()
        };
        let pspec = PredictorSpec::default();
        let fit = fit_scm_series(&p.treated, &p.donors, &pspec, PRE, POST, &options).unwrap();
        for y in POST.iter() {
            *gap_sums.entry(y).or_default() += fit.gap_at(y).unwrap();
        }
        let placebos = donor_placebo_fits(&p.donors, &pspec, PRE, POST, &options).unwrap();
        p_values.push(rmspe_ratio_test(&fit, &placebos, None).pseudo_p);
        truth = p.data.truth.effects_by_year.clone();
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for (y, sum) in &gap_sums {
        let mean = sum / seeds as f64;
        let t = truth[y];
        let rel = (mean - t) / t.abs();
        pass &= rel.abs() <= 0.15;
        parts.push(format!("{y}: mean gap {mean:.4} vs {t} ({:+.1}%)", 100.0 * rel));
    }
    let mean_p = p_values.iter().sum::<f64>() / p_values.len() as f64;
    let hits = p_values.iter().filter(|&&p| p <= 0.05).count();
    pass &= mean_p <= 0.05;
    parts.push(format!(
        "mean pseudo-p {mean_p:.4} (limit 0.05), {hits}/{seeds} seeds at or below 0.05"
    ));
    outcome(pass, parts.join("; "))
}

fn did_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = |post_year| DidSpec {
        post_year,
        year_fixed_effects: false,
        ..DidSpec::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n_units = rng.random_range(2..12);
        let n_years = rng.random_range(2..8);
        let post_year = 2016 + rng.random_range(1..n_years);
        let n_treated = rng.random_range(1..n_units);
        let mut observations = Vec::new();
        for u in 0..n_units {
            for t in 0..n_years {
                observations.push(Observation {
                    unit: format!("u{u}"),
                    year: 2016 + t,
                    treated: u < n_treated,
                    outcome: rng.random_range(-1.0..1.0),
                    controls: Vec::new(),
                });
            }
        }
        let sample = DidSample {
            treated_label: "north".into(),
            control_label: "south".into(),
            controls: Vec::new(),
            observations,
        };
        let fit = fit_did(&sample, &spec(post_year)).unwrap();
        let oracle = did_2x2_oracle(&sample, post_year).unwrap();
        worst = worst.max((fit.atet - oracle).abs());
    }
    outcome(
        worst <= 1e-12,
        format!("largest |fit - oracle| {worst:.2e} over 500 panels"),
    )
}

fn exact_ols() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let unit_fx: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..0.2)).collect();
    let year_fx: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..0.1)).collect();
    let delta = -0.02;
    let mut observations = Vec::new();
    for (u, a) in unit_fx.iter().enumerate() {
        for (t, l) in year_fx.iter().enumerate() {
            let year = 2016 + t as i32;
            let treated = u < 6;
            let effect = if treated && year >= 2020 { delta } else { 0.0 };
            observations.push(Observation {
                unit: format!("u{u:02}"),
                year,
                treated,
                outcome: a + l + effect,
                controls: Vec::new(),
            });
        }
    }
    let sample = DidSample {
        treated_label: "north".into(),
        control_label: "south".into(),
        controls: Vec::new(),
        observations,
    };
    let fit = fit_did(&sample, &DidSpec::default()).unwrap();
    let did_err = (fit.atet - delta).abs();

    let mut lines = Vec::new();
    for (u, treated) in [(0, true), (1, false)] {
        for year in 2016..2020 {
            let intercept = if treated { 0.05 } else { 0.12 };
            lines.push(Observation {
                unit: format!("g{u}"),
                year,
                treated,
                outcome: intercept + 0.013 * (year - 2016) as f64,
                controls: Vec::new(),
            });
        }
    }
    let parallel = DidSample {
        treated_label: "north".into(),
        control_label: "south".into(),
        controls: Vec::new(),
        observations: lines,
    };
    let interaction = parallel_trends_test(&parallel, &DidSpec::default())
        .unwrap()
        .interaction
        .estimate;
    outcome(
        did_err <= 1e-10 && interaction.abs() <= 1e-12,
        format!(
            "|atet + 0.02| = {did_err:.2e} (limit 1e-10), parallel-lines interaction {interaction:.2e} (limit 1e-12)"
        ),
    )
}

fn placebo_discipline() -> Outcome {
    let seeds = 50u64;
    let (mut scm_ok, mut did_ok) = (0, 0);
    let mut worst_gap = 0.0f64;
    for seed in 0..seeds {
        let mut spec = GeneratorSpec {
            noise_sd: SIGMA,
            ..GeneratorSpec::small(1000 + seed)
        };
        spec.planted.effects.clear();
        let p = prepare(&spec);
        let options = ScmOptions {
            seed,
            ..ScmOptions::default()
        };
        let placebo = in_time_placebo_series(
            &p.treated,
            &p.donors,
            &PredictorSpec::default(),
            PRE,
            POST,
            2018,
            &options,
        )
        .unwrap();
        worst_gap = worst_gap.max(placebo.max_abs_gap);
        if placebo.max_abs_gap <= 2.0 * SIGMA {
            scm_ok += 1;
        }
        let depth = spec.planted.depth;
        let sample = DidSample::from_panel(
            &p.data.panel,
            p.regions.members(depth, Side::North),
            p.regions.members(depth, Side::South),
            &[],
            ("north", "south"),
        )
        .unwrap();
        let fit = did_placebo(&sample, &DidSpec::default(), 2018).unwrap();
        if fit.atet_coefficient().t.abs() < 2.0 {
            did_ok += 1;
        }
    }
    let need = (0.9 * seeds as f64).ceil() as usize;
    outcome(
        scm_ok >= need && did_ok >= need,
        format!(
            "SCM placebo max |gap| <= 2 sigma in {scm_ok}/{seeds} (worst {worst_gap:.4}), DiD placebo |t| < 2 in {did_ok}/{seeds}; need {need}"
        ),
    )
}

fn toy_panel(zones: &[(&str, Zone)]) -> PanelDataset {
    let years = YearRange::new(2016, 2017);
    let units: Vec<UnitMeta> = zones.iter().map(|(id, z)| UnitMeta::new(*id, *id, *z)).collect();
    let n = units.len();
    PanelDataset::new(units, years, YearMatrix::from_fn(n, years, |_, _| 0.0), BTreeMap::new()).unwrap()
}

fn ids(list: &[&str]) -> BTreeSet<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn region_correctness() -> Outcome {
    let mut failures = Vec::new();

    // path A - B - C - D
    let panel = toy_panel(&[("A", Zone::SE2), ("B", Zone::SE2), ("C", Zone::SE3), ("D", Zone::SE3)]);
    let g = AdjacencyGraph::from_edges([("A", "B"), ("B", "C"), ("C", "D")]).unwrap();
    let r = build_border_regions(&g, &panel, Boundary::default(), 3).unwrap();
    let expected = [
        (1, Side::North, ids(&["B"])),
        (2, Side::North, ids(&["A", "B"])),
        (1, Side::South, ids(&["C"])),
        (2, Side::South, ids(&["C", "D"])),
    ];
    for (d, side, want) in expected {
        if r.members(d, side) != &want {
            failures.push(format!("path {side} {d}"));
        }
    }

    // 4 x 4 rook grid, rows north to south:
    //   SE1   SE2   SE2   SE2
    //   SE2   SE2   SPLIT SPLIT
    //   SE3   SE3   SE3   SE3
    //   SE3   SE4   SE4   SPLIT
    let layout = [
        [Zone::SE1, Zone::SE2, Zone::SE2, Zone::SE2],
        [Zone::SE2, Zone::SE2, Zone::Split, Zone::Split],
        [Zone::SE3, Zone::SE3, Zone::SE3, Zone::SE3],
        [Zone::SE3, Zone::SE4, Zone::SE4, Zone::Split],
    ];
    let name = |r: usize, c: usize| format!("r{r}c{c}");
    let names: Vec<(String, Zone)> = (0..4)
        .flat_map(|r| (0..4).map(move |c| (r, c)))
        .map(|(r, c)| (name(r, c), layout[r][c]))
        .collect();
    let zones: Vec<(&str, Zone)> = names.iter().map(|(n, z)| (n.as_str(), *z)).collect();
    let panel = toy_panel(&zones);
    let mut edges = Vec::new();
    for r in 0..4 {
        for c in 0..4 {
            if c + 1 < 4 {
                edges.push((name(r, c), name(r, c + 1)));
            }
            if r + 1 < 4 {
                edges.push((name(r, c), name(r + 1, c)));
            }
        }
    }
    let g = AdjacencyGraph::from_edges(edges).unwrap();
    let r = build_border_regions(&g, &panel, Boundary::default(), 3).unwrap();
    let north1 = ids(&["r0c2", "r0c3", "r1c0", "r1c1"]);
    let north2 = ids(&["r0c0", "r0c1", "r0c2", "r0c3", "r1c0", "r1c1"]);
    let south1 = ids(&["r2c0", "r2c1", "r2c2", "r2c3"]);
    let south2 = ids(&["r2c0", "r2c1", "r2c2", "r2c3", "r3c0", "r3c1", "r3c2"]);
    let expected = [
        (1, Side::North, &north1),
        (2, Side::North, &north2),
        (3, Side::North, &north2),
        (1, Side::South, &south1),
        (2, Side::South, &south2),
        (3, Side::South, &south2),
    ];
    for (d, side, want) in expected {
        if r.members(d, side) != want {
            failures.push(format!("grid {side} {d}: {:?}", r.members(d, side)));
        }
    }
    if r.excluded != ids(&["r1c2", "r1c3", "r3c3"]) || r.boundary_split != ids(&["r1c2", "r1c3"]) {
        failures.push("grid split sets".into());
    }

    let mut nesting_bad = 0;
    for seed in 0..100 {
        let spec = GeneratorSpec {
            topology: Topology::RandomPlanar {
                diagonal_prob: 0.5,
                deletion_prob: 0.15,
            },
            ..GeneratorSpec::small(seed)
        };
        let data = generate(&spec).unwrap();
        let r = build_border_regions(&data.graph, &data.panel, spec.boundary, 3).unwrap();
        for side in [Side::North, Side::South] {
            if !(r.members(1, side).is_subset(r.members(2, side)) && r.members(2, side).is_subset(r.members(3, side))) {
                nesting_bad += 1;
            }
        }
    }
    if nesting_bad > 0 {
        failures.push(format!("nesting broken {nesting_bad} times"));
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "toy graphs match, nesting holds on 100 random planar graphs".into()
        } else {
            failures.join(", ")
        },
    )
}

fn calibration() -> Outcome {
    let data = generate(&GeneratorSpec::default()).unwrap();
    let panel = &data.panel;
    let mean_at = |var: Variable, year: Option<i32>| {
        let values: Vec<f64> = (0..panel.n_units())
            .flat_map(|u| {
                panel
                    .years()
                    .iter()
                    .filter(move |y| year.is_none_or(|t| t == *y))
                    .map(move |y| panel.value(var, u, y))
            })
            .collect();
        values.iter().sum::<f64>() / values.len() as f64
    };
    let outcome_mean = mean_at(Variable::Outcome, None);
    let income_mean = mean_at(Variable::DisposableIncome, None);
    let growth = mean_at(Variable::Outcome, Some(2022)) / mean_at(Variable::Outcome, Some(2016));
    let ok_outcome = (outcome_mean / 0.105 - 1.0).abs() <= 0.05;
    let ok_income = (income_mean / 210_002.0 - 1.0).abs() <= 0.05;
    let ok_growth = (12.0..=22.0).contains(&growth);
    outcome(
        ok_outcome && ok_income && ok_growth,
        format!("outcome mean {outcome_mean:.4} (target 0.105), income mean {income_mean:.0} (target 210002), growth 2016-2022 {growth:.2} (range 12-22)"),
    )
}

fn pipeline_scale() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    simulate(&GeneratorSpec::default(), &data_dir).unwrap();
    let mut config = RunConfig::load(&data_dir.join("config.toml")).unwrap();
    config.out_dir = tmp.path().join("out");
    let start = Instant::now();
    let summary = with_threads(Some(1), || run(config)).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let ratio_files = summary.files.iter().filter(|f| f.ends_with("ratio_test.json")).count();
    outcome(
        elapsed < 120.0 && ratio_files == 3,
        format!(
            "290 units, 234 donors, 3 depths with donor placebo sweep in {elapsed:.1} s on one thread (limit 120 s)"
        ),
    )
}

fn main() {
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));
    let results = [
        timed(
            "simplex feasibility",
            Some(Duration::from_secs(60)),
            simplex_feasibility,
        ),
        timed(
            "inner-solver optimality",
            Some(Duration::from_secs(30)),
            inner_optimality,
        ),
        timed("self-match", None, self_match),
        timed("planted-effect recovery", minutes(5), planted_recovery),
        timed("DiD oracle equivalence", None, did_oracle),
        timed("exact OLS recovery", None, exact_ols),
        timed("placebo discipline", None, placebo_discipline),
        timed("region construction", None, region_correctness),
        timed("calibration fidelity", None, calibration),
        timed("pipeline scale", minutes(2), pipeline_scale),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
