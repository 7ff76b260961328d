//! Calibrated synthetic panels with known treatment effects.
//!
//! Units sit on a grid filled row by row from north to south, zone by zone,
//! so the price-zone boundary is a horizontal staircase. Outcomes grow
//! exponentially, `Y_it = a_i g_i^(t - t0)`, with intercepts tied to the
//! covariates, plus Gaussian noise and planted effects on the north border.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{write_panel, PanelDataset, PanelError, UnitMeta, Variable, YearMatrix, YearRange, Zone};
use crate::regions::{build_border_regions, write_adjacency, AdjacencyGraph, Boundary, RegionError, Side};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("{path}: {message}")]
    Output { path: String, message: String },
}

/// Units per zone, listed north to south.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneLayout {
    pub se1: usize,
    pub se2: usize,
    /// Split units are placed between SE2 and SE3.
    pub split: usize,
    pub se3: usize,
    pub se4: usize,
}

impl ZoneLayout {
    /// 290 units with 234 in SE3 and SE4.
    pub const SWEDEN: ZoneLayout = ZoneLayout {
        se1: 14,
        se2: 35,
        split: 7,
        se3: 200,
        se4: 34,
    };

    /// 100 units on a 10 x 10 grid.
    pub const SMALL: ZoneLayout = ZoneLayout {
        se1: 10,
        se2: 25,
        split: 3,
        se3: 50,
        se4: 12,
    };

    pub fn n_units(&self) -> usize {
        self.se1 + self.se2 + self.split + self.se3 + self.se4
    }

    fn zones(&self) -> Vec<Zone> {
        [
            (Zone::SE1, self.se1),
            (Zone::SE2, self.se2),
            (Zone::Split, self.split),
            (Zone::SE3, self.se3),
            (Zone::SE4, self.se4),
        ]
        .iter()
        .flat_map(|&(z, n)| std::iter::repeat_n(z, n))
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Topology {
    /// Rook adjacency on the grid.
    Grid,
    /// Grid plus one random diagonal per cell with probability
    /// `diagonal_prob`, minus random grid edges with probability
    /// `deletion_prob` (never isolating a unit). Stays planar.
    RandomPlanar { diagonal_prob: f64, deletion_prob: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeModel {
    /// Mean of the untreated noiseless outcome over all cells (kW per capita).
    pub grand_mean: f64,
    /// Growth of the cross-unit mean from the first to the last year.
    pub growth_factor: f64,
    /// Standard deviation of unit log growth rates around the common rate.
    pub growth_dispersion: f64,
    /// Standard deviation of the idiosyncratic part of log intercepts.
    pub intercept_dispersion: f64,
    /// Loadings of log intercepts on standardized radiation, income and
    /// small-house share.
    pub radiation_loading: f64,
    pub income_loading: f64,
    pub housing_loading: f64,
}

impl Default for OutcomeModel {
    fn default() -> Self {
        Self {
            grand_mean: 0.105,
            growth_factor: 17.0,
            growth_dispersion: 0.0,
            intercept_dispersion: 0.35,
            radiation_loading: 0.25,
            income_loading: 0.15,
            housing_loading: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedEffect {
    /// Additive effect per calendar year; years before the first listed
    /// year get none.
    pub effects: BTreeMap<i32, f64>,
    /// North border depth whose units receive the effect.
    pub depth: usize,
}

impl Default for PlantedEffect {
    fn default() -> Self {
        Self {
            effects: BTreeMap::from([(2021, -0.04), (2022, -0.09)]),
            depth: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub years: YearRange,
    pub layout: ZoneLayout,
    pub grid_width: usize,
    pub topology: Topology,
    pub boundary: Boundary,
    pub outcome: OutcomeModel,
    /// Standard deviation of the per-cell Gaussian outcome noise.
    pub noise_sd: f64,
    pub planted: PlantedEffect,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            years: YearRange::new(2016, 2022),
            layout: ZoneLayout::SWEDEN,
            grid_width: 10,
            topology: Topology::Grid,
            boundary: Boundary::default(),
            outcome: OutcomeModel::default(),
            noise_sd: 0.005,
            planted: PlantedEffect::default(),
            seed: 2016,
        }
    }
}

impl GeneratorSpec {
    /// The 100-unit layout used for recovery experiments.
    pub fn small(seed: u64) -> Self {
        Self {
            layout: ZoneLayout::SMALL,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.years.is_empty() || self.years.len() < 2 {
            return bad(format!("need at least two years, got {}", self.years));
        }
        if self.layout.n_units() == 0 {
            return bad("no units".into());
        }
        if self.grid_width == 0 {
            return bad("grid width must be positive".into());
        }
        if !self.noise_sd.is_finite() || self.noise_sd < 0.0 {
            return bad(format!("noise_sd must be non-negative, got {}", self.noise_sd));
        }
        let m = &self.outcome;
        if m.grand_mean.is_nan() || m.grand_mean <= 0.0 || m.growth_factor.is_nan() || m.growth_factor <= 0.0 {
            return bad("grand_mean and growth_factor must be positive".into());
        }
        if [m.growth_dispersion, m.intercept_dispersion]
            .iter()
            .any(|d| d.is_nan() || *d < 0.0)
        {
            return bad("dispersions must be non-negative".into());
        }
        if let Topology::RandomPlanar {
            diagonal_prob,
            deletion_prob,
        } = self.topology
        {
            if !(0.0..=1.0).contains(&diagonal_prob) || !(0.0..=1.0).contains(&deletion_prob) {
                return bad("topology probabilities must lie in [0, 1]".into());
            }
        }
        if let Some((y, _)) = self.planted.effects.iter().find(|(y, _)| !self.years.contains(**y)) {
            return bad(format!("planted effect year {y} outside {}", self.years));
        }
        if self.planted.effects.values().any(|e| !e.is_finite()) {
            return bad("planted effects must be finite".into());
        }
        if !self.planted.effects.is_empty() && self.planted.depth == 0 {
            return bad("planted depth must be at least 1".into());
        }
        self.boundary.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEffect {
    pub unit_id: String,
    pub year: i32,
    pub effect: f64,
}

/// Everything the generator knows that estimators should recover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub seed: u64,
    pub spec: GeneratorSpec,
    pub effects_by_year: BTreeMap<i32, f64>,
    pub treated_units: Vec<String>,
    pub unit_effects: Vec<UnitEffect>,
    /// Noiseless untreated outcome per unit, over the panel years.
    pub counterfactual: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub panel: PanelDataset,
    pub graph: AdjacencyGraph,
    pub truth: TruthRecord,
}

fn grid_graph(ids: &[String], width: usize, topology: Topology, rng: &mut ChaCha8Rng) -> AdjacencyGraph {
    let n = ids.len();
    let mut g = AdjacencyGraph::default();
    for id in ids {
        g.add_node(id.clone());
    }
    let at = |r: usize, c: usize| {
        let i = r * width + c;
        (c < width && i < n).then_some(i)
    };
    let rows = n.div_ceil(width);
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for r in 0..rows {
        for c in 0..width {
            let Some(i) = at(r, c) else { continue };
            if let Some(j) = at(r, c + 1) {
                edges.push((i, j));
            }
            if let Some(j) = at(r + 1, c) {
                edges.push((i, j));
            }
        }
    }
    let mut diagonals = Vec::new();
    if let Topology::RandomPlanar {
        diagonal_prob,
        deletion_prob,
    } = topology
    {
        for r in 0..rows {
            for c in 0..width {
                let cell = (at(r, c), at(r, c + 1), at(r + 1, c), at(r + 1, c + 1));
                if let (Some(a), Some(b), Some(d), Some(e)) = cell {
                    if rng.random_bool(diagonal_prob) {
                        diagonals.push(if rng.random_bool(0.5) { (a, e) } else { (b, d) });
                    }
                }
            }
        }
        let mut degree = vec![0usize; n];
        for &(a, b) in edges.iter().chain(&diagonals) {
            degree[a] += 1;
            degree[b] += 1;
        }
        edges.retain(|&(a, b)| {
            if degree[a] > 2 && degree[b] > 2 && rng.random_bool(deletion_prob) {
                degree[a] -= 1;
                degree[b] -= 1;
                false
            } else {
                true
            }
        });
    }
    for (a, b) in edges.into_iter().chain(diagonals) {
        g.add_edge(ids[a].clone(), ids[b].clone()).expect("distinct grid cells");
    }
    g
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn standardize(xs: &[f64]) -> Vec<f64> {
    let m = mean(xs);
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    xs.iter().map(|x| if sd > 0.0 { (x - m) / sd } else { 0.0 }).collect()
}

/// Generates a panel, its adjacency graph and the truth record.
pub fn generate(spec: &GeneratorSpec) -> Result<GeneratedData, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut z = || std_normal.sample(&mut rng);

    let zones = spec.layout.zones();
    let n = zones.len();
    let width = spec.grid_width;
    let rows = n.div_ceil(width);
    let ids: Vec<String> = (0..n).map(|i| format!("{:04}", 1000 + i)).collect();
    let units: Vec<UnitMeta> = (0..n)
        .map(|i| UnitMeta::new(ids[i].clone(), format!("Municipality {}", i + 1), zones[i]))
        .collect();
    // 0 at the northern edge, 1 at the southern edge
    let south: Vec<f64> = (0..n)
        .map(|i| {
            if rows > 1 {
                (i / width) as f64 / (rows - 1) as f64
            } else {
                0.5
            }
        })
        .collect();

    let years = spec.years;
    let t_len = years.len();

    // time-fixed covariates
    let radiation: Vec<f64> = (0..n)
        .map(|i| (960.0 + 430.0 * south[i].powf(0.6) + 20.0 * z()).clamp(931.0, 1437.0))
        .collect();
    let variation: Vec<f64> = (0..n)
        .map(|i| (8.0 + 755.0 * (1.0 - south[i]).powi(22)) * (0.05 * z()).exp())
        .map(|v: f64| v.max(1.0))
        .collect();

    // time-variant covariates over panel years (already lagged)
    let income_base: Vec<f64> = (0..n).map(|_| 23_000.0 * z()).collect();
    let income_growth: Vec<f64> = (0..n).map(|_| 0.02 + 0.004 * z()).collect();
    let mut income: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..t_len)
                .map(|t| (200_000.0 + income_base[i]).max(120_000.0) * (1.0 + income_growth[i]).powi(t as i32))
                .collect()
        })
        .collect();
    let target_income = 210_002.0;
    let income_mean = mean(&income.iter().flatten().copied().collect::<Vec<_>>());
    income
        .iter_mut()
        .flatten()
        .for_each(|v| *v *= target_income / income_mean);

    let housing: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let base = (0.62 + 0.16 * z()).clamp(0.15, 0.95);
            let drift = 0.002 * z();
            (0..t_len).map(|t| (base + drift * t as f64).clamp(0.1, 0.97)).collect()
        })
        .collect();
    let unemployment: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let base = (0.07 + 0.018 * z()).clamp(0.025, 0.15);
            (0..t_len).map(|_| (base + 0.004 * z()).clamp(0.015, 0.18)).collect()
        })
        .collect();

    // untreated outcome
    let m = &spec.outcome;
    let rad_z = standardize(&radiation);
    let inc_z = standardize(&income.iter().map(|r| mean(r)).collect::<Vec<_>>());
    let house_z = standardize(&housing.iter().map(|r| mean(r)).collect::<Vec<_>>());
    let log_a: Vec<f64> = (0..n)
        .map(|i| {
            m.radiation_loading * rad_z[i]
                + m.income_loading * inc_z[i]
                + m.housing_loading * house_z[i]
                + m.intercept_dispersion * z()
        })
        .collect();
    let log_g = m.growth_factor.ln() / (t_len - 1) as f64;
    let growth: Vec<f64> = (0..n).map(|_| (log_g + m.growth_dispersion * z()).exp()).collect();
    let mut counterfactual: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..t_len).map(|t| log_a[i].exp() * growth[i].powi(t as i32)).collect())
        .collect();
    let cf_mean = mean(&counterfactual.iter().flatten().copied().collect::<Vec<_>>());
    counterfactual
        .iter_mut()
        .flatten()
        .for_each(|v| *v *= m.grand_mean / cf_mean);

    let graph = grid_graph(&ids, width, spec.topology, &mut rng);

    // covariate matrices need a panel to find border units first
    let mut cov = BTreeMap::new();
    cov.insert(
        Variable::AvgRadiation,
        YearMatrix::from_fn(n, years, |u, _| radiation[u]),
    );
    cov.insert(
        Variable::RadiationVariation,
        YearMatrix::from_fn(n, years, |u, _| variation[u]),
    );
    let t_of = |y: i32| (y - years.first) as usize;
    cov.insert(
        Variable::DisposableIncome,
        YearMatrix::from_fn(n, years, |u, y| income[u][t_of(y)]),
    );
    cov.insert(
        Variable::SmallHouseShare,
        YearMatrix::from_fn(n, years, |u, y| housing[u][t_of(y)]),
    );
    cov.insert(
        Variable::Unemployment,
        YearMatrix::from_fn(n, years, |u, y| unemployment[u][t_of(y)]),
    );
    let untreated = PanelDataset::new(
        units.clone(),
        years,
        YearMatrix::from_fn(n, years, |u, y| counterfactual[u][t_of(y)]),
        cov.clone(),
    )?;

    let treated: BTreeSet<String> = if spec.planted.effects.is_empty() {
        BTreeSet::new()
    } else {
        let regions = build_border_regions(&graph, &untreated, spec.boundary, spec.planted.depth)?;
        regions.members(spec.planted.depth, Side::North).clone()
    };

    let noise = Normal::new(0.0, spec.noise_sd).expect("validated sd");
    let mut unit_effects = Vec::new();
    let mut outcome = YearMatrix::from_fn(n, years, |_, _| 0.0);
    for u in 0..n {
        let is_treated = treated.contains(&ids[u]);
        for y in years.iter() {
            let mut v = counterfactual[u][t_of(y)];
            if spec.noise_sd > 0.0 {
                v += noise.sample(&mut rng);
            }
            if is_treated {
                if let Some(&e) = spec.planted.effects.get(&y) {
                    v += e;
                    unit_effects.push(UnitEffect {
                        unit_id: ids[u].clone(),
                        year: y,
                        effect: e,
                    });
                }
            }
            outcome.set(u, y, v.max(0.0));
        }
    }
    let panel = PanelDataset::new(units, years, outcome, cov)?;

    let truth = TruthRecord {
        seed: spec.seed,
        spec: spec.clone(),
        effects_by_year: spec.planted.effects.clone(),
        treated_units: treated.into_iter().collect(),
        unit_effects,
        counterfactual: ids.iter().cloned().zip(counterfactual).collect(),
    };
    Ok(GeneratedData { panel, graph, truth })
}

fn output_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes ingestion CSVs (covariates lagged by `lag` years),
/// `adjacency.csv` and `truth.json` into `dir`.
pub fn write_dataset(data: &GeneratedData, dir: &Path, lag: i32) -> Result<(), SynthError> {
    write_panel(&data.panel, dir, lag)?;
    write_adjacency(&data.graph, &dir.join("adjacency.csv"))?;
    let path = dir.join("truth.json");
    let json = serde_json::to_string_pretty(&data.truth).map_err(|e| output_err(&path, e))?;
    std::fs::write(&path, json + "\n").map_err(|e| output_err(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{load_panel, IngestConfig};
    use crate::regions::load_adjacency;

    #[test]
    fn deterministic() {
        let a = generate(&GeneratorSpec::small(4)).unwrap();
        let b = generate(&GeneratorSpec::small(4)).unwrap();
        assert_eq!(a.panel.outcome(), b.panel.outcome());
        assert_eq!(a.truth, b.truth);
        let c = generate(&GeneratorSpec::small(5)).unwrap();
        assert_ne!(a.panel.outcome(), c.panel.outcome());
    }

    #[test]
    fn layout_counts() {
        let d = generate(&GeneratorSpec::default()).unwrap();
        assert_eq!(d.panel.n_units(), 290);
        assert_eq!(d.panel.unit_ids_in_zones(&[Zone::SE3, Zone::SE4]).len(), 234);
        assert_eq!(d.panel.unit_ids_in_zones(&[Zone::Split]).len(), 7);
        assert_eq!(d.panel.cell_count(), 2030);
    }

    #[test]
    fn planted_effects_recorded_verbatim() {
        let d = generate(&GeneratorSpec::small(1)).unwrap();
        assert_eq!(d.truth.effects_by_year, BTreeMap::from([(2021, -0.04), (2022, -0.09)]));
        assert!(!d.truth.treated_units.is_empty());
        assert_eq!(d.truth.unit_effects.len(), 2 * d.truth.treated_units.len());
        assert!(d.truth.unit_effects.iter().all(|e| e.year >= 2021));
    }

    #[test]
    fn zero_noise_outcome_is_counterfactual_plus_effect() {
        let spec = GeneratorSpec {
            noise_sd: 0.0,
            ..GeneratorSpec::small(2)
        };
        let d = generate(&spec).unwrap();
        for (u, meta) in d.panel.units().iter().enumerate() {
            let cf = &d.truth.counterfactual[&meta.unit_id];
            for (t, y) in d.panel.years().iter().enumerate() {
                let effect = d
                    .truth
                    .unit_effects
                    .iter()
                    .find(|e| e.unit_id == meta.unit_id && e.year == y)
                    .map_or(0.0, |e| e.effect);
                assert_eq!(d.panel.value(Variable::Outcome, u, y), (cf[t] + effect).max(0.0));
            }
        }
    }

    #[test]
    fn files_round_trip_through_ingestion() {
        let spec = GeneratorSpec {
            topology: Topology::RandomPlanar {
                diagonal_prob: 0.3,
                deletion_prob: 0.1,
            },
            ..GeneratorSpec::small(8)
        };
        let d = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path(), 1).unwrap();
        let p = dir.path();
        let loaded = load_panel(
            &p.join("outcome.csv"),
            &[p.join("covariates.csv")],
            &p.join("meta.csv"),
            &IngestConfig::default(),
        )
        .unwrap();
        assert_eq!(loaded.outcome(), d.panel.outcome());
        for var in Variable::COVARIATES {
            for u in 0..loaded.n_units() {
                assert_eq!(loaded.series(var, u), d.panel.series(var, u));
            }
        }
        let graph = load_adjacency(&p.join("adjacency.csv")).unwrap();
        assert_eq!(graph.edges(), d.graph.edges());
        let truth: TruthRecord = serde_json::from_str(&std::fs::read_to_string(p.join("truth.json")).unwrap()).unwrap();
        assert_eq!(truth, d.truth);
    }

    #[test]
    fn random_planar_keeps_every_unit_connected() {
        let spec = GeneratorSpec {
            topology: Topology::RandomPlanar {
                diagonal_prob: 0.5,
                deletion_prob: 0.5,
            },
            ..GeneratorSpec::small(3)
        };
        let d = generate(&spec).unwrap();
        for node in d.graph.nodes() {
            assert!(d.graph.neighbors(node).count() >= 1);
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = GeneratorSpec::small(0);
        s.noise_sd = -1.0;
        assert!(matches!(generate(&s), Err(SynthError::InvalidSpec(_))));
        let mut s = GeneratorSpec::small(0);
        s.planted.effects.insert(2030, 0.1);
        assert!(matches!(generate(&s), Err(SynthError::InvalidSpec(_))));
    }
}
