//! Balanced municipality-by-year panel.
//!
//! A [`PanelDataset`] holds one outcome (installed PV capacity per capita) and
//! a fixed set of covariates for every unit and every year of a contiguous
//! range. Time-variant covariates may carry extra history outside the panel
//! years so that they can be lagged; only the panel years are subject to the
//! balance check.

mod ingest;
mod radiation;
mod stats;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ingest::{load_panel, validate_panel_files, write_panel, DateWindow, ImputationRule, IngestConfig};
pub use radiation::{radiation_stats, DailyRadiationSeries, RadiationStats};
pub use stats::{descriptive_stats, DescriptiveRow};

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("missing cell: unit {unit}, year {year}, variable {variable}")]
    MissingCell { unit: String, year: i32, variable: String },
    #[error("duplicate row in {file}: unit {unit}, year {year}, variable {variable}")]
    DuplicateRow {
        file: String,
        unit: String,
        year: i32,
        variable: String,
    },
    #[error("years are not contiguous, missing {missing:?}")]
    NonContiguousYears { missing: Vec<i32> },
    #[error("unknown zone label {label:?} for unit {unit}")]
    UnknownZoneLabel { unit: String, label: String },
    #[error("unknown unit {unit} ({context})")]
    UnknownUnit { unit: String, context: String },
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("year {year} outside {first}..={last}")]
    YearOutOfRange { year: i32, first: i32, last: i32 },
    #[error("insufficient history for {variable}: need {need_first}..={need_last}, have {have_first}..={have_last}")]
    InsufficientHistory {
        variable: String,
        need_first: i32,
        need_last: i32,
        have_first: i32,
        have_last: i32,
    },
    #[error("unit {unit}: minimum monthly radiation average is zero (month {month})")]
    ZeroMinimumMonth { unit: String, month: u32 },
    #[error("unit {unit}: no radiation observations for month {month} in the reference window")]
    MissingRadiationMonth { unit: String, month: u32 },
    #[error("negative outcome {value} for unit {unit}, year {year}")]
    NegativeOutcome { unit: String, year: i32, value: f64 },
    #[error("invalid value {value} for unit {unit}, variable {variable}: {reason}")]
    InvalidValue {
        unit: String,
        variable: String,
        value: f64,
        reason: String,
    },
    #[error("{variable} varies across years for unit {unit}")]
    TimeVaryingFixedCovariate { unit: String, variable: String },
    #[error("radiation_variation {value} < 1 for unit {unit}")]
    InvalidRadiationVariation { unit: String, value: f64 },
    #[error("duplicate unit id {0}")]
    DuplicateUnit(String),
    #[error("panel has no units or no years")]
    EmptyPanel,
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{} violations: {}", .0.len(), .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Violations(Vec<PanelError>),
}

impl PanelError {
    /// True when the failure is an I/O problem rather than a data violation.
    pub fn is_io(&self) -> bool {
        match self {
            PanelError::Io { .. } => true,
            PanelError::Violations(v) => v.iter().any(PanelError::is_io),
            _ => false,
        }
    }

    /// Flattens nested violation lists.
    pub fn into_list(self) -> Vec<PanelError> {
        match self {
            PanelError::Violations(v) => v.into_iter().flat_map(PanelError::into_list).collect(),
            e => vec![e],
        }
    }

    pub(crate) fn from_list(mut errors: Vec<PanelError>) -> Result<(), PanelError> {
        match errors.len() {
            0 => Ok(()),
            1 => Err(errors.remove(0)),
            _ => Err(PanelError::Violations(errors)),
        }
    }
}

/// Bidding-zone assignment of a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Zone {
    SE1,
    SE2,
    SE3,
    SE4,
    /// Straddles a zone border; never treated, never a donor.
    #[serde(rename = "SPLIT")]
    Split,
}

impl Zone {
    /// Position in north-to-south order; `None` for split units.
    pub fn ordinal(self) -> Option<u8> {
        match self {
            Zone::SE1 => Some(1),
            Zone::SE2 => Some(2),
            Zone::SE3 => Some(3),
            Zone::SE4 => Some(4),
            Zone::Split => None,
        }
    }
}

impl fmt::Display for Zone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Zone::SE1 => "SE1",
            Zone::SE2 => "SE2",
            Zone::SE3 => "SE3",
            Zone::SE4 => "SE4",
            Zone::Split => "SPLIT",
        };
        f.write_str(s)
    }
}

impl FromStr for Zone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SE1" => Ok(Zone::SE1),
            "SE2" => Ok(Zone::SE2),
            "SE3" => Ok(Zone::SE3),
            "SE4" => Ok(Zone::SE4),
            "SPLIT" => Ok(Zone::Split),
            other => Err(other.to_string()),
        }
    }
}

/// Panel variables: the outcome plus the five covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Outcome,
    AvgRadiation,
    RadiationVariation,
    DisposableIncome,
    SmallHouseShare,
    Unemployment,
}

impl Variable {
    pub const COVARIATES: [Variable; 5] = [
        Variable::AvgRadiation,
        Variable::RadiationVariation,
        Variable::DisposableIncome,
        Variable::SmallHouseShare,
        Variable::Unemployment,
    ];

    pub const TIME_VARIANT: [Variable; 3] = [
        Variable::DisposableIncome,
        Variable::SmallHouseShare,
        Variable::Unemployment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variable::Outcome => "outcome",
            Variable::AvgRadiation => "avg_radiation",
            Variable::RadiationVariation => "radiation_variation",
            Variable::DisposableIncome => "disposable_income",
            Variable::SmallHouseShare => "small_house_share",
            Variable::Unemployment => "unemployment",
        }
    }

    /// Covariates whose observations are shifted by the ingestion lag.
    pub fn is_time_variant(self) -> bool {
        Self::TIME_VARIANT.contains(&self)
    }

    /// Covariates that must be constant across years within a unit.
    pub fn is_time_fixed(self) -> bool {
        matches!(self, Variable::AvgRadiation | Variable::RadiationVariation)
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variable {
    type Err = PanelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let all = std::iter::once(Variable::Outcome).chain(Variable::COVARIATES);
        for v in all {
            if v.name() == s.trim() {
                return Ok(v);
            }
        }
        Err(PanelError::UnknownVariable(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitMeta {
    pub unit_id: String,
    pub name: String,
    pub zone: Zone,
}

impl UnitMeta {
    pub fn new(unit_id: impl Into<String>, name: impl Into<String>, zone: Zone) -> Self {
        Self {
            unit_id: unit_id.into(),
            name: name.into(),
            zone,
        }
    }
}

/// Inclusive contiguous year range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct YearRange {
    pub first: i32,
    pub last: i32,
}

impl YearRange {
    pub fn new(first: i32, last: i32) -> Self {
        assert!(first <= last, "empty year range {first}..={last}");
        Self { first, last }
    }

    pub fn len(&self) -> usize {
        (self.last - self.first + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, year: i32) -> bool {
        year >= self.first && year <= self.last
    }

    pub fn iter(&self) -> impl Iterator<Item = i32> {
        self.first..=self.last
    }

    pub fn index_of(&self, year: i32) -> Option<usize> {
        self.contains(year).then(|| (year - self.first) as usize)
    }

    pub fn covers(&self, other: &YearRange) -> bool {
        self.first <= other.first && self.last >= other.last
    }
}

impl fmt::Display for YearRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.first, self.last)
    }
}

/// Unit-major matrix of one variable over a year window.
#[derive(Debug, Clone, PartialEq)]
pub struct YearMatrix {
    years: YearRange,
    n_units: usize,
    data: Vec<f64>,
}

impl YearMatrix {
    /// Matrix filled with NaN, the marker for a missing cell.
    pub fn missing(n_units: usize, years: YearRange) -> Self {
        Self {
            years,
            n_units,
            data: vec![f64::NAN; n_units * years.len()],
        }
    }

    pub fn from_fn(n_units: usize, years: YearRange, mut f: impl FnMut(usize, i32) -> f64) -> Self {
        let mut m = Self::missing(n_units, years);
        for u in 0..n_units {
            for y in years.iter() {
                m.set(u, y, f(u, y));
            }
        }
        m
    }

    pub fn years(&self) -> YearRange {
        self.years
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn get(&self, unit: usize, year: i32) -> Option<f64> {
        let t = self.years.index_of(year)?;
        self.data.get(unit * self.years.len() + t).copied()
    }

    pub fn set(&mut self, unit: usize, year: i32, value: f64) {
        let t = self
            .years
            .index_of(year)
            .unwrap_or_else(|| panic!("year {year} outside {}", self.years));
        let n = self.years.len();
        self.data[unit * n + t] = value;
    }

    /// Full stored row of a unit.
    pub fn row(&self, unit: usize) -> &[f64] {
        let n = self.years.len();
        &self.data[unit * n..(unit + 1) * n]
    }

    /// Same values, relabelled `shift` years later.
    pub fn shifted(&self, shift: i32) -> Self {
        Self {
            years: YearRange::new(self.years.first + shift, self.years.last + shift),
            n_units: self.n_units,
            data: self.data.clone(),
        }
    }
}

/// Record of a carry-forward imputation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputation {
    pub variable: Variable,
    pub scope: String,
    pub from_year: i32,
    pub value: f64,
    pub cells: usize,
}

/// Balanced panel of outcome and covariates. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    units: Vec<UnitMeta>,
    index: HashMap<String, usize>,
    years: YearRange,
    outcome: YearMatrix,
    covariates: BTreeMap<Variable, YearMatrix>,
    region_members: BTreeMap<String, Vec<String>>,
    provenance: Vec<Imputation>,
}

impl PanelDataset {
    /// Builds and validates a panel. All violations are reported together.
    pub fn new(
        units: Vec<UnitMeta>,
        years: YearRange,
        outcome: YearMatrix,
        covariates: BTreeMap<Variable, YearMatrix>,
    ) -> Result<Self, PanelError> {
        if units.is_empty() {
            return Err(PanelError::EmptyPanel);
        }
        let mut index = HashMap::with_capacity(units.len());
        for (i, u) in units.iter().enumerate() {
            if index.insert(u.unit_id.clone(), i).is_some() {
                return Err(PanelError::DuplicateUnit(u.unit_id.clone()));
            }
        }
        if covariates.contains_key(&Variable::Outcome) {
            return Err(PanelError::UnknownVariable("outcome listed as covariate".into()));
        }
        let panel = Self {
            units,
            index,
            years,
            outcome,
            covariates,
            region_members: BTreeMap::new(),
            provenance: Vec::new(),
        };
        PanelError::from_list(panel.violations())?;
        Ok(panel)
    }

    /// Every invariant violation, in a deterministic order.
    pub fn violations(&self) -> Vec<PanelError> {
        let mut out = Vec::new();
        let n = self.units.len();
        let check_shape = |var: Variable, m: &YearMatrix, out: &mut Vec<PanelError>| {
            if m.n_units() != n {
                out.push(PanelError::InvalidValue {
                    unit: "*".into(),
                    variable: var.to_string(),
                    value: m.n_units() as f64,
                    reason: format!("matrix has {} units, panel has {n}", m.n_units()),
                });
                return false;
            }
            if !m.years().covers(&self.years) {
                out.push(PanelError::InsufficientHistory {
                    variable: var.to_string(),
                    need_first: self.years.first,
                    need_last: self.years.last,
                    have_first: m.years().first,
                    have_last: m.years().last,
                });
                return false;
            }
            true
        };
        let outcome_ok = check_shape(Variable::Outcome, &self.outcome, &mut out);
        if outcome_ok && self.outcome.years() != self.years {
            out.push(PanelError::InvalidValue {
                unit: "*".into(),
                variable: "outcome".into(),
                value: f64::NAN,
                reason: format!(
                    "outcome years {} differ from panel years {}",
                    self.outcome.years(),
                    self.years
                ),
            });
        }
        let mut shapes_ok = vec![(Variable::Outcome, outcome_ok)];
        for (var, m) in &self.covariates {
            shapes_ok.push((*var, check_shape(*var, m, &mut out)));
        }
        for (var, ok) in shapes_ok {
            if !ok {
                continue;
            }
            let m = self.matrix(var).expect("present");
            for (u, meta) in self.units.iter().enumerate() {
                let mut first_value = None;
                for y in self.years.iter() {
                    let v = m.get(u, y).unwrap_or(f64::NAN);
                    if v.is_nan() {
                        out.push(PanelError::MissingCell {
                            unit: meta.unit_id.clone(),
                            year: y,
                            variable: var.to_string(),
                        });
                        continue;
                    }
                    if !v.is_finite() {
                        out.push(PanelError::InvalidValue {
                            unit: meta.unit_id.clone(),
                            variable: var.to_string(),
                            value: v,
                            reason: "not finite".into(),
                        });
                        continue;
                    }
                    match var {
                        Variable::Outcome if v < 0.0 => out.push(PanelError::NegativeOutcome {
                            unit: meta.unit_id.clone(),
                            year: y,
                            value: v,
                        }),
                        Variable::RadiationVariation if v < 1.0 => out.push(PanelError::InvalidRadiationVariation {
                            unit: meta.unit_id.clone(),
                            value: v,
                        }),
                        _ => {}
                    }
                    if var.is_time_fixed() {
                        match first_value {
                            None => first_value = Some(v),
                            Some(f) if f != v => {
                                out.push(PanelError::TimeVaryingFixedCovariate {
                                    unit: meta.unit_id.clone(),
                                    variable: var.to_string(),
                                });
                                first_value = Some(v);
                            }
                            _ => {}
                        }
                    }
                }
            }
        }
        out
    }

    pub fn units(&self) -> &[UnitMeta] {
        &self.units
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn years(&self) -> YearRange {
        self.years
    }

    pub fn unit_index(&self, unit_id: &str) -> Option<usize> {
        self.index.get(unit_id).copied()
    }

    pub fn unit(&self, unit_id: &str) -> Option<&UnitMeta> {
        self.unit_index(unit_id).map(|i| &self.units[i])
    }

    pub fn variables(&self) -> Vec<Variable> {
        std::iter::once(Variable::Outcome)
            .chain(self.covariates.keys().copied())
            .collect()
    }

    pub fn has_variable(&self, var: Variable) -> bool {
        var == Variable::Outcome || self.covariates.contains_key(&var)
    }

    pub fn matrix(&self, var: Variable) -> Option<&YearMatrix> {
        match var {
            Variable::Outcome => Some(&self.outcome),
            v => self.covariates.get(&v),
        }
    }

    pub fn outcome(&self) -> &YearMatrix {
        &self.outcome
    }

    /// Value at a panel or history cell; NaN when absent.
    pub fn value(&self, var: Variable, unit: usize, year: i32) -> f64 {
        self.matrix(var).and_then(|m| m.get(unit, year)).unwrap_or(f64::NAN)
    }

    /// Series over the panel years.
    pub fn series(&self, var: Variable, unit: usize) -> Vec<f64> {
        self.years.iter().map(|y| self.value(var, unit, y)).collect()
    }

    /// Number of (unit, year) observations per variable.
    pub fn cell_count(&self) -> usize {
        self.units.len() * self.years.len()
    }

    pub fn unit_ids_in_zones(&self, zones: &[Zone]) -> Vec<String> {
        self.units
            .iter()
            .filter(|u| zones.contains(&u.zone))
            .map(|u| u.unit_id.clone())
            .collect()
    }

    pub fn region_members(&self) -> &BTreeMap<String, Vec<String>> {
        &self.region_members
    }

    pub fn with_region_members(mut self, regions: BTreeMap<String, Vec<String>>) -> Self {
        self.region_members = regions;
        self
    }

    pub fn provenance(&self) -> &[Imputation] {
        &self.provenance
    }

    /// Restricts the panel to a sub-range of its years.
    pub fn truncate_years(&self, years: YearRange) -> Result<PanelDataset, PanelError> {
        if !self.years.covers(&years) {
            return Err(PanelError::YearOutOfRange {
                year: if years.first < self.years.first {
                    years.first
                } else {
                    years.last
                },
                first: self.years.first,
                last: self.years.last,
            });
        }
        let mut out = self.clone();
        out.years = years;
        out.outcome = YearMatrix::from_fn(self.n_units(), years, |u, y| self.value(Variable::Outcome, u, y));
        Ok(out)
    }

    /// Copy with every outcome cell passed through `f`. Covariates untouched.
    pub fn map_outcome(&self, mut f: impl FnMut(usize, i32, f64) -> f64) -> Result<PanelDataset, PanelError> {
        let outcome = YearMatrix::from_fn(self.n_units(), self.years, |u, y| {
            f(u, y, self.value(Variable::Outcome, u, y))
        });
        let mut out = self.clone();
        out.outcome = outcome;
        PanelError::from_list(out.violations())?;
        Ok(out)
    }
}

/// Shifts time-variant covariates so that year `t` holds the source value of
/// year `t - lag`. Time-fixed covariates and the outcome are unchanged.
pub fn lag_covariates(panel: &PanelDataset, lag: i32) -> Result<PanelDataset, PanelError> {
    if lag == 0 {
        return Ok(panel.clone());
    }
    let mut out = panel.clone();
    for (var, m) in out.covariates.iter_mut() {
        if !var.is_time_variant() {
            continue;
        }
        let shifted = m.shifted(lag);
        if !shifted.years().covers(&panel.years) {
            return Err(PanelError::InsufficientHistory {
                variable: var.to_string(),
                need_first: panel.years.first - lag,
                need_last: panel.years.last - lag,
                have_first: m.years().first,
                have_last: m.years().last,
            });
        }
        *m = shifted;
    }
    Ok(out)
}

/// Sets `variable` to `value` for every stored year after `from_year`, for a
/// single unit or every member of a region.
pub fn impute_carry_forward(
    panel: &PanelDataset,
    variable: &str,
    unit_or_region: &str,
    from_year: i32,
    value: f64,
) -> Result<PanelDataset, PanelError> {
    let var: Variable = variable.parse()?;
    if !panel.has_variable(var) {
        return Err(PanelError::UnknownVariable(variable.to_string()));
    }
    let members: Vec<usize> = match panel.unit_index(unit_or_region) {
        Some(i) => vec![i],
        None => match panel.region_members.get(unit_or_region) {
            Some(ids) => ids.iter().filter_map(|id| panel.unit_index(id)).collect(),
            None => {
                return Err(PanelError::UnknownUnit {
                    unit: unit_or_region.to_string(),
                    context: "imputation scope".into(),
                })
            }
        },
    };
    let window = panel.matrix(var).expect("checked").years();
    if !window.contains(from_year) {
        return Err(PanelError::YearOutOfRange {
            year: from_year,
            first: window.first,
            last: window.last,
        });
    }
    let mut out = panel.clone();
    let m = match var {
        Variable::Outcome => &mut out.outcome,
        v => out.covariates.get_mut(&v).expect("checked"),
    };
    let mut cells = 0;
    for &u in &members {
        for y in (from_year + 1)..=window.last {
            m.set(u, y, value);
            cells += 1;
        }
    }
    let record = Imputation {
        variable: var,
        scope: unit_or_region.to_string(),
        from_year,
        value,
        cells,
    };
    if !out.provenance.contains(&record) {
        out.provenance.push(record);
    }
    PanelError::from_list(out.violations())?;
    Ok(out)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Small panel with all covariates; covariate history starts one year early.
    pub fn toy_panel(n_units: usize, years: YearRange) -> PanelDataset {
        let units = (0..n_units)
            .map(|i| {
                let zone = if i % 2 == 0 { Zone::SE2 } else { Zone::SE3 };
                UnitMeta::new(format!("u{i:02}"), format!("Unit {i}"), zone)
            })
            .collect();
        let outcome = YearMatrix::from_fn(n_units, years, |u, y| {
            0.01 * (u as f64 + 1.0) * (y - years.first + 1) as f64
        });
        let hist = YearRange::new(years.first - 1, years.last);
        let mut cov = BTreeMap::new();
        cov.insert(
            Variable::DisposableIncome,
            YearMatrix::from_fn(n_units, hist, |u, y| {
                200_000.0 + 1000.0 * u as f64 + 10.0 * (y - 2000) as f64
            }),
        );
        cov.insert(
            Variable::Unemployment,
            YearMatrix::from_fn(n_units, hist, |u, y| {
                0.05 + 0.001 * u as f64 + 0.0001 * (y - 2000) as f64
            }),
        );
        cov.insert(
            Variable::SmallHouseShare,
            YearMatrix::from_fn(n_units, hist, |u, y| 0.5 + 0.01 * u as f64 + 0.001 * (y - 2000) as f64),
        );
        cov.insert(
            Variable::AvgRadiation,
            YearMatrix::from_fn(n_units, years, |u, _| 1200.0 - 10.0 * u as f64),
        );
        cov.insert(
            Variable::RadiationVariation,
            YearMatrix::from_fn(n_units, years, |u, _| 20.0 + u as f64),
        );
        PanelDataset::new(units, years, outcome, cov).unwrap()
    }
}
