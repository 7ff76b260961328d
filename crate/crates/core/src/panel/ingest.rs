//! CSV ingestion and serialization.
//!
//! File schemas:
//! - outcome: `unit_id,year,value`
//! - covariates (long form): `unit_id,year,variable,value`
//! - meta: `unit_id,name,zone`
//! - region map: `region_id,unit_id`
//! - population: `unit_id,year,value`
//! - daily radiation: `unit_id,date,value`

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::radiation::{radiation_stats_in, DailyRadiationSeries};
use super::{PanelDataset, PanelError, UnitMeta, Variable, YearMatrix, YearRange, Zone};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Default for DateWindow {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2010, 1, 1).expect("valid date"),
            end: NaiveDate::from_ymd_opt(2015, 12, 31).expect("valid date"),
        }
    }
}

impl DateWindow {
    pub fn contains(&self, d: NaiveDate) -> bool {
        d >= self.start && d <= self.end
    }
}

/// Carry-forward applied to source data before lagging and balance checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationRule {
    pub variable: Variable,
    /// Unit id or region id from the region map.
    pub scope: String,
    pub from_year: i32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Columns stored in percent in the CSVs; divided by 100 at load.
    pub percent_columns: Vec<Variable>,
    pub lag_years: i32,
    /// When set, the outcome file holds raw capacity and is divided by
    /// same-year population.
    pub population_file: Option<PathBuf>,
    /// Region-to-unit mapping; covariate rows keyed by a region id are
    /// broadcast to its member units.
    pub region_map_file: Option<PathBuf>,
    /// Daily radiation observations; when set, both radiation covariates are
    /// computed from it.
    pub radiation_file: Option<PathBuf>,
    pub radiation_window: DateWindow,
    pub required_covariates: Vec<Variable>,
    pub imputations: Vec<ImputationRule>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            percent_columns: Vec::new(),
            lag_years: 1,
            population_file: None,
            region_map_file: None,
            radiation_file: None,
            radiation_window: DateWindow::default(),
            required_covariates: Variable::COVARIATES.to_vec(),
            imputations: Vec::new(),
        }
    }
}

impl IngestConfig {
    /// Resolves relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.population_file,
            &mut self.region_map_file,
            &mut self.radiation_file,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Loads and validates a panel. On data violations the error lists all of
/// them ([`PanelError::Violations`]).
pub fn load_panel(
    outcome_file: &Path,
    covariate_files: &[PathBuf],
    meta_file: &Path,
    config: &IngestConfig,
) -> Result<PanelDataset, PanelError> {
    let mut errors = Vec::new();
    match ingest(outcome_file, covariate_files, meta_file, config, &mut errors) {
        Some(panel) if errors.is_empty() => Ok(panel),
        _ => {
            PanelError::from_list(errors)?;
            unreachable!("ingest returned no panel without errors")
        }
    }
}

/// Every violation found while loading, empty when the inputs are valid.
pub fn validate_panel_files(
    outcome_file: &Path,
    covariate_files: &[PathBuf],
    meta_file: &Path,
    config: &IngestConfig,
) -> Vec<PanelError> {
    let mut errors = Vec::new();
    let _ = ingest(outcome_file, covariate_files, meta_file, config, &mut errors);
    errors.into_iter().flat_map(PanelError::into_list).collect()
}

fn open_csv(path: &Path, expected: &[&str]) -> Result<csv::Reader<File>, PanelError> {
    let file = File::open(path).map_err(|source| PanelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(PanelError::Csv {
            path: path.display().to_string(),
            message: format!("expected header {}, found {}", expected.join(","), got.join(",")),
        });
    }
    Ok(rdr)
}

fn csv_err(path: &Path, e: csv::Error) -> PanelError {
    if let csv::ErrorKind::Io(_) = e.kind() {
        let csv::ErrorKind::Io(source) = e.into_kind() else {
            unreachable!()
        };
        return PanelError::Io {
            path: path.display().to_string(),
            source,
        };
    }
    PanelError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn read_records(path: &Path, expected: &[&str]) -> Result<Vec<(u64, Vec<String>)>, PanelError> {
    let mut rdr = open_csv(path, expected)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: u64, field: &str, s: &str) -> Result<T, PanelError> {
    s.parse::<T>().map_err(|_| PanelError::Csv {
        path: path.display().to_string(),
        message: format!("line {line}: cannot parse {field} from {s:?}"),
    })
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// (unit_id, year) -> value from a `unit_id,year,value` file.
fn read_unit_year_values(
    path: &Path,
    variable: &str,
    errors: &mut Vec<PanelError>,
) -> Option<BTreeMap<(String, i32), f64>> {
    let records = match read_records(path, &["unit_id", "year", "value"]) {
        Ok(r) => r,
        Err(e) => {
            errors.push(e);
            return None;
        }
    };
    let mut out = BTreeMap::new();
    for (line, rec) in records {
        let year = parse_num::<i32>(path, line, "year", &rec[1]);
        let value = parse_num::<f64>(path, line, "value", &rec[2]);
        match (year, value) {
            (Ok(year), Ok(value)) => {
                if out.insert((rec[0].clone(), year), value).is_some() {
                    errors.push(PanelError::DuplicateRow {
                        file: file_label(path),
                        unit: rec[0].clone(),
                        year,
                        variable: variable.to_string(),
                    });
                }
            }
            (Err(e), _) | (_, Err(e)) => errors.push(e),
        }
    }
    Some(out)
}

fn ingest(
    outcome_file: &Path,
    covariate_files: &[PathBuf],
    meta_file: &Path,
    config: &IngestConfig,
    errors: &mut Vec<PanelError>,
) -> Option<PanelDataset> {
    // meta
    let units = read_meta(meta_file, errors)?;
    let index: HashMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.unit_id.as_str(), i)).collect();
    let n = units.len();

    // outcome
    let outcome_rows = read_unit_year_values(outcome_file, "outcome", errors)?;
    if outcome_rows.is_empty() {
        errors.push(PanelError::EmptyPanel);
        return None;
    }
    let years_present: BTreeSet<i32> = outcome_rows.keys().map(|(_, y)| *y).collect();
    let first = *years_present.iter().next().expect("non-empty");
    let last = *years_present.iter().next_back().expect("non-empty");
    let missing: Vec<i32> = (first..=last).filter(|y| !years_present.contains(y)).collect();
    if !missing.is_empty() {
        errors.push(PanelError::NonContiguousYears { missing });
    }
    let years = YearRange::new(first, last);

    let population = match &config.population_file {
        Some(p) => Some(read_unit_year_values(p, "population", errors)?),
        None => None,
    };

    let mut outcome = YearMatrix::missing(n, years);
    for ((unit, year), value) in &outcome_rows {
        let Some(&u) = index.get(unit.as_str()) else {
            errors.push(PanelError::UnknownUnit {
                unit: unit.clone(),
                context: file_label(outcome_file),
            });
            continue;
        };
        let value = match &population {
            Some(pop) => match pop.get(&(unit.clone(), *year)) {
                Some(&p) if p > 0.0 => value / p,
                Some(&p) => {
                    errors.push(PanelError::InvalidValue {
                        unit: unit.clone(),
                        variable: "population".into(),
                        value: p,
                        reason: "population must be positive".into(),
                    });
                    continue;
                }
                None => {
                    errors.push(PanelError::MissingCell {
                        unit: unit.clone(),
                        year: *year,
                        variable: "population".into(),
                    });
                    continue;
                }
            },
            None => *value,
        };
        outcome.set(u, *year, value);
    }

    // region map
    let mut region_members: BTreeMap<String, Vec<String>> = BTreeMap::new();
    if let Some(path) = &config.region_map_file {
        match read_records(path, &["region_id", "unit_id"]) {
            Ok(recs) => {
                for (_, rec) in recs {
                    if !index.contains_key(rec[1].as_str()) {
                        errors.push(PanelError::UnknownUnit {
                            unit: rec[1].clone(),
                            context: file_label(path),
                        });
                        continue;
                    }
                    let members = region_members.entry(rec[0].clone()).or_default();
                    if !members.contains(&rec[1]) {
                        members.push(rec[1].clone());
                    }
                }
            }
            Err(e) => errors.push(e),
        }
    }

    // covariates, in source years: (variable, unit idx, year) -> (value, broadcast?)
    let mut source: BTreeMap<(Variable, usize, i32), (f64, bool)> = BTreeMap::new();
    for path in covariate_files {
        let recs = match read_records(path, &["unit_id", "year", "variable", "value"]) {
            Ok(r) => r,
            Err(e) => {
                errors.push(e);
                continue;
            }
        };
        for (line, rec) in recs {
            let var = match rec[2].parse::<Variable>() {
                Ok(Variable::Outcome) | Err(_) => {
                    errors.push(PanelError::UnknownVariable(rec[2].clone()));
                    continue;
                }
                Ok(v) => v,
            };
            let (year, mut value) = match (
                parse_num::<i32>(path, line, "year", &rec[1]),
                parse_num::<f64>(path, line, "value", &rec[3]),
            ) {
                (Ok(y), Ok(v)) => (y, v),
                (Err(e), _) | (_, Err(e)) => {
                    errors.push(e);
                    continue;
                }
            };
            if config.percent_columns.contains(&var) {
                value /= 100.0;
            }
            let (targets, broadcast): (Vec<usize>, bool) = match index.get(rec[0].as_str()) {
                Some(&u) => (vec![u], false),
                None => match region_members.get(&rec[0]) {
                    Some(members) => (members.iter().map(|m| index[m.as_str()]).collect(), true),
                    None => {
                        errors.push(PanelError::UnknownUnit {
                            unit: rec[0].clone(),
                            context: file_label(path),
                        });
                        continue;
                    }
                },
            };
            for u in targets {
                let key = (var, u, year);
                match source.get(&key) {
                    None => {
                        source.insert(key, (value, broadcast));
                    }
                    // a unit-level row overrides a regional broadcast
                    Some(&(_, true)) if !broadcast => {
                        source.insert(key, (value, false));
                    }
                    Some(&(_, false)) if broadcast => {}
                    Some(_) => errors.push(PanelError::DuplicateRow {
                        file: file_label(path),
                        unit: units[u].unit_id.clone(),
                        year,
                        variable: var.to_string(),
                    }),
                }
            }
        }
    }

    // radiation from daily observations
    if let Some(path) = &config.radiation_file {
        if let Some(series) = read_radiation(path, &index, errors) {
            for (u, s) in series.iter().enumerate() {
                let Some(s) = s else {
                    errors.push(PanelError::MissingCell {
                        unit: units[u].unit_id.clone(),
                        year: years.first,
                        variable: "daily_radiation".into(),
                    });
                    continue;
                };
                match radiation_stats_in(s, &config.radiation_window) {
                    Ok(stats) => {
                        for y in years.iter() {
                            for (var, v) in [
                                (Variable::AvgRadiation, stats.avg_radiation),
                                (Variable::RadiationVariation, stats.radiation_variation),
                            ] {
                                if source.insert((var, u, y), (v, false)).is_some() {
                                    errors.push(PanelError::DuplicateRow {
                                        file: file_label(path),
                                        unit: units[u].unit_id.clone(),
                                        year: y,
                                        variable: var.to_string(),
                                    });
                                }
                            }
                        }
                    }
                    Err(e) => errors.push(e),
                }
            }
        }
    }

    let lag = config.lag_years;
    let window_for = |var: Variable| {
        if var.is_time_variant() {
            YearRange::new(years.first - lag, years.last - lag)
        } else {
            years
        }
    };

    // carry-forward rules operate on source years
    let mut provenance = Vec::new();
    for rule in &config.imputations {
        let targets: Vec<usize> = match index.get(rule.scope.as_str()) {
            Some(&u) => vec![u],
            None => match region_members.get(&rule.scope) {
                Some(m) => m.iter().map(|id| index[id.as_str()]).collect(),
                None => {
                    errors.push(PanelError::UnknownUnit {
                        unit: rule.scope.clone(),
                        context: "imputation rule".into(),
                    });
                    continue;
                }
            },
        };
        if rule.variable == Variable::Outcome {
            errors.push(PanelError::UnknownVariable(
                "outcome imputation is not supported".into(),
            ));
            continue;
        }
        let window = window_for(rule.variable);
        let mut cells = 0;
        for &u in &targets {
            for y in (rule.from_year + 1)..=window.last {
                source.insert((rule.variable, u, y), (rule.value, false));
                cells += 1;
            }
        }
        provenance.push(super::Imputation {
            variable: rule.variable,
            scope: rule.scope.clone(),
            from_year: rule.from_year,
            value: rule.value,
            cells,
        });
    }

    let present: BTreeSet<Variable> = source.keys().map(|(v, _, _)| *v).collect();
    let mut covariates = BTreeMap::new();
    for var in Variable::COVARIATES {
        if !config.required_covariates.contains(&var) && !present.contains(&var) {
            continue;
        }
        let window = window_for(var);
        let mut m = YearMatrix::missing(n, window);
        for (u, meta) in units.iter().enumerate() {
            for y in window.iter() {
                match source.get(&(var, u, y)) {
                    Some(&(v, _)) => m.set(u, y, v),
                    None => errors.push(PanelError::MissingCell {
                        unit: meta.unit_id.clone(),
                        year: y,
                        variable: var.to_string(),
                    }),
                }
            }
        }
        let m = if var.is_time_variant() { m.shifted(lag) } else { m };
        covariates.insert(var, m);
    }

    if !errors.is_empty() {
        // still report outcome-level violations alongside the earlier ones
        if let Err(e) = PanelDataset::new(units, years, outcome, BTreeMap::new()) {
            errors.extend(e.into_list());
        }
        return None;
    }
    match PanelDataset::new(units, years, outcome, covariates) {
        Ok(mut p) => {
            p.provenance = provenance;
            Some(p.with_region_members(region_members))
        }
        Err(e) => {
            errors.extend(e.into_list());
            None
        }
    }
}

fn read_meta(path: &Path, errors: &mut Vec<PanelError>) -> Option<Vec<UnitMeta>> {
    let recs = match read_records(path, &["unit_id", "name", "zone"]) {
        Ok(r) => r,
        Err(e) => {
            errors.push(e);
            return None;
        }
    };
    let mut seen = BTreeSet::new();
    let mut units = Vec::with_capacity(recs.len());
    let mut ok = true;
    for (_, rec) in recs {
        if !seen.insert(rec[0].clone()) {
            errors.push(PanelError::DuplicateRow {
                file: file_label(path),
                unit: rec[0].clone(),
                year: 0,
                variable: "meta".into(),
            });
            ok = false;
            continue;
        }
        match rec[2].parse::<Zone>() {
            Ok(zone) => units.push(UnitMeta::new(rec[0].clone(), rec[1].clone(), zone)),
            Err(label) => {
                errors.push(PanelError::UnknownZoneLabel {
                    unit: rec[0].clone(),
                    label,
                });
                ok = false;
            }
        }
    }
    if units.is_empty() {
        errors.push(PanelError::EmptyPanel);
        return None;
    }
    ok.then_some(units)
}

fn read_radiation(
    path: &Path,
    index: &HashMap<&str, usize>,
    errors: &mut Vec<PanelError>,
) -> Option<Vec<Option<DailyRadiationSeries>>> {
    let recs = match read_records(path, &["unit_id", "date", "value"]) {
        Ok(r) => r,
        Err(e) => {
            errors.push(e);
            return None;
        }
    };
    let mut series: Vec<Option<DailyRadiationSeries>> = vec![None; index.len()];
    for (line, rec) in recs {
        let Some(&u) = index.get(rec[0].as_str()) else {
            errors.push(PanelError::UnknownUnit {
                unit: rec[0].clone(),
                context: file_label(path),
            });
            continue;
        };
        let date = match NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d") {
            Ok(d) => d,
            Err(_) => {
                errors.push(PanelError::Csv {
                    path: path.display().to_string(),
                    message: format!("line {line}: bad date {:?}", rec[1]),
                });
                continue;
            }
        };
        let value = match parse_num::<f64>(path, line, "value", &rec[2]) {
            Ok(v) => v,
            Err(e) => {
                errors.push(e);
                continue;
            }
        };
        series[u]
            .get_or_insert_with(|| DailyRadiationSeries {
                unit_id: rec[0].clone(),
                observations: Vec::new(),
            })
            .observations
            .push((date, value));
    }
    Some(series)
}

fn write_err(path: &Path, source: std::io::Error) -> PanelError {
    PanelError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `outcome.csv`, `covariates.csv` and `meta.csv` into `dir`.
/// Time-variant covariates are written at source year `t - lag`, so that
/// [`load_panel`] with the same lag reproduces the panel. Floats use the
/// shortest round-tripping representation.
pub fn write_panel(panel: &PanelDataset, dir: &Path, lag: i32) -> Result<(), PanelError> {
    std::fs::create_dir_all(dir).map_err(|e| write_err(dir, e))?;

    let path = dir.join("meta.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["unit_id", "name", "zone"])
        .map_err(|e| csv_err(&path, e))?;
    for u in panel.units() {
        w.write_record([u.unit_id.as_str(), u.name.as_str(), &u.zone.to_string()])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| write_err(&path, e))?;

    let path = dir.join("outcome.csv");
    let mut f = std::io::BufWriter::new(File::create(&path).map_err(|e| write_err(&path, e))?);
    writeln!(f, "unit_id,year,value").map_err(|e| write_err(&path, e))?;
    for (i, u) in panel.units().iter().enumerate() {
        for y in panel.years().iter() {
            writeln!(
                f,
                "{},{},{}",
                csv_field(&u.unit_id),
                y,
                panel.value(Variable::Outcome, i, y)
            )
            .map_err(|e| write_err(&path, e))?;
        }
    }
    f.flush().map_err(|e| write_err(&path, e))?;

    let path = dir.join("covariates.csv");
    let mut f = std::io::BufWriter::new(File::create(&path).map_err(|e| write_err(&path, e))?);
    writeln!(f, "unit_id,year,variable,value").map_err(|e| write_err(&path, e))?;
    for (i, u) in panel.units().iter().enumerate() {
        for var in panel.variables().into_iter().skip(1) {
            let shift = if var.is_time_variant() { lag } else { 0 };
            for y in panel.years().iter() {
                writeln!(
                    f,
                    "{},{},{},{}",
                    csv_field(&u.unit_id),
                    y - shift,
                    var,
                    panel.value(var, i, y)
                )
                .map_err(|e| write_err(&path, e))?;
            }
        }
    }
    f.flush().map_err(|e| write_err(&path, e))?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
