//! Difference-in-differences comparator: the two-group regression with
//! optional year fixed effects and controls, a pre-period parallel-trends
//! check and an in-time placebo.

mod ols;

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::panel::{PanelDataset, Variable, YearRange};
use crate::regions::AggregateSeries;
use crate::report::fixed;

pub use ols::SeType;

#[derive(Debug, Error)]
pub enum DidError {
    #[error("design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficientDesign { columns: Vec<String> },
    #[error("group {0} has no observations in one of the periods")]
    EmptyGroup(String),
    #[error("unit {0} is not in the panel")]
    UnknownUnit(String),
    #[error("unit {0} is in both groups")]
    OverlappingGroups(String),
    #[error("{variable} cannot be a control")]
    InvalidControl { variable: String },
    #[error("year {year} is outside {years}")]
    YearOutOfRange { year: i32, years: YearRange },
    #[error("need at least 3 pre-period years, have {have}")]
    InsufficientPrePeriod { have: usize },
    #[error("placebo year {placebo} must precede the post year {post}")]
    InvalidPlaceboYear { placebo: i32, post: i32 },
    #[error("{label}: missing {variable} in {year}")]
    MissingValue { label: String, variable: String, year: i32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DidSpec {
    /// First year coded as post-treatment.
    pub post_year: i32,
    pub controls: Vec<Variable>,
    pub year_fixed_effects: bool,
    pub se_type: SeType,
    /// Student-t p-values instead of the normal approximation.
    pub small_sample_t: bool,
}

impl Default for DidSpec {
    fn default() -> Self {
        Self {
            post_year: 2020,
            controls: Vec::new(),
            year_fixed_effects: true,
            se_type: SeType::Hc1,
            small_sample_t: false,
        }
    }
}

/// One row of the regression sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub unit: String,
    pub year: i32,
    pub treated: bool,
    pub outcome: f64,
    pub controls: Vec<f64>,
}

/// Observations of a treated (north) and a control (south) group.
#[derive(Debug, Clone, PartialEq)]
pub struct DidSample {
    pub treated_label: String,
    pub control_label: String,
    pub controls: Vec<Variable>,
    pub observations: Vec<Observation>,
}

impl DidSample {
    /// Unit-level observations for every panel year.
    pub fn from_panel(
        panel: &PanelDataset,
        treated: &BTreeSet<String>,
        control: &BTreeSet<String>,
        controls: &[Variable],
        labels: (&str, &str),
    ) -> Result<Self, DidError> {
        if let Some(u) = treated.intersection(control).next() {
            return Err(DidError::OverlappingGroups(u.clone()));
        }
        check_controls(controls)?;
        let mut observations = Vec::new();
        for (set, is_treated) in [(treated, true), (control, false)] {
            for id in set {
                let u = panel.unit_index(id).ok_or_else(|| DidError::UnknownUnit(id.clone()))?;
                for year in panel.years().iter() {
                    let values = controls
                        .iter()
                        .map(|&c| finite(panel.value(c, u, year), id, c, year))
                        .collect::<Result<_, _>>()?;
                    observations.push(Observation {
                        unit: id.clone(),
                        year,
                        treated: is_treated,
                        outcome: finite(panel.value(Variable::Outcome, u, year), id, Variable::Outcome, year)?,
                        controls: values,
                    });
                }
            }
        }
        Ok(Self {
            treated_label: labels.0.into(),
            control_label: labels.1.into(),
            controls: controls.to_vec(),
            observations,
        })
    }

    /// Two aggregate series as the only two units.
    pub fn from_aggregates(
        treated: &AggregateSeries,
        control: &AggregateSeries,
        controls: &[Variable],
    ) -> Result<Self, DidError> {
        check_controls(controls)?;
        let mut observations = Vec::new();
        for (s, is_treated) in [(treated, true), (control, false)] {
            for year in s.years.iter() {
                let values = controls
                    .iter()
                    .map(|&c| finite(s.value_at(c, year).unwrap_or(f64::NAN), &s.label, c, year))
                    .collect::<Result<_, _>>()?;
                observations.push(Observation {
                    unit: s.label.clone(),
                    year,
                    treated: is_treated,
                    outcome: finite(
                        s.outcome_at(year).unwrap_or(f64::NAN),
                        &s.label,
                        Variable::Outcome,
                        year,
                    )?,
                    controls: values,
                });
            }
        }
        Ok(Self {
            treated_label: treated.label.clone(),
            control_label: control.label.clone(),
            controls: controls.to_vec(),
            observations,
        })
    }

    /// Keeps observations with `keep(year)`.
    pub fn filter_years(&self, keep: impl Fn(i32) -> bool) -> Self {
        let mut out = self.clone();
        out.observations.retain(|o| keep(o.year));
        out
    }

    fn years(&self) -> Vec<i32> {
        let set: BTreeSet<i32> = self.observations.iter().map(|o| o.year).collect();
        set.into_iter().collect()
    }

    fn cluster_ids(&self) -> Vec<usize> {
        let units: BTreeSet<&str> = self.observations.iter().map(|o| o.unit.as_str()).collect();
        let units: Vec<&str> = units.into_iter().collect();
        self.observations
            .iter()
            .map(|o| units.binary_search(&o.unit.as_str()).expect("present"))
            .collect()
    }

    fn check_cells(&self, post_year: i32) -> Result<(), DidError> {
        for (treated, label) in [(true, &self.treated_label), (false, &self.control_label)] {
            for post in [false, true] {
                if !self
                    .observations
                    .iter()
                    .any(|o| o.treated == treated && (o.year >= post_year) == post)
                {
                    return Err(DidError::EmptyGroup(label.clone()));
                }
            }
        }
        Ok(())
    }
}

fn check_controls(controls: &[Variable]) -> Result<(), DidError> {
    match controls.iter().find(|c| !c.is_time_variant()) {
        Some(c) => Err(DidError::InvalidControl {
            variable: c.to_string(),
        }),
        None => Ok(()),
    }
}

fn finite(v: f64, label: &str, var: Variable, year: i32) -> Result<f64, DidError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DidError::MissingValue {
            label: label.into(),
            variable: var.to_string(),
            year,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
}

impl Coefficient {
    pub fn stars(&self) -> &'static str {
        match self.p {
            p if p < 0.01 => "***",
            p if p < 0.05 => "**",
            p if p < 0.1 => "*",
            _ => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidFit {
    pub treated_label: String,
    pub control_label: String,
    pub post_year: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placebo_post_year: Option<i32>,
    pub year_fixed_effects: bool,
    pub se_type: SeType,
    pub coefficients: Vec<Coefficient>,
    /// Terms absorbed by other columns and left out of the design.
    pub dropped: Vec<String>,
    pub atet: f64,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub r_squared: f64,
}

pub const ATET: &str = "ATET";

impl DidFit {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn atet_coefficient(&self) -> &Coefficient {
        self.coefficient(ATET).expect("ATET always estimated")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("fit serializes")
    }
}

fn p_value(t: f64, df: Option<f64>) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { f64::NAN } else { 0.0 };
    }
    let tail = match df {
        Some(df) if df > 0.0 => 1.0 - StudentsT::new(0.0, 1.0, df).expect("valid df").cdf(t.abs()),
        _ => 1.0 - Normal::new(0.0, 1.0).expect("standard normal").cdf(t.abs()),
    };
    (2.0 * tail).clamp(0.0, 1.0)
}

struct Design {
    x: DMatrix<f64>,
    names: Vec<String>,
}

fn regress(
    design: Design,
    y: DVector<f64>,
    se_type: SeType,
    small_sample_t: bool,
    clusters: &[usize],
) -> Result<(Vec<Coefficient>, ols::OlsFit), DidError> {
    let bad = ols::collinear_columns(&design.x);
    if !bad.is_empty() {
        return Err(DidError::RankDeficientDesign {
            columns: bad.iter().map(|&j| design.names[j].clone()).collect(),
        });
    }
    let fit = ols::ols(&design.x, &y, se_type, clusters);
    let df = small_sample_t.then(|| match se_type {
        SeType::Hc1 => fit.df_resid as f64,
        SeType::ClusterByUnit => fit.n_clusters.saturating_sub(1) as f64,
    });
    let coefficients = design
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| coefficient(name, fit.beta[j], fit.cov[(j, j)], df))
        .collect();
    Ok((coefficients, fit))
}

fn coefficient(name: &str, estimate: f64, var: f64, df: Option<f64>) -> Coefficient {
    let se = var.max(0.0).sqrt();
    let t = if se > 0.0 {
        estimate / se
    } else if estimate == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(estimate)
    };
    Coefficient {
        name: name.into(),
        estimate,
        se,
        t,
        p: if se == 0.0 && estimate == 0.0 {
            1.0
        } else {
            p_value(t, df)
        },
    }
}

fn did_on_sample(sample: &DidSample, spec: &DidSpec, post_year: i32) -> Result<DidFit, DidError> {
    sample.check_cells(post_year)?;
    let years = sample.years();
    let mut names = vec!["Constant".to_string(), "North".to_string()];
    let mut dropped = Vec::new();
    if spec.year_fixed_effects {
        names.extend(years.iter().skip(1).map(|y| format!("Year {y}")));
        dropped.push("Post".to_string());
    } else {
        names.push("Post".to_string());
    }
    names.push(ATET.to_string());
    names.extend(sample.controls.iter().map(|c| c.to_string()));

    let n = sample.observations.len();
    let x = DMatrix::from_fn(n, names.len(), |i, j| {
        let o = &sample.observations[i];
        let north = if o.treated { 1.0 } else { 0.0 };
        let post = if o.year >= post_year { 1.0 } else { 0.0 };
        let n_time = if spec.year_fixed_effects { years.len() - 1 } else { 1 };
        match j {
            0 => 1.0,
            1 => north,
            j if j < 2 + n_time => {
                if spec.year_fixed_effects {
                    if o.year == years[j - 1] {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    post
                }
            }
            j if j == 2 + n_time => north * post,
            j => o.controls[j - 3 - n_time],
        }
    });
    let y = DVector::from_iterator(n, sample.observations.iter().map(|o| o.outcome));
    let (coefficients, fit) = regress(
        Design { x, names },
        y,
        spec.se_type,
        spec.small_sample_t,
        &sample.cluster_ids(),
    )?;
    let atet = coefficients.iter().find(|c| c.name == ATET).expect("present").estimate;
    Ok(DidFit {
        treated_label: sample.treated_label.clone(),
        control_label: sample.control_label.clone(),
        post_year,
        placebo_post_year: None,
        year_fixed_effects: spec.year_fixed_effects,
        se_type: spec.se_type,
        coefficients,
        dropped,
        atet,
        n_obs: n,
        n_clusters: fit.n_clusters,
        r_squared: fit.r_squared,
    })
}

/// Two-group difference-in-differences regression.
pub fn fit_did(sample: &DidSample, spec: &DidSpec) -> Result<DidFit, DidError> {
    did_on_sample(sample, spec, spec.post_year)
}

/// Difference of group-period mean changes, computed from raw means.
pub fn did_2x2_oracle(sample: &DidSample, post_year: i32) -> Result<f64, DidError> {
    let mean = |treated: bool, post: bool| -> Option<f64> {
        let vals: Vec<f64> = sample
            .observations
            .iter()
            .filter(|o| o.treated == treated && (o.year >= post_year) == post)
            .map(|o| o.outcome)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let get = |treated: bool, post: bool| {
        mean(treated, post).ok_or_else(|| {
            DidError::EmptyGroup(if treated {
                sample.treated_label.clone()
            } else {
                sample.control_label.clone()
            })
        })
    };
    Ok((get(true, true)? - get(true, false)?) - (get(false, true)? - get(false, false)?))
}

/// DiD with treatment moved to `placebo_post_year`, dropping the true
/// post-period observations.
pub fn did_placebo(sample: &DidSample, spec: &DidSpec, placebo_post_year: i32) -> Result<DidFit, DidError> {
    if placebo_post_year >= spec.post_year {
        return Err(DidError::InvalidPlaceboYear {
            placebo: placebo_post_year,
            post: spec.post_year,
        });
    }
    let truncated = sample.filter_years(|y| y < spec.post_year);
    let mut fit = did_on_sample(&truncated, spec, placebo_post_year)?;
    fit.post_year = spec.post_year;
    fit.placebo_post_year = Some(placebo_post_year);
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendTest {
    pub treated_label: String,
    pub control_label: String,
    pub pre_years: YearRange,
    pub coefficients: Vec<Coefficient>,
    /// Control-group by year interaction.
    pub interaction: Coefficient,
    pub n_obs: usize,
    pub r_squared: f64,
}

/// Pre-period regression of the outcome on a control-group dummy, a linear
/// year trend and their interaction.
pub fn parallel_trends_test(sample: &DidSample, spec: &DidSpec) -> Result<TrendTest, DidError> {
    let pre = sample.filter_years(|y| y < spec.post_year);
    let years = pre.years();
    if years.len() < 3 {
        return Err(DidError::InsufficientPrePeriod { have: years.len() });
    }
    for (treated, label) in [(true, &pre.treated_label), (false, &pre.control_label)] {
        if !pre.observations.iter().any(|o| o.treated == treated) {
            return Err(DidError::EmptyGroup(label.clone()));
        }
    }
    let center = years.iter().map(|&y| y as f64).sum::<f64>() / years.len() as f64;
    let names: Vec<String> = ["Constant", "South", "Year", "South x Year"].map(String::from).to_vec();
    let n = pre.observations.len();
    let x = DMatrix::from_fn(n, 4, |i, j| {
        let o = &pre.observations[i];
        let south = if o.treated { 0.0 } else { 1.0 };
        let t = o.year as f64 - center;
        match j {
            0 => 1.0,
            1 => south,
            2 => t,
            _ => south * t,
        }
    });
    let y = DVector::from_iterator(n, pre.observations.iter().map(|o| o.outcome));
    let bad = ols::collinear_columns(&x);
    if !bad.is_empty() {
        return Err(DidError::RankDeficientDesign {
            columns: bad.iter().map(|&j| names[j].clone()).collect(),
        });
    }
    let fit = ols::ols(&x, &y, spec.se_type, &pre.cluster_ids());
    // back to calendar years: intercepts absorb the centring shift
    let mut a = DMatrix::<f64>::identity(4, 4);
    a[(0, 2)] = -center;
    a[(1, 3)] = -center;
    let beta = &a * &fit.beta;
    let cov = &a * &fit.cov * a.transpose();
    let df = spec.small_sample_t.then(|| match spec.se_type {
        SeType::Hc1 => fit.df_resid as f64,
        SeType::ClusterByUnit => fit.n_clusters.saturating_sub(1) as f64,
    });
    let coefficients: Vec<Coefficient> = (0..4)
        .map(|j| coefficient(&names[j], beta[j], cov[(j, j)], df))
        .collect();
    Ok(TrendTest {
        treated_label: sample.treated_label.clone(),
        control_label: sample.control_label.clone(),
        pre_years: YearRange::new(years[0], *years.last().expect("non-empty")),
        interaction: coefficients[3].clone(),
        coefficients,
        n_obs: n,
        r_squared: fit.r_squared,
    })
}

/// Parallel-trends coefficients, one column per test, in the layout of
/// [`regression_table`].
pub fn trends_table(columns: &[(&str, &TrendTest)]) -> String {
    let names = ["South", "Year", "South x Year", "Constant"];
    let label_width = 18;
    let width = columns.iter().map(|(t, _)| t.len()).max().unwrap_or(0).max(14) + 2;
    let mut out = format!("{:label_width$}", "");
    for (title, _) in columns {
        out.push_str(&format!("{title:>width$}"));
    }
    out.push('\n');
    for name in names {
        let mut est = format!("{name:label_width$}");
        let mut se = format!("{:label_width$}", "");
        for (_, test) in columns {
            let c = test.coefficients.iter().find(|c| c.name == name).expect("fixed design");
            est.push_str(&format!("{:>width$}", format!("{}{}", fixed(c.estimate, 3), c.stars())));
            se.push_str(&format!("{:>width$}", format!("({})", fixed(c.se, 3))));
        }
        out.push_str(est.trim_end());
        out.push('\n');
        out.push_str(se.trim_end());
        out.push('\n');
    }
    let mut footer = |label: &str, f: &dyn Fn(&TrendTest) -> String| {
        out.push_str(&format!("{label:label_width$}"));
        for (_, test) in columns {
            out.push_str(&format!("{:>width$}", f(test)));
        }
        out.push('\n');
    };
    footer("p (South x Year)", &|t| fixed(t.interaction.p, 3));
    footer("Observations", &|t| t.n_obs.to_string());
    footer("R-squared", &|t| fixed(t.r_squared, 3));
    out
}

/// Aligned text table with one column per fit: estimates with stars and
/// standard errors in parentheses underneath.
pub fn regression_table(columns: &[(&str, &DidFit)]) -> String {
    let mut names: Vec<String> = ["North", "Post", ATET].map(String::from).to_vec();
    for (_, fit) in columns {
        for name in fit.coefficients.iter().map(|c| &c.name).chain(&fit.dropped) {
            if name != "Constant" && !name.starts_with("Year ") && !names.contains(name) {
                names.push(name.clone());
            }
        }
    }
    names.retain(|n| {
        columns
            .iter()
            .any(|(_, f)| f.coefficient(n).is_some() || f.dropped.contains(n))
    });
    names.push("Constant".into());
    let label_width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(14) + 2;
    let width = columns.iter().map(|(t, _)| t.len()).max().unwrap_or(0).max(14) + 2;
    let mut out = format!("{:label_width$}", "");
    for (title, _) in columns {
        out.push_str(&format!("{title:>width$}"));
    }
    out.push('\n');
    for name in &names {
        let mut est = format!("{name:label_width$}");
        let mut se = format!("{:label_width$}", "");
        for (_, fit) in columns {
            match fit.coefficient(name) {
                Some(c) => {
                    est.push_str(&format!("{:>width$}", format!("{}{}", fixed(c.estimate, 3), c.stars())));
                    se.push_str(&format!("{:>width$}", format!("({})", fixed(c.se, 3))));
                }
                None if fit.dropped.contains(name) => {
                    est.push_str(&format!("{:>width$}", "(dropped)"));
                    se.push_str(&format!("{:width$}", ""));
                }
                None => {
                    est.push_str(&format!("{:width$}", ""));
                    se.push_str(&format!("{:width$}", ""));
                }
            }
        }
        out.push_str(est.trim_end());
        out.push('\n');
        out.push_str(se.trim_end());
        out.push('\n');
    }
    let mut footer = |label: &str, f: &dyn Fn(&DidFit) -> String| {
        out.push_str(&format!("{label:label_width$}"));
        for (_, fit) in columns {
            out.push_str(&format!("{:>width$}", f(fit)));
        }
        out.push('\n');
    };
    footer("Year FE", &|f| {
        if f.year_fixed_effects {
            "Yes".into()
        } else {
            "No".into()
        }
    });
    footer("Observations", &|f| f.n_obs.to_string());
    footer("R-squared", &|f| fixed(f.r_squared, 3));
    out.push_str("Standard errors in parentheses. *** p<0.01, ** p<0.05, * p<0.1\n");
    out
}
