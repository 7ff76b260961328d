//! Synthetic control estimation.
//!
//! Donor weights `w` live on the simplex and minimize the predictor
//! discrepancy under predictor weights `v`; `v` itself (also on the simplex)
//! is chosen to minimize the pre-period mean squared prediction error of the
//! outcome. The inner problem is solved exactly by [`inner_weights`], the
//! outer one by Nelder-Mead over a softmax parameterization with seeded
//! random restarts.

mod nelder_mead;
mod simplex;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{PanelDataset, Variable, YearRange, Zone};
use crate::regions::AggregateSeries;
use nelder_mead::NelderMead;

pub use simplex::{
    inner_weights, inner_weights_from, project_simplex, renormalize, weighted_objective, InnerConfig, InnerSolution,
    InnerSolver,
};

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("donor pool is empty")]
    NoDonors,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("predictor {0} is constant across the treated unit and all donors")]
    DegeneratePredictors(String),
    #[error("invalid period: {0}")]
    InvalidPeriod(String),
    #[error("invalid predictor spec: {0}")]
    InvalidPredictorSpec(String),
    #[error("{label}: no value for {variable} in {year}")]
    MissingValue { label: String, variable: String, year: i32 },
    #[error("unit {unit} cannot be a donor: {reason}")]
    InvalidDonor { unit: String, reason: String },
    #[error("unit {0} is not in the panel")]
    UnknownUnit(String),
}

/// How time-variant covariates are summarized into one predictor value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateSummary {
    PreMean,
    AtYear(i32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Zscore,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSpec {
    pub outcome_lag_years: Vec<i32>,
    pub covariates: Vec<Variable>,
    pub covariate_summary: CovariateSummary,
    pub normalization: Normalization,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self {
            outcome_lag_years: vec![2016, 2018, 2020],
            covariates: Variable::COVARIATES.to_vec(),
            covariate_summary: CovariateSummary::PreMean,
            normalization: Normalization::Zscore,
        }
    }
}

impl PredictorSpec {
    pub fn predictor_names(&self) -> Vec<String> {
        self.outcome_lag_years
            .iter()
            .map(|y| format!("outcome_{y}"))
            .chain(self.covariates.iter().map(|c| c.to_string()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.outcome_lag_years.len() + self.covariates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw predictor vector of one series.
    pub fn values(&self, series: &AggregateSeries, pre: YearRange) -> Result<Vec<f64>, ScmError> {
        let get = |var: Variable, year: i32| {
            series
                .value_at(var, year)
                .filter(|v| v.is_finite())
                .ok_or_else(|| ScmError::MissingValue {
                    label: series.label.clone(),
                    variable: var.to_string(),
                    year,
                })
        };
        let mut out = Vec::with_capacity(self.len());
        for &y in &self.outcome_lag_years {
            out.push(get(Variable::Outcome, y)?);
        }
        for &var in &self.covariates {
            let v = match self.covariate_summary {
                CovariateSummary::PreMean => {
                    let mut s = 0.0;
                    for y in pre.iter() {
                        s += get(var, y)?;
                    }
                    s / pre.len() as f64
                }
                CovariateSummary::AtYear(y) => get(var, y)?,
            };
            out.push(v);
        }
        Ok(out)
    }
}

/// Solver settings for the outer (predictor weight) search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScmOptions {
    /// Random restarts in addition to the uniform start.
    pub restarts: usize,
    /// Restart seed. Run configs set it from their top-level `seed`.
    #[serde(skip)]
    pub seed: u64,
    pub inner: InnerConfig,
    /// Objective evaluations per Nelder-Mead run.
    pub max_evals: usize,
    /// Nelder-Mead stops once the spread of simplex values is below
    /// `ftol_abs * var(Y_pre) + ftol_rel * best`, where `var(Y_pre)` is the
    /// spread of the treated pre-period outcomes over time.
    pub ftol_rel: f64,
    pub ftol_abs: f64,
    /// Standard deviation of random softmax logits for restarts.
    pub restart_scale: f64,
}

impl Default for ScmOptions {
    fn default() -> Self {
        Self {
            restarts: 20,
            seed: 20_200_101,
            inner: InnerConfig::default(),
            max_evals: 600,
            ftol_rel: 1e-6,
            ftol_abs: 1e-10,
            restart_scale: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub predictor: String,
    pub treated: f64,
    pub synthetic: f64,
    pub abs_diff: f64,
    /// `100 * (treated - synthetic) / synthetic`; `None` when synthetic is 0.
    pub rel_diff_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScmFit {
    pub treated_label: String,
    pub donor_ids: Vec<String>,
    pub w: Vec<f64>,
    pub predictor_names: Vec<String>,
    pub v: Vec<f64>,
    pub pre_period: YearRange,
    pub post_period: YearRange,
    pub years: Vec<i32>,
    pub treated_path: Vec<f64>,
    pub synthetic_path: Vec<f64>,
    pub gaps: Vec<f64>,
    pub rmspe_pre: f64,
    pub rmspe_post: f64,
    /// Inner objective at the chosen `v`, on normalized predictors.
    pub predictor_loss: f64,
    /// Donors with weight above 0.01.
    pub active_donors: usize,
    pub balance: Vec<BalanceRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placebo_year: Option<i32>,
    #[serde(skip)]
    pub(crate) treated_predictors: Vec<f64>,
    #[serde(skip)]
    pub(crate) donor_predictors: DMatrix<f64>,
}

impl ScmFit {
    pub fn gap_at(&self, year: i32) -> Option<f64> {
        self.years.iter().position(|&y| y == year).map(|i| self.gaps[i])
    }

    /// Weight of a donor by id (0 when absent).
    pub fn weight_of(&self, unit_id: &str) -> f64 {
        self.donor_ids
            .iter()
            .position(|d| d == unit_id)
            .map(|i| self.w[i])
            .unwrap_or(0.0)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("fit serializes")
    }

    /// Plot-ready `year,treated,synthetic` rows.
    pub fn path_csv(&self) -> String {
        let mut s = String::from("year,treated,synthetic\n");
        for i in 0..self.years.len() {
            s.push_str(&format!(
                "{},{},{}\n",
                self.years[i],
                crate::report::sig6(self.treated_path[i]),
                crate::report::sig6(self.synthetic_path[i])
            ));
        }
        s
    }
}

fn rmspe(gaps: &[f64]) -> f64 {
    if gaps.is_empty() {
        return 0.0;
    }
    (gaps.iter().map(|g| g * g).sum::<f64>() / gaps.len() as f64).sqrt()
}

fn validate_periods(spec: &PredictorSpec, years: YearRange, pre: YearRange, post: YearRange) -> Result<(), ScmError> {
    if pre.last >= post.first {
        return Err(ScmError::InvalidPeriod(format!(
            "pre {pre} must end before post {post}"
        )));
    }
    if !years.covers(&YearRange::new(pre.first, post.last)) {
        return Err(ScmError::InvalidPeriod(format!(
            "{pre} and {post} not inside panel years {years}"
        )));
    }
    if spec.is_empty() {
        return Err(ScmError::InvalidPredictorSpec("no predictors".into()));
    }
    if let Some(y) = spec.outcome_lag_years.iter().find(|y| !pre.contains(**y)) {
        return Err(ScmError::InvalidPredictorSpec(format!(
            "outcome lag {y} outside pre period {pre}"
        )));
    }
    if let CovariateSummary::AtYear(y) = spec.covariate_summary {
        if !pre.contains(y) {
            return Err(ScmError::InvalidPredictorSpec(format!(
                "covariate year {y} outside pre period {pre}"
            )));
        }
    }
    if spec.covariates.contains(&Variable::Outcome) {
        return Err(ScmError::InvalidPredictorSpec(
            "use outcome_lag_years for the outcome".into(),
        ));
    }
    Ok(())
}

/// Normalizes predictors across the treated unit and donors.
fn normalize(
    names: &[String],
    x1: &[f64],
    x0: &DMatrix<f64>,
    mode: Normalization,
) -> Result<(Vec<f64>, DMatrix<f64>), ScmError> {
    let k = x1.len();
    let j = x0.ncols();
    let mut z1 = x1.to_vec();
    let mut z0 = x0.clone();
    for r in 0..k {
        let all = std::iter::once(x1[r]).chain((0..j).map(|c| x0[(r, c)]));
        let (lo, hi) = all
            .clone()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo == hi {
            return Err(ScmError::DegeneratePredictors(names[r].clone()));
        }
        if mode == Normalization::Zscore {
            let n = (j + 1) as f64;
            let mean = all.clone().sum::<f64>() / n;
            let sd = (all.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if sd.is_nan() || sd <= 0.0 {
                return Err(ScmError::DegeneratePredictors(names[r].clone()));
            }
            z1[r] = (x1[r] - mean) / sd;
            for c in 0..j {
                z0[(r, c)] = (x0[(r, c)] - mean) / sd;
            }
        }
    }
    Ok((z1, z0))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    // last coordinate pinned at logit 0
    let max = logits.iter().copied().fold(0.0f64, f64::max);
    let mut v: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    v.push((-max).exp());
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Fits a synthetic control for a treated series against donor series.
pub fn fit_scm_series(
    treated: &AggregateSeries,
    donors: &[AggregateSeries],
    spec: &PredictorSpec,
    pre: YearRange,
    post: YearRange,
    options: &ScmOptions,
) -> Result<ScmFit, ScmError> {
    if donors.is_empty() {
        return Err(ScmError::NoDonors);
    }
    validate_periods(spec, treated.years, pre, post)?;
    for d in donors {
        if d.years != treated.years {
            return Err(ScmError::DimensionMismatch(format!(
                "donor {} covers {}, treated covers {}",
                d.label, d.years, treated.years
            )));
        }
    }
    let names = spec.predictor_names();
    let k = names.len();
    let j = donors.len();
    let x1 = spec.values(treated, pre)?;
    let mut x0 = DMatrix::zeros(k, j);
    for (c, d) in donors.iter().enumerate() {
        for (r, v) in spec.values(d, pre)?.into_iter().enumerate() {
            x0[(r, c)] = v;
        }
    }
    let (z1, z0) = normalize(&names, &x1, &x0, spec.normalization)?;

    let outcome = |s: &AggregateSeries, y: i32| -> Result<f64, ScmError> {
        s.outcome_at(y)
            .filter(|v| v.is_finite())
            .ok_or_else(|| ScmError::MissingValue {
                label: s.label.clone(),
                variable: "outcome".into(),
                year: y,
            })
    };
    let pre_years: Vec<i32> = pre.iter().collect();
    let y1_pre: Vec<f64> = pre_years
        .iter()
        .map(|&y| outcome(treated, y))
        .collect::<Result<_, _>>()?;
    let mut y0_pre = DMatrix::zeros(pre_years.len(), j);
    for (c, d) in donors.iter().enumerate() {
        for (t, &y) in pre_years.iter().enumerate() {
            y0_pre[(t, c)] = outcome(d, y)?;
        }
    }
    let mspe = |w: &[f64]| -> f64 {
        let mut total = 0.0;
        for t in 0..pre_years.len() {
            let mut synth = 0.0;
            for (c, &wc) in w.iter().enumerate() {
                if wc != 0.0 {
                    synth += wc * y0_pre[(t, c)];
                }
            }
            total += (y1_pre[t] - synth).powi(2);
        }
        total / pre_years.len() as f64
    };

    let (v, inner) = if k == 1 || j == 1 {
        let v = vec![1.0 / k as f64; k];
        let inner = inner_weights(&z1, &z0, &v, &options.inner)?;
        (v, inner)
    } else {
        search_predictor_weights(&z1, &z0, &mspe, &y1_pre, options)?
    };
    let mut v = v;
    renormalize(&mut v);
    let w = inner.w;

    let years: Vec<i32> = (pre.first..=post.last).collect();
    let mut treated_path = Vec::with_capacity(years.len());
    let mut synthetic_path = Vec::with_capacity(years.len());
    for &y in &years {
        treated_path.push(outcome(treated, y)?);
        let mut s = 0.0;
        for (c, d) in donors.iter().enumerate() {
            s += w[c] * outcome(d, y)?;
        }
        synthetic_path.push(s);
    }
    let gaps: Vec<f64> = treated_path.iter().zip(&synthetic_path).map(|(a, b)| a - b).collect();
    let pick = |range: YearRange| -> Vec<f64> {
        years
            .iter()
            .zip(&gaps)
            .filter(|(y, _)| range.contains(**y))
            .map(|(_, g)| *g)
            .collect()
    };
    let rmspe_pre = rmspe(&pick(pre));
    let rmspe_post = rmspe(&pick(post));

    let mut fit = ScmFit {
        treated_label: treated.label.clone(),
        donor_ids: donors.iter().map(|d| d.label.clone()).collect(),
        active_donors: w.iter().filter(|&&x| x > 0.01).count(),
        w,
        predictor_names: names,
        v,
        pre_period: pre,
        post_period: post,
        years,
        treated_path,
        synthetic_path,
        gaps,
        rmspe_pre,
        rmspe_post,
        predictor_loss: inner.objective,
        balance: Vec::new(),
        placebo_year: None,
        treated_predictors: x1,
        donor_predictors: x0,
    };
    fit.balance = predictor_balance(&fit);
    Ok(fit)
}

fn search_predictor_weights(
    z1: &[f64],
    z0: &DMatrix<f64>,
    mspe: &dyn Fn(&[f64]) -> f64,
    y1_pre: &[f64],
    options: &ScmOptions,
) -> Result<(Vec<f64>, InnerSolution), ScmError> {
    let k = z1.len();
    let mut failure = None;
    let mut support: Vec<usize> = Vec::new();
    let mut best: Option<(f64, Vec<f64>, InnerSolution)> = None;
    let mut objective = |logits: &[f64]| -> f64 {
        let v = softmax(logits);
        match inner_weights_from(z1, z0, &v, &options.inner, &support) {
            Ok(s) => {
                let f = mspe(&s.w);
                support.clear();
                support.extend((0..s.w.len()).filter(|&j| s.w[j] > 0.0));
                if best.as_ref().is_none_or(|(bf, _, _)| f < *bf) {
                    best = Some((f, v, s));
                }
                f
            }
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        }
    };
    let n = y1_pre.len() as f64;
    let mean = y1_pre.iter().sum::<f64>() / n;
    let scale = y1_pre.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let nm = NelderMead {
        max_evals: options.max_evals,
        ftol_rel: options.ftol_rel,
        ftol_abs: options.ftol_abs * scale.max(f64::MIN_POSITIVE),
        initial_step: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let normal = Normal::new(0.0, options.restart_scale).expect("positive scale");
    let mut starts = vec![vec![0.0; k - 1]];
    for _ in 0..options.restarts {
        starts.push((0..k - 1).map(|_| normal.sample(&mut rng)).collect());
    }
    for start in &starts {
        let m = nm.minimize(&mut objective, start);
        if m.f == 0.0 {
            break;
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let (_, v, inner) = best.expect("at least one evaluation");
    Ok((v, inner))
}

/// Fits a synthetic control with donors drawn from the panel.
pub fn fit_scm(
    panel: &PanelDataset,
    treated: &AggregateSeries,
    donor_ids: &[String],
    spec: &PredictorSpec,
    pre: YearRange,
    post: YearRange,
    options: &ScmOptions,
) -> Result<ScmFit, ScmError> {
    let donors = donor_series(panel, treated, donor_ids)?;
    fit_scm_series(treated, &donors, spec, pre, post, options)
}

/// Panel series of the donors, rejecting split units and treated members.
pub fn donor_series(
    panel: &PanelDataset,
    treated: &AggregateSeries,
    donor_ids: &[String],
) -> Result<Vec<AggregateSeries>, ScmError> {
    if donor_ids.is_empty() {
        return Err(ScmError::NoDonors);
    }
    donor_ids
        .iter()
        .map(|id| {
            let u = panel.unit_index(id).ok_or_else(|| ScmError::UnknownUnit(id.clone()))?;
            if panel.units()[u].zone == Zone::Split {
                return Err(ScmError::InvalidDonor {
                    unit: id.clone(),
                    reason: "split unit".into(),
                });
            }
            if treated.members.contains(id) {
                return Err(ScmError::InvalidDonor {
                    unit: id.clone(),
                    reason: format!("member of treated {}", treated.label),
                });
            }
            Ok(AggregateSeries::from_unit(panel, u))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    Pre,
    Post,
    Gap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub year: i32,
    pub period: Period,
    pub treated: f64,
    pub synthetic: f64,
    /// kW per capita.
    pub absolute: f64,
    /// Percent of the synthetic outcome; `None` when it is zero.
    pub relative_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTable {
    pub treated_label: String,
    pub rows: Vec<EffectRow>,
    /// Years whose synthetic outcome is zero.
    pub zero_synthetic_years: Vec<i32>,
}

impl EffectTable {
    pub fn row(&self, year: i32) -> Option<&EffectRow> {
        self.rows.iter().find(|r| r.year == year)
    }

    /// Last pre-period year followed by all post years.
    pub fn to_csv(&self) -> String {
        use crate::report::sig6;
        let last_pre = self
            .rows
            .iter()
            .filter(|r| r.period == Period::Pre)
            .map(|r| r.year)
            .max();
        let mut s = String::from("year,period,treated,synthetic,absolute_kw,relative_pct\n");
        for r in &self.rows {
            if r.period == Period::Post || Some(r.year) == last_pre {
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.year,
                    match r.period {
                        Period::Pre => "pre",
                        Period::Post => "post",
                        Period::Gap => "gap",
                    },
                    sig6(r.treated),
                    sig6(r.synthetic),
                    sig6(r.absolute),
                    r.relative_pct.map(sig6).unwrap_or_else(|| "NA".into())
                ));
            }
        }
        s
    }
}

/// Absolute and relative gaps for every fitted year.
pub fn effect_table(fit: &ScmFit) -> EffectTable {
    let mut zero = Vec::new();
    let rows = fit
        .years
        .iter()
        .enumerate()
        .map(|(i, &year)| {
            let synthetic = fit.synthetic_path[i];
            let absolute = fit.gaps[i];
            let relative_pct = if synthetic == 0.0 {
                zero.push(year);
                None
            } else {
                Some(100.0 * absolute / synthetic)
            };
            let period = if fit.pre_period.contains(year) {
                Period::Pre
            } else if fit.post_period.contains(year) {
                Period::Post
            } else {
                Period::Gap
            };
            EffectRow {
                year,
                period,
                treated: fit.treated_path[i],
                synthetic,
                absolute,
                relative_pct,
            }
        })
        .collect();
    EffectTable {
        treated_label: fit.treated_label.clone(),
        rows,
        zero_synthetic_years: zero,
    }
}

/// Treated against synthetic predictor values, in raw units.
pub fn predictor_balance(fit: &ScmFit) -> Vec<BalanceRow> {
    fit.predictor_names
        .iter()
        .enumerate()
        .map(|(r, name)| {
            let treated = fit.treated_predictors[r];
            let synthetic: f64 = (0..fit.w.len()).map(|c| fit.w[c] * fit.donor_predictors[(r, c)]).sum();
            BalanceRow {
                predictor: name.clone(),
                treated,
                synthetic,
                abs_diff: (treated - synthetic).abs(),
                rel_diff_pct: (synthetic != 0.0).then(|| 100.0 * (treated - synthetic) / synthetic),
            }
        })
        .collect()
}

/// One donor of the synthetic control group with its predictor values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub unit_id: String,
    pub weight: f64,
    pub predictors: Vec<f64>,
}

/// Donors with weight above `threshold`, heaviest first.
pub fn scg_composition(fit: &ScmFit, threshold: f64) -> Vec<CompositionRow> {
    let mut rows: Vec<CompositionRow> = (0..fit.w.len())
        .filter(|&c| fit.w[c] > threshold)
        .map(|c| CompositionRow {
            unit_id: fit.donor_ids[c].clone(),
            weight: fit.w[c],
            predictors: fit.donor_predictors.column(c).iter().copied().collect(),
        })
        .collect();
    rows.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.unit_id.cmp(&b.unit_id)));
    rows
}
