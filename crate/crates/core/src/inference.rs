//! Validity checks for synthetic control fits: the donor-pool outcome
//! envelope, in-time placebos and the RMSPE-ratio permutation test.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{PanelDataset, Variable, YearRange};
use crate::regions::AggregateSeries;
use crate::report::sig6;
use crate::scm::{donor_series, fit_scm_series, PredictorSpec, ScmError, ScmFit, ScmOptions};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error("placebo year {placebo_year} leaves no pre-period history (first year {first_year})")]
    InsufficientPrePeriod { placebo_year: i32, first_year: i32 },
    #[error("placebo year {placebo_year} is not inside the pre period {pre}")]
    PlaceboOutsidePrePeriod { placebo_year: i32, pre: YearRange },
    #[error("donor pool is empty")]
    EmptyDonorPool,
    #[error("unit {0} is not in the panel")]
    UnknownUnit(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub year: i32,
    pub min: f64,
    pub max: f64,
    pub unit_at_min: String,
    pub unit_at_max: String,
}

/// Whether a series stays within the envelope, year by year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Containment {
    pub label: String,
    pub inside: Vec<bool>,
    pub all_inside: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationEnvelope {
    pub rows: Vec<EnvelopeRow>,
    pub containment: Vec<Containment>,
}

impl PermutationEnvelope {
    pub fn row(&self, year: i32) -> Option<&EnvelopeRow> {
        self.rows.iter().find(|r| r.year == year)
    }

    pub fn containment_of(&self, series: &AggregateSeries) -> Containment {
        let inside: Vec<bool> = self
            .rows
            .iter()
            .map(|r| series.outcome_at(r.year).is_some_and(|y| y >= r.min && y <= r.max))
            .collect();
        Containment {
            label: series.label.clone(),
            all_inside: inside.iter().all(|&b| b),
            inside,
        }
    }

    /// Records containment of each series.
    pub fn with_overlays(mut self, series: &[AggregateSeries]) -> Self {
        self.containment = series.iter().map(|s| self.containment_of(s)).collect();
        self
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("year,min,max,unit_at_min,unit_at_max\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.year,
                sig6(r.min),
                sig6(r.max),
                r.unit_at_min,
                r.unit_at_max
            ));
        }
        s
    }
}

/// Per-year minimum and maximum outcome over the donor units.
/// Ties go to the smallest unit id.
pub fn permutation_envelope(panel: &PanelDataset, donor_ids: &[String]) -> Result<PermutationEnvelope, InferenceError> {
    if donor_ids.is_empty() {
        return Err(InferenceError::EmptyDonorPool);
    }
    let mut ids: Vec<&String> = donor_ids.iter().collect();
    ids.sort();
    ids.dedup();
    let idx: Vec<usize> = ids
        .iter()
        .map(|id| {
            panel
                .unit_index(id)
                .ok_or_else(|| InferenceError::UnknownUnit((*id).clone()))
        })
        .collect::<Result<_, _>>()?;
    let rows = panel
        .years()
        .iter()
        .map(|year| {
            let mut lo = (f64::INFINITY, 0);
            let mut hi = (f64::NEG_INFINITY, 0);
            for (i, &u) in idx.iter().enumerate() {
                let y = panel.value(Variable::Outcome, u, year);
                if y < lo.0 {
                    lo = (y, i);
                }
                if y > hi.0 {
                    hi = (y, i);
                }
            }
            EnvelopeRow {
                year,
                min: lo.0,
                max: hi.0,
                unit_at_min: ids[lo.1].clone(),
                unit_at_max: ids[hi.1].clone(),
            }
        })
        .collect();
    Ok(PermutationEnvelope {
        rows,
        containment: Vec::new(),
    })
}

/// A synthetic control refitted as if treatment had started after
/// `placebo_year`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaceboFit {
    #[serde(flatten)]
    pub fit: ScmFit,
    /// True pre-period years after the placebo year.
    pub window: Option<YearRange>,
    /// Largest absolute gap over `window` (0 when it is empty).
    pub max_abs_gap: f64,
}

/// In-time placebo against donor series.
pub fn in_time_placebo_series(
    treated: &AggregateSeries,
    donors: &[AggregateSeries],
    spec: &PredictorSpec,
    pre: YearRange,
    post: YearRange,
    placebo_year: i32,
    options: &ScmOptions,
) -> Result<PlaceboFit, InferenceError> {
    if placebo_year < treated.years.first + 1 || placebo_year < pre.first {
        return Err(InferenceError::InsufficientPrePeriod {
            placebo_year,
            first_year: treated.years.first.max(pre.first),
        });
    }
    if placebo_year > pre.last {
        return Err(InferenceError::PlaceboOutsidePrePeriod { placebo_year, pre });
    }
    let mut placebo_spec = spec.clone();
    placebo_spec.outcome_lag_years.retain(|&y| y <= placebo_year);
    if placebo_spec.is_empty() {
        return Err(InferenceError::InsufficientPrePeriod {
            placebo_year,
            first_year: pre.first,
        });
    }
    let placebo_pre = YearRange::new(pre.first, placebo_year);
    let placebo_post = YearRange::new(placebo_year + 1, post.last);
    let mut fit = fit_scm_series(treated, donors, &placebo_spec, placebo_pre, placebo_post, options)?;
    fit.placebo_year = Some(placebo_year);
    let window = (placebo_year < pre.last).then(|| YearRange::new(placebo_year + 1, pre.last));
    let max_abs_gap = window
        .map(|w| {
            fit.years
                .iter()
                .zip(&fit.gaps)
                .filter(|(y, _)| w.contains(**y))
                .map(|(_, g)| g.abs())
                .fold(0.0, f64::max)
        })
        .unwrap_or(0.0);
    Ok(PlaceboFit {
        fit,
        window,
        max_abs_gap,
    })
}

/// In-time placebo with donors drawn from the panel.
#[allow(clippy::too_many_arguments)]
pub fn in_time_placebo(
    panel: &PanelDataset,
    treated: &AggregateSeries,
    donor_ids: &[String],
    spec: &PredictorSpec,
    pre: YearRange,
    post: YearRange,
    placebo_year: i32,
    options: &ScmOptions,
) -> Result<PlaceboFit, InferenceError> {
    let donors = donor_series(panel, treated, donor_ids)?;
    in_time_placebo_series(treated, &donors, spec, pre, post, placebo_year, options)
}

/// Refits every donor as if it were treated, using the remaining donors.
/// Results are ordered by donor label.
pub fn donor_placebo_fits(
    donors: &[AggregateSeries],
    spec: &PredictorSpec,
    pre: YearRange,
    post: YearRange,
    options: &ScmOptions,
) -> Result<Vec<ScmFit>, InferenceError> {
    if donors.len() < 2 {
        return Err(InferenceError::EmptyDonorPool);
    }
    let mut order: Vec<usize> = (0..donors.len()).collect();
    order.sort_by(|&a, &b| donors[a].label.cmp(&donors[b].label));
    order
        .par_iter()
        .map(|&i| {
            let others: Vec<AggregateSeries> = donors
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, d)| d.clone())
                .collect();
            fit_scm_series(&donors[i], &others, spec, pre, post, options).map_err(InferenceError::from)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboRatio {
    pub unit_id: String,
    pub rmspe_pre: f64,
    pub rmspe_post: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioTest {
    pub treated_label: String,
    pub ratio: f64,
    /// Treated fit has zero pre-period RMSPE; its ratio is infinite and
    /// ranked last.
    pub zero_pre_rmspe: bool,
    /// 1 is the most extreme.
    pub rank: usize,
    pub count: usize,
    pub pseudo_p: f64,
    pub placebos: Vec<PlaceboRatio>,
    /// Placebos dropped for a poor pre-period fit.
    pub excluded: Vec<String>,
}

fn ratio_of(fit: &ScmFit) -> f64 {
    if fit.rmspe_pre == 0.0 {
        f64::INFINITY
    } else {
        fit.rmspe_post / fit.rmspe_pre
    }
}

/// Sort key under which perfect pre-period fits rank below everything.
fn rank_key(fit: &ScmFit) -> f64 {
    if fit.rmspe_pre == 0.0 {
        f64::NEG_INFINITY
    } else {
        ratio_of(fit)
    }
}

/// Post/pre RMSPE ratio of the treated fit ranked among donor placebos.
/// With `max_pre_rmspe_multiple = Some(m)`, placebos whose pre-period RMSPE
/// exceeds `m` times the treated one are left out.
pub fn rmspe_ratio_test(fit: &ScmFit, placebos: &[ScmFit], max_pre_rmspe_multiple: Option<f64>) -> RatioTest {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for p in placebos {
        match max_pre_rmspe_multiple {
            Some(m) if p.rmspe_pre > m * fit.rmspe_pre => excluded.push(p.treated_label.clone()),
            _ => kept.push(p),
        }
    }
    let key = rank_key(fit);
    let rank = 1 + kept.iter().filter(|p| rank_key(p) >= key).count();
    let count = kept.len();
    RatioTest {
        treated_label: fit.treated_label.clone(),
        ratio: ratio_of(fit),
        zero_pre_rmspe: fit.rmspe_pre == 0.0,
        rank,
        count,
        pseudo_p: rank as f64 / (count + 1) as f64,
        placebos: kept
            .iter()
            .map(|p| PlaceboRatio {
                unit_id: p.treated_label.clone(),
                rmspe_pre: p.rmspe_pre,
                rmspe_post: p.rmspe_post,
                ratio: ratio_of(p),
            })
            .collect(),
        excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::testutil::toy_panel;
    use std::collections::BTreeMap;

    fn series(label: &str, outcome: Vec<f64>, cov: [f64; 2]) -> AggregateSeries {
        let years = YearRange::new(2016, 2016 + outcome.len() as i32 - 1);
        let mut covariates = BTreeMap::new();
        covariates.insert(Variable::AvgRadiation, (years, vec![cov[0]; years.len()]));
        covariates.insert(Variable::DisposableIncome, (years, vec![cov[1]; years.len()]));
        AggregateSeries {
            label: label.into(),
            members: vec![label.into()],
            years,
            outcome,
            covariates,
        }
    }

    fn spec() -> PredictorSpec {
        PredictorSpec {
            covariates: vec![Variable::AvgRadiation, Variable::DisposableIncome],
            ..Default::default()
        }
    }

    fn pool(n: usize) -> Vec<AggregateSeries> {
        (0..n)
            .map(|i| {
                let a = 0.01 + 0.001 * i as f64;
                let g = 1.5 + 0.01 * ((i * 7) % 11) as f64;
                let wiggle = |t: i32| 0.0005 * (((i as i32 + 3) * (t + 1)) % 5 - 2) as f64;
                series(
                    &format!("d{i:02}"),
                    (0..7).map(|t| a * g.powi(t) + wiggle(t)).collect(),
                    [
                        1100.0 + 13.0 * ((i * 5) % 9) as f64,
                        190_000.0 + 1000.0 * ((i * 3) % 7) as f64,
                    ],
                )
            })
            .collect()
    }

    fn periods() -> (YearRange, YearRange) {
        (YearRange::new(2016, 2020), YearRange::new(2021, 2022))
    }

    #[test]
    fn envelope_matches_scan() {
        let panel = toy_panel(3, YearRange::new(2016, 2022));
        let ids: Vec<String> = panel.units().iter().map(|u| u.unit_id.clone()).collect();
        let env = permutation_envelope(&panel, &ids).unwrap();
        for r in &env.rows {
            let vals: Vec<f64> = (0..3).map(|u| panel.value(Variable::Outcome, u, r.year)).collect();
            assert_eq!(r.min, vals.iter().copied().fold(f64::INFINITY, f64::min));
            assert_eq!(r.max, vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            let at_min = panel.unit_index(&r.unit_at_min).unwrap();
            assert_eq!(panel.value(Variable::Outcome, at_min, r.year), r.min);
            assert!(r.min <= r.max);
        }
        let single = permutation_envelope(&panel, &ids[..1]).unwrap();
        for r in &single.rows {
            assert_eq!(r.min, r.max);
            assert_eq!(r.min, panel.value(Variable::Outcome, 0, r.year));
        }
        assert!(matches!(
            permutation_envelope(&panel, &[]),
            Err(InferenceError::EmptyDonorPool)
        ));
        let inside = AggregateSeries::from_unit(&panel, 1);
        let c = env.clone().with_overlays(std::slice::from_ref(&inside)).containment;
        assert!(c[0].all_inside);
        assert!(env.to_csv().starts_with("year,min,max,unit_at_min,unit_at_max\n"));
    }

    #[test]
    fn placebo_at_pre_end_reproduces_fit() {
        let donors = pool(8);
        let treated = series(
            "t",
            (0..7).map(|t| 0.013 * 1.55f64.powi(t)).collect(),
            [1130.0, 192_000.0],
        );
        let (pre, post) = periods();
        let o = ScmOptions::default();
        let fit = fit_scm_series(&treated, &donors, &spec(), pre, post, &o).unwrap();
        let placebo = in_time_placebo_series(&treated, &donors, &spec(), pre, post, 2020, &o).unwrap();
        assert_eq!(placebo.fit.w, fit.w);
        assert_eq!(placebo.fit.v, fit.v);
        assert_eq!(placebo.fit.gaps, fit.gaps);
        assert_eq!(placebo.window, None);
    }

    #[test]
    fn placebo_self_match_has_zero_gaps() {
        let donors = pool(8);
        let mut treated = donors[4].clone();
        treated.label = "t".into();
        let (pre, post) = periods();
        let p = in_time_placebo_series(&treated, &donors, &spec(), pre, post, 2018, &ScmOptions::default()).unwrap();
        assert_eq!(p.fit.placebo_year, Some(2018));
        assert_eq!(
            p.fit.predictor_names[..2],
            ["outcome_2016".to_string(), "outcome_2018".to_string()]
        );
        assert_eq!(p.window, Some(YearRange::new(2019, 2020)));
        assert!(p.fit.gaps.iter().all(|g| g.abs() < 1e-6), "{:?}", p.fit.gaps);
        assert!(p.max_abs_gap < 1e-6);
    }

    #[test]
    fn placebo_errors() {
        let donors = pool(4);
        let (pre, post) = periods();
        let o = ScmOptions::default();
        assert!(matches!(
            in_time_placebo_series(&donors[0], &donors[1..], &spec(), pre, post, 2016, &o),
            Err(InferenceError::InsufficientPrePeriod { .. })
        ));
        assert!(matches!(
            in_time_placebo_series(&donors[0], &donors[1..], &spec(), pre, post, 2021, &o),
            Err(InferenceError::PlaceboOutsidePrePeriod { .. })
        ));
    }

    fn fake_fit(label: &str, pre: f64, post: f64) -> ScmFit {
        let donors = pool(3);
        let mut f = fit_scm_series(
            &donors[0],
            &donors[1..],
            &spec(),
            periods().0,
            periods().1,
            &ScmOptions::default(),
        )
        .unwrap();
        f.treated_label = label.into();
        f.rmspe_pre = pre;
        f.rmspe_post = post;
        f
    }

    #[test]
    fn ratio_rank_arithmetic() {
        let placebos = vec![
            fake_fit("a", 1.0, 1.0),
            fake_fit("b", 1.0, 3.0),
            fake_fit("c", 1.0, 5.0),
        ];
        for (post, p) in [(6.0, 0.25), (4.0, 0.5), (2.0, 0.75), (0.5, 1.0)] {
            let t = rmspe_ratio_test(&fake_fit("t", 1.0, post), &placebos, None);
            assert_eq!(t.pseudo_p, p);
            assert_eq!(t.count, 3);
        }
        // ties count against the treated unit
        assert_eq!(rmspe_ratio_test(&fake_fit("t", 1.0, 3.0), &placebos, None).rank, 3);
        let perfect = rmspe_ratio_test(&fake_fit("t", 0.0, 1.0), &placebos, None);
        assert!(perfect.ratio.is_infinite() && perfect.zero_pre_rmspe);
        assert_eq!(perfect.rank, 4);
        let dropped = rmspe_ratio_test(&fake_fit("t", 0.1, 1.0), &placebos, Some(5.0));
        assert_eq!(dropped.excluded, vec!["a", "b", "c"]);
        assert_eq!(dropped.pseudo_p, 1.0);
    }

    #[test]
    fn planted_effect_ranks_first() {
        let donors = pool(20);
        let (pre, post) = periods();
        let o = ScmOptions::default();
        let base = series(
            "t",
            (0..7).map(|t| 0.0145 * 1.55f64.powi(t)).collect(),
            [1140.0, 193_000.0],
        );
        let treated = base.map_outcome(|y, v| if y >= 2021 { v - 0.04 } else { v });
        let fit = fit_scm_series(&treated, &donors, &spec(), pre, post, &o).unwrap();
        let placebos = donor_placebo_fits(&donors, &spec(), pre, post, &o).unwrap();
        assert_eq!(placebos.len(), 20);
        assert!(placebos.windows(2).all(|w| w[0].treated_label < w[1].treated_label));
        let test = rmspe_ratio_test(&fit, &placebos, None);
        assert_eq!(test.rank, 1);
        assert!((test.pseudo_p - 1.0 / 21.0).abs() < 1e-15);

        // common rescaling leaves the ranking unchanged
        let scale = |s: &AggregateSeries| s.map_outcome(|_, v| 4.0 * v);
        let donors4: Vec<_> = donors.iter().map(scale).collect();
        let fit4 = fit_scm_series(&scale(&treated), &donors4, &spec(), pre, post, &o).unwrap();
        let placebos4 = donor_placebo_fits(&donors4, &spec(), pre, post, &o).unwrap();
        assert_eq!(rmspe_ratio_test(&fit4, &placebos4, None).pseudo_p, test.pseudo_p);
    }
}
