use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::ingest::DateWindow;
use super::PanelError;

/// Daily global radiation observations for one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyRadiationSeries {
    pub unit_id: String,
    pub observations: Vec<(NaiveDate, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiationStats {
    pub avg_radiation: f64,
    pub radiation_variation: f64,
}

/// Average radiation and seasonal variation over the default 2010-2015
/// reference window.
pub fn radiation_stats(series: &DailyRadiationSeries) -> Result<RadiationStats, PanelError> {
    radiation_stats_in(series, &DateWindow::default())
}

/// Daily values are averaged within each (year, month), then each calendar
/// month is averaged across years; the variation is the ratio of the largest
/// to the smallest of the twelve monthly averages.
pub fn radiation_stats_in(series: &DailyRadiationSeries, window: &DateWindow) -> Result<RadiationStats, PanelError> {
    let unit = || series.unit_id.clone();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut by_year_month: BTreeMap<(i32, u32), (f64, usize)> = BTreeMap::new();
    for &(date, value) in &series.observations {
        if !window.contains(date) {
            continue;
        }
        if !value.is_finite() || value < 0.0 {
            return Err(PanelError::InvalidValue {
                unit: unit(),
                variable: "daily_radiation".into(),
                value,
                reason: format!("on {date}: must be finite and non-negative"),
            });
        }
        total += value;
        count += 1;
        let e = by_year_month.entry((date.year(), date.month())).or_insert((0.0, 0));
        e.0 += value;
        e.1 += 1;
    }

    let mut months = [(0.0f64, 0usize); 12];
    for ((_, m), (sum, n)) in by_year_month {
        let slot = &mut months[(m - 1) as usize];
        slot.0 += sum / n as f64;
        slot.1 += 1;
    }
    let mut monthly = [0.0f64; 12];
    for (i, &(sum, n)) in months.iter().enumerate() {
        if n == 0 {
            return Err(PanelError::MissingRadiationMonth {
                unit: unit(),
                month: i as u32 + 1,
            });
        }
        monthly[i] = sum / n as f64;
    }
    let (min_i, min) = monthly
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("twelve months");
    let max = monthly.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == 0.0 {
        return Err(PanelError::ZeroMinimumMonth {
            unit: unit(),
            month: min_i as u32 + 1,
        });
    }
    Ok(RadiationStats {
        avg_radiation: total / count as f64,
        radiation_variation: max / min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn year_series(year: i32, f: impl Fn(NaiveDate) -> f64) -> DailyRadiationSeries {
        let mut d = NaiveDate::from_ymd_opt(year, 1, 1).unwrap();
        let mut obs = Vec::new();
        while d.year() == year {
            obs.push((d, f(d)));
            d = d.succ_opt().unwrap();
        }
        DailyRadiationSeries {
            unit_id: "x".into(),
            observations: obs,
        }
    }

    #[test]
    fn constant_series() {
        let s = year_series(2012, |_| 3.5);
        let r = radiation_stats(&s).unwrap();
        assert!((r.avg_radiation - 3.5).abs() < 1e-12);
        assert_eq!(r.radiation_variation, 1.0);
    }

    #[test]
    fn june_over_december_ratio() {
        // June 100, December 4, other months in between
        let s = year_series(2011, |d| match d.month() {
            6 => 100.0,
            12 => 4.0,
            m => 10.0 + m as f64,
        });
        let r = radiation_stats(&s).unwrap();
        assert!((r.radiation_variation - 25.0).abs() < 1e-12);
    }

    #[test]
    fn months_are_averaged_within_year_first() {
        // 2010 January has 31 days at 1.0; 2011 January has a single day at 3.0.
        // Per-(year, month) first gives (1 + 3) / 2 = 2 for January.
        let mut obs = Vec::new();
        for m in 1..=12u32 {
            obs.push((
                NaiveDate::from_ymd_opt(2011, m, 1).unwrap(),
                if m == 1 { 3.0 } else { 4.0 },
            ));
        }
        for day in 1..=31 {
            obs.push((NaiveDate::from_ymd_opt(2010, 1, day).unwrap(), 1.0));
        }
        let s = DailyRadiationSeries {
            unit_id: "x".into(),
            observations: obs,
        };
        let r = radiation_stats(&s).unwrap();
        assert!((r.radiation_variation - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_minimum_month_rejected() {
        let s = year_series(2013, |d| if d.month() == 12 { 0.0 } else { 1.0 });
        assert!(matches!(
            radiation_stats(&s),
            Err(PanelError::ZeroMinimumMonth { month: 12, .. })
        ));
    }

    #[test]
    fn outside_window_ignored_and_missing_month_reported() {
        let s = year_series(2020, |_| 1.0);
        assert!(matches!(
            radiation_stats(&s),
            Err(PanelError::MissingRadiationMonth { month: 1, .. })
        ));
    }
}
