//! Growing degree days above a 50°F base and their image-channel encoding.

use alloc::vec::Vec;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::grid::RasterGrid;

pub const BASE_TEMPERATURE_F: f64 = 50.0;
/// Divisor mapping degree-days onto the input channel.
pub const CHANNEL_SCALE: f64 = 2000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecord {
    pub date: NaiveDate,
    pub tmin_f: f64,
    pub tmax_f: f64,
}

impl WeatherRecord {
    pub fn degree_days(&self) -> f64 {
        ((self.tmin_f + self.tmax_f) / 2.0 - BASE_TEMPERATURE_F).max(0.0)
    }
}

/// Daily min/max temperatures, sorted by date.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeatherSeries {
    records: Vec<WeatherRecord>,
}

impl WeatherSeries {
    pub fn new(records: Vec<WeatherRecord>) -> Result<Self> {
        for pair in records.windows(2) {
            if pair[1].date <= pair[0].date {
                bail!(Parameter, "weather dates must be strictly increasing ({} after {})", pair[1].date, pair[0].date);
            }
        }
        if let Some(r) = records.iter().find(|r| !(r.tmin_f <= r.tmax_f)) {
            bail!(Parameter, "t_min above t_max on {}", r.date);
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[WeatherRecord] {
        &self.records
    }

    fn on(&self, date: NaiveDate) -> Option<&WeatherRecord> {
        self.records.binary_search_by_key(&date, |r| r.date).ok().map(|k| &self.records[k])
    }
}

/// Accumulated thermal time in °F degree-days.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ThermalTime(pub f64);

impl ThermalTime {
    pub fn gdd(self) -> f64 {
        self.0
    }
}

/// Sum of daily `max(0, mean − 50)` over the days after planting up to and
/// including the image date.
pub fn compute_gdd(weather: &WeatherSeries, planting: NaiveDate, image: NaiveDate) -> Result<ThermalTime> {
    if planting > image {
        bail!(Parameter, "planting date {planting} is after image date {image}");
    }
    let mut gdd = 0.0;
    let mut day = planting;
    while day < image {
        day = day.succ_opt().expect("date overflow");
        match weather.on(day) {
            Some(r) => gdd += r.degree_days(),
            None => bail!(DataGap, "no weather record for {day}"),
        }
    }
    Ok(ThermalTime(gdd))
}

/// Constant single-channel grid holding `gdd / 2000`.
pub fn thermal_channel(tt: ThermalTime, shape: (usize, usize)) -> Result<RasterGrid> {
    if !(tt.0 >= 0.0) || !tt.0.is_finite() {
        bail!(Parameter, "thermal time must be non-negative, got {}", tt.0);
    }
    Ok(RasterGrid::filled(shape.0, shape.1, 1, tt.0 / CHANNEL_SCALE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn date(m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2017, m, d).unwrap()
    }

    fn constant(days: u32, tmin: f64, tmax: f64) -> WeatherSeries {
        let recs = (0..=days)
            .map(|k| WeatherRecord { date: date(5, 1) + chrono::Days::new(k as u64), tmin_f: tmin, tmax_f: tmax })
            .collect();
        WeatherSeries::new(recs).unwrap()
    }

    #[test]
    fn base_temperature_days_add_nothing() {
        let w = constant(10, 40.0, 60.0);
        assert_eq!(compute_gdd(&w, date(5, 1), date(5, 11)).unwrap().gdd(), 0.0);
    }

    #[test]
    fn ten_warm_days() {
        let w = constant(10, 65.0, 85.0);
        assert_eq!(compute_gdd(&w, date(5, 1), date(5, 11)).unwrap().gdd(), 250.0);
        assert_eq!(compute_gdd(&w, date(5, 3), date(5, 3)).unwrap().gdd(), 0.0);
    }

    #[test]
    fn gap_is_reported() {
        let recs = vec![
            WeatherRecord { date: date(5, 1), tmin_f: 60.0, tmax_f: 80.0 },
            WeatherRecord { date: date(5, 2), tmin_f: 60.0, tmax_f: 80.0 },
            WeatherRecord { date: date(5, 4), tmin_f: 60.0, tmax_f: 80.0 },
        ];
        let w = WeatherSeries::new(recs).unwrap();
        assert!(matches!(compute_gdd(&w, date(5, 1), date(5, 4)), Err(crate::Error::DataGap(_))));
        assert!(compute_gdd(&w, date(5, 4), date(5, 1)).is_err());
    }

    #[test]
    fn unsorted_or_inverted_records_are_rejected() {
        let a = WeatherRecord { date: date(5, 2), tmin_f: 60.0, tmax_f: 80.0 };
        let b = WeatherRecord { date: date(5, 1), tmin_f: 60.0, tmax_f: 80.0 };
        assert!(WeatherSeries::new(vec![a, b]).is_err());
        let c = WeatherRecord { date: date(5, 1), tmin_f: 90.0, tmax_f: 80.0 };
        assert!(WeatherSeries::new(vec![c]).is_err());
    }

    #[test]
    fn channel_scaling() {
        assert_eq!(thermal_channel(ThermalTime(0.0), (3, 3)).unwrap().total(), 0.0);
        let one = thermal_channel(ThermalTime(2000.0), (3, 4)).unwrap();
        assert!(one.data().iter().all(|&v| v == 1.0));
        let flowering = thermal_channel(ThermalTime(1848.0), (2, 2)).unwrap();
        assert!(flowering.data().iter().all(|&v| (v - 0.924).abs() < 1e-12));
        assert!(thermal_channel(ThermalTime(-1.0), (2, 2)).is_err());
    }
}
