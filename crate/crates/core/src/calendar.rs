//! Calendar months as (year, month-of-year) pairs with index arithmetic.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A calendar month. `month` is 1-12.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    pub month: u8,
}

impl YearMonth {
    pub fn new(year: i32, month: u8) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::data(format!("month out of range: {month}")));
        }
        Ok(YearMonth { year, month })
    }

    /// Months since year 0, for distance arithmetic and stream keys.
    pub fn ordinal(self) -> i64 {
        i64::from(self.year) * 12 + i64::from(self.month) - 1
    }

    pub fn add_months(self, k: i64) -> Self {
        let o = self.ordinal() + k;
        YearMonth { year: (o.div_euclid(12)) as i32, month: (o.rem_euclid(12) + 1) as u8 }
    }

    pub fn next(self) -> Self {
        self.add_months(1)
    }

    /// Signed month difference self - other.
    pub fn months_since(self, other: YearMonth) -> i64 {
        self.ordinal() - other.ordinal()
    }

    /// Harmonic phase index: months since January of year 0. Dividing the
    /// cycle at 12 makes sin/cos terms depend only on month-of-year.
    pub fn phase(self) -> i64 {
        self.ordinal()
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (y, m) = s
            .split_once('-')
            .ok_or_else(|| Error::data(format!("expected YYYY-MM, got {s:?}")))?;
        let year: i32 = y.parse().map_err(|_| Error::data(format!("bad year in {s:?}")))?;
        let month: u8 = m.parse().map_err(|_| Error::data(format!("bad month in {s:?}")))?;
        YearMonth::new(year, month)
    }
}

impl Serialize for YearMonth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A simple calendar date, used only by the weather ingest path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Date {
    pub year: i32,
    pub month: u8,
    pub day: u8,
}

impl Date {
    pub fn year_month(self) -> YearMonth {
        YearMonth { year: self.year, month: self.month }
    }
}

impl fmt::Display for Date {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}-{:02}", self.year, self.month, self.day)
    }
}

impl FromStr for Date {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() != 3 {
            return Err(Error::data(format!("expected YYYY-MM-DD, got {s:?}")));
        }
        let year: i32 = parts[0].parse().map_err(|_| Error::data(format!("bad year in {s:?}")))?;
        let month: u8 = parts[1].parse().map_err(|_| Error::data(format!("bad month in {s:?}")))?;
        let day: u8 = parts[2].parse().map_err(|_| Error::data(format!("bad day in {s:?}")))?;
        if !(1..=12).contains(&month) || !(1..=31).contains(&day) {
            return Err(Error::data(format!("date out of range: {s:?}")));
        }
        Ok(Date { year, month, day })
    }
}

/// Days in a month, Gregorian.
pub fn days_in_month(year: i32, month: u8) -> u8 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 => {
            let leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
            if leap {
                29
            } else {
                28
            }
        }
        _ => unreachable!("month validated on construction"),
    }
}
