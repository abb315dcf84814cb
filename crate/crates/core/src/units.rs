//! Latency and clock-domain helpers.
//!
//! Fabric and device latencies are configured in nanoseconds but stored as
//! integer picoseconds so that path sums are exact and order independent.
//! The CPU runs in cycles; converting a latency to cycles always rounds up.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A non-negative duration with picosecond resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Latency(u64);

impl Latency {
    pub const ZERO: Latency = Latency(0);

    pub const fn from_ps(ps: u64) -> Self {
        Latency(ps)
    }

    /// Rounds to the nearest picosecond. Negative and NaN inputs clamp to zero.
    pub fn from_ns(ns: f64) -> Self {
        if !ns.is_finite() || ns <= 0.0 {
            return Latency(0);
        }
        Latency((ns * 1000.0).round() as u64)
    }

    pub const fn as_ps(self) -> u64 {
        self.0
    }

    pub fn as_ns(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub const fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn saturating_sub(self, rhs: Latency) -> Latency {
        Latency(self.0.saturating_sub(rhs.0))
    }
}

impl Add for Latency {
    type Output = Latency;
    fn add(self, rhs: Latency) -> Latency {
        Latency(self.0 + rhs.0)
    }
}

impl AddAssign for Latency {
    fn add_assign(&mut self, rhs: Latency) {
        self.0 += rhs.0;
    }
}

impl Sub for Latency {
    type Output = Latency;
    fn sub(self, rhs: Latency) -> Latency {
        Latency(self.0 - rhs.0)
    }
}

impl Sum for Latency {
    fn sum<I: Iterator<Item = Latency>>(iter: I) -> Latency {
        iter.fold(Latency::ZERO, Add::add)
    }
}

impl fmt::Display for Latency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.as_ns())
    }
}

// Latencies appear as plain nanosecond numbers in every config file.
impl Serialize for Latency {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_ns())
    }
}

impl<'de> Deserialize<'de> for Latency {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let ns = f64::deserialize(d)?;
        if !ns.is_finite() || ns < 0.0 {
            return Err(serde::de::Error::custom(format!(
                "latency must be a non-negative number of ns, got {ns}"
            )));
        }
        Ok(Latency::from_ns(ns))
    }
}

/// CPU clock used to convert latencies into cycles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clock {
    pub freq_mhz: u64,
}

impl Default for Clock {
    fn default() -> Self {
        // 3.6 GHz host cores.
        Clock { freq_mhz: 3600 }
    }
}

impl Clock {
    pub fn new(freq_mhz: u64) -> Self {
        Clock { freq_mhz }
    }

    /// Pessimistic conversion: any fractional cycle counts as a whole one.
    pub fn cycles(self, latency: Latency) -> u64 {
        let num = latency.as_ps() as u128 * self.freq_mhz as u128;
        num.div_ceil(1_000_000) as u64
    }

    pub fn ns(self, cycles: u64) -> f64 {
        cycles as f64 * 1000.0 / self.freq_mhz as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversion_rounds_up() {
        let clk = Clock::default();
        assert_eq!(clk.cycles(Latency::from_ns(20.0)), 72);
        assert_eq!(clk.cycles(Latency::from_ns(80.0)), 288);
        // 9.1 ns * 3.6 = 32.76
        assert_eq!(clk.cycles(Latency::from_ns(9.1)), 33);
        assert_eq!(clk.cycles(Latency::ZERO), 0);
        assert_eq!(clk.cycles(Latency::from_ps(1)), 1);
    }

    #[test]
    fn ns_round_trip_through_json() {
        let l = Latency::from_ns(37.2);
        let s = serde_json::to_string(&l).unwrap();
        assert_eq!(s, "37.2");
        let back: Latency = serde_json::from_str(&s).unwrap();
        assert_eq!(back, l);
        assert!(serde_json::from_str::<Latency>("-1").is_err());
    }
}
