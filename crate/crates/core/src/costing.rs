//! Exact-decimal cost accounting.
//!
//! Money is an integer count of 1/100,000 USD so that a caption unit of
//! 0.00885 USD is represented exactly.

use std::fmt;
use std::ops::{Add, Mul};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Minor units per dollar.
pub const SCALE: u128 = 100_000;
const SCALE_DIGITS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(u128);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MoneyParseError {
    #[error("`{0}` is not a non-negative decimal amount")]
    Invalid(String),
    #[error("`{0}` has more than {SCALE_DIGITS} decimal places")]
    TooPrecise(String),
}

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_minor(units: u128) -> Self {
        Self(units)
    }

    pub fn minor_units(self) -> u128 {
        self.0
    }

    pub fn from_dollars(dollars: u64) -> Self {
        Self(dollars as u128 * SCALE)
    }

    /// Plain decimal rendering with at least two fraction digits and no
    /// trailing zeros beyond them: `0.00885`, `0.1304`, `817320.00`.
    pub fn to_plain(self) -> String {
        let (int, frac) = self.split();
        format!("{int}.{frac}")
    }

    /// Same as [`Money::to_plain`] with comma thousands separators.
    pub fn to_grouped(self) -> String {
        let (int, frac) = self.split();
        let digits = int.to_string();
        let mut grouped = String::with_capacity(digits.len() + digits.len() / 3);
        for (i, c) in digits.chars().enumerate() {
            if i > 0 && (digits.len() - i) % 3 == 0 {
                grouped.push(',');
            }
            grouped.push(c);
        }
        format!("{grouped}.{frac}")
    }

    fn split(self) -> (u128, String) {
        let int = self.0 / SCALE;
        let mut frac = format!("{:0width$}", self.0 % SCALE, width = SCALE_DIGITS);
        while frac.len() > 2 && frac.ends_with('0') {
            frac.pop();
        }
        (int, frac)
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl Mul<u64> for Money {
    type Output = Money;
    fn mul(self, rhs: u64) -> Money {
        Money(self.0 * rhs as u128)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_plain())
    }
}

impl FromStr for Money {
    type Err = MoneyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let raw = s.trim().trim_start_matches('$').replace(',', "");
        let invalid = || MoneyParseError::Invalid(s.to_owned());
        let (int, frac) = raw.split_once('.').unwrap_or((&raw, ""));
        if int.is_empty() && frac.is_empty() {
            return Err(invalid());
        }
        if !int.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(invalid());
        }
        if frac.len() > SCALE_DIGITS {
            return Err(MoneyParseError::TooPrecise(s.to_owned()));
        }
        let int: u128 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| invalid())?
        };
        let frac_units: u128 = if frac.is_empty() {
            0
        } else {
            format!("{frac:0<width$}", width = SCALE_DIGITS)
                .parse()
                .map_err(|_| invalid())?
        };
        Ok(Money(int * SCALE + frac_units))
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_plain())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceTable {
    pub caption_unit: Money,
    pub gen_instruction_unit: Money,
    pub manual_correction_unit: Money,
    pub manual_construction_unit: Money,
}

impl Default for PriceTable {
    fn default() -> Self {
        Self {
            caption_unit: Money::from_minor(885),
            gen_instruction_unit: Money::from_minor(40),
            manual_correction_unit: Money::from_minor(13_000),
            manual_construction_unit: Money::from_minor(84_000),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMode {
    /// Captioning plus generation plus manual correction.
    Engine,
    /// Fully manual construction, priced per instruction only.
    Manual,
}

impl FromStr for EstimateMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "engine" => Ok(Self::Engine),
            "manual" => Ok(Self::Manual),
            other => Err(format!(
                "unknown estimate mode `{other}` (expected engine|manual)"
            )),
        }
    }
}

/// Per-stage cost split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub captions: Money,
    pub generation: Money,
    pub correction: Money,
    pub construction: Money,
}

impl CostBreakdown {
    pub fn total(&self) -> Money {
        self.captions + self.generation + self.correction + self.construction
    }
}

pub fn estimate_breakdown(
    images: u64,
    instructions: u64,
    mode: EstimateMode,
    price: &PriceTable,
) -> CostBreakdown {
    match mode {
        EstimateMode::Engine => CostBreakdown {
            captions: price.caption_unit * images,
            generation: price.gen_instruction_unit * instructions,
            correction: price.manual_correction_unit * instructions,
            construction: Money::ZERO,
        },
        EstimateMode::Manual => CostBreakdown {
            captions: Money::ZERO,
            generation: Money::ZERO,
            correction: Money::ZERO,
            construction: price.manual_construction_unit * instructions,
        },
    }
}

/// Engine mode: `images * caption + instructions * (generation + correction)`.
/// Manual mode: `instructions * construction`; the image count is ignored.
pub fn estimate(images: u64, instructions: u64, mode: EstimateMode, price: &PriceTable) -> Money {
    estimate_breakdown(images, instructions, mode, price).total()
}

/// Snapshot of ledger counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LedgerCounts {
    pub caption_count: u64,
    pub instruction_count: u64,
    pub correction_count: u64,
}

impl LedgerCounts {
    pub fn delta_since(&self, earlier: &LedgerCounts) -> LedgerCounts {
        LedgerCounts {
            caption_count: self.caption_count - earlier.caption_count,
            instruction_count: self.instruction_count - earlier.instruction_count,
            correction_count: self.correction_count - earlier.correction_count,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == LedgerCounts::default()
    }

    pub fn total(&self, price: &PriceTable) -> Money {
        self.breakdown(price).total()
    }

    pub fn breakdown(&self, price: &PriceTable) -> CostBreakdown {
        CostBreakdown {
            captions: price.caption_unit * self.caption_count,
            generation: price.gen_instruction_unit * self.instruction_count,
            correction: price.manual_correction_unit * self.correction_count,
            construction: Money::ZERO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostUnit {
    Caption,
    Instruction,
    Correction,
}

/// Monotone cost counters with atomic increments.
#[derive(Debug, Default)]
pub struct CostLedger {
    captions: AtomicU64,
    instructions: AtomicU64,
    corrections: AtomicU64,
    price: PriceTable,
}

impl CostLedger {
    pub fn new(price: PriceTable) -> Self {
        Self {
            price,
            ..Self::default()
        }
    }

    pub fn with_counts(price: PriceTable, counts: LedgerCounts) -> Self {
        Self {
            captions: AtomicU64::new(counts.caption_count),
            instructions: AtomicU64::new(counts.instruction_count),
            corrections: AtomicU64::new(counts.correction_count),
            price,
        }
    }

    pub fn price(&self) -> &PriceTable {
        &self.price
    }

    pub fn record(&self, unit: CostUnit, count: u64) {
        let counter = match unit {
            CostUnit::Caption => &self.captions,
            CostUnit::Instruction => &self.instructions,
            CostUnit::Correction => &self.corrections,
        };
        counter.fetch_add(count, Ordering::SeqCst);
    }

    pub fn counts(&self) -> LedgerCounts {
        LedgerCounts {
            caption_count: self.captions.load(Ordering::SeqCst),
            instruction_count: self.instructions.load(Ordering::SeqCst),
            correction_count: self.corrections.load(Ordering::SeqCst),
        }
    }

    pub fn total(&self) -> Money {
        ledger_total(&self.counts(), &self.price)
    }
}

/// Running total: engine-mode arithmetic over the ledger counters, with the
/// correction term charged per recorded correction.
pub fn ledger_total(counts: &LedgerCounts, price: &PriceTable) -> Money {
    counts.total(price)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_prices_are_exact() {
        let p = PriceTable::default();
        assert_eq!(p.caption_unit, "0.00885".parse().unwrap());
        assert_eq!(p.gen_instruction_unit, "0.0004".parse().unwrap());
        assert_eq!(p.manual_correction_unit, "0.13".parse().unwrap());
        assert_eq!(p.manual_construction_unit, "0.84".parse().unwrap());
    }

    #[test]
    fn engine_estimate_reproduces_reported_total() {
        let m = estimate(
            161_000,
            973_000,
            EstimateMode::Engine,
            &PriceTable::default(),
        );
        assert_eq!(m.to_grouped(), "128,304.05");
    }

    #[test]
    fn manual_estimate_reproduces_reported_total() {
        let m = estimate(0, 973_000, EstimateMode::Manual, &PriceTable::default());
        assert_eq!(m.to_grouped(), "817,320.00");
        // image count does not enter the manual price
        assert_eq!(
            m,
            estimate(
                161_000,
                973_000,
                EstimateMode::Manual,
                &PriceTable::default()
            )
        );
    }

    #[test]
    fn zero_estimate() {
        assert_eq!(
            estimate(0, 0, EstimateMode::Engine, &PriceTable::default()).to_plain(),
            "0.00"
        );
    }

    #[test]
    fn ledger_totals() {
        let p = PriceTable::default();
        let c = |a, b, c| LedgerCounts {
            caption_count: a,
            instruction_count: b,
            correction_count: c,
        };
        assert_eq!(ledger_total(&c(1, 0, 0), &p).to_plain(), "0.00885");
        // 0.0004 + 0.13
        assert_eq!(ledger_total(&c(0, 1, 1), &p).to_plain(), "0.1304");
        assert_eq!(ledger_total(&c(0, 0, 0), &p).to_plain(), "0.00");
    }

    #[test]
    fn atomic_ledger_counts() {
        let ledger = CostLedger::new(PriceTable::default());
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for _ in 0..100 {
                        ledger.record(CostUnit::Instruction, 1);
                    }
                });
            }
        });
        assert_eq!(ledger.counts().instruction_count, 800);
        assert_eq!(ledger.total().to_plain(), "0.32");
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!("abc".parse::<Money>().is_err());
        assert!("-1".parse::<Money>().is_err());
        assert!(".".parse::<Money>().is_err());
        assert!(matches!(
            "0.000001".parse::<Money>(),
            Err(MoneyParseError::TooPrecise(_))
        ));
        assert_eq!("$1,000.5".parse::<Money>().unwrap().to_plain(), "1000.50");
    }

    proptest! {
        #[test]
        fn estimate_is_linear(a in 0u64..1_000_000, b in 0u64..1_000_000, c in 0u64..1_000_000, d in 0u64..1_000_000) {
            let p = PriceTable::default();
            for mode in [EstimateMode::Engine, EstimateMode::Manual] {
                prop_assert_eq!(
                    estimate(a + c, b + d, mode, &p),
                    estimate(a, b, mode, &p) + estimate(c, d, mode, &p)
                );
            }
        }

        #[test]
        fn money_text_round_trips(units in 0u128..10_000_000_000_000) {
            let m = Money::from_minor(units);
            prop_assert_eq!(m.to_plain().parse::<Money>().unwrap(), m);
            prop_assert_eq!(m.to_grouped().parse::<Money>().unwrap(), m);
        }
    }
}
