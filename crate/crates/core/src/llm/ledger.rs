use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use super::{LlmError, StageTag};

/// USD per single token, exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Price {
    pub input: BigRational,
    pub output: BigRational,
}

impl Price {
    /// Builds a price from decimal USD-per-million-token strings such as `"2.50"`.
    pub fn per_million(input: &str, output: &str) -> Result<Self, LlmError> {
        let million = BigRational::from_integer(BigInt::from(1_000_000));
        Ok(Price {
            input: parse_decimal(input)? / &million,
            output: parse_decimal(output)? / million,
        })
    }
}

/// Parses a plain decimal literal (`"10"`, `"2.50"`, `"-0.125"`) exactly.
pub fn parse_decimal(s: &str) -> Result<BigRational, LlmError> {
    let bad = || LlmError::InvalidPricing(format!("`{s}` is not a decimal number"));
    let t = s.trim();
    let (neg, digits) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad());
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let numer: BigInt = format!("{int_part}{frac_part}")
        .trim_start_matches('0')
        .parse()
        .unwrap_or_default();
    let denom = BigInt::from(10u32).pow(frac_part.len() as u32);
    let r = BigRational::new(numer, denom);
    Ok(if neg { -r } else { r })
}

/// Model id → price. Unknown models fall back to the `default` entry when
/// present, otherwise they cost nothing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PricingTable {
    prices: BTreeMap<String, Price>,
}

#[derive(Deserialize)]
struct RawPricing {
    #[serde(default)]
    models: BTreeMap<String, RawPrice>,
}

#[derive(Deserialize)]
struct RawPrice {
    input_per_million: String,
    output_per_million: String,
}

impl PricingTable {
    pub fn insert(&mut self, model: impl Into<String>, price: Price) {
        self.prices.insert(model.into(), price);
    }

    pub fn with(mut self, model: impl Into<String>, price: Price) -> Self {
        self.insert(model, price);
        self
    }

    pub fn parse(text: &str) -> Result<Self, LlmError> {
        let raw: RawPricing = toml::from_str(text).map_err(|e| LlmError::InvalidPricing(e.to_string()))?;
        let mut table = PricingTable::default();
        for (model, p) in raw.models {
            table.insert(model, Price::per_million(&p.input_per_million, &p.output_per_million)?);
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| LlmError::InvalidPricing(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    pub fn price(&self, model: &str) -> Option<&Price> {
        self.prices.get(model).or_else(|| self.prices.get("default"))
    }

    pub fn cost(&self, model: &str, input_tokens: u64, output_tokens: u64) -> BigRational {
        match self.price(model) {
            Some(p) => {
                &p.input * BigRational::from_integer(BigInt::from(input_tokens))
                    + &p.output * BigRational::from_integer(BigInt::from(output_tokens))
            }
            None => BigRational::zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub session: String,
    pub stage: StageTag,
    pub model_id: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_ms: u64,
}

/// Append-only record of chat calls with exact cost totals.
#[derive(Debug, Default)]
pub struct CostLedger {
    pricing: PricingTable,
    entries: Mutex<Vec<LedgerEntry>>,
}

impl CostLedger {
    pub fn new(pricing: PricingTable) -> Self {
        CostLedger {
            pricing,
            entries: Mutex::new(Vec::new()),
        }
    }

    pub fn pricing(&self) -> &PricingTable {
        &self.pricing
    }

    pub fn record(&self, entry: LedgerEntry) {
        self.entries.lock().expect("ledger poisoned").push(entry);
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger poisoned").clone()
    }

    pub fn session_entries(&self, session: &str) -> Vec<LedgerEntry> {
        self.entries
            .lock()
            .expect("ledger poisoned")
            .iter()
            .filter(|e| e.session == session)
            .cloned()
            .collect()
    }

    fn cost_of<'a>(&self, entries: impl Iterator<Item = &'a LedgerEntry>) -> BigRational {
        entries.fold(BigRational::zero(), |acc, e| {
            acc + self.pricing.cost(&e.model_id, e.input_tokens, e.output_tokens)
        })
    }

    pub fn total_cost(&self) -> BigRational {
        self.cost_of(self.entries.lock().expect("ledger poisoned").iter())
    }

    pub fn session_cost(&self, session: &str) -> BigRational {
        self.cost_of(self.session_entries(session).iter())
    }

    pub fn total_tokens(&self) -> (u64, u64) {
        self.entries
            .lock()
            .expect("ledger poisoned")
            .iter()
            .fold((0, 0), |(i, o), e| (i + e.input_tokens, o + e.output_tokens))
    }

    pub fn call_trace(&self, session: &str) -> Vec<(StageTag, u32)> {
        let mut counts: BTreeMap<usize, (StageTag, u32)> = BTreeMap::new();
        for e in self.session_entries(session) {
            let order = StageTag::ALL.iter().position(|s| *s == e.stage).unwrap_or(usize::MAX);
            counts.entry(order).or_insert((e.stage, 0)).1 += 1;
        }
        counts.into_values().collect()
    }
}

/// Exact decimal rendering when the expansion terminates within
/// `max_digits`; otherwise rounded half away from zero to `max_digits`.
pub fn format_decimal(r: &BigRational, max_digits: usize) -> String {
    let neg = r.is_negative();
    let abs = r.abs();
    let scale = BigInt::from(10u32).pow(max_digits as u32);
    let scaled = &abs * BigRational::from_integer(scale.clone());
    let rounded = if scaled.is_integer() {
        scaled.to_integer()
    } else {
        (scaled + BigRational::new(BigInt::from(1), BigInt::from(2)))
            .floor()
            .to_integer()
    };
    let int_part = &rounded / &scale;
    let frac_part = &rounded % &scale;
    let mut frac = format!("{:0>width$}", frac_part.to_string(), width = max_digits);
    while frac.len() > 2 && frac.ends_with('0') {
        frac.pop();
    }
    let sign = if neg && !rounded.is_zero() { "-" } else { "" };
    if max_digits == 0 {
        format!("{sign}{int_part}")
    } else {
        format!("{sign}{int_part}.{frac}")
    }
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_parsing_is_exact() {
        assert_eq!(
            parse_decimal("2.50").unwrap(),
            BigRational::new(BigInt::from(5), BigInt::from(2))
        );
        assert_eq!(
            parse_decimal("10").unwrap(),
            BigRational::from_integer(BigInt::from(10))
        );
        assert_eq!(
            parse_decimal(".5").unwrap(),
            BigRational::new(BigInt::from(1), BigInt::from(2))
        );
        assert_eq!(
            parse_decimal("-0.125").unwrap(),
            BigRational::new(BigInt::from(-1), BigInt::from(8))
        );
        for bad in ["", ".", "1e3", "abc", "1.2.3"] {
            assert!(parse_decimal(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn two_calls_cost_one_and_a_half_cents() {
        let table = PricingTable::default().with("m", Price::per_million("2.50", "10.00").unwrap());
        let ledger = CostLedger::new(table);
        for _ in 0..2 {
            ledger.record(LedgerEntry {
                session: "s".into(),
                stage: StageTag::Derive,
                model_id: "m".into(),
                input_tokens: 1000,
                output_tokens: 500,
                latency_ms: 0,
            });
        }
        assert_eq!(
            ledger.total_cost(),
            BigRational::new(BigInt::from(15), BigInt::from(1000))
        );
        assert_eq!(format_decimal(&ledger.total_cost(), 6), "0.015");
        assert_eq!(ledger.call_trace("s"), vec![(StageTag::Derive, 2)]);
        assert!(ledger.call_trace("other").is_empty());
    }

    #[test]
    fn pricing_file_and_default_fallback() {
        let table =
            PricingTable::parse("[models.default]\ninput_per_million = \"1\"\noutput_per_million = \"2\"\n").unwrap();
        assert_eq!(
            table.cost("anything", 1_000_000, 1_000_000),
            BigRational::from_integer(BigInt::from(3))
        );
        assert!(PricingTable::default().cost("x", 5, 5).is_zero());
    }

    #[test]
    fn decimal_formatting() {
        let third = BigRational::new(BigInt::from(1), BigInt::from(3));
        assert_eq!(format_decimal(&third, 4), "0.3333");
        assert_eq!(format_decimal(&BigRational::from_integer(BigInt::from(2)), 6), "2.00");
        assert_eq!(
            format_decimal(&BigRational::new(BigInt::from(-1), BigInt::from(8)), 6),
            "-0.125"
        );
    }
}
