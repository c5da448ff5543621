//! Token usage and dollar cost accounting.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rust_decimal::Decimal;
use serde::{Deserialize, Deserializer, Serialize};

use super::{ChatRequest, Completion, RoleTag};

/// Dollar prices per 1000 tokens. The defaults are placeholders meant to be
/// edited in the config file, not a statement of any provider's pricing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceTable {
    #[serde(deserialize_with = "decimal_from_str_or_float")]
    pub prompt_per_1k: Decimal,
    #[serde(deserialize_with = "decimal_from_str_or_float")]
    pub completion_per_1k: Decimal,
}

impl Default for PriceTable {
    fn default() -> Self {
        Self {
            prompt_per_1k: Decimal::new(1, 3),
            completion_per_1k: Decimal::new(2, 3),
        }
    }
}

impl PriceTable {
    pub fn cost(&self, prompt_tokens: u64, completion_tokens: u64) -> Decimal {
        let thousand = Decimal::from(1000);
        Decimal::from(prompt_tokens) * self.prompt_per_1k / thousand
            + Decimal::from(completion_tokens) * self.completion_per_1k / thousand
    }
}

/// Accepts `"0.001"` or `0.001`. Floats go through their shortest decimal
/// representation so `0.001` stays exactly one thousandth.
fn decimal_from_str_or_float<'de, D: Deserializer<'de>>(d: D) -> Result<Decimal, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Str(String),
        Int(i64),
        Float(f64),
    }
    let text = match Raw::deserialize(d)? {
        Raw::Str(s) => s,
        Raw::Int(i) => i.to_string(),
        Raw::Float(f) => f.to_string(),
    };
    text.trim().parse::<Decimal>().map_err(serde::de::Error::custom)
}

/// One logical model call, aggregated over any corrective retries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub role_tag: RoleTag,
    pub iteration: u32,
    pub slot: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(with = "super::duration_secs")]
    pub wall_clock: Duration,
    pub retries: u32,
}

impl UsageRecord {
    pub(crate) fn start(request: &ChatRequest) -> Self {
        Self {
            role_tag: request.role_tag,
            iteration: request.iteration,
            slot: request.slot,
            prompt_tokens: 0,
            completion_tokens: 0,
            wall_clock: Duration::ZERO,
            retries: 0,
        }
    }

    pub(crate) fn add(&mut self, completion: &Completion) {
        self.prompt_tokens += completion.prompt_tokens;
        self.completion_tokens += completion.completion_tokens;
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    /// Position of the call in a run: iteration, then stage, then slot.
    pub fn sequence_key(&self) -> (u32, RoleTag, u32) {
        (self.iteration, self.role_tag, self.slot)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub prices: PriceTable,
    pub records: Vec<UsageRecord>,
}

impl CostLedger {
    pub fn new(prices: PriceTable) -> Self {
        Self {
            prices,
            records: Vec::new(),
        }
    }

    pub fn totals(&self) -> LedgerTotals {
        ledger_totals(self)
    }

    pub fn count(&self, role: RoleTag) -> usize {
        self.records.iter().filter(|r| r.role_tag == role).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTotals {
    pub calls: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(with = "rust_decimal::serde::str")]
    pub cost: Decimal,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTotals {
    #[serde(with = "rust_decimal::serde::str")]
    pub total_cost: Decimal,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub per_role: BTreeMap<RoleTag, RoleTotals>,
}

/// Sums cost and tokens, overall and per role. Cost is computed per record
/// in exact decimal arithmetic, so the per-role costs add up to the total.
pub fn ledger_totals(ledger: &CostLedger) -> LedgerTotals {
    let mut totals = LedgerTotals::default();
    for record in &ledger.records {
        let cost = ledger.prices.cost(record.prompt_tokens, record.completion_tokens);
        totals.total_cost += cost;
        totals.prompt_tokens += record.prompt_tokens;
        totals.completion_tokens += record.completion_tokens;
        let role = totals.per_role.entry(record.role_tag).or_default();
        role.calls += 1;
        role.prompt_tokens += record.prompt_tokens;
        role.completion_tokens += record.completion_tokens;
        role.cost += cost;
    }
    totals.total_tokens = totals.prompt_tokens + totals.completion_tokens;
    totals.total_cost = totals.total_cost.normalize();
    for role in totals.per_role.values_mut() {
        role.cost = role.cost.normalize();
    }
    totals
}

/// Ledger that concurrent calls append to. Snapshots come back ordered by
/// [`UsageRecord::sequence_key`], so arrival order never shows up in reports.
#[derive(Debug, Clone)]
pub struct SharedLedger {
    inner: Arc<Mutex<CostLedger>>,
}

impl SharedLedger {
    pub fn new(prices: PriceTable) -> Self {
        Self {
            inner: Arc::new(Mutex::new(CostLedger::new(prices))),
        }
    }

    pub fn append(&self, record: UsageRecord) {
        self.inner.lock().expect("ledger lock").records.push(record);
    }

    pub fn snapshot(&self) -> CostLedger {
        let mut ledger = self.inner.lock().expect("ledger lock").clone();
        ledger.records.sort_by_key(UsageRecord::sequence_key);
        ledger
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(role: RoleTag, prompt: u64, completion: u64) -> UsageRecord {
        UsageRecord {
            role_tag: role,
            iteration: 1,
            slot: 0,
            prompt_tokens: prompt,
            completion_tokens: completion,
            wall_clock: Duration::ZERO,
            retries: 0,
        }
    }

    fn ledger(records: Vec<UsageRecord>) -> CostLedger {
        CostLedger {
            prices: PriceTable::default(),
            records,
        }
    }

    #[test]
    fn empty_ledger_costs_nothing() {
        let t = ledger_totals(&ledger(vec![]));
        assert_eq!(t.total_cost, Decimal::ZERO);
        assert_eq!(t.total_tokens, 0);
        assert!(t.per_role.is_empty());
    }

    #[test]
    fn thousand_and_thousand_tokens() {
        // 1000/1000 * 0.001 + 1000/1000 * 0.002
        let t = ledger_totals(&ledger(vec![record(RoleTag::HypSat, 1000, 1000)]));
        assert_eq!(t.total_cost, "0.003".parse::<Decimal>().unwrap());
    }

    #[test]
    fn duplicate_record_doubles_cost() {
        let one = ledger_totals(&ledger(vec![record(RoleTag::Refine, 123, 45)]));
        let two = ledger_totals(&ledger(vec![
            record(RoleTag::Refine, 123, 45),
            record(RoleTag::Refine, 123, 45),
        ]));
        assert_eq!(two.total_cost, one.total_cost * Decimal::from(2));
    }

    #[test]
    fn prices_parse_from_strings_and_floats() {
        let p: PriceTable = toml::from_str("prompt_per_1k = \"0.0010\"\ncompletion_per_1k = 0.002").unwrap();
        assert_eq!(p, PriceTable::default());
    }

    #[test]
    fn snapshot_orders_by_sequence() {
        let shared = SharedLedger::new(PriceTable::default());
        let mut late = record(RoleTag::BrainstormNotes, 1, 1);
        late.slot = 2;
        let mut early = record(RoleTag::BrainstormNotes, 1, 1);
        early.slot = 0;
        shared.append(record(RoleTag::HypSat, 1, 1));
        shared.append(late);
        shared.append(early);
        let slots: Vec<_> = shared
            .snapshot()
            .records
            .iter()
            .map(|r| (r.role_tag, r.slot))
            .collect();
        assert_eq!(
            slots,
            [
                (RoleTag::BrainstormNotes, 0),
                (RoleTag::BrainstormNotes, 2),
                (RoleTag::HypSat, 0)
            ]
        );
    }

    fn arb_role() -> impl Strategy<Value = RoleTag> {
        proptest::sample::select(RoleTag::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn totals_are_order_independent_and_per_role_sums_match(
            raw in proptest::collection::vec((arb_role(), 0u64..100_000, 0u64..100_000), 0..30)
        ) {
            let records: Vec<_> = raw.iter().map(|(r, p, c)| record(*r, *p, *c)).collect();
            let forward = ledger_totals(&ledger(records.clone()));
            let mut reversed = records.clone();
            reversed.reverse();
            prop_assert_eq!(&forward, &ledger_totals(&ledger(reversed)));

            let role_sum: Decimal = forward.per_role.values().map(|r| r.cost).sum();
            prop_assert_eq!(role_sum.normalize(), forward.total_cost);

            // linearity against an independent closed form
            let p: u64 = raw.iter().map(|x| x.1).sum();
            let c: u64 = raw.iter().map(|x| x.2).sum();
            let expected = (Decimal::from(p) * Decimal::new(1, 6) + Decimal::from(c) * Decimal::new(2, 6)).normalize();
            prop_assert_eq!(forward.total_cost, expected);
        }
    }
}
