//! Multiply-accumulate accounting per layer scope.

use std::collections::BTreeMap;

/// Counter of multiply-accumulate operations, keyed by layer path.
///
/// One MAC is one multiply-accumulate; FLOPs are reported elsewhere as
/// 2 x MACs. Only matmul, conv, and deconv record; normalization,
/// activations, and elementwise ops are excluded by convention.
#[derive(Clone, Debug, Default)]
pub struct CostLedger {
    entries: BTreeMap<String, u64>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, path: &str, macs: u64) {
        *self.entries.entry(path.to_string()).or_insert(0) += macs;
    }

    pub fn total(&self) -> u64 {
        self.entries.values().sum()
    }

    /// Sum of entries whose path contains `needle`.
    pub fn total_matching(&self, needle: &str) -> u64 {
        self.entries
            .iter()
            .filter(|(k, _)| k.contains(needle))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, u64)> {
        self.entries.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// CSV rows `layer,macs` in deterministic (sorted) order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,macs\n");
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push(',');
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_when_nothing_recorded() {
        let ledger = CostLedger::new();
        assert_eq!(ledger.total(), 0);
        assert!(ledger.is_empty());
    }

    #[test]
    fn totals_are_additive_across_layers() {
        let mut ledger = CostLedger::new();
        ledger.record("a/conv", 10);
        ledger.record("b/conv", 32);
        ledger.record("a/conv", 5);
        assert_eq!(ledger.total(), 47);
        assert_eq!(ledger.total_matching("a/"), 15);
        assert_eq!(
            ledger.total(),
            ledger.entries().map(|(_, v)| v).sum::<u64>()
        );
    }
}
