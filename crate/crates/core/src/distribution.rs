//! Categorical counts over a declared, ordered support.

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Counts over an ordered set of categories. Categories with a zero count stay
/// part of the support, which matters for normalized entropy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoricalDistribution {
    counts: IndexMap<String, u64>,
}

impl CategoricalDistribution {
    /// Empty distribution over `categories`, in the given order. Duplicate
    /// category names collapse into one.
    pub fn with_support<I, S>(categories: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let counts = categories.into_iter().map(|c| (c.into(), 0)).collect();
        Self { counts }
    }

    pub fn from_counts<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        let mut counts = IndexMap::new();
        for (c, n) in pairs {
            *counts.entry(c.into()).or_insert(0) += n;
        }
        Self { counts }
    }

    /// Increments `category`; returns false when it is outside the support.
    pub fn add(&mut self, category: &str) -> bool {
        self.add_n(category, 1)
    }

    pub fn add_n(&mut self, category: &str, n: u64) -> bool {
        match self.counts.get_mut(category) {
            Some(c) => {
                *c += n;
                true
            }
            None => false,
        }
    }

    pub fn count(&self, category: &str) -> u64 {
        self.counts.get(category).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Number of declared categories.
    pub fn support_size(&self) -> usize {
        self.counts.len()
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Share of the total per category; all zeros when the total is zero.
    pub fn shares(&self) -> Vec<(&str, f64)> {
        let total = self.total();
        self.iter()
            .map(|(c, n)| {
                let share = if total == 0 { 0.0 } else { n as f64 / total as f64 };
                (c, share)
            })
            .collect()
    }

    pub fn share(&self, category: &str) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.count(category) as f64 / total as f64
        }
    }

    /// True when both distributions declare the same set of categories.
    pub fn same_support(&self, other: &Self) -> bool {
        self.counts.len() == other.counts.len()
            && self.counts.keys().all(|k| other.counts.contains_key(k))
    }

    /// Adds every count of `other` into `self`; false on mismatched supports.
    pub fn merge(&mut self, other: &Self) -> bool {
        if !self.same_support(other) {
            return false;
        }
        for (k, v) in other.iter() {
            self.add_n(k, v);
        }
        true
    }

    /// CSV with a `category,count,share` header, shares to six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,count,share\n");
        for (c, share) in self.shares() {
            out.push_str(&format!("{},{},{:.6}\n", csv_field(c), self.count(c), share));
        }
        out
    }

    /// Parses the output of [`to_csv`](Self::to_csv).
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut pairs = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| e.to_string())?;
            let category = row.get(0).ok_or_else(|| format!("row {}: missing category", i + 2))?;
            let count = row
                .get(1)
                .ok_or_else(|| format!("row {}: missing count", i + 2))?
                .parse::<u64>()
                .map_err(|e| format!("row {}: {e}", i + 2))?;
            pairs.push((category.to_string(), count));
        }
        Ok(Self::from_counts(pairs))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Serialize, Deserialize)]
struct DistributionRepr {
    counts: IndexMap<String, u64>,
    total: u64,
}

impl Serialize for CategoricalDistribution {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        DistributionRepr { counts: self.counts.clone(), total: self.total() }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CategoricalDistribution {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = DistributionRepr::deserialize(deserializer)?;
        let sum: u64 = repr.counts.values().sum();
        if sum != repr.total {
            return Err(serde::de::Error::custom(format!(
                "total {} does not equal the sum of counts {sum}",
                repr.total
            )));
        }
        Ok(Self { counts: repr.counts })
    }
}
