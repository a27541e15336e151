//! Specificity ladder over key attributes.
//!
//! With key attributes `[department, surgery_name, surgery_level]` the tiers
//! are, most specific first:
//!
//! 0. department + surgery name + surgery level
//! 1. department + surgery name
//! 2. department + surgery level
//! 3. department
//!
//! followed by the unfiltered level (`tiers().len()`). Every tier keeps the
//! first key attribute; remaining subsets are ordered by size, then by
//! attribute position.

use serde::{Deserialize, Serialize};

use crate::schema::{FeatureSchema, SurgicalCase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumLadder {
    attributes: Vec<String>,
    tiers: Vec<Vec<usize>>,
}

impl StratumLadder {
    pub fn new(schema: &FeatureSchema) -> Self {
        Self::from_attributes(schema.key_attributes.clone())
    }

    pub fn from_attributes(attributes: Vec<String>) -> Self {
        let k = attributes.len();
        let mut tiers = Vec::new();
        if k > 0 {
            let rest = k - 1;
            for mask in 0..(1usize << rest) {
                let mut tier = vec![0];
                tier.extend((0..rest).filter(|b| mask & (1 << b) != 0).map(|b| b + 1));
                tiers.push(tier);
            }
            tiers.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        }
        StratumLadder { attributes, tiers }
    }

    pub fn tiers(&self) -> &[Vec<usize>] {
        &self.tiers
    }

    /// Level index meaning "no attribute constraint".
    pub fn unfiltered_level(&self) -> usize {
        self.tiers.len()
    }

    /// The department attribute, if any key attributes are declared.
    pub fn department(&self) -> Option<&str> {
        self.attributes.first().map(String::as_str)
    }

    /// Attribute names constrained at `level`; empty for the unfiltered level.
    pub fn attributes_at(&self, level: usize) -> Vec<&str> {
        self.tiers
            .get(level)
            .map(|t| t.iter().map(|&i| self.attributes[i].as_str()).collect())
            .unwrap_or_default()
    }

    /// Key values of `case` at `level`; `None` if any of them is missing.
    pub fn key(&self, case: &SurgicalCase, level: usize) -> Option<Vec<String>> {
        self.attributes_at(level)
            .into_iter()
            .map(|a| case.value(a).as_text())
            .collect()
    }

    /// Exact agreement on every attribute of the tier. Missing values never
    /// match; the unfiltered level matches everything.
    pub fn matches(&self, query: &SurgicalCase, other: &SurgicalCase, level: usize) -> bool {
        if level >= self.tiers.len() {
            return true;
        }
        self.attributes_at(level).into_iter().all(|a| match (query.value(a).as_text(), other.value(a).as_text()) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        })
    }

    pub fn same_department(&self, query: &SurgicalCase, other: &SurgicalCase) -> bool {
        match self.department() {
            None => false,
            Some(d) => match (query.value(d).as_text(), other.value(d).as_text()) {
                (Some(x), Some(y)) => x == y,
                _ => false,
            },
        }
    }

    /// Human-readable description such as `department=Urology, surgery_level=II`.
    pub fn describe(&self, case: &SurgicalCase, level: usize) -> String {
        if level >= self.tiers.len() {
            return "GLOBAL".to_string();
        }
        self.attributes_at(level)
            .into_iter()
            .map(|a| format!("{a}={}", case.value(a)))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Value;

    #[test]
    fn three_attribute_ladder() {
        let l = StratumLadder::from_attributes(vec!["d".into(), "n".into(), "l".into()]);
        assert_eq!(l.tiers(), &[vec![0, 1, 2], vec![0, 1], vec![0, 2], vec![0]]);
        assert_eq!(l.unfiltered_level(), 4);
        assert_eq!(l.attributes_at(2), vec!["d", "l"]);
    }

    #[test]
    fn empty_ladder() {
        let l = StratumLadder::from_attributes(vec![]);
        assert!(l.tiers().is_empty());
        assert_eq!(l.unfiltered_level(), 0);
    }

    #[test]
    fn missing_never_matches() {
        let l = StratumLadder::from_attributes(vec!["d".into()]);
        let a = SurgicalCase::new("a").with("d", Value::Text("X".into()));
        let b = SurgicalCase::new("b").with("d", Value::Missing);
        assert!(l.matches(&a, &a, 0));
        assert!(!l.matches(&a, &b, 0));
        assert!(!l.matches(&b, &b, 0));
        assert!(l.matches(&b, &b, 1));
        assert_eq!(l.describe(&a, 0), "d=X");
        assert_eq!(l.describe(&a, 1), "GLOBAL");
    }
}
