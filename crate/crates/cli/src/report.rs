//! Schema-versioned JSON reports.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

pub const SCHEMA: &str = "ymorse.report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `value <= tolerance`
    AtMost,
    /// `|value - expected| <= tolerance`
    Near,
    /// Exact equality of integers or lists.
    Exact,
}

/// A measured number together with the tolerance it was judged against.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected: Option<Value>,
    pub tolerance: f64,
    pub comparison: Comparison,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value: num(value), expected: None, tolerance, comparison: Comparison::AtMost, passed: value <= tolerance }
    }

    pub fn near(name: impl Into<String>, value: f64, expected: f64, tolerance: f64) -> Self {
        let passed = (value - expected).abs() <= tolerance;
        Self { name: name.into(), value: num(value), expected: Some(num(expected)), tolerance, comparison: Comparison::Near, passed }
    }

    pub fn exact<T: Serialize + PartialEq>(name: impl Into<String>, value: &T, expected: &T) -> Self {
        Self {
            name: name.into(),
            value: serde_json::to_value(value).expect("serializable"),
            expected: Some(serde_json::to_value(expected).expect("serializable")),
            tolerance: 0.0,
            comparison: Comparison::Exact,
            passed: value == expected,
        }
    }

    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Self::exact(name, &ok, &true)
    }
}

/// Non-finite values become strings so the output stays valid JSON.
fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or_else(|| Value::String(x.to_string()), Value::Number)
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub command: String,
    pub config: Value,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub results: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Report {
    pub fn new(command: impl Into<String>, config: Value) -> Self {
        Self { schema: SCHEMA, command: command.into(), config, passed: true, checks: vec![], results: Value::Null, error: None }
    }

    pub fn push(&mut self, c: Check) {
        self.passed &= c.passed;
        self.checks.push(c);
    }

    pub fn extend(&mut self, cs: impl IntoIterator<Item = Check>) {
        cs.into_iter().for_each(|c| self.push(c));
    }

    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failing_check_fails_report() {
        let mut r = Report::new("t", Value::Null);
        r.push(Check::at_most("a", 1e-9, 1e-6));
        assert!(r.passed);
        r.push(Check::near("b", 8.1, 8.0, 1e-6));
        assert!(!r.passed);
        assert_eq!(r.failed().map(|c| c.name.as_str()).collect::<Vec<_>>(), vec!["b"]);
    }

    #[test]
    fn nan_serializes_as_string() {
        let c = Check::at_most("x", f64::NAN, 1.0);
        assert!(!c.passed);
        assert_eq!(serde_json::to_value(&c).unwrap()["value"], Value::String("NaN".into()));
    }
}
