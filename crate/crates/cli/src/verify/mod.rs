//! Property suites behind `hit verify`.

mod equivalence;
mod gradcheck;
mod roundtrip;

use std::fmt::Write as _;

use clap::ValueEnum;
use hit_core::numerics::OpKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Gradcheck,
    Equivalence,
    Roundtrip,
    All,
}

/// One checked property: its worst observed error against a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Property {
    pub name: String,
    pub max_error: f64,
    pub threshold: f64,
    /// Set when the check could not run to completion.
    pub failure: Option<String>,
}

impl Property {
    pub fn measured(name: impl Into<String>, max_error: f64, threshold: f64) -> Self {
        Self { name: name.into(), max_error, threshold, failure: None }
    }

    /// `0` when `ok`, `1` otherwise, against a threshold of `0`.
    pub fn exact(name: impl Into<String>, ok: bool) -> Self {
        Self::measured(name, if ok { 0.0 } else { 1.0 }, 0.0)
    }

    pub fn from_result(name: impl Into<String>, threshold: f64, r: anyhow::Result<f64>) -> Self {
        match r {
            Ok(e) => Self::measured(name, e, threshold),
            Err(e) => Self { name: name.into(), max_error: f64::INFINITY, threshold, failure: Some(format!("{e:#}")) },
        }
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_error <= self.threshold
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Corrupt the derivative rule of this op on the analytic side.
    pub fault: Option<OpKind>,
    /// Keep only properties whose name contains this text.
    pub filter: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub properties: Vec<Property>,
    /// Primitives whose derivative rule the op probes single out as broken.
    pub culprits: Vec<OpKind>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(Property::passed)
    }

    /// CSV with one row per property, then a summary comment.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("property,max_error,threshold,verdict\n");
        for p in &self.properties {
            let verdict = if p.passed() { "pass" } else { "fail" };
            let _ = writeln!(out, "{},{:e},{:e},{}", p.name, p.max_error, p.threshold, verdict);
        }
        let failed = self.properties.iter().filter(|p| !p.passed()).count();
        let _ = writeln!(out, "# {} properties, {} failed", self.properties.len(), failed);
        for p in self.properties.iter().filter(|p| p.failure.is_some()) {
            let _ = writeln!(out, "# {}: {}", p.name, p.failure.as_deref().unwrap_or_default());
        }
        if !self.culprits.is_empty() {
            let names: Vec<&str> = self.culprits.iter().map(|k| k.name()).collect();
            let _ = writeln!(out, "# culprit: {}", names.join(" "));
        }
        out
    }
}

/// Runs `suite`; properties are produced in a fixed order.
pub fn run(suite: Suite, opts: &VerifyOptions) -> Report {
    let keep = |name: &str| opts.filter.as_deref().is_none_or(|f| name.contains(f));
    let mut properties = Vec::new();
    let mut culprits = Vec::new();
    if matches!(suite, Suite::Gradcheck | Suite::All) {
        let (props, found) = gradcheck::run(opts.fault, &keep);
        properties.extend(props);
        culprits = found;
    }
    if matches!(suite, Suite::Equivalence | Suite::All) {
        properties.extend(equivalence::run(&keep));
    }
    if matches!(suite, Suite::Roundtrip | Suite::All) {
        properties.extend(roundtrip::run(&keep));
    }
    Report { properties, culprits }
}

/// Lazily evaluated property.
type Check<'a> = (String, Box<dyn FnOnce() -> Property + 'a>);

fn evaluate(checks: Vec<Check<'_>>, keep: &dyn Fn(&str) -> bool) -> Vec<Property> {
    checks.into_iter().filter(|(name, _)| keep(name)).map(|(_, f)| f()).collect()
}
