#![allow(dead_code)]

use std::path::PathBuf;

use clq::io::ProblemFile;
use clq::model::ProblemSpec;
use clq::mv::MarketSpec;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

pub fn load_spec(name: &str) -> ProblemSpec {
    ProblemFile::read(&fixture_path(name))
        .and_then(|f| f.to_spec())
        .unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn load_market(name: &str) -> MarketSpec {
    ProblemFile::read(&fixture_path(name))
        .and_then(|f| f.to_market())
        .unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Collects named checks and prints one line per criterion.
pub struct Criterion {
    name: &'static str,
    checks: Vec<(String, bool)>,
    notes: Vec<String>,
}

impl Criterion {
    pub fn new(name: &'static str) -> Self {
        Criterion {
            name,
            checks: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn check(&mut self, label: impl Into<String>, ok: bool) -> bool {
        self.checks.push((label.into(), ok));
        ok
    }

    /// Informational line; does not affect the verdict.
    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    /// `|got - want| <= tol`.
    pub fn close(&mut self, label: &str, got: f64, want: f64, tol: f64) -> bool {
        let ok = (got - want).abs() <= tol;
        self.check(
            format!("{label}: got {got:.6}, want {want} (tol {tol:e})"),
            ok,
        )
    }

    /// Prints the verdict; true when every check passed.
    pub fn finish(self) -> bool {
        use std::fmt::Write;
        let failed = self.checks.iter().filter(|(_, ok)| !ok).count();
        let verdict = if failed == 0 { "PASS" } else { "FAIL" };
        let mut out = format!(
            "{verdict} {}  ({}/{} checks)\n",
            self.name,
            self.checks.len() - failed,
            self.checks.len()
        );
        for (label, ok) in &self.checks {
            let _ = writeln!(out, "    [{}] {label}", if *ok { "ok" } else { "FAILED" });
        }
        for n in &self.notes {
            let _ = writeln!(out, "    note: {n}");
        }
        print!("{out}");
        failed == 0
    }
}
