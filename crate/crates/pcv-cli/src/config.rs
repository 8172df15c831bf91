//! Run configuration: defaults, a flat `key = value` file, and command-line
//! overrides, merged with precedence CLI > file > defaults.
//!
//! The parsed configuration serializes to a canonical text form
//! ([`RunConfig::canonical`]) that parses back to an identical value, so a
//! run can always be reproduced from its echoed configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use pcv_core::model::DividendConvention;
use pcv_core::pricing::{InsuranceProduct, OptionKind};

/// Formats an `f64` with 17 significant digits, enough to round-trip the
/// value exactly through text.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Dividend convention names used on the command line and in config files.
pub fn convention_from_str(s: &str) -> Result<DividendConvention> {
    match s {
        "book" => Ok(DividendConvention::BookValue),
        "price" => Ok(DividendConvention::MarketPrice),
        other => bail!("unknown convention `{other}` (expected `book` or `price`)"),
    }
}

fn convention_to_str(c: DividendConvention) -> &'static str {
    match c {
        DividendConvention::BookValue => "book",
        DividendConvention::MarketPrice => "price",
    }
}

/// Simulation measure selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeasureChoice {
    #[default]
    Real,
    RiskNeutral,
    /// Forward measure with the bond maturing at the configured `maturity`
    /// as numeraire.
    Forward,
}

impl FromStr for MeasureChoice {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Self::Real),
            "risk-neutral" => Ok(Self::RiskNeutral),
            "forward" => Ok(Self::Forward),
            other => bail!(
                "unknown measure `{other}` (expected `real`, `risk-neutral`, or `forward`)"
            ),
        }
    }
}

impl fmt::Display for MeasureChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Real => "real",
            Self::RiskNeutral => "risk-neutral",
            Self::Forward => "forward",
        })
    }
}

/// Claim selector for the hedge command: a vanilla option or an insurance
/// product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClaimChoice {
    #[default]
    Call,
    Put,
    SegTerm,
    SegEndowment,
    UlTerm,
    UlEndowment,
}

impl ClaimChoice {
    pub fn option_kind(self) -> Option<OptionKind> {
        match self {
            Self::Call => Some(OptionKind::Call),
            Self::Put => Some(OptionKind::Put),
            _ => None,
        }
    }

    pub fn product(self) -> Option<InsuranceProduct> {
        match self {
            Self::SegTerm => Some(InsuranceProduct::SegregatedTerm),
            Self::SegEndowment => Some(InsuranceProduct::SegregatedEndowment),
            Self::UlTerm => Some(InsuranceProduct::UnitLinkedTerm),
            Self::UlEndowment => Some(InsuranceProduct::UnitLinkedEndowment),
            _ => None,
        }
    }
}

impl FromStr for ClaimChoice {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "call" => Ok(Self::Call),
            "put" => Ok(Self::Put),
            "seg-term" => Ok(Self::SegTerm),
            "seg-endowment" => Ok(Self::SegEndowment),
            "ul-term" => Ok(Self::UlTerm),
            "ul-endowment" => Ok(Self::UlEndowment),
            other => bail!(
                "unknown claim `{other}` (expected `call`, `put`, `seg-term`, \
                 `seg-endowment`, `ul-term`, or `ul-endowment`)"
            ),
        }
    }
}

impl fmt::Display for ClaimChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Call => "call",
            Self::Put => "put",
            Self::SegTerm => "seg-term",
            Self::SegEndowment => "seg-endowment",
            Self::UlTerm => "ul-term",
            Self::UlEndowment => "ul-endowment",
        })
    }
}

/// Insurance product names as emitted in reports.
pub fn product_to_str(p: InsuranceProduct) -> &'static str {
    match p {
        InsuranceProduct::SegregatedTerm => "seg-term",
        InsuranceProduct::SegregatedEndowment => "seg-endowment",
        InsuranceProduct::UnitLinkedTerm => "ul-term",
        InsuranceProduct::UnitLinkedEndowment => "ul-endowment",
    }
}

/// Everything a run needs: input files, model shape, estimation and Monte
/// Carlo settings, and the claim being priced or hedged. One flat bag so that
/// every knob can come from a config file, a flag, or a default.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Input and output files.
    pub panel: Option<String>,
    pub macro_file: Option<String>,
    pub exog: Option<String>,
    pub lifetable: Option<String>,
    pub params: Option<String>,
    pub out: Option<String>,
    // Model shape and initial data not carried by the CSV files.
    pub convention: DividendConvention,
    pub p: usize,
    pub b0: Vec<f64>,
    pub z0_star: Vec<f64>,
    // Estimation settings.
    pub tol: f64,
    pub max_iter: usize,
    pub update_initial: bool,
    // Monte Carlo settings.
    pub seed: u64,
    pub paths: usize,
    pub antithetic: bool,
    pub measure: MeasureChoice,
    // Valuation date, horizons, and claim description.
    pub t: Option<usize>,
    pub horizon: Option<usize>,
    pub maturity: Option<usize>,
    pub strike: Vec<f64>,
    pub claim: ClaimChoice,
    pub age: u32,
    pub fund_units: Vec<f64>,
    pub guarantees: Vec<f64>,
    pub company: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            panel: None,
            macro_file: None,
            exog: None,
            lifetable: None,
            params: None,
            out: None,
            convention: DividendConvention::BookValue,
            p: 1,
            b0: Vec::new(),
            z0_star: Vec::new(),
            tol: 1e-9,
            max_iter: 1000,
            update_initial: false,
            seed: pcv_core::verify::DEFAULT_SEED,
            paths: 100_000,
            antithetic: true,
            measure: MeasureChoice::Real,
            t: None,
            horizon: None,
            maturity: None,
            strike: Vec::new(),
            claim: ClaimChoice::Call,
            age: 60,
            fund_units: Vec::new(),
            guarantees: Vec::new(),
            company: 0,
        }
    }
}

fn parse_list(value: &str, key: &str) -> Result<Vec<f64>> {
    value
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .with_context(|| format!("key `{key}`: invalid number `{tok}`"))
        })
        .collect()
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(" ")
}

impl RunConfig {
    /// Applies one `key = value` assignment (shared by the file parser and
    /// the flag merger).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "panel" => self.panel = Some(v.to_string()),
            "macro" => self.macro_file = Some(v.to_string()),
            "exog" => self.exog = Some(v.to_string()),
            "lifetable" => self.lifetable = Some(v.to_string()),
            "params" => self.params = Some(v.to_string()),
            "out" => self.out = Some(v.to_string()),
            "convention" => self.convention = convention_from_str(v)?,
            "p" => self.p = v.parse().with_context(|| format!("key `p`: invalid integer `{v}`"))?,
            "b0" => self.b0 = parse_list(v, "b0")?,
            "z0_star" => self.z0_star = parse_list(v, "z0_star")?,
            "tol" => {
                self.tol = v.parse().with_context(|| format!("key `tol`: invalid number `{v}`"))?
            }
            "max_iter" => {
                self.max_iter = v
                    .parse()
                    .with_context(|| format!("key `max_iter`: invalid integer `{v}`"))?
            }
            "update_initial" => {
                self.update_initial = v
                    .parse()
                    .with_context(|| format!("key `update_initial`: expected true/false, got `{v}`"))?
            }
            "seed" => {
                self.seed = v.parse().with_context(|| format!("key `seed`: invalid integer `{v}`"))?
            }
            "paths" => {
                self.paths = v
                    .parse()
                    .with_context(|| format!("key `paths`: invalid integer `{v}`"))?
            }
            "antithetic" => {
                self.antithetic = v
                    .parse()
                    .with_context(|| format!("key `antithetic`: expected true/false, got `{v}`"))?
            }
            "measure" => self.measure = v.parse()?,
            "t" => {
                self.t = Some(v.parse().with_context(|| format!("key `t`: invalid integer `{v}`"))?)
            }
            "horizon" => {
                self.horizon = Some(
                    v.parse()
                        .with_context(|| format!("key `horizon`: invalid integer `{v}`"))?,
                )
            }
            "maturity" => {
                self.maturity = Some(
                    v.parse()
                        .with_context(|| format!("key `maturity`: invalid integer `{v}`"))?,
                )
            }
            "strike" => self.strike = parse_list(v, "strike")?,
            "claim" => self.claim = v.parse()?,
            "age" => {
                self.age = v.parse().with_context(|| format!("key `age`: invalid integer `{v}`"))?
            }
            "fund_units" => self.fund_units = parse_list(v, "fund_units")?,
            "guarantees" => self.guarantees = parse_list(v, "guarantees")?,
            "company" => {
                self.company = v
                    .parse()
                    .with_context(|| format!("key `company`: invalid integer `{v}`"))?
            }
            other => bail!("unknown configuration key `{other}`"),
        }
        Ok(())
    }

    /// Reads a flat `key = value` file over `self` (later lines win). Blank
    /// lines and `#` comments are skipped; errors carry the line number.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(
                    "{} line {}: expected `key = value`, got `{raw}`",
                    path.display(),
                    idx + 1
                );
            };
            self.set(key.trim(), value)
                .with_context(|| format!("{} line {}", path.display(), idx + 1))?;
        }
        Ok(())
    }

    /// Canonical text form: sorted `key = value` lines covering every set
    /// key. Parsing the result reproduces `self` exactly.
    pub fn canonical(&self) -> String {
        let mut kv: BTreeMap<&'static str, String> = BTreeMap::new();
        let opt = |map: &mut BTreeMap<&'static str, String>, k: &'static str, v: &Option<String>| {
            if let Some(v) = v {
                map.insert(k, v.clone());
            }
        };
        opt(&mut kv, "panel", &self.panel);
        opt(&mut kv, "macro", &self.macro_file);
        opt(&mut kv, "exog", &self.exog);
        opt(&mut kv, "lifetable", &self.lifetable);
        opt(&mut kv, "params", &self.params);
        opt(&mut kv, "out", &self.out);
        kv.insert("convention", convention_to_str(self.convention).to_string());
        kv.insert("p", self.p.to_string());
        if !self.b0.is_empty() {
            kv.insert("b0", fmt_list(&self.b0));
        }
        if !self.z0_star.is_empty() {
            kv.insert("z0_star", fmt_list(&self.z0_star));
        }
        kv.insert("tol", fmt_f64(self.tol));
        kv.insert("max_iter", self.max_iter.to_string());
        kv.insert("update_initial", self.update_initial.to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert("paths", self.paths.to_string());
        kv.insert("antithetic", self.antithetic.to_string());
        kv.insert("measure", self.measure.to_string());
        if let Some(t) = self.t {
            kv.insert("t", t.to_string());
        }
        if let Some(h) = self.horizon {
            kv.insert("horizon", h.to_string());
        }
        if let Some(m) = self.maturity {
            kv.insert("maturity", m.to_string());
        }
        if !self.strike.is_empty() {
            kv.insert("strike", fmt_list(&self.strike));
        }
        kv.insert("claim", self.claim.to_string());
        kv.insert("age", self.age.to_string());
        if !self.fund_units.is_empty() {
            kv.insert("fund_units", fmt_list(&self.fund_units));
        }
        if !self.guarantees.is_empty() {
            kv.insert("guarantees", fmt_list(&self.guarantees));
        }
        kv.insert("company", self.company.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parses a canonical (or hand-written) config text into a fresh value.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected `key = value`, got `{raw}`", idx + 1);
            };
            cfg.set(key.trim(), value)
                .with_context(|| format!("line {}", idx + 1))?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.panel = Some("panel.csv".into());
        cfg.b0 = vec![2.5, 3.0 + 1e-15];
        cfg.z0_star = vec![0.01];
        cfg.tol = 1.2345678901234567e-9;
        cfg.t = Some(3);
        cfg.strike = vec![1.1, 0.9];
        cfg.claim = ClaimChoice::UlEndowment;
        cfg.measure = MeasureChoice::Forward;
        let text = cfg.canonical();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.canonical(), text);
    }

    #[test]
    fn file_errors_carry_line_numbers() {
        let text = "p = 1\nbogus line\n";
        let err = RunConfig::from_text(text).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let text = "p = 1\nseed = abc\n";
        let err = format!("{:#}", RunConfig::from_text(text).unwrap_err());
        assert!(err.contains("line 2") && err.contains("seed"), "{err}");
        let text = "not_a_key = 4\n";
        let err = format!("{:#}", RunConfig::from_text(text).unwrap_err());
        assert!(err.contains("unknown configuration key"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::from_text("# a comment\n\n  p = 2  \n").unwrap();
        assert_eq!(cfg.p, 2);
    }
}
