//! File formats: the panel / macro / exogenous / life-table CSV readers, the
//! JSON parameter file, and report writing helpers.
//!
//! All CSV files are UTF-8 with a mandatory header row and `.` as the decimal
//! separator; parse failures report the file and line number.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use pcv_core::model::{ExogSeries, ModelParameters, PanelData};
use pcv_core::LifeTable;

use crate::config::{fmt_f64, RunConfig};

// ---------------------------------------------------------------------------
// CSV input
// ---------------------------------------------------------------------------

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn parse_f64(field: &str, path: &Path, line: u64, col: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .with_context(|| format!("{} line {line}: column `{col}`: invalid number `{field}`", path.display()))
}

fn parse_usize(field: &str, path: &Path, line: u64, col: &str) -> Result<usize> {
    field
        .parse::<usize>()
        .with_context(|| format!("{} line {line}: column `{col}`: invalid integer `{field}`", path.display()))
}

fn parse_u32(field: &str, path: &Path, line: u64, col: &str) -> Result<u32> {
    field
        .parse::<u32>()
        .with_context(|| format!("{} line {line}: column `{col}`: invalid integer `{field}`", path.display()))
}

fn parse_bool(field: &str, path: &Path, line: u64, col: &str) -> Result<bool> {
    match field {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => bail!(
            "{} line {line}: column `{col}`: expected true/false/1/0, got `{other}`",
            path.display()
        ),
    }
}

fn check_header(path: &Path, headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let found: Vec<&str> = headers.iter().collect();
    if found != expected {
        bail!(
            "{}: header must be `{}`, found `{}`",
            path.display(),
            expected.join(","),
            found.join(",")
        );
    }
    Ok(())
}

/// Checks an indexed header like `t,z1,z2,...` and returns the series width.
fn indexed_header(path: &Path, headers: &csv::StringRecord, prefix: &str) -> Result<usize> {
    let found: Vec<&str> = headers.iter().collect();
    if found.first() != Some(&"t") || found.len() < 2 {
        bail!(
            "{}: header must be `t,{prefix}1,{prefix}2,...`, found `{}`",
            path.display(),
            found.join(",")
        );
    }
    for (i, name) in found[1..].iter().enumerate() {
        let want = format!("{prefix}{}", i + 1);
        if *name != want {
            bail!(
                "{}: header column {} must be `{want}`, found `{name}`",
                path.display(),
                i + 2
            );
        }
    }
    Ok(found.len() - 1)
}

/// Contents of the company panel file `t,company,b_tilde,delta_tilde,pays_dividend`.
pub struct PanelCsv {
    pub t_obs: usize,
    pub n: usize,
    pub b_tilde: Vec<DVector<f64>>,
    pub delta_tilde: Vec<DVector<f64>>,
    pub pays: Vec<Vec<bool>>,
}

pub fn read_panel(path: &Path) -> Result<PanelCsv> {
    let mut rdr = open_csv(path)?;
    check_header(
        path,
        rdr.headers().context("missing header")?,
        &["t", "company", "b_tilde", "delta_tilde", "pays_dividend"],
    )?;
    let mut cells: BTreeMap<(usize, usize), (f64, f64, bool, u64)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("malformed CSV in {}", path.display()))?;
        let line = record_line(&rec);
        if rec.len() != 5 {
            bail!("{} line {line}: expected 5 columns, found {}", path.display(), rec.len());
        }
        let t = parse_usize(&rec[0], path, line, "t")?;
        let company = parse_usize(&rec[1], path, line, "company")?;
        if t == 0 || company == 0 {
            bail!("{} line {line}: `t` and `company` are 1-based", path.display());
        }
        let b = parse_f64(&rec[2], path, line, "b_tilde")?;
        let d = parse_f64(&rec[3], path, line, "delta_tilde")?;
        let pays = parse_bool(&rec[4], path, line, "pays_dividend")?;
        if let Some((_, _, _, prev)) = cells.insert((t, company), (b, d, pays, line)) {
            bail!(
                "{} line {line}: duplicate row for t={t}, company={company} (first at line {prev})",
                path.display()
            );
        }
    }
    if cells.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    let t_obs = cells.keys().map(|&(t, _)| t).max().unwrap();
    let n = cells.keys().map(|&(_, c)| c).max().unwrap();
    let mut b_tilde = vec![DVector::zeros(n); t_obs];
    let mut delta_tilde = vec![DVector::zeros(n); t_obs];
    let mut pays = vec![vec![false; n]; t_obs];
    for t in 1..=t_obs {
        for c in 1..=n {
            let Some(&(b, d, p, _)) = cells.get(&(t, c)) else {
                bail!("{}: missing row for t={t}, company={c}", path.display());
            };
            b_tilde[t - 1][c - 1] = b;
            delta_tilde[t - 1][c - 1] = d;
            pays[t - 1][c - 1] = p;
        }
    }
    Ok(PanelCsv { t_obs, n, b_tilde, delta_tilde, pays })
}

/// Reads an indexed series file (`t,z1..` or `t,psi1..`): consecutive dates
/// from 1, one row per date.
pub fn read_series(path: &Path, prefix: &str) -> Result<Vec<DVector<f64>>> {
    let mut rdr = open_csv(path)?;
    let width = indexed_header(path, rdr.headers().context("missing header")?, prefix)?;
    let mut rows: BTreeMap<usize, (DVector<f64>, u64)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("malformed CSV in {}", path.display()))?;
        let line = record_line(&rec);
        if rec.len() != width + 1 {
            bail!(
                "{} line {line}: expected {} columns, found {}",
                path.display(),
                width + 1,
                rec.len()
            );
        }
        let t = parse_usize(&rec[0], path, line, "t")?;
        if t == 0 {
            bail!("{} line {line}: `t` is 1-based", path.display());
        }
        let mut v = DVector::zeros(width);
        for i in 0..width {
            v[i] = parse_f64(&rec[i + 1], path, line, &format!("{prefix}{}", i + 1))?;
        }
        if let Some((_, prev)) = rows.insert(t, (v, line)) {
            bail!("{} line {line}: duplicate row for t={t} (first at line {prev})", path.display());
        }
    }
    if rows.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    let t_max = *rows.keys().max().unwrap();
    let mut out = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let Some((v, _)) = rows.remove(&t) else {
            bail!("{}: missing row for t={t}", path.display());
        };
        out.push(v);
    }
    Ok(out)
}

/// Reads a life table `x,t,tpx` into the survival-probability table.
pub fn read_lifetable(path: &Path) -> Result<LifeTable> {
    let mut rdr = open_csv(path)?;
    check_header(path, rdr.headers().context("missing header")?, &["x", "t", "tpx"])?;
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("malformed CSV in {}", path.display()))?;
        let line = record_line(&rec);
        if rec.len() != 3 {
            bail!("{} line {line}: expected 3 columns, found {}", path.display(), rec.len());
        }
        let x = parse_u32(&rec[0], path, line, "x")?;
        let t = parse_u32(&rec[1], path, line, "t")?;
        let p = parse_f64(&rec[2], path, line, "tpx")?;
        entries.push((x, t, p));
    }
    LifeTable::new(&entries).with_context(|| format!("invalid life table {}", path.display()))
}

// ---------------------------------------------------------------------------
// Parameter file (JSON)
// ---------------------------------------------------------------------------

/// On-disk form of the model parameters: dense row-major matrices.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamsFile {
    pub mu0: Vec<f64>,
    pub sigma0: Vec<Vec<f64>>,
    pub c_k: Vec<Vec<f64>>,
    pub c_m: Vec<Vec<f64>>,
    pub c_z: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub sigma_uu: Vec<Vec<f64>>,
    pub sigma_uv: Vec<Vec<f64>>,
    pub sigma_vv: Vec<Vec<f64>>,
    pub sigma_ww: Vec<Vec<f64>>,
}

fn to_matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        bail!("parameter `{name}` has no rows");
    }
    let ncols = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            bail!("parameter `{name}` row {} has {} entries, expected {ncols}", i + 1, r.len());
        }
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl ParamsFile {
    pub fn from_model(p: &ModelParameters<f64>) -> Self {
        Self {
            mu0: p.mu0.iter().copied().collect(),
            sigma0: from_matrix(&p.sigma0),
            c_k: from_matrix(&p.c_k),
            c_m: from_matrix(&p.c_m),
            c_z: from_matrix(&p.c_z),
            a: from_matrix(&p.a),
            sigma_uu: from_matrix(&p.sigma_uu),
            sigma_uv: from_matrix(&p.sigma_uv),
            sigma_vv: from_matrix(&p.sigma_vv),
            sigma_ww: from_matrix(&p.sigma_ww),
        }
    }

    pub fn to_model(&self) -> Result<ModelParameters<f64>> {
        Ok(ModelParameters {
            mu0: DVector::from_vec(self.mu0.clone()),
            sigma0: to_matrix(&self.sigma0, "sigma0")?,
            c_k: to_matrix(&self.c_k, "c_k")?,
            c_m: to_matrix(&self.c_m, "c_m")?,
            c_z: to_matrix(&self.c_z, "c_z")?,
            a: to_matrix(&self.a, "a")?,
            sigma_uu: to_matrix(&self.sigma_uu, "sigma_uu")?,
            sigma_uv: to_matrix(&self.sigma_uv, "sigma_uv")?,
            sigma_vv: to_matrix(&self.sigma_vv, "sigma_vv")?,
            sigma_ww: to_matrix(&self.sigma_ww, "sigma_ww")?,
        })
    }
}

/// JSON formatter that writes every float with 17 significant digits so the
/// file round-trips the parameters bit for bit.
struct SciFormatter;

impl serde_json::ser::Formatter for SciFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

pub fn params_to_json(params: &ModelParameters<f64>) -> Result<String> {
    let file = ParamsFile::from_model(params);
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFormatter);
    file.serialize(&mut ser).context("cannot serialize parameters")?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
}

pub fn read_params(path: &Path) -> Result<ModelParameters<f64>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read parameter file {}", path.display()))?;
    let file: ParamsFile = serde_json::from_str(&text)
        .with_context(|| format!("invalid parameter JSON in {}", path.display()))?;
    file.to_model()
        .with_context(|| format!("inconsistent parameter shapes in {}", path.display()))
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

/// The loaded panel plus the full exogenous schedule, which may extend past
/// the panel for pricing and simulation.
pub struct Dataset {
    pub data: PanelData<f64>,
    /// Exogenous regressors for every date on file (`psi_full.len() >= T`).
    pub psi_full: Vec<DVector<f64>>,
    /// Whether `psi` came from a file (false: the constant-1 default).
    pub psi_from_file: bool,
}

impl Dataset {
    /// Exogenous series through `needed` periods: `psi` from the file (or
    /// the constant default), dividend columns from the panel, repeating the
    /// final observed row past the panel horizon.
    pub fn exog_through(&self, needed: usize) -> Result<ExogSeries<f64>> {
        let t_obs = self.data.t_obs();
        let mut psi = self.psi_full.clone();
        if psi.len() < needed {
            if self.psi_from_file {
                bail!(
                    "exogenous file covers {} periods but the request needs {needed}; \
                     add rows through t={needed}",
                    psi.len()
                );
            }
            let l = psi[0].nrows();
            psi.resize(needed, DVector::from_element(l, 1.0));
        }
        psi.truncate(needed.max(t_obs));
        let mut delta = self.data.exog.delta_tilde.clone();
        let mut pays = self.data.exog.pays.clone();
        if needed > t_obs {
            let last_delta = delta[t_obs - 1].clone();
            let last_pays = pays[t_obs - 1].clone();
            if last_pays.iter().any(|&p| p) {
                log::warn!(
                    "dividend schedule extended past the panel (t={t_obs}) by repeating the \
                     final observed payout row through t={needed}"
                );
            }
            delta.resize(needed, last_delta);
            pays.resize(needed, last_pays);
        }
        Ok(ExogSeries { psi, delta_tilde: delta, pays })
    }
}

/// Loads panel, macro, and exogenous files into a [`PanelData`] according to
/// the configuration (`p`, `b0`, `z0_star` come from the config).
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let panel_path = cfg.panel.as_deref().context("no panel file configured (--panel)")?;
    let macro_path = cfg
        .macro_file
        .as_deref()
        .context("no macro series file configured (--macro)")?;
    let panel = read_panel(Path::new(panel_path))?;
    let z = read_series(Path::new(macro_path), "z")?;
    if z.len() < panel.t_obs {
        bail!(
            "macro file covers {} periods but the panel has {}; the estimation sample needs both",
            z.len(),
            panel.t_obs
        );
    }
    let z = z[..panel.t_obs].to_vec();
    let ell = z[0].nrows();

    let (psi_full, psi_from_file) = match cfg.exog.as_deref() {
        Some(path) => {
            let psi = read_series(Path::new(path), "psi")?;
            if psi.len() < panel.t_obs {
                bail!(
                    "exogenous file covers {} periods but the panel has {}",
                    psi.len(),
                    panel.t_obs
                );
            }
            (psi, true)
        }
        None => (vec![DVector::from_element(1, 1.0); panel.t_obs], false),
    };

    if cfg.b0.len() != panel.n {
        bail!(
            "`b0` must list one time-0 book value per company ({} values, got {})",
            panel.n,
            cfg.b0.len()
        );
    }
    if cfg.b0.iter().any(|&b| !(b > 0.0)) {
        bail!("`b0` book values must be positive");
    }
    if cfg.z0_star.len() != ell * cfg.p {
        bail!(
            "`z0_star` must list the {} presample macro values (ell*p = {}*{}), got {}",
            ell * cfg.p,
            ell,
            cfg.p,
            cfg.z0_star.len()
        );
    }

    let data = PanelData {
        b_tilde: panel.b_tilde,
        z,
        exog: ExogSeries {
            psi: psi_full[..panel.t_obs].to_vec(),
            delta_tilde: panel.delta_tilde,
            pays: panel.pays,
        },
        z0_star: DVector::from_vec(cfg.z0_star.clone()),
        b0: DVector::from_vec(cfg.b0.clone()),
    };
    Ok(Dataset { data, psi_full, psi_from_file })
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

/// Where a report goes: a named file under `--out`, or stdout.
pub enum ReportSink {
    Dir(PathBuf),
    Stdout,
}

impl ReportSink {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        match cfg.out.as_deref() {
            Some(dir) => {
                let p = PathBuf::from(dir);
                std::fs::create_dir_all(&p)
                    .with_context(|| format!("cannot create output directory {}", p.display()))?;
                Ok(Self::Dir(p))
            }
            None => Ok(Self::Stdout),
        }
    }

    /// Writes one named report; to stdout the name becomes a `# name` line.
    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        match self {
            Self::Dir(dir) => {
                let path = dir.join(name);
                std::fs::write(&path, contents)
                    .with_context(|| format!("cannot write {}", path.display()))?;
                eprintln!("wrote {}", path.display());
                Ok(())
            }
            Self::Stdout => {
                let stdout = std::io::stdout();
                let mut lock = stdout.lock();
                write!(lock, "{contents}").context("cannot write to stdout")?;
                lock.flush().context("cannot flush stdout")
            }
        }
    }
}

/// Builds a CSV report line by line with 17-significant-digit numbers.
pub struct CsvReport {
    buf: String,
}

impl CsvReport {
    pub fn new(header: &str) -> Self {
        Self { buf: format!("{header}\n") }
    }

    pub fn row(&mut self, fields: &[CsvField<'_>]) {
        let mut first = true;
        for f in fields {
            if !first {
                self.buf.push(',');
            }
            first = false;
            match f {
                CsvField::Str(s) => self.buf.push_str(s),
                CsvField::Int(i) => self.buf.push_str(&i.to_string()),
                CsvField::Num(x) => self.buf.push_str(&fmt_f64(*x)),
                CsvField::Empty => {}
            }
        }
        self.buf.push('\n');
    }

    pub fn finish(self) -> String {
        self.buf
    }
}

/// One CSV cell.
pub enum CsvField<'a> {
    Str(&'a str),
    Int(usize),
    Num(f64),
    Empty,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_json_round_trips_bitwise() {
        let params = pcv_core::synthetic::random_instance(7, 2, true).unwrap().params;
        let text = params_to_json(&params).unwrap();
        let file: ParamsFile = serde_json::from_str(&text).unwrap();
        let back = file.to_model().unwrap();
        assert_eq!(back.mu0, params.mu0);
        assert_eq!(back.sigma0, params.sigma0);
        assert_eq!(back.a, params.a);
        assert_eq!(back.sigma_uv, params.sigma_uv);
        assert_eq!(params_to_json(&back).unwrap(), text);
    }

    #[test]
    fn csv_report_formats_numbers_round_trip_safe() {
        let mut rep = CsvReport::new("t,x");
        let x = 0.1 + 0.2;
        rep.row(&[CsvField::Int(1), CsvField::Num(x)]);
        let text = rep.finish();
        let cell = text.lines().nth(1).unwrap().split(',').nth(1).unwrap();
        assert_eq!(cell.parse::<f64>().unwrap().to_bits(), x.to_bits());
    }
}
