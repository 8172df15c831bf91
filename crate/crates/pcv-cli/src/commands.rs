//! The subcommand implementations. Each loads its inputs per the merged
//! [`RunConfig`], delegates to the library, and writes a CSV or JSON report
//! to `--out` (or stdout). Returns the process exit code.

use anyhow::{bail, Context, Result};
use nalgebra::DVector;

use pcv_core::em::{self, em_run, EmOptions};
use pcv_core::hedging::{strategy_path, ClaimSpec};
use pcv_core::kalman::{self, StateBelief};
use pcv_core::model::{validate_model, DividendConvention, ModelParameters, PanelData};
use pcv_core::pricing::{self, InsuranceSpec, PricingModel, ValuationPoint};
use pcv_core::stacked::{real_stacked, risk_neutral_system, MeasureSpec};
use pcv_core::verify;
use pcv_core::{mc, SimConfig};

use crate::config::{product_to_str, ClaimChoice, MeasureChoice, RunConfig};
use crate::io::{
    load_dataset, params_to_json, read_lifetable, read_params, CsvField, CsvReport, Dataset,
    ReportSink,
};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn require_params(cfg: &RunConfig) -> Result<ModelParameters<f64>> {
    let path = cfg
        .params
        .as_deref()
        .context("no parameter file configured (--params, as written by `pcv estimate`)")?;
    read_params(std::path::Path::new(path))
}

fn check_model(
    params: &ModelParameters<f64>,
    data: &PanelData<f64>,
    convention: DividendConvention,
) -> Result<()> {
    let report = validate_model(params, data, convention);
    for issue in report.issues.iter().filter(|i| !i.fatal) {
        log::warn!("model check `{}`: {}", issue.check, issue.detail);
    }
    if !report.passed() {
        let fatal: Vec<String> = report
            .issues
            .iter()
            .filter(|i| i.fatal)
            .map(|i| format!("{}: {}", i.check, i.detail))
            .collect();
        bail!("model validation failed: {}", fatal.join("; "));
    }
    Ok(())
}

/// Valuation date (defaults to the end of the panel) and the filtered belief
/// there; `t = 0` uses the prior.
fn point_at(
    cfg: &RunConfig,
    params: &ModelParameters<f64>,
    data: &PanelData<f64>,
) -> Result<(usize, ValuationPoint<f64>)> {
    let t_obs = data.t_obs();
    let t = cfg.t.unwrap_or(t_obs);
    if t > t_obs {
        bail!("valuation date t={t} lies past the panel horizon T={t_obs}");
    }
    let belief = if t == 0 {
        StateBelief::prior(params)
    } else {
        let filter = kalman::filter(params, data, cfg.convention)?;
        filter.belief(t).clone()
    };
    let point = ValuationPoint::from_belief(data, belief)?;
    Ok((t, point))
}

fn claim_maturity(cfg: &RunConfig) -> Result<usize> {
    cfg.maturity
        .context("no claim maturity configured (--maturity)")
}

/// Per-company vector from a config list: a single value broadcasts, an
/// n-vector is taken verbatim.
fn company_vector(values: &[f64], n: usize, key: &str) -> Result<DVector<f64>> {
    match values.len() {
        1 => Ok(DVector::from_element(n, values[0])),
        len if len == n => Ok(DVector::from_vec(values.to_vec())),
        0 => bail!("`{key}` is required (one value, or one per company)"),
        len => bail!("`{key}` has {len} values, expected 1 or {n}"),
    }
}

fn insurance_spec(cfg: &RunConfig, n: usize) -> Result<InsuranceSpec<f64>> {
    let product = cfg
        .claim
        .product()
        .with_context(|| format!("claim `{}` is not an insurance product", cfg.claim))?;
    let maturity = claim_maturity(cfg)?;
    let fund_units = company_vector(&cfg.fund_units, n, "fund_units")?;
    let guarantees = company_vector(&cfg.guarantees, n, "guarantees")?;
    Ok(InsuranceSpec::constant(
        product,
        cfg.age,
        maturity,
        fund_units,
        guarantees,
    ))
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

/// Moment-matching starting point for the EM iteration when no parameter
/// file is supplied: VAR block from the macro sample moments, observation
/// variances from the panel, diffuse state prior.
fn default_start(data: &PanelData<f64>, p: usize) -> ModelParameters<f64> {
    let t_obs = data.t_obs();
    let n = data.b0.nrows();
    let ell = data.z[0].nrows();
    let l = data.exog.psi[0].nrows();
    let tf = t_obs as f64;

    let mut psi_bar = DVector::zeros(l);
    for psi in &data.exog.psi {
        psi_bar += psi;
    }
    psi_bar /= tf;
    let psi_norm = psi_bar.dot(&psi_bar).max(1e-12);

    let mut z_bar = DVector::zeros(ell);
    for z in &data.z {
        z_bar += z;
    }
    z_bar /= tf;
    let c_z = &z_bar * psi_bar.transpose() / psi_norm;

    let mut z_var = DVector::from_element(ell, 1e-8);
    for z in &data.z {
        let d = z - &z_bar;
        for i in 0..ell {
            z_var[i] += d[i] * d[i] / tf;
        }
    }

    let mut b_bar = DVector::zeros(n);
    for b in &data.b_tilde {
        b_bar += b;
    }
    b_bar /= tf;
    let mut b_var = DVector::from_element(n, 1e-8);
    for b in &data.b_tilde {
        let d = b - &b_bar;
        for i in 0..n {
            b_var[i] += d[i] * d[i] / tf;
        }
    }

    let any_payer = data.exog.pays.iter().flatten().any(|&p| p);
    let c_k = if any_payer {
        // Start the payout-ratio intercept so that C_k ψ̄ ≈ 0.05, inside the
        // linearization domain for payers.
        DVector::from_element(n, 0.05) * psi_bar.transpose() / psi_norm
    } else {
        nalgebra::DMatrix::zeros(n, l)
    };

    ModelParameters {
        mu0: DVector::zeros(n),
        sigma0: nalgebra::DMatrix::identity(n, n) * 0.25,
        c_k,
        c_m: nalgebra::DMatrix::zeros(n, l),
        c_z,
        a: nalgebra::DMatrix::zeros(ell, ell * p),
        sigma_uu: nalgebra::DMatrix::from_diagonal(&b_var),
        sigma_uv: nalgebra::DMatrix::zeros(n, ell),
        sigma_vv: nalgebra::DMatrix::from_diagonal(&z_var),
        sigma_ww: nalgebra::DMatrix::from_diagonal(&(b_var * 0.25)),
    }
}

pub fn cmd_estimate(cfg: &RunConfig) -> Result<i32> {
    let dataset = load_dataset(cfg)?;
    let start = match cfg.params.as_deref() {
        Some(path) => read_params(std::path::Path::new(path))?,
        None => default_start(&dataset.data, cfg.p),
    };
    check_model(&start, &dataset.data, cfg.convention)?;
    let opts = EmOptions {
        tol: cfg.tol,
        max_iter: cfg.max_iter,
        ll_decrease_abort: 1e-6,
        update_initial: cfg.update_initial,
    };
    let (est, trace) = em_run(&start, &dataset.data, cfg.convention, &opts)?;
    let final_ll = kalman::loglik(&est, &dataset.data, cfg.convention)?;

    let sink = ReportSink::from_config(cfg)?;
    sink.write("params.json", &params_to_json(&est)?)?;
    if let ReportSink::Dir(_) = sink {
        let mut rep = CsvReport::new("iter,loglik,max_param_delta,projected,damped");
        for it in &trace.iterations {
            rep.row(&[
                CsvField::Int(it.iter),
                CsvField::Num(it.loglik),
                CsvField::Num(it.max_param_delta),
                CsvField::Str(if it.projected { "true" } else { "false" }),
                CsvField::Str(if it.damped { "true" } else { "false" }),
            ]);
        }
        sink.write("estimate_trace.csv", &rep.finish())?;
    }
    eprintln!(
        "estimate: {} iterations, converged={}, loglik={}",
        trace.iterations.len(),
        trace.converged,
        crate::config::fmt_f64(final_ll),
    );
    if trace.aborted_decrease || trace.stalled {
        bail!(
            "estimation stopped without a usable fixed point (aborted_decrease={}, stalled={})",
            trace.aborted_decrease,
            trace.stalled
        );
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// smooth / value / forecast
// ---------------------------------------------------------------------------

pub fn cmd_smooth(cfg: &RunConfig) -> Result<i32> {
    let dataset = load_dataset(cfg)?;
    let params = require_params(cfg)?;
    check_model(&params, &dataset.data, cfg.convention)?;
    let smoother = kalman::smooth(&params, &dataset.data, cfg.convention)?;
    let n = dataset.data.b0.nrows();
    let mut rep = CsvReport::new("t,company,m_tilde,sd");
    for t in 0..=dataset.data.t_obs() {
        let belief = smoother.belief(t);
        for i in 0..n {
            rep.row(&[
                CsvField::Int(t),
                CsvField::Int(i + 1),
                CsvField::Num(belief.mean[i]),
                CsvField::Num(belief.cov[(i, i)].max(0.0).sqrt()),
            ]);
        }
    }
    let sink = ReportSink::from_config(cfg)?;
    sink.write("smoothed.csv", &rep.finish())?;
    eprintln!(
        "smooth: loglik={}",
        crate::config::fmt_f64(smoother.filter.loglik)
    );
    Ok(0)
}

pub fn cmd_value(cfg: &RunConfig) -> Result<i32> {
    let dataset = load_dataset(cfg)?;
    let params = require_params(cfg)?;
    check_model(&params, &dataset.data, cfg.convention)?;
    let smoother = kalman::smooth(&params, &dataset.data, cfg.convention)?;
    let values = em::smoothed_value(&dataset.data, &smoother);
    let n = dataset.data.b0.nrows();
    let mut rep = CsvReport::new("t,company,value");
    for (t, v) in values.iter().enumerate() {
        for i in 0..n {
            rep.row(&[CsvField::Int(t), CsvField::Int(i + 1), CsvField::Num(v[i])]);
        }
    }
    let sink = ReportSink::from_config(cfg)?;
    sink.write("value.csv", &rep.finish())?;
    Ok(0)
}

pub fn cmd_forecast(cfg: &RunConfig) -> Result<i32> {
    let dataset = load_dataset(cfg)?;
    let params = require_params(cfg)?;
    check_model(&params, &dataset.data, cfg.convention)?;
    let horizon = cfg.horizon.context("no forecast horizon configured (--horizon)")?;
    if horizon == 0 {
        bail!("forecast horizon must be at least one period");
    }
    let t_obs = dataset.data.t_obs();
    let exog_ext = dataset.exog_through(t_obs + horizon)?;
    let out = kalman::forecast(&params, &dataset.data, &exog_ext, cfg.convention, horizon)?;
    let n = dataset.data.b0.nrows();
    let ell = dataset.data.z[0].nrows();
    let mut rep = CsvReport::new("t,series,mean,sd");
    for (idx, s) in (t_obs + 1..=t_obs + horizon).enumerate() {
        let mean = &out.y_mean[idx];
        let cov = &out.y_cov[idx];
        for i in 0..n {
            let name = format!("b_tilde_{}", i + 1);
            rep.row(&[
                CsvField::Int(s),
                CsvField::Str(&name),
                CsvField::Num(mean[i]),
                CsvField::Num(cov[(i, i)].max(0.0).sqrt()),
            ]);
        }
        for j in 0..ell {
            let name = format!("z_{}", j + 1);
            rep.row(&[
                CsvField::Int(s),
                CsvField::Str(&name),
                CsvField::Num(mean[n + j]),
                CsvField::Num(cov[(n + j, n + j)].max(0.0).sqrt()),
            ]);
        }
    }
    let sink = ReportSink::from_config(cfg)?;
    sink.write("forecast.csv", &rep.finish())?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// price-option / price-insurance
// ---------------------------------------------------------------------------

pub fn cmd_price_option(cfg: &RunConfig) -> Result<i32> {
    let dataset = load_dataset(cfg)?;
    let params = require_params(cfg)?;
    check_model(&params, &dataset.data, cfg.convention)?;
    let maturity = claim_maturity(cfg)?;
    if cfg.strike.is_empty() {
        bail!("no strikes configured (--strike)");
    }
    let (t, point) = point_at(cfg, &params, &dataset.data)?;
    if maturity <= t {
        bail!("option maturity {maturity} must lie past the valuation date t={t}");
    }
    let exog_ext = dataset.exog_through(maturity)?;
    let model = PricingModel::new(&params, &exog_ext, cfg.convention, point, maturity)?;
    let n = dataset.data.b0.nrows();
    let mut rep = CsvReport::new("t,maturity,company,strike,call,put,bond,forward,degenerate");
    for &k in &cfg.strike {
        if !(k > 0.0) {
            bail!("strikes must be positive, got {k}");
        }
        let strike = DVector::from_element(n, k);
        let quote = model.option_quote(&strike, maturity)?;
        for i in 0..n {
            let forward = (quote.dist.mean[i] + 0.5 * quote.dist.cov[(i, i)]).exp();
            rep.row(&[
                CsvField::Int(t),
                CsvField::Int(maturity),
                CsvField::Int(i + 1),
                CsvField::Num(k),
                CsvField::Num(quote.call[i]),
                CsvField::Num(quote.put[i]),
                CsvField::Num(quote.bond),
                CsvField::Num(forward),
                CsvField::Str(if quote.degenerate[i] { "true" } else { "false" }),
            ]);
        }
    }
    let sink = ReportSink::from_config(cfg)?;
    sink.write("options.csv", &rep.finish())?;
    Ok(0)
}

pub fn cmd_price_insurance(cfg: &RunConfig) -> Result<i32> {
    let dataset = load_dataset(cfg)?;
    let params = require_params(cfg)?;
    check_model(&params, &dataset.data, cfg.convention)?;
    let table_path = cfg
        .lifetable
        .as_deref()
        .context("no life table configured (--lifetable)")?;
    let table = read_lifetable(std::path::Path::new(table_path))?;
    let n = dataset.data.b0.nrows();
    let spec = insurance_spec(cfg, n)?;
    let (t, point) = point_at(cfg, &params, &dataset.data)?;
    if spec.maturity <= t {
        bail!(
            "contract maturity {} must lie past the valuation date t={t}",
            spec.maturity
        );
    }
    let exog_ext = dataset.exog_through(spec.maturity)?;
    let model = PricingModel::new(&params, &exog_ext, cfg.convention, point, spec.maturity)?;
    let premium = model.insurance_premium(&spec, &table)?;
    let mut rep = CsvReport::new("t,maturity,product,age,company,premium");
    let product = product_to_str(spec.product);
    for i in 0..n {
        rep.row(&[
            CsvField::Int(t),
            CsvField::Int(spec.maturity),
            CsvField::Str(product),
            CsvField::Int(cfg.age as usize),
            CsvField::Int(i + 1),
            CsvField::Num(premium[i]),
        ]);
    }
    let sink = ReportSink::from_config(cfg)?;
    sink.write("insurance.csv", &rep.finish())?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// hedge
// ---------------------------------------------------------------------------

pub fn cmd_hedge(cfg: &RunConfig) -> Result<i32> {
    let dataset = load_dataset(cfg)?;
    let params = require_params(cfg)?;
    check_model(&params, &dataset.data, cfg.convention)?;
    let n = dataset.data.b0.nrows();
    if cfg.company == 0 || cfg.company > n {
        bail!(
            "`company` selects the hedged claim component, 1..={n} (got {})",
            cfg.company
        );
    }
    let component = cfg.company - 1;
    let t_start = cfg.t.unwrap_or(0);

    let (claim, table) = match cfg.claim {
        ClaimChoice::Call | ClaimChoice::Put => {
            let maturity = claim_maturity(cfg)?;
            let strike = company_vector(&cfg.strike, n, "strike")?;
            if strike.iter().any(|&k| !(k > 0.0)) {
                bail!("strikes must be positive");
            }
            let kind = cfg.claim.option_kind().expect("option claim");
            (ClaimSpec::Option { kind, strike, maturity }, None)
        }
        _ => {
            let spec = insurance_spec(cfg, n)?;
            let table_path = cfg
                .lifetable
                .as_deref()
                .context("insurance claims need a life table (--lifetable)")?;
            let table = read_lifetable(std::path::Path::new(table_path))?;
            (ClaimSpec::Insurance(spec), Some(table))
        }
    };

    let strat = strategy_path(
        &params,
        &dataset.data,
        cfg.convention,
        &claim,
        table.as_ref(),
        t_start,
        component,
    )?;

    let mut rep = CsvReport::new("t,company,h,h0,value");
    for j in 0..strat.value.len() {
        let date = strat.t_start + j;
        for i in 0..n {
            let h = strat.h.get(j).map(|hv| hv[i]);
            rep.row(&[
                CsvField::Int(date),
                CsvField::Int(i + 1),
                h.map_or(CsvField::Empty, CsvField::Num),
                CsvField::Num(strat.h0[j]),
                CsvField::Num(strat.value[j]),
            ]);
        }
    }
    let sink = ReportSink::from_config(cfg)?;
    sink.write("hedge.csv", &rep.finish())?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn cmd_simulate(cfg: &RunConfig) -> Result<i32> {
    let dataset = load_dataset(cfg)?;
    let params = require_params(cfg)?;
    check_model(&params, &dataset.data, cfg.convention)?;
    let horizon = cfg
        .horizon
        .context("no simulation horizon configured (--horizon)")?;
    if horizon == 0 {
        bail!("simulation horizon must be at least one period");
    }
    if cfg.paths == 0 {
        bail!("`paths` must be at least 1");
    }
    let (t_start, point) = point_at(cfg, &params, &dataset.data)?;
    let end = t_start + horizon;

    let (co, measure) = match cfg.measure {
        MeasureChoice::Real => {
            let exog_ext = dataset.exog_through(end)?;
            let real = pcv_core::model::real_system(&params, &exog_ext, cfg.convention)?;
            (real_stacked(&params, &real), MeasureSpec::Real)
        }
        MeasureChoice::RiskNeutral => {
            let exog_ext = dataset.exog_through(end)?;
            (
                risk_neutral_system(&params, &exog_ext, cfg.convention)?,
                MeasureSpec::RiskNeutral,
            )
        }
        MeasureChoice::Forward => {
            let u = cfg.maturity.context(
                "the forward measure needs the numeraire bond maturity (--maturity)",
            )?;
            if u <= t_start {
                bail!("numeraire maturity {u} must lie past the valuation date t={t_start}");
            }
            let reach = end.max(u);
            let exog_ext = dataset.exog_through(reach)?;
            let model =
                PricingModel::new(&params, &exog_ext, cfg.convention, point.clone(), reach)?;
            let shift = model.forward(u)?;
            (
                pricing::forward_system(&model.co, &shift),
                MeasureSpec::Forward { t: t_start, u },
            )
        }
    };

    let sim_cfg = SimConfig {
        measure,
        n_paths: cfg.paths,
        seed: cfg.seed,
        t_start,
        horizon,
        antithetic: cfg.antithetic,
    };
    let paths = mc::simulate(&sim_cfg, &co, &point)?;

    let n = dataset.data.b0.nrows();
    let dates = horizon + 1;
    let mut sum_lp = vec![0.0; dates * n];
    let mut sq_lp = vec![0.0; dates * n];
    let mut sum_p = vec![0.0; dates * n];
    let mut sum_d = vec![0.0; dates];
    for k in 0..paths.len() {
        let view = paths.view(k);
        for (s_idx, s) in (t_start..=end).enumerate() {
            for i in 0..n {
                let lp = view.log_price(s)[i];
                sum_lp[s_idx * n + i] += lp;
                sq_lp[s_idx * n + i] += lp * lp;
                sum_p[s_idx * n + i] += lp.exp();
            }
            sum_d[s_idx] += view.discount(s);
        }
    }
    let count = paths.len() as f64;
    let mut rep = CsvReport::new("t,company,mean_log_price,sd_log_price,mean_price,mean_discount");
    for (s_idx, s) in (t_start..=end).enumerate() {
        for i in 0..n {
            let mean = sum_lp[s_idx * n + i] / count;
            let var = (sq_lp[s_idx * n + i] / count - mean * mean).max(0.0);
            let sd = if count > 1.0 {
                (var * count / (count - 1.0)).sqrt()
            } else {
                0.0
            };
            rep.row(&[
                CsvField::Int(s),
                CsvField::Int(i + 1),
                CsvField::Num(mean),
                CsvField::Num(sd),
                CsvField::Num(sum_p[s_idx * n + i] / count),
                CsvField::Num(sum_d[s_idx] / count),
            ]);
        }
    }
    let sink = ReportSink::from_config(cfg)?;
    sink.write("simulate.csv", &rep.finish())?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

pub fn cmd_verify(cfg: &RunConfig) -> Result<i32> {
    let results = verify::run_all(cfg.seed);
    let report = verify::format_report(&results);
    for r in &results {
        eprintln!("criterion {:>2} finished in {:.1} s", r.id, r.elapsed.as_secs_f64());
    }
    print!("{report}");
    if let Some(dir) = cfg.out.as_deref() {
        let path = std::path::PathBuf::from(dir);
        std::fs::create_dir_all(&path)
            .with_context(|| format!("cannot create output directory {}", path.display()))?;
        let file = path.join("verify.txt");
        std::fs::write(&file, &report)
            .with_context(|| format!("cannot write {}", file.display()))?;
        eprintln!("wrote {}", file.display());
    }
    Ok(if verify::all_passed(&results) { 0 } else { 1 })
}
