//! End-to-end verification suite.
//!
//! Every closed form in the library is checked here against an independent
//! oracle — direct joint-Gaussian conditioning for the filter and smoother,
//! finite differences for the EM fixed point, quadrature for the benchmark
//! lognormal option, and seeded million-path simulation for the pricing and
//! hedging formulas. The suite is deterministic: the same seed produces a
//! byte-identical report, which the final criterion checks by running the
//! whole battery twice.
//!
//! [`run_all`] returns one [`CriterionResult`] per criterion and
//! [`format_report`] renders them one line each. Wall times are kept out of
//! the report (they are checked against the runtime budgets internally) so
//! that the rendered bytes carry only reproducible quantities.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::em::{em_run, q_function, EmOptions};
use crate::error::Result;
use crate::hedging::{lambda_bar, omega_bar, psi_minus, psi_plus, strategy, ClaimSpec, PsiArgs};
use crate::kalman::{self, StateBelief};
use crate::linalg;
use crate::mc::{estimate, simulate, SimConfig};
use crate::model::{
    real_system, uniform_pays, DividendConvention, ExogSeries, ModelDims, ModelParameters,
    PanelData,
};
use crate::pricing::{
    lognormal_call_put, InsuranceProduct, InsuranceSpec, LifeTable, OptionKind, PricingModel,
    ValuationPoint,
};
use crate::stacked::{cond_state_given_obs, real_stacked, risk_neutral_system, MeasureSpec};
use crate::synthetic::{self, Instance};

/// Master seed used when the caller does not supply one.
pub const DEFAULT_SEED: u64 = 20_260_814;

/// Paths per Monte-Carlo oracle.
pub const MC_PATHS: usize = 1_000_000;

/// Elementwise tolerance for the filter/smoother versus direct conditioning.
pub const COND_TOL: f64 = 1e-8;

/// Max-norm bound on the finite-difference Q-gradient at an EM fixed point.
pub const EM_GRAD_TOL: f64 = 1e-4;

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone)]
pub struct CriterionResult {
    /// Criterion number (1-based).
    pub id: usize,
    /// What the criterion checks.
    pub name: &'static str,
    /// Whether every check (including any runtime budget) held.
    pub passed: bool,
    /// Deterministic quantitative summary.
    pub details: String,
    /// Wall time; informational only, never part of the rendered report.
    pub elapsed: Duration,
}

/// Decorrelated per-criterion seed (SplitMix-style spread of the salt).
fn sub_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn seal(
    id: usize,
    name: &'static str,
    started: Instant,
    budget: Option<Duration>,
    body: Result<(bool, String)>,
) -> CriterionResult {
    let elapsed = started.elapsed();
    let (mut passed, mut details) = match body {
        Ok(pair) => pair,
        Err(e) => (false, format!("failed to evaluate: {e}")),
    };
    if let Some(limit) = budget {
        if elapsed > limit {
            passed = false;
            details.push_str(&format!(
                "; exceeded the {} s runtime budget",
                limit.as_secs()
            ));
        }
    }
    CriterionResult {
        id,
        name,
        passed,
        details,
        elapsed,
    }
}

/// A small random one-company problem for the simulation-based criteria.
/// Dividend-free problems keep the linearized return identity exact, which
/// the martingale and hedging criteria rely on; the option criteria use a
/// dividend-paying variant to exercise the full coefficient path.
fn small_instance(seed: u64, dividends: bool, t_obs: usize) -> Result<Instance<f64>> {
    let dims = ModelDims {
        n: 1,
        ell: 1,
        p: 1,
        l: 1,
        t_obs,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = synthetic::random_params(&mut rng, &dims);
    let exog = synthetic::random_exog(&mut rng, &dims, t_obs, dividends);
    let convention = if dividends {
        DividendConvention::MarketPrice
    } else {
        DividendConvention::BookValue
    };
    let data = synthetic::random_panel(&params, &exog, convention, rng.gen())?;
    Ok(Instance {
        params,
        exog,
        data,
        convention,
    })
}

// ---------------------------------------------------------------------------
// Criteria 1 and 2: filter and smoother against direct conditioning.
// ---------------------------------------------------------------------------

fn crit_conditioning(seed: u64) -> (CriterionResult, CriterionResult) {
    let started = Instant::now();
    let body = (|| -> Result<(f64, f64)> {
        let max = ModelDims {
            n: 2,
            ell: 2,
            p: 2,
            l: 2,
            t_obs: 6,
        };
        let mut dev_filter = 0f64;
        let mut dev_smoother = 0f64;
        for k in 0..100u64 {
            let inst: Instance<f64> =
                synthetic::random_instance(sub_seed(seed, 100 + k), &max, k % 2 == 0)?;
            let real = real_system(&inst.params, &inst.exog, inst.convention)?;
            let co = real_stacked(&inst.params, &real);
            let filter = kalman::filter(&inst.params, &inst.data, inst.convention)?;
            let smoother = kalman::smooth(&inst.params, &inst.data, inst.convention)?;
            let t_obs = inst.data.t_obs();
            for t in 1..=t_obs {
                let direct = cond_state_given_obs(&co, &inst.params, &inst.data, t, t)?;
                let belief = filter.belief(t);
                dev_filter = dev_filter
                    .max((&belief.mean - &direct.mean).amax())
                    .max(linalg::max_abs_diff(&belief.cov, &direct.cov));
            }
            for t in 0..=t_obs {
                let direct = cond_state_given_obs(&co, &inst.params, &inst.data, t, t_obs)?;
                let belief = smoother.belief(t);
                dev_smoother = dev_smoother
                    .max((&belief.mean - &direct.mean).amax())
                    .max(linalg::max_abs_diff(&belief.cov, &direct.cov));
            }
        }
        Ok((dev_filter, dev_smoother))
    })();
    match body {
        Ok((dev_filter, dev_smoother)) => {
            let first = seal(
                1,
                "filtering matches direct conditioning",
                started,
                Some(Duration::from_secs(10)),
                Ok((
                    dev_filter <= COND_TOL,
                    format!(
                        "max |filtered - conditioned| {dev_filter:.3e} over the moments of \
                         100 random instances (tolerance {COND_TOL:.1e})"
                    ),
                )),
            );
            let second = seal(
                2,
                "smoothing matches full-sample conditioning",
                started,
                None,
                Ok((
                    dev_smoother <= COND_TOL,
                    format!(
                        "max |smoothed - conditioned| {dev_smoother:.3e} at every date of \
                         the same instances (tolerance {COND_TOL:.1e})"
                    ),
                )),
            );
            (first, second)
        }
        Err(e) => {
            let msg = format!("failed to evaluate: {e}");
            (
                CriterionResult {
                    id: 1,
                    name: "filtering matches direct conditioning",
                    passed: false,
                    details: msg.clone(),
                    elapsed: started.elapsed(),
                },
                CriterionResult {
                    id: 2,
                    name: "smoothing matches full-sample conditioning",
                    passed: false,
                    details: msg,
                    elapsed: started.elapsed(),
                },
            )
        }
    }
}

// ---------------------------------------------------------------------------
// Criterion 3: EM monotonicity, stationarity, and recovery.
// ---------------------------------------------------------------------------

/// Data-generating parameters for the estimation study (one company, one
/// macro series, first-order dynamics). Chosen well inside the stationary
/// region with shock scales that keep the likelihood surface benign.
fn em_truth() -> ModelParameters<f64> {
    let m = |x: f64| DMatrix::from_element(1, 1, x);
    ModelParameters {
        mu0: DVector::from_element(1, -0.3),
        sigma0: m(0.09),
        c_k: m(0.05),
        c_m: m(0.002),
        c_z: m(0.1),
        a: m(0.5),
        sigma_uu: m(0.04),
        sigma_uv: m(0.006),
        sigma_vv: m(0.01),
        sigma_ww: m(0.0025),
    }
}

fn em_exog(t_obs: usize) -> ExogSeries<f64> {
    ExogSeries {
        psi: vec![DVector::from_element(1, 1.0); t_obs],
        delta_tilde: vec![DVector::from_element(1, -3.0); t_obs],
        pays: uniform_pays(t_obs, 1, false),
    }
}

/// Central-difference max-norm gradient of the Q-function over the blocks
/// the M-step updates (the initial condition is held fixed).
fn q_gradient_max(
    fixed: &ModelParameters<f64>,
    data: &PanelData<f64>,
    anchor: &kalman::SmootherOutput<f64>,
) -> Result<f64> {
    fn slot(p: &mut ModelParameters<f64>, i: usize) -> &mut f64 {
        match i {
            0 => &mut p.c_k[(0, 0)],
            1 => &mut p.c_m[(0, 0)],
            2 => &mut p.c_z[(0, 0)],
            3 => &mut p.a[(0, 0)],
            4 => &mut p.sigma_uu[(0, 0)],
            5 => &mut p.sigma_uv[(0, 0)],
            6 => &mut p.sigma_vv[(0, 0)],
            _ => &mut p.sigma_ww[(0, 0)],
        }
    }
    // The variance slots give Q third derivatives of order T/sigma^3, so a
    // plain central difference would drown the check in truncation error.
    // A five-point fourth-order stencil keeps both truncation and roundoff
    // a couple of orders below the acceptance tolerance.
    let mut worst = 0f64;
    for i in 0..8 {
        let x = *slot(&mut fixed.clone(), i);
        let h = 1e-4 * x.abs().max(1e-3);
        let at = |v: f64| -> Result<f64> {
            let mut p = fixed.clone();
            *slot(&mut p, i) = v;
            q_function(&p, data, DividendConvention::BookValue, anchor)
        };
        let q_up2 = at(x + 2.0 * h)?;
        let q_up1 = at(x + h)?;
        let q_dn1 = at(x - h)?;
        let q_dn2 = at(x - 2.0 * h)?;
        let grad = (-q_up2 + 8.0 * q_up1 - 8.0 * q_dn1 + q_dn2) / (12.0 * h);
        worst = worst.max(grad.abs());
    }
    Ok(worst)
}

fn crit_em(seed: u64) -> CriterionResult {
    let started = Instant::now();
    let body = (|| -> Result<(bool, String)> {
        let truth = em_truth();
        let exog = em_exog(300);
        // Part one: the likelihood must climb on every iteration and the
        // Q-gradient must vanish where the iteration stops.
        let mut monotone = true;
        let mut max_grad = 0f64;
        for k in 0..20u64 {
            let data =
                synthetic::random_panel(&truth, &exog, DividendConvention::BookValue, sub_seed(seed, 300 + k))?;
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 330 + k));
            let mut start = synthetic::perturb_params(&mut rng, &truth, 0.3);
            start.mu0 = truth.mu0.clone();
            start.sigma0 = truth.sigma0.clone();
            let opts = EmOptions {
                tol: 1e-11,
                max_iter: 4000,
                ll_decrease_abort: 1e-6,
                update_initial: false,
            };
            let (fixed, trace) = em_run(&start, &data, DividendConvention::BookValue, &opts)?;
            for w in trace.iterations.windows(2) {
                if w[1].loglik < w[0].loglik - 1e-8 * w[0].loglik.abs() {
                    monotone = false;
                }
            }
            let anchor = kalman::smooth(&fixed, &data, DividendConvention::BookValue)?;
            max_grad = max_grad.max(q_gradient_max(&fixed, &data, &anchor)?);
        }
        // Part two: across independent samples the estimates of the macro
        // block must recover the truth within three standard errors of
        // their seed average.
        let runs = 50usize;
        let mut est_a = Vec::with_capacity(runs);
        let mut est_cz = Vec::with_capacity(runs);
        let mut est_vv = Vec::with_capacity(runs);
        for k in 0..runs as u64 {
            let data =
                synthetic::random_panel(&truth, &exog, DividendConvention::BookValue, sub_seed(seed, 360 + k))?;
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 420 + k));
            let mut start = synthetic::perturb_params(&mut rng, &truth, 0.1);
            start.mu0 = truth.mu0.clone();
            start.sigma0 = truth.sigma0.clone();
            let opts = EmOptions {
                tol: 1e-9,
                max_iter: 2000,
                ll_decrease_abort: 1e-6,
                update_initial: false,
            };
            let (est, _) = em_run(&start, &data, DividendConvention::BookValue, &opts)?;
            est_a.push(est.a[(0, 0)]);
            est_cz.push(est.c_z[(0, 0)]);
            est_vv.push(est.sigma_vv[(0, 0)]);
        }
        let z_score = |xs: &[f64], truth: f64| -> f64 {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            (mean - truth) / (var / n).sqrt()
        };
        let z_a = z_score(&est_a, truth.a[(0, 0)]);
        let z_cz = z_score(&est_cz, truth.c_z[(0, 0)]);
        let z_vv = z_score(&est_vv, truth.sigma_vv[(0, 0)]);
        let recovered = z_a.abs() <= 3.0 && z_cz.abs() <= 3.0 && z_vv.abs() <= 3.0;
        let passed = monotone && max_grad <= EM_GRAD_TOL && recovered;
        Ok((
            passed,
            format!(
                "likelihood monotone on 20/20 runs: {monotone}; max |dQ| at the fixed points \
                 {max_grad:.3e} (tolerance {EM_GRAD_TOL:.1e}); recovery z-scores over {runs} \
                 seeds: VAR coefficient {z_a:.2}, macro intercept {z_cz:.2}, macro shock \
                 variance {z_vv:.2} (each within 3)"
            ),
        ))
    })();
    seal(
        3,
        "EM climbs, stops stationary, and recovers the macro block",
        started,
        Some(Duration::from_secs(300)),
        body,
    )
}

// ---------------------------------------------------------------------------
// Criteria 4 and 5: risk-neutral martingale property and bond prices.
// ---------------------------------------------------------------------------

fn crit_martingale_bond(seed: u64) -> (CriterionResult, CriterionResult) {
    let started = Instant::now();
    let body = (|| -> Result<((bool, String), (bool, String))> {
        // A dividend-free problem keeps the linearized return identity exact,
        // so the simulated cum-dividend return must earn the short rate with
        // no approximation gap.
        let inst = small_instance(sub_seed(seed, 45), false, 6)?;
        let co = risk_neutral_system(&inst.params, &inst.exog, inst.convention)?;
        let point = ValuationPoint::from_belief(&inst.data, StateBelief::prior(&inst.params))?;
        let cfg = SimConfig {
            measure: MeasureSpec::RiskNeutral,
            n_paths: MC_PATHS,
            seed: sub_seed(seed, 46),
            t_start: 0,
            horizon: 5,
            antithetic: true,
        };
        let paths = simulate(&cfg, &co, &point)?;

        let mut worst_ratio = 0f64;
        let mut worst_date = 1usize;
        for t in 1..=5usize {
            let (mean, se) = estimate(&paths, |v| {
                let m_star = v.m_star(t);
                let growth = m_star[0] - m_star[1] + v.b(t)[0];
                let rate = v.z_star(t - 1)[0];
                growth.exp() - rate.exp()
            });
            let ratio = mean.abs() / se;
            if ratio > worst_ratio {
                worst_ratio = ratio;
                worst_date = t;
            }
        }
        let martingale = (
            worst_ratio <= 3.0,
            format!(
                "mean excess of (P_t + d_t)/P_(t-1) over e^r is at worst {worst_ratio:.2} \
                 standard errors from zero (date t={worst_date}, {MC_PATHS} paths)"
            ),
        );

        let model = PricingModel::new(
            &inst.params,
            &inst.exog,
            inst.convention,
            point.clone(),
            5,
        )?;
        let one = model.bond(1)?;
        let exact = (-point.short_rate_next()).exp();
        let one_dev = (one - exact).abs() / exact;
        let three = model.bond(3)?;
        let (mc_mean, mc_se) = estimate(&paths, |v| v.discount(3));
        let three_ratio = (three - mc_mean).abs() / mc_se;
        let bond = (
            one_dev <= 1e-14 && three_ratio <= 3.0,
            format!(
                "one-period bond matches e^(-r) to relative {one_dev:.3e}; three-period bond \
                 is {three_ratio:.2} standard errors from the simulated discount factor"
            ),
        );
        Ok((martingale, bond))
    })();
    match body {
        Ok((martingale, bond)) => (
            seal(4, "simulated returns earn the short rate", started, None, Ok(martingale)),
            seal(5, "bond prices match the simulated discount factor", started, None, Ok(bond)),
        ),
        Err(e) => {
            let msg = format!("failed to evaluate: {e}");
            (
                CriterionResult {
                    id: 4,
                    name: "simulated returns earn the short rate",
                    passed: false,
                    details: msg.clone(),
                    elapsed: started.elapsed(),
                },
                CriterionResult {
                    id: 5,
                    name: "bond prices match the simulated discount factor",
                    passed: false,
                    details: msg,
                    elapsed: started.elapsed(),
                },
            )
        }
    }
}

// ---------------------------------------------------------------------------
// Criterion 6: option closed forms (context shared with criterion 9).
// ---------------------------------------------------------------------------

struct OptionContext {
    point: ValuationPoint<f64>,
    model: PricingModel<f64>,
    paths: crate::mc::PathSet<f64>,
    strike: f64,
    maturity: usize,
    put_price: f64,
}

fn crit_options(seed: u64) -> (CriterionResult, Option<OptionContext>) {
    let started = Instant::now();
    let body = (|| -> Result<((bool, String), OptionContext)> {
        let inst = small_instance(sub_seed(seed, 60), true, 6)?;
        let filter = kalman::filter(&inst.params, &inst.data, inst.convention)?;
        let point = ValuationPoint::from_belief(&inst.data, filter.belief(2).clone())?;
        let maturity = 5usize;
        let model = PricingModel::new(
            &inst.params,
            &inst.exog,
            inst.convention,
            point.clone(),
            maturity,
        )?;
        // An at-the-money strike keeps both legs well away from degeneracy.
        let strike = (inst.data.log_book(2)[0] + point.belief.mean[0]).exp();
        let quote = model.option_quote(&DVector::from_element(1, strike), maturity)?;

        let co = risk_neutral_system(&inst.params, &inst.exog, inst.convention)?;
        let cfg = SimConfig {
            measure: MeasureSpec::RiskNeutral,
            n_paths: MC_PATHS,
            seed: sub_seed(seed, 61),
            t_start: 2,
            horizon: maturity,
            antithetic: true,
        };
        let paths = simulate(&cfg, &co, &point)?;
        let d_t = point.discount;
        let (call_mc, call_se) = estimate(&paths, |v| {
            v.discount(maturity) / d_t * (v.price(maturity)[0] - strike).max(0.0)
        });
        let (put_mc, put_se) = estimate(&paths, |v| {
            v.discount(maturity) / d_t * (strike - v.price(maturity)[0]).max(0.0)
        });
        let call_ratio = (quote.call[0] - call_mc).abs() / call_se;
        let put_ratio = (quote.put[0] - put_mc).abs() / put_se;
        let forward = (quote.dist.mean[0] + 0.5 * quote.dist.cov[(0, 0)]).exp();
        let parity = (quote.call[0] - quote.put[0] - quote.bond * (forward - strike)).abs();
        let passed = call_ratio <= 3.0 && put_ratio <= 3.0 && parity <= 1e-12;
        let details = format!(
            "call within {call_ratio:.2} and put within {put_ratio:.2} standard errors of \
             {MC_PATHS} antithetic paths; put-call parity residual {parity:.3e} \
             (tolerance 1.0e-12)"
        );
        let ctx = OptionContext {
            point,
            model,
            paths,
            strike,
            maturity,
            put_price: quote.put[0],
        };
        Ok(((passed, details), ctx))
    })();
    match body {
        Ok((pair, ctx)) => (
            seal(
                6,
                "option closed forms match simulation and parity",
                started,
                Some(Duration::from_secs(60)),
                Ok(pair),
            ),
            Some(ctx),
        ),
        Err(e) => (
            CriterionResult {
                id: 6,
                name: "option closed forms match simulation and parity",
                passed: false,
                details: format!("failed to evaluate: {e}"),
                elapsed: started.elapsed(),
            },
            None,
        ),
    }
}

// ---------------------------------------------------------------------------
// Criterion 7: benchmark lognormal call against quadrature.
// ---------------------------------------------------------------------------

fn simpson<F: Fn(f64) -> f64>(lo: f64, hi: f64, intervals: usize, f: F) -> f64 {
    let n = intervals + intervals % 2;
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let weight = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += weight * f(lo + h * i as f64);
    }
    acc * h / 3.0
}

/// `E[(e^X - K)^+]` for `X ~ N(mu, var)` by Simpson quadrature on the payoff
/// region, truncated twelve standard deviations out.
fn quad_lognormal_call(mu: f64, var: f64, strike: f64) -> f64 {
    let sd = var.sqrt();
    let lo = strike.ln();
    let hi = (mu + 12.0 * sd).max(lo + sd);
    let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
    simpson(lo, hi, 40_000, |x| {
        let z = (x - mu) / sd;
        (x.exp() - strike) * norm * (-0.5 * z * z).exp()
    })
}

fn crit_lemma1() -> CriterionResult {
    let started = Instant::now();
    let body = (|| -> Result<(bool, String)> {
        let (call, _) = lognormal_call_put(0.0f64, 1.0, 1.0)?;
        let quad = quad_lognormal_call(0.0, 1.0, 1.0);
        let dev = (call - quad).abs();
        Ok((
            dev <= 1e-5,
            format!(
                "closed form {call:.15} vs quadrature {quad:.15}, difference {dev:.3e} \
                 (tolerance 1.0e-5)"
            ),
        ))
    })();
    seal(
        7,
        "benchmark lognormal call matches quadrature",
        started,
        None,
        body,
    )
}

// ---------------------------------------------------------------------------
// Criterion 8: rectangle functions against raw Gaussian simulation.
// ---------------------------------------------------------------------------

fn random_psi_args(rng: &mut ChaCha8Rng) -> PsiArgs<f64> {
    let sds = DVector::from_fn(4, |_, _| rng.gen_range(0.2..0.5));
    let joint = synthetic::random_cov(rng, &sds);
    PsiArgs {
        strike: DVector::from_fn(2, |_, _| rng.gen_range(0.7..1.4)),
        alpha1: DVector::from_fn(2, |_, _| rng.gen_range(0.6..1.6)),
        alpha2: DVector::from_fn(2, |_, _| rng.gen_range(0.6..1.6)),
        mu1: DVector::from_fn(2, |_, _| rng.gen_range(-0.3..0.3)),
        mu2: DVector::from_fn(2, |_, _| rng.gen_range(-0.3..0.3)),
        sigma11: joint.view((0, 0), (2, 2)).into_owned(),
        sigma12: joint.view((0, 2), (2, 2)).into_owned(),
        sigma22: joint.view((2, 2), (2, 2)).into_owned(),
    }
}

type PsiMc = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

/// Plain Monte-Carlo estimate of both rectangle matrices with entrywise
/// standard errors, drawn from the assembled four-dimensional Gaussian.
fn mc_psi(args: &PsiArgs<f64>, draws: usize, seed: u64) -> PsiMc {
    let mut joint = DMatrix::zeros(4, 4);
    joint.view_mut((0, 0), (2, 2)).copy_from(&args.sigma11);
    joint.view_mut((0, 2), (2, 2)).copy_from(&args.sigma12);
    joint
        .view_mut((2, 0), (2, 2))
        .copy_from(&args.sigma12.transpose());
    joint.view_mut((2, 2), (2, 2)).copy_from(&args.sigma22);
    let chol = linalg::chol_psd(&joint);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum_p = DMatrix::zeros(2, 2);
    let mut sq_p = DMatrix::zeros(2, 2);
    let mut sum_m = DMatrix::zeros(2, 2);
    let mut sq_m = DMatrix::zeros(2, 2);
    let mut z = DVector::zeros(4);
    for _ in 0..draws {
        for r in 0..4 {
            z[r] = rng.sample(StandardNormal);
        }
        let x = &chol * &z;
        let w = [
            args.alpha1[0] * (args.mu1[0] + x[0]).exp(),
            args.alpha1[1] * (args.mu1[1] + x[1]).exp(),
        ];
        for j in 0..2 {
            let level = (args.mu2[j] + x[2 + j]).exp();
            let up = args.alpha2[j] * (level - args.strike[j]).max(0.0);
            let down = args.alpha2[j] * (args.strike[j] - level).max(0.0);
            for i in 0..2 {
                let vp = w[i] * up;
                sum_p[(i, j)] += vp;
                sq_p[(i, j)] += vp * vp;
                let vm = w[i] * down;
                sum_m[(i, j)] += vm;
                sq_m[(i, j)] += vm * vm;
            }
        }
    }
    let n = draws as f64;
    let finish = |sum: DMatrix<f64>, sq: DMatrix<f64>| {
        let mean = sum / n;
        let se = DMatrix::from_fn(2, 2, |i, j| {
            ((sq[(i, j)] / n - mean[(i, j)] * mean[(i, j)]).max(0.0) / (n - 1.0)).sqrt()
        });
        (mean, se)
    };
    let (mean_p, se_p) = finish(sum_p, sq_p);
    let (mean_m, se_m) = finish(sum_m, sq_m);
    (mean_p, se_p, mean_m, se_m)
}

fn crit_lemma2(seed: u64) -> CriterionResult {
    let started = Instant::now();
    let body = (|| -> Result<(bool, String)> {
        let mut worst_ratio = 0f64;
        let mut worst_parity = 0f64;
        for setup in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 800 + setup));
            let args = random_psi_args(&mut rng);
            let plus = psi_plus(&args)?;
            let minus = psi_minus(&args)?;
            for i in 0..2 {
                let e1 = args.alpha1[i] * (args.mu1[i] + 0.5 * args.sigma11[(i, i)]).exp();
                for j in 0..2 {
                    let e2 = args.alpha2[j] * (args.mu2[j] + 0.5 * args.sigma22[(j, j)]).exp();
                    let forward = e1 * e2 * args.sigma12[(i, j)].exp();
                    let floor = e1 * args.alpha2[j] * args.strike[j];
                    let residual = plus[(i, j)] - minus[(i, j)] - (forward - floor);
                    worst_parity = worst_parity.max(residual.abs());
                }
            }
            let (mean_p, se_p, mean_m, se_m) = mc_psi(&args, MC_PATHS, sub_seed(seed, 840 + setup));
            for i in 0..2 {
                for j in 0..2 {
                    worst_ratio = worst_ratio
                        .max((plus[(i, j)] - mean_p[(i, j)]).abs() / se_p[(i, j)])
                        .max((minus[(i, j)] - mean_m[(i, j)]).abs() / se_m[(i, j)]);
                }
            }
        }
        Ok((
            worst_ratio <= 3.0 && worst_parity <= 1e-12,
            format!(
                "worst closed-form deviation {worst_ratio:.2} standard errors over 80 entries \
                 of 10 random setups ({MC_PATHS} draws each); max parity residual \
                 {worst_parity:.3e} (tolerance 1.0e-12)"
            ),
        ))
    })();
    seal(
        8,
        "rectangle functions match simulation and parity",
        started,
        None,
        body,
    )
}

// ---------------------------------------------------------------------------
// Criterion 9: insurance premiums (shares the option context).
// ---------------------------------------------------------------------------

fn crit_insurance(ctx: &OptionContext) -> CriterionResult {
    let started = Instant::now();
    let body = (|| -> Result<(bool, String)> {
        let t = ctx.point.t;
        let maturity = ctx.maturity;
        let age_at_contract = 58u32;
        let age_now = age_at_contract + t as u32;
        let ones = DVector::from_element(1, 1.0);
        let guarantee = DVector::from_element(1, ctx.strike);

        // With certain survival and one fund unit per company, the
        // segregated endowment is exactly the put struck at the guarantee.
        let certain = LifeTable::certain(age_now, 10);
        let unit_spec = InsuranceSpec::constant(
            InsuranceProduct::SegregatedEndowment,
            age_at_contract,
            maturity,
            ones,
            guarantee.clone(),
        );
        let unit_premium = ctx.model.insurance_premium(&unit_spec, &certain)?;
        let put_gap = (unit_premium[0] - ctx.put_price).abs();

        // With real mortality, the unit-linked and segregated endowments
        // differ by the survival-weighted fund value.
        let table = LifeTable::from_constant_hazard(age_now, 12, 0.02)?;
        let survival = table.survival(age_now, (maturity - t) as u32)?;
        let fund_units = DVector::from_element(1, 0.8);
        let seg_spec = InsuranceSpec::constant(
            InsuranceProduct::SegregatedEndowment,
            age_at_contract,
            maturity,
            fund_units.clone(),
            guarantee.clone(),
        );
        let ul_spec = InsuranceSpec::constant(
            InsuranceProduct::UnitLinkedEndowment,
            age_at_contract,
            maturity,
            fund_units.clone(),
            guarantee,
        );
        let seg = ctx.model.insurance_premium(&seg_spec, &table)?;
        let ul = ctx.model.insurance_premium(&ul_spec, &table)?;
        let gap = ul[0] - seg[0];
        let d_t = ctx.point.discount;
        let (fund_mc, fund_se) = estimate(&ctx.paths, |v| {
            v.discount(maturity) / d_t * v.price(maturity)[0]
        });
        let scale = survival * fund_units[0];
        let gap_ratio = (gap - scale * fund_mc).abs() / (scale * fund_se);
        Ok((
            put_gap <= 1e-12 && gap_ratio <= 3.0,
            format!(
                "certain-survival unit-fund endowment differs from the put by {put_gap:.3e} \
                 (tolerance 1.0e-12); unit-linked minus segregated premium is {gap_ratio:.2} \
                 standard errors from the survival-weighted simulated fund value"
            ),
        ))
    })();
    seal(
        9,
        "insurance premiums match the put identity and simulation",
        started,
        None,
        body,
    )
}

// ---------------------------------------------------------------------------
// Criterion 10: hedging blocks against simulated moments.
// ---------------------------------------------------------------------------

fn crit_hedging(seed: u64) -> CriterionResult {
    let started = Instant::now();
    let body = (|| -> Result<(bool, String)> {
        // Dividend-free one-company problem, valued mid-sample so the
        // accumulated discount exercises the scaling of every block.
        let inst = small_instance(sub_seed(seed, 90), false, 6)?;
        let filter = kalman::filter(&inst.params, &inst.data, inst.convention)?;
        let t = 1usize;
        let maturity = 4usize;
        let point = ValuationPoint::from_belief(&inst.data, filter.belief(t).clone())?;
        let model = PricingModel::new(
            &inst.params,
            &inst.exog,
            inst.convention,
            point.clone(),
            maturity,
        )?;
        let strike = (inst.data.log_book(t)[0] + point.belief.mean[0]).exp();
        let strike_vec = DVector::from_element(1, strike);

        let call = ClaimSpec::Option {
            kind: OptionKind::Call,
            strike: strike_vec.clone(),
            maturity,
        };
        let put = ClaimSpec::Option {
            kind: OptionKind::Put,
            strike: strike_vec,
            maturity,
        };
        let age_at_contract = 59u32;
        let age_now = age_at_contract + t as u32;
        let table = LifeTable::from_constant_hazard(age_now, 12, 0.03)?;
        let fund_units = 0.8f64;
        let guarantee = 0.85 * strike;
        let endow = ClaimSpec::Insurance(InsuranceSpec::constant(
            InsuranceProduct::UnitLinkedEndowment,
            age_at_contract,
            maturity,
            DVector::from_element(1, fund_units),
            DVector::from_element(1, guarantee),
        ));
        let lam_call = lambda_bar(&model, &call, None)?[(0, 0)];
        let lam_put = lambda_bar(&model, &put, None)?[(0, 0)];
        let lam_endow = lambda_bar(&model, &endow, Some(&table))?[(0, 0)];
        let omega = omega_bar(&model)[(0, 0)];

        let co = risk_neutral_system(&inst.params, &inst.exog, inst.convention)?;
        let cfg = SimConfig {
            measure: MeasureSpec::RiskNeutral,
            n_paths: MC_PATHS,
            seed: sub_seed(seed, 91),
            t_start: t,
            horizon: maturity,
            antithetic: false,
        };
        let paths = simulate(&cfg, &co, &point)?;
        let gain = |v: &crate::mc::PathView<'_, f64>| {
            v.discount(t + 1) * v.price(t + 1)[0] - v.discount(t) * v.price(t)[0]
        };
        let (omega_mc, omega_se) = estimate(&paths, |v| {
            let a = gain(&v);
            a * a
        });
        let (call_mc, call_se) = estimate(&paths, |v| {
            gain(&v) * v.discount(maturity) * (v.price(maturity)[0] - strike).max(0.0)
        });
        let (put_mc, put_se) = estimate(&paths, |v| {
            gain(&v) * v.discount(maturity) * (strike - v.price(maturity)[0]).max(0.0)
        });
        let survival = table.survival(age_now, (maturity - t) as u32)?;
        let (endow_mc, endow_se) = estimate(&paths, |v| {
            let benefit = guarantee + (fund_units * v.price(maturity)[0] - guarantee).max(0.0);
            gain(&v) * survival * v.discount(maturity) * benefit
        });
        let omega_ratio = (omega - omega_mc).abs() / omega_se;
        let call_ratio = (lam_call - call_mc).abs() / call_se;
        let put_ratio = (lam_put - put_mc).abs() / put_se;
        let endow_ratio = (lam_endow - endow_mc).abs() / endow_se;

        // Without return risk the gain covariances vanish and the strategy
        // must be exactly zero.
        let mut calm = inst.params.clone();
        calm.sigma_uu[(0, 0)] = 0.0;
        calm.sigma_uv[(0, 0)] = 0.0;
        let calm_model = PricingModel::new(
            &calm,
            &inst.exog,
            inst.convention,
            point.clone(),
            maturity,
        )?;
        let step = strategy(
            &calm_model,
            &ClaimSpec::Option {
                kind: OptionKind::Put,
                strike: DVector::from_element(1, strike),
                maturity,
            },
            None,
        )?;
        let exact_zero =
            step.lambda_bar.iter().all(|&x| x == 0.0) && step.h.iter().all(|&x| x == 0.0);

        let passed = omega_ratio <= 3.0
            && call_ratio <= 3.0
            && put_ratio <= 3.0
            && endow_ratio <= 3.0
            && exact_zero;
        Ok((
            passed,
            format!(
                "gain second moment within {omega_ratio:.2} standard errors; gain-payoff \
                 covariances within {call_ratio:.2} (call), {put_ratio:.2} (put), \
                 {endow_ratio:.2} (endowment) standard errors of {MC_PATHS} two-stage paths; \
                 riskless-return claim hedges exactly zero: {exact_zero}"
            ),
        ))
    })();
    seal(
        10,
        "hedging blocks match simulated moments",
        started,
        None,
        body,
    )
}

// ---------------------------------------------------------------------------
// Assembly.
// ---------------------------------------------------------------------------

/// Run criteria 1–10 once.
pub fn run_core(seed: u64) -> Vec<CriterionResult> {
    let mut out = Vec::with_capacity(11);
    let (c1, c2) = crit_conditioning(seed);
    out.push(c1);
    out.push(c2);
    out.push(crit_em(seed));
    let (c4, c5) = crit_martingale_bond(seed);
    out.push(c4);
    out.push(c5);
    let (c6, ctx) = crit_options(seed);
    out.push(c6);
    out.push(crit_lemma1());
    out.push(crit_lemma2(seed));
    match &ctx {
        Some(ctx) => out.push(crit_insurance(ctx)),
        None => out.push(CriterionResult {
            id: 9,
            name: "insurance premiums match the put identity and simulation",
            passed: false,
            details: "skipped: the option context failed to build".into(),
            elapsed: Duration::ZERO,
        }),
    }
    drop(ctx);
    out.push(crit_hedging(seed));
    out
}

/// Run the full battery: criteria 1–10 twice, with the second pass feeding
/// the determinism criterion (the two rendered reports must be
/// byte-identical).
pub fn run_all(seed: u64) -> Vec<CriterionResult> {
    let mut results = run_core(seed);
    let started = Instant::now();
    let second = run_core(seed);
    let first_report = format_report(&results);
    let second_report = format_report(&second);
    let identical = first_report == second_report;
    let details = if identical {
        format!(
            "two full passes with seed {seed} rendered byte-identical {}-byte reports",
            first_report.len()
        )
    } else {
        format!("two full passes with seed {seed} rendered different reports")
    };
    results.push(CriterionResult {
        id: 11,
        name: "verification runs are deterministic",
        passed: identical,
        details,
        elapsed: started.elapsed(),
    });
    results
}

/// Whether every criterion passed.
pub fn all_passed(results: &[CriterionResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// One line per criterion plus a summary line; deterministic for a given
/// set of results (wall times are deliberately excluded).
pub fn format_report(results: &[CriterionResult]) -> String {
    let mut out = String::new();
    for r in results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!(
            "criterion {:>2} {verdict} {}: {}\n",
            r.id, r.name, r.details
        ));
    }
    let passed = results.iter().filter(|r| r.passed).count();
    out.push_str(&format!(
        "overall {passed}/{} criteria passed\n",
        results.len()
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_reproduces_the_benchmark_call_value() {
        let quad = quad_lognormal_call(0.0, 1.0, 1.0);
        assert!(
            (quad - 0.887142978835005).abs() < 1e-9,
            "quadrature value {quad}"
        );
    }

    #[test]
    fn rectangle_simulation_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let args = random_psi_args(&mut rng);
        let a = mc_psi(&args, 2_000, 7);
        let b = mc_psi(&args, 2_000, 7);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = mc_psi(&args, 2_000, 8);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn rectangle_simulation_brackets_the_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let args = random_psi_args(&mut rng);
        let plus = psi_plus(&args).unwrap();
        let (mean_p, se_p, _, _) = mc_psi(&args, 200_000, 11);
        for i in 0..2 {
            for j in 0..2 {
                let dev = (plus[(i, j)] - mean_p[(i, j)]).abs();
                assert!(
                    dev <= 4.0 * se_p[(i, j)],
                    "entry ({i},{j}): dev {dev}, se {}",
                    se_p[(i, j)]
                );
            }
        }
    }

    #[test]
    fn sub_seeds_spread_and_reports_render_stably() {
        assert_ne!(sub_seed(1, 2), sub_seed(1, 3));
        assert_ne!(sub_seed(1, 2), sub_seed(2, 2));
        let results = vec![CriterionResult {
            id: 1,
            name: "sample",
            passed: true,
            details: "ok".into(),
            elapsed: Duration::from_millis(12),
        }];
        let report = format_report(&results);
        assert_eq!(report, "criterion  1 PASS sample: ok\noverall 1/1 criteria passed\n");
        assert!(all_passed(&results));
    }
}
