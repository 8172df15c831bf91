//! Locally risk-minimizing hedging strategies for options and equity-linked
//! insurance.
//!
//! In this incomplete market the one-period hedgeable gain is
//! `ΔP̄_{t+1} + d̄_{t+1}` (discounted cum-dividend price increments), a
//! martingale difference under the pricing measure. The locally
//! risk-minimizing share holdings solve the one-step least-squares problem
//!
//! ```text
//! h_{t+1} = Ω̄_{t+1}⁻¹ Λ̄_{t+1},
//! Ω̄_{t+1} = Ẽ[(ΔP̄_{t+1}+d̄_{t+1})(ΔP̄_{t+1}+d̄_{t+1})' | ℱ_t],
//! Λ̄_{t+1} = Cov~[ΔP̄_{t+1}+d̄_{t+1}, H̄ | ℱ_t],
//! ```
//!
//! with the cash account absorbing the remainder:
//! `h⁰_{t+1} = V_{t+1} − h_{t+1}'(P_{t+1}+d_{t+1})`.
//!
//! Both conditional moments are available in closed form. `Ω̄` is a
//! lognormal second moment of the time-`t` price belief ([`omega_bar`]).
//! `Λ̄` couples the one-period gain with the claim payoff through the joint
//! Gaussian law of `π_t = m̃_t + â + û_{t+1}` (the log gain driver) and the
//! terminal log price; the expectation factorizes into the rectangle
//! functions `Ψ±` of [`psi_plus`]/[`psi_minus`], evaluated under the same
//! per-date forward measures the premiums use ([`lambda_bar`]). Mortality
//! enters multiplicatively, exactly as in the premiums.
//!
//! The closed forms are cross-checked against two-stage Monte Carlo
//! conditional covariances in the acceptance suite; the unit tests below
//! cover the deterministic structure (parity, cancellations, scaling, and
//! quadrature oracles for `Ψ±`).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::pricing::{
    forward_shift, insurance_strikes, terminal_log_price_dist, InsuranceProduct, InsuranceSpec,
    LifeTable, OptionKind, PricingModel,
};
use crate::scalar::{cst, Scalar};
use crate::stacked::{risk_neutral_system, sel_x, Propagators};

/// Relative eigenvalue cutoff for the `Ω̄` pseudo-inverse in
/// [`strategy`]. Directions of the gain with (numerically) no variance
/// cannot be hedged and are dropped with a warning.
pub const OMEGA_PINV_CUTOFF: f64 = 1e-12;

/// Inputs of the rectangle functions `Ψ±`: fixed weights `α₁, α₂`, strike
/// levels `L > 0`, and the joint Gaussian law of `(X₁, X₂)`.
#[derive(Debug, Clone)]
pub struct PsiArgs<S: Scalar> {
    /// Strike levels `L` (componentwise positive, n₂).
    pub strike: DVector<S>,
    /// Row weights `α₁` (n₁).
    pub alpha1: DVector<S>,
    /// Column weights `α₂` (n₂).
    pub alpha2: DVector<S>,
    /// Mean of `X₁`.
    pub mu1: DVector<S>,
    /// Mean of `X₂`.
    pub mu2: DVector<S>,
    /// Covariance of `X₁` (only its diagonal enters).
    pub sigma11: DMatrix<S>,
    /// Cross covariance `Cov[X₁, X₂]` (n₁×n₂).
    pub sigma12: DMatrix<S>,
    /// Covariance of `X₂` (its diagonal must be positive).
    pub sigma22: DMatrix<S>,
}

impl<S: Scalar> PsiArgs<S> {
    fn validate(&self) -> Result<(usize, usize)> {
        let n1 = self.alpha1.nrows();
        let n2 = self.alpha2.nrows();
        if self.mu1.nrows() != n1
            || self.mu2.nrows() != n2
            || self.strike.nrows() != n2
            || self.sigma11.shape() != (n1, n1)
            || self.sigma12.shape() != (n1, n2)
            || self.sigma22.shape() != (n2, n2)
        {
            return Err(Error::dim(
                "rectangle-function inputs do not share consistent dimensions",
            ));
        }
        for j in 0..n2 {
            if self.strike[j] <= S::zero() {
                return Err(Error::invalid(format!(
                    "rectangle-function strike {} at component {j} must be positive",
                    self.strike[j].to_f64_c()
                )));
            }
            if self.sigma22[(j, j)] <= S::zero() {
                return Err(Error::DegenerateVariance(format!(
                    "rectangle-function payoff variance {} at component {j} must be positive",
                    self.sigma22[(j, j)].to_f64_c()
                )));
            }
        }
        Ok((n1, n2))
    }
}

/// Both rectangle matrices in one pass:
///
/// ```text
/// Ψ⁺ = E[(α₁⊙e^{X₁})(α₂⊙(e^{X₂}−L)⁺)'],   Ψ⁻ = E[(α₁⊙e^{X₁})(α₂⊙(L−e^{X₂})⁺)'],
/// ```
///
/// whose `(i,j)` entries are Black–Scholes-like expressions tilted by the
/// cross covariance: with `E[e^X] = e^{μ+𝒟[Σ]/2}`, `d₁ = (μ₂+𝒟[Σ₂₂]−ln L)⊘σ₂`,
/// `d₂ = d₁−σ₂`, and `c = Σ₁₂⊘(i σ₂')`,
///
/// ```text
/// Ψ⁺_ij = (α₁E[e^{X₁}])_i (α₂E[e^{X₂}])_j e^{Σ₁₂,ij} Φ(d₁j+c_ij)
///       − (α₁E[e^{X₁}])_i (α₂L)_j Φ(d₂j+c_ij),
/// Ψ⁻_ij = (α₁E[e^{X₁}])_i (α₂L)_j Φ(−d₂j−c_ij)
///       − (α₁E[e^{X₁}])_i (α₂E[e^{X₂}])_j e^{Σ₁₂,ij} Φ(−d₁j−c_ij).
/// ```
fn psi_both<S: Scalar>(args: &PsiArgs<S>) -> Result<(DMatrix<S>, DMatrix<S>)> {
    let (n1, n2) = args.validate()?;
    let half = cst::<S>(0.5);
    let mut e1 = DVector::zeros(n1);
    for i in 0..n1 {
        e1[i] = args.alpha1[i] * (args.mu1[i] + half * args.sigma11[(i, i)]).exp();
    }
    let mut e2 = DVector::zeros(n2);
    let mut l2 = DVector::zeros(n2);
    let mut d1 = DVector::zeros(n2);
    let mut sd = DVector::zeros(n2);
    for j in 0..n2 {
        sd[j] = args.sigma22[(j, j)].sqrt();
        e2[j] = args.alpha2[j] * (args.mu2[j] + half * args.sigma22[(j, j)]).exp();
        l2[j] = args.alpha2[j] * args.strike[j];
        d1[j] = (args.mu2[j] + args.sigma22[(j, j)] - args.strike[j].ln()) / sd[j];
    }
    let mut plus = DMatrix::zeros(n1, n2);
    let mut minus = DMatrix::zeros(n1, n2);
    for i in 0..n1 {
        for j in 0..n2 {
            let tilt = args.sigma12[(i, j)] / sd[j];
            let fwd = e1[i] * e2[j] * args.sigma12[(i, j)].exp();
            let atm = e1[i] * l2[j];
            let a1 = d1[j] + tilt;
            let a2 = d1[j] - sd[j] + tilt;
            plus[(i, j)] = fwd * a1.norm_cdf() - atm * a2.norm_cdf();
            minus[(i, j)] = atm * (-a2).norm_cdf() - fwd * (-a1).norm_cdf();
        }
    }
    Ok((plus, minus))
}

/// `Ψ⁺`: expected outer product of a lognormal weight vector with call-type
/// payoffs; see [`psi_both`] for the closed form.
pub fn psi_plus<S: Scalar>(args: &PsiArgs<S>) -> Result<DMatrix<S>> {
    Ok(psi_both(args)?.0)
}

/// `Ψ⁻`: expected outer product of a lognormal weight vector with put-type
/// payoffs; see [`psi_both`] for the closed form.
pub fn psi_minus<S: Scalar>(args: &PsiArgs<S>) -> Result<DMatrix<S>> {
    Ok(psi_both(args)?.1)
}

/// A hedgeable contingent claim: one of the option legs, or the (remaining)
/// payoff stream of an equity-linked policy. Each claim has one component
/// per company; strategies hedge the components separately.
#[derive(Debug, Clone)]
pub enum ClaimSpec<S: Scalar> {
    /// European options struck at `strike`, expiring at `maturity`.
    Option {
        /// Which leg.
        kind: OptionKind,
        /// Componentwise positive strikes (n).
        strike: DVector<S>,
        /// Payoff date.
        maturity: usize,
    },
    /// An equity-linked policy; mortality comes from the life table passed
    /// alongside the claim.
    Insurance(InsuranceSpec<S>),
}

impl<S: Scalar> ClaimSpec<S> {
    /// Last payoff date of the claim.
    pub fn maturity(&self) -> usize {
        match self {
            ClaimSpec::Option { maturity, .. } => *maturity,
            ClaimSpec::Insurance(spec) => spec.maturity,
        }
    }
}

/// Value of the claim at the model's valuation date (closed form), one
/// entry per claim component.
pub fn claim_value<S: Scalar>(
    model: &PricingModel<S>,
    claim: &ClaimSpec<S>,
    table: Option<&LifeTable<S>>,
) -> Result<DVector<S>> {
    match claim {
        ClaimSpec::Option { kind, strike, maturity } => {
            model.option_price(*kind, strike, *maturity)
        }
        ClaimSpec::Insurance(spec) => {
            let table = table
                .ok_or_else(|| Error::invalid("insurance claims need a life table"))?;
            model.insurance_premium(spec, table)
        }
    }
}

/// Conditional second moment of the one-period discounted gain:
///
/// ```text
/// Ω̄_{t+1} = (e^{Σ_uu} − 𝖤_n) ⊙ (Ẽ[P̄_t|ℱ_t] Ẽ[P̄_t|ℱ_t]') ⊙ e^{Σ(m̃_t|t)},
/// Ẽ[P̄_{i,t}|ℱ_t] = D_t exp(m̃_{i,t|t} + ln 𝖡_{i,t} + ½Σ(m̃_t|t)_{ii}),
/// ```
///
/// the tower-property average of the point-mass expression
/// `(e^{Σ_uu}−𝖤_n)⊙P̄_tP̄_t'` over the time-`t` belief. Without return noise
/// (`Σ_uu = 0`) the gain vanishes identically and so does `Ω̄`.
pub fn omega_bar<S: Scalar>(model: &PricingModel<S>) -> DMatrix<S> {
    let n = model.co.n;
    let point = &model.point;
    let half = cst::<S>(0.5);
    let mut price = DVector::zeros(n);
    for i in 0..n {
        price[i] = point.discount
            * (point.belief.mean[i] + point.log_book[i] + half * point.belief.cov[(i, i)]).exp();
    }
    let mut omega = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            omega[(i, j)] = (model.co.sigma_xi[(i, j)].exp() - S::one())
                * price[i]
                * price[j]
                * point.belief.cov[(i, j)].exp();
        }
    }
    omega
}

/// Covariances of the hedging variables with the terminal log price `P̃_k`,
/// conditional on the valuation information (measure-invariant):
///
/// * `Σ_{π,P̃_k}` for `π_t = m̃_t + â + û_{t+1}`, combining the belief
///   propagation with the first-period shock loading, and
/// * `Σ_{m̃,P̃_k}` with the belief propagation alone.
///
/// Both are n×n; `props` must cover `k`.
pub fn price_cross_covariances<S: Scalar>(
    model: &PricingModel<S>,
    props: &Propagators<S>,
    k: usize,
) -> Result<(DMatrix<S>, DMatrix<S>)> {
    let co = &model.co;
    let t = model.t();
    if k <= t || k > props.horizon() {
        return Err(Error::invalid(format!(
            "terminal date k={k} outside t+1..=horizon (t={t}, horizon={})",
            props.horizon()
        )));
    }
    let (n, ell, lp) = (co.n, co.ell, co.ell * co.p);
    let jx = sel_x::<S>(n, ell, co.p);
    // J_m Σ(m̃*_t|t): covariance of m̃_t with the stacked belief coordinates.
    let jm_sigma = model.point.belief.cov.rows(0, n).into_owned();
    let sigma_xi_u = co.sigma_xi.rows(0, n).into_owned();
    let embed_next = co.shock_embed(t + 1);
    let mut sigma_m_p = DMatrix::zeros(n, n);
    let mut sigma_u_p = DMatrix::zeros(n, n);
    for s in t + 1..=k {
        // x_s loading on m̃*_t and on the period-(t+1) shock ξ_{t+1}.
        let state_m = (&jx * props.state(t, s)).columns(n + lp, 2 * n).into_owned();
        let shock = &jx * props.pi_star(t + 1, s) * &embed_next;
        let cov_m_x = &jm_sigma * state_m.transpose(); // n×ñ
        let cov_u_x = &sigma_xi_u * shock.transpose(); // n×ñ
        // P̃_k reads the b̃ block of every period plus the m̃ block at k.
        for i in 0..n {
            for j in 0..n {
                sigma_m_p[(i, j)] += cov_m_x[(i, j)];
                sigma_u_p[(i, j)] += cov_u_x[(i, j)];
                if s == k {
                    sigma_m_p[(i, j)] += cov_m_x[(i, n + ell + j)];
                    sigma_u_p[(i, j)] += cov_u_x[(i, n + ell + j)];
                }
            }
        }
    }
    let sigma_pi_p = &sigma_m_p + sigma_u_p;
    Ok((sigma_pi_p, sigma_m_p))
}

/// Forward-measure geometry of one payoff date: the drift adjustment `â`,
/// the law of the terminal log price, the cross covariances, and the bond.
struct ClaimGeometry<S: Scalar> {
    a_hat: DVector<S>,
    price_mean: DVector<S>,
    price_cov: DMatrix<S>,
    sigma_pi_p: DMatrix<S>,
    sigma_m_p: DMatrix<S>,
    bond: S,
}

fn claim_geometry<S: Scalar>(
    model: &PricingModel<S>,
    props: &Propagators<S>,
    k: usize,
) -> Result<ClaimGeometry<S>> {
    let shift = forward_shift(&model.co, &model.moments, k)?;
    let dist = terminal_log_price_dist(
        &model.co,
        &model.moments,
        &shift,
        &model.point.log_book,
        k,
        model.point.info,
    )?;
    let bond = model.bond(k)?;
    let (sigma_pi_p, sigma_m_p) = price_cross_covariances(model, props, k)?;
    Ok(ClaimGeometry {
        a_hat: shift.a_hat,
        price_mean: dist.mean,
        price_cov: dist.cov,
        sigma_pi_p,
        sigma_m_p,
        bond,
    })
}

/// The recurring `Ψ(π) − Ψ(m̃)` block of the gain–payoff covariances: the
/// same rectangle function evaluated with and without the one-period gain
/// variables, so that deterministic legs cancel exactly.
fn psi_difference<S: Scalar>(
    model: &PricingModel<S>,
    geo: &ClaimGeometry<S>,
    strike: &DVector<S>,
    alpha2: &DVector<S>,
    call_type: bool,
) -> Result<DMatrix<S>> {
    let n = model.co.n;
    let book = model.point.log_book.map(|b| b.exp());
    let mean_cur = model.point.belief.mean.rows(0, n).into_owned();
    let cov_cur = model.point.belief.cov.view((0, 0), (n, n)).into_owned();
    let sigma_uu = model.co.sigma_xi.view((0, 0), (n, n)).into_owned();
    let gain_args = PsiArgs {
        strike: strike.clone(),
        alpha1: book.clone(),
        alpha2: alpha2.clone(),
        mu1: &mean_cur + &geo.a_hat,
        mu2: geo.price_mean.clone(),
        sigma11: &cov_cur + &sigma_uu,
        sigma12: geo.sigma_pi_p.clone(),
        sigma22: geo.price_cov.clone(),
    };
    let base_args = PsiArgs {
        strike: strike.clone(),
        alpha1: book,
        alpha2: alpha2.clone(),
        mu1: mean_cur,
        mu2: geo.price_mean.clone(),
        sigma11: cov_cur,
        sigma12: geo.sigma_m_p.clone(),
        sigma22: geo.price_cov.clone(),
    };
    let (gain, base) = if call_type {
        (psi_plus(&gain_args)?, psi_plus(&base_args)?)
    } else {
        (psi_minus(&gain_args)?, psi_minus(&base_args)?)
    };
    Ok(gain - base)
}

/// Covariance of the gain with the guaranteed leg of a unit-linked benefit:
/// the guarantee pays a constant at its date, so only the random discount
/// couples with the gain, leaving the rank-one block
/// `(𝖡_t ⊙ e^{m̃_{t|t} + ½𝒟[Σ(m̃_t|t)]} ⊙ (e^{â + ½𝒟[Σ_uu]} − i_n)) (G*)'`.
fn guarantee_addon<S: Scalar>(
    model: &PricingModel<S>,
    geo: &ClaimGeometry<S>,
    guarantee: &DVector<S>,
) -> DMatrix<S> {
    let n = model.co.n;
    let half = cst::<S>(0.5);
    let mut lever = DVector::zeros(n);
    for i in 0..n {
        let point = &model.point;
        lever[i] = (point.log_book[i] + point.belief.mean[i] + half * point.belief.cov[(i, i)])
            .exp()
            * ((geo.a_hat[i] + half * model.co.sigma_xi[(i, i)]).exp() - S::one());
    }
    lever * guarantee.transpose()
}

/// Conditional covariance `Λ̄_{t+1}` of the one-period discounted gain with
/// each discounted claim component, as an n×n matrix whose column `j`
/// corresponds to the claim on company `j`.
///
/// Each payoff date is priced under its own forward measure (the date is the
/// numeraire maturity), so a multi-date insurance claim sums per-date
/// blocks with its mortality weights, plus the guarantee coupling for the
/// unit-linked products.
pub fn lambda_bar<S: Scalar>(
    model: &PricingModel<S>,
    claim: &ClaimSpec<S>,
    table: Option<&LifeTable<S>>,
) -> Result<DMatrix<S>> {
    let n = model.co.n;
    let t = model.t();
    let d2 = model.point.discount * model.point.discount;
    let maturity = claim.maturity();
    if maturity > model.horizon() {
        return Err(Error::dim(format!(
            "claim matures at {maturity}, beyond the pricing horizon {}",
            model.horizon()
        )));
    }
    let props = Propagators::new(&model.co, maturity)?;
    match claim {
        ClaimSpec::Option { kind, strike, maturity } => {
            if strike.nrows() != n {
                return Err(Error::dim(format!(
                    "{} strikes for {n} companies",
                    strike.nrows()
                )));
            }
            let geo = claim_geometry(model, &props, *maturity)?;
            let ones = DVector::from_element(n, S::one());
            let diff = psi_difference(model, &geo, strike, &ones, *kind == OptionKind::Call)?;
            Ok(diff * (d2 * geo.bond))
        }
        ClaimSpec::Insurance(spec) => {
            let table = table
                .ok_or_else(|| Error::invalid("insurance claims need a life table"))?;
            let mat = spec.maturity;
            if mat <= t {
                return Err(Error::invalid(format!(
                    "insurance maturity {mat} must exceed the valuation date {t}"
                )));
            }
            if spec.fund_units.len() < mat || spec.guarantees.len() < mat {
                return Err(Error::dim(format!(
                    "insurance spec covers {} payoff dates but matures at {mat}",
                    spec.fund_units.len().min(spec.guarantees.len())
                )));
            }
            let age_now = spec.age
                + u32::try_from(t)
                    .map_err(|_| Error::invalid("valuation date overflows age arithmetic"))?;
            let unit_linked = matches!(
                spec.product,
                InsuranceProduct::UnitLinkedTerm | InsuranceProduct::UnitLinkedEndowment
            );
            let block_at = |date: usize, weight: S| -> Result<DMatrix<S>> {
                let f = spec.f_star(date);
                let g = spec.g_star(date);
                if f.nrows() != n || g.nrows() != n {
                    return Err(Error::dim(format!(
                        "fund units / guarantee at date {date} sized for {} companies, \
                         expected {n}",
                        f.nrows().min(g.nrows())
                    )));
                }
                let strike = insurance_strikes(f, g, unit_linked, date)?;
                let geo = claim_geometry(model, &props, date)?;
                let mut block = psi_difference(model, &geo, &strike, f, unit_linked)?;
                if unit_linked {
                    block += guarantee_addon(model, &geo, g);
                }
                Ok(block * (d2 * geo.bond * weight))
            };
            let mut lambda = DMatrix::zeros(n, n);
            match spec.product {
                InsuranceProduct::SegregatedTerm | InsuranceProduct::UnitLinkedTerm => {
                    for k in t..mat {
                        let w = table.deferred_death(age_now, (k - t) as u32)?;
                        if w == S::zero() {
                            continue;
                        }
                        lambda += block_at(k + 1, w)?;
                    }
                }
                InsuranceProduct::SegregatedEndowment
                | InsuranceProduct::UnitLinkedEndowment => {
                    let p = table.survival(age_now, (mat - t) as u32)?;
                    if p > S::zero() {
                        lambda = block_at(mat, p)?;
                    }
                }
            }
            Ok(lambda)
        }
    }
}

/// One step of the locally risk-minimizing strategy, computed from time-`t`
/// information only (the holdings `h` apply over the period `(t, t+1]`).
#[derive(Debug, Clone)]
pub struct HedgeStep<S: Scalar> {
    /// Information date the step conditions on.
    pub t: usize,
    /// Share holdings `h_{t+1}` (n×n): column `j` hedges claim component `j`.
    pub h: DMatrix<S>,
    /// Gain–claim covariances backing the holdings.
    pub lambda_bar: DMatrix<S>,
    /// Gain second moment backing the holdings.
    pub omega_bar: DMatrix<S>,
    /// Claim values `V_t` at the information date.
    pub value: DVector<S>,
    /// Whether `Ω̄` was rank-deficient and a pseudo-inverse was used.
    pub singular: bool,
}

impl<S: Scalar> HedgeStep<S> {
    /// Cash account at `t+1`:
    /// `h⁰_{t+1} = V_{t+1} − h_{t+1}'(P_{t+1}+d_{t+1})`, one entry per claim
    /// component, from next-period claim values and realized (or estimated)
    /// cum-dividend prices.
    pub fn cash(&self, value_next: &DVector<S>, price_plus_div: &DVector<S>) -> DVector<S> {
        value_next - self.h.transpose() * price_plus_div
    }
}

/// Locally risk-minimizing holdings `h_{t+1} = Ω̄⁺_{t+1} Λ̄_{t+1}` for a claim
/// at the model's valuation date, with the claim value attached. A claim
/// uncorrelated with the tradable gains (`Λ̄ = 0`) yields exactly zero
/// holdings, pseudo-inverse or not.
pub fn strategy<S: Scalar>(
    model: &PricingModel<S>,
    claim: &ClaimSpec<S>,
    table: Option<&LifeTable<S>>,
) -> Result<HedgeStep<S>> {
    let lambda = lambda_bar(model, claim, table)?;
    let omega = omega_bar(model);
    let (pinv, _, dropped) = linalg::pinv_sym(&omega, OMEGA_PINV_CUTOFF);
    if dropped > 0 {
        log::warn!(
            "gain second-moment matrix is rank-deficient ({dropped} of {} directions dropped)",
            omega.nrows()
        );
    }
    let h = &pinv * &lambda;
    let value = claim_value(model, claim, table)?;
    Ok(HedgeStep {
        t: model.t(),
        h,
        lambda_bar: lambda,
        omega_bar: omega,
        value,
        singular: dropped > 0,
    })
}

/// A hedge trajectory for one claim component along an observed panel:
/// holdings are recomputed each period from the risk-neutral filtered
/// belief, values from the closed-form prices, and the cash account from
/// model-implied price estimates (private companies have no quoted prices,
/// so the filtered log price plays that role; the estimates used are
/// reported alongside).
#[derive(Debug, Clone)]
pub struct HedgeStrategy<S: Scalar> {
    /// First information date.
    pub t_start: usize,
    /// Hedged claim component (company index).
    pub component: usize,
    /// Holdings `h_{t+1}` for `t = t_start..maturity`, entry `t - t_start`.
    pub h: Vec<DVector<S>>,
    /// Cash positions: entry 0 is `h⁰_{t_start} = V_{t_start} − h₁'(P+d)`,
    /// entry `j ≥ 1` is `h⁰_{t_start+j} = V_{t_start+j} − h_j'(P+d)`.
    pub h0: Vec<S>,
    /// Claim values `V_t` for `t = t_start..=maturity` (the last entry is
    /// the terminal payoff at the estimated prices).
    pub value: Vec<S>,
    /// Estimated cum-dividend prices `P̂_t + d̂_t` used for the cash legs,
    /// `t = t_start..=maturity`.
    pub price_plus_div: Vec<DVector<S>>,
}

/// Run the strategy along a panel that covers the claim's life
/// (`maturity ≤ T`): risk-neutral filtering produces the belief path, each
/// date's [`strategy`] produces the holdings, and the cash account closes
/// against estimated cum-dividend prices. The terminal value is the claim's
/// payoff at the estimated prices (zero for term products, whose last
/// benefit is already paid).
pub fn strategy_path<S: Scalar>(
    params: &crate::model::ModelParameters<S>,
    data: &crate::model::PanelData<S>,
    convention: crate::model::DividendConvention,
    claim: &ClaimSpec<S>,
    table: Option<&LifeTable<S>>,
    t_start: usize,
    component: usize,
) -> Result<HedgeStrategy<S>> {
    let maturity = claim.maturity();
    let n = params.mu0.nrows();
    if maturity > data.t_obs() {
        return Err(Error::dim(format!(
            "claim matures at {maturity} but the panel ends at {}",
            data.t_obs()
        )));
    }
    if t_start >= maturity {
        return Err(Error::invalid(format!(
            "hedging must start before the claim matures (t_start={t_start}, \
             maturity={maturity})"
        )));
    }
    if component >= n {
        return Err(Error::dim(format!(
            "claim component {component} out of range for {n} companies"
        )));
    }
    let co = risk_neutral_system(params, &data.exog, convention)?;
    let filter = crate::kalman::filter_stacked(&co, data, crate::kalman::StateBelief::prior(params))?;

    // Model-implied price and dividend estimates along the panel.
    let log_price = |t: usize| -> DVector<S> {
        data.log_book(t) + filter.belief(t).mean.rows(0, n)
    };
    let price_plus_div = |t: usize| -> DVector<S> {
        let mut total = log_price(t).map(|x| x.exp());
        if t >= 1 {
            let delta = data.exog.delta(t);
            let pays = data.exog.pays(t);
            let base = match convention {
                crate::model::DividendConvention::BookValue => data.log_book(t - 1),
                crate::model::DividendConvention::MarketPrice => log_price(t - 1),
            };
            for i in 0..n {
                if pays[i] {
                    total[i] += (delta[i] + base[i]).exp();
                }
            }
        }
        total
    };

    let mut h = Vec::with_capacity(maturity - t_start);
    let mut h0 = Vec::with_capacity(maturity - t_start + 1);
    let mut value = Vec::with_capacity(maturity - t_start + 1);
    let mut ppd = Vec::with_capacity(maturity - t_start + 1);
    for t in t_start..maturity {
        let point =
            crate::pricing::ValuationPoint::from_belief(data, filter.belief(t).clone())?;
        let model = PricingModel::new(params, &data.exog, convention, point, maturity)?;
        let step = strategy(&model, claim, table)?;
        h.push(step.h.column(component).into_owned());
        value.push(step.value[component]);
        ppd.push(price_plus_div(t));
    }
    value.push(terminal_payoff(claim, &log_price(maturity).map(|x| x.exp()))?[component]);
    ppd.push(price_plus_div(maturity));
    // Formation cash at the start, then settlement cash at each later date
    // against the holdings carried into it.
    h0.push(value[0] - h[0].dot(&ppd[0]));
    for j in 1..=maturity - t_start {
        h0.push(value[j] - h[j - 1].dot(&ppd[j]));
    }
    Ok(HedgeStrategy {
        t_start,
        component,
        h,
        h0,
        value,
        price_plus_div: ppd,
    })
}

/// Payoff of the claim at its maturity for given price levels (the
/// mortality-weighted remaining value of term products is zero at maturity:
/// their last benefit is paid there).
fn terminal_payoff<S: Scalar>(claim: &ClaimSpec<S>, price: &DVector<S>) -> Result<DVector<S>> {
    let n = price.nrows();
    let zero = DVector::zeros(n);
    Ok(match claim {
        ClaimSpec::Option { kind, strike, maturity: _ } => {
            let mut payoff = DVector::zeros(n);
            for i in 0..n {
                let intrinsic = match kind {
                    OptionKind::Call => price[i] - strike[i],
                    OptionKind::Put => strike[i] - price[i],
                };
                payoff[i] = if intrinsic > S::zero() { intrinsic } else { S::zero() };
            }
            payoff
        }
        ClaimSpec::Insurance(spec) => match spec.product {
            InsuranceProduct::SegregatedTerm | InsuranceProduct::UnitLinkedTerm => zero,
            InsuranceProduct::SegregatedEndowment => {
                let f = spec.f_star(spec.maturity);
                let g = spec.g_star(spec.maturity);
                let mut payoff = DVector::zeros(n);
                for i in 0..n {
                    let top_up = g[i] - f[i] * price[i];
                    payoff[i] = if top_up > S::zero() { top_up } else { S::zero() };
                }
                payoff
            }
            InsuranceProduct::UnitLinkedEndowment => {
                let f = spec.f_star(spec.maturity);
                let g = spec.g_star(spec.maturity);
                let mut payoff = DVector::zeros(n);
                for i in 0..n {
                    let excess = f[i] * price[i] - g[i];
                    payoff[i] = g[i] + if excess > S::zero() { excess } else { S::zero() };
                }
                payoff
            }
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::StateBelief;
    use crate::model::{uniform_pays, DividendConvention, ExogSeries, ModelParameters, PanelData};
    use crate::pricing::{InfoSet, ValuationPoint};
    use approx::assert_relative_eq;

    fn params_n2() -> ModelParameters<f64> {
        ModelParameters {
            mu0: DVector::from_vec(vec![-0.1, 0.2]),
            sigma0: DMatrix::from_row_slice(2, 2, &[0.05, 0.01, 0.01, 0.04]),
            c_k: DMatrix::from_row_slice(2, 1, &[0.01, 0.015]),
            c_m: DMatrix::from_row_slice(2, 1, &[0.002, 0.001]),
            c_z: DMatrix::from_row_slice(2, 1, &[0.008, 0.004]),
            a: DMatrix::from_row_slice(2, 4, &[0.5, 0.1, 0.1, 0.0, 0.0, 0.3, 0.05, 0.1]),
            sigma_uu: DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]),
            sigma_uv: DMatrix::from_row_slice(2, 2, &[0.001, -0.0005, 0.0005, 0.0015]),
            sigma_vv: DMatrix::from_row_slice(2, 2, &[1e-4, 2e-5, 2e-5, 9e-5]),
            sigma_ww: DMatrix::from_row_slice(2, 2, &[0.0025, 0.0005, 0.0005, 0.0016]),
        }
    }

    fn exog_n2(len: usize) -> ExogSeries<f64> {
        ExogSeries {
            psi: vec![DVector::from_element(1, 1.0); len],
            delta_tilde: vec![DVector::from_element(2, -3.0); len],
            pays: uniform_pays(len, 2, true),
        }
    }

    fn point_n2(t: usize, info: InfoSet) -> ValuationPoint<f64> {
        let mean = DVector::from_vec(vec![-0.05, 0.15, -0.06, 0.14]);
        let cov = match info {
            InfoSet::FullState => DMatrix::zeros(4, 4),
            InfoSet::Observational => {
                let l = DMatrix::from_row_slice(
                    4,
                    4,
                    &[
                        0.14, 0.0, 0.0, 0.0, //
                        0.02, 0.12, 0.0, 0.0, //
                        0.05, 0.01, 0.10, 0.0, //
                        0.01, 0.03, 0.02, 0.09,
                    ],
                );
                &l * l.transpose()
            }
        };
        ValuationPoint {
            t,
            belief: StateBelief { t, mean, cov },
            log_book: DVector::from_vec(vec![2.0, 1.5]),
            y_star: DVector::from_vec(vec![0.01, 0.02, 0.022, 0.009, 0.018, 0.012]),
            discount: 0.96,
            info,
        }
    }

    fn model_n2(t: usize, horizon: usize, info: InfoSet) -> PricingModel<f64> {
        PricingModel::new(
            &params_n2(),
            &exog_n2(horizon),
            DividendConvention::BookValue,
            point_n2(t, info),
            horizon,
        )
        .unwrap()
    }

    fn scalar_args(
        mu1: f64,
        mu2: f64,
        s11: f64,
        s12: f64,
        s22: f64,
        strike: f64,
        alpha1: f64,
        alpha2: f64,
    ) -> PsiArgs<f64> {
        PsiArgs {
            strike: DVector::from_element(1, strike),
            alpha1: DVector::from_element(1, alpha1),
            alpha2: DVector::from_element(1, alpha2),
            mu1: DVector::from_element(1, mu1),
            mu2: DVector::from_element(1, mu2),
            sigma11: DMatrix::from_element(1, 1, s11),
            sigma12: DMatrix::from_element(1, 1, s12),
            sigma22: DMatrix::from_element(1, 1, s22),
        }
    }

    /// Simpson quadrature of E[α₁e^{X₁}·α₂(payoff of e^{X₂})] using the
    /// conditional expectation of e^{X₁} given X₂, split at the payoff kink.
    fn quad_psi(args: &PsiArgs<f64>, call_type: bool) -> f64 {
        let (mu1, mu2) = (args.mu1[0], args.mu2[0]);
        let (s11, s12, s22) = (args.sigma11[(0, 0)], args.sigma12[(0, 0)], args.sigma22[(0, 0)]);
        let strike = args.strike[0];
        let sd = s22.sqrt();
        let kink = strike.ln();
        let (lo, hi) = if call_type {
            (kink.max(mu2 - 16.0 * sd), mu2 + 16.0 * sd)
        } else {
            (mu2 - 16.0 * sd, kink.min(mu2 + 16.0 * sd))
        };
        if hi <= lo {
            return 0.0;
        }
        let m = 40_000usize;
        let h = (hi - lo) / m as f64;
        let f = |x2: f64| {
            let payoff = if call_type { x2.exp() - strike } else { strike - x2.exp() };
            let cond_e1 = (mu1 + s12 / s22 * (x2 - mu2) + 0.5 * (s11 - s12 * s12 / s22)).exp();
            let z = (x2 - mu2) / sd;
            cond_e1 * payoff * (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut acc = f(lo) + f(hi);
        for i in 1..m {
            acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        args.alpha1[0] * args.alpha2[0] * acc * h / 3.0
    }

    #[test]
    fn psi_reduces_to_the_product_rule_when_independent() {
        // With Σ12 = 0 the factors decouple into the lognormal mean times
        // the scalar option values.
        let args = scalar_args(0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0);
        let plus = psi_plus(&args).unwrap();
        let minus = psi_minus(&args).unwrap();
        let e1 = 0.5f64.exp();
        assert_relative_eq!(plus[(0, 0)], e1 * 0.887142978835005, epsilon = 1e-12);
        assert_relative_eq!(minus[(0, 0)], e1 * 0.238421708134877, epsilon = 1e-12);
    }

    #[test]
    fn psi_matches_conditional_quadrature() {
        for &(mu1, mu2, s11, s12, s22, strike, a1, a2) in &[
            (0.1, 0.3, 0.5, 0.2, 0.8, 1.2, 1.0, 1.0),
            (-0.2, 0.0, 0.3, -0.25, 0.6, 0.9, 2.0, 0.7),
            (0.0, -0.5, 1.0, 0.45, 0.5, 0.4, 0.5, 3.0),
        ] {
            let args = scalar_args(mu1, mu2, s11, s12, s22, strike, a1, a2);
            let plus = psi_plus(&args).unwrap()[(0, 0)];
            let minus = psi_minus(&args).unwrap()[(0, 0)];
            assert_relative_eq!(plus, quad_psi(&args, true), epsilon = 1e-8);
            assert_relative_eq!(minus, quad_psi(&args, false), epsilon = 1e-8);
        }
    }

    #[test]
    fn psi_satisfies_the_parity_identity() {
        // Ψ⁺ − Ψ⁻ = (α₁⊙Ee^{X₁})(α₂⊙Ee^{X₂})'⊙e^{Σ12} − (α₁⊙Ee^{X₁})(α₂⊙L)',
        // componentwise, on a rectangular (2×3) configuration.
        let args: PsiArgs<f64> = PsiArgs {
            strike: DVector::from_vec(vec![0.8, 1.1, 2.0]),
            alpha1: DVector::from_vec(vec![1.5, 0.7]),
            alpha2: DVector::from_vec(vec![1.0, 2.0, 0.4]),
            mu1: DVector::from_vec(vec![0.1, -0.3]),
            mu2: DVector::from_vec(vec![0.0, 0.2, -0.1]),
            sigma11: DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]),
            sigma12: DMatrix::from_row_slice(2, 3, &[0.12, -0.05, 0.02, 0.03, 0.08, -0.04]),
            sigma22: DMatrix::from_row_slice(
                3,
                3,
                &[0.5, 0.05, 0.0, 0.05, 0.7, 0.1, 0.0, 0.1, 0.6],
            ),
        };
        let plus = psi_plus(&args).unwrap();
        let minus = psi_minus(&args).unwrap();
        for i in 0..2 {
            let e1 = args.alpha1[i] * (args.mu1[i] + 0.5 * args.sigma11[(i, i)]).exp();
            for j in 0..3 {
                let e2 = args.alpha2[j] * (args.mu2[j] + 0.5 * args.sigma22[(j, j)]).exp();
                let oracle = e1 * e2 * args.sigma12[(i, j)].exp()
                    - e1 * args.alpha2[j] * args.strike[j];
                assert_relative_eq!(plus[(i, j)] - minus[(i, j)], oracle, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn psi_rejects_degenerate_and_mismatched_inputs() {
        let good = scalar_args(0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0);
        let mut flat = good.clone();
        flat.sigma22[(0, 0)] = 0.0;
        assert!(matches!(psi_plus(&flat), Err(Error::DegenerateVariance(_))));
        let mut free = good.clone();
        free.strike[0] = 0.0;
        assert!(psi_plus(&free).is_err());
        let mut skewed = good;
        skewed.mu2 = DVector::zeros(2);
        assert!(psi_plus(&skewed).is_err());
    }

    #[test]
    fn omega_bar_vanishes_without_return_noise() {
        let mut params = params_n2();
        params.sigma_uu *= 0.0;
        params.sigma_uv *= 0.0;
        let model = PricingModel::new(
            &params,
            &exog_n2(5),
            DividendConvention::BookValue,
            point_n2(1, InfoSet::Observational),
            5,
        )
        .unwrap();
        assert_eq!(omega_bar(&model), DMatrix::zeros(2, 2));
    }

    #[test]
    fn omega_bar_collapses_to_the_point_mass_formula() {
        let model = model_n2(1, 5, InfoSet::FullState);
        let omega = omega_bar(&model);
        let params = params_n2();
        let point = &model.point;
        for i in 0..2 {
            for j in 0..2 {
                let pi = point.discount * (point.belief.mean[i] + point.log_book[i]).exp();
                let pj = point.discount * (point.belief.mean[j] + point.log_book[j]).exp();
                let oracle = (params.sigma_uu[(i, j)].exp() - 1.0) * pi * pj;
                assert_relative_eq!(omega[(i, j)], oracle, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn lambda_bar_vanishes_when_returns_carry_no_risk() {
        // Σ_uu = 0 wipes both the gain noise and the shock–rate coupling:
        // the two rectangle terms receive identical inputs and cancel
        // exactly, and the holdings are exactly zero.
        let mut params = params_n2();
        params.sigma_uu *= 0.0;
        params.sigma_uv *= 0.0;
        let model = PricingModel::new(
            &params,
            &exog_n2(5),
            DividendConvention::BookValue,
            point_n2(1, InfoSet::Observational),
            5,
        )
        .unwrap();
        let claim = ClaimSpec::Option {
            kind: OptionKind::Call,
            strike: DVector::from_vec(vec![8.0, 4.0]),
            maturity: 4,
        };
        let lambda = lambda_bar(&model, &claim, None).unwrap();
        assert_eq!(lambda, DMatrix::zeros(2, 2));
        let step = strategy(&model, &claim, None).unwrap();
        assert_eq!(step.h, DMatrix::zeros(2, 2));
        assert!(step.singular);
        assert!(step.value.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn endowment_lambda_with_certain_survival_matches_the_put_claim() {
        let model = model_n2(1, 5, InfoSet::Observational);
        let table = LifeTable::certain(60, 10);
        let guarantee = DVector::from_vec(vec![8.0, 4.0]);
        let seg = ClaimSpec::Insurance(InsuranceSpec::constant(
            InsuranceProduct::SegregatedEndowment,
            59,
            5,
            DVector::from_element(2, 1.0),
            guarantee.clone(),
        ));
        let put = ClaimSpec::Option {
            kind: OptionKind::Put,
            strike: guarantee,
            maturity: 5,
        };
        let lam_seg = lambda_bar(&model, &seg, Some(&table)).unwrap();
        let lam_put = lambda_bar(&model, &put, None).unwrap();
        assert_relative_eq!(
            linalg::max_abs_diff(&lam_seg, &lam_put),
            0.0,
            epsilon = 1e-14
        );
        // And the full steps agree too (values, holdings).
        let step_seg = strategy(&model, &seg, Some(&table)).unwrap();
        let step_put = strategy(&model, &put, None).unwrap();
        assert_relative_eq!(
            linalg::max_abs_diff(&step_seg.h, &step_put.h),
            0.0,
            epsilon = 1e-14
        );
        assert_relative_eq!((step_seg.value - step_put.value).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn term_lambda_is_the_mortality_weighted_sum_of_date_blocks() {
        let model = model_n2(1, 6, InfoSet::Observational);
        let table = LifeTable::from_constant_hazard(59, 10, 0.95).unwrap();
        let fund = DVector::from_vec(vec![0.9, 1.1]);
        let guar = DVector::from_vec(vec![7.0, 4.5]);
        for product in [InsuranceProduct::SegregatedTerm, InsuranceProduct::UnitLinkedTerm] {
            let endow_kind = match product {
                InsuranceProduct::SegregatedTerm => InsuranceProduct::SegregatedEndowment,
                _ => InsuranceProduct::UnitLinkedEndowment,
            };
            let term = ClaimSpec::Insurance(InsuranceSpec::constant(
                product,
                58,
                5,
                fund.clone(),
                guar.clone(),
            ));
            let lambda = lambda_bar(&model, &term, Some(&table)).unwrap();
            // Each date block equals a certain-survival endowment maturing
            // there; the term claim weights them by the deferred death
            // probabilities.
            let certain = LifeTable::certain(60, 10);
            let mut oracle = DMatrix::zeros(2, 2);
            for k in 1..5usize {
                let w = table.deferred_death(59, (k - 1) as u32).unwrap();
                let endow = ClaimSpec::Insurance(InsuranceSpec::constant(
                    endow_kind,
                    59,
                    k + 1,
                    fund.clone(),
                    guar.clone(),
                ));
                oracle += lambda_bar(&model, &endow, Some(&certain)).unwrap() * w;
            }
            assert_relative_eq!(linalg::max_abs_diff(&lambda, &oracle), 0.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn doubling_the_policy_doubles_its_lambda() {
        let model = model_n2(1, 5, InfoSet::Observational);
        let table = LifeTable::from_constant_hazard(59, 8, 0.96).unwrap();
        let fund = DVector::from_vec(vec![0.7, 1.3]);
        let guar = DVector::from_vec(vec![6.0, 5.0]);
        for product in [InsuranceProduct::SegregatedTerm, InsuranceProduct::UnitLinkedEndowment] {
            let base = ClaimSpec::Insurance(InsuranceSpec::constant(
                product,
                58,
                5,
                fund.clone(),
                guar.clone(),
            ));
            let double = ClaimSpec::Insurance(InsuranceSpec::constant(
                product,
                58,
                5,
                &fund * 2.0,
                &guar * 2.0,
            ));
            let lam1 = lambda_bar(&model, &base, Some(&table)).unwrap();
            let lam2 = lambda_bar(&model, &double, Some(&table)).unwrap();
            assert_relative_eq!(
                linalg::max_abs_diff(&(&lam1 * 2.0), &lam2),
                0.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn guarantee_only_claim_reduces_to_the_discount_coupling() {
        // F* = 0 silences the option legs; what remains is the covariance of
        // the gain with the random discounting of the fixed guarantee.
        let model = model_n2(1, 5, InfoSet::Observational);
        let table = LifeTable::certain(60, 10);
        let guar = DVector::from_vec(vec![3.0, 5.0]);
        let claim = ClaimSpec::Insurance(InsuranceSpec::constant(
            InsuranceProduct::UnitLinkedEndowment,
            59,
            5,
            DVector::zeros(2),
            guar.clone(),
        ));
        let lambda = lambda_bar(&model, &claim, Some(&table)).unwrap();
        let shift = model.forward(5).unwrap();
        let bond = model.bond(5).unwrap();
        let d2 = model.point.discount * model.point.discount;
        let point = &model.point;
        for i in 0..2 {
            let lever = (point.log_book[i]
                + point.belief.mean[i]
                + 0.5 * point.belief.cov[(i, i)])
                .exp()
                * ((shift.a_hat[i] + 0.5 * params_n2().sigma_uu[(i, i)]).exp() - 1.0);
            for j in 0..2 {
                assert_relative_eq!(
                    lambda[(i, j)],
                    d2 * bond * lever * guar[j],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn put_hedges_short_when_the_state_is_known() {
        // With full information the only gain risk is the return shock,
        // which moves price and put payoff in opposite directions: the
        // diagonal holdings of a put hedge must be negative, and those of a
        // call hedge positive.
        let model = model_n2(1, 4, InfoSet::FullState);
        let strike = DVector::from_vec(vec![8.0, 4.0]);
        let put = strategy(
            &model,
            &ClaimSpec::Option { kind: OptionKind::Put, strike: strike.clone(), maturity: 4 },
            None,
        )
        .unwrap();
        let call = strategy(
            &model,
            &ClaimSpec::Option { kind: OptionKind::Call, strike, maturity: 4 },
            None,
        )
        .unwrap();
        for i in 0..2 {
            assert!(put.h[(i, i)] < 0.0, "put delta {}", put.h[(i, i)]);
            assert!(call.h[(i, i)] > 0.0, "call delta {}", call.h[(i, i)]);
        }
        assert!(!put.singular && !call.singular);
        // Cash closes the position: h⁰ = V − h'(P+d).
        let value_next = DVector::from_vec(vec![0.9, 0.4]);
        let ppd = DVector::from_vec(vec![7.0, 4.2]);
        let cash = put.cash(&value_next, &ppd);
        for j in 0..2 {
            assert_relative_eq!(
                cash[j],
                value_next[j] - put.h.column(j).dot(&ppd),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn strategy_path_closes_its_cash_account() {
        // A small panel the claim lives entirely inside.
        let params = params_n2();
        let t_obs = 4;
        let exog = exog_n2(t_obs);
        let b_tilde: Vec<DVector<f64>> = (0..t_obs)
            .map(|t| {
                DVector::from_vec(vec![
                    0.02 + 0.01 * (t as f64 * 0.7).sin(),
                    -0.01 + 0.02 * (t as f64 * 1.1).cos(),
                ])
            })
            .collect();
        let z: Vec<DVector<f64>> = (0..t_obs)
            .map(|t| {
                DVector::from_vec(vec![
                    0.02 + 0.004 * (t as f64).sin(),
                    0.01 - 0.002 * (t as f64).cos(),
                ])
            })
            .collect();
        let data = PanelData {
            b_tilde,
            z,
            exog,
            z0_star: DVector::from_vec(vec![0.02, 0.012, 0.019, 0.011]),
            b0: DVector::from_vec(vec![4.0, 3.0]),
        };
        let claim = ClaimSpec::Option {
            kind: OptionKind::Call,
            strike: DVector::from_vec(vec![2.0, 1.5]),
            maturity: 4,
        };
        let path = strategy_path(
            &params,
            &data,
            DividendConvention::BookValue,
            &claim,
            None,
            1,
            0,
        )
        .unwrap();
        assert_eq!(path.h.len(), 3);
        assert_eq!(path.value.len(), 4);
        assert_eq!(path.h0.len(), 4);
        assert_eq!(path.price_plus_div.len(), 4);
        assert_relative_eq!(
            path.h0[0],
            path.value[0] - path.h[0].dot(&path.price_plus_div[0]),
            epsilon = 1e-12
        );
        for j in 1..4 {
            assert_relative_eq!(
                path.h0[j],
                path.value[j] - path.h[j - 1].dot(&path.price_plus_div[j]),
                epsilon = 1e-12
            );
        }
        // The maturity entry is the realized payoff at the estimated price.
        assert!(path.value[3] >= 0.0);
        // Requests outside the panel or component range are rejected.
        assert!(strategy_path(
            &params,
            &data,
            DividendConvention::BookValue,
            &claim,
            None,
            4,
            0
        )
        .is_err());
        assert!(strategy_path(
            &params,
            &data,
            DividendConvention::BookValue,
            &claim,
            None,
            1,
            5
        )
        .is_err());
    }
}
