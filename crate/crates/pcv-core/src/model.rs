//! Model primitives: dimensions, parameters, observed panels, the
//! dividend-recursion linearization, and the real-measure system coefficients.
//!
//! # The model
//!
//! For `n` companies, an unobserved log price-to-book ratio vector `m̃_t`
//! follows a random walk with exogenous drift, macro series `z_t` follow a
//! VAR(p) with exogenous regressors, and the observed log book-value growth
//! `b̃_t` is linked to the state through a linearized dividend recursion:
//!
//! ```text
//! b̃_t = ν_{b,t} + Ψ_{b,t} m̃*_t + G_t u_t          (observation)
//! z_t  = C_z ψ_t + A z*_{t-1} + v_t                (macro VAR)
//! m̃_t = C_m ψ_t + m̃_{t-1} + w_t                  (latent state)
//! ```
//!
//! with `m̃*_t = (m̃_t', m̃_{t-1}')'`, `z*_t` the stacked VAR lags, and jointly
//! Gaussian shocks `(u_t, v_t)` (covariance `Σ_ηη`) independent of
//! `w_t ~ N(0, Σ_ww)`. `G_t = diag(g_t)` and the intercepts `ν_{b,t}` come from
//! the linearization of the dividend recursion around the expected dividend
//! yield; companies that pay no dividend at `t` have `g_{t,i} = 1` and
//! `h_{t,i} = 0`, making the recursion exact.
//!
//! Two dividend conventions are supported: dividends proportional to book
//! value (`Δ̃_t` is a log dividend-to-book ratio, `Ψ_{b,t} = [-I : G_t]`) or to
//! the last market price (`Δ̃_t` is a log dividend-to-price ratio,
//! `Ψ_b = [-I : I]`).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// Problem dimensions.
///
/// * `n`   — number of companies,
/// * `ell` — number of macro variables in the VAR,
/// * `p`   — VAR order,
/// * `l`   — number of deterministic exogenous regressors,
/// * `t_obs` — number of in-sample observations (`t = 1..=t_obs`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n: usize,
    pub ell: usize,
    pub p: usize,
    pub l: usize,
    pub t_obs: usize,
}

impl ModelDims {
    /// Dimension of the unstacked system vector `x_t = (b̃_t', z_t', m̃_t')'`.
    pub fn n_tilde(&self) -> usize {
        2 * self.n + self.ell
    }

    /// Dimension of the companion vector `x*_t = (b̃_t', (z*_t)', (m̃*_t)')'`.
    pub fn n_star(&self) -> usize {
        3 * self.n + self.ell * self.p
    }

    /// Dimension of the stacked VAR lags `z*_t`.
    pub fn zp(&self) -> usize {
        self.ell * self.p
    }

    /// Dimension of the Kalman state `m̃*_t = (m̃_t', m̃_{t-1}')'`.
    pub fn state(&self) -> usize {
        2 * self.n
    }

    /// Dimension of an observation `y_t = (b̃_t', z_t')'`.
    pub fn obs(&self) -> usize {
        self.n + self.ell
    }
}

/// How dividends are set by the companies in the panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DividendConvention {
    /// Dividends proportional to the previous book value; `Δ̃_t` is the log
    /// dividend-to-book ratio and `Ψ_{b,t} = [-I : G_t]`.
    #[default]
    BookValue,
    /// Dividends proportional to the previous market price; `Δ̃_t` is the log
    /// dividend-to-price ratio and `Ψ_b = [-I : I]`.
    MarketPrice,
}

/// Static model parameters `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<S: Scalar> {
    /// Prior mean of the initial log price-to-book ratio `m̃_0` (n).
    pub mu0: DVector<S>,
    /// Prior covariance of `m̃_0` (n×n, PSD).
    pub sigma0: DMatrix<S>,
    /// Exogenous loading in the dividend recursion (n×l).
    pub c_k: DMatrix<S>,
    /// Exogenous drift of the latent state (n×l).
    pub c_m: DMatrix<S>,
    /// Exogenous loading of the macro VAR (ℓ×l).
    pub c_z: DMatrix<S>,
    /// VAR coefficients `A = [A_1 : ... : A_p]` (ℓ×ℓp).
    pub a: DMatrix<S>,
    /// Covariance of the valuation shock `u_t` (n×n, PD).
    pub sigma_uu: DMatrix<S>,
    /// Cross covariance `Cov(u_t, v_t)` (n×ℓ).
    pub sigma_uv: DMatrix<S>,
    /// Covariance of the macro shock `v_t` (ℓ×ℓ, PD).
    pub sigma_vv: DMatrix<S>,
    /// Covariance of the state shock `w_t` (n×n, PSD).
    pub sigma_ww: DMatrix<S>,
}

impl<S: Scalar> ModelParameters<S> {
    /// Dimensions implied by the parameter shapes (observation count is taken
    /// from the panel, so `t_obs` is 0 here).
    pub fn dims(&self) -> ModelDims {
        let n = self.mu0.nrows();
        let ell = self.c_z.nrows();
        let l = self.c_k.ncols();
        let p = if ell == 0 { 1 } else { self.a.ncols() / ell };
        ModelDims { n, ell, p, l, t_obs: 0 }
    }

    /// The `i`-th VAR lag matrix `A_i`, `i = 1..=p` (ℓ×ℓ).
    pub fn a_lag(&self, i: usize) -> DMatrix<S> {
        let ell = self.c_z.nrows();
        self.a.columns((i - 1) * ell, ell).into_owned()
    }

    /// Joint covariance of `η_t = (u_t', v_t')'`, shape (n+ℓ)×(n+ℓ).
    pub fn sigma_eta(&self) -> DMatrix<S> {
        let n = self.sigma_uu.nrows();
        let ell = self.sigma_vv.nrows();
        let mut s = DMatrix::zeros(n + ell, n + ell);
        s.view_mut((0, 0), (n, n)).copy_from(&self.sigma_uu);
        s.view_mut((0, n), (n, ell)).copy_from(&self.sigma_uv);
        s.view_mut((n, 0), (ell, n))
            .copy_from(&self.sigma_uv.transpose());
        s.view_mut((n, n), (ell, ell)).copy_from(&self.sigma_vv);
        s
    }

    /// Joint covariance of `ξ_t = (u_t', v_t', w_t')'`, shape ñ×ñ.
    pub fn sigma_xi(&self) -> DMatrix<S> {
        let n = self.sigma_uu.nrows();
        let ell = self.sigma_vv.nrows();
        let ne = n + ell;
        let mut s = DMatrix::zeros(ne + n, ne + n);
        s.view_mut((0, 0), (ne, ne)).copy_from(&self.sigma_eta());
        s.view_mut((ne, ne), (n, n)).copy_from(&self.sigma_ww);
        s
    }

    /// `Σ_vu Σ_uu^{-1}` (ℓ×n), the regression of `v` on `u`.
    pub fn beta_vu(&self) -> DMatrix<S> {
        let (inv, _, dropped) = linalg::pinv_sym(&self.sigma_uu, 1e-12);
        if dropped > 0 {
            log::warn!("sigma_uu is singular; beta_vu uses a pseudo-inverse");
        }
        self.sigma_uv.transpose() * inv
    }

    /// Diagonal of `Σ_uu` as a vector (`𝒟[Σ_uu]`).
    pub fn d_sigma_uu(&self) -> DVector<S> {
        self.sigma_uu.diagonal()
    }
}

/// Deterministic inputs for a span of periods `t = 1..=len`: exogenous
/// regressors, log dividend ratios, and dividend-payment flags.
///
/// The panel carries one for the sample; pricing and forecasting beyond the
/// sample extend it with assumed future values.
#[derive(Debug, Clone, PartialEq)]
pub struct ExogSeries<S: Scalar> {
    /// `ψ_t` (l), `t = 1..=len`.
    pub psi: Vec<DVector<S>>,
    /// `Δ̃_t` (n); entries where `pays` is `false` are ignored.
    pub delta_tilde: Vec<DVector<S>>,
    /// Dividend payment indicator per period and company.
    pub pays: Vec<Vec<bool>>,
}

impl<S: Scalar> ExogSeries<S> {
    /// Number of covered periods.
    pub fn len(&self) -> usize {
        self.psi.len()
    }

    /// True when no periods are covered.
    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    /// `ψ_t`, `t = 1..=len`.
    pub fn psi(&self, t: usize) -> &DVector<S> {
        &self.psi[t - 1]
    }

    /// `Δ̃_t`, `t = 1..=len`.
    pub fn delta(&self, t: usize) -> &DVector<S> {
        &self.delta_tilde[t - 1]
    }

    /// Dividend flags at `t`.
    pub fn pays(&self, t: usize) -> &[bool] {
        &self.pays[t - 1]
    }

    /// `Σ_{s=1}^{t} ψ_s` (empty sum for `t = 0`).
    pub fn cum_psi(&self, t: usize) -> DVector<S> {
        let l = self.psi.first().map_or(0, |v| v.nrows());
        let mut acc = DVector::zeros(l);
        for s in 1..=t {
            acc += self.psi(s);
        }
        acc
    }

    /// Extend by repeating the final period `extra` times (a simple
    /// flat-exogenous assumption for out-of-sample pricing).
    pub fn extended_flat(&self, extra: usize) -> Self {
        let mut out = self.clone();
        for _ in 0..extra {
            out.psi.push(self.psi.last().expect("nonempty").clone());
            out.delta_tilde
                .push(self.delta_tilde.last().expect("nonempty").clone());
            out.pays.push(self.pays.last().expect("nonempty").clone());
        }
        out
    }
}

/// Observed panel for `t = 1..=t_obs` plus the presample values needed to
/// start the recursions.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData<S: Scalar> {
    /// Log book growth `b̃_t` (n), `t = 1..=t_obs`.
    pub b_tilde: Vec<DVector<S>>,
    /// Macro observations `z_t` (ℓ), `t = 1..=t_obs`.
    pub z: Vec<DVector<S>>,
    /// Deterministic inputs over the sample.
    pub exog: ExogSeries<S>,
    /// Presample VAR lags `z*_0 = (z_0', z_{-1}', ..., z_{1-p}')'` (ℓp).
    pub z0_star: DVector<S>,
    /// Book values `B_0` at `t = 0` (n, strictly positive).
    pub b0: DVector<S>,
}

impl<S: Scalar> PanelData<S> {
    /// Number of in-sample observations `T`.
    pub fn t_obs(&self) -> usize {
        self.b_tilde.len()
    }

    /// `b̃_t`, `t = 1..=T`.
    pub fn b(&self, t: usize) -> &DVector<S> {
        &self.b_tilde[t - 1]
    }

    /// `z_t`, `t = 1..=T`; `t = 0` and below resolve into the presample lags.
    pub fn z_at(&self, t: isize) -> DVector<S> {
        if t >= 1 {
            self.z[(t - 1) as usize].clone()
        } else {
            let ell = self.z0_star.nrows() / self.p_from_z0().max(1);
            let k = (-t) as usize; // z_0 sits at offset 0, z_{-1} at ell, ...
            self.z0_star.rows(k * ell, ell).into_owned()
        }
    }

    fn p_from_z0(&self) -> usize {
        let ell = self.z.first().map_or(0, |v| v.nrows());
        if ell == 0 {
            0
        } else {
            self.z0_star.nrows() / ell
        }
    }

    /// Stacked lags `z*_t = (z_t', ..., z_{t-p+1}')'` for `t = 0..=T`.
    pub fn z_star(&self, t: usize) -> DVector<S> {
        let ell = self.z.first().map_or_else(|| self.z0_star.nrows(), |v| v.nrows());
        let p = if ell == 0 { 1 } else { self.z0_star.nrows() / ell };
        let mut out = DVector::zeros(ell * p);
        for j in 0..p {
            let zj = self.z_at(t as isize - j as isize);
            out.rows_mut(j * ell, ell).copy_from(&zj);
        }
        out
    }

    /// Observation vector `y_t = (b̃_t', z_t')'`.
    pub fn y(&self, t: usize) -> DVector<S> {
        let n = self.b(t).nrows();
        let ell = self.z[t - 1].nrows();
        let mut out = DVector::zeros(n + ell);
        out.rows_mut(0, n).copy_from(self.b(t));
        out.rows_mut(n, ell).copy_from(&self.z[t - 1]);
        out
    }

    /// Log book value `ln B_t = ln B_0 + Σ_{s<=t} b̃_s`.
    pub fn log_book(&self, t: usize) -> DVector<S> {
        let mut out = self.b0.map(|b| b.ln());
        for s in 1..=t {
            out += self.b(s);
        }
        out
    }

    /// Dimensions of the panel combined with parameter shapes.
    pub fn dims(&self, params: &ModelParameters<S>) -> ModelDims {
        let mut d = params.dims();
        d.t_obs = self.t_obs();
        d
    }

    /// One-period risk-free log return known at `t-1`: `r̃_t = (z_{t-1})_1`.
    pub fn short_rate(&self, t: usize) -> S {
        self.z_at(t as isize - 1)[0]
    }
}

/// Linearization of the dividend recursion: per-period coefficients
/// `(φ_t, g_t, h_t, μ_t)` with `G_t = diag(g_t)`.
///
/// For a company paying a dividend at `t`,
///
/// ```text
/// g = 1 / (1 - e^φ),   μ = φ + ln g,   h = μ - g φ,
/// ```
///
/// which satisfy the defining identities `g = 1 + e^μ` and
/// `h = g (ln g - μ) + μ`. Non-payers take the exact limits `g = 1`, `h = 0`
/// (`μ` is then not defined and flagged instead).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationParams<S: Scalar> {
    /// Linearization argument `φ_t` (entries for non-payers are 0 and unused).
    pub phi: Vec<DVector<S>>,
    /// Recursion slope `g_t >= 1`.
    pub g: Vec<DVector<S>>,
    /// Recursion intercept `h_t`.
    pub h: Vec<DVector<S>>,
    /// Linearization point `μ_t` (log expected dividend-price ratio).
    pub mu: Vec<DVector<S>>,
    /// Dividend flags, copied from the inputs.
    pub pays: Vec<Vec<bool>>,
}

impl<S: Scalar> LinearizationParams<S> {
    /// Number of covered periods.
    pub fn len(&self) -> usize {
        self.g.len()
    }

    /// True when no periods are covered.
    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    /// `g_t`, `t = 1..=len`.
    pub fn g(&self, t: usize) -> &DVector<S> {
        &self.g[t - 1]
    }

    /// `h_t`.
    pub fn h(&self, t: usize) -> &DVector<S> {
        &self.h[t - 1]
    }

    /// `G_t = diag(g_t)` as a dense matrix.
    pub fn g_mat(&self, t: usize) -> DMatrix<S> {
        DMatrix::from_diagonal(&self.g[t - 1])
    }

    /// `G_t^{-1}` as a dense matrix (diagonal, so exact).
    pub fn g_inv_mat(&self, t: usize) -> DMatrix<S> {
        DMatrix::from_diagonal(&self.g[t - 1].map(|g| S::one() / g))
    }
}

/// Compute the linearization for every period covered by `exog`.
///
/// Under [`DividendConvention::BookValue`] the argument is
/// `φ_t = Δ̃_t - C_k ψ_t - (μ_0 + C_m Σ_{s=1}^{t-1} ψ_s)`; under
/// [`DividendConvention::MarketPrice`] the expected log price drops out of the
/// dividend-price ratio and `φ_t = Δ̃_t - C_k ψ_t`. Payers require `φ_t < 0`
/// (equivalently a positive expected dividend yield); otherwise an error is
/// returned naming the first offending period.
pub fn linearization<S: Scalar>(
    params: &ModelParameters<S>,
    exog: &ExogSeries<S>,
    convention: DividendConvention,
) -> Result<LinearizationParams<S>> {
    let n = params.mu0.nrows();
    let len = exog.len();
    let mut phi = Vec::with_capacity(len);
    let mut g = Vec::with_capacity(len);
    let mut h = Vec::with_capacity(len);
    let mut mu = Vec::with_capacity(len);

    let mut cum_psi = DVector::zeros(params.c_m.ncols());
    for t in 1..=len {
        // cum_psi holds Σ_{s=1}^{t-1} ψ_s at this point.
        let mut phi_t = DVector::zeros(n);
        let mut g_t = DVector::from_element(n, S::one());
        let mut h_t = DVector::zeros(n);
        let mut mu_t = DVector::zeros(n);
        let ck_psi = &params.c_k * exog.psi(t);
        let base = match convention {
            DividendConvention::BookValue => &params.mu0 + &params.c_m * &cum_psi,
            DividendConvention::MarketPrice => DVector::zeros(n),
        };
        for i in 0..n {
            if !exog.pays(t)[i] {
                continue;
            }
            let p = exog.delta(t)[i] - ck_psi[i] - base[i];
            if p >= S::zero() {
                return Err(Error::Linearization(format!(
                    "phi must be negative for dividend payers; company {i} at t={t} has phi={}",
                    p.to_f64_c()
                )));
            }
            let gi = S::one() / (S::one() - p.exp());
            phi_t[i] = p;
            g_t[i] = gi;
            mu_t[i] = p + gi.ln();
            h_t[i] = mu_t[i] - gi * p;
        }
        phi.push(phi_t);
        g.push(g_t);
        h.push(h_t);
        mu.push(mu_t);
        cum_psi += exog.psi(t);
    }
    Ok(LinearizationParams { phi, g, h, mu, pays: exog.pays.clone() })
}

/// Per-period coefficients of the observation row under the physical measure:
/// `b̃_t = ν_{b,t} + Ψ_{b,t} m̃*_t + G_t u_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSystemCoefficients<S: Scalar> {
    /// Intercepts `ν_{b,t} = G_t C_k ψ_t - (G_t - I) Δ̃_t - h_t`.
    pub nu_b: Vec<DVector<S>>,
    /// State loadings `Ψ_{b,t}` (n×2n).
    pub psi_b: Vec<DMatrix<S>>,
    /// Macro intercepts `ν_{z,t} = C_z ψ_t`.
    pub nu_z: Vec<DVector<S>>,
    /// State intercepts `ν_{m,t} = C_m ψ_t`.
    pub nu_m: Vec<DVector<S>>,
    /// Copy of the linearization used to build the coefficients.
    pub lin: LinearizationParams<S>,
    /// Which convention produced `psi_b`.
    pub convention: DividendConvention,
}

impl<S: Scalar> RealSystemCoefficients<S> {
    /// Number of covered periods.
    pub fn len(&self) -> usize {
        self.nu_b.len()
    }

    /// True when no periods are covered.
    pub fn is_empty(&self) -> bool {
        self.nu_b.is_empty()
    }

    /// `ν_{b,t}`, `t = 1..=len`.
    pub fn nu_b(&self, t: usize) -> &DVector<S> {
        &self.nu_b[t - 1]
    }

    /// `Ψ_{b,t}`.
    pub fn psi_b(&self, t: usize) -> &DMatrix<S> {
        &self.psi_b[t - 1]
    }

    /// `ν_{z,t}`.
    pub fn nu_z(&self, t: usize) -> &DVector<S> {
        &self.nu_z[t - 1]
    }

    /// `ν_{m,t}`.
    pub fn nu_m(&self, t: usize) -> &DVector<S> {
        &self.nu_m[t - 1]
    }

    /// Recover the valuation shock from observed data and a state value:
    /// `u_t = G_t^{-1} (b̃_t - ν_{b,t} - Ψ_{b,t} m̃*_t)`.
    pub fn recover_u(&self, t: usize, b_t: &DVector<S>, m_star_t: &DVector<S>) -> DVector<S> {
        let resid = b_t - self.nu_b(t) - self.psi_b(t) * m_star_t;
        let g = self.lin.g(t);
        DVector::from_fn(resid.nrows(), |i, _| resid[i] / g[i])
    }
}

/// Build the real-measure system coefficients for every covered period.
pub fn real_system<S: Scalar>(
    params: &ModelParameters<S>,
    exog: &ExogSeries<S>,
    convention: DividendConvention,
) -> Result<RealSystemCoefficients<S>> {
    let lin = linearization(params, exog, convention)?;
    let n = params.mu0.nrows();
    let len = exog.len();
    let mut nu_b = Vec::with_capacity(len);
    let mut psi_b = Vec::with_capacity(len);
    let mut nu_z = Vec::with_capacity(len);
    let mut nu_m = Vec::with_capacity(len);
    for t in 1..=len {
        let g = lin.g(t);
        let h = lin.h(t);
        let ck_psi = &params.c_k * exog.psi(t);
        let mut nu = DVector::zeros(n);
        for i in 0..n {
            let delta = if exog.pays(t)[i] { exog.delta(t)[i] } else { S::zero() };
            nu[i] = g[i] * ck_psi[i] - (g[i] - S::one()) * delta - h[i];
        }
        nu_b.push(nu);
        let mut pb = DMatrix::zeros(n, 2 * n);
        for i in 0..n {
            pb[(i, i)] = -S::one();
            pb[(i, n + i)] = match convention {
                DividendConvention::BookValue => g[i],
                DividendConvention::MarketPrice => S::one(),
            };
        }
        psi_b.push(pb);
        nu_z.push(&params.c_z * exog.psi(t));
        nu_m.push(&params.c_m * exog.psi(t));
    }
    Ok(RealSystemCoefficients { nu_b, psi_b, nu_z, nu_m, lin, convention })
}

/// Outcome of one validation check.
#[derive(Debug, Clone)]
pub struct ValidationIssue {
    /// Which check produced the issue.
    pub check: &'static str,
    /// Human-readable detail.
    pub detail: String,
    /// Fatal issues make the model unusable; non-fatal ones are warnings.
    pub fatal: bool,
}

/// Result of [`validate_model`].
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    /// All findings, fatal and otherwise.
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    /// True when no fatal issue was found.
    pub fn passed(&self) -> bool {
        self.issues.iter().all(|i| !i.fatal)
    }

    fn push(&mut self, check: &'static str, detail: String, fatal: bool) {
        self.issues.push(ValidationIssue { check, detail, fatal });
    }
}

/// Check parameter shapes, covariance definiteness, panel consistency, and
/// the linearization domain. Returns a report rather than failing on the
/// first problem so callers can surface every issue at once.
pub fn validate_model<S: Scalar>(
    params: &ModelParameters<S>,
    data: &PanelData<S>,
    convention: DividendConvention,
) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let n = params.mu0.nrows();
    let ell = params.c_z.nrows();
    let l = params.c_k.ncols();

    // --- shapes ---
    let shape_checks: [(&str, (usize, usize), (usize, usize)); 8] = [
        ("sigma0", params.sigma0.shape(), (n, n)),
        ("c_k", params.c_k.shape(), (n, l)),
        ("c_m", params.c_m.shape(), (n, l)),
        ("c_z", params.c_z.shape(), (ell, l)),
        ("sigma_uu", params.sigma_uu.shape(), (n, n)),
        ("sigma_uv", params.sigma_uv.shape(), (n, ell)),
        ("sigma_vv", params.sigma_vv.shape(), (ell, ell)),
        ("sigma_ww", params.sigma_ww.shape(), (n, n)),
    ];
    for (name, got, want) in shape_checks {
        if got != want {
            rep.push("shape", format!("{name}: got {got:?}, want {want:?}"), true);
        }
    }
    if ell > 0 && (params.a.nrows() != ell || params.a.ncols() % ell != 0 || params.a.ncols() == 0)
    {
        rep.push(
            "shape",
            format!("a: got {:?}, want ℓ×ℓp with ℓ={ell}", params.a.shape()),
            true,
        );
    }
    let p = if ell == 0 { 1 } else { (params.a.ncols() / ell).max(1) };

    // --- covariances ---
    if !linalg::is_pd(&params.sigma_uu, 1e-12) {
        rep.push("pd", "sigma_uu must be strictly positive definite".into(), true);
    }
    if ell > 0 && !linalg::is_pd(&params.sigma_vv, 1e-12) {
        rep.push("pd", "sigma_vv must be strictly positive definite".into(), true);
    }
    if !linalg::is_psd(&params.sigma_ww) {
        rep.push("psd", "sigma_ww must be positive semidefinite".into(), true);
    }
    if !linalg::is_psd(&params.sigma0) {
        rep.push("psd", "sigma0 must be positive semidefinite".into(), true);
    }
    if params.sigma_eta().shape() == (n + ell, n + ell) && !linalg::is_psd(&params.sigma_eta()) {
        rep.push("psd", "sigma_eta (joint of u and v) must be PSD".into(), true);
    }

    // --- panel ---
    let t_obs = data.t_obs();
    if t_obs == 0 {
        rep.push("panel", "empty panel".into(), true);
    }
    if data.z.len() != t_obs
        || data.exog.psi.len() != t_obs
        || data.exog.delta_tilde.len() != t_obs
        || data.exog.pays.len() != t_obs
    {
        rep.push(
            "panel",
            format!(
                "series lengths differ: b {} z {} psi {} delta {} pays {}",
                t_obs,
                data.z.len(),
                data.exog.psi.len(),
                data.exog.delta_tilde.len(),
                data.exog.pays.len()
            ),
            true,
        );
    } else {
        for t in 1..=t_obs {
            if data.b(t).nrows() != n
                || data.z[t - 1].nrows() != ell
                || data.exog.psi(t).nrows() != l
                || data.exog.delta(t).nrows() != n
                || data.exog.pays(t).len() != n
            {
                rep.push("panel", format!("row width mismatch at t={t}"), true);
                break;
            }
        }
    }
    if data.z0_star.nrows() != ell * p {
        rep.push(
            "panel",
            format!("z0_star length {} but ℓp = {}", data.z0_star.nrows(), ell * p),
            true,
        );
    }
    if data.b0.nrows() != n || data.b0.iter().any(|&b| b <= S::zero()) {
        rep.push("panel", "b0 must have n strictly positive entries".into(), true);
    }

    // --- linearization domain ---
    if rep.passed() {
        if let Err(e) = linearization(params, &data.exog, convention) {
            rep.push("linearization", e.to_string(), true);
        }
    }

    // --- VAR stationarity (warning only; moments are finite-horizon) ---
    if rep.passed() && ell > 0 {
        let comp = crate::stacked::var_companion(&params.a, ell, p);
        let rho = linalg::spectral_radius(&comp).to_f64_c();
        if rho >= 1.0 {
            rep.push(
                "stationarity",
                format!("VAR companion spectral radius {rho:.4} >= 1"),
                false,
            );
        }
    }
    rep
}

/// Convenience constructor for an all-payers / no-payers flag layout.
pub fn uniform_pays(t_obs: usize, n: usize, pays: bool) -> Vec<Vec<bool>> {
    vec![vec![pays; n]; t_obs]
}
