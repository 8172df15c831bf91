//! Companion (stacked VAR(1)) form of the model, measure changes, propagator
//! matrices, and exact conditional moments of system paths.
//!
//! The three-block system from [`crate::model`] stacks into
//! `x*_t = (b̃_t', (z*_t)', (m̃*_t)')'` of dimension `ñ* = 3n + ℓp` obeying
//!
//! ```text
//! Q_{0,t} x*_t = ν*_t + Q_{1,t} x*_{t-1} + 𝖦*_t ξ*_t
//! ```
//!
//! with block-triangular `Q_{0,t}` (the observation row reads the current
//! state) and shift matrix `Q_{1,t}`. Solving the recursion forward gives
//! propagators `Π*_{β,s}` so that any future `x*_s` is an affine function of
//! `x*_t` and the intervening shocks — the basis for every conditional moment,
//! bond, and option formula in [`crate::pricing`].
//!
//! The same structure serves three probability measures that differ only in
//! intercepts and (for the macro VAR) the first lag matrix:
//!
//! * the physical measure ℙ of the data,
//! * the risk-neutral measure ℙ̃ characterized by the martingale condition on
//!   cum-dividend returns, under which the observation row earns the one-period
//!   rate plus a convexity correction and the VAR picks up a
//!   `Σ_vu Σ_uu^{-1}` adjustment, and
//! * the (t,u) forward measure ℙ̂ with the zero-coupon bond maturing at `u` as
//!   numeraire, obtained from ℙ̃ by the deterministic shock-mean shifts
//!   `ĉ_{β|t,u}` for `β = t+1..u-1`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kalman::StateBelief;
use crate::linalg;
use crate::model::{
    DividendConvention, ExogSeries, ModelParameters, PanelData, RealSystemCoefficients,
};
use crate::scalar::{cst, Scalar};

/// Default cap on the propagator window length; the cache is O(window²).
pub const PROPAGATOR_WINDOW_CAP: usize = 400;

/// Probability measure selecting the system coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureSpec {
    /// Physical measure ℙ (the estimation measure).
    Real,
    /// Risk-neutral measure ℙ̃.
    RiskNeutral,
    /// Forward measure ℙ̂ with the zero-coupon bond `B_{t,u}` as numeraire.
    /// Intercepts are shifted for periods `t+1..=u-1` only; conditioning at
    /// `t` itself coincides with the risk-neutral belief.
    Forward { t: usize, u: usize },
}

/// Per-period coefficients of the stacked system under one measure.
///
/// The observation row is `b̃_t = ν_{b,t} + E_t z*_{t-1} + Ψ_{b,t} m̃*_t +
/// G_t u_t` (`E_t = 0` under ℙ), the macro row `z_t = ν_{z,t} + A z*_{t-1} +
/// v_t` with `A` replaced by `Ã` away from ℙ, and the state row
/// `m̃_t = ν_{m,t} + m̃_{t-1} + w_t` under every measure.
#[derive(Debug, Clone)]
pub struct StackedCoefficients<S: Scalar> {
    pub n: usize,
    pub ell: usize,
    pub p: usize,
    /// Observation intercepts, `t = 1..=len`.
    pub nu_b: Vec<DVector<S>>,
    /// Lagged-macro loadings of the observation row (n×ℓp).
    pub e: Vec<DMatrix<S>>,
    /// State loadings of the observation row (n×2n).
    pub psi_b: Vec<DMatrix<S>>,
    /// Diagonals of `G_t`.
    pub g: Vec<DVector<S>>,
    /// Macro intercepts.
    pub nu_z: Vec<DVector<S>>,
    /// VAR coefficient block `[A_1 : ... : A_p]` (ℓ×ℓp).
    pub a_coef: DMatrix<S>,
    /// State intercepts.
    pub nu_m: Vec<DVector<S>>,
    /// Shock covariance `Σ_ξξ` of `ξ_t = (u', v', w')'` (ñ×ñ).
    pub sigma_xi: DMatrix<S>,
    /// Which measure the coefficients describe.
    pub measure: MeasureSpec,
}

/// VAR companion matrix `[[A],[I_{ℓ(p-1)} : 0]]` (ℓp×ℓp).
pub fn var_companion<S: Scalar>(a: &DMatrix<S>, ell: usize, p: usize) -> DMatrix<S> {
    let lp = ell * p;
    let mut comp = DMatrix::zeros(lp, lp);
    comp.view_mut((0, 0), (ell, lp)).copy_from(a);
    for i in 0..ell * (p - 1) {
        comp[(ell + i, i)] = S::one();
    }
    comp
}

impl<S: Scalar> StackedCoefficients<S> {
    /// Number of covered periods.
    pub fn len(&self) -> usize {
        self.nu_b.len()
    }

    /// True when no periods are covered.
    pub fn is_empty(&self) -> bool {
        self.nu_b.is_empty()
    }

    /// Dimension `ñ = 2n + ℓ` of the unstacked system vector.
    pub fn n_tilde(&self) -> usize {
        2 * self.n + self.ell
    }

    /// Dimension `ñ* = 3n + ℓp` of the companion vector.
    pub fn n_star(&self) -> usize {
        3 * self.n + self.ell * self.p
    }

    /// Stacked intercept `ν*_t = (ν_{b,t}', ν_{z,t}', 0', ν_{m,t}', 0')'`.
    pub fn nu_star(&self, t: usize) -> DVector<S> {
        let (n, lp) = (self.n, self.ell * self.p);
        let mut v = DVector::zeros(self.n_star());
        v.rows_mut(0, n).copy_from(&self.nu_b[t - 1]);
        v.rows_mut(n, self.ell).copy_from(&self.nu_z[t - 1]);
        v.rows_mut(n + lp, n).copy_from(&self.nu_m[t - 1]);
        v
    }

    /// Unstacked intercept `ν_t = (ν_{b,t}', ν_{z,t}', ν_{m,t}')'` (ñ).
    pub fn nu(&self, t: usize) -> DVector<S> {
        let n = self.n;
        let mut v = DVector::zeros(self.n_tilde());
        v.rows_mut(0, n).copy_from(&self.nu_b[t - 1]);
        v.rows_mut(n, self.ell).copy_from(&self.nu_z[t - 1]);
        v.rows_mut(n + self.ell, n).copy_from(&self.nu_m[t - 1]);
        v
    }

    /// `Q_{0,t}`: identity with `-Ψ_{b,t}` in the top-right block.
    pub fn q0(&self, t: usize) -> DMatrix<S> {
        let (n, lp, ns) = (self.n, self.ell * self.p, self.n_star());
        let mut q = DMatrix::identity(ns, ns);
        q.view_mut((0, n + lp), (n, 2 * n))
            .copy_from(&(-&self.psi_b[t - 1]));
        q
    }

    /// `Q_{1,t}`: the lag loadings `E_t`, the VAR companion, and the state
    /// shift `C = [[I,0],[I,0]]`.
    pub fn q1(&self, t: usize) -> DMatrix<S> {
        let (n, ell, p, ns) = (self.n, self.ell, self.p, self.n_star());
        let lp = ell * p;
        let mut q = DMatrix::zeros(ns, ns);
        q.view_mut((0, n), (n, lp)).copy_from(&self.e[t - 1]);
        q.view_mut((n, n), (lp, lp))
            .copy_from(&var_companion(&self.a_coef, ell, p));
        for i in 0..n {
            q[(n + lp + i, n + lp + i)] = S::one(); // m̃_t <- m̃_{t-1}
            q[(n + lp + n + i, n + lp + i)] = S::one(); // carries the lag
        }
        q
    }

    /// Apply `Q_{0,t}^{-1}` in place: adds `Ψ_{b,t} ·` (state block) to the
    /// observation block.
    pub fn q0_inv_apply(&self, t: usize, v: &mut DVector<S>) {
        let (n, lp) = (self.n, self.ell * self.p);
        let m_block = v.rows(n + lp, 2 * n).into_owned();
        let add = &self.psi_b[t - 1] * m_block;
        for i in 0..n {
            v[i] += add[i];
        }
    }

    /// Shock loading `𝖦_t J_x'` mapping `ξ_t = (u', v', w')'` (ñ) into the
    /// companion coordinates, with `G_t` scaling the observation block.
    pub fn shock_embed(&self, t: usize) -> DMatrix<S> {
        let (n, ell, lp) = (self.n, self.ell, self.ell * self.p);
        let mut m = DMatrix::zeros(self.n_star(), self.n_tilde());
        for i in 0..n {
            m[(i, i)] = self.g[t - 1][i];
        }
        for i in 0..ell {
            m[(n + i, n + i)] = S::one();
        }
        for i in 0..n {
            m[(n + lp + i, n + ell + i)] = S::one();
        }
        m
    }

    /// `𝖦_t = diag(G_t, I_ℓ, I_n)` on the unstacked coordinates (ñ×ñ).
    pub fn g_tilde(&self, t: usize) -> DMatrix<S> {
        let (n, ell) = (self.n, self.ell);
        let mut m = DMatrix::identity(self.n_tilde(), self.n_tilde());
        for i in 0..n {
            m[(i, i)] = self.g[t - 1][i];
        }
        let _ = ell;
        m
    }
}

/// Selector `J_x` extracting `x_t = (b̃', z', m̃')'` from companion
/// coordinates (ñ×ñ*).
pub fn sel_x<S: Scalar>(n: usize, ell: usize, p: usize) -> DMatrix<S> {
    let (nt, ns) = (2 * n + ell, 3 * n + ell * p);
    let mut j = DMatrix::zeros(nt, ns);
    for i in 0..n {
        j[(i, i)] = S::one();
    }
    for i in 0..ell {
        j[(n + i, n + i)] = S::one();
    }
    for i in 0..n {
        j[(n + ell + i, n + ell * p + i)] = S::one();
    }
    j
}

/// Selector `J_y` extracting the observation `y_t = (b̃', z')'` (n+ℓ × ñ*).
pub fn sel_y<S: Scalar>(n: usize, ell: usize, p: usize) -> DMatrix<S> {
    sel_x::<S>(n, ell, p).rows(0, n + ell).into_owned()
}

/// Selector of the Kalman state `m̃*_t` from companion coordinates (2n × ñ*).
pub fn sel_m_star<S: Scalar>(n: usize, ell: usize, p: usize) -> DMatrix<S> {
    let ns = 3 * n + ell * p;
    let mut j = DMatrix::zeros(2 * n, ns);
    for i in 0..2 * n {
        j[(i, n + ell * p + i)] = S::one();
    }
    j
}

/// Build stacked coefficients under the physical measure from the real-system
/// coefficients.
pub fn real_stacked<S: Scalar>(
    params: &ModelParameters<S>,
    real: &RealSystemCoefficients<S>,
) -> StackedCoefficients<S> {
    let d = params.dims();
    let len = real.len();
    StackedCoefficients {
        n: d.n,
        ell: d.ell,
        p: d.p,
        nu_b: real.nu_b.clone(),
        e: vec![DMatrix::zeros(d.n, d.ell * d.p); len],
        psi_b: real.psi_b.clone(),
        g: real.lin.g.clone(),
        nu_z: real.nu_z.clone(),
        a_coef: params.a.clone(),
        nu_m: real.nu_m.clone(),
        sigma_xi: params.sigma_xi(),
        measure: MeasureSpec::Real,
    }
}

/// Girsanov kernel `θ_t = Θ_t (r̃_t i_n - C_k ψ_t - 𝒟[Σ_uu]/2)` of the change
/// from ℙ to ℙ̃, with `Θ_t = [G_t' : Σ_uu^{-1} Σ_uv : 0]'` stacked over the
/// `(u, v, w)` blocks (ñ-dimensional).
pub fn girsanov_kernel<S: Scalar>(
    params: &ModelParameters<S>,
    g_t: &DVector<S>,
    psi_t: &DVector<S>,
    r_t: S,
) -> DVector<S> {
    let n = params.mu0.nrows();
    let ell = params.c_z.nrows();
    let half = cst::<S>(0.5);
    let a = DVector::from_element(n, r_t) - &params.c_k * psi_t - params.d_sigma_uu() * half;
    let mut theta = DVector::zeros(2 * n + ell);
    for i in 0..n {
        theta[i] = g_t[i] * a[i];
    }
    theta.rows_mut(n, ell).copy_from(&(params.beta_vu() * &a));
    theta
}

/// Build the risk-neutral stacked system over the periods covered by `exog`.
///
/// Relative to ℙ: the observation intercept replaces `G_t C_k ψ_t` by the
/// convexity correction `-G_t 𝒟[Σ_uu]/2` and earns the lagged short rate via
/// `E_t = [g_t e_{ℓ,1}' : 0 : ... : 0]`; the macro intercept and first lag
/// matrix absorb the shock correlation through `Σ_vu Σ_uu^{-1}`.
pub fn risk_neutral_system<S: Scalar>(
    params: &ModelParameters<S>,
    exog: &ExogSeries<S>,
    convention: DividendConvention,
) -> Result<StackedCoefficients<S>> {
    let real = crate::model::real_system(params, exog, convention)?;
    let mut co = real_stacked(params, &real);
    let d = params.dims();
    let half = cst::<S>(0.5);
    let dsu = params.d_sigma_uu();
    let beta_vu = params.beta_vu();
    for t in 1..=co.len() {
        let g = &co.g[t - 1];
        let ck_psi = &params.c_k * exog.psi(t);
        // ν̃_b = ν_b - G (C_k ψ + 𝒟[Σ_uu]/2)
        for i in 0..d.n {
            co.nu_b[t - 1][i] -= g[i] * (ck_psi[i] + half * dsu[i]);
        }
        // E_t: first lag column earns g_t.
        let mut e = DMatrix::zeros(d.n, d.ell * d.p);
        for i in 0..d.n {
            e[(i, 0)] = g[i];
        }
        co.e[t - 1] = e;
        // ν̃_z = ν_z - Σ_vu Σ_uu^{-1} (C_k ψ + 𝒟[Σ_uu]/2)
        let adj = &beta_vu * (ck_psi + &dsu * half);
        co.nu_z[t - 1] -= adj;
    }
    // Ã_1 = A_1 + Σ_vu Σ_uu^{-1} i_n e_{ℓ,1}' (adds β_vu·i_n to column 1).
    let add = &beta_vu * DVector::from_element(d.n, S::one());
    for r in 0..d.ell {
        co.a_coef[(r, 0)] += add[r];
    }
    co.measure = MeasureSpec::RiskNeutral;
    Ok(co)
}

/// Propagator cache for a window `0..=horizon` of a stacked system.
///
/// `Π*_{β,s}` (for `β < s`) propagates period-β quantities to period `s`; the
/// diagonal element used for loading the own-period intercept and shock is
/// `Q_{0,s}^{-1}`, while state propagation uses the identity at `β = s`.
/// Powers of the VAR companion are cached, so assembling any single matrix is
/// O(ñ*²).
pub struct Propagators<'a, S: Scalar> {
    co: &'a StackedCoefficients<S>,
    a_pows: Vec<DMatrix<S>>,
    horizon: usize,
}

impl<'a, S: Scalar> Propagators<'a, S> {
    /// Build the cache for `0..=horizon` (must be covered by `co`).
    pub fn new(co: &'a StackedCoefficients<S>, horizon: usize) -> Result<Self> {
        Self::with_cap(co, horizon, PROPAGATOR_WINDOW_CAP)
    }

    /// As [`Propagators::new`] with an explicit window cap.
    pub fn with_cap(
        co: &'a StackedCoefficients<S>,
        horizon: usize,
        cap: usize,
    ) -> Result<Self> {
        if horizon > cap {
            return Err(Error::invalid(format!(
                "propagator window {horizon} exceeds cap {cap}"
            )));
        }
        if horizon > co.len() {
            return Err(Error::dim(format!(
                "propagator horizon {horizon} beyond coefficient span {}",
                co.len()
            )));
        }
        let lp = co.ell * co.p;
        let comp = var_companion(&co.a_coef, co.ell, co.p);
        let mut a_pows = Vec::with_capacity(horizon + 1);
        a_pows.push(DMatrix::identity(lp, lp));
        for k in 1..=horizon {
            let next = &a_pows[k - 1] * &comp;
            a_pows.push(next);
        }
        Ok(Propagators { co, a_pows, horizon })
    }

    /// Cached horizon.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `Π*_{β,s}`: shock/intercept loading for `β = s` (`Q_{0,s}^{-1}`),
    /// propagation matrix for `β < s`.
    pub fn pi_star(&self, beta: usize, s: usize) -> DMatrix<S> {
        assert!(beta <= s && s <= self.horizon, "pi_star({beta},{s})");
        let co = self.co;
        let (n, lp, ns) = (co.n, co.ell * co.p, co.n_star());
        if beta == s {
            // Q_{0,s}^{-1}: identity with +Ψ_{b,s} in the top-right block.
            let mut q = DMatrix::identity(ns, ns);
            q.view_mut((0, n + lp), (n, 2 * n)).copy_from(&co.psi_b[s - 1]);
            return q;
        }
        let mut m = DMatrix::zeros(ns, ns);
        // Observation block row.
        let top_mid = &co.e[s - 1] * &self.a_pows[s - beta - 1];
        m.view_mut((0, n), (n, lp)).copy_from(&top_mid);
        let top_right = &co.psi_b[s - 1] * c_shift::<S>(n);
        m.view_mut((0, n + lp), (n, 2 * n)).copy_from(&top_right);
        // VAR block.
        m.view_mut((n, n), (lp, lp)).copy_from(&self.a_pows[s - beta]);
        // State block: C is idempotent, so C^{s-β} = C.
        m.view_mut((n + lp, n + lp), (2 * n, 2 * n))
            .copy_from(&c_shift::<S>(n));
        m
    }

    /// State propagation `x*_s = Π*_{t,s} x*_t + ...`; identity at `β = s`.
    pub fn state(&self, beta: usize, s: usize) -> DMatrix<S> {
        if beta == s {
            DMatrix::identity(self.co.n_star(), self.co.n_star())
        } else {
            self.pi_star(beta, s)
        }
    }

    /// Reduced propagator `Π_{β,s} = J_x Π*_{β,s} J_x'` (ñ×ñ).
    pub fn pi(&self, beta: usize, s: usize) -> DMatrix<S> {
        let co = self.co;
        let jx = sel_x::<S>(co.n, co.ell, co.p);
        &jx * self.pi_star(beta, s) * jx.transpose()
    }
}

/// State shift matrix `C = [[I,0],[I,0]]` (2n×2n, idempotent).
pub fn c_shift<S: Scalar>(n: usize) -> DMatrix<S> {
    let mut c = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        c[(i, i)] = S::one();
        c[(n + i, i)] = S::one();
    }
    c
}

/// Conditional means and covariances of the unstacked system vectors
/// `x_s = (b̃_s', z_s', m̃_s')'` for `s = t+1..=horizon`, given information at
/// `t` under the measure of the generating coefficients.
#[derive(Debug, Clone)]
pub struct CondMoments<S: Scalar> {
    /// Conditioning time.
    pub t: usize,
    /// Final covered period.
    pub horizon: usize,
    /// `μ_{s|t}`, indexed `s - t - 1`.
    pub mean: Vec<DVector<S>>,
    /// `Σ_{s1,s2|t}`, indexed `[s1 - t - 1][s2 - t - 1]` (full, not just a
    /// triangle).
    pub cov: Vec<Vec<DMatrix<S>>>,
    /// Measure the moments were computed under.
    pub measure: MeasureSpec,
}

impl<S: Scalar> CondMoments<S> {
    /// `μ_{s|t}`.
    pub fn mean_at(&self, s: usize) -> &DVector<S> {
        &self.mean[s - self.t - 1]
    }

    /// `Σ_{s1,s2|t}`.
    pub fn cov_at(&self, s1: usize, s2: usize) -> &DMatrix<S> {
        &self.cov[s1 - self.t - 1][s2 - self.t - 1]
    }
}

fn mean_recursion<S: Scalar>(
    co: &StackedCoefficients<S>,
    x_star_t: &DVector<S>,
    t: usize,
    horizon: usize,
) -> Vec<DVector<S>> {
    let jx = sel_x::<S>(co.n, co.ell, co.p);
    let mut cur = x_star_t.clone();
    let mut out = Vec::with_capacity(horizon - t);
    for s in t + 1..=horizon {
        let mut next = co.nu_star(s) + co.q1(s) * &cur;
        co.q0_inv_apply(s, &mut next);
        cur = next;
        out.push(&jx * &cur);
    }
    out
}

/// Shock-loading factors `M_{β,s} = J_x Π*_{β,s} 𝖦_β J_x' L_ξ` for
/// `β = t+1..=horizon`, `s = β..=horizon`, with `L_ξ L_ξ' = Σ_ξξ`, so that
/// `Σ_{s1,s2|t}(𝒢) = Σ_β M_{β,s1} M_{β,s2}'`.
fn shock_factors<S: Scalar>(
    props: &Propagators<'_, S>,
    co: &StackedCoefficients<S>,
    t: usize,
    horizon: usize,
) -> Vec<Vec<DMatrix<S>>> {
    let jx = sel_x::<S>(co.n, co.ell, co.p);
    let l_xi = linalg::chol_psd(&co.sigma_xi);
    let mut rows = Vec::with_capacity(horizon.saturating_sub(t));
    for beta in t + 1..=horizon {
        let load = co.shock_embed(beta) * &l_xi; // ñ*×ñ
        let mut per_s = Vec::with_capacity(horizon - beta + 1);
        for s in beta..=horizon {
            per_s.push(&jx * props.pi_star(beta, s) * &load);
        }
        rows.push(per_s);
    }
    rows
}

/// Conditional moments given full information `𝒢_t` (the state value is
/// known): `x*_t` supplies `(b̃_t, z*_t, m̃*_t)`; only the latter two blocks
/// matter.
pub fn cond_moments_given_g<S: Scalar>(
    co: &StackedCoefficients<S>,
    x_star_t: &DVector<S>,
    t: usize,
    horizon: usize,
) -> Result<CondMoments<S>> {
    let props = Propagators::new(co, horizon)?;
    let mean = mean_recursion(co, x_star_t, t, horizon);
    let m = shock_factors(&props, co, t, horizon);
    let nt = co.n_tilde();
    let h = horizon - t;
    let mut cov = vec![vec![DMatrix::zeros(nt, nt); h]; h];
    for i in 0..h {
        for j in i..h {
            let s_min = t + 1 + i.min(j);
            let mut acc = DMatrix::zeros(nt, nt);
            for beta in t + 1..=s_min {
                let bi = beta - t - 1;
                acc += &m[bi][t + 1 + i - beta] * m[bi][t + 1 + j - beta].transpose();
            }
            cov[j][i] = acc.transpose();
            cov[i][j] = acc;
        }
    }
    Ok(CondMoments { t, horizon, mean, cov, measure: co.measure })
}

/// Conditional moments given observational information `ℱ_t`: the state is
/// replaced by its belief `(m̃*_{t|t}, Σ(m̃*_t|t))` and the belief covariance
/// propagates into every future covariance.
///
/// `y_star_t = (b̃_t', (z*_t)')'` carries the observed part of `x*_t` (the
/// `b̃_t` block is immaterial; pass zero when unavailable).
pub fn cond_moments_given_f<S: Scalar>(
    co: &StackedCoefficients<S>,
    belief: &StateBelief<S>,
    y_star_t: &DVector<S>,
    t: usize,
    horizon: usize,
) -> Result<CondMoments<S>> {
    if belief.t != t {
        return Err(Error::invalid(format!(
            "belief at t={} but conditioning at t={t}",
            belief.t
        )));
    }
    let (n, lp) = (co.n, co.ell * co.p);
    let mut x_star = DVector::zeros(co.n_star());
    x_star.rows_mut(0, n + lp).copy_from(y_star_t);
    x_star.rows_mut(n + lp, 2 * n).copy_from(&belief.mean);
    let props = Propagators::new(co, horizon)?;
    let mean = mean_recursion(co, &x_star, t, horizon);

    let m = shock_factors(&props, co, t, horizon);
    let jx = sel_x::<S>(co.n, co.ell, co.p);
    let l_b = linalg::chol_psd(&belief.cov);
    let h = horizon - t;
    // Belief factors N_s = J_x Π*^m_{t,s} L_b.
    let mut n_fac = Vec::with_capacity(h);
    for s in t + 1..=horizon {
        let pim = props.state(t, s).columns(n + lp, 2 * n).into_owned();
        n_fac.push(&jx * pim * &l_b);
    }
    let nt = co.n_tilde();
    let mut cov = vec![vec![DMatrix::zeros(nt, nt); h]; h];
    for i in 0..h {
        for j in i..h {
            let s_min = t + 1 + i.min(j);
            let mut acc = &n_fac[i] * n_fac[j].transpose();
            for beta in t + 1..=s_min {
                let bi = beta - t - 1;
                acc += &m[bi][t + 1 + i - beta] * m[bi][t + 1 + j - beta].transpose();
            }
            cov[j][i] = acc.transpose();
            cov[i][j] = acc;
        }
    }
    Ok(CondMoments { t, horizon, mean, cov, measure: co.measure })
}

/// Factor representation of the joint Gaussian of the observation stack
/// `ȳ_τ` and the state `m̃*_t` under the coefficients' measure: both rows
/// load linearly on `(m̃*_0 draw, ξ_1, ..., ξ_τ)`, so covariances are Gram
/// matrices and PSD by construction.
struct JointObsState<S: Scalar> {
    y_fac: DMatrix<S>,
    m_fac: DMatrix<S>,
    mean_y: DVector<S>,
    mean_m: DVector<S>,
    obs: DVector<S>,
}

fn assemble_joint<S: Scalar>(
    co: &StackedCoefficients<S>,
    params: &ModelParameters<S>,
    data: &PanelData<S>,
    t: usize,
    tau: usize,
) -> Result<JointObsState<S>> {
    if tau > data.t_obs() || tau > co.len() {
        return Err(Error::dim(format!(
            "conditioning horizon {tau} beyond data ({}) or coefficients ({})",
            data.t_obs(),
            co.len()
        )));
    }
    let (n, ell, p) = (co.n, co.ell, co.p);
    let (lp, ns, nt, ny) = (ell * p, co.n_star(), co.n_tilde(), n + ell);
    let props = Propagators::new(co, tau)?;
    let jy = sel_y::<S>(n, ell, p);
    let jm = sel_m_star::<S>(n, ell, p);

    // Prior factor of m̃*_0: F0 F0' = E_2 ⊗ Σ_0 (both blocks share one draw).
    let l0 = linalg::chol_psd(&params.sigma0);
    let mut f0 = DMatrix::zeros(2 * n, n);
    f0.view_mut((0, 0), (n, n)).copy_from(&l0);
    f0.view_mut((n, 0), (n, n)).copy_from(&l0);

    let width = n + tau * nt;
    let l_xi = linalg::chol_psd(&co.sigma_xi);
    let mut y_fac = DMatrix::<S>::zeros(tau * ny, width);
    let mut m_fac = DMatrix::<S>::zeros(2 * n, width);
    let state_cols = |mat: &DMatrix<S>| mat.columns(n + lp, 2 * n).into_owned();
    for s in 1..=tau {
        let prior_load = &jy * state_cols(&props.state(0, s)) * &f0;
        y_fac
            .view_mut(((s - 1) * ny, 0), (ny, n))
            .copy_from(&prior_load);
        for beta in 1..=s {
            let load = &jy * props.pi_star(beta, s) * co.shock_embed(beta) * &l_xi;
            y_fac
                .view_mut(((s - 1) * ny, n + (beta - 1) * nt), (ny, nt))
                .copy_from(&load);
        }
    }
    m_fac
        .view_mut((0, 0), (2 * n, n))
        .copy_from(&(&jm * state_cols(&props.state(0, t)) * &f0));
    for beta in 1..=t {
        let load = &jm * props.pi_star(beta, t) * co.shock_embed(beta) * &l_xi;
        m_fac
            .view_mut((0, n + (beta - 1) * nt), (2 * n, nt))
            .copy_from(&load);
    }

    // Prior means: run the deterministic recursion from x*_0.
    let mut x0 = DVector::zeros(ns);
    x0.rows_mut(n, lp).copy_from(&data.z0_star);
    x0.rows_mut(n + lp, n).copy_from(&params.mu0);
    x0.rows_mut(n + lp + n, n).copy_from(&params.mu0);
    let mut mean_y = DVector::zeros(tau * ny);
    let mut mean_m = jm.clone() * &x0;
    let mut obs = DVector::zeros(tau * ny);
    let mut cur = x0;
    for s in 1..=tau {
        let mut next = co.nu_star(s) + co.q1(s) * &cur;
        co.q0_inv_apply(s, &mut next);
        cur = next;
        mean_y
            .rows_mut((s - 1) * ny, ny)
            .copy_from(&(&jy * &cur));
        obs.rows_mut((s - 1) * ny, ny).copy_from(&data.y(s));
        if s == t {
            mean_m = &jm * &cur;
        }
    }
    Ok(JointObsState { y_fac, m_fac, mean_y, mean_m, obs })
}

/// Unconditional (time-0) mean and covariance of the observation stack
/// `ȳ_τ = (y_1', ..., y_τ')'` under the coefficients' measure — the exact
/// Gaussian law the prediction-error log-likelihood must reproduce.
pub fn obs_joint_moments<S: Scalar>(
    co: &StackedCoefficients<S>,
    params: &ModelParameters<S>,
    data: &PanelData<S>,
    tau: usize,
) -> Result<(DVector<S>, DMatrix<S>)> {
    let joint = assemble_joint(co, params, data, 0, tau)?;
    let cov = &joint.y_fac * joint.y_fac.transpose();
    Ok((joint.mean_y, cov))
}

/// Directly condition the Kalman state `m̃*_t` on the observations
/// `ȳ_τ = (y_1, ..., y_τ)` by assembling the joint Gaussian of
/// `(ȳ_τ, m̃*_t)` from the propagators — no filtering recursion involved.
///
/// With `τ = t` this reproduces the filter, with `τ = T` the smoother; it is
/// the independent oracle both are checked against, and (under the
/// risk-neutral coefficients) the belief used by the pricing formulas.
pub fn cond_state_given_obs<S: Scalar>(
    co: &StackedCoefficients<S>,
    params: &ModelParameters<S>,
    data: &PanelData<S>,
    t: usize,
    tau: usize,
) -> Result<StateBelief<S>> {
    if t > tau {
        return Err(Error::invalid(format!("state time {t} after data horizon {tau}")));
    }
    let JointObsState { y_fac, m_fac, mean_y, mean_m, obs } =
        assemble_joint(co, params, data, t, tau)?;
    let (n, ny) = (co.n, co.n + co.ell);
    let sigma_yy = &y_fac * y_fac.transpose();
    let sigma_my = &m_fac * y_fac.transpose();
    let innov = obs - mean_y;
    // K' = Σ_yy^{-1} Σ_my'; pseudo-inverse cutoff 1e-10 relative.
    let rhs = {
        let mut r = DMatrix::zeros(tau * ny, 2 * n + 1);
        r.view_mut((0, 0), (tau * ny, 2 * n))
            .copy_from(&sigma_my.transpose());
        r.view_mut((0, 2 * n), (tau * ny, 1)).copy_from(&innov);
        r
    };
    let (solved, _) = linalg::solve_spd(&sigma_yy, &rhs, 1e-10, "cond_state_given_obs");
    let k_t = solved.columns(0, 2 * n).into_owned();
    let weighted_innov = solved.column(2 * n).into_owned();
    let mean = mean_m + sigma_my.clone() * weighted_innov;
    let cov = linalg::symmetrize(&(&m_fac * m_fac.transpose() - sigma_my * k_t));
    Ok(StateBelief { t, mean, cov })
}
