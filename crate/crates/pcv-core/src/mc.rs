//! Deterministic-seed Monte Carlo simulation of the stacked system, used as
//! an independent oracle for every closed-form quantity in the crate.
//!
//! [`simulate`] draws paths of `(b̃, z, m̃)` under whichever measure the
//! supplied coefficients encode (physical, risk-neutral, or forward), by the
//! exact discretization of the linear system — no time-step error. Runs
//! conditioned on observational information are two-stage: the state
//! `m̃*_t` is first drawn from its belief, then innovations are propagated
//! (full-information runs are the zero-covariance special case). Derived
//! per-path quantities — log prices, accumulated discounts — come from the
//! same identities the pricing code uses, so an estimator and a closed form
//! agree only if both sides implement the model consistently.
//!
//! Reproducibility is absolute: every path group has its own
//! counter-indexed RNG stream, so a path's draws depend only on the seed and
//! its index, never on thread scheduling, and [`estimate`] reduces with a
//! fixed pairwise summation tree. The same [`SimConfig`] therefore yields
//! bit-identical results, serial or parallel.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::pricing::ValuationPoint;
use crate::scalar::{cst, Scalar};
use crate::stacked::{MeasureSpec, StackedCoefficients};

/// A reproducible simulation request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    /// Measure the coefficients must encode.
    pub measure: MeasureSpec,
    /// Number of independent path groups (each group is one path, or an
    /// antithetic pair).
    pub n_paths: usize,
    /// RNG seed; together with a path's group index it fixes every draw.
    pub seed: u64,
    /// Conditioning date; must match the valuation point.
    pub t_start: usize,
    /// Last simulated date.
    pub horizon: usize,
    /// Mirror every group's Gaussian draws to cancel odd-order error.
    pub antithetic: bool,
}

/// Simulated paths of the stacked system from one conditioning date.
///
/// Trajectories are stored flat (one matrix for all paths) to keep
/// million-path oracles cheap; [`PathSet::view`] exposes a single path.
#[derive(Debug, Clone)]
pub struct PathSet<S: Scalar> {
    t_start: usize,
    horizon: usize,
    n: usize,
    ell: usize,
    p: usize,
    antithetic: bool,
    /// Observed companion block `z*_t` at the conditioning date.
    pub z_star_start: DVector<S>,
    /// Log book values `ln 𝖡_t` at the conditioning date.
    pub log_book_start: DVector<S>,
    /// Accumulated discount `D_t` at the conditioning date.
    pub discount_start: S,
    /// Drawn (or known) states `m̃*_t`, one column per path.
    m_star: DMatrix<S>,
    /// Per-period rows `(b̃_s, z_s, m̃_s, ln 𝖡_s, D_s)`, columns grouped by
    /// path: column `i·(horizon-t) + (s-t-1)` holds path `i` at date `s`.
    traj: DMatrix<S>,
}

impl<S: Scalar> PathSet<S> {
    /// Number of stored paths (double the group count when antithetic).
    pub fn len(&self) -> usize {
        self.m_star.ncols()
    }

    /// Whether the set holds no paths.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Conditioning date.
    pub fn t_start(&self) -> usize {
        self.t_start
    }

    /// Last simulated date.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Whether paths are stored as antithetic pairs `(2j, 2j+1)`.
    pub fn antithetic(&self) -> bool {
        self.antithetic
    }

    /// Accessor for one path.
    pub fn view(&self, path: usize) -> PathView<'_, S> {
        assert!(path < self.len(), "path {path} out of {}", self.len());
        PathView { set: self, path }
    }

    fn periods(&self) -> usize {
        self.horizon - self.t_start
    }

    fn rows(&self) -> usize {
        3 * self.n + self.ell + 1
    }
}

/// One simulated path; dates run over `t_start ..= horizon` with the
/// conditioning-date values taken from the valuation point (and the drawn
/// state).
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a, S: Scalar> {
    set: &'a PathSet<S>,
    path: usize,
}

impl<'a, S: Scalar> PathView<'a, S> {
    fn col(&self, s: usize) -> usize {
        let t = self.set.t_start;
        assert!(
            s > t && s <= self.set.horizon,
            "date {s} outside the simulated window {}..={}",
            t + 1,
            self.set.horizon
        );
        self.path * self.set.periods() + (s - t - 1)
    }

    fn segment(&self, s: usize, offset: usize, len: usize) -> DVector<S> {
        let col = self.col(s);
        self.set.traj.column(col).rows(offset, len).into_owned()
    }

    /// Drawn state `m̃*_t` at the conditioning date.
    pub fn m_star_start(&self) -> DVector<S> {
        self.set.m_star.column(self.path).into_owned()
    }

    /// Observation `b̃_s`, `s = t+1..=horizon`.
    pub fn b(&self, s: usize) -> DVector<S> {
        self.segment(s, 0, self.set.n)
    }

    /// Macro block `z_s`; `s = t` reads the conditioning data.
    pub fn z(&self, s: usize) -> DVector<S> {
        let (n, ell) = (self.set.n, self.set.ell);
        if s == self.set.t_start {
            self.set.z_star_start.rows(0, ell).into_owned()
        } else {
            self.segment(s, n, ell)
        }
    }

    /// State `m̃_s`; `s = t` reads the drawn state.
    pub fn m(&self, s: usize) -> DVector<S> {
        let (n, ell) = (self.set.n, self.set.ell);
        if s == self.set.t_start {
            self.set.m_star.column(self.path).rows(0, n).into_owned()
        } else {
            self.segment(s, n + ell, n)
        }
    }

    /// Log book values `ln 𝖡_s`.
    pub fn log_book(&self, s: usize) -> DVector<S> {
        let (n, ell) = (self.set.n, self.set.ell);
        if s == self.set.t_start {
            self.set.log_book_start.clone()
        } else {
            self.segment(s, 2 * n + ell, n)
        }
    }

    /// Accumulated discount `D_s = exp(-Σ_{β=1}^s r̃_β)`.
    pub fn discount(&self, s: usize) -> S {
        if s == self.set.t_start {
            self.set.discount_start
        } else {
            self.set.traj[(self.set.rows() - 1, self.col(s))]
        }
    }

    /// Log price `P̃_s = m̃_s + ln 𝖡_s`.
    pub fn log_price(&self, s: usize) -> DVector<S> {
        self.m(s) + self.log_book(s)
    }

    /// Price level `exp(P̃_s)`.
    pub fn price(&self, s: usize) -> DVector<S> {
        self.log_price(s).map(|x| x.exp())
    }

    /// Stacked state `m̃*_s = (m̃_s', m̃_{s-1}')'`.
    pub fn m_star(&self, s: usize) -> DVector<S> {
        if s == self.set.t_start {
            return self.m_star_start();
        }
        let n = self.set.n;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&self.m(s));
        out.rows_mut(n, n).copy_from(&self.m(s - 1));
        out
    }

    /// Companion block `z*_s = (z_s', …, z_{s-p+1}')'`, assembled from the
    /// simulated macro blocks and the conditioning data.
    pub fn z_star(&self, s: usize) -> DVector<S> {
        let set = self.set;
        if s == set.t_start {
            return set.z_star_start.clone();
        }
        let (ell, p, t) = (set.ell, set.p, set.t_start);
        let mut out = DVector::zeros(ell * p);
        for lag in 0..p {
            let date = s - lag;
            let block = if date > t {
                self.z(date)
            } else {
                set.z_star_start.rows((t - date) * ell, ell).into_owned()
            };
            out.rows_mut(lag * ell, ell).copy_from(&block);
        }
        out
    }

    /// Return shock `u_s` recovered from the observation identity
    /// `b̃_s = ν_{b,s} + E_s z*_{s-1} + Ψ_{b,s} m̃*_s + G_s u_s` — a
    /// distributional diagnostic that exercises the simulated system end to
    /// end (e.g. the martingale condition `E[e^{u_i - Σ_uu,ii/2}] = 1`).
    pub fn recovered_u(&self, co: &StackedCoefficients<S>, s: usize) -> DVector<S> {
        let residual = self.b(s)
            - &co.nu_b[s - 1]
            - &co.e[s - 1] * self.z_star(s - 1)
            - &co.psi_b[s - 1] * self.m_star(s);
        let mut u = residual;
        for i in 0..self.set.n {
            u[i] /= co.g[s - 1][i];
        }
        u
    }
}

/// Simulate paths of the system encoded by `co` from the valuation point,
/// two-stage when the point's belief carries uncertainty.
///
/// The path count is `config.n_paths`, doubled when antithetic (pairs are
/// adjacent). Fails when the request is inconsistent with the coefficients
/// or the point, or when `Σ_ξξ` is not positive semidefinite within the
/// library tolerance.
pub fn simulate<S: Scalar + Send + Sync>(
    config: &SimConfig,
    co: &StackedCoefficients<S>,
    point: &ValuationPoint<S>,
) -> Result<PathSet<S>> {
    let (n, ell, p) = (co.n, co.ell, co.p);
    let nt = co.n_tilde();
    let t = config.t_start;
    if config.n_paths == 0 {
        return Err(Error::invalid("simulation needs at least one path"));
    }
    if config.measure != co.measure {
        return Err(Error::invalid(format!(
            "config asks for {:?} but the coefficients encode {:?}",
            config.measure, co.measure
        )));
    }
    if let MeasureSpec::Forward { t: ft, .. } = config.measure {
        if ft != t {
            return Err(Error::invalid(format!(
                "forward measure conditions at t={ft}, simulation starts at t={t}"
            )));
        }
    }
    if point.t != t {
        return Err(Error::invalid(format!(
            "valuation point at t={} but simulation starts at t={t}",
            point.t
        )));
    }
    if t >= config.horizon || config.horizon > co.len() {
        return Err(Error::invalid(format!(
            "simulation window t+1..={} outside the coefficient window 1..={} (t={t})",
            config.horizon,
            co.len()
        )));
    }
    if point.belief.mean.nrows() != 2 * n || point.y_star.nrows() != n + ell * p {
        return Err(Error::dim(format!(
            "valuation point sized for {} state / {} observed coordinates, expected {} / {}",
            point.belief.mean.nrows(),
            point.y_star.nrows(),
            2 * n,
            n + ell * p
        )));
    }
    if !linalg::is_psd(&co.sigma_xi) {
        return Err(Error::numerical(
            "shock covariance is not positive semidefinite",
        ));
    }
    if !linalg::is_psd(&point.belief.cov) {
        return Err(Error::numerical(
            "belief covariance is not positive semidefinite",
        ));
    }
    let chol_xi = linalg::chol_psd(&co.sigma_xi);
    let chol_belief = linalg::chol_psd(&point.belief.cov);
    let z_star_start = point.y_star.rows(n, ell * p).into_owned();

    let periods = config.horizon - t;
    let rows = 3 * n + ell + 1;
    let per_path = n + ell * p + 2 * n; // draws: state stage + per-period shocks
    let draws = 2 * n + periods * nt;
    let _ = per_path;
    let copies = if config.antithetic { 2 } else { 1 };
    let total = config.n_paths * copies;

    let mut m_star = DMatrix::zeros(2 * n, total);
    let mut traj = DMatrix::zeros(rows, periods * total);
    // Each group owns a disjoint slice of both matrices (columns are grouped
    // by path), so parallel filling is race-free and, with one RNG stream
    // per group, scheduling-independent.
    m_star
        .as_mut_slice()
        .par_chunks_mut(2 * n * copies)
        .zip(traj.as_mut_slice().par_chunks_mut(rows * periods * copies))
        .enumerate()
        .for_each(|(group, (m_chunk, t_chunk))| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(group as u64);
            let eps: Vec<S> = (0..draws)
                .map(|_| cst::<S>(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            for copy in 0..copies {
                let sign = if copy == 0 { S::one() } else { -S::one() };
                let (m_part, t_part) = (
                    &mut m_chunk[copy * 2 * n..(copy + 1) * 2 * n],
                    &mut t_chunk[copy * rows * periods..(copy + 1) * rows * periods],
                );
                fill_path(
                    co,
                    point,
                    &chol_xi,
                    &chol_belief,
                    &z_star_start,
                    t,
                    periods,
                    &eps,
                    sign,
                    m_part,
                    t_part,
                );
            }
        });

    if !m_star.iter().chain(traj.iter()).all(|x| x.is_finite()) {
        return Err(Error::numerical(
            "simulation produced non-finite values (system coefficients diverge)",
        ));
    }
    Ok(PathSet {
        t_start: t,
        horizon: config.horizon,
        n,
        ell,
        p,
        antithetic: config.antithetic,
        z_star_start,
        log_book_start: point.log_book.clone(),
        discount_start: point.discount,
        m_star,
        traj,
    })
}

/// Exact one-path recursion: stage one draws `m̃*_t` from the belief, stage
/// two propagates `m̃_s = ν_{m,s} + m̃_{s-1} + w_s`,
/// `z_s = ν_{z,s} + A z*_{s-1} + v_s`, and
/// `b̃_s = ν_{b,s} + E_s z*_{s-1} + Ψ_{b,s} m̃*_s + G_s u_s`, accumulating
/// `ln 𝖡_s` and the predictable discount `D_s = D_{s-1} e^{-r̃_s}` with
/// `r̃_s = (z_{s-1})_1`.
#[allow(clippy::too_many_arguments)]
fn fill_path<S: Scalar>(
    co: &StackedCoefficients<S>,
    point: &ValuationPoint<S>,
    chol_xi: &DMatrix<S>,
    chol_belief: &DMatrix<S>,
    z_star_start: &DVector<S>,
    t: usize,
    periods: usize,
    eps: &[S],
    sign: S,
    m_out: &mut [S],
    traj_out: &mut [S],
) {
    let (n, ell) = (co.n, co.ell);
    let nt = co.n_tilde();
    let rows = 3 * n + ell + 1;

    let eps0 = DVector::from_fn(2 * n, |i, _| sign * eps[i]);
    let m_star0 = &point.belief.mean + chol_belief * eps0;
    m_out.copy_from_slice(m_star0.as_slice());

    let mut m_prev = m_star0.rows(0, n).into_owned();
    let mut z_star = z_star_start.clone();
    let mut log_book = point.log_book.clone();
    let mut discount = point.discount;
    let mut m_star_s = DVector::zeros(2 * n);
    for j in 0..periods {
        let s = t + 1 + j;
        let eps_s = DVector::from_fn(nt, |i, _| sign * eps[2 * n + j * nt + i]);
        let xi = chol_xi * eps_s;

        m_star_s.rows_mut(n, n).copy_from(&m_prev);
        let m_s = &co.nu_m[s - 1] + &m_prev + xi.rows(n + ell, n);
        m_star_s.rows_mut(0, n).copy_from(&m_s);

        let mut b_s = &co.nu_b[s - 1] + &co.e[s - 1] * &z_star + &co.psi_b[s - 1] * &m_star_s;
        for i in 0..n {
            b_s[i] += co.g[s - 1][i] * xi[i];
        }
        let z_s = &co.nu_z[s - 1] + &co.a_coef * &z_star + xi.rows(n, ell);

        discount *= (-z_star[0]).exp();
        log_book += &b_s;

        let col = &mut traj_out[j * rows..(j + 1) * rows];
        col[..n].copy_from_slice(b_s.as_slice());
        col[n..n + ell].copy_from_slice(z_s.as_slice());
        col[n + ell..2 * n + ell].copy_from_slice(m_s.as_slice());
        col[2 * n + ell..3 * n + ell].copy_from_slice(log_book.as_slice());
        col[rows - 1] = discount;

        for i in (0..ell * co.p - ell).rev() {
            z_star[ell + i] = z_star[i];
        }
        z_star.rows_mut(0, ell).copy_from(&z_s);
        m_prev = m_s;
    }
}

/// Sample mean and standard error of a payoff over the paths.
///
/// Antithetic pairs are averaged before the variance is taken (their
/// negative correlation is a feature, not noise), so the error bar is valid
/// either way. Reduction uses a fixed pairwise tree for determinism; a
/// single group yields a zero standard error.
pub fn estimate<S, F>(paths: &PathSet<S>, payoff: F) -> (S, S)
where
    S: Scalar + Send + Sync,
    F: Fn(PathView<'_, S>) -> S + Sync,
{
    let values: Vec<S> = (0..paths.len())
        .into_par_iter()
        .map(|i| payoff(paths.view(i)))
        .collect();
    let group_means: Vec<S> = if paths.antithetic {
        values
            .chunks_exact(2)
            .map(|pair| (pair[0] + pair[1]) * cst::<S>(0.5))
            .collect()
    } else {
        values
    };
    let count = group_means.len();
    let mean = pairwise_sum(&group_means) / cst::<S>(count as f64);
    if count < 2 {
        return (mean, S::zero());
    }
    let sq_dev: Vec<S> = group_means
        .iter()
        .map(|&q| (q - mean) * (q - mean))
        .collect();
    let var = pairwise_sum(&sq_dev) / cst::<S>((count - 1) as f64);
    (mean, (var / cst::<S>(count as f64)).sqrt())
}

/// Deterministic pairwise summation (order-independent by construction and
/// more accurate than left-to-right folding on large samples).
fn pairwise_sum<S: Scalar>(xs: &[S]) -> S {
    if xs.len() <= 32 {
        return xs.iter().copied().fold(S::zero(), |acc, x| acc + x);
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
