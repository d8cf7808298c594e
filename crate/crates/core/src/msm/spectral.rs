use std::fmt;

use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{count_transitions, transition_matrix, TransitionModel};
use crate::error::{invalid, Error, Result};
use crate::trajectory::Trajectory;

const MAX_EIGEN_ITER: usize = 10_000;
const IMAG_TOL: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-12;

/// An implied timescale in picoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Timescale {
    Finite(f64),
    /// Eigenvalue indistinguishable from one.
    Infinite,
    /// Non-positive eigenvalue: an oscillatory mode with no relaxation time.
    Undefined,
}

impl Timescale {
    /// `+inf` for [`Timescale::Infinite`], NaN for [`Timescale::Undefined`].
    pub fn as_f64(self) -> f64 {
        match self {
            Timescale::Finite(v) => v,
            Timescale::Infinite => f64::INFINITY,
            Timescale::Undefined => f64::NAN,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Timescale::Finite(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for Timescale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Timescale::Finite(v) => write!(f, "{v}"),
            Timescale::Infinite => f.write_str("inf"),
            Timescale::Undefined => f.write_str("undefined"),
        }
    }
}

/// `ITS = -tau / ln(lambda)`.
pub fn its_from_eigenvalue(lambda: f64, lag_time: f64) -> Timescale {
    if !(lambda > 0.0) {
        Timescale::Undefined
    } else if lambda >= 1.0 - UNIT_TOL {
        Timescale::Infinite
    } else {
        Timescale::Finite(-lag_time / lambda.ln())
    }
}

/// Leading eigenpairs of a transition matrix, sorted by modulus.
#[derive(Debug, Clone)]
pub struct SpectralSummary {
    pub lag_time: f64,
    pub eigenvalues: Vec<Complex<f64>>,
    /// Right eigenvectors; `None` for eigenvalues with a non-zero imaginary part.
    pub right: Vec<Option<DVector<f64>>>,
    pub left: Vec<Option<DVector<f64>>>,
    /// `its[i]` belongs to `eigenvalues[i + 1]`.
    pub its: Vec<Timescale>,
    /// Set when a retained eigenvalue was complex; moduli are used downstream.
    pub non_real: bool,
}

impl SpectralSummary {
    /// Real parts, or moduli for complex eigenvalues.
    pub fn effective_eigenvalues(&self) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .map(|z| if z.im.abs() > IMAG_TOL { z.norm() } else { z.re })
            .collect()
    }
}

fn sort_by_modulus(vals: &mut [(Complex<f64>, usize)]) {
    vals.sort_by(|a, b| {
        b.0.norm()
            .partial_cmp(&a.0.norm())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.0.re.partial_cmp(&a.0.re).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.1.cmp(&b.1))
    });
}

fn orient(mut v: DVector<f64>) -> DVector<f64> {
    let imax = v.iamax();
    if v[imax] < 0.0 {
        v.neg_mut();
    }
    v
}

/// Inverse iteration for the eigenvector of `m` belonging to the real
/// eigenvalue `lambda`.
fn inverse_iteration(m: &DMatrix<f64>, lambda: f64) -> Result<DVector<f64>> {
    let n = m.nrows();
    let mut shift = 1e-10 * lambda.abs().max(1.0);
    for _ in 0..8 {
        let a = m - DMatrix::identity(n, n) * (lambda + shift);
        let lu = a.lu();
        let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7919 % 13) as f64));
        v /= v.norm();
        let mut ok = true;
        for _ in 0..3 {
            match lu.solve(&v) {
                Some(w) if w.iter().all(|x| x.is_finite()) && w.norm() > 0.0 => {
                    v = &w / w.norm();
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(orient(v));
        }
        shift *= 100.0;
    }
    Err(Error::NoConvergence { max_iter: 24 })
}

fn spectrum_reversible(t: &TransitionModel, k: usize) -> Result<SpectralSummary> {
    let n = t.n_states();
    let pi = t.stationary()?;
    if pi.iter().any(|&p| p <= 0.0) {
        return Err(Error::Degenerate(
            "reversible spectrum needs a strictly positive stationary distribution".into(),
        ));
    }
    let sq: Vec<f64> = pi.iter().map(|p| p.sqrt()).collect();
    let m = t.matrix();
    let s = DMatrix::from_fn(n, n, |i, j| {
        0.5 * (sq[i] * m[(i, j)] / sq[j] + sq[j] * m[(j, i)] / sq[i])
    });
    let eig = SymmetricEigen::try_new(s, 1e-15, MAX_EIGEN_ITER)
        .ok_or(Error::NoConvergence { max_iter: MAX_EIGEN_ITER })?;
    let mut order: Vec<(Complex<f64>, usize)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &l)| (Complex::new(l, 0.0), i))
        .collect();
    sort_by_modulus(&mut order);
    order.truncate(k);

    let mut right = Vec::with_capacity(k);
    let mut left = Vec::with_capacity(k);
    for (rank, &(_, idx)) in order.iter().enumerate() {
        let u = eig.eigenvectors.column(idx);
        let mut r = DVector::from_fn(n, |i, _| u[i] / sq[i]);
        let mut l = DVector::from_fn(n, |i, _| u[i] * sq[i]);
        if rank == 0 {
            let ls = l.sum();
            l /= ls;
            r *= ls;
        } else if r[r.iamax()] < 0.0 {
            r.neg_mut();
            l.neg_mut();
        }
        right.push(Some(r));
        left.push(Some(l));
    }
    finish(t, order.into_iter().map(|(z, _)| z).collect(), right, left, false)
}

/// QR iteration can stall on matrices whose spectrum sits symmetrically on
/// the unit circle (deterministic cycles). A diagonal shift breaks the tie
/// without changing the eigenvectors.
fn schur_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    let n = m.nrows();
    for shift in [0.0, 0.5, -0.3] {
        let a = m + DMatrix::identity(n, n) * shift;
        if let Some(schur) = Schur::try_new(a, 1e-15, MAX_EIGEN_ITER) {
            return Ok(schur.complex_eigenvalues().iter().map(|z| z - shift).collect());
        }
    }
    Err(Error::NoConvergence { max_iter: MAX_EIGEN_ITER })
}

fn spectrum_general(t: &TransitionModel, k: usize) -> Result<SpectralSummary> {
    let m = t.matrix();
    let mut order: Vec<(Complex<f64>, usize)> = schur_eigenvalues(m)?
        .into_iter()
        .enumerate()
        .map(|(i, z)| (z, i))
        .collect();
    sort_by_modulus(&mut order);
    order.truncate(k);
    let vals: Vec<Complex<f64>> = order.iter().map(|&(z, _)| z).collect();

    let mut non_real = false;
    let mut right = Vec::with_capacity(k);
    let mut left = Vec::with_capacity(k);
    let mt = m.transpose();
    for (rank, z) in vals.iter().enumerate() {
        if z.im.abs() > IMAG_TOL {
            non_real = true;
            right.push(None);
            left.push(None);
            continue;
        }
        let mut r = inverse_iteration(m, z.re)?;
        let mut l = inverse_iteration(&mt, z.re)?;
        if rank == 0 {
            l /= l.sum();
            r /= r.dot(&l);
        }
        right.push(Some(r));
        left.push(Some(l));
    }
    if non_real {
        log::warn!(
            "transition matrix has complex eigenvalues among the leading {k}; \
             the chain is not reversible, using moduli"
        );
    }
    finish(t, vals, right, left, non_real)
}

fn finish(
    t: &TransitionModel,
    eigenvalues: Vec<Complex<f64>>,
    right: Vec<Option<DVector<f64>>>,
    left: Vec<Option<DVector<f64>>>,
    non_real: bool,
) -> Result<SpectralSummary> {
    let mut summary = SpectralSummary {
        lag_time: t.lag_time(),
        eigenvalues,
        right,
        left,
        its: Vec::new(),
        non_real,
    };
    summary.its = summary
        .effective_eigenvalues()
        .iter()
        .skip(1)
        .map(|&l| its_from_eigenvalue(l, t.lag_time()))
        .collect();
    Ok(summary)
}

/// Top-`k` eigenpairs by modulus. Reversible models go through the
/// symmetrised similarity transform and always yield a real spectrum; other
/// models use a real Schur decomposition with inverse iteration for vectors.
pub fn eigen_spectrum(t: &TransitionModel, k: usize) -> Result<SpectralSummary> {
    let n = t.n_states();
    if k == 0 || k > n {
        return invalid(format!("requested {k} eigenpairs of a {n}-state model"));
    }
    if t.is_reversible() {
        spectrum_reversible(t, k)
    } else {
        spectrum_general(t, k)
    }
}

/// Implied timescales as a function of lag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItsTable {
    pub lags: Vec<usize>,
    pub lag_ps: Vec<f64>,
    /// `its[l][i]` is the `(i + 1)`-th timescale at `lags[l]`.
    pub its: Vec<Vec<Timescale>>,
}

impl ItsTable {
    pub fn k(&self) -> usize {
        self.its.first().map_or(0, Vec::len)
    }

    /// Timescale `i` (0-based) across lags as floats.
    pub fn curve(&self, i: usize) -> Vec<f64> {
        self.its.iter().map(|row| row[i].as_f64()).collect()
    }
}

/// ITS at each lag. Entries beyond the number of active states are
/// reported as [`Timescale::Undefined`].
pub fn implied_timescales(
    trajs: &[Trajectory],
    lags: &[usize],
    k: usize,
    reversible: bool,
) -> Result<ItsTable> {
    if lags.is_empty() {
        return invalid("no lags requested");
    }
    let rows: Vec<Result<(f64, Vec<Timescale>)>> = lags
        .par_iter()
        .map(|&lag| {
            let c = count_transitions(trajs, lag)?;
            let t = transition_matrix(&c, reversible)?;
            let n_eig = (k + 1).min(t.n_states());
            let s = eigen_spectrum(&t, n_eig)?;
            let mut its = s.its;
            its.resize(k, Timescale::Undefined);
            Ok((c.lag_time(), its))
        })
        .collect();
    let mut table = ItsTable { lags: lags.to_vec(), lag_ps: Vec::new(), its: Vec::new() };
    for r in rows {
        let (ps, its) = r?;
        table.lag_ps.push(ps);
        table.its.push(its);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> TransitionModel {
        TransitionModel::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]], 1.0).unwrap()
    }

    #[test]
    fn two_state_eigenvalues() {
        for rev in [false, true] {
            let t = TransitionModel::new(two_state().matrix().clone(), 1.0, rev).unwrap();
            let s = eigen_spectrum(&t, 2).unwrap();
            assert!((s.eigenvalues[0].re - 1.0).abs() < 1e-12);
            assert!((s.eigenvalues[1].re - 0.7).abs() < 1e-12);
            let its = s.its[0].finite().unwrap();
            assert!((its - (-1.0 / 0.7f64.ln())).abs() < 1e-10);
            let l = s.left[0].as_ref().unwrap();
            assert!((l[0] - 2.0 / 3.0).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let t = TransitionModel::new(DMatrix::identity(4, 4), 1.0, false).unwrap();
        let s = eigen_spectrum(&t, 4).unwrap();
        assert!(s.eigenvalues.iter().all(|z| (z.re - 1.0).abs() < 1e-12));
        assert!(s.its.iter().all(|&x| x == Timescale::Infinite));
    }

    #[test]
    fn its_edge_cases() {
        assert_eq!(its_from_eigenvalue(1.0, 1.0), Timescale::Infinite);
        assert_eq!(its_from_eigenvalue(0.0, 1.0), Timescale::Undefined);
        assert_eq!(its_from_eigenvalue(-0.3, 1.0), Timescale::Undefined);
        let v = its_from_eigenvalue((-1.0f64).exp(), 1.0).finite().unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        let v = its_from_eigenvalue(0.7, 1.0).finite().unwrap();
        assert!((v - 2.803_673_252_057_285).abs() < 1e-9);
    }

    #[test]
    fn rotation_chain_warns_and_uses_moduli() {
        let t = TransitionModel::from_rows(
            &[vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8], vec![0.8, 0.1, 0.1]],
            1.0,
        )
        .unwrap();
        let s = eigen_spectrum(&t, 3).unwrap();
        assert!(s.non_real);
        let eff = s.effective_eigenvalues();
        // eigenvalues of the circulant: 1 and 0.1 + 0.8 w + 0.1 w^2, |.| = 0.7
        assert!((eff[1] - 0.7).abs() < 1e-10);
        assert!(s.right[1].is_none());
    }

    #[test]
    fn k_out_of_range() {
        assert!(eigen_spectrum(&two_state(), 3).is_err());
        assert!(eigen_spectrum(&two_state(), 0).is_err());
    }

    #[test]
    fn deterministic_cycle_has_unit_modulus_spectrum() {
        let n = 4;
        let m = DMatrix::from_fn(n, n, |i, j| if j == (i + 1) % n { 1.0 } else { 0.0 });
        let t = TransitionModel::new(m, 1.0, false).unwrap();
        let s = eigen_spectrum(&t, 4).unwrap();
        assert!(s.non_real);
        for z in &s.eigenvalues {
            assert!((z.norm() - 1.0).abs() < 1e-10);
        }
        assert!(s.its.iter().all(|t| t.finite().is_none()));
    }
}
