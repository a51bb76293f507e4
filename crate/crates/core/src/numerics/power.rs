use serde::{Deserialize, Serialize};

use super::{vector, Matrix, Rng};
use crate::error::{Error, Result};

/// The linear part of a layer as apply / apply-adjoint.
pub trait LinearOperator {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64>;
}

impl LinearOperator for Matrix {
    fn in_dim(&self) -> usize {
        self.cols()
    }

    fn out_dim(&self) -> usize {
        self.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matvec(x)
    }

    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.matvec_t(y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularTriple {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Outcome of a power iteration run. Non-convergence is reported, not
/// raised: training keeps the estimate, verification calls
/// [`PowerIteration::into_converged`].
#[derive(Clone, Debug)]
pub struct PowerIteration {
    pub triple: SingularTriple,
    pub iterations: usize,
    /// `||A^T u - sigma v||`
    pub residual: f64,
    pub converged: bool,
}

impl PowerIteration {
    pub fn into_converged(self) -> Result<SingularTriple> {
        if self.converged {
            Ok(self.triple)
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
                sigma: self.triple.sigma,
                residual: self.residual,
            })
        }
    }
}

/// Top singular triple of `op` by power iteration on `A^T A`.
///
/// Starts from `warm_start` when given, otherwise from a uniform point on the
/// unit sphere drawn from `rng`. Converged once the relative change of the
/// sigma estimate over one iteration drops below `tol`.
pub fn power_iteration(
    op: &dyn LinearOperator,
    warm_start: Option<&[f64]>,
    max_iters: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<PowerIteration> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("power_iteration: tol must be > 0, got {tol}")));
    }
    let n = op.in_dim();
    if n == 0 || op.out_dim() == 0 {
        return Err(Error::InvalidInput("power_iteration: empty operator".into()));
    }
    let mut v = match warm_start {
        Some(w) if w.len() != n => {
            return Err(Error::Shape(format!(
                "warm start has length {}, operator input is {n}",
                w.len()
            )))
        }
        Some(w) => {
            let mut v = w.to_vec();
            if vector::normalize(&mut v) == 0.0 || !v.iter().all(|x| x.is_finite()) {
                rng.unit_vector(n)
            } else {
                v
            }
        }
        None => rng.unit_vector(n),
    };

    let mut av = op.apply(&v);
    let mut sigma = vector::norm(&av);
    if sigma == 0.0 {
        // Start landed in the null space; retry once from a fresh point.
        v = rng.unit_vector(n);
        av = op.apply(&v);
        sigma = vector::norm(&av);
    }
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters && sigma > 0.0 {
        iterations += 1;
        let mut z = op.apply_adjoint(&av);
        if vector::normalize(&mut z) == 0.0 {
            break;
        }
        v = z;
        av = op.apply(&v);
        let next = vector::norm(&av);
        let change = (next - sigma).abs();
        sigma = next;
        if change <= tol * sigma {
            converged = true;
            break;
        }
    }
    if sigma == 0.0 {
        // Zero operator (or zero on every tried direction): any unit pair works.
        let mut u = vec![0.0; op.out_dim()];
        u[0] = 1.0;
        return Ok(PowerIteration {
            triple: SingularTriple { sigma: 0.0, u, v },
            iterations,
            residual: 0.0,
            converged: true,
        });
    }
    let mut u = av;
    vector::scale(&mut u, 1.0 / sigma);
    let atu = op.apply_adjoint(&u);
    let residual = vector::norm(&vector::sub(&atu, &v.iter().map(|x| x * sigma).collect::<Vec<_>>()));
    Ok(PowerIteration {
        triple: SingularTriple { sigma, u, v },
        iterations,
        residual,
        converged,
    })
}

/// `(A - sum sigma_i u_i v_i^T) P`, with `P` projecting out the found right vectors.
struct Deflated<'a> {
    op: &'a dyn LinearOperator,
    found: &'a [SingularTriple],
}

impl Deflated<'_> {
    fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut p = x.to_vec();
        for t in self.found {
            let d = vector::dot(&t.v, &p);
            vector::axpy(-d, &t.v, &mut p);
        }
        p
    }
}

impl LinearOperator for Deflated<'_> {
    fn in_dim(&self) -> usize {
        self.op.in_dim()
    }

    fn out_dim(&self) -> usize {
        self.op.out_dim()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let px = self.project(x);
        let mut y = self.op.apply(&px);
        for t in self.found {
            let d = vector::dot(&t.v, &px);
            vector::axpy(-t.sigma * d, &t.u, &mut y);
        }
        y
    }

    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.op.apply_adjoint(y);
        for t in self.found {
            let d = vector::dot(&t.u, y);
            vector::axpy(-t.sigma * d, &t.v, &mut x);
        }
        self.project(&x)
    }
}

/// Persistent top-k singular estimates of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub k: usize,
    pub triples: Vec<SingularTriple>,
    /// Refresh steps since the last full re-convergence.
    pub stale_counter: usize,
    /// Whether every triple met the tolerance at the last full convergence.
    pub converged: bool,
}

impl SpectralState {
    pub fn sigma_max(&self) -> f64 {
        self.triples.first().map_or(0.0, |t| t.sigma)
    }

    pub fn right_vectors(&self) -> Vec<Vec<f64>> {
        self.triples.iter().map(|t| t.v.clone()).collect()
    }

    /// Warm-started refresh with a fixed number of power steps per triple.
    pub fn refresh(&mut self, op: &dyn LinearOperator, steps: usize, rng: &mut Rng) -> Result<()> {
        let mut found: Vec<SingularTriple> = Vec::with_capacity(self.k);
        for i in 0..self.k {
            let warm = self.triples.get(i).map(|t| t.v.clone());
            let deflated = Deflated { op, found: &found };
            // tol is irrelevant here: the run is capped by `steps`.
            let run = power_iteration(&deflated, warm.as_deref(), steps, f64::MIN_POSITIVE, rng)?;
            found.push(run.triple);
        }
        self.triples = found;
        self.stale_counter += 1;
        Ok(())
    }
}

/// Top-k singular triples by power iteration with deflation.
///
/// Pass the previous state as `warm` to start each triple from its last
/// right vector. `converged` on the result records whether every triple met `tol`.
pub fn deflated_topk(
    op: &dyn LinearOperator,
    k: usize,
    tol: f64,
    max_iters: usize,
    warm: Option<&SpectralState>,
    rng: &mut Rng,
) -> Result<SpectralState> {
    if k == 0 || k > op.in_dim().min(op.out_dim()) {
        return Err(Error::InvalidInput(format!(
            "deflated_topk: k = {k} outside 1..={}",
            op.in_dim().min(op.out_dim())
        )));
    }
    let mut found: Vec<SingularTriple> = Vec::with_capacity(k);
    let mut converged = true;
    for i in 0..k {
        let start = warm.and_then(|w| w.triples.get(i)).map(|t| t.v.clone());
        let deflated = Deflated { op, found: &found };
        let run = power_iteration(&deflated, start.as_deref(), max_iters, tol, rng)?;
        converged &= run.converged;
        found.push(run.triple);
    }
    Ok(SpectralState {
        k,
        triples: found,
        stale_counter: 0,
        converged,
    })
}
