//! Tucker-2 factorization over the output- and input-channel modes of a
//! convolution kernel; spatial modes keep identity factors.

use super::{mode_product, symmetric_eigen, unfold, Matrix, Tensor4};
use crate::error::{Error, Result};

/// `kernel ≈ core ×₁ u_out ×₂ u_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerFactors {
    /// dims `(R2, R1, H, W)`
    pub core: Tensor4,
    /// `O × R2`, orthonormal columns
    pub u_out: Matrix,
    /// `I × R1`, orthonormal columns
    pub u_in: Matrix,
}

impl TuckerFactors {
    pub fn new(core: Tensor4, u_out: Matrix, u_in: Matrix) -> Result<Self> {
        let [r2, r1, _, _] = core.dims();
        if u_out.cols() != r2 || u_in.cols() != r1 {
            return Err(Error::arg(format!(
                "core dims {:?} do not match factor widths ({}, {})",
                core.dims(),
                u_out.cols(),
                u_in.cols()
            )));
        }
        if r2 > u_out.rows() || r1 > u_in.rows() {
            return Err(Error::arg("factor ranks exceed mode sizes"));
        }
        Ok(Self { core, u_out, u_in })
    }

    /// `(r1, r2)` = (input rank, output rank)
    pub fn ranks(&self) -> (usize, usize) {
        (self.u_in.cols(), self.u_out.cols())
    }

    pub fn kernel_dims(&self) -> [usize; 4] {
        let [_, _, h, w] = self.core.dims();
        [self.u_out.rows(), self.u_in.rows(), h, w]
    }
}

/// `core ×₁ u_out ×₂ u_in`
pub fn reconstruct(f: &TuckerFactors) -> Tensor4 {
    let t = mode_product(&f.core, &f.u_out, 1).expect("factor shapes validated");
    mode_product(&t, &f.u_in, 2).expect("factor shapes validated")
}

fn check_ranks(dims: [usize; 4], r1: usize, r2: usize) -> Result<()> {
    let [o, i, _, _] = dims;
    if r1 == 0 || r1 > i {
        return Err(Error::arg(format!("input rank r1 must be in 1..={i}, got {r1}")));
    }
    if r2 == 0 || r2 > o {
        return Err(Error::arg(format!("output rank r2 must be in 1..={o}, got {r2}")));
    }
    Ok(())
}

/// All left singular vectors of an unfolding, ordered by singular value.
fn left_basis(a: &Matrix) -> Result<Matrix> {
    Ok(symmetric_eigen(&a.gram_rows())?.1)
}

/// Full left singular bases of both channel unfoldings of one kernel.
///
/// HOSVD factors at any `(r1, r2)` are the leading columns of these bases, so
/// a single `Tucker2Basis` serves a whole nested rank grid.
#[derive(Debug, Clone)]
pub struct Tucker2Basis {
    kernel: Tensor4,
    out_basis: Matrix,
    in_basis: Matrix,
}

impl Tucker2Basis {
    pub fn new(w: &Tensor4) -> Result<Self> {
        Ok(Self {
            out_basis: left_basis(&unfold(w, 1)?)?,
            in_basis: left_basis(&unfold(w, 2)?)?,
            kernel: w.clone(),
        })
    }

    pub fn kernel(&self) -> &Tensor4 {
        &self.kernel
    }

    pub fn truncate(&self, r1: usize, r2: usize) -> Result<TuckerFactors> {
        check_ranks(self.kernel.dims(), r1, r2)?;
        let u_out = self.out_basis.leading_columns(r2);
        let u_in = self.in_basis.leading_columns(r1);
        let core = project(&self.kernel, &u_out, &u_in);
        Ok(TuckerFactors { core, u_out, u_in })
    }
}

/// `w ×₁ u_outᵀ ×₂ u_inᵀ`
fn project(w: &Tensor4, u_out: &Matrix, u_in: &Matrix) -> Tensor4 {
    let t = mode_product(w, &u_out.transpose(), 1).expect("shapes checked");
    mode_product(&t, &u_in.transpose(), 2).expect("shapes checked")
}

/// One-shot Tucker-2 via truncated HOSVD.
pub fn tucker2_hosvd(w: &Tensor4, r1: usize, r2: usize) -> Result<TuckerFactors> {
    check_ranks(w.dims(), r1, r2)?;
    Tucker2Basis::new(w)?.truncate(r1, r2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HooiOptions {
    pub max_iters: usize,
    /// Stop once the relative change of the reconstruction error drops below this.
    pub tol: f64,
}

impl Default for HooiOptions {
    fn default() -> Self {
        Self {
            max_iters: 10,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HooiReport {
    pub factors: TuckerFactors,
    /// Relative Frobenius reconstruction error; entry 0 is the HOSVD start.
    pub errors: Vec<f64>,
    pub iterations: usize,
}

impl HooiReport {
    pub fn final_error(&self) -> f64 {
        *self.errors.last().expect("at least the initial error")
    }
}

/// Tucker-2 refined by higher-order orthogonal iteration, started from HOSVD.
///
/// The returned error history is non-increasing: an update that would raise
/// the error (beyond round-off of 1e-10) ends the iteration and is discarded.
pub fn tucker2_hooi(w: &Tensor4, r1: usize, r2: usize, opts: HooiOptions) -> Result<HooiReport> {
    if opts.max_iters == 0 {
        return Err(Error::arg("max_iters must be at least 1"));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::arg("tol must be positive"));
    }
    let mut factors = tucker2_hosvd(w, r1, r2)?;
    let mut errors = vec![reconstruct(&factors).relative_error(w)];
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        let prev = *errors.last().unwrap();
        if prev == 0.0 {
            break;
        }
        let partial_in = mode_product(w, &factors.u_in.transpose(), 2)?;
        let u_out = left_basis(&unfold(&partial_in, 1)?)?.leading_columns(r2);
        let partial_out = mode_product(w, &u_out.transpose(), 1)?;
        let u_in = left_basis(&unfold(&partial_out, 2)?)?.leading_columns(r1);
        let core = mode_product(&partial_out, &u_in.transpose(), 2)?;
        let candidate = TuckerFactors { core, u_out, u_in };
        let err = reconstruct(&candidate).relative_error(w);
        iterations += 1;
        if err > prev + 1e-10 {
            log::debug!("hooi stopped at iteration {iterations}: error rose {prev} -> {err}");
            break;
        }
        let (err, accepted) = if err <= prev { (err, candidate) } else { (prev, factors) };
        factors = accepted;
        errors.push(err);
        if (prev - err) / prev < opts.tol {
            break;
        }
    }

    Ok(HooiReport {
        factors,
        errors,
        iterations,
    })
}
