//! Non-negative matrix factorization `X ≈ D·C` by multiplicative updates.
//!
//! One step updates the codes, then the dictionary:
//!
//! ```text
//! C ← C ⊙ (DᵀX) ⊘ (DᵀD·C + ε)
//! D ← D ⊙ (X·Cᵀ) ⊘ (D·C·Cᵀ + ε)
//! ```
//!
//! Both factors start from a seeded uniform(0, 1) draw, so results are a
//! pure function of the input and the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Element, Tensor};

/// Dictionary `d×R` and codes `R×n`, both non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct NmfFactors<T> {
    pub dictionary: Tensor<T>,
    pub codes: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct NmfOutput<T> {
    pub factors: NmfFactors<T>,
    pub reconstruction: Tensor<T>,
    /// Frobenius reconstruction error after initialization and after every
    /// step (`steps + 1` entries).
    pub errors: Vec<f64>,
}

/// Seeded uniform(0, 1) initialization of a `d×n` problem at rank `rank`.
pub fn init_factors<T: Element>(d: usize, n: usize, rank: usize, seed: u64) -> NmfFactors<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dictionary = Tensor::from_fn(vec![d, rank], |_| T::from_f64_lossy(rng.gen::<f64>()));
    let codes = Tensor::from_fn(vec![rank, n], |_| T::from_f64_lossy(rng.gen::<f64>()));
    NmfFactors { dictionary, codes }
}

/// `out = a ⊙ num ⊘ (den + eps)`, elementwise.
fn multiplicative<T: Element>(a: &mut [T], num: &[T], den: &[T], eps: T) {
    for ((v, &p), &q) in a.iter_mut().zip(num).zip(den) {
        *v = *v * p / (q + eps);
    }
}

/// One multiplicative update of the codes followed by the dictionary.
pub fn update_step<T: Element>(x: &Tensor<T>, f: &mut NmfFactors<T>, eps: f64) {
    let (d, n) = (x.shape()[0], x.shape()[1]);
    let r = f.dictionary.shape()[1];
    let eps = T::from_f64_lossy(eps);

    // codes
    let mut dtx = vec![T::zero(); r * n];
    gemm_tn(r, d, n, f.dictionary.data(), x.data(), &mut dtx);
    let mut dtd = vec![T::zero(); r * r];
    gemm_tn(r, d, r, f.dictionary.data(), f.dictionary.data(), &mut dtd);
    let mut dtdc = vec![T::zero(); r * n];
    gemm_nn(r, r, n, &dtd, f.codes.data(), &mut dtdc);
    multiplicative(f.codes.data_mut(), &dtx, &dtdc, eps);

    // dictionary
    let mut xct = vec![T::zero(); d * r];
    gemm_nt(d, n, r, x.data(), f.codes.data(), &mut xct);
    let mut cct = vec![T::zero(); r * r];
    gemm_nt(r, n, r, f.codes.data(), f.codes.data(), &mut cct);
    let mut dcct = vec![T::zero(); d * r];
    gemm_nn(d, r, r, f.dictionary.data(), &cct, &mut dcct);
    multiplicative(f.dictionary.data_mut(), &xct, &dcct, eps);
}

pub fn reconstruct<T: Element>(f: &NmfFactors<T>) -> Tensor<T> {
    let (d, r) = (f.dictionary.shape()[0], f.dictionary.shape()[1]);
    let n = f.codes.shape()[1];
    let mut out = vec![T::zero(); d * n];
    gemm_nn(d, r, n, f.dictionary.data(), f.codes.data(), &mut out);
    Tensor::new(vec![d, n], out).expect("d×n")
}

pub fn frobenius_error<T: Element>(x: &Tensor<T>, f: &NmfFactors<T>) -> f64 {
    let recon = reconstruct(f);
    x.data()
        .iter()
        .zip(recon.data())
        .map(|(&a, &b)| {
            let e = a.to_f64_lossy() - b.to_f64_lossy();
            e * e
        })
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn check_input<T: Element>(x: &Tensor<T>) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::dim(format!("NMF expects a d×n matrix, got {:?}", x.shape())));
    }
    if let Some(v) = x.data().iter().find(|v| **v < T::zero()) {
        return Err(Error::Domain(format!(
            "NMF input must be non-negative, found {}",
            v.to_f64_lossy()
        )));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// Factorizes a non-negative `d×n` matrix at rank `rank` with `steps`
/// multiplicative updates.
pub fn nmf_decompose<T: Element>(x: &Tensor<T>, rank: usize, steps: usize, eps: f64, seed: u64) -> Result<NmfOutput<T>> {
    let (d, n) = check_input(x)?;
    if rank == 0 || rank > d.min(n) {
        return Err(Error::config(
            "nmf_rank",
            format!("rank {rank} must be in 1..={}", d.min(n)),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::config("epsilon", "must be positive"));
    }
    let mut factors = init_factors(d, n, rank, seed);
    let mut errors = Vec::with_capacity(steps + 1);
    errors.push(frobenius_error(x, &factors));
    for _ in 0..steps {
        update_step(x, &mut factors, eps);
        errors.push(frobenius_error(x, &factors));
    }
    let reconstruction = reconstruct(&factors);
    Ok(NmfOutput {
        factors,
        reconstruction,
        errors,
    })
}
