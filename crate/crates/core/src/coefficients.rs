//! Finite-difference coefficients for the i-th order PhiBE estimators.
//!
//! The coefficients `a_1..a_i` solve the Vandermonde system
//! `sum_j a_j j^k = [k == 1]` for `k = 1..i`, so that
//! `(1/dt) sum_j a_j (s(j dt) - s(0))` recovers `s'(0)` up to `O(dt^i)`.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest order accepted; the Vandermonde system becomes too ill-conditioned beyond this.
pub const MAX_ORDER: usize = 12;

/// Coefficients of one order.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderCoefficients {
    pub order: usize,
    pub coeffs: Vec<f64>,
}

impl OrderCoefficients {
    /// `sum_j a_j j^k`, the k-th moment of the stencil.
    pub fn moment(&self, k: u32) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(j, a)| a * ((j + 1) as f64).powi(k as i32))
            .sum()
    }
}

fn cache() -> &'static Mutex<HashMap<usize, Vec<f64>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Vec<f64>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn solve_vandermonde(i: usize) -> Result<Vec<f64>> {
    let a = DMatrix::from_fn(i, i, |k, j| ((j + 1) as f64).powi(k as i32 + 1));
    let mut b = DVector::zeros(i);
    b[0] = 1.0;
    let lu = a.lu();
    let u = lu.u();
    let diag = u.diagonal().map(f64::abs);
    let (lo, hi) = (diag.min(), diag.max());
    if lo == 0.0 || !lo.is_finite() {
        return Err(Error::Singular {
            what: "Vandermonde system",
            condition: f64::INFINITY,
        });
    }
    let x = lu.solve(&b).ok_or(Error::Singular {
        what: "Vandermonde system",
        condition: hi / lo,
    })?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Vandermonde solve"));
    }
    Ok(x.iter().copied().collect())
}

/// Coefficients `a^(i)` of order `i`, cached per process.
pub fn bellman_order_coefficients(i: usize) -> Result<OrderCoefficients> {
    if i == 0 {
        return Err(Error::invalid("order must be at least 1"));
    }
    if i > MAX_ORDER {
        return Err(Error::invalid(format!("order {i} exceeds {MAX_ORDER}")));
    }
    if let Some(c) = cache().lock().expect("coefficient cache poisoned").get(&i) {
        return Ok(OrderCoefficients {
            order: i,
            coeffs: c.clone(),
        });
    }
    let coeffs = solve_vandermonde(i)?;
    cache()
        .lock()
        .expect("coefficient cache poisoned")
        .insert(i, coeffs.clone());
    Ok(OrderCoefficients { order: i, coeffs })
}

/// Order constant `C_i = sum_j |a_j| j^(i+1) / (i+1)!`.
pub fn error_constant(i: usize) -> Result<f64> {
    let c = bellman_order_coefficients(i)?;
    let num: f64 = c
        .coeffs
        .iter()
        .enumerate()
        .map(|(j, a)| a.abs() * ((j + 1) as f64).powi(i as i32 + 1))
        .sum();
    let fact: f64 = (1..=i + 1).map(|k| k as f64).product();
    Ok(num / fact)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn low_orders_match_hand_elimination() {
        assert_eq!(bellman_order_coefficients(1).unwrap().coeffs, vec![1.0]);
        let c2 = bellman_order_coefficients(2).unwrap().coeffs;
        assert!((c2[0] - 2.0).abs() < 1e-14 && (c2[1] + 0.5).abs() < 1e-14);
        let c3 = bellman_order_coefficients(3).unwrap().coeffs;
        for (x, y) in c3.iter().zip([3.0, -1.5, 1.0 / 3.0]) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn error_constants() {
        assert!((error_constant(1).unwrap() - 0.5).abs() < 1e-14);
        assert!((error_constant(2).unwrap() - 1.0).abs() < 1e-13);
        assert!((error_constant(3).unwrap() - 2.25).abs() < 1e-12);
    }

    #[test]
    fn rejects_zero_and_huge_orders() {
        assert!(bellman_order_coefficients(0).is_err());
        assert!(bellman_order_coefficients(MAX_ORDER + 1).is_err());
    }
}
