//! Basis sets with analytic value, state-gradient and state-Hessian evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role of a basis function inside a quadratic state-action expansion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Constant,
    StateQuadratic,
    Cross,
    ActionQuadratic,
    /// `s^p a^k` terms of the power-utility bases; `k` is the action degree.
    Power {
        action_degree: u32,
    },
}

/// One basis function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Constant,
    /// `s_i s_j` with `i <= j`.
    StateQuad(usize, usize),
    /// `s_i a_k`.
    StateAction(usize, usize),
    /// `a_k a_l` with `k <= l`.
    ActionQuad(usize, usize),
    /// `s^exponent a^action_degree` on a positive scalar state.
    Power {
        exponent: f64,
        action_degree: u32,
    },
}

impl Term {
    pub fn block(&self) -> Block {
        match self {
            Term::Constant => Block::Constant,
            Term::StateQuad(..) => Block::StateQuadratic,
            Term::StateAction(..) => Block::Cross,
            Term::ActionQuad(..) => Block::ActionQuadratic,
            Term::Power { action_degree, .. } => Block::Power {
                action_degree: *action_degree,
            },
        }
    }

    fn value(&self, s: &[f64], a: &[f64]) -> f64 {
        match *self {
            Term::Constant => 1.0,
            Term::StateQuad(i, j) => s[i] * s[j],
            Term::StateAction(i, k) => s[i] * a[k],
            Term::ActionQuad(k, l) => a[k] * a[l],
            Term::Power {
                exponent,
                action_degree,
            } => s[0].powf(exponent) * action_power(a, action_degree),
        }
    }

    /// `b . grad_s phi + 0.5 * Sigma : hess_s phi`.
    fn generator(&self, s: &[f64], a: &[f64], drift: &[f64], diffusion: Option<&[f64]>) -> f64 {
        let d = s.len();
        match *self {
            Term::Constant | Term::ActionQuad(..) => 0.0,
            Term::StateQuad(i, j) => {
                let first = drift[i] * s[j] + drift[j] * s[i];
                let second = diffusion.map_or(0.0, |sig| 0.5 * (sig[i * d + j] + sig[j * d + i]));
                first + second
            }
            Term::StateAction(i, k) => drift[i] * a[k],
            Term::Power {
                exponent: p,
                action_degree,
            } => {
                let ak = action_power(a, action_degree);
                let g = p * s[0].powf(p - 1.0) * ak;
                let h = p * (p - 1.0) * s[0].powf(p - 2.0) * ak;
                drift[0] * g + diffusion.map_or(0.0, |sig| 0.5 * sig[0] * h)
            }
        }
    }

    fn gradient(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; s.len()];
        match *self {
            Term::Constant | Term::ActionQuad(..) => {}
            Term::StateQuad(i, j) => {
                g[i] += s[j];
                g[j] += s[i];
            }
            Term::StateAction(i, k) => g[i] = a[k],
            Term::Power {
                exponent: p,
                action_degree,
            } => g[0] = p * s[0].powf(p - 1.0) * action_power(a, action_degree),
        }
        g
    }

    fn hessian(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let d = s.len();
        let mut h = vec![0.0; d * d];
        match *self {
            Term::Constant | Term::ActionQuad(..) | Term::StateAction(..) => {}
            Term::StateQuad(i, j) => {
                h[i * d + j] += 1.0;
                h[j * d + i] += 1.0;
            }
            Term::Power {
                exponent: p,
                action_degree,
            } => h[0] = p * (p - 1.0) * s[0].powf(p - 2.0) * action_power(a, action_degree),
        }
        h
    }
}

fn action_power(a: &[f64], degree: u32) -> f64 {
    if degree == 0 {
        1.0
    } else {
        a[0].powi(degree as i32)
    }
}

/// An ordered list of basis functions over states (value bases) or state-action pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    state_dim: usize,
    action_dim: usize,
    terms: Vec<Term>,
}

impl BasisSet {
    /// Builds a basis from explicit terms; `action_dim = 0` marks a value basis.
    pub fn from_terms(state_dim: usize, action_dim: usize, terms: Vec<Term>) -> Result<Self> {
        if state_dim == 0 || terms.is_empty() {
            return Err(Error::invalid("basis needs a state dimension and at least one term"));
        }
        for t in &terms {
            let ok = match *t {
                Term::Constant => true,
                Term::StateQuad(i, j) => i <= j && j < state_dim,
                Term::StateAction(i, k) => i < state_dim && k < action_dim,
                Term::ActionQuad(k, l) => k <= l && l < action_dim,
                Term::Power {
                    exponent,
                    action_degree,
                } => state_dim == 1 && exponent.is_finite() && (action_degree == 0 || action_dim == 1),
            };
            if !ok {
                return Err(Error::invalid(format!("term {t:?} does not fit the basis dimensions")));
            }
        }
        Ok(Self {
            state_dim,
            action_dim,
            terms,
        })
    }

    pub fn size(&self) -> usize {
        self.terms.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// `d` for value bases, `d + m` for state-action bases.
    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn is_state_action(&self) -> bool {
        self.action_dim > 0
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn blocks(&self) -> Vec<Block> {
        self.terms.iter().map(Term::block).collect()
    }

    fn has_power(&self) -> bool {
        self.terms.iter().any(|t| matches!(t, Term::Power { .. }))
    }

    fn check_point(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.state_dim {
            return Err(Error::invalid(format!(
                "state has dimension {}, basis expects {}",
                s.len(),
                self.state_dim
            )));
        }
        if self.action_dim > 0 && a.len() != self.action_dim {
            return Err(Error::invalid(format!(
                "action has dimension {}, basis expects {}",
                a.len(),
                self.action_dim
            )));
        }
        if self.has_power() && !(s[0] > 0.0) {
            return Err(Error::invalid("power basis evaluated at a nonpositive state"));
        }
        Ok(())
    }

    /// Feature vector at `(s, a)`; `a` is ignored by value bases.
    pub fn features_into(&self, s: &[f64], a: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_point(s, a)?;
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = t.value(s, a);
        }
        Ok(())
    }

    pub fn features(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.size()];
        self.features_into(s, a, &mut out)?;
        Ok(out)
    }

    /// Per-function generator contraction `b . grad phi + 0.5 Sigma : hess phi`;
    /// `diffusion` is row-major `d x d` or absent.
    pub fn generator_into(
        &self,
        s: &[f64],
        a: &[f64],
        drift: &[f64],
        diffusion: Option<&[f64]>,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_point(s, a)?;
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = t.generator(s, a, drift, diffusion);
        }
        Ok(())
    }

    /// Gradient in the state of function `k`.
    pub fn gradient(&self, k: usize, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check_point(s, a)?;
        Ok(self.terms[k].gradient(s, a))
    }

    /// Row-major state Hessian of function `k`.
    pub fn hessian(&self, k: usize, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check_point(s, a)?;
        Ok(self.terms[k].hessian(s, a))
    }
}

fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i..n).map(move |j| (i, j)))
}

/// `{s_i s_j : i <= j}` in lexicographic order, with an optional leading constant.
pub fn quadratic_state_basis(d: usize, include_constant: bool) -> Result<BasisSet> {
    let mut terms = Vec::new();
    if include_constant {
        terms.push(Term::Constant);
    }
    terms.extend(pairs(d).map(|(i, j)| Term::StateQuad(i, j)));
    BasisSet::from_terms(d, 0, terms)
}

/// Quadratic state-action basis ordered as constant, `s s`, `s a`, `a a`.
pub fn quadratic_state_action_basis(d: usize, m: usize, include_constant: bool) -> Result<BasisSet> {
    if m == 0 {
        return Err(Error::invalid("state-action basis needs m >= 1"));
    }
    let mut terms = Vec::new();
    if include_constant {
        terms.push(Term::Constant);
    }
    terms.extend(pairs(d).map(|(i, j)| Term::StateQuad(i, j)));
    terms.extend((0..d).flat_map(|i| (0..m).map(move |k| Term::StateAction(i, k))));
    terms.extend(pairs(m).map(|(k, l)| Term::ActionQuad(k, l)));
    BasisSet::from_terms(d, m, terms)
}

fn power_exponent(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) || gamma == 1.0 || !gamma.is_finite() {
        return Err(Error::invalid("risk aversion must be positive and different from 1"));
    }
    Ok(1.0 - gamma)
}

/// `{s^(1-gamma)}`; `{sqrt(s)}` for `gamma = 0.5`.
pub fn merton_value_basis(gamma: f64) -> Result<BasisSet> {
    let exponent = power_exponent(gamma)?;
    BasisSet::from_terms(
        1,
        0,
        vec![Term::Power {
            exponent,
            action_degree: 0,
        }],
    )
}

/// `{s^(1-gamma), s^(1-gamma) a, s^(1-gamma) a^2}`.
pub fn merton_q_basis(gamma: f64) -> Result<BasisSet> {
    let exponent = power_exponent(gamma)?;
    BasisSet::from_terms(
        1,
        1,
        (0..3)
            .map(|action_degree| Term::Power {
                exponent,
                action_degree,
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_order() {
        assert_eq!(
            quadratic_state_basis(1, false).unwrap().terms(),
            &[Term::StateQuad(0, 0)]
        );
        let b = quadratic_state_basis(2, true).unwrap();
        assert_eq!(
            b.terms(),
            &[
                Term::Constant,
                Term::StateQuad(0, 0),
                Term::StateQuad(0, 1),
                Term::StateQuad(1, 1)
            ]
        );
        assert_eq!(quadratic_state_action_basis(1, 1, false).unwrap().size(), 3);
        assert_eq!(quadratic_state_action_basis(2, 2, true).unwrap().size(), 11);
        assert_eq!(merton_value_basis(0.5).unwrap().size(), 1);
        assert_eq!(merton_q_basis(0.5).unwrap().size(), 3);
    }

    #[test]
    fn analytic_values() {
        let b = quadratic_state_basis(2, false).unwrap();
        assert_eq!(b.gradient(1, &[2.0, 3.0], &[]).unwrap(), vec![3.0, 2.0]);
        let q = quadratic_state_action_basis(1, 1, false).unwrap();
        let k = q.terms().iter().position(|t| *t == Term::ActionQuad(0, 0)).unwrap();
        assert_eq!(q.hessian(k, &[1.3], &[0.7]).unwrap(), vec![0.0]);
        let v = merton_value_basis(0.5).unwrap();
        assert!((v.features(&[4.0], &[]).unwrap()[0] - 2.0).abs() < 1e-15);
        assert!((v.gradient(0, &[4.0], &[]).unwrap()[0] - 0.25).abs() < 1e-15);
        assert!((v.hessian(0, &[4.0], &[]).unwrap()[0] + 0.03125).abs() < 1e-15);
        let mq = merton_q_basis(0.5).unwrap();
        assert_eq!(mq.features(&[1.0], &[2.0]).unwrap(), vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn power_basis_rejects_nonpositive_state() {
        let v = merton_value_basis(0.5).unwrap();
        assert!(v.features(&[0.0], &[]).is_err());
        assert!(v.features(&[-1.0], &[]).is_err());
    }
}
