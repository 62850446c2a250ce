use nalgebra::DMatrix;
use proptest::prelude::*;

use phibe::basis::{merton_q_basis, merton_value_basis, quadratic_state_action_basis, quadratic_state_basis, BasisSet};
use phibe::coefficients::bellman_order_coefficients;
use phibe::matcore;

fn small_matrix(d: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-scale..scale, d * d).prop_map(move |v| DMatrix::from_row_slice(d, d, &v))
}

/// `-(M M^T + c I)`: symmetric negative definite.
fn neg_def(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    small_matrix(d, 1.0).prop_map(move |m| -(&m * m.transpose() + DMatrix::identity(d, d) * 0.5))
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn moment_identity(i in 1usize..=6) {
        let c = bellman_order_coefficients(i).unwrap();
        for k in 1..=i as u32 {
            let target = if k == 1 { 1.0 } else { 0.0 };
            prop_assert!((c.moment(k) - target).abs() < 1e-10);
        }
    }

    #[test]
    fn polynomial_path_derivative_recovered(
        i in 1usize..=6,
        c in prop::collection::vec(-2.0f64..2.0, 7),
        dt in 0.01f64..0.5,
    ) {
        let coeffs = bellman_order_coefficients(i).unwrap().coeffs;
        let path = |t: f64| (0..=i).map(|k| c[k] * t.powi(k as i32)).sum::<f64>();
        let est: f64 = coeffs
            .iter()
            .enumerate()
            .map(|(j, a)| a * (path((j + 1) as f64 * dt) - path(0.0)))
            .sum::<f64>()
            / dt;
        prop_assert!((est - c[1]).abs() < 1e-8 * (1.0 + c.iter().map(|v| v.abs()).sum::<f64>()));
    }

    #[test]
    fn mat_exp_semigroup(m in small_matrix(3, 1.0), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let lhs = matcore::mat_exp(&m, t1 + t2).unwrap();
        let rhs = matcore::mat_exp(&m, t1).unwrap() * matcore::mat_exp(&m, t2).unwrap();
        prop_assert!(rel_err(&lhs, &rhs) < 1e-10);
    }

    #[test]
    fn phi1_identity(m in small_matrix(3, 1.5), t in 0.01f64..2.0) {
        let lhs = &m * t * matcore::phi1(&m, t).unwrap();
        let rhs = matcore::mat_exp(&m, t).unwrap() - DMatrix::identity(3, 3);
        prop_assert!(rel_err(&lhs, &rhs) < 1e-10);
    }

    #[test]
    fn gram_integral_symmetric_psd(m in small_matrix(3, 1.5), dt in 0.01f64..2.0) {
        let g = matcore::gram_integral(&m, dt).unwrap();
        prop_assert!(matcore::asymmetry(&g) < 1e-10);
        let min = g.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min >= -1e-12);
    }

    #[test]
    fn care_invariants(
        a in small_matrix(2, 2.0),
        b in small_matrix(2, 0.4),
        q in neg_def(2),
        r in neg_def(2),
        beta in 0.0f64..1.0,
    ) {
        let b = b + DMatrix::identity(2, 2);
        let p = matcore::solve_care(&a, &b, &q, &r, beta).unwrap();
        prop_assert!(matcore::care_residual(&a, &b, &q, &r, beta, &p).unwrap() < 1e-9);
        prop_assert!(matcore::asymmetry(&p) < 1e-10);
        prop_assert!(p.clone().symmetric_eigen().eigenvalues.max() < 0.0);
        let k = -(r.clone().try_inverse().unwrap() * b.transpose() * &p);
        let closed = &a + &b * k - DMatrix::identity(2, 2) * (beta / 2.0);
        prop_assert!(matcore::is_hurwitz(&closed));
    }

    #[test]
    fn lyapunov_solution_satisfies_equation(f in small_matrix(2, 1.0), m in neg_def(2), beta in 0.0f64..1.0) {
        let f = f - DMatrix::identity(2, 2) * 2.5;
        let p = matcore::solve_policy_lyapunov(&f, &m, beta).unwrap();
        let res = f.transpose() * &p + &p * &f - &p * beta + &m;
        prop_assert!(res.amax() < 1e-9 * (1.0 + p.amax()));
    }

    #[test]
    fn quadratic_basis_derivatives(
        s in prop::collection::vec(-3.0f64..3.0, 2),
        a in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        check_derivatives(&quadratic_state_basis(2, true).unwrap(), &s, &[]);
        check_derivatives(&quadratic_state_action_basis(2, 2, true).unwrap(), &s, &a);
    }

    #[test]
    fn merton_basis_derivatives(s in 0.1f64..6.0, a in 0.0f64..5.0, gamma in 0.2f64..0.8) {
        check_derivatives(&merton_value_basis(gamma).unwrap(), &[s], &[]);
        check_derivatives(&merton_q_basis(gamma).unwrap(), &[s], &[a]);
    }
}

/// Central differences, step `1e-5`, of values against gradients and of
/// gradients against Hessians.
fn check_derivatives(basis: &BasisSet, s: &[f64], a: &[f64]) {
    let d = s.len();
    let h = 1e-5;
    for k in 0..basis.size() {
        let grad = basis.gradient(k, s, a).unwrap();
        let hess = basis.hessian(k, s, a).unwrap();
        for i in 0..d {
            let mut up = s.to_vec();
            let mut dn = s.to_vec();
            up[i] += h;
            dn[i] -= h;
            let fd = (basis.features(&up, a).unwrap()[k] - basis.features(&dn, a).unwrap()[k]) / (2.0 * h);
            assert!(close(fd, grad[i]), "gradient {k},{i}: {fd} vs {}", grad[i]);
            let gu = basis.gradient(k, &up, a).unwrap();
            let gd = basis.gradient(k, &dn, a).unwrap();
            for j in 0..d {
                let fd = (gu[j] - gd[j]) / (2.0 * h);
                assert!(
                    close(fd, hess[i * d + j]),
                    "hessian {k},{i},{j}: {fd} vs {}",
                    hess[i * d + j]
                );
            }
        }
    }
}

fn close(fd: f64, exact: f64) -> bool {
    (fd - exact).abs() <= 1e-6 * exact.abs().max(1.0)
}
