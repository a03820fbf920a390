//! Resolution of the conflict between local-training and IN-training
//! gradients.
//!
//! The update direction `Z` is the point closest to `G_IN` (Frobenius
//! norm) in the halfspace `<Z, G_local> >= 0`:
//!
//! ```text
//! minimize   ||G_IN - Z||^2
//! subject to <Z, G_local> >= 0
//! ```
//!
//! With `a = <G_local, G_local>` and `b = <G_local, G_IN>` the closed form
//! is `Z = G_IN` when `b >= 0` and `Z = G_IN - (b / a) G_local` otherwise.
//! The Lagrangian `L(Z, l) = ||G_IN - Z||^2 - l <G_local, Z>` is minimized
//! at `Z = G_IN + (l / 2) G_local`, giving the dual function
//! `g(l) = -(l^2 / 4) a - l b`, maximized over `l >= 0` at
//! `l* = max(0, -2b / a)`.
//!
//! Training uses the cheaper fixed-multiplier rule
//! `Z = G_IN + (lambda / 2) G_local` ([`resolve_simplified`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::GradientSet;

/// Default multiplier for [`resolve_simplified`].
pub const DEFAULT_LAMBDA: f64 = 2.0;

/// Sum over all aligned entries of `g1 * g2`, all groups included.
pub fn frobenius_inner(g1: &GradientSet, g2: &GradientSet) -> Result<f64> {
    g1.check_layout(g2)?;
    Ok(g1.iter().zip(g2.iter()).map(|(a, b)| a * b).sum())
}

/// Closed-form projection of `g_in` onto `<Z, g_local> >= 0`.
pub fn resolve_analytic(g_in: &GradientSet, g_local: &GradientSet) -> Result<GradientSet> {
    let a = frobenius_inner(g_local, g_local)?;
    let b = frobenius_inner(g_local, g_in)?;
    if b >= 0.0 || a == 0.0 {
        return Ok(g_in.clone());
    }
    g_in.add_scaled(g_local, -b / a)
}

/// `Z = g_in + (lambda / 2) g_local`.
pub fn resolve_simplified(
    g_in: &GradientSet,
    g_local: &GradientSet,
    lambda: f64,
) -> Result<GradientSet> {
    if !(lambda >= 0.0) {
        return Err(Error::validation(format!(
            "lambda must be a non-negative number, got {lambda}"
        )));
    }
    g_in.add_scaled(g_local, lambda / 2.0)
}

/// Euclidean projection of `g_in` onto the halfspace with inward normal
/// `g_local`, computed through the unit normal rather than the `a`/`b`
/// branch of [`resolve_analytic`]. Serves as the reference solution.
pub fn projection_oracle(g_in: &GradientSet, g_local: &GradientSet) -> Result<GradientSet> {
    g_in.check_layout(g_local)?;
    let norm = g_local.norm();
    if norm == 0.0 {
        return Ok(g_in.clone());
    }
    let unit: Vec<f64> = g_local.iter().map(|v| v / norm).collect();
    let along: f64 = g_in.iter().zip(&unit).map(|(x, n)| x * n).sum();
    let violation = along.min(0.0);
    let mut z = g_in.clone();
    for (zv, n) in z.iter_mut().zip(&unit) {
        *zv -= violation * n;
    }
    Ok(z)
}

/// `||G_IN||^2 - 2<Z, G_IN> + ||Z||^2 - lambda <G_local, Z>`.
pub fn lagrangian_value(
    z: &GradientSet,
    lambda: f64,
    g_in: &GradientSet,
    g_local: &GradientSet,
) -> Result<f64> {
    Ok(frobenius_inner(g_in, g_in)? - 2.0 * frobenius_inner(z, g_in)?
        + frobenius_inner(z, z)?
        - lambda * frobenius_inner(g_local, z)?)
}

/// Dual function `g(lambda) = -(lambda^2 / 4) a - lambda b`.
pub fn dual_value(lambda: f64, g_in: &GradientSet, g_local: &GradientSet) -> Result<f64> {
    let a = frobenius_inner(g_local, g_local)?;
    let b = frobenius_inner(g_local, g_in)?;
    Ok(-(lambda * lambda / 4.0) * a - lambda * b)
}

/// Maximizer of the dual over `lambda >= 0` and the optimal value.
pub fn dual_optimum(g_in: &GradientSet, g_local: &GradientSet) -> Result<(f64, f64)> {
    let a = frobenius_inner(g_local, g_local)?;
    let b = frobenius_inner(g_local, g_in)?;
    let lambda = if b < 0.0 && a > 0.0 { -2.0 * b / a } else { 0.0 };
    Ok((lambda, dual_value(lambda, g_in, g_local)?))
}

/// Which rule turns `(G_IN, G_local)` into the applied update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolver {
    #[default]
    Simplified,
    Analytic,
}

impl Resolver {
    pub fn resolve(
        self,
        g_in: &GradientSet,
        g_local: &GradientSet,
        lambda: f64,
    ) -> Result<GradientSet> {
        match self {
            Resolver::Simplified => resolve_simplified(g_in, g_local, lambda),
            Resolver::Analytic => resolve_analytic(g_in, g_local),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{Group, Layout};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn flat(v: &[f64]) -> GradientSet {
        GradientSet::from_flat(Group::Intermediate, v.to_vec())
    }

    fn sq_dist(a: &GradientSet, b: &GradientSet) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    #[test]
    fn inner_product_examples() {
        let g = flat(&[1.0, -2.0, 3.0, 0.5]);
        assert_eq!(frobenius_inner(&g, &g).unwrap(), 1.0 + 4.0 + 9.0 + 0.25);
        assert_eq!(frobenius_inner(&g, &flat(&[0.0; 4])).unwrap(), 0.0);
        let h = flat(&[2.0, 1.0, -1.0, 4.0]);
        // 2 - 2 - 3 + 2
        assert_eq!(frobenius_inner(&g, &h).unwrap(), -1.0);
    }

    #[test]
    fn inner_product_spans_all_groups() {
        let layout = Arc::new(Layout::new([
            (Group::Extractor, "e", 1),
            (Group::Intermediate, "i", 1),
            (Group::Classifier, "c", 1),
        ]));
        let g = GradientSet::from_groups(layout.clone(), [vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(frobenius_inner(&g, &g).unwrap(), 14.0);
    }

    #[test]
    fn layout_mismatch_is_contract_error() {
        let err = frobenius_inner(&flat(&[1.0]), &flat(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn aligned_gradients_untouched() {
        let g = flat(&[0.3, -1.2, 2.0]);
        assert_eq!(resolve_analytic(&g, &g).unwrap(), g);
    }

    #[test]
    fn opposed_gradients_cancel() {
        let g = flat(&[0.3, -1.2, 2.0]);
        let z = resolve_analytic(&g, &g.scaled(-1.0)).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-15), "{z:?}");
    }

    #[test]
    fn zero_local_gradient_returns_g_in() {
        let g = flat(&[0.3, -1.2]);
        let zero = flat(&[0.0, 0.0]);
        assert_eq!(resolve_analytic(&g, &zero).unwrap(), g);
        assert_eq!(projection_oracle(&g, &zero).unwrap(), g);
    }

    #[test]
    fn simplified_examples() {
        let gi = flat(&[1.0, 2.0, -3.0]);
        let gl = flat(&[0.5, -0.25, 4.0]);
        assert_eq!(
            resolve_simplified(&gi, &gl, 2.0).unwrap(),
            flat(&[1.5, 1.75, 1.0])
        );
        assert_eq!(resolve_simplified(&gi, &gl, 0.0).unwrap(), gi);
        assert_eq!(resolve_simplified(&flat(&[0.0; 3]), &gl, 2.0).unwrap(), gl);
        assert!(matches!(
            resolve_simplified(&gi, &gl, -0.5),
            Err(Error::Validation(_))
        ));
        assert!(resolve_simplified(&gi, &gl, f64::NAN).is_err());
    }

    #[test]
    fn simplified_keeps_shell_groups_local() {
        let layout = Arc::new(Layout::new([
            (Group::Extractor, "e", 2),
            (Group::Intermediate, "i", 2),
            (Group::Classifier, "c", 1),
        ]));
        let g_in = GradientSet::from_groups(layout.clone(), [vec![0.0; 2], vec![1.0, -1.0], vec![0.0]]).unwrap();
        let g_local = GradientSet::from_groups(layout, [vec![0.5, 0.25], vec![2.0, 2.0], vec![-3.0]]).unwrap();
        let z = resolve_simplified(&g_in, &g_local, 2.0).unwrap();
        assert_eq!(z.group(Group::Extractor), g_local.group(Group::Extractor));
        assert_eq!(z.group(Group::Classifier), g_local.group(Group::Classifier));
        assert_eq!(z.group(Group::Intermediate), &[3.0, 1.0]);
    }

    #[test]
    fn oracle_examples() {
        let gl = flat(&[1.0, 0.0]);
        let feasible = flat(&[0.5, 3.0]);
        assert_eq!(projection_oracle(&feasible, &gl).unwrap(), feasible);
        let infeasible = flat(&[-2.0, 3.0]);
        let z = projection_oracle(&infeasible, &gl).unwrap();
        assert!(frobenius_inner(&z, &gl).unwrap().abs() < 1e-10);
        assert_eq!(z, flat(&[0.0, 3.0]));
    }

    #[test]
    fn lagrangian_examples() {
        let gi = flat(&[1.0, -2.0, 0.5]);
        let gl = flat(&[0.3, 0.7, -1.1]);
        assert_eq!(lagrangian_value(&gi, 0.0, &gi, &gl).unwrap(), 0.0);
        let zero = flat(&[0.0; 3]);
        assert_eq!(
            lagrangian_value(&zero, 1.7, &gi, &gl).unwrap(),
            frobenius_inner(&gi, &gi).unwrap()
        );
    }

    #[test]
    fn dual_examples() {
        let gi = flat(&[1.0, -2.0]);
        let gl = flat(&[-1.0, 0.5]);
        assert_eq!(dual_value(0.0, &gi, &gl).unwrap(), 0.0);
        let a = frobenius_inner(&gl, &gl).unwrap();
        let b = frobenius_inner(&gl, &gi).unwrap();
        assert!(b < 0.0);
        let (lstar, gstar) = dual_optimum(&gi, &gl).unwrap();
        assert!((lstar - (-2.0 * b / a)).abs() < 1e-12);
        assert!((gstar - b * b / a).abs() < 1e-12);
        // independent grid search over lambda
        let best = (0..=200_000)
            .map(|i| i as f64 * 1e-4)
            .map(|l| (l, dual_value(l, &gi, &gl).unwrap()))
            .fold((0.0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        assert!((best.0 - lstar).abs() < 2e-4);
        assert!((best.1 - gstar).abs() < 1e-6);

        let aligned = flat(&[1.0, 0.5]);
        assert_eq!(dual_optimum(&aligned, &aligned).unwrap().0, 0.0);
    }

    fn pair(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-10.0f64..10.0, dim),
            prop::collection::vec(-10.0f64..10.0, dim),
        )
    }

    proptest! {
        #[test]
        fn analytic_is_feasible((gi, gl) in (2usize..64).prop_flat_map(pair)) {
            let (gi, gl) = (flat(&gi), flat(&gl));
            let z = resolve_analytic(&gi, &gl).unwrap();
            let dot = frobenius_inner(&z, &gl).unwrap();
            prop_assert!(dot >= -1e-8 * gl.norm() * z.norm());
            let b = frobenius_inner(&gl, &gi).unwrap();
            if b < 0.0 {
                let scale = gl.norm() * gi.norm();
                prop_assert!(dot.abs() <= 1e-8 * scale.max(1e-300));
            }
        }

        #[test]
        fn analytic_matches_oracle((gi, gl) in (2usize..64).prop_flat_map(pair)) {
            let (gi, gl) = (flat(&gi), flat(&gl));
            let z = resolve_analytic(&gi, &gl).unwrap();
            let o = projection_oracle(&gi, &gl).unwrap();
            for (a, b) in z.iter().zip(o.iter()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn lagrangian_stationary_at_closed_form(
            (gi, gl) in (2usize..16).prop_flat_map(pair),
            lambda in 0.0f64..5.0,
            dir in prop::collection::vec(-1.0f64..1.0, 16),
            eps in 1e-3f64..1e-1,
        ) {
            let (gi, gl) = (flat(&gi), flat(&gl));
            let zstar = gi.add_scaled(&gl, lambda / 2.0).unwrap();
            let e = flat(&dir[..gi.layout().total_len()]);
            let at = lagrangian_value(&zstar, lambda, &gi, &gl).unwrap();
            for s in [eps, -eps] {
                let moved = zstar.add_scaled(&e, s).unwrap();
                let v = lagrangian_value(&moved, lambda, &gi, &gl).unwrap();
                prop_assert!(v >= at - 1e-9 * (1.0 + at.abs()));
            }
        }

        #[test]
        fn simplified_is_linear(
            (a1, b1) in pair(8), (a2, b2) in pair(8),
            s in -3.0f64..3.0, lambda in 0.0f64..4.0,
        ) {
            let (a1, b1, a2, b2) = (flat(&a1), flat(&b1), flat(&a2), flat(&b2));
            let lhs = resolve_simplified(
                &a1.add_scaled(&a2, s).unwrap(),
                &b1.add_scaled(&b2, s).unwrap(),
                lambda,
            ).unwrap();
            let rhs = resolve_simplified(&a1, &b1, lambda).unwrap()
                .add_scaled(&resolve_simplified(&a2, &b2, lambda).unwrap(), s).unwrap();
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn strong_duality_when_constraint_active((gi, gl) in (2usize..64).prop_flat_map(pair)) {
            let (gi, gl) = (flat(&gi), flat(&gl));
            let b = frobenius_inner(&gl, &gi).unwrap();
            prop_assume!(b < 0.0);
            let z = resolve_analytic(&gi, &gl).unwrap();
            let primal = sq_dist(&gi, &z);
            let (_, dual) = dual_optimum(&gi, &gl).unwrap();
            prop_assert!((primal - dual).abs() <= 1e-8 * dual.abs().max(1e-300));
        }
    }
}
