//! Central-difference gradient checks.
//!
//! The numeric side always runs in `f64` on a promoted copy of the
//! parameters, so a 32-bit backward pass is compared against a reference
//! that is not limited by 32-bit cancellation error.

use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::grad::{Group, GroupMask};
use crate::model::SplitModel;
use crate::tensor::{Scalar, Tensor};

/// Loss used to probe a model's gradients.
#[derive(Clone, Debug)]
pub enum ProbeLoss {
    /// Cross-entropy of the full model on `(inputs, labels)`.
    CrossEntropy,
    /// MSE of the intermediate layers; `inputs` are `s_in` rows.
    IntermediateMse { target: Tensor<f64> },
    /// A loss that does not depend on any parameter.
    Constant,
}

fn probe_loss<U: Scalar>(
    model: &SplitModel<U>,
    probe: &ProbeLoss,
    inputs: &Tensor<f64>,
    labels: &[usize],
    trainable: GroupMask,
) -> Result<(Graph<U>, crate::model::Binding, Var)> {
    let mut g = Graph::new();
    let binding = model.bind(&mut g, trainable);
    let x = g.constant(inputs.cast());
    let loss = match probe {
        ProbeLoss::CrossEntropy => {
            let s_in = model.run_segment(&mut g, &binding, Group::Extractor, x)?;
            let s_out = model.run_segment(&mut g, &binding, Group::Intermediate, s_in)?;
            let logits = model.run_segment(&mut g, &binding, Group::Classifier, s_out)?;
            g.cross_entropy(logits, labels)?
        }
        ProbeLoss::IntermediateMse { target } => {
            let pred = model.run_segment(&mut g, &binding, Group::Intermediate, x)?;
            let t = g.constant(target.cast());
            g.mse(pred, t)?
        }
        ProbeLoss::Constant => {
            let c = g.constant(Tensor::scalar(U::from_f64(1.5)));
            let z = g.constant(Tensor::scalar(U::zero()));
            g.mse(c, z)?
        }
    };
    Ok((g, binding, loss))
}

/// Worst relative error between backward gradients (computed in `T`)
/// and central differences (computed in `f64`).
///
/// The error for one parameter tensor is `max_i |a_i - n_i|` divided by
/// the larger infinity norm of the two gradients; it is defined as 0
/// when both gradients vanish. The worst tensor is reported.
pub fn finite_difference_check<T: Scalar>(
    model: &SplitModel<T>,
    probe: &ProbeLoss,
    inputs: &Tensor<f64>,
    labels: &[usize],
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::validation(format!("eps must be positive, got {eps}")));
    }
    let (mut g, binding, loss) = probe_loss(model, probe, inputs, labels, GroupMask::ALL)?;
    g.backward(loss)?;
    let analytic = binding.gradients(&g, model.layout());

    let reference: SplitModel<f64> = model.cast();
    let value = |m: &SplitModel<f64>| -> Result<f64> {
        let (g, _, loss) = probe_loss(m, probe, inputs, labels, GroupMask::NONE)?;
        Ok(g.value(loss).values()[0])
    };

    let mut worst = 0.0f64;
    for group in Group::ALL {
        for (pi, param) in model.params(group).iter().enumerate() {
            let numeric = (0..param.tensor.len())
                .into_par_iter()
                .map_init(
                    || reference.clone(),
                    |m, i| -> Result<f64> {
                        let original = m.params(group)[pi].tensor.values()[i];
                        m.params_mut(group)[pi].tensor.values_mut()[i] = original + eps;
                        let up = value(m)?;
                        m.params_mut(group)[pi].tensor.values_mut()[i] = original - eps;
                        let down = value(m)?;
                        m.params_mut(group)[pi].tensor.values_mut()[i] = original;
                        Ok((up - down) / (2.0 * eps))
                    },
                )
                .collect::<Result<Vec<f64>>>()?;
            let analytic = analytic.param(&param.name).expect("layout covers every parameter");
            worst = worst.max(relative_error(analytic, &numeric));
        }
    }
    Ok(worst)
}

/// Central-difference check of an arbitrary `f64` tape function of the
/// given parameter tensors.
pub fn gradient_check<F>(params: &[Tensor<f64>], build: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::validation(format!("eps must be positive, got {eps}")));
    }
    let eval = |ps: &[Tensor<f64>], trainable: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| {
                if trainable {
                    g.parameter(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        let loss = build(&mut g, &vars)?;
        Ok((g, vars, loss))
    };
    let (mut g, vars, loss) = eval(params, true)?;
    g.backward(loss)?;

    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).expect("backward fills every parameter").to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..params[pi].len() {
            let original = probe[pi].values()[i];
            probe[pi].values_mut()[i] = original + eps;
            let (gu, _, lu) = eval(&probe, false)?;
            probe[pi].values_mut()[i] = original - eps;
            let (gd, _, ld) = eval(&probe, false)?;
            probe[pi].values_mut()[i] = original;
            numeric.push((gu.value(lu).values()[0] - gd.value(ld).values()[0]) / (2.0 * eps));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn relative_error<A: Scalar>(analytic: &[A], numeric: &[f64]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let a = a.as_f64();
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchSpec, Variant};
    use crate::rng;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[42]);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_model_mse() {
        let x = random(&[4, 3], 1);
        let target = random(&[4, 2], 2);
        let params = [random(&[3, 2], 3), random(&[2], 4)];
        let err = gradient_check(
            &params,
            |g, p| {
                let xv = g.constant(x.clone());
                let y = g.affine(xv, p[0], p[1])?;
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv_relu_stack() {
        let x = random(&[2, 2, 5, 5], 5);
        let params = [
            random(&[3, 2, 3, 3], 6),
            random(&[3], 7),
            random(&[3 * 3 * 3, 4], 8),
            random(&[4], 9),
        ];
        let err = gradient_check(
            &params,
            |g, p| {
                let xv = g.constant(x.clone());
                let c = g.conv2d(xv, p[0], p[1], 2, 1)?;
                let r = g.relu(c);
                let f = g.flatten(r)?;
                let y = g.affine(f, p[2], p[3])?;
                g.cross_entropy(y, &[1, 3])
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_loss_reports_zero() {
        let arch = ArchSpec::mlp(Variant::B, 3, 4, 2).unwrap();
        let model = build_model(&arch, 0);
        let err = finite_difference_check(&model, &ProbeLoss::Constant, &random(&[2, 3], 1), &[0, 1], 1e-3).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn two_hidden_layer_relu_model() {
        let arch = ArchSpec::from_layers(
            Variant::B,
            vec![5],
            vec![crate::model::Layer::Dense { inputs: 5, outputs: 6, relu: true }],
            vec![crate::model::Layer::Dense { inputs: 6, outputs: 6, relu: true }],
            vec![crate::model::Layer::Dense { inputs: 6, outputs: 3, relu: false }],
        )
        .unwrap();
        let model: SplitModel<f64> = SplitModel::build(&arch, 4);
        let err = finite_difference_check(&model, &ProbeLoss::CrossEntropy, &random(&[4, 5], 2), &[0, 2, 1, 2], 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_non_positive_eps() {
        let arch = ArchSpec::mlp(Variant::B, 3, 4, 2).unwrap();
        let model = build_model(&arch, 0);
        assert!(finite_difference_check(&model, &ProbeLoss::Constant, &random(&[2, 3], 1), &[0, 1], 0.0).is_err());
    }
}
