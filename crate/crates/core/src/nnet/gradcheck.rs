//! Central finite-difference checks of analytic gradients in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{layer_apply, layer_grad, LayerKind};
use super::{Model, ModelConfig, NnetError, Tensor};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Where the maximum occurred.
    pub worst: String,
    pub entries_checked: usize,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            max_relative_error: 0.0,
            worst: String::new(),
            entries_checked: 0,
        }
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.entries_checked += 1;
        if e > self.max_relative_error || self.worst.is_empty() {
            self.max_relative_error = e;
            self.worst = what();
        }
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, avoid_zero: bool) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.random_range(-1.0..1.0);
        if !avoid_zero || v.abs() > 0.05 {
            break v;
        }
    })
}

/// Random inputs and parameters for one layer kind.
fn layer_case(kind: LayerKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    match kind {
        LayerKind::Conv3x3 => (
            vec![normal_tensor(rng, vec![2, 3, 5, 6], false)],
            vec![normal_tensor(rng, vec![4, 3, 3, 3], false), normal_tensor(rng, vec![4], false)],
        ),
        LayerKind::Conv1x1 => (
            vec![normal_tensor(rng, vec![2, 3, 4, 4], false)],
            vec![normal_tensor(rng, vec![5, 3, 1, 1], false), normal_tensor(rng, vec![5], false)],
        ),
        LayerKind::Relu => (vec![normal_tensor(rng, vec![2, 2, 3, 4], true)], vec![]),
        LayerKind::Sigmoid => (vec![normal_tensor(rng, vec![2, 2, 3, 4], false)], vec![]),
        LayerKind::MaxPool2 => {
            // distinct values spaced well beyond the FD step
            let mut vals: Vec<f64> = (0..2 * 2 * 4 * 6).map(|i| i as f64 * 0.01).collect();
            for i in (1..vals.len()).rev() {
                vals.swap(i, rng.random_range(0..=i));
            }
            (vec![Tensor::new(vec![2, 2, 4, 6], vals)], vec![])
        }
        LayerKind::Upsample2 => (vec![normal_tensor(rng, vec![2, 2, 3, 3], false)], vec![]),
        LayerKind::Concat => (
            vec![
                normal_tensor(rng, vec![2, 2, 3, 3], false),
                normal_tensor(rng, vec![2, 1, 3, 3], false),
                normal_tensor(rng, vec![2, 3, 3, 3], false),
            ],
            vec![],
        ),
        LayerKind::Norm => (
            vec![normal_tensor(rng, vec![3, 2, 3, 3], false)],
            vec![normal_tensor(rng, vec![2], true), normal_tensor(rng, vec![2], false)],
        ),
    }
}

/// Checks input and parameter gradients of one layer against central
/// differences of `sum(upstream * layer(x))` for a random upstream.
pub fn check_layer(kind: LayerKind, seed: u64) -> Result<GradCheck, NnetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, params) = layer_case(kind, &mut rng);
    let refs = |v: &[Tensor<f64>]| -> Vec<Tensor<f64>> { v.to_vec() };
    let objective = |inputs: &[Tensor<f64>], params: &[Tensor<f64>], up: &Tensor<f64>| -> Result<f64, NnetError> {
        let ir: Vec<&Tensor<f64>> = inputs.iter().collect();
        let pr: Vec<&Tensor<f64>> = params.iter().collect();
        let y = layer_apply(kind, &pr, &ir)?;
        Ok(y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum())
    };
    let y = layer_apply(kind, &params.iter().collect::<Vec<_>>(), &inputs.iter().collect::<Vec<_>>())?;
    let upstream = normal_tensor(&mut rng, y.shape().to_vec(), false);
    let (dinputs, dparams) = layer_grad(
        kind,
        &params.iter().collect::<Vec<_>>(),
        &inputs.iter().collect::<Vec<_>>(),
        &upstream,
    )?;

    let mut report = GradCheck::new();
    for (which, analytic) in [(0usize, &dinputs), (1, &dparams)] {
        for (t, grad) in analytic.iter().enumerate() {
            for e in 0..grad.len() {
                let (mut ip, mut pp) = (refs(&inputs), refs(&params));
                let (mut im, mut pm) = (refs(&inputs), refs(&params));
                if which == 0 {
                    ip[t].data_mut()[e] += FD_STEP;
                    im[t].data_mut()[e] -= FD_STEP;
                } else {
                    pp[t].data_mut()[e] += FD_STEP;
                    pm[t].data_mut()[e] -= FD_STEP;
                }
                let numeric = (objective(&ip, &pp, &upstream)? - objective(&im, &pm, &upstream)?) / (2.0 * FD_STEP);
                let label = if which == 0 { "input" } else { "param" };
                report.record(|| format!("{kind:?} {label}[{t}][{e}]"), grad.data()[e], numeric);
            }
        }
    }
    Ok(report)
}

/// Checks every parameter gradient of a whole model (BCE loss against a
/// random binary target) in double precision.
pub fn check_model(config: &ModelConfig, batch: usize, seed: u64) -> Result<GradCheck, NnetError> {
    let mut model = Model::build(config.clone())?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Zero biases put pre-activations fed by dead ReLUs exactly on the next
    // kink, where central differences are meaningless. Shift them off it.
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
    let input = normal_tensor(
        &mut rng,
        vec![batch, config.input_channels, config.input_height, config.input_width],
        false,
    );
    let target = Tensor::from_fn(vec![batch, 1, config.input_height, config.input_width], |_| {
        if rng.random_bool(0.4) {
            1.0
        } else {
            0.0
        }
    });
    let analytic = model.loss_and_grads(&input, &target)?.grads;
    let mut probe = model.clone();
    let mut report = GradCheck::new();
    let names: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).collect();
    for name in &names {
        let n = model.params.get(name).expect("listed").len();
        for e in 0..n {
            let orig = model.params.get(name).expect("listed").data()[e];
            let mut at = |v: f64| -> Result<f64, NnetError> {
                probe.params.get_mut(name).expect("listed").data_mut()[e] = v;
                Ok(probe.loss_and_grads(&input, &target)?.loss)
            };
            let numeric = (at(orig + FD_STEP)? - at(orig - FD_STEP)?) / (2.0 * FD_STEP);
            at(orig)?;
            report.record(|| format!("{name}[{e}]"), analytic.get(name).expect("listed").data()[e], numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_kind_passes() {
        for kind in LayerKind::ALL {
            let r = check_layer(kind, 1).unwrap();
            assert!(r.max_relative_error <= 1e-4, "{kind:?}: {r:?}");
            assert!(r.entries_checked > 0);
        }
    }

    #[test]
    fn relu_blocks_negative_inputs() {
        let x = Tensor::new(vec![1, 1, 1, 3], vec![-1.0f64, 0.0, 2.0]);
        let y = layer_apply(LayerKind::Relu, &[], &[&x]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let up = Tensor::filled(vec![1, 1, 1, 3], 1.0);
        let (dx, _) = layer_grad(LayerKind::Relu, &[], &[&x], &up).unwrap();
        assert_eq!(dx[0].data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_gradient_is_split_upstream() {
        let a = Tensor::filled(vec![1, 1, 2, 2], 1.0f64);
        let b = Tensor::filled(vec![1, 2, 2, 2], 2.0f64);
        let up = Tensor::from_fn(vec![1, 3, 2, 2], |i| i as f64);
        let (d, _) = layer_grad(LayerKind::Concat, &[], &[&a, &b], &up).unwrap();
        assert_eq!(d[0].data(), &up.data()[..4]);
        assert_eq!(d[1].data(), &up.data()[4..]);
    }

    #[test]
    fn identity_kernel_conv() {
        let x = Tensor::from_fn(vec![1, 1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let b = Tensor::zeros(vec![1]);
        assert_eq!(layer_apply(LayerKind::Conv3x3, &[&w, &b], &[&x]).unwrap(), x);
    }

    #[test]
    fn pool_then_upsample_replicates_block_maxima() {
        let x = Tensor::new(
            vec![1, 1, 4, 4],
            vec![1.0f64, 2., 5., 0., 3., 4., 1., 1., 0., 0., 9., 8., 7., 0., 6., 5.],
        );
        let p = layer_apply(LayerKind::MaxPool2, &[], &[&x]).unwrap();
        assert_eq!(p.data(), &[4., 5., 7., 9.]);
        let u = layer_apply(LayerKind::Upsample2, &[], &[&p]).unwrap();
        assert_eq!(u.shape(), &[1, 1, 4, 4]);
        assert_eq!(u.data(), &[4., 4., 5., 5., 4., 4., 5., 5., 7., 7., 9., 9., 7., 7., 9., 9.]);
    }

    #[test]
    fn layer_shape_errors_name_the_layer() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::zeros(vec![3, 5, 3, 3]);
        let b = Tensor::zeros(vec![3]);
        match layer_apply(LayerKind::Conv3x3, &[&w, &b], &[&x]) {
            Err(NnetError::Shape { layer, .. }) => assert_eq!(layer, "conv3x3"),
            other => panic!("{other:?}"),
        }
        let odd = Tensor::<f64>::zeros(vec![1, 1, 3, 4]);
        assert!(layer_apply(LayerKind::MaxPool2, &[], &[&odd]).is_err());
    }

    #[test]
    fn small_models_pass() {
        let cfg = ModelConfig {
            input_channels: 1,
            input_height: 8,
            input_width: 8,
            ..ModelConfig::unet(1, 2)
        };
        let r = check_model(&cfg, 1, 0).unwrap();
        assert!(r.max_relative_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn plain_blocks_pass_off_the_relu_kinks() {
        let cfg = ModelConfig {
            block_kind: crate::nnet::BlockKind::Plain,
            input_channels: 2,
            input_height: 8,
            input_width: 8,
            ..ModelConfig::unet(1, 2)
        };
        for seed in [0, 2, 5] {
            let r = check_model(&cfg, 2, seed).unwrap();
            assert!(r.max_relative_error <= 1e-4, "seed {seed}: {r:?}");
        }
    }
}
