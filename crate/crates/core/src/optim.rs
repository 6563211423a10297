//! Bias-corrected Adam.
//!
//! Moments are kept in `f64` whatever the parameter type; each updated
//! parameter is rounded to storage precision once per step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            eta: 8e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("optimizer.eta", format!("must be positive, got {}", self.eta)));
        }
        for (field, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("optimizer.eps", format!("must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Step count and per-element moments for one list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl AdamState {
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }
}

pub fn adam_init<'a, T: Real>(params: impl IntoIterator<Item = &'a Tensor<T>>, config: &AdamConfig) -> Result<AdamState> {
    config.validate()?;
    let shapes: Vec<Vec<usize>> = params.into_iter().map(|p| p.shape().to_vec()).collect();
    let zeros = || shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect();
    Ok(AdamState {
        t: 0,
        m: zeros(),
        v: zeros(),
        shapes,
    })
}

/// One Adam update. Shapes and finiteness of every gradient are checked
/// before anything is modified, so a failed step leaves params and state
/// untouched.
pub fn adam_step<'a, T: Real>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
    if params.len() != state.shapes.len() || grads.len() != state.shapes.len() {
        return Err(Error::Contract(format!(
            "adam step over {} parameter tensors with {} gradients, state holds {}",
            params.len(),
            grads.len(),
            state.shapes.len()
        )));
    }
    for (i, ((p, g), s)) in params.iter().zip(grads).zip(&state.shapes).enumerate() {
        if p.shape() != s.as_slice() {
            return Err(Error::dim("adam parameter", p.shape(), s));
        }
        if g.shape() != s.as_slice() {
            return Err(Error::dim("adam gradient", g.shape(), s));
        }
        if let Some((element, value)) = g.first_non_finite() {
            return Err(Error::NonFinite {
                context: "adam gradient".into(),
                tensor: i,
                element,
                value: value.wide(),
            });
        }
    }

    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g.wide();
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let step = config.eta * (*m / c1) / ((*v / c2).sqrt() + config.eps);
            *x = T::cast(x.wide() - step);
        }
    }
    Ok(())
}

/// Optimizer for one model part: configuration plus state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new<'a, T: Real>(params: impl IntoIterator<Item = &'a Tensor<T>>, config: AdamConfig) -> Result<Self> {
        Ok(Adam {
            state: adam_init(params, &config)?,
            config,
        })
    }

    pub fn step<'a, T: Real>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        adam_step(params, grads, &mut self.state, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Textbook scalar Adam, written independently of the tensor code.
    struct ScalarAdam {
        m: f64,
        v: f64,
        b1t: f64,
        b2t: f64,
    }

    impl ScalarAdam {
        fn step(&mut self, x: f64, g: f64, c: &AdamConfig) -> f64 {
            self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
            self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
            self.b1t *= c.beta1;
            self.b2t *= c.beta2;
            let mh = self.m / (1.0 - self.b1t);
            let vh = self.v / (1.0 - self.b2t);
            x - c.eta * mh / (vh.sqrt() + c.eps)
        }
    }

    #[test]
    fn defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.eta, c.beta1, c.beta2, c.eps), (8e-5, 0.9, 0.95, 1e-8));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_config() {
        for c in [
            AdamConfig { eta: 0.0, ..Default::default() },
            AdamConfig { beta1: 1.0, ..Default::default() },
            AdamConfig { beta2: -0.1, ..Default::default() },
            AdamConfig { eps: 0.0, ..Default::default() },
        ] {
            assert!(matches!(adam_init::<f64>([], &c), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn init_zeroes_moments() {
        let p = [Tensor::<f32>::full([2, 3], 1.0), Tensor::full([4], -1.0)];
        let s = adam_init(&p, &AdamConfig::default()).unwrap();
        assert_eq!(s.t, 0);
        assert_eq!(s.shapes(), &[vec![2, 3], vec![4]]);
        assert!(s.m.iter().chain(&s.v).flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn state_mirrors_full_model() {
        use crate::model::{BoundaryDims, CsiDims, Model, ModelConfig};
        let cfg = ModelConfig::new(CsiDims::new(32, 32).unwrap(), BoundaryDims { c1: 256, c2: 256 });
        let model = Model::<f32>::init(&cfg, 0).unwrap();
        for part in [&model.encoder, &model.tail, &model.head] {
            let s = adam_init(part.params(), &AdamConfig::default()).unwrap();
            let walked: Vec<Vec<usize>> = part
                .blocks
                .iter()
                .flat_map(|b| b.kind.param_shapes().into_iter().map(|(_, shape)| shape))
                .collect();
            assert_eq!(s.shapes(), walked.as_slice());
            assert_eq!(s.m.iter().map(Vec::len).sum::<usize>(), part.param_count());
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = [Tensor::<f32>::from_fn([5], |i| i as f32 - 2.0)];
        let before = p.clone();
        let c = AdamConfig::default();
        let mut s = adam_init(&p, &c).unwrap();
        adam_step(&mut p, &[Tensor::zeros([5])], &mut s, &c).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_eta_sign() {
        let c = AdamConfig::default();
        for g in [3.0, -0.25, 1e-3] {
            let mut p = [Tensor::<f64>::scalar(0.5)];
            let mut s = adam_init(&p, &c).unwrap();
            adam_step(&mut p, &[Tensor::scalar(g)], &mut s, &c).unwrap();
            let expected = 0.5 - c.eta * g / (g.abs() + c.eps);
            assert!((p[0].item().unwrap() - expected).abs() < 1e-15);
            assert!((p[0].item().unwrap() - (0.5 - c.eta * g.signum())).abs() < 1e-3 * c.eta);
        }
    }

    #[test]
    fn quadratic_matches_scalar_reference() {
        let c = AdamConfig::default();
        let mut p = [Tensor::<f64>::scalar(1.0)];
        let mut s = adam_init(&p, &c).unwrap();
        let mut reference = ScalarAdam { m: 0.0, v: 0.0, b1t: 1.0, b2t: 1.0 };
        let mut x = 1.0;
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let g = 2.0 * p[0].item().unwrap();
            adam_step(&mut p, &[Tensor::scalar(g)], &mut s, &c).unwrap();
            x = reference.step(x, 2.0 * x, &c);
            assert!((p[0].item().unwrap() - x).abs() <= 1e-12, "step {step}");
            if step > 0 {
                assert!(p[0].item().unwrap().abs() < prev, "step {step}");
            }
            prev = p[0].item().unwrap().abs();
        }
        assert!(prev < 1.0 - 40.0 * c.eta);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let c = AdamConfig::default();
        let mut p = [Tensor::<f32>::full([3], 1.0), Tensor::full([2], 1.0)];
        let mut s = adam_init(&p, &c).unwrap();
        let before = (p.clone(), s.clone());
        let grads = [Tensor::full([3], 0.1), Tensor::new([2], vec![0.0, f32::NAN]).unwrap()];
        let err = adam_step(&mut p, &grads, &mut s, &c).unwrap_err();
        assert!(matches!(err, Error::NonFinite { tensor: 1, element: 1, .. }));
        assert_eq!((p, s), before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let c = AdamConfig::default();
        let mut p = [Tensor::<f32>::full([3], 1.0)];
        let mut s = adam_init(&p, &c).unwrap();
        assert!(adam_step(&mut p, &[Tensor::zeros([4])], &mut s, &c).is_err());
        assert!(adam_step(&mut p, &[], &mut s, &c).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn partitioning_does_not_change_updates(
            values in prop::collection::vec(-2.0f64..2.0, 12),
            grads in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 12), 1..5),
            cut_a in 1usize..6, cut_b in 6usize..11,
        ) {
            let c = AdamConfig { eta: 0.01, ..Default::default() };
            let mut whole = [Tensor::new([12], values.clone()).unwrap()];
            let cuts = [0, cut_a, cut_b, 12];
            let mut parts: Vec<Tensor<f64>> =
                cuts.windows(2).map(|w| Tensor::new([w[1] - w[0]], values[w[0]..w[1]].to_vec()).unwrap()).collect();
            let mut sw = adam_init(&whole, &c).unwrap();
            let mut sp: Vec<AdamState> = parts.iter().map(|p| adam_init([p], &c).unwrap()).collect();
            for g in &grads {
                adam_step(&mut whole, &[Tensor::new([12], g.clone()).unwrap()], &mut sw, &c).unwrap();
                for (i, (p, s)) in parts.iter_mut().zip(&mut sp).enumerate() {
                    let slice = Tensor::new([cuts[i + 1] - cuts[i]], g[cuts[i]..cuts[i + 1]].to_vec()).unwrap();
                    adam_step([p], &[slice], s, &c).unwrap();
                }
            }
            let joined: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
            prop_assert_eq!(whole[0].data(), joined.as_slice());
        }

        #[test]
        fn steps_are_reproducible(values in prop::collection::vec(-1.0f32..1.0, 6), g in prop::collection::vec(-1.0f32..1.0, 6)) {
            let c = AdamConfig::default();
            let run = || {
                let mut p = [Tensor::new([2, 3], values.clone()).unwrap()];
                let mut s = adam_init(&p, &c).unwrap();
                let gt = Tensor::new([2, 3], g.clone()).unwrap();
                for _ in 0..3 {
                    adam_step(&mut p, std::slice::from_ref(&gt), &mut s, &c).unwrap();
                }
                (p, s)
            };
            let (a, b) = (run(), run());
            prop_assert_eq!(a.0[0].data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.0[0].data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert!(a.1.v.iter().flatten().all(|&v| v >= 0.0));
        }
    }
}
