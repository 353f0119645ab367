//! Four-block U-Net producing per-pixel class probabilities.
//!
//! Encoder blocks run two 3×3 convolutions (each followed by ReLU) with
//! `encoder_filters[i]` outputs; the first three blocks are followed by 2×2
//! max pooling and the fourth acts as the bottleneck. Each decoder stage
//! upsamples with a 2×2 stride-2 transposed convolution, concatenates the
//! matching encoder output and applies two more 3×3 convolutions, so the
//! decoder filter sequence mirrors the encoder. A 1×1 convolution maps to
//! class logits and a channel softmax yields probabilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_filters: [usize; 4],
    pub kernel: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 7,
            num_classes: crate::NUM_CLASSES,
            encoder_filters: [16, 32, 64, 64],
            kernel: 3,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::arg("channel counts must be positive"));
        }
        if self.encoder_filters.contains(&0) {
            return Err(Error::arg("encoder filters must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::arg("kernel size must be odd"));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter in declaration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let f = self.encoder_filters;
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let mut cin = self.in_channels;
        for (i, &fi) in f.iter().enumerate() {
            conv(format!("enc{i}.conv1"), cin, fi, k);
            conv(format!("enc{i}.conv2"), fi, fi, k);
            cin = fi;
        }
        let mut deconvs = Vec::new();
        for i in (0..3).rev() {
            deconvs.push((i, cin, f[i]));
            cin = f[i];
        }
        let mut out2 = Vec::new();
        for (i, from, to) in deconvs {
            out2.push((format!("dec{i}.up.weight"), vec![from, to, 2, 2]));
            out2.push((format!("dec{i}.up.bias"), vec![to]));
            out2.push((format!("dec{i}.conv1.weight"), vec![to, 2 * to, k, k]));
            out2.push((format!("dec{i}.conv1.bias"), vec![to]));
            out2.push((format!("dec{i}.conv2.weight"), vec![to, to, k, k]));
            out2.push((format!("dec{i}.conv2.bias"), vec![to]));
        }
        out.extend(out2);
        out.push(("head.weight".into(), vec![self.num_classes, f[0], 1, 1]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }
}

/// Network parameters in [`UNetConfig::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams {
    pub config: UNetConfig,
    pub params: Vec<Parameter>,
}

impl UNetParams {
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// All parameters set to zero (uniform output probabilities).
    pub fn zeros(cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let params = cfg
            .layout()
            .into_iter()
            .map(|(_, shape)| Parameter::new(Tensor::zeros(&shape)))
            .collect();
        Ok(UNetParams {
            config: cfg.clone(),
            params,
        })
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// He initialisation: weights ~ N(0, sqrt(2 / fan_in)), biases zero.
pub fn init_params(cfg: &UNetConfig) -> Result<UNetParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Vec::new();
    for (name, shape) in cfg.layout() {
        let value = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            // conv weights are [out, in, k, k]; transposed ones are [in, out, 2, 2]
            let fan_in = if name.contains(".up.") {
                shape[0] * shape[2] * shape[3]
            } else {
                shape[1] * shape[2] * shape[3]
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
        };
        params.push(Parameter::new(value));
    }
    Ok(UNetParams {
        config: cfg.clone(),
        params,
    })
}

/// Total number of scalar parameters implied by `cfg`.
pub fn param_count(cfg: &UNetConfig) -> usize {
    cfg.layout()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Result of recording the network on a tape.
#[derive(Debug)]
pub struct Forward {
    /// Class probabilities `[B, classes, H, W]`.
    pub probs: Var,
    /// Parameter leaves, aligned with `UNetParams::params`.
    pub param_vars: Vec<Var>,
}

/// Records the network on `tape` for input `x: [B, in_channels, H, W]`.
pub fn forward(tape: &mut Tape, p: &UNetParams, x: Var) -> Result<Forward> {
    let [_, c, h, w] = tape.value(x).dims4()?;
    if c != p.config.in_channels {
        return Err(Error::arg(format!(
            "input has {c} channels, network expects {}",
            p.config.in_channels
        )));
    }
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(Error::arg(format!(
            "input {h}x{w} not divisible by 16; pad or crop first"
        )));
    }
    let vars: Vec<Var> = p.params.iter().map(|q| tape.param(q)).collect();
    let mut next = vars.iter().copied();
    let mut take2 = || (next.next().expect("layout"), next.next().expect("layout"));

    let mut skips = Vec::with_capacity(3);
    let mut cur = x;
    for i in 0..4 {
        let (w1, b1) = take2();
        cur = tape.conv2d(cur, w1, b1)?;
        cur = tape.relu(cur);
        let (w2, b2) = take2();
        cur = tape.conv2d(cur, w2, b2)?;
        cur = tape.relu(cur);
        if i < 3 {
            skips.push(cur);
            cur = tape.maxpool2x2(cur)?;
        }
    }
    for skip in skips.into_iter().rev() {
        let (wu, bu) = take2();
        cur = tape.conv_transpose2x2(cur, wu, bu)?;
        cur = tape.concat_channels(cur, skip)?;
        let (w1, b1) = take2();
        cur = tape.conv2d(cur, w1, b1)?;
        cur = tape.relu(cur);
        let (w2, b2) = take2();
        cur = tape.conv2d(cur, w2, b2)?;
        cur = tape.relu(cur);
    }
    let (wh, bh) = take2();
    let logits = tape.conv2d(cur, wh, bh)?;
    let probs = tape.softmax_channels(logits)?;
    Ok(Forward {
        probs,
        param_vars: vars,
    })
}

/// Convenience inference: probabilities for `x` without keeping the tape.
pub fn predict(p: &UNetParams, x: Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = forward(&mut tape, p, xv)?;
    Ok(tape.value(out.probs).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn default_param_count_matches_hand_count() {
        // Layer-by-layer: weights + biases.
        let layers: [(usize, usize, usize); 18] = [
            (7, 16, 9),
            (16, 16, 9),
            (16, 32, 9),
            (32, 32, 9),
            (32, 64, 9),
            (64, 64, 9),
            (64, 64, 9),
            (64, 64, 9),
            (64, 64, 4), // up to level 3
            (128, 64, 9),
            (64, 64, 9),
            (64, 32, 4), // up to level 2
            (64, 32, 9),
            (32, 32, 9),
            (32, 16, 4), // up to level 1
            (32, 16, 9),
            (16, 16, 9),
            (16, 4, 1), // head
        ];
        let hand: usize = layers.iter().map(|&(i, o, k)| i * o * k + o).sum();
        assert_eq!(hand, 318_692);
        assert_eq!(param_count(&UNetConfig::default()), 318_692);
    }

    #[test]
    fn single_1x1_layer_count() {
        // 1 weight + 1 bias
        let shape = [1usize, 1, 1, 1];
        assert_eq!(shape.iter().product::<usize>() + 1, 2);
        let cfg = UNetConfig {
            in_channels: 1,
            num_classes: 1,
            encoder_filters: [1, 1, 1, 1],
            kernel: 1,
            seed: 0,
        };
        let head = cfg.layout().into_iter().rev().take(2);
        assert_eq!(head.map(|(_, s)| s.iter().product::<usize>()).sum::<usize>(), 2);
    }

    #[test]
    fn doubling_filters_quadruples_interior_weights() {
        let base = UNetConfig::default();
        let doubled = UNetConfig {
            encoder_filters: base.encoder_filters.map(|f| 2 * f),
            ..base.clone()
        };
        let (a, b) = (base.layout(), doubled.layout());
        for ((name, sa), (_, sb)) in a.iter().zip(&b) {
            let interior = name.ends_with(".weight")
                && name != "enc0.conv1.weight"
                && name != "head.weight";
            if interior {
                let na: usize = sa.iter().product();
                let nb: usize = sb.iter().product();
                assert_eq!(nb, 4 * na, "{name}");
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = UNetConfig::default();
        assert_eq!(init_params(&cfg).unwrap(), init_params(&cfg).unwrap());
        let other = UNetConfig { seed: 1, ..cfg.clone() };
        assert_ne!(init_params(&cfg).unwrap().params, init_params(&other).unwrap().params);
    }

    #[test]
    fn init_std_is_he_scaled() {
        let p = init_params(&UNetConfig::default()).unwrap();
        // enc0.conv2: 16 -> 16, fan_in = 9 * 16
        let w = &p.params[2].value;
        assert_eq!(w.shape(), &[16, 16, 3, 3]);
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let target = (2.0f64 / (9.0 * 16.0)).sqrt();
        assert!((var.sqrt() - target).abs() < 0.1 * target);
        assert!(p.params[3].value.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn output_shape_and_simplex() {
        let p = init_params(&UNetConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[2, 7, 64, 64], |_| rng.random_range(-1.0..1.0));
        let probs = predict(&p, x).unwrap();
        assert_eq!(probs.shape(), &[2, 4, 64, 64]);
        for img in 0..2 {
            for i in 0..64 {
                for j in 0..64 {
                    let s: f64 = (0..4).map(|c| probs.get4(img, c, i, j)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let p = init_params(&UNetConfig::default()).unwrap();
        assert!(predict(&p, Tensor::zeros(&[1, 7, 50, 50])).is_err());
        assert!(predict(&p, Tensor::zeros(&[1, 6, 16, 16])).is_err());
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let p = UNetParams::zeros(&UNetConfig::default()).unwrap();
        let probs = predict(&p, Tensor::full(&[1, 7, 16, 16], 0.3)).unwrap();
        assert!(probs.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let p = init_params(&UNetConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::from_fn(&[1, 7, 16, 16], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[1, 7, 16, 16], |_| rng.random_range(-1.0..1.0));
        let cat = |x: &Tensor, y: &Tensor| {
            let mut d = x.data().to_vec();
            d.extend_from_slice(y.data());
            Tensor::new(&[2, 7, 16, 16], d).unwrap()
        };
        let ab = predict(&p, cat(&a, &b)).unwrap();
        let ba = predict(&p, cat(&b, &a)).unwrap();
        let half = ab.len() / 2;
        assert_eq!(&ab.data()[..half], &ba.data()[half..]);
        assert_eq!(&ab.data()[half..], &ba.data()[..half]);
        // and repeated evaluation is bitwise stable
        assert_eq!(ab, predict(&p, cat(&a, &b)).unwrap());
    }
}
