//! Backbone contract and the two bundled implementations: a small reference
//! CNN and a parameter-free flatten backbone used for linear-model oracles.

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    avgpool2_backward, avgpool2_forward, gap_backward, gap_forward, relu_backward, relu_forward, Conv2d, ConvCache,
};
use crate::error::{Error, Result};

/// Sequential reader over a flat parameter blob.
pub struct ParamReader<'a> {
    data: &'a [f64],
    pos: usize,
}

impl<'a> ParamReader<'a> {
    pub fn new(data: &'a [f64]) -> Self {
        ParamReader { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        if self.pos + n > self.data.len() {
            return Err(Error::BadModelConfig(format!(
                "parameter blob too short: need {} more values, have {}",
                n,
                self.data.len() - self.pos
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::BadModelConfig(format!(
                "parameter blob too long: {} values left over",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// A differentiable map from a batch of single-channel images to feature
/// vectors of fixed dimension `feature_dim()`.
///
/// Parameters are exposed as one flat f64 sequence in a fixed order;
/// `backward` returns gradients in exactly that order.
pub trait Backbone {
    type Cache;

    fn feature_dim(&self) -> usize;

    /// x: (N, 1, H, W) → features (N, D) plus the cache for `backward`.
    fn forward(&self, x: &Array4<f64>) -> (Array2<f64>, Self::Cache);

    /// Gradient of a scalar loss with cotangent `dfeat` on the features.
    /// Returns the flat parameter gradient and, when requested, the input
    /// gradient (needed for saliency).
    fn backward(&self, cache: &Self::Cache, dfeat: &Array2<f64>, want_input_grad: bool) -> (Vec<f64>, Option<Array4<f64>>);

    fn param_count(&self) -> usize;
    fn write_params(&self, out: &mut Vec<f64>);
    fn read_params(&mut self, reader: &mut ParamReader) -> Result<()>;
}

/// Reference CNN shape knobs. `widths[0]` is the stem width; each later
/// width adds one conv+relu+pool block, and the final width is the feature
/// dimension (global average pooling).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![8, 16, 32, 64],
            init_seed: 0,
        }
    }
}

/// Build the reference CNN, validating the config. Initialization is
/// He-normal and fully determined by `config.init_seed`.
pub fn make_reference_backbone(config: &BackboneConfig) -> Result<ReferenceCnn> {
    if config.widths.is_empty() {
        return Err(Error::BadModelConfig("backbone depth must be at least 1".into()));
    }
    if config.widths.iter().any(|&w| w == 0) {
        return Err(Error::BadModelConfig("channel widths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let stem = Conv2d::he_init(config.widths[0], 1, 5, 5, 4, 2, &mut rng);
    let blocks: Vec<Conv2d> = config
        .widths
        .windows(2)
        .map(|pair| Conv2d::he_init(pair[1], pair[0], 3, 3, 1, 1, &mut rng))
        .collect();
    let cnn = ReferenceCnn {
        config: config.clone(),
        stem,
        blocks,
    };
    if cnn.param_count() > 1_000_000 {
        return Err(Error::BadModelConfig(format!(
            "backbone has {} parameters, over the 1M budget",
            cnn.param_count()
        )));
    }
    Ok(cnn)
}

/// Small convolutional backbone:
/// stem 5×5/stride-4 conv → ReLU, then per extra width a 3×3 conv → ReLU →
/// 2×2 average pool, finished with global average pooling. On 224×224 input
/// the spatial path is 224 → 56 → 28 → 14 → 7 with the default four widths.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCnn {
    config: BackboneConfig,
    stem: Conv2d,
    blocks: Vec<Conv2d>,
}

pub struct CnnCache {
    stem: ConvCache,
    stem_relu: Array4<f64>,
    /// Per block: conv cache, relu output, pool-input dims.
    blocks: Vec<(ConvCache, Array4<f64>, (usize, usize, usize, usize))>,
    gap_dim: (usize, usize, usize, usize),
}

impl ReferenceCnn {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }
}

impl Backbone for ReferenceCnn {
    type Cache = CnnCache;

    fn feature_dim(&self) -> usize {
        *self.config.widths.last().unwrap()
    }

    fn forward(&self, x: &Array4<f64>) -> (Array2<f64>, CnnCache) {
        let (y, stem_cache) = self.stem.forward(x);
        let stem_relu = relu_forward(&y);
        let mut cur = stem_relu.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for conv in &self.blocks {
            let (y, cache) = conv.forward(&cur);
            let a = relu_forward(&y);
            let pool_in_dim = a.dim();
            cur = avgpool2_forward(&a);
            blocks.push((cache, a, pool_in_dim));
        }
        let gap_dim = cur.dim();
        let features = gap_forward(&cur);
        (
            features,
            CnnCache {
                stem: stem_cache,
                stem_relu,
                blocks,
                gap_dim,
            },
        )
    }

    fn backward(&self, cache: &CnnCache, dfeat: &Array2<f64>, want_input_grad: bool) -> (Vec<f64>, Option<Array4<f64>>) {
        let mut d = gap_backward(cache.gap_dim, dfeat);
        // Walk the blocks in reverse, collecting (dw, db) per block.
        let mut block_grads: Vec<(Array4<f64>, ndarray::Array1<f64>)> = Vec::with_capacity(self.blocks.len());
        for (conv, (conv_cache, relu_out, pool_in_dim)) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            let d_pool_in = avgpool2_backward(*pool_in_dim, &d);
            let d_conv_out = relu_backward(relu_out, &d_pool_in);
            let (dw, db, dx) = conv.backward(conv_cache, &d_conv_out, true);
            block_grads.push((dw, db));
            d = dx.unwrap();
        }
        block_grads.reverse();

        let d_stem_out = relu_backward(&cache.stem_relu, &d);
        let (dsw, dsb, dinput) = self.stem.backward(&cache.stem, &d_stem_out, want_input_grad);

        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend(dsw.iter());
        flat.extend(dsb.iter());
        for (dw, db) in &block_grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        (flat, dinput)
    }

    fn param_count(&self) -> usize {
        self.stem.param_count() + self.blocks.iter().map(Conv2d::param_count).sum::<usize>()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend(self.stem.weight.iter());
        out.extend(self.stem.bias.iter());
        for conv in &self.blocks {
            out.extend(conv.weight.iter());
            out.extend(conv.bias.iter());
        }
    }

    fn read_params(&mut self, reader: &mut ParamReader) -> Result<()> {
        let read_conv = |conv: &mut Conv2d, reader: &mut ParamReader| -> Result<()> {
            let w_dim = conv.weight.dim();
            let w = reader.take(conv.weight.len())?;
            conv.weight = Array4::from_shape_vec(w_dim, w.to_vec()).unwrap();
            let b = reader.take(conv.bias.len())?;
            conv.bias = ndarray::Array1::from_vec(b.to_vec());
            Ok(())
        };
        read_conv(&mut self.stem, reader)?;
        for conv in &mut self.blocks {
            read_conv(conv, reader)?;
        }
        Ok(())
    }
}

/// Parameter-free backbone whose features are the flattened pixels; with a
/// linear head on top the whole model is a linear map, giving closed-form
/// oracles for saliency tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlattenBackbone {
    pub height: usize,
    pub width: usize,
}

impl Backbone for FlattenBackbone {
    type Cache = (usize, usize, usize, usize);

    fn feature_dim(&self) -> usize {
        self.height * self.width
    }

    fn forward(&self, x: &Array4<f64>) -> (Array2<f64>, Self::Cache) {
        let dim = x.dim();
        let (n, c, h, w) = dim;
        assert_eq!((c, h, w), (1, self.height, self.width), "flatten backbone shape mismatch");
        let flat = x
            .view()
            .into_shape_with_order((n, h * w))
            .expect("standard layout")
            .to_owned();
        (flat, dim)
    }

    fn backward(&self, cache: &Self::Cache, dfeat: &Array2<f64>, want_input_grad: bool) -> (Vec<f64>, Option<Array4<f64>>) {
        let dinput = want_input_grad.then(|| {
            dfeat
                .view()
                .into_shape_with_order(*cache)
                .expect("standard layout")
                .to_owned()
        });
        (Vec::new(), dinput)
    }

    fn param_count(&self) -> usize {
        0
    }

    fn write_params(&self, _out: &mut Vec<f64>) {}

    fn read_params(&mut self, _reader: &mut ParamReader) -> Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_input(n: usize, hw: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, 1, hw, hw), |_| rng.gen_range(0.0..1.0))
    }

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            widths: vec![2, 3, 4, 5],
            init_seed: 42,
        }
    }

    #[test]
    fn default_config_feature_dim() {
        let cnn = make_reference_backbone(&BackboneConfig::default()).unwrap();
        assert_eq!(cnn.feature_dim(), 64);
        assert!(cnn.param_count() <= 1_000_000);
    }

    #[test]
    fn same_seed_identical_params() {
        let a = make_reference_backbone(&small_config()).unwrap();
        let b = make_reference_backbone(&small_config()).unwrap();
        assert_eq!(a, b);
        let c = make_reference_backbone(&BackboneConfig {
            init_seed: 43,
            ..small_config()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(
            make_reference_backbone(&BackboneConfig {
                widths: vec![],
                init_seed: 0
            }),
            Err(Error::BadModelConfig(_))
        ));
        assert!(matches!(
            make_reference_backbone(&BackboneConfig {
                widths: vec![4, 0, 8],
                init_seed: 0
            }),
            Err(Error::BadModelConfig(_))
        ));
    }

    #[test]
    fn forward_shapes() {
        let cnn = make_reference_backbone(&small_config()).unwrap();
        let x = rand_input(3, 32, 1);
        let (f, _) = cnn.forward(&x);
        assert_eq!(f.dim(), (3, 5));

        let default = make_reference_backbone(&BackboneConfig::default()).unwrap();
        let x224 = rand_input(1, 224, 2);
        let (f224, _) = default.forward(&x224);
        assert_eq!(f224.dim(), (1, 64));
    }

    #[test]
    fn params_round_trip_changes_forward() {
        let src = make_reference_backbone(&small_config()).unwrap();
        let mut dst = make_reference_backbone(&BackboneConfig {
            init_seed: 999,
            ..small_config()
        })
        .unwrap();
        let x = rand_input(2, 32, 3);
        let (f_src, _) = src.forward(&x);
        let (f_before, _) = dst.forward(&x);
        assert_ne!(f_src, f_before);

        let mut blob = Vec::new();
        src.write_params(&mut blob);
        assert_eq!(blob.len(), src.param_count());
        let mut reader = ParamReader::new(&blob);
        dst.read_params(&mut reader).unwrap();
        reader.finish().unwrap();
        let (f_after, _) = dst.forward(&x);
        assert_eq!(f_src, f_after);
    }

    #[test]
    fn param_reader_validates_length() {
        let cnn = make_reference_backbone(&small_config()).unwrap();
        let mut blob = Vec::new();
        cnn.write_params(&mut blob);

        let mut short = blob.clone();
        short.pop();
        let mut c2 = cnn.clone();
        let mut reader = ParamReader::new(&short);
        assert!(c2.read_params(&mut reader).is_err());

        let mut long = blob.clone();
        long.push(0.0);
        let mut c3 = cnn.clone();
        let mut reader = ParamReader::new(&long);
        c3.read_params(&mut reader).unwrap();
        assert!(reader.finish().is_err());
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        let cnn = make_reference_backbone(&small_config()).unwrap();
        let x = rand_input(2, 32, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (f, cache) = cnn.forward(&x);
        let cotangent = Array2::from_shape_fn(f.dim(), |_| rng.gen_range(-1.0..1.0));
        let (dparams, dinput) = cnn.backward(&cache, &cotangent, true);
        assert_eq!(dparams.len(), cnn.param_count());

        let mut params = Vec::new();
        cnn.write_params(&mut params);

        let loss_at = |theta: &[f64], x: &Array4<f64>| -> f64 {
            let mut c = cnn.clone();
            let mut reader = ParamReader::new(theta);
            c.read_params(&mut reader).unwrap();
            let (f, _) = c.forward(x);
            (&f * &cotangent).sum()
        };

        // Spot-check a spread of parameter coordinates (full sweep is slow).
        let eps = 1e-5;
        let stride = (params.len() / 60).max(1);
        for i in (0..params.len()).step_by(stride) {
            let orig = params[i];
            params[i] = orig + eps;
            let up = loss_at(&params, &x);
            params[i] = orig - eps;
            let down = loss_at(&params, &x);
            params[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let denom = numeric.abs().max(dparams[i].abs()).max(1e-6);
            assert!(
                (numeric - dparams[i]).abs() / denom < 1e-4,
                "param {i}: numeric {numeric} vs analytic {}",
                dparams[i]
            );
        }

        // Input gradient at sampled pixels.
        let dinput = dinput.unwrap();
        let mut xp = x.clone();
        for &(ni, r, c) in &[(0usize, 3usize, 5usize), (1, 10, 20), (0, 31, 0), (1, 16, 16)] {
            let orig = xp[(ni, 0, r, c)];
            xp[(ni, 0, r, c)] = orig + eps;
            let (fu, _) = cnn.forward(&xp);
            xp[(ni, 0, r, c)] = orig - eps;
            let (fd, _) = cnn.forward(&xp);
            xp[(ni, 0, r, c)] = orig;
            let numeric = ((&fu * &cotangent).sum() - (&fd * &cotangent).sum()) / (2.0 * eps);
            let analytic = dinput[(ni, 0, r, c)];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "pixel ({ni},{r},{c}): {numeric} vs {analytic}"
            );
        }
    }

    #[test]
    fn flatten_backbone_is_identity_map() {
        let bb = FlattenBackbone { height: 8, width: 6 };
        assert_eq!(bb.feature_dim(), 48);
        let x = Array4::from_shape_fn((2, 1, 8, 6), |(n, _, r, c)| (n * 100 + r * 6 + c) as f64);
        let (f, cache) = bb.forward(&x);
        assert_eq!(f[(0, 0)], 0.0);
        assert_eq!(f[(1, 47)], 147.0);

        let dfeat = Array2::from_shape_fn((2, 48), |(n, i)| (n * 48 + i) as f64);
        let (dparams, dinput) = bb.backward(&cache, &dfeat, true);
        assert!(dparams.is_empty());
        let dinput = dinput.unwrap();
        assert_eq!(dinput[(1, 0, 7, 5)], (48 + 47) as f64);
    }
}
