//! Parameterized differentiable networks: U-Net generators, patch-level
//! discriminators, and the shared parameter-set plumbing.

use ndarray::{Array3, ArrayD, Ix3};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scgan_autodiff::{Scalar, Tape, Var};

use crate::data::{ImageTensor, ValueRange};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f32>)>,
}

impl ParamSet {
    fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: String, value: ArrayD<f32>) {
        self.entries.push((name, value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = &ArrayD<f32>> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<f32>> {
        self.entries.iter_mut().map(|(_, v)| v)
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f32>) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter '{name}'")))?;
        if entry.1.shape() != value.shape() {
            return Err(Error::Integrity(format!(
                "parameter '{name}' shape mismatch: {:?} vs {:?}",
                entry.1.shape(),
                value.shape()
            )));
        }
        entry.1 = value;
        Ok(())
    }

    /// Register every parameter on a tape, in declaration order.
    pub fn bind<F: Scalar>(&self, tape: &mut Tape<F>, needs_grad: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, v)| tape.leaf(v.mapv(|x| F::lit(x as f64)).into_dyn(), needs_grad))
            .collect()
    }

    /// Content digest, used to verify that an update left a set untouched.
    pub fn checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, value) in &self.entries {
            hasher.update(name.as_bytes());
            for v in value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

fn normal_init(rng: &mut ChaCha20Rng, shape: &[usize]) -> ArrayD<f32> {
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || normal.sample(rng) as f32)
}

#[derive(Debug, Clone, Copy)]
struct LayerDims {
    in_ch: usize,
    out_ch: usize,
    norm: bool,
}

fn push_conv_params(params: &mut ParamSet, rng: &mut ChaCha20Rng, prefix: &str, dims: LayerDims) {
    params.push(
        format!("{prefix}.weight"),
        normal_init(rng, &[dims.out_ch, dims.in_ch, 4, 4]),
    );
    params.push(
        format!("{prefix}.bias"),
        ArrayD::zeros(ndarray::IxDyn(&[dims.out_ch])),
    );
    if dims.norm {
        params.push(
            format!("{prefix}.norm.gamma"),
            ArrayD::from_elem(ndarray::IxDyn(&[dims.out_ch]), 1.0f32),
        );
        params.push(
            format!("{prefix}.norm.beta"),
            ArrayD::zeros(ndarray::IxDyn(&[dims.out_ch])),
        );
    }
}

fn push_conv_t_params(params: &mut ParamSet, rng: &mut ChaCha20Rng, prefix: &str, dims: LayerDims) {
    params.push(
        format!("{prefix}.weight"),
        normal_init(rng, &[dims.in_ch, dims.out_ch, 4, 4]),
    );
    params.push(
        format!("{prefix}.bias"),
        ArrayD::zeros(ndarray::IxDyn(&[dims.out_ch])),
    );
    if dims.norm {
        params.push(
            format!("{prefix}.norm.gamma"),
            ArrayD::from_elem(ndarray::IxDyn(&[dims.out_ch]), 1.0f32),
        );
        params.push(
            format!("{prefix}.norm.beta"),
            ArrayD::zeros(ndarray::IxDyn(&[dims.out_ch])),
        );
    }
}

/// Cursor over bound parameter vars, consumed in declaration order.
struct ParamCursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl<'a> ParamCursor<'a> {
    fn new(vars: &'a [Var]) -> Self {
        ParamCursor { vars, at: 0 }
    }

    fn take(&mut self) -> Var {
        let v = self.vars[self.at];
        self.at += 1;
        v
    }

    fn finish(self) -> Result<()> {
        if self.at == self.vars.len() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "parameter count mismatch: consumed {}, bound {}",
                self.at,
                self.vars.len()
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub skip_connections: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            depth: 4,
            base_channels: 64,
            in_channels: 3,
            out_channels: 3,
            skip_connections: true,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("generator depth must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("generator base_channels must be positive".into()));
        }
        if !(self.in_channels == 1 || self.in_channels == 3)
            || !(self.out_channels == 1 || self.out_channels == 3)
        {
            return Err(Error::Config("generator channels must be 1 or 3".into()));
        }
        Ok(())
    }

    /// Encoder width at stage `i`, capped at eight times the base.
    fn stage_channels(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.base_channels * 8)
    }
}

/// Encoder-decoder generator with optional skip connections. Stride-2 4x4
/// convolutions halve the spatial size on the way down; transposed
/// convolutions mirror them on the way up; a final tanh bounds the output.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    pub params: ParamSet,
    enc: Vec<LayerDims>,
    dec: Vec<LayerDims>,
}

impl Generator {
    pub fn build(config: GeneratorConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        config.validate()?;
        let d = config.depth;
        let mut enc = Vec::with_capacity(d);
        for i in 0..d {
            enc.push(LayerDims {
                in_ch: if i == 0 {
                    config.in_channels
                } else {
                    config.stage_channels(i - 1)
                },
                out_ch: config.stage_channels(i),
                // The first encoder layer is left unnormalized.
                norm: i > 0,
            });
        }
        let mut dec: Vec<LayerDims> = Vec::with_capacity(d);
        for j in 0..d {
            let skip_ch = if config.skip_connections && j > 0 {
                config.stage_channels(d - 1 - j)
            } else {
                0
            };
            let in_ch = if j == 0 {
                config.stage_channels(d - 1)
            } else {
                dec[j - 1].out_ch + skip_ch
            };
            let out_ch = if j == d - 1 {
                config.out_channels
            } else {
                config.stage_channels(d - 2 - j)
            };
            dec.push(LayerDims {
                in_ch,
                out_ch,
                norm: j < d - 1,
            });
        }
        let mut params = ParamSet::new();
        for (i, dims) in enc.iter().enumerate() {
            push_conv_params(&mut params, rng, &format!("enc{i}"), *dims);
        }
        for (j, dims) in dec.iter().enumerate() {
            push_conv_t_params(&mut params, rng, &format!("dec{j}"), *dims);
        }
        Ok(Generator {
            config,
            params,
            enc,
            dec,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = [shape[0], shape[1], shape[2]];
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let div = 1usize << self.config.depth;
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by 2^depth = {div}"
            )));
        }
        Ok(())
    }

    /// Build the forward graph on a tape. `params` must come from
    /// [`ParamSet::bind`] on the same tape.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, x: Var, params: &[Var]) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let mut cursor = ParamCursor::new(params);
        let slope = F::lit(LEAKY_SLOPE);
        let eps = F::lit(NORM_EPS);
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for dims in &self.enc {
            let w = cursor.take();
            let b = cursor.take();
            h = tape.conv2d(h, w, b, 2, 1);
            if dims.norm {
                let gamma = cursor.take();
                let beta = cursor.take();
                h = tape.instance_norm(h, gamma, beta, eps);
            }
            h = tape.leaky_relu(h, slope);
            skips.push(h);
        }
        let d = self.dec.len();
        for (j, dims) in self.dec.iter().enumerate() {
            if self.config.skip_connections && j > 0 {
                h = tape.concat_c(h, skips[d - 1 - j]);
            }
            let w = cursor.take();
            let b = cursor.take();
            h = tape.conv_t2d(h, w, b, 2, 1);
            if dims.norm {
                let gamma = cursor.take();
                let beta = cursor.take();
                h = tape.instance_norm(h, gamma, beta, eps);
                h = tape.relu(h);
            } else {
                h = tape.tanh(h);
            }
        }
        cursor.finish()?;
        Ok(h)
    }

    /// Run the generator on one image outside any training graph. The output
    /// carries the default value range enforced by the final tanh.
    pub fn translate(&self, image: &ImageTensor) -> Result<ImageTensor> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(image.data().clone().into_dyn());
        let params = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, x, &params)?;
        let data = tape
            .value(out)
            .clone()
            .into_dimensionality::<Ix3>()
            .expect("generator output rank");
        ImageTensor::from_parts(data, ValueRange::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub num_layers: usize,
    pub base_channels: usize,
    pub in_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            num_layers: 3,
            base_channels: 64,
            in_channels: 3,
        }
    }
}

impl DiscriminatorConfig {
    fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.base_channels == 0 {
            return Err(Error::Config(
                "discriminator num_layers and base_channels must be positive".into(),
            ));
        }
        if !(self.in_channels == 1 || self.in_channels == 3) {
            return Err(Error::Config("discriminator channels must be 1 or 3".into()));
        }
        Ok(())
    }

    fn stage_channels(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.base_channels * 8)
    }

    /// Patch-grid side length for a square input: `num_layers` stride-2
    /// convolutions divide the side by 2 each, then the two stride-1 4x4
    /// pad-1 layers each trim one pixel: g = size / 2^num_layers - 2.
    pub fn grid_size(&self, input: usize) -> Result<usize> {
        let div = 1usize << self.num_layers;
        if !input.is_multiple_of(div) {
            return Err(Error::Shape(format!(
                "input size {input} is not divisible by 2^num_layers = {div}"
            )));
        }
        let reduced = input / div;
        if reduced < 3 {
            return Err(Error::Shape(format!(
                "input size {input} is below the receptive-field minimum {}",
                3 * div
            )));
        }
        Ok(reduced - 2)
    }
}

/// Raw per-patch scores; squash with a sigmoid for probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchScoreMap {
    scores: Array3<f32>,
}

impl PatchScoreMap {
    pub fn new(scores: Array3<f32>) -> Result<Self> {
        if scores.dim().0 != 1 {
            return Err(Error::Shape(format!(
                "patch score map must have one channel, got {}",
                scores.dim().0
            )));
        }
        Ok(PatchScoreMap { scores })
    }

    pub fn scores(&self) -> &Array3<f32> {
        &self.scores
    }

    /// Per-patch realness in (0, 1).
    pub fn squashed(&self) -> Array3<f32> {
        self.scores.mapv(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.scores.dim();
        (h, w)
    }
}

/// Patch-level discriminator: stride-2 4x4 convolutions followed by two
/// stride-1 4x4 layers, emitting one raw score per overlapping patch.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    pub params: ParamSet,
    layers: Vec<(LayerDims, usize)>,
}

impl Discriminator {
    pub fn build(config: DiscriminatorConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        config.validate()?;
        let n = config.num_layers;
        let mut layers = Vec::with_capacity(n + 2);
        for i in 0..n {
            layers.push((
                LayerDims {
                    in_ch: if i == 0 {
                        config.in_channels
                    } else {
                        config.stage_channels(i - 1)
                    },
                    out_ch: config.stage_channels(i),
                    norm: i > 0,
                },
                2,
            ));
        }
        layers.push((
            LayerDims {
                in_ch: config.stage_channels(n - 1),
                out_ch: config.stage_channels(n),
                norm: true,
            },
            1,
        ));
        layers.push((
            LayerDims {
                in_ch: config.stage_channels(n),
                out_ch: 1,
                norm: false,
            },
            1,
        ));
        let mut params = ParamSet::new();
        for (i, (dims, _)) in layers.iter().enumerate() {
            push_conv_params(&mut params, rng, &format!("layer{i}"), *dims);
        }
        Ok(Discriminator {
            config,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Build the forward graph; the output is the raw 1 x h' x w' score map.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, x: Var, params: &[Var]) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape[0] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} input channels, got {}",
                self.config.in_channels, shape[0]
            )));
        }
        self.config.grid_size(shape[1])?;
        self.config.grid_size(shape[2])?;
        let mut cursor = ParamCursor::new(params);
        let slope = F::lit(LEAKY_SLOPE);
        let eps = F::lit(NORM_EPS);
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, (dims, stride)) in self.layers.iter().enumerate() {
            let w = cursor.take();
            let b = cursor.take();
            h = tape.conv2d(h, w, b, *stride, 1);
            if dims.norm {
                let gamma = cursor.take();
                let beta = cursor.take();
                h = tape.instance_norm(h, gamma, beta, eps);
            }
            if i < last {
                h = tape.leaky_relu(h, slope);
            }
        }
        cursor.finish()?;
        Ok(h)
    }

    /// Score one image outside any training graph.
    pub fn score(&self, image: &ImageTensor) -> Result<PatchScoreMap> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(image.data().clone().into_dyn());
        let params = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, x, &params)?;
        let scores = tape
            .value(out)
            .clone()
            .into_dimensionality::<Ix3>()
            .expect("discriminator output rank");
        PatchScoreMap::new(scores)
    }
}

/// Convenience accessor used by tests: an all-zero clone of a ParamSet.
pub fn zeroed_like(params: &ParamSet) -> ParamSet {
    let mut out = params.clone();
    for value in out.values_mut() {
        value.fill(0.0);
    }
    out
}

pub fn weight_init_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn rng() -> ChaCha20Rng {
        weight_init_rng(42, 0)
    }

    fn toy_gen_config() -> GeneratorConfig {
        GeneratorConfig {
            depth: 3,
            base_channels: 4,
            in_channels: 3,
            out_channels: 3,
            skip_connections: true,
        }
    }

    #[test]
    fn generator_preserves_spatial_size_and_range() {
        let gen = Generator::build(toy_gen_config(), &mut rng()).unwrap();
        let img = ImageTensor::new(
            Array3::from_shape_fn((3, 16, 16), |(c, i, j)| {
                ((c + i * j) as f32 * 0.37).sin() * 0.9
            }),
            ValueRange::default(),
        )
        .unwrap();
        let out = gen.translate(&img).unwrap();
        assert_eq!(out.data().dim(), (3, 16, 16));
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_rejects_non_divisible_input() {
        let gen = Generator::build(toy_gen_config(), &mut rng()).unwrap();
        let img = ImageTensor::new(Array3::zeros((3, 12, 12)), ValueRange::default()).unwrap();
        assert!(matches!(gen.translate(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn same_config_and_seed_build_identical_parameters() {
        let a = Generator::build(toy_gen_config(), &mut rng()).unwrap();
        let b = Generator::build(toy_gen_config(), &mut rng()).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        let c = Generator::build(toy_gen_config(), &mut weight_init_rng(43, 0)).unwrap();
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn generator_parameter_count_matches_stage_table() {
        // Hand-derived from the architecture: 4x4 kernels, encoder widths
        // min(64 * 2^i, 512), norms on all but the first encoder and last
        // decoder layer, skip concatenation doubling decoder inputs.
        let config = GeneratorConfig::default();
        let gen = Generator::build(config, &mut rng()).unwrap();
        let k = 16;
        let enc_ch = [64usize, 128, 256, 512];
        let mut expected = 0usize;
        let mut prev = 3;
        for (i, &ch) in enc_ch.iter().enumerate() {
            expected += ch * prev * k + ch;
            if i > 0 {
                expected += 2 * ch;
            }
            prev = ch;
        }
        let dec_in = [512usize, 256 + 256, 128 + 128, 64 + 64];
        let dec_out = [256usize, 128, 64, 3];
        for j in 0..4 {
            expected += dec_in[j] * dec_out[j] * k + dec_out[j];
            if j < 3 {
                expected += 2 * dec_out[j];
            }
        }
        assert_eq!(expected, 6_173_699);
        assert_eq!(gen.param_count(), expected);
    }

    #[test]
    fn discriminator_grid_sizes_follow_the_formula() {
        let config = DiscriminatorConfig {
            num_layers: 3,
            base_channels: 4,
            in_channels: 3,
        };
        assert_eq!(config.grid_size(64).unwrap(), 6);
        assert_eq!(config.grid_size(128).unwrap(), 14);
        assert_eq!(config.grid_size(256).unwrap(), 30);
        assert!(config.grid_size(63).is_err());
        assert!(config.grid_size(16).is_err());

        let disc = Discriminator::build(config, &mut rng()).unwrap();
        let img = ImageTensor::new(
            Array3::from_shape_fn((3, 64, 64), |(c, i, j)| ((c * i + j) as f32 * 0.11).cos()),
            ValueRange::default(),
        )
        .unwrap();
        let map = disc.score(&img).unwrap();
        assert_eq!(map.grid(), (6, 6));
        let (h, w) = map.grid();
        assert!(h < 64 && w < 64);
    }

    #[test]
    fn zero_parameters_squash_to_one_half() {
        let config = DiscriminatorConfig {
            num_layers: 3,
            base_channels: 4,
            in_channels: 3,
        };
        let mut disc = Discriminator::build(config, &mut rng()).unwrap();
        disc.params = zeroed_like(&disc.params);
        let img = ImageTensor::new(
            Array3::from_shape_fn((3, 64, 64), |(c, i, j)| ((c + i + j) as f32 * 0.01) % 1.0),
            ValueRange::default(),
        )
        .unwrap();
        let map = disc.score(&img).unwrap();
        assert!(map.squashed().iter().all(|&p| (p - 0.5).abs() < 1e-7));
    }
}
