//! Frozen 19-layer convolutional feature extractor for the perceptual loss,
//! plus the identity stub used in tests.
//!
//! Weights load from a local container file; nothing is downloaded. A
//! deterministic randomly initialized reference network can be written with
//! [`write_reference_weights`] so the pipeline runs end to end without
//! pretrained weights; swapping in converted pretrained weights is a pure
//! file substitution.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array4, ArrayD, Ix1, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scgan_autodiff::{Scalar, Tape, Var};

use crate::data::{ImageTensor, ValueRange};
use crate::error::{Error, Result};
use crate::tensorfile;

const WEIGHTS_MAGIC: &[u8; 4] = b"SGWT";

/// Convolution widths of the 16-layer conv stack, in order.
const CONV_CHANNELS: [usize; 16] = [
    64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512,
];
/// Conv indices preceded by a 2x2 max pool (block boundaries).
const POOL_BEFORE: [usize; 4] = [2, 4, 8, 12];
/// Convs per block, defining the `conv{block}_{pos}` naming.
const BLOCK_SIZES: [usize; 5] = [2, 2, 4, 4, 4];

/// Channel statistics the pretrained classifier expects after mapping the
/// image to [0, 1].
const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Resolve a `conv{block}_{pos}` id to an index into the conv stack.
pub fn layer_index(layer_id: &str) -> Result<usize> {
    let rest = layer_id
        .strip_prefix("conv")
        .ok_or_else(|| Error::Config(format!("unknown extractor layer '{layer_id}'")))?;
    let (block, pos) = rest
        .split_once('_')
        .ok_or_else(|| Error::Config(format!("unknown extractor layer '{layer_id}'")))?;
    let block: usize = block
        .parse()
        .map_err(|_| Error::Config(format!("unknown extractor layer '{layer_id}'")))?;
    let pos: usize = pos
        .parse()
        .map_err(|_| Error::Config(format!("unknown extractor layer '{layer_id}'")))?;
    if !(1..=5).contains(&block) || pos == 0 || pos > BLOCK_SIZES[block - 1] {
        return Err(Error::Config(format!("unknown extractor layer '{layer_id}'")));
    }
    Ok(BLOCK_SIZES[..block - 1].iter().sum::<usize>() + pos - 1)
}

fn layer_name(index: usize) -> String {
    let mut remaining = index;
    for (block, &size) in BLOCK_SIZES.iter().enumerate() {
        if remaining < size {
            return format!("conv{}_{}", block + 1, remaining + 1);
        }
        remaining -= size;
    }
    unreachable!("conv index out of range")
}

/// Number of pools before conv `index`; the input must be divisible by
/// 2^pools for the pooling stages to stay well formed.
fn pools_before(index: usize) -> usize {
    POOL_BEFORE.iter().filter(|&&p| p <= index).count()
}

/// Where extractor weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    /// Pass-through features; reduces the perceptual loss to plain L1.
    Identity,
    /// A weights container on disk.
    File(PathBuf),
}

/// Configuration naming the tap layer and the weights location.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureExtractorHandle {
    pub layer_id: String,
    pub weights_source: WeightsSource,
}

impl FeatureExtractorHandle {
    pub fn new(layer_id: impl Into<String>, weights_source: WeightsSource) -> Self {
        FeatureExtractorHandle {
            layer_id: layer_id.into(),
            weights_source,
        }
    }

    /// The default tap: post-activation conv4_4.
    pub fn with_weights(weights_source: WeightsSource) -> Self {
        Self::new("conv4_4", weights_source)
    }

    /// Load the extractor this handle names.
    pub fn load(&self) -> Result<Extractor> {
        match &self.weights_source {
            WeightsSource::Identity => Ok(Extractor::Identity),
            WeightsSource::File(path) => {
                let layer = layer_index(&self.layer_id)?;
                let net = Vgg19::from_file(path)?;
                if net.convs.len() <= layer {
                    return Err(Error::Config(format!(
                        "weights file holds {} conv layers, layer '{}' needs {}",
                        net.convs.len(),
                        self.layer_id,
                        layer + 1
                    )));
                }
                Ok(Extractor::Vgg { net, layer })
            }
        }
    }
}

/// A loaded, frozen feature extractor.
pub enum Extractor {
    Identity,
    Vgg { net: Vgg19, layer: usize },
}

impl Extractor {
    /// Append the feature computation for `x` (an image node in `range`) to
    /// a tape. Extractor weights enter as constants, so gradients flow to
    /// the image but never into the extractor.
    pub fn features<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        range: ValueRange,
    ) -> Result<Var> {
        match self {
            Extractor::Identity => Ok(x),
            Extractor::Vgg { net, layer } => net.features(tape, x, *layer, range),
        }
    }

    /// Feature map of one image outside any training graph.
    pub fn extract(&self, image: &ImageTensor) -> Result<ArrayD<f32>> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(image.data().clone().into_dyn());
        let out = self.features(&mut tape, x, image.range())?;
        Ok(tape.value(out).clone())
    }

    /// Digest of the frozen parameters; stable across calls by construction.
    pub fn fingerprint(&self) -> String {
        match self {
            Extractor::Identity => "identity".to_string(),
            Extractor::Vgg { net, layer } => {
                format!("vgg19:{}:{}", layer_name(*layer), net.checksum())
            }
        }
    }
}

/// One-shot convenience wrapper: load the handle's extractor and run it.
pub fn extract_features(
    handle: &FeatureExtractorHandle,
    image: &ImageTensor,
) -> Result<ArrayD<f32>> {
    handle.load()?.extract(image)
}

/// The 16-conv feature stack of a 19-layer classifier; 3x3 kernels, pad 1,
/// ReLU after every conv, 2x2 max pools between blocks.
pub struct Vgg19 {
    convs: Vec<(Array4<f32>, Array1<f32>)>,
}

impl Vgg19 {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Resource(format!(
                "extractor weights file not found: {}",
                path.display()
            )));
        }
        let file = tensorfile::read_tensors(path, WEIGHTS_MAGIC)?;
        let mut convs = Vec::new();
        for index in 0..CONV_CHANNELS.len() {
            let name = layer_name(index);
            let Ok(weight) = file.tensor(&format!("{name}.weight")) else {
                break;
            };
            let bias = file.tensor(&format!("{name}.bias"))?;
            let in_ch = if index == 0 { 3 } else { CONV_CHANNELS[index - 1] };
            let expected = [CONV_CHANNELS[index], in_ch, 3, 3];
            if weight.shape() != expected {
                return Err(Error::Integrity(format!(
                    "tensor '{name}.weight' has shape {:?}, expected {:?}",
                    weight.shape(),
                    expected
                )));
            }
            convs.push((
                weight.clone().into_dimensionality::<Ix4>().unwrap(),
                bias.clone().into_dimensionality::<Ix1>().unwrap(),
            ));
        }
        if convs.is_empty() {
            return Err(Error::Integrity(
                "weights container holds no conv layers".into(),
            ));
        }
        Ok(Vgg19 { convs })
    }

    /// Deterministic He-initialized stand-in weights through `last_layer`
    /// (a conv id such as "conv4_4").
    pub fn reference(seed: u64, last_layer: &str) -> Result<Self> {
        let upto = layer_index(last_layer)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(upto + 1);
        for index in 0..=upto {
            let out_ch = CONV_CHANNELS[index];
            let in_ch = if index == 0 { 3 } else { CONV_CHANNELS[index - 1] };
            let std = (2.0 / (in_ch * 9) as f64).sqrt();
            let normal = Normal::new(0.0f64, std).expect("valid std");
            let weight =
                Array4::from_shape_simple_fn((out_ch, in_ch, 3, 3), || normal.sample(&mut rng) as f32);
            convs.push((weight, Array1::zeros(out_ch)));
        }
        Ok(Vgg19 { convs })
    }

    pub fn write(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let mut tensors = Vec::new();
        for (index, (weight, bias)) in self.convs.iter().enumerate() {
            let name = layer_name(index);
            tensors.push((format!("{name}.weight"), weight.clone().into_dyn()));
            tensors.push((format!("{name}.bias"), bias.clone().into_dyn()));
        }
        tensorfile::write_tensors(path, WEIGHTS_MAGIC, &meta, &tensors)
    }

    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (weight, bias) in &self.convs {
            for v in weight.iter().chain(bias.iter()) {
                hasher.update(v.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    /// Graph for the post-activation feature map at conv index `layer`.
    fn features<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        layer: usize,
        range: ValueRange,
    ) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!(
                "feature extraction needs a 3-channel image, got shape {shape:?}"
            )));
        }
        let div = 1usize << pools_before(layer);
        if !shape[1].is_multiple_of(div) || !shape[2].is_multiple_of(div) {
            return Err(Error::Shape(format!(
                "input {}x{} is not divisible by the extractor's pooling factor {div}",
                shape[1], shape[2]
            )));
        }
        let mut h = normalize_input(tape, x, range);
        for index in 0..=layer {
            if POOL_BEFORE.contains(&index) {
                h = tape.max_pool2(h);
            }
            let (weight, bias) = &self.convs[index];
            let w = tape.constant(weight.mapv(|v| F::lit(v as f64)).into_dyn());
            let b = tape.constant(bias.mapv(|v| F::lit(v as f64)).into_dyn());
            h = tape.conv2d(h, w, b, 1, 1);
            h = tape.relu(h);
        }
        Ok(h)
    }
}

/// Map an image from its value range to [0, 1], then standardize each
/// channel with the classifier's input statistics.
fn normalize_input<F: Scalar>(tape: &mut Tape<F>, x: Var, range: ValueRange) -> Var {
    let width = range.width() as f64;
    let lo = range.lo as f64;
    let mut out: Option<Var> = None;
    for c in 0..3 {
        let scale = F::lit(1.0 / (width * INPUT_STD[c]));
        let offset = F::lit(-(lo / width + INPUT_MEAN[c]) / INPUT_STD[c]);
        let shape = tape.value(x).shape().to_vec();
        let ch = tape.slice3(x, c, c + 1, 0, shape[1], 0, shape[2]);
        let ch = tape.scale(ch, scale);
        let ch = tape.offset(ch, offset);
        out = Some(match out {
            None => ch,
            Some(acc) => tape.concat_c(acc, ch),
        });
    }
    out.expect("three channels")
}

/// Write the deterministic reference weights container. The default covers
/// the stack through conv4_4, the perceptual-loss tap.
pub fn write_reference_weights(path: &Path, seed: u64) -> Result<()> {
    let net = Vgg19::reference(seed, "conv4_4")?;
    net.write(
        path,
        serde_json::json!({"kind": "vgg19-reference", "seed": seed, "last_layer": "conv4_4"}),
    )
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
