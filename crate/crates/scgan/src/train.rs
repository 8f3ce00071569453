//! The min-max training loop: alternating discriminator and generator
//! updates over unpaired batches, with replay pools, ablation presets,
//! checkpointing, and deterministic resume.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, Ix3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scgan_autodiff::{Adam, Gradients, Tape, Var};

use crate::data::{
    load_annotations, load_domain_dir, unpaired_batch, Domain, DomainSample, ImageTensor,
    UnpairedBatch, ValueRange,
};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_d_value_var, adversarial_g_var, attentive_cycle_var, cycle_var, lsgan_d_loss_var,
    lsgan_g_loss_var, tv_var, LossComponents, LossReport, LossWeights,
};
use crate::networks::{
    weight_init_rng, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ParamSet,
};
use crate::regions::{
    detect_regions, AttentionWeights, CenteredFaceProvider, RegionProvider, RegionSet, WHOLE_LABEL,
};
use crate::tensorfile::{read_tensors, write_tensors};
use crate::vgg::{Extractor, FeatureExtractorHandle, WeightsSource};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";

// Fixed rng streams so every random quantity has an independent,
// reproducible source for a given seed.
const STREAM_G_AB: u64 = 11;
const STREAM_G_BA: u64 = 12;
const STREAM_D_A: u64 = 13;
const STREAM_D_B: u64 = 14;
const STREAM_LOOP: u64 = 15;

const ADAM_EPS: f32 = 1e-8;

/// Which objective terms an ablation experiment keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationPreset {
    /// Standard cycle loss only.
    A,
    /// Attentive cycle loss only.
    B,
    /// Attentive cycle plus perceptual.
    C,
    /// Every term of the combined objective.
    #[serde(rename = "full")]
    Full,
}

/// Activation mask over the optional objective terms. Adversarial terms are
/// always active; presets gate the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveTerms {
    pub att_cyc_ab: bool,
    pub cyc_ba: bool,
    pub tv: bool,
    pub perceptual: bool,
}

impl AblationPreset {
    pub fn active(self) -> ActiveTerms {
        match self {
            AblationPreset::A => ActiveTerms {
                att_cyc_ab: false,
                cyc_ba: true,
                tv: false,
                perceptual: false,
            },
            AblationPreset::B => ActiveTerms {
                att_cyc_ab: true,
                cyc_ba: false,
                tv: false,
                perceptual: false,
            },
            AblationPreset::C => ActiveTerms {
                att_cyc_ab: true,
                cyc_ba: false,
                tv: false,
                perceptual: true,
            },
            AblationPreset::Full => ActiveTerms {
                att_cyc_ab: true,
                cyc_ba: true,
                tv: true,
                perceptual: true,
            },
        }
    }
}

impl std::str::FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(AblationPreset::A),
            "B" | "b" => Ok(AblationPreset::B),
            "C" | "c" => Ok(AblationPreset::C),
            "full" | "Full" => Ok(AblationPreset::Full),
            other => Err(Error::Argument(format!(
                "unknown preset '{other}' (expected A, B, C, or full)"
            ))),
        }
    }
}

/// Adversarial objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    Log,
    Lsgan,
}

impl std::str::FromStr for GanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(GanMode::Log),
            "lsgan" => Ok(GanMode::Lsgan),
            other => Err(Error::Argument(format!(
                "unknown gan mode '{other}' (expected log or lsgan)"
            ))),
        }
    }
}

/// How the attentive cycle terms handle region crops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentiveMode {
    /// One full-image cycle; regions crop the reconstruction.
    CropReconstruction,
    /// Each region crop is resized and cycled through both generators.
    CropThenGenerate,
}

impl std::str::FromStr for AttentiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crop_reconstruction" => Ok(AttentiveMode::CropReconstruction),
            "crop_then_generate" => Ok(AttentiveMode::CropThenGenerate),
            other => Err(Error::Argument(format!(
                "unknown attentive mode '{other}' \
                 (expected crop_reconstruction or crop_then_generate)"
            ))),
        }
    }
}

/// Everything that determines a training run besides the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    /// Attention weight of the whole-image term.
    pub lambda_whole: f32,
    /// Attention weight of each facial-component term.
    pub lambda_component: f32,
    pub batch_size: usize,
    pub total_steps: u64,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub seed: u64,
    pub ablation_preset: AblationPreset,
    pub gan_mode: GanMode,
    pub attentive_mode: AttentiveMode,
    pub pool_size: usize,
    pub image_size: usize,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub extractor: FeatureExtractorHandle,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            lambda_whole: 1.0,
            lambda_component: 0.5,
            batch_size: 1,
            total_steps: 200,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            ablation_preset: AblationPreset::Full,
            gan_mode: GanMode::Log,
            attentive_mode: AttentiveMode::CropReconstruction,
            pool_size: 50,
            image_size: 64,
            checkpoint_interval: 0,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            extractor: FeatureExtractorHandle::with_weights(WeightsSource::Identity),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        for (name, w) in [
            ("alpha", self.weights.alpha),
            ("beta", self.weights.beta),
            ("gamma", self.weights.gamma),
            ("lambda_whole", self.lambda_whole),
            ("lambda_component", self.lambda_component),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        let div = 1usize << self.generator.depth;
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by the generator's 2^depth = {div}",
                self.image_size
            )));
        }
        self.discriminator.grid_size(self.image_size)?;
        Ok(())
    }

    /// Attention weights for a region set under this config's lambda rule.
    pub fn attention_weights(&self, set: &RegionSet) -> AttentionWeights {
        AttentionWeights {
            lambda: set
                .entries()
                .iter()
                .map(|r| {
                    if r.label == WHOLE_LABEL {
                        self.lambda_whole
                    } else {
                        self.lambda_component
                    }
                })
                .collect(),
        }
    }
}

/// Digest of the fields that determine parameter shapes. Checkpoints embed
/// it so a resume against a different architecture fails loudly.
pub fn arch_fingerprint(config: &TrainConfig) -> String {
    let arch = serde_json::json!({
        "generator": config.generator,
        "discriminator": config.discriminator,
        "image_size": config.image_size,
    });
    let mut hasher = Sha256::new();
    hasher.update(arch.to_string().as_bytes());
    hex_encode(&hasher.finalize())
}

/// Fixed-capacity buffer of past generator outputs. Feeding the
/// discriminator a mix of fresh and historical fakes damps oscillation.
#[derive(Debug, Clone)]
pub struct ReplayPool {
    capacity: usize,
    items: Vec<ImageTensor>,
}

impl ReplayPool {
    pub fn new(capacity: usize) -> Self {
        ReplayPool {
            capacity,
            items: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Zero capacity passes the candidate through. Until the pool fills, the
    /// candidate is stored and returned. Afterwards a fair coin returns
    /// either the candidate or a stored fake swapped out for the candidate.
    pub fn draw(&mut self, candidate: ImageTensor, rng: &mut ChaCha20Rng) -> ImageTensor {
        if self.capacity == 0 {
            return candidate;
        }
        if self.items.len() < self.capacity {
            self.items.push(candidate.clone());
            return candidate;
        }
        if rng.gen::<bool>() {
            candidate
        } else {
            let slot = rng.gen_range(0..self.items.len());
            std::mem::replace(&mut self.items[slot], candidate)
        }
    }
}

/// Free-function form of [`ReplayPool::draw`].
pub fn replay_pool_draw(
    pool: &mut ReplayPool,
    candidate: ImageTensor,
    rng: &mut ChaCha20Rng,
) -> ImageTensor {
    pool.draw(candidate, rng)
}

/// Everything the loop mutates: step counter, the four networks, optimizer
/// moments, replay pools, and the rng driving pool decisions.
#[derive(Clone)]
pub struct TrainState {
    pub step: u64,
    pub g_ab: Generator,
    pub g_ba: Generator,
    pub d_a: Discriminator,
    pub d_b: Discriminator,
    adam_g: Adam<f32>,
    adam_d_a: Adam<f32>,
    adam_d_b: Adam<f32>,
    pool_a: ReplayPool,
    pool_b: ReplayPool,
    rng: ChaCha20Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = |lr| Adam::new(lr, config.beta1, config.beta2, ADAM_EPS);
        Ok(TrainState {
            step: 0,
            g_ab: Generator::build(
                config.generator,
                &mut weight_init_rng(config.seed, STREAM_G_AB),
            )?,
            g_ba: Generator::build(
                config.generator,
                &mut weight_init_rng(config.seed, STREAM_G_BA),
            )?,
            d_a: Discriminator::build(
                config.discriminator,
                &mut weight_init_rng(config.seed, STREAM_D_A),
            )?,
            d_b: Discriminator::build(
                config.discriminator,
                &mut weight_init_rng(config.seed, STREAM_D_B),
            )?,
            adam_g: adam(config.learning_rate),
            adam_d_a: adam(config.learning_rate),
            adam_d_b: adam(config.learning_rate),
            pool_a: ReplayPool::new(config.pool_size),
            pool_b: ReplayPool::new(config.pool_size),
            rng: weight_init_rng(config.seed, STREAM_LOOP),
        })
    }

    /// Canonical serialized form: checkpoint metadata plus named tensors.
    fn to_container(&self, config: &TrainConfig) -> (serde_json::Value, Vec<(String, ArrayD<f32>)>) {
        let mut tensors = Vec::new();
        for (prefix, params) in [
            ("g_ab", &self.g_ab.params),
            ("g_ba", &self.g_ba.params),
            ("d_a", &self.d_a.params),
            ("d_b", &self.d_b.params),
        ] {
            for (name, value) in params.names().zip(params.values()) {
                tensors.push((format!("{prefix}.{name}"), value.clone()));
            }
        }
        for (prefix, adam) in [
            ("adam_g", &self.adam_g),
            ("adam_d_a", &self.adam_d_a),
            ("adam_d_b", &self.adam_d_b),
        ] {
            let (m, v) = adam.moments();
            for (i, t) in m.iter().enumerate() {
                tensors.push((format!("{prefix}.m.{i}"), t.clone()));
            }
            for (i, t) in v.iter().enumerate() {
                tensors.push((format!("{prefix}.v.{i}"), t.clone()));
            }
        }
        for (prefix, pool) in [("pool_a", &self.pool_a), ("pool_b", &self.pool_b)] {
            for (i, img) in pool.items.iter().enumerate() {
                tensors.push((format!("{prefix}.{i}"), img.data().clone().into_dyn()));
            }
        }
        let meta = serde_json::json!({
            "kind": "scgan.checkpoint",
            "step": self.step,
            "arch_fingerprint": arch_fingerprint(config),
            "config": serde_json::to_value(config).expect("config serializes"),
            "rng": {
                "seed": hex_encode(&self.rng.get_seed()),
                "stream": self.rng.get_stream(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
            "adam_steps": {
                "g": self.adam_g.steps(),
                "d_a": self.adam_d_a.steps(),
                "d_b": self.adam_d_b.steps(),
            },
            "pool_lens": { "a": self.pool_a.len(), "b": self.pool_b.len() },
        });
        (meta, tensors)
    }

    /// Content digest of the full state; equal digests mean equal states.
    pub fn digest(&self, config: &TrainConfig) -> String {
        let (meta, tensors) = self.to_container(config);
        let mut hasher = Sha256::new();
        hasher.update(meta.to_string().as_bytes());
        for (name, tensor) in &tensors {
            hasher.update(name.as_bytes());
            for v in tensor.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_encode(&hasher.finalize())
    }
}

/// Atomically write the state to a checkpoint container.
pub fn save_checkpoint(state: &TrainState, config: &TrainConfig, path: &Path) -> Result<()> {
    let (meta, tensors) = state.to_container(config);
    write_tensors(path, CHECKPOINT_MAGIC, &meta, &tensors)
}

fn meta_u64(meta: &serde_json::Value, pointer: &str) -> Result<u64> {
    meta.pointer(pointer)
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Integrity(format!("checkpoint metadata missing '{pointer}'")))
}

/// Load a checkpoint written by [`save_checkpoint`], rebuilding the full
/// state and the config it was trained under.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let file = read_tensors(path, CHECKPOINT_MAGIC)?;
    let meta = &file.meta;
    if meta.pointer("/kind").and_then(|v| v.as_str()) != Some("scgan.checkpoint") {
        return Err(Error::Integrity(
            "container is not a training checkpoint".into(),
        ));
    }
    let config: TrainConfig = serde_json::from_value(
        meta.pointer("/config")
            .cloned()
            .ok_or_else(|| Error::Integrity("checkpoint metadata missing '/config'".into()))?,
    )
    .map_err(|e| Error::Integrity(format!("checkpoint config does not parse: {e}")))?;

    let mut state = TrainState::new(&config)?;
    state.step = meta_u64(meta, "/step")?;

    for (prefix, params) in [
        ("g_ab", &mut state.g_ab.params),
        ("g_ba", &mut state.g_ba.params),
        ("d_a", &mut state.d_a.params),
        ("d_b", &mut state.d_b.params),
    ] {
        let names: Vec<String> = params.names().map(String::from).collect();
        for name in names {
            let tensor = file.tensor(&format!("{prefix}.{name}"))?.clone();
            params.set(&name, tensor)?;
        }
    }

    let slot_counts = [
        ("adam_g", "/adam_steps/g", state.g_ab.params.len() + state.g_ba.params.len()),
        ("adam_d_a", "/adam_steps/d_a", state.d_a.params.len()),
        ("adam_d_b", "/adam_steps/d_b", state.d_b.params.len()),
    ];
    for (prefix, pointer, slots) in slot_counts {
        let t = meta_u64(meta, pointer)?;
        if t == 0 {
            continue;
        }
        let mut m = Vec::with_capacity(slots);
        let mut v = Vec::with_capacity(slots);
        for i in 0..slots {
            m.push(file.tensor(&format!("{prefix}.m.{i}"))?.clone());
            v.push(file.tensor(&format!("{prefix}.v.{i}"))?.clone());
        }
        let adam = match prefix {
            "adam_g" => &mut state.adam_g,
            "adam_d_a" => &mut state.adam_d_a,
            _ => &mut state.adam_d_b,
        };
        adam.set_state(t, m, v);
    }

    for (prefix, pointer, pool) in [
        ("pool_a", "/pool_lens/a", &mut state.pool_a),
        ("pool_b", "/pool_lens/b", &mut state.pool_b),
    ] {
        let len = meta_u64(meta, pointer)? as usize;
        for i in 0..len {
            let data = file
                .tensor(&format!("{prefix}.{i}"))?
                .clone()
                .into_dimensionality::<Ix3>()
                .map_err(|_| Error::Integrity(format!("pool tensor {prefix}.{i} is not rank 3")))?;
            pool.items.push(ImageTensor::from_parts(data, ValueRange::default())?);
        }
    }

    let seed_hex = meta
        .pointer("/rng/seed")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Integrity("checkpoint metadata missing '/rng/seed'".into()))?;
    let seed: [u8; 32] = hex_decode(seed_hex)?
        .try_into()
        .map_err(|_| Error::Integrity("rng seed must be 32 bytes".into()))?;
    let word_pos: u128 = meta
        .pointer("/rng/word_pos")
        .and_then(|v| v.as_str())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Integrity("checkpoint metadata missing '/rng/word_pos'".into()))?;
    use rand::SeedableRng;
    state.rng = ChaCha20Rng::from_seed(seed);
    state.rng.set_stream(meta_u64(meta, "/rng/stream")?);
    state.rng.set_word_pos(word_pos);

    Ok((state, config))
}

/// Immutable per-run machinery: config, the frozen feature extractor, the
/// region provider, and a cache of real-image features.
pub struct Trainer {
    config: TrainConfig,
    extractor: Extractor,
    provider: Box<dyn RegionProvider>,
    feature_cache: HashMap<String, ArrayD<f32>>,
}

impl Trainer {
    pub fn new(config: TrainConfig, provider: Box<dyn RegionProvider>) -> Result<Self> {
        config.validate()?;
        let extractor = config.extractor.load()?;
        Ok(Trainer {
            config,
            extractor,
            provider,
            feature_cache: HashMap::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One full optimization step: update D_B, then D_A, then both
    /// generators jointly against the combined objective.
    pub fn step(&mut self, state: &mut TrainState, batch: &UnpairedBatch) -> Result<LossReport> {
        if batch.batch_a.is_empty() || batch.batch_a.len() != batch.batch_b.len() {
            return Err(Error::Argument(
                "batch must hold equally many samples from each domain".into(),
            ));
        }
        let next_step = state.step + 1;

        // Detached fakes refresh the pools; the discriminators then train
        // against a pool draw rather than only the newest generator output.
        let mut fakes_b = Vec::with_capacity(batch.batch_a.len());
        let mut fakes_a = Vec::with_capacity(batch.batch_b.len());
        for (xa, xb) in batch.batch_a.iter().zip(&batch.batch_b) {
            let fb = state.g_ab.translate(&xa.image)?;
            let fa = state.g_ba.translate(&xb.image)?;
            fakes_b.push(state.pool_b.draw(fb, &mut state.rng));
            fakes_a.push(state.pool_a.draw(fa, &mut state.rng));
        }

        let reals_b: Vec<&ImageTensor> = batch.batch_b.iter().map(|s| &s.image).collect();
        self.update_discriminator(
            &mut state.d_b,
            &mut state.adam_d_b,
            &reals_b,
            &fakes_b,
            "d_b_adversarial",
        )?;
        let reals_a: Vec<&ImageTensor> = batch.batch_a.iter().map(|s| &s.image).collect();
        self.update_discriminator(
            &mut state.d_a,
            &mut state.adam_d_a,
            &reals_a,
            &fakes_a,
            "d_a_adversarial",
        )?;

        let report = self.update_generators(state, batch, next_step)?;
        state.step = next_step;
        Ok(report)
    }

    fn update_discriminator(
        &self,
        d: &mut Discriminator,
        adam: &mut Adam<f32>,
        reals: &[&ImageTensor],
        fakes: &[ImageTensor],
        component: &str,
    ) -> Result<()> {
        let mut tape = Tape::<f32>::new();
        let vars = d.params.bind(&mut tape, true);
        let mut acc: Option<Var> = None;
        for (real, fake) in reals.iter().zip(fakes) {
            let r = tape.constant(real.data().clone().into_dyn());
            let f = tape.constant(fake.data().clone().into_dyn());
            let sr = d.forward(&mut tape, r, &vars)?;
            let sf = d.forward(&mut tape, f, &vars)?;
            let loss = match self.config.gan_mode {
                GanMode::Log => {
                    let value = adversarial_d_value_var(&mut tape, sr, sf)?;
                    tape.neg(value)
                }
                GanMode::Lsgan => lsgan_d_loss_var(&mut tape, sr, sf)?,
            };
            acc = Some(match acc {
                None => loss,
                Some(a) => tape.add(a, loss),
            });
        }
        let total = tape.scale(acc.expect("batch is non-empty"), 1.0 / reals.len() as f32);
        let value = tape.scalar(total);
        if !value.is_finite() {
            return Err(Error::Numeric {
                component: component.into(),
                value: value as f64,
            });
        }
        let grads = tape.backward(total);
        apply_gradients(adam, &mut d.params, &vars, grads);
        Ok(())
    }

    fn regions_for(&self, sample: &DomainSample) -> Result<RegionSet> {
        match &sample.regions {
            Some(set) => Ok(set.clone()),
            None => detect_regions(sample, self.provider.as_ref()),
        }
    }

    fn cached_real_features(&mut self, sample: &DomainSample) -> Result<ArrayD<f32>> {
        if let Some(hit) = self.feature_cache.get(&sample.source_path) {
            return Ok(hit.clone());
        }
        let features = self.extractor.extract(&sample.image)?;
        self.feature_cache
            .insert(sample.source_path.clone(), features.clone());
        Ok(features)
    }

    fn update_generators(
        &mut self,
        state: &mut TrainState,
        batch: &UnpairedBatch,
        next_step: u64,
    ) -> Result<LossReport> {
        let active = self.config.ablation_preset.active();
        let weights = self.config.weights;
        let gan_mode = self.config.gan_mode;
        let attentive_mode = self.config.attentive_mode;
        let n = batch.batch_a.len();

        let mut tape = Tape::<f32>::new();
        let vars_g_ab = state.g_ab.params.bind(&mut tape, true);
        let vars_g_ba = state.g_ba.params.bind(&mut tape, true);
        let vars_d_a = state.d_a.params.bind(&mut tape, false);
        let vars_d_b = state.d_b.params.bind(&mut tape, false);

        let mut sum_gan_ab: Option<Var> = None;
        let mut sum_gan_ba: Option<Var> = None;
        let mut sum_att: Option<Var> = None;
        let mut sum_cyc: Option<Var> = None;
        let mut sum_tv: Option<Var> = None;
        let mut sum_per: Option<Var> = None;
        fn fold(tape: &mut Tape<f32>, acc: &mut Option<Var>, term: Var) {
            *acc = Some(match *acc {
                None => term,
                Some(a) => tape.add(a, term),
            });
        }

        for (sample_a, sample_b) in batch.batch_a.iter().zip(&batch.batch_b) {
            let xa = tape.constant(sample_a.image.data().clone().into_dyn());
            let xb = tape.constant(sample_b.image.data().clone().into_dyn());
            let fake_b = state.g_ab.forward(&mut tape, xa, &vars_g_ab)?;
            let fake_a = state.g_ba.forward(&mut tape, xb, &vars_g_ba)?;
            let score_b = state.d_b.forward(&mut tape, fake_b, &vars_d_b)?;
            let score_a = state.d_a.forward(&mut tape, fake_a, &vars_d_a)?;
            let (gan_ab, gan_ba) = match gan_mode {
                GanMode::Log => (
                    adversarial_g_var(&mut tape, score_b),
                    adversarial_g_var(&mut tape, score_a),
                ),
                GanMode::Lsgan => (
                    lsgan_g_loss_var(&mut tape, score_b),
                    lsgan_g_loss_var(&mut tape, score_a),
                ),
            };
            fold(&mut tape, &mut sum_gan_ab, gan_ab);
            fold(&mut tape, &mut sum_gan_ba, gan_ba);

            if active.att_cyc_ab {
                let regions = self.regions_for(sample_a)?;
                let lambda = self.config.attention_weights(&regions);
                let term = match attentive_mode {
                    AttentiveMode::CropReconstruction => {
                        let rec_a = state.g_ba.forward(&mut tape, fake_b, &vars_g_ba)?;
                        attentive_cycle_var(&mut tape, xa, rec_a, &regions, &lambda)?
                    }
                    AttentiveMode::CropThenGenerate => self.crop_then_generate_term(
                        &mut tape,
                        state,
                        sample_a,
                        xa,
                        fake_b,
                        &regions,
                        &lambda,
                        &vars_g_ab,
                        &vars_g_ba,
                    )?,
                };
                fold(&mut tape, &mut sum_att, term);
            }
            if active.cyc_ba {
                let rec_b = state.g_ab.forward(&mut tape, fake_a, &vars_g_ab)?;
                let term = cycle_var(&mut tape, xb, rec_b)?;
                fold(&mut tape, &mut sum_cyc, term);
            }
            if active.tv {
                let term = tv_var(&mut tape, fake_b)?;
                fold(&mut tape, &mut sum_tv, term);
            }
            if active.perceptual {
                let cached = self.cached_real_features(sample_a)?;
                let f_real = tape.constant(cached);
                let f_fake =
                    self.extractor
                        .features(&mut tape, fake_b, sample_a.image.range())?;
                let diff = tape.sub(f_fake, f_real);
                let diff = tape.abs(diff);
                let term = tape.mean_all(diff);
                fold(&mut tape, &mut sum_per, term);
            }
        }

        let inv_n = 1.0 / n as f32;
        let mean = |tape: &mut Tape<f32>, acc: Option<Var>| acc.map(|v| tape.scale(v, inv_n));
        let gan_ab = mean(&mut tape, sum_gan_ab).expect("adversarial terms always active");
        let gan_ba = mean(&mut tape, sum_gan_ba).expect("adversarial terms always active");
        let att = mean(&mut tape, sum_att);
        let cyc = mean(&mut tape, sum_cyc);
        let tv = mean(&mut tape, sum_tv);
        let per = mean(&mut tape, sum_per);

        let components = LossComponents {
            gan_ab: tape.scalar(gan_ab),
            gan_ba: tape.scalar(gan_ba),
            att_cyc_ab: att.map_or(0.0, |v| tape.scalar(v)),
            cyc_ba: cyc.map_or(0.0, |v| tape.scalar(v)),
            tv: tv.map_or(0.0, |v| tape.scalar(v)),
            perceptual: per.map_or(0.0, |v| tape.scalar(v)),
        };
        // Validates finiteness of every component as a side effect.
        let report = LossReport::from_components(next_step, &components, &weights)?;

        // Zero-weight terms are left out of the graph entirely, so their
        // gradient contribution is structurally nothing rather than a
        // numerically added zero.
        let mut total = tape.add(gan_ab, gan_ba);
        if weights.alpha != 0.0 {
            let both = match (att, cyc) {
                (Some(a), Some(c)) => Some(tape.add(a, c)),
                (Some(a), None) => Some(a),
                (None, Some(c)) => Some(c),
                (None, None) => None,
            };
            if let Some(b) = both {
                let scaled = tape.scale(b, weights.alpha);
                total = tape.add(total, scaled);
            }
        }
        if weights.beta != 0.0 {
            if let Some(t) = tv {
                let scaled = tape.scale(t, weights.beta);
                total = tape.add(total, scaled);
            }
        }
        if weights.gamma != 0.0 {
            if let Some(p) = per {
                let scaled = tape.scale(p, weights.gamma);
                total = tape.add(total, scaled);
            }
        }

        let grads = tape.backward(total);
        let joint_vars: Vec<Var> = vars_g_ab.iter().chain(&vars_g_ba).copied().collect();
        let shapes: Vec<_> = state
            .g_ab
            .params
            .values()
            .chain(state.g_ba.params.values())
            .map(|p| p.raw_dim())
            .collect();
        let grad_list = collect_gradients(&joint_vars, &shapes, grads);
        state.adam_g.step(
            state
                .g_ab
                .params
                .values_mut()
                .chain(state.g_ba.params.values_mut())
                .zip(grad_list.iter()),
        );
        Ok(report)
    }

    /// The literal reading of the attentive cycle: each region crop is
    /// resized to the generator's input size and cycled through both
    /// generators. The whole-image term reuses the standard full cycle.
    #[allow(clippy::too_many_arguments)]
    fn crop_then_generate_term(
        &self,
        tape: &mut Tape<f32>,
        state: &TrainState,
        sample_a: &DomainSample,
        xa: Var,
        fake_b: Var,
        regions: &RegionSet,
        lambda: &AttentionWeights,
        vars_g_ab: &[Var],
        vars_g_ba: &[Var],
    ) -> Result<Var> {
        if lambda.lambda.len() != regions.k() {
            return Err(Error::Argument(format!(
                "{} weights for {} regions",
                lambda.lambda.len(),
                regions.k()
            )));
        }
        let size = (sample_a.image.height(), sample_a.image.width());
        let mut total: Option<Var> = None;
        for (region, &weight) in regions.entries().iter().zip(&lambda.lambda) {
            let term = if region.label == WHOLE_LABEL {
                let rec = state.g_ba.forward(tape, fake_b, vars_g_ba)?;
                let diff = tape.sub(rec, xa);
                let diff = tape.abs(diff);
                tape.mean_all(diff)
            } else {
                let crop = crate::regions::crop_region(&sample_a.image, region.bbox)?;
                let resized = crate::data::resize_nearest(crop.data(), size);
                let target = tape.constant(resized.into_dyn());
                let through = state.g_ab.forward(tape, target, vars_g_ab)?;
                let rec = state.g_ba.forward(tape, through, vars_g_ba)?;
                let diff = tape.sub(rec, target);
                let diff = tape.abs(diff);
                tape.mean_all(diff)
            };
            let term = tape.scale(term, weight);
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
        }
        Ok(total.expect("region sets are never empty"))
    }
}

fn collect_gradients(
    vars: &[Var],
    shapes: &[ndarray::IxDyn],
    mut grads: Gradients<f32>,
) -> Vec<ArrayD<f32>> {
    vars.iter()
        .zip(shapes)
        .map(|(v, shape)| {
            grads
                .take(*v)
                .unwrap_or_else(|| ArrayD::zeros(shape.clone()))
        })
        .collect()
}

fn apply_gradients(
    adam: &mut Adam<f32>,
    params: &mut ParamSet,
    vars: &[Var],
    grads: Gradients<f32>,
) {
    let shapes: Vec<_> = params.values().map(|p| p.raw_dim()).collect();
    let grad_list = collect_gradients(vars, &shapes, grads);
    adam.step(params.values_mut().zip(grad_list.iter()));
}

/// One optimization step against a transient trainer. The long-running
/// loop in [`train`] amortizes extractor loading and feature caching;
/// this free function is the one-shot form of the same update.
pub fn train_step(
    state: &mut TrainState,
    batch: &UnpairedBatch,
    config: &TrainConfig,
) -> Result<LossReport> {
    let mut trainer = Trainer::new(config.clone(), Box::new(CenteredFaceProvider))?;
    trainer.step(state, batch)
}

fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("checkpoint-{step:08}.sgck"))
}

struct Corpus {
    domain_a: Vec<DomainSample>,
    domain_b: Vec<DomainSample>,
}

/// Sidecar annotations attach to the samples themselves during loading, so
/// the trainer only ever consults a provider for unannotated images. The
/// sidecar defaults to `<data_root>/annotations_a.jsonl`; an explicit
/// `sidecar` path overrides it and must exist.
fn load_corpus(config: &TrainConfig, data_root: &Path, sidecar: Option<&Path>) -> Result<Corpus> {
    let size = (config.image_size, config.image_size);
    let annotations = match sidecar {
        Some(path) => Some(load_annotations(path)?),
        None => {
            let default = data_root.join("annotations_a.jsonl");
            if default.is_file() {
                Some(load_annotations(&default)?)
            } else {
                None
            }
        }
    };
    let domain_a = load_domain_dir(data_root, "trainA", Domain::ASelfie, size, annotations.as_ref())?;
    let domain_b = load_domain_dir(data_root, "trainB", Domain::BCartoon, size, None)?;
    Ok(Corpus { domain_a, domain_b })
}

fn run_loop(
    trainer: &mut Trainer,
    state: &mut TrainState,
    corpus: &Corpus,
    out_dir: &Path,
    append_log: bool,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("loss_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(append_log)
        .write(true)
        .truncate(!append_log)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let config = trainer.config().clone();
    for step in (state.step + 1)..=config.total_steps {
        let batch = unpaired_batch(
            &corpus.domain_a,
            &corpus.domain_b,
            config.batch_size,
            config.seed,
            step,
        )?;
        let report = trainer.step(state, &batch)?;
        let line = serde_json::to_string(&report).expect("report serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if config.checkpoint_interval > 0
            && step % config.checkpoint_interval == 0
            && step != config.total_steps
        {
            save_checkpoint(state, &config, &checkpoint_path(out_dir, step))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_path = checkpoint_path(out_dir, state.step);
    save_checkpoint(state, &config, &final_path)?;
    Ok(final_path)
}

/// Train from scratch; returns the final checkpoint path. The loss log
/// lands at `<out_dir>/loss_log.jsonl`, one report per line. `annotations`
/// overrides the default region sidecar location.
pub fn train(
    config: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
    annotations: Option<&Path>,
) -> Result<PathBuf> {
    config.validate()?;
    let corpus = load_corpus(config, data_root, annotations)?;
    let mut state = TrainState::new(config)?;
    let mut trainer = Trainer::new(config.clone(), Box::new(CenteredFaceProvider))?;
    run_loop(&mut trainer, &mut state, &corpus, out_dir, false)
}

/// Continue a run from a checkpoint. The checkpoint's architecture must
/// match the supplied config; the loss log is appended to.
pub fn resume(
    config: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
    checkpoint: &Path,
    annotations: Option<&Path>,
) -> Result<PathBuf> {
    config.validate()?;
    let (mut state, saved_config) = load_checkpoint(checkpoint)?;
    let expected = arch_fingerprint(config);
    let found = arch_fingerprint(&saved_config);
    if expected != found {
        return Err(Error::Fingerprint { expected, found });
    }
    let corpus = load_corpus(config, data_root, annotations)?;
    let mut trainer = Trainer::new(config.clone(), Box::new(CenteredFaceProvider))?;
    run_loop(&mut trainer, &mut state, &corpus, out_dir, true)
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(Error::Integrity("odd-length hex string".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|_| Error::Integrity("invalid hex string".into()))
        })
        .collect()
}
