//! Training loop for the detection-weighted mode and the two baselines.
//!
//! * `det`: per step, one detector update on the detached generator output
//!   (segmentation loss against the hole mask, `α` = the image's own mask
//!   ratio), then one generator update on the ℓ1 loss weighted by the
//!   refreshed detector's valuation map.
//! * `weight`: generator only, hard-weighted ℓ1 with fixed hole/valid weights.
//! * `adv`: a discriminator (detector backbone with a global-average head)
//!   and the generator alternate; the generator minimizes
//!   `λ_adv·mean ln(1 − D(out)) + λ_l1·mean|out − gt|`.
//!
//! Batch losses are means over images; parameter gradients are summed per
//! image and scaled by `1/B`.
//!
//! Data order is a pure function of `(seed, epoch)`, so a run resumed from a
//! checkpoint replays exactly the batches the uninterrupted run would have
//! seen.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Section};
use crate::detector::{build_detector, Detector, DetectorConfig};
use crate::error::{ensure, Error, Result};
use crate::generator::{build_generator, Generator, GeneratorConfig};
use crate::imaging::{compose_input, load_image, load_mask, ImageTensor, MaskTensor};
use crate::losses::{
    adv_losses, adv_losses_grad, hard_weighted_l1, hard_weighted_l1_grad, mean_l1, mean_l1_grad, segmentation_loss,
    segmentation_loss_grad, weight_map, weight_map_grad, weighted_l1, weighted_l1_grad, LossConfig,
};
use crate::maskgen::mask_ratio;
use crate::nn::{Grads, Param, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Det,
    Weight,
    Adv,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Det => "det",
            Mode::Weight => "weight",
            Mode::Adv => "adv",
        }
    }

    /// Name of the second network's checkpoint section, if the mode has one.
    pub fn critic_section(self) -> Option<&'static str> {
        match self {
            Mode::Det => Some("detector"),
            Mode::Weight => None,
            Mode::Adv => Some("discriminator"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det" => Ok(Mode::Det),
            "weight" => Ok(Mode::Weight),
            "adv" => Ok(Mode::Adv),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected det, weight or adv)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Treat the weight map as a constant in the generator step.
    pub stop_gradient_through_valuation: bool,
    /// Save a checkpoint every this many steps (0 disables periodic saves).
    pub checkpoint_interval: u64,
    pub loss: LossConfig,
    pub generator: GeneratorConfig,
    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Det,
            learning_rate: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 100,
            image_size: 256,
            seed: 0,
            stop_gradient_through_valuation: false,
            checkpoint_interval: 1000,
            loss: LossConfig::default(),
            generator: GeneratorConfig::default(),
            detector: DetectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be > 0, got {}",
            self.learning_rate
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1),
            "beta1 must lie in [0, 1), got {}",
            self.beta1
        );
        ensure!(
            (0.0..1.0).contains(&self.beta2),
            "beta2 must lie in [0, 1), got {}",
            self.beta2
        );
        ensure!(self.adam_eps > 0.0, "adam_eps must be > 0, got {}", self.adam_eps);
        ensure!(self.batch_size >= 1, "batch_size must be >= 1");
        ensure!(
            self.image_size >= 4 && self.image_size.is_multiple_of(4),
            "image_size must be a positive multiple of 4, got {}",
            self.image_size
        );
        self.loss.validate()?;
        self.generator.validate()?;
        self.detector.validate()?;
        ensure!(
            self.detector.input_channels == self.generator.output_channels,
            "detector input_channels ({}) must match generator output_channels ({})",
            self.detector.input_channels,
            self.generator.output_channels
        );
        Ok(())
    }

    /// Parses a TOML document; unknown keys are rejected by name.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Independent seed for a named purpose, derived from the run seed.
fn derived_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const GENERATOR_INIT_STREAM: u64 = 1;
const CRITIC_INIT_STREAM: u64 = 2;
const DATA_ORDER_STREAM: u64 = 1 << 32;

/// All mutable training state: parameters, optimizer moments, step counter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: Generator,
    pub generator_opt: Adam,
    /// Detector (`det`) or discriminator (`adv`); absent in `weight` mode.
    pub critic: Option<Detector>,
    pub critic_opt: Option<Adam>,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    /// Fresh networks initialized from seeds derived from `config.seed`.
    /// Initial generator weights do not depend on the mode.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = build_generator(config.generator, derived_seed(config.seed, GENERATOR_INIT_STREAM))?;
        let generator_opt = Adam::new(generator.params());
        let (critic, critic_opt) = match config.mode {
            Mode::Weight => (None, None),
            Mode::Det | Mode::Adv => {
                let d = build_detector(config.detector, derived_seed(config.seed, CRITIC_INIT_STREAM))?;
                let opt = Adam::new(d.params());
                (Some(d), Some(opt))
            }
        };
        Ok(Self {
            generator,
            generator_opt,
            critic,
            critic_opt,
            step: 0,
            seed: config.seed,
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Result<Checkpoint> {
        let config_echo = serde_json::to_value(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut sections = Vec::new();
        let mut counters = std::collections::BTreeMap::new();
        push_network(
            &mut sections,
            &mut counters,
            "generator",
            self.generator.params(),
            &self.generator_opt,
        );
        if let (Some(name), Some(d), Some(opt)) = (config.mode.critic_section(), &self.critic, &self.critic_opt) {
            push_network(&mut sections, &mut counters, name, d.params(), opt);
        }
        Ok(Checkpoint {
            config: config_echo,
            seed: self.seed,
            step: self.step,
            counters,
            sections,
        })
    }

    /// Rebuilds the configuration and state stored in a checkpoint.
    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<(TrainConfig, Self)> {
        let config: TrainConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad config echo: {e}")))?;
        config.validate()?;
        let mut state = TrainState::new(&config)?;
        state.seed = ck.seed;
        state.step = ck.step;
        let generator = state.generator.params_mut();
        state.generator_opt = take_network(&mut ck, "generator", generator)?;
        if let (Some(name), Some(d)) = (config.mode.critic_section(), state.critic.as_mut()) {
            state.critic_opt = Some(take_network(&mut ck, name, d.params_mut())?);
        }
        Ok((config, state))
    }

    pub fn save(&self, config: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint(config)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(TrainConfig, Self)> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

fn moment_params(store: &ParamStore, moments: &[Vec<f64>]) -> Vec<Param> {
    store
        .iter()
        .zip(moments)
        .map(|(p, m)| Param {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: m.clone(),
        })
        .collect()
}

fn push_network(
    sections: &mut Vec<Section>,
    counters: &mut std::collections::BTreeMap<String, u64>,
    name: &str,
    store: &ParamStore,
    opt: &Adam,
) {
    sections.push(Section {
        name: name.to_string(),
        tensors: store.iter().cloned().collect(),
    });
    sections.push(Section {
        name: format!("{name}.adam.first"),
        tensors: moment_params(store, &opt.first),
    });
    sections.push(Section {
        name: format!("{name}.adam.second"),
        tensors: moment_params(store, &opt.second),
    });
    counters.insert(format!("{name}.adam.step"), opt.step);
}

fn take_network(ck: &mut Checkpoint, name: &str, store: &mut ParamStore) -> Result<Adam> {
    store.load(ck.take_section(name)?)?;
    let mut moments = store.clone();
    moments.load(ck.take_section(&format!("{name}.adam.first"))?)?;
    let first = moments.iter().map(|p| p.data.clone()).collect();
    moments.load(ck.take_section(&format!("{name}.adam.second"))?)?;
    let second = moments.iter().map(|p| p.data.clone()).collect();
    let step = *ck
        .counters
        .get(&format!("{name}.adam.step"))
        .ok_or_else(|| Error::Checkpoint(format!("missing counter {name}.adam.step")))?;
    Ok(Adam { step, first, second })
}

/// Ground-truth images and their masks for one step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub gt: Vec<ImageTensor>,
    pub masks: Vec<MaskTensor>,
}

impl Batch {
    pub fn new(gt: Vec<ImageTensor>, masks: Vec<MaskTensor>) -> Result<Self> {
        ensure!(!gt.is_empty(), "batch is empty");
        ensure!(gt.len() == masks.len(), "{} images but {} masks", gt.len(), masks.len());
        for (img, m) in gt.iter().zip(&masks) {
            ensure!(
                img.height() == m.height() && img.width() == m.width(),
                "image {}x{} paired with mask {}x{}",
                img.height(),
                img.width(),
                m.height(),
                m.width()
            );
        }
        Ok(Self { gt, masks })
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mode: Mode,
    pub loss_g: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_v_in: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_v_out: Option<f64>,
    pub lr: f64,
    pub wall_ms: f64,
}

fn check_finite(step: u64, what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            step,
            detail: format!("{what} is {value}"),
        })
    }
}

fn check_grads(step: u64, what: &str, grads: &Grads) -> Result<()> {
    if grads.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            step,
            detail: format!("non-finite {what} gradient"),
        })
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn generator_input(generator: &Generator, gt: &ImageTensor, mask: &MaskTensor) -> Result<Tensor> {
    generator.network_input(&compose_input(gt, mask)?, mask)
}

/// Runs `G` on every image of the batch without keeping activations.
pub fn generator_outputs(generator: &Generator, batch: &Batch) -> Result<Vec<Tensor>> {
    batch
        .gt
        .iter()
        .zip(&batch.masks)
        .map(|(gt, m)| Ok(generator.forward_input(generator_input(generator, gt, m)?).0))
        .collect()
}

/// One detector update on fixed generator outputs. Returns the mean
/// segmentation loss before the update.
pub fn detector_step(
    detector: &mut Detector,
    opt: &mut Adam,
    config: &TrainConfig,
    outputs: &[Tensor],
    masks: &[MaskTensor],
    step: u64,
) -> Result<f64> {
    ensure!(
        outputs.len() == masks.len() && !outputs.is_empty(),
        "detector batch is empty or ragged"
    );
    let mut grads = detector.params().zeros_like();
    let mut total = 0.0;
    for (out, m) in outputs.iter().zip(masks) {
        let (v, trace) = detector.forward_tensor(out)?;
        let alpha = mask_ratio(m);
        let kind = config.loss.detector_loss;
        let loss = segmentation_loss(kind, &v, m, alpha, config.loss.gamma)?;
        check_finite(step, "detector loss", loss)?;
        total += loss;
        let grad_v = segmentation_loss_grad(kind, &v, m, alpha, config.loss.gamma)?;
        detector.backward_valuation(&trace, &v, &grad_v, Some(&mut grads));
    }
    grads.scale(1.0 / outputs.len() as f64);
    check_grads(step, "detector", &grads)?;
    opt.update(&config.adam(), detector.params_mut(), &grads);
    Ok(total / outputs.len() as f64)
}

/// Result of [`det_generator_grads`].
#[derive(Clone, Debug)]
pub struct DetGeneratorPass {
    pub grads: Grads,
    /// Mean weighted ℓ1 over the batch.
    pub loss: f64,
    pub mean_v_in: Option<f64>,
    pub mean_v_out: Option<f64>,
}

/// Generator gradient of the valuation-weighted ℓ1 for the current
/// detector, without applying an update.
pub fn det_generator_grads(
    generator: &Generator,
    detector: &Detector,
    config: &TrainConfig,
    batch: &Batch,
    step: u64,
) -> Result<DetGeneratorPass> {
    let mut grads = generator.params().zeros_like();
    let mut total = 0.0;
    let (mut v_in, mut v_out) = (Vec::new(), Vec::new());
    for (gt, m) in batch.gt.iter().zip(&batch.masks) {
        let (out, gtrace) = generator.forward_input(generator_input(generator, gt, m)?);
        let (v, dtrace) = detector.forward_tensor(&out)?;
        let (vi, vo) = v.region_means(m);
        v_in.extend(vi);
        v_out.extend(vo);
        let w = weight_map(&v, &config.loss)?;
        let loss = weighted_l1(&out, gt.as_tensor(), &w)?;
        check_finite(step, "generator loss", loss)?;
        total += loss;
        let (mut d_out, d_w) = weighted_l1_grad(&out, gt.as_tensor(), &w)?;
        if !config.stop_gradient_through_valuation {
            let d_v: Vec<f64> = d_w
                .iter()
                .zip(weight_map_grad(&v, &config.loss))
                .map(|(a, b)| a * b)
                .collect();
            d_out.add_assign(&detector.backward_valuation(&dtrace, &v, &d_v, None));
        }
        generator.backward(&gtrace, d_out, Some(&mut grads));
    }
    let b = batch.len() as f64;
    grads.scale(1.0 / b);
    Ok(DetGeneratorPass {
        grads,
        loss: total / b,
        mean_v_in: mean(v_in),
        mean_v_out: mean(v_out),
    })
}

fn critic_mut(state: &mut TrainState, mode: Mode) -> Result<(&mut Detector, &mut Adam)> {
    match (state.critic.as_mut(), state.critic_opt.as_mut()) {
        (Some(d), Some(o)) => Ok((d, o)),
        _ => Err(Error::Validation(format!(
            "{} mode needs a second network",
            mode.as_str()
        ))),
    }
}

/// Detector update followed by a generator update on the same batch.
pub fn train_step_det(state: &mut TrainState, batch: &Batch, config: &TrainConfig) -> Result<StepMetrics> {
    let start = Instant::now();
    let step = state.step;
    let outputs = generator_outputs(&state.generator, batch)?;
    let (detector, det_opt) = critic_mut(state, Mode::Det)?;
    let loss_d = detector_step(detector, det_opt, config, &outputs, &batch.masks, step)?;
    drop(outputs);

    let detector = state.critic.as_ref().expect("checked above");
    let pass = det_generator_grads(&state.generator, detector, config, batch, step)?;
    check_grads(step, "generator", &pass.grads)?;
    state
        .generator_opt
        .update(&config.adam(), state.generator.params_mut(), &pass.grads);
    state.step += 1;
    Ok(StepMetrics {
        step,
        mode: Mode::Det,
        loss_g: pass.loss,
        loss_d: Some(loss_d),
        mean_v_in: pass.mean_v_in,
        mean_v_out: pass.mean_v_out,
        lr: config.learning_rate,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Generator-only update on the hard-weighted ℓ1.
pub fn train_step_weight(state: &mut TrainState, batch: &Batch, config: &TrainConfig) -> Result<StepMetrics> {
    let start = Instant::now();
    let step = state.step;
    let (lh, lv) = (config.loss.lambda_hole, config.loss.lambda_valid);
    let g = &state.generator;
    let mut grads = g.params().zeros_like();
    let mut total = 0.0;
    for (gt, m) in batch.gt.iter().zip(&batch.masks) {
        let (out, trace) = g.forward_input(generator_input(g, gt, m)?);
        let loss = hard_weighted_l1(&out, gt.as_tensor(), m, lh, lv)?;
        check_finite(step, "generator loss", loss)?;
        total += loss;
        let d_out = hard_weighted_l1_grad(&out, gt.as_tensor(), m, lh, lv)?;
        g.backward(&trace, d_out, Some(&mut grads));
    }
    let b = batch.len() as f64;
    grads.scale(1.0 / b);
    check_grads(step, "generator", &grads)?;
    state
        .generator_opt
        .update(&config.adam(), state.generator.params_mut(), &grads);
    state.step += 1;
    Ok(StepMetrics {
        step,
        mode: Mode::Weight,
        loss_g: total / b,
        loss_d: None,
        mean_v_in: None,
        mean_v_out: None,
        lr: config.learning_rate,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Discriminator update followed by a generator update on the same batch.
pub fn train_step_adv(state: &mut TrainState, batch: &Batch, config: &TrainConfig) -> Result<StepMetrics> {
    let start = Instant::now();
    let step = state.step;
    let b = batch.len() as f64;
    let outputs = generator_outputs(&state.generator, batch)?;
    let (disc, disc_opt) = critic_mut(state, Mode::Adv)?;
    let mut dgrads = disc.params().zeros_like();
    let mut loss_d = 0.0;
    for (gt, out) in batch.gt.iter().zip(&outputs) {
        let (_, real_trace) = disc.forward_tensor(gt.as_tensor())?;
        let (_, fake_trace) = disc.forward_tensor(out)?;
        let d_real = [Detector::score_from_trace(&real_trace)];
        let d_fake = [Detector::score_from_trace(&fake_trace)];
        let (_, loss) = adv_losses(&d_real, &d_fake)?;
        check_finite(step, "discriminator loss", loss)?;
        loss_d += loss;
        let (_, g_real, g_fake) = adv_losses_grad(&d_real, &d_fake)?;
        disc.backward_score(&real_trace, g_real[0], Some(&mut dgrads));
        disc.backward_score(&fake_trace, g_fake[0], Some(&mut dgrads));
    }
    drop(outputs);
    dgrads.scale(1.0 / b);
    check_grads(step, "discriminator", &dgrads)?;
    disc_opt.update(&config.adam(), disc.params_mut(), &dgrads);

    let disc = state.critic.as_ref().expect("checked above");
    let g = &state.generator;
    let (l_adv, l_l1) = (config.loss.lambda_adv, config.loss.lambda_l1);
    let mut ggrads = g.params().zeros_like();
    let mut loss_g = 0.0;
    for (gt, m) in batch.gt.iter().zip(&batch.masks) {
        let (out, gtrace) = g.forward_input(generator_input(g, gt, m)?);
        let (_, trace) = disc.forward_tensor(&out)?;
        let d_fake = [Detector::score_from_trace(&trace)];
        let (adv_term, _) = adv_losses(&d_fake, &d_fake)?;
        let loss = l_adv * adv_term + l_l1 * mean_l1(&out, gt.as_tensor())?;
        check_finite(step, "generator loss", loss)?;
        loss_g += loss;
        let (g_fake, _, _) = adv_losses_grad(&d_fake, &d_fake)?;
        let mut d_out = mean_l1_grad(&out, gt.as_tensor())?.map(|v| l_l1 * v);
        let d_adv = disc.backward_score(&trace, g_fake[0], None).map(|v| l_adv * v);
        d_out.add_assign(&d_adv);
        g.backward(&gtrace, d_out, Some(&mut ggrads));
    }
    ggrads.scale(1.0 / b);
    check_grads(step, "generator", &ggrads)?;
    state
        .generator_opt
        .update(&config.adam(), state.generator.params_mut(), &ggrads);
    state.step += 1;
    Ok(StepMetrics {
        step,
        mode: Mode::Adv,
        loss_g: loss_g / b,
        loss_d: Some(loss_d / b),
        mean_v_in: None,
        mean_v_out: None,
        lr: config.learning_rate,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Dispatches to the step function of `config.mode`.
pub fn train_step(state: &mut TrainState, batch: &Batch, config: &TrainConfig) -> Result<StepMetrics> {
    match config.mode {
        Mode::Det => train_step_det(state, batch, config),
        Mode::Weight => train_step_weight(state, batch, config),
        Mode::Adv => train_step_adv(state, batch, config),
    }
}

/// In-memory training set. Masks are drawn per batch slot, independently of
/// the image order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub masks: Vec<MaskTensor>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Image files under `dir` (recursively), sorted by path.
pub fn list_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    ensure!(dir.is_dir(), "{} is not a directory", dir.display());
    let mut out = Vec::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                pending.push(path);
            } else if is_image_file(&path) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

impl Dataset {
    pub fn new(images: Vec<ImageTensor>, masks: Vec<MaskTensor>) -> Result<Self> {
        ensure!(!images.is_empty(), "dataset has no images");
        ensure!(!masks.is_empty(), "dataset has no masks");
        let (h, w) = (images[0].height(), images[0].width());
        ensure!(
            images
                .iter()
                .all(|i| i.height() == h && i.width() == w && i.channels() == 3),
            "dataset images must all be RGB and {h}x{w}"
        );
        ensure!(
            masks.iter().all(|m| m.height() == h && m.width() == w),
            "dataset masks must all be {h}x{w}"
        );
        Ok(Self { images, masks })
    }

    /// Loads every image and mask below the two directories, resized to
    /// `size × size`.
    pub fn load(images_dir: &Path, masks_dir: &Path, size: usize) -> Result<Self> {
        let images = list_image_files(images_dir)?
            .iter()
            .map(|p| load_image(p, size).map(|i| i.to_rgb()))
            .collect::<Result<Vec<_>>>()?;
        let masks = list_image_files(masks_dir)?
            .iter()
            .map(|p| load_mask(p, size))
            .collect::<Result<Vec<_>>>()?;
        Self::new(images, masks)
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> u64 {
        self.images.len().div_ceil(batch_size) as u64
    }

    /// `(image index, mask index)` for every slot of `epoch`.
    pub fn epoch_plan(&self, seed: u64, epoch: u64) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(DATA_ORDER_STREAM + epoch);
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        order.shuffle(&mut rng);
        order
            .into_iter()
            .map(|i| (i, rng.random_range(0..self.masks.len())))
            .collect()
    }

    /// The batch consumed at global step `step`.
    pub fn batch_for_step(&self, seed: u64, batch_size: usize, step: u64) -> Result<Batch> {
        let spe = self.steps_per_epoch(batch_size);
        let plan = self.epoch_plan(seed, step / spe);
        let k = (step % spe) as usize;
        let slots = &plan[k * batch_size..((k + 1) * batch_size).min(plan.len())];
        Batch::new(
            slots.iter().map(|&(i, _)| self.images[i].clone()).collect(),
            slots.iter().map(|&(_, m)| self.masks[m].clone()).collect(),
        )
    }
}

/// Fixed layout of a training run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints_dir().join(format!("step_{step:08}.ckpt"))
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.checkpoints_dir().join("last.ckpt")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.logs_dir().join("metrics.jsonl")
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn create(&self) -> Result<()> {
        for dir in [self.checkpoints_dir(), self.logs_dir(), self.samples_dir()] {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }
}

/// Parses a line-delimited metrics log.
pub fn read_metrics_log(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Options for [`train_loop`].
#[derive(Clone, Debug, Default)]
pub struct LoopOptions {
    /// Where checkpoints, logs and samples go; nothing is written if absent.
    pub layout: Option<RunLayout>,
    /// Stop once the state reaches this step (before the configured end).
    pub stop_at: Option<u64>,
}

/// Runs `config.epochs` epochs (resuming at `state.step`) and returns the
/// metrics of the steps performed.
pub fn train_loop(
    config: &TrainConfig,
    dataset: &Dataset,
    state: &mut TrainState,
    options: &LoopOptions,
) -> Result<Vec<StepMetrics>> {
    train_loop_with(config, dataset, state, options, |_| {})
}

/// [`train_loop`] calling `on_step` after every step.
pub fn train_loop_with(
    config: &TrainConfig,
    dataset: &Dataset,
    state: &mut TrainState,
    options: &LoopOptions,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    config.validate()?;
    let size = config.image_size;
    ensure!(
        dataset.images[0].height() == size && dataset.images[0].width() == size,
        "dataset images are {}x{} but image_size is {size}",
        dataset.images[0].height(),
        dataset.images[0].width()
    );
    let total = dataset.steps_per_epoch(config.batch_size) * config.epochs as u64;
    let end = options.stop_at.map_or(total, |s| s.min(total));
    let mut log = match &options.layout {
        Some(layout) => {
            layout.create()?;
            let path = layout.metrics_log();
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let mut records = Vec::new();
    while state.step < end {
        let batch = dataset.batch_for_step(config.seed, config.batch_size, state.step)?;
        let rec = train_step(state, &batch, config)?;
        if let Some((path, f)) = log.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Validation(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(layout) = &options.layout {
            if config.checkpoint_interval > 0 && state.step.is_multiple_of(config.checkpoint_interval) {
                let ck = state.to_checkpoint(config)?;
                ck.save(layout.checkpoint(state.step))?;
                ck.save(layout.last_checkpoint())?;
                save_sample(state, dataset, layout)?;
            }
        }
        on_step(&rec);
        records.push(rec);
    }
    if let Some(layout) = &options.layout {
        state.save(config, layout.last_checkpoint())?;
    }
    Ok(records)
}

/// Writes `input | output | ground truth` for the first image and mask.
fn save_sample(state: &TrainState, dataset: &Dataset, layout: &RunLayout) -> Result<()> {
    let gt = &dataset.images[0];
    let mask = &dataset.masks[0];
    let i_in = compose_input(gt, mask)?;
    let out = state.generator.forward(&i_in, mask)?;
    let panel = crate::imaging::side_by_side(&[
        crate::imaging::image_to_rgb8(&i_in),
        crate::imaging::image_to_rgb8(&out),
        crate::imaging::image_to_rgb8(gt),
    ]);
    crate::imaging::save_rgb(&panel, layout.samples_dir().join(format!("step_{:08}.png", state.step)))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            batch_size: 2,
            epochs: 1,
            image_size: 8,
            learning_rate: 1e-3,
            generator: GeneratorConfig {
                base_channels: 2,
                num_residual_blocks: 1,
                ..Default::default()
            },
            detector: DetectorConfig {
                base_channels: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_dataset(n: usize) -> Dataset {
        let images = (0..n)
            .map(|k| {
                let data = (0..3 * 64).map(|i| ((i * 7 + k * 13) % 17) as f64 / 16.0).collect();
                ImageTensor::new(Tensor::from_vec(3, 8, 8, data).unwrap()).unwrap()
            })
            .collect();
        let masks = (0..3)
            .map(|k| MaskTensor::new(8, 8, (0..64).map(|i| (i % (k + 2) == 0) as u8).collect()).unwrap())
            .collect();
        Dataset::new(images, masks).unwrap()
    }

    #[test]
    fn config_rejects_unknown_key_by_name() {
        let err = TrainConfig::from_toml_str("mode = \"det\"\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        assert!(TrainConfig::from_toml_str("mode = \"gan\"\n").is_err());
        assert!(TrainConfig::from_toml_str("image_size = 30\n").is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = tiny_config(Mode::Adv);
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn one_epoch_of_four_images_with_batch_two_is_two_steps() {
        let cfg = tiny_config(Mode::Weight);
        let data = tiny_dataset(4);
        let mut state = TrainState::new(&cfg).unwrap();
        let recs = train_loop(&cfg, &data, &mut state, &LoopOptions::default()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn epoch_plan_is_a_permutation_and_deterministic() {
        let data = tiny_dataset(5);
        let plan = data.epoch_plan(3, 1);
        let mut imgs: Vec<usize> = plan.iter().map(|p| p.0).collect();
        imgs.sort();
        assert_eq!(imgs, vec![0, 1, 2, 3, 4]);
        assert_eq!(plan, data.epoch_plan(3, 1));
        let last = data.batch_for_step(3, 2, 2).unwrap();
        assert_eq!(last.len(), 1);
    }

    #[test]
    fn weight_mode_has_no_critic_and_det_mode_does() {
        assert!(TrainState::new(&tiny_config(Mode::Weight)).unwrap().critic.is_none());
        assert!(TrainState::new(&tiny_config(Mode::Det)).unwrap().critic.is_some());
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        for mode in [Mode::Det, Mode::Weight, Mode::Adv] {
            let cfg = tiny_config(mode);
            let data = tiny_dataset(2);
            let mut state = TrainState::new(&cfg).unwrap();
            train_loop(&cfg, &data, &mut state, &LoopOptions::default()).unwrap();
            let ck = state.to_checkpoint(&cfg).unwrap();
            let bytes = ck.to_bytes().unwrap();
            let (cfg2, state2) = TrainState::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(cfg2, cfg);
            assert_eq!(state2.step, state.step);
            assert_eq!(state2.generator_opt, state.generator_opt);
            assert_eq!(state2.critic_opt, state.critic_opt);
            assert_eq!(state2.to_checkpoint(&cfg2).unwrap().to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn checkpoint_with_wrong_shapes_is_rejected() {
        let cfg = tiny_config(Mode::Weight);
        let state = TrainState::new(&cfg).unwrap();
        let mut ck = state.to_checkpoint(&cfg).unwrap();
        ck.sections[0].tensors[0].shape = vec![1];
        ck.sections[0].tensors[0].data = vec![0.0];
        assert!(matches!(TrainState::from_checkpoint(ck), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn metrics_log_round_trips_and_omits_absent_fields() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Mode::Weight);
        let data = tiny_dataset(2);
        let mut state = TrainState::new(&cfg).unwrap();
        let opts = LoopOptions {
            layout: Some(RunLayout::new(dir.path())),
            stop_at: None,
        };
        let recs = train_loop(&cfg, &data, &mut state, &opts).unwrap();
        let layout = RunLayout::new(dir.path());
        let text = std::fs::read_to_string(layout.metrics_log()).unwrap();
        assert!(!text.contains("loss_d"));
        assert_eq!(read_metrics_log(layout.metrics_log()).unwrap(), recs);
        assert!(layout.last_checkpoint().exists());
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let cfg = tiny_config(Mode::Weight);
        let mut state = TrainState::new(&cfg).unwrap();
        for p in state.generator.params_mut().iter_mut() {
            p.data.fill(f64::NAN);
        }
        let data = tiny_dataset(2);
        let batch = data.batch_for_step(0, 2, 0).unwrap();
        match train_step_weight(&mut state, &batch, &cfg) {
            Err(Error::Training { step: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
