//! Encoder / dilated-residual / decoder inpainting generator.
//!
//! With `b = base_channels`, `c_in = input_channels`, `c_out = output_channels`:
//!
//! | layer                  | kind            | kernel | stride | dilation | padding | weight shape        |
//! |------------------------|-----------------|--------|--------|----------|---------|---------------------|
//! | `stem`                 | conv            | 3      | 1      | 1        | 1       | `[b, c_in, 3, 3]`   |
//! | `down1`                | conv            | 4      | 2      | 1        | 1       | `[2b, b, 4, 4]`     |
//! | `down2`                | conv            | 4      | 2      | 1        | 1       | `[4b, 2b, 4, 4]`    |
//! | `block{i}.conv{1,2}`   | conv            | 3      | 1      | 2        | 2       | `[4b, 4b, 3, 3]`    |
//! | `up1`                  | transposed conv | 4      | 2      | 1        | 1       | `[4b, 2b, 4, 4]`    |
//! | `up2`                  | transposed conv | 4      | 2      | 1        | 1       | `[2b, b, 4, 4]`     |
//! | `out`                  | conv            | 3      | 1      | 1        | 1       | `[c_out, b, 3, 3]`  |
//!
//! Every layer also has a bias of length equal to its output channels.
//! Instance normalization and ReLU follow every layer except `out`, which
//! feeds a sigmoid. A residual block computes
//! `relu(x + IN(conv2(relu(IN(conv1(x))))))`.
//!
//! For the defaults (`b = 64`, 8 blocks, RGB + mask input) the network has
//! 10,756,675 parameters, 1,180,160 of which sit in each residual block.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::imaging::{ImageTensor, MaskTensor};
use crate::nn::{
    backward_stages, forward_stages, Conv2d, ConvGeometry, ConvTranspose2d, Grads, Initializer, ParamStore, Stage,
    StageCache,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub num_residual_blocks: usize,
    pub dilation: usize,
    /// Image channels plus one mask channel.
    pub input_channels: usize,
    pub output_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            num_residual_blocks: 8,
            dilation: 2,
            input_channels: 4,
            output_channels: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_channels >= 1, "generator base_channels must be >= 1");
        ensure!(
            self.num_residual_blocks >= 1,
            "generator num_residual_blocks must be >= 1"
        );
        ensure!(self.dilation >= 1, "generator dilation must be >= 1");
        ensure!(
            self.input_channels == self.output_channels + 1,
            "generator input_channels ({}) must equal output_channels + 1 mask channel ({})",
            self.input_channels,
            self.output_channels + 1
        );
        Ok(())
    }
}

/// Generator weights plus the layer stack that uses them.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    stages: Vec<Stage>,
    params: ParamStore,
}

/// Activations saved by [`Generator::forward_traced`].
#[derive(Clone, Debug)]
pub struct GeneratorTrace {
    caches: Vec<StageCache>,
}

/// Builds a generator with N(0, 0.02) weights and zero biases.
pub fn build_generator(config: GeneratorConfig, init_seed: u64) -> Result<Generator> {
    config.validate()?;
    let b = config.base_channels;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(init_seed, 0.02);
    let mut stages = Vec::new();
    let norm_relu = |stages: &mut Vec<Stage>| {
        stages.push(Stage::InstanceNorm);
        stages.push(Stage::Relu);
    };

    let k3 = ConvGeometry::new(3, 1, 1);
    let k4s2 = ConvGeometry::new(4, 2, 1);
    stages.push(Stage::Conv(Conv2d::new(
        &mut store,
        &mut init,
        "stem",
        config.input_channels,
        b,
        k3,
    )));
    norm_relu(&mut stages);
    stages.push(Stage::Conv(Conv2d::new(&mut store, &mut init, "down1", b, 2 * b, k4s2)));
    norm_relu(&mut stages);
    stages.push(Stage::Conv(Conv2d::new(
        &mut store,
        &mut init,
        "down2",
        2 * b,
        4 * b,
        k4s2,
    )));
    norm_relu(&mut stages);

    let dilated = ConvGeometry::dilated(3, config.dilation, config.dilation);
    for i in 0..config.num_residual_blocks {
        let c1 = Conv2d::new(&mut store, &mut init, &format!("block{i}.conv1"), 4 * b, 4 * b, dilated);
        let c2 = Conv2d::new(&mut store, &mut init, &format!("block{i}.conv2"), 4 * b, 4 * b, dilated);
        stages.push(Stage::Residual(vec![
            Stage::Conv(c1),
            Stage::InstanceNorm,
            Stage::Relu,
            Stage::Conv(c2),
            Stage::InstanceNorm,
        ]));
    }

    stages.push(Stage::ConvTranspose(ConvTranspose2d::new(
        &mut store,
        &mut init,
        "up1",
        4 * b,
        2 * b,
        k4s2,
    )));
    norm_relu(&mut stages);
    stages.push(Stage::ConvTranspose(ConvTranspose2d::new(
        &mut store,
        &mut init,
        "up2",
        2 * b,
        b,
        k4s2,
    )));
    norm_relu(&mut stages);
    stages.push(Stage::Conv(Conv2d::new(
        &mut store,
        &mut init,
        "out",
        b,
        config.output_channels,
        k3,
    )));
    stages.push(Stage::Sigmoid);

    Ok(Generator {
        config,
        stages,
        params: store,
    })
}

impl Generator {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Concatenates the mask as an extra channel after the image channels.
    pub fn network_input(&self, i_in: &ImageTensor, mask: &MaskTensor) -> Result<Tensor> {
        ensure!(
            i_in.channels() + 1 == self.config.input_channels,
            "generator expects {} image channels, got {}",
            self.config.input_channels - 1,
            i_in.channels()
        );
        ensure!(
            i_in.height() == mask.height() && i_in.width() == mask.width(),
            "image is {}x{} but mask is {}x{}",
            i_in.height(),
            i_in.width(),
            mask.height(),
            mask.width()
        );
        ensure!(
            i_in.height().is_multiple_of(4)
                && i_in.width().is_multiple_of(4)
                && i_in.height() >= 4
                && i_in.width() >= 4,
            "generator input {}x{} must be divisible by 4",
            i_in.height(),
            i_in.width()
        );
        i_in.as_tensor().concat_channels(&mask.to_tensor())
    }

    /// `G(I_in, M)`.
    pub fn forward(&self, i_in: &ImageTensor, mask: &MaskTensor) -> Result<ImageTensor> {
        let (out, _) = self.forward_traced(i_in, mask)?;
        ImageTensor::from_tensor_clamped(out)
    }

    /// Forward pass returning the raw sigmoid output and saved activations.
    pub fn forward_traced(&self, i_in: &ImageTensor, mask: &MaskTensor) -> Result<(Tensor, GeneratorTrace)> {
        let x = self.network_input(i_in, mask)?;
        Ok(self.forward_input(x))
    }

    pub(crate) fn forward_input(&self, x: Tensor) -> (Tensor, GeneratorTrace) {
        let (out, caches) = forward_stages(&self.stages, &self.params, x);
        (out, GeneratorTrace { caches })
    }

    /// Back-propagates `dL/d(output)`; returns `dL/d(network input)` (image
    /// channels followed by the mask channel).
    pub fn backward(&self, trace: &GeneratorTrace, grad_out: Tensor, grads: Option<&mut Grads>) -> Tensor {
        backward_stages(&self.stages, &self.params, &trace.caches, grad_out, grads)
    }
}
