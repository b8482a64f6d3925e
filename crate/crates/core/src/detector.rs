//! Seven-layer fully convolutional artifact detector.
//!
//! | # | layer            | kernel | stride | padding (begin, end) | channels      | activation |
//! |---|------------------|--------|--------|----------------------|---------------|------------|
//! | 1 | `conv1`          | 4      | 2      | (1, 1)               | in → b        | LeakyReLU  |
//! | 2 | `conv2`          | 4      | 2      | (1, 1)               | b → 2b        | LeakyReLU  |
//! | 3 | `conv3`          | 4      | 1      | (1, 2)               | 2b → 4b       | LeakyReLU  |
//! | 4 | `conv4`          | 4      | 1      | (1, 2)               | 4b → 4b       | LeakyReLU  |
//! | 5 | `conv5`          | 4      | 1      | (1, 2)               | 4b → 4b       | LeakyReLU  |
//! | 6 | `deconv1` (T)    | 4      | 2      | (1, 1)               | 4b → 2b       | LeakyReLU  |
//! | 7 | `deconv2` (T)    | 4      | 2      | (1, 1)               | 2b → 2        | softmax    |
//!
//! Conv weights are `[out, in, 4, 4]`, transposed-conv weights are
//! `[in, out, 4, 4]`, every layer has a bias `[out]`. Channel 1 of the final
//! two-way softmax is the artifact class; the valuation map is its
//! probability.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::imaging::{ImageTensor, MaskTensor};
use crate::nn::{
    backward_stages, forward_stages, sigmoid, Conv2d, ConvGeometry, ConvTranspose2d, Grads, Initializer, ParamStore,
    Stage, StageCache,
};
use crate::tensor::Tensor;

/// Per-pixel artifact probability, `H × W`, every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValuationMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ValuationMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == height * width,
            "valuation map has {} values, expected {height}x{width}",
            data.len()
        );
        ensure!(
            data.iter().all(|v| (0.0..=1.0).contains(v)),
            "valuation values must lie in [0, 1]"
        );
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Mean valuation over hole pixels and over valid pixels. `None` when
    /// the corresponding region is empty.
    pub fn region_means(&self, mask: &MaskTensor) -> (Option<f64>, Option<f64>) {
        let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in self.data.iter().zip(mask.data()) {
            if m == 1 {
                sin += v;
                nin += 1;
            } else {
                sout += v;
                nout += 1;
            }
        }
        (
            (nin > 0).then(|| sin / nin as f64),
            (nout > 0).then(|| sout / nout as f64),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub base_channels: usize,
    pub input_channels: usize,
    pub leaky_slope: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            input_channels: 3,
            leaky_slope: 0.2,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_channels >= 1, "detector base_channels must be >= 1");
        ensure!(self.input_channels >= 1, "detector input_channels must be >= 1");
        ensure!(
            self.leaky_slope > 0.0 && self.leaky_slope < 1.0,
            "leaky_slope must lie in (0, 1), got {}",
            self.leaky_slope
        );
        Ok(())
    }
}

/// Detector weights plus the layer stack that uses them.
#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    stages: Vec<Stage>,
    params: ParamStore,
}

/// Activations saved by [`Detector::forward_tensor`].
#[derive(Clone, Debug)]
pub struct DetectorTrace {
    caches: Vec<StageCache>,
    logits: Tensor,
}

impl DetectorTrace {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

const STRIDE2: ConvGeometry = ConvGeometry::new(4, 2, 1);
const SAME4: ConvGeometry = ConvGeometry::asymmetric(4, 1, 1, 2);

/// Builds a detector with N(0, 0.02) weights and zero biases.
pub fn build_detector(config: DetectorConfig, init_seed: u64) -> Result<Detector> {
    config.validate()?;
    let b = config.base_channels;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(init_seed, 0.02);
    let leaky = Stage::LeakyRelu(config.leaky_slope);
    let mut stages = Vec::with_capacity(13);
    let convs = [
        ("conv1", config.input_channels, b, STRIDE2),
        ("conv2", b, 2 * b, STRIDE2),
        ("conv3", 2 * b, 4 * b, SAME4),
        ("conv4", 4 * b, 4 * b, SAME4),
        ("conv5", 4 * b, 4 * b, SAME4),
    ];
    for (name, cin, cout, g) in convs {
        stages.push(Stage::Conv(Conv2d::new(&mut store, &mut init, name, cin, cout, g)));
        stages.push(leaky.clone());
    }
    stages.push(Stage::ConvTranspose(ConvTranspose2d::new(
        &mut store,
        &mut init,
        "deconv1",
        4 * b,
        2 * b,
        STRIDE2,
    )));
    stages.push(leaky);
    stages.push(Stage::ConvTranspose(ConvTranspose2d::new(
        &mut store,
        &mut init,
        "deconv2",
        2 * b,
        2,
        STRIDE2,
    )));
    Ok(Detector {
        config,
        stages,
        params: store,
    })
}

/// Two-class softmax over the logit channels; returns the artifact
/// probability `softmax(l)[1] = sigmoid(l1 − l0)` per pixel.
pub fn valuation_from_logits(logits: &Tensor) -> Result<ValuationMap> {
    ensure!(
        logits.channels() == 2,
        "expected 2 logit channels, got {}",
        logits.channels()
    );
    let data = logits
        .plane(0)
        .iter()
        .zip(logits.plane(1))
        .map(|(&l0, &l1)| sigmoid(l1 - l0))
        .collect();
    ValuationMap::new(logits.height(), logits.width(), data)
}

impl Detector {
    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        ensure!(
            x.channels() == self.config.input_channels,
            "detector expects {} channels, got {}",
            self.config.input_channels,
            x.channels()
        );
        ensure!(
            x.height().is_multiple_of(4) && x.width().is_multiple_of(4) && x.height() >= 4 && x.width() >= 4,
            "detector input {}x{} must be divisible by 4",
            x.height(),
            x.width()
        );
        Ok(())
    }

    pub fn forward(&self, image: &ImageTensor) -> Result<ValuationMap> {
        Ok(self.forward_tensor(image.as_tensor())?.0)
    }

    /// Forward pass on a raw tensor, keeping what the backward pass needs.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<(ValuationMap, DetectorTrace)> {
        self.check_input(x)?;
        let (logits, caches) = forward_stages(&self.stages, &self.params, x.clone());
        let v = valuation_from_logits(&logits)?;
        Ok((v, DetectorTrace { caches, logits }))
    }

    /// Back-propagates `dL/dV` through the softmax and the layer stack.
    /// Returns `dL/d(input)`; parameter gradients accumulate into `grads`.
    pub fn backward_valuation(
        &self,
        trace: &DetectorTrace,
        valuation: &ValuationMap,
        grad_v: &[f64],
        grads: Option<&mut Grads>,
    ) -> Tensor {
        let (h, w) = (valuation.height(), valuation.width());
        let mut dlogits = Tensor::zeros(2, h, w);
        let n = h * w;
        for (i, (&g, &v)) in grad_v.iter().zip(valuation.data()).enumerate() {
            let d = g * v * (1.0 - v);
            dlogits.data_mut()[i] = -d;
            dlogits.data_mut()[n + i] = d;
        }
        backward_stages(&self.stages, &self.params, &trace.caches, dlogits, grads)
    }

    /// Image-level "real" probability used when the detector backbone serves
    /// as a discriminator: `sigmoid(mean(l0 − l1))` over all pixels.
    pub fn score_from_trace(trace: &DetectorTrace) -> f64 {
        let l = &trace.logits;
        let n = l.plane_len() as f64;
        let s: f64 = l.plane(0).iter().zip(l.plane(1)).map(|(a, b)| a - b).sum::<f64>() / n;
        sigmoid(s)
    }

    /// Back-propagates `dL/d(score)` for [`Self::score_from_trace`].
    pub fn backward_score(&self, trace: &DetectorTrace, grad_score: f64, grads: Option<&mut Grads>) -> Tensor {
        let d = Self::score_from_trace(trace);
        let l = &trace.logits;
        let n = l.plane_len();
        let g = grad_score * d * (1.0 - d) / n as f64;
        let mut dlogits = Tensor::zeros(2, l.height(), l.width());
        dlogits.plane_mut(0).fill(g);
        dlogits.plane_mut(1).fill(-g);
        backward_stages(&self.stages, &self.params, &trace.caches, dlogits, grads)
    }
}
