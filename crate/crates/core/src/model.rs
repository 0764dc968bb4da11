//! The three-part localization network: a shared feature extractor, a
//! classifier head producing a class score map, and a localizer head
//! producing per-class foreground probabilities.
//!
//! The classifier downsamples once more than the extractor, so the score
//! map has half the spatial resolution of the feature map while the class
//! activation map keeps the feature resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Side length of the square input image, in pixels.
    pub input_size: usize,
    pub num_classes: usize,
    /// Channels of the shared feature map.
    pub feature_channels: usize,
    /// Downsampling factor from image to feature map. Must be a power of two.
    pub feature_stride: usize,
    /// Number of conv blocks in the extractor. The first `log2(feature_stride)`
    /// of them use stride 2.
    pub backbone_blocks: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            num_classes: 8,
            feature_channels: 32,
            feature_stride: 8,
            backbone_blocks: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Downsampling factor from image to class score map.
    pub fn score_stride(&self) -> usize {
        2 * self.feature_stride
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / self.feature_stride
    }

    pub fn score_size(&self) -> usize {
        self.input_size / self.score_stride()
    }

    fn stride_stages(&self) -> usize {
        self.feature_stride.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes == 0 || self.feature_channels == 0 || self.backbone_blocks == 0 {
            return bad("num_classes, feature_channels and backbone_blocks must be positive".into());
        }
        if !self.feature_stride.is_power_of_two() {
            return bad(format!("feature_stride {} is not a power of two", self.feature_stride));
        }
        if self.backbone_blocks < self.stride_stages() {
            return bad(format!(
                "feature_stride {} needs at least {} backbone blocks, got {}",
                self.feature_stride,
                self.stride_stages(),
                self.backbone_blocks
            ));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.score_stride()) {
            return bad(format!(
                "input_size {} is not divisible by score stride {}",
                self.input_size,
                self.score_stride()
            ));
        }
        Ok(())
    }
}

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Extractor,
    Classifier,
    Localizer,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Extractor => "extractor",
            Part::Classifier => "classifier",
            Part::Localizer => "localizer",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub part: Part,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
    relu: bool,
}

/// Network parameters plus the fixed layer layout derived from a
/// [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct WsolNet {
    config: ModelConfig,
    params: Vec<Param>,
    extractor: Vec<Conv>,
    classifier: Vec<Conv>,
    localizer: Vec<Conv>,
}

/// Selects which class-activation channel becomes the foreground mask.
#[derive(Clone, Copy, Debug)]
pub enum ClassSelect<'a> {
    /// One label per sample; used during training.
    GroundTruth(&'a [usize]),
    /// The arg-max of the predicted probabilities, ties to the lower index.
    Predicted,
}

/// Every intermediate of one forward pass that a loss or evaluation needs.
#[derive(Clone, Debug)]
pub struct ActivationBundle<'t> {
    /// Shared feature map, `[N, Cf, h, w]`.
    pub features: Var<'t>,
    /// Class score map, `[N, C, h/2, w/2]`.
    pub scores: Var<'t>,
    /// Class activation map in (0,1), `[N, C, h, w]`.
    pub cam: Var<'t>,
    /// The selected channel of `cam`, `[N, 1, h, w]`.
    pub foreground: Var<'t>,
    /// Class probabilities, `[N, C]`.
    pub probs: Var<'t>,
    /// Channel taken for `foreground`, per sample.
    pub class_index: Vec<usize>,
}

struct Builder<'a> {
    params: Vec<Param>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, part: Part, idx: usize, cin: usize, cout: usize, k: usize, stride: usize, relu: bool) -> Conv {
        let fan_in = (cin * k * k) as f64;
        // He-uniform for layers feeding a relu, variance-preserving otherwise.
        let bound = (if relu { 6.0 } else { 3.0 } / fan_in).sqrt();
        let rng = &mut *self.rng;
        let weight = Tensor::from_fn([cout, cin, k, k], |_| rng.random_range(-bound..bound));
        let prefix = format!("{}.{idx}", part.name());
        self.params.push(Param { name: format!("{prefix}.weight"), part, value: weight });
        self.params.push(Param { name: format!("{prefix}.bias"), part, value: Tensor::zeros([cout]) });
        let n = self.params.len();
        Conv { weight: n - 2, bias: n - 1, stride, padding: k / 2, relu }
    }
}

impl WsolNet {
    /// Builds the layer layout and draws parameters from the config's seed.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder { params: Vec::new(), rng: &mut rng };
        let cf = config.feature_channels;
        let blocks = config.backbone_blocks;
        let mut extractor = Vec::with_capacity(blocks);
        let mut cin = 3;
        for i in 0..blocks {
            let cout = if i + 1 == blocks {
                cf
            } else if i == 0 {
                (cf / 2).max(1)
            } else {
                cf
            };
            let stride = if i < config.stride_stages() { 2 } else { 1 };
            extractor.push(b.conv(Part::Extractor, i, cin, cout, 3, stride, true));
            cin = cout;
        }
        let c = config.num_classes;
        let classifier = vec![
            b.conv(Part::Classifier, 0, cf, cf, 3, 2, true),
            b.conv(Part::Classifier, 1, cf, c, 1, 1, false),
        ];
        let localizer = vec![
            b.conv(Part::Localizer, 0, cf, cf, 3, 1, true),
            b.conv(Part::Localizer, 1, cf, c, 1, 1, false),
        ];
        let params = b.params;
        Ok(WsolNet { config, params, extractor, classifier, localizer })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let mut net = WsolNet::init(config)?;
        if params.len() != net.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                net.params.len(),
                params.len()
            )));
        }
        for (slot, (name, value)) in net.params.iter_mut().zip(params) {
            if slot.name != name || slot.value.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
            slot.value = value;
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on `tape` as a gradient leaf.
    pub fn bind<'n, 't>(&'n self, tape: &'t Tape) -> BoundNet<'n, 't> {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        BoundNet { net: self, tape, vars }
    }

    /// Class probabilities and the upsampled foreground heatmap for one
    /// `[3,S,S]` image. `class` picks the heatmap channel; `None` uses the
    /// predicted class.
    pub fn predict(&self, image: &Tensor, class: Option<usize>) -> Result<Prediction> {
        let s = self.config.input_size;
        let batch = image.clone().reshape([1, 3, s, s]).map_err(|_| {
            Error::Dimension(format!("expected a 3x{s}x{s} image, got {:?}", image.shape()))
        })?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let labels;
        let select = match class {
            Some(k) => {
                labels = [k];
                ClassSelect::GroundTruth(&labels)
            }
            None => ClassSelect::Predicted,
        };
        let bundle = bound.forward(tape.constant(batch), select)?;
        let heatmap = foreground_heatmap(&bundle, s)?.value();
        Ok(Prediction {
            probs: bundle.probs.value().data().to_vec(),
            class: bundle.class_index[0],
            heatmap: heatmap.as_ref().clone().reshape([1, s, s])?,
        })
    }
}

/// Output of [`WsolNet::predict`].
#[derive(Clone, Debug)]
pub struct Prediction {
    pub probs: Vec<f64>,
    /// Channel used for the heatmap.
    pub class: usize,
    /// Foreground probability at image resolution, `[1,S,S]`.
    pub heatmap: Tensor,
}

/// A network whose parameters are recorded on a tape.
pub struct BoundNet<'n, 't> {
    net: &'n WsolNet,
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'n, 't> BoundNet<'n, 't> {
    pub fn net(&self) -> &'n WsolNet {
        self.net
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Parameter leaves in the same order as [`WsolNet::params`].
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn run(&self, layers: &[Conv], mut x: Var<'t>, frozen: bool) -> Result<Var<'t>> {
        for l in layers {
            let (mut w, mut b) = (self.vars[l.weight], self.vars[l.bias]);
            if frozen {
                w = w.detach();
                b = b.detach();
            }
            x = x.conv2d(w, b, l.stride, l.padding)?;
            if l.relu {
                x = x.relu();
            }
        }
        Ok(x)
    }

    /// Shared feature map for a `[N,3,S,S]` image batch.
    pub fn extract(&self, image: Var<'t>) -> Result<Var<'t>> {
        let s = self.net.config.input_size;
        match image.value().dims4()? {
            (_, 3, h, w) if h == s && w == s => {}
            _ => {
                return Err(Error::Dimension(format!(
                    "expected [N,3,{s},{s}] image batch, got {:?}",
                    image.shape()
                )))
            }
        }
        // Pixels are centred on mid-grey before the first convolution.
        self.run(&self.net.extractor, image.add_scalar(-0.5), false)
    }

    /// Runs only the classifier head on `features`. With `frozen_classifier`
    /// the classifier weights enter as constants, so gradient reaches
    /// `features` but not the classifier parameters.
    pub fn classify_features(&self, features: Var<'t>, frozen_classifier: bool) -> Result<Var<'t>> {
        let cfg = &self.net.config;
        let (_, c, h, w) = features.value().dims4()?;
        let fs = cfg.feature_size();
        if (c, h, w) != (cfg.feature_channels, fs, fs) {
            return Err(Error::Dimension(format!(
                "classifier expects [N,{},{fs},{fs}] features, got {:?}",
                cfg.feature_channels,
                features.shape()
            )));
        }
        self.run(&self.net.classifier, features, frozen_classifier)
    }

    /// Class activation map in (0,1) at feature resolution.
    pub fn localize(&self, features: Var<'t>) -> Result<Var<'t>> {
        Ok(self.run(&self.net.localizer, features, false)?.sigmoid())
    }

    pub fn forward(&self, image: Var<'t>, select: ClassSelect<'_>) -> Result<ActivationBundle<'t>> {
        let features = self.extract(image)?;
        let scores = self.classify_features(features, false)?;
        let cam = self.localize(features)?;
        let probs = scores.global_avg_pool()?.softmax()?;
        let n = image.shape()[0];
        let class_index = match select {
            ClassSelect::GroundTruth(labels) => {
                if labels.len() != n {
                    return Err(Error::Contract(format!(
                        "ground-truth selection needs {n} labels, got {}",
                        labels.len()
                    )));
                }
                labels.to_vec()
            }
            ClassSelect::Predicted => argmax_rows(&probs.value()),
        };
        let foreground = cam.select_channel(&class_index)?;
        Ok(ActivationBundle { features, scores, cam, foreground, probs, class_index })
    }
}

fn argmax_rows(p: &Tensor) -> Vec<usize> {
    let cols = p.shape()[1];
    p.data()
        .chunks_exact(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// The foreground mask resized to image resolution, `[N,1,S,S]`.
pub fn foreground_heatmap<'t>(bundle: &ActivationBundle<'t>, image_size: usize) -> Result<Var<'t>> {
    bundle.foreground.bilinear_upsample(image_size, image_size)
}
