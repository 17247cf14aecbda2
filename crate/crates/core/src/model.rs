//! Segmentation model interface and the small reference encoder-decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::maps::{Image, LogitMap};
use crate::nn::{self, Conv2d, GroupNorm, GroupNormCache, Tensor3};

/// Anything that maps an image to per-pixel class logits and can be trained
/// through a flat parameter view.
pub trait SegModel: Clone {
    /// Intermediate state kept between a training forward and its backward.
    type Tape;

    fn num_classes(&self) -> usize;
    fn in_channels(&self) -> usize;
    fn params(&self) -> &[f32];
    fn params_mut(&mut self) -> &mut [f32];

    /// Inference forward; output spatial dims equal the input's.
    fn forward(&self, image: &Image) -> Result<LogitMap> {
        self.forward_train(image).map(|(l, _)| l)
    }

    fn forward_train(&self, image: &Image) -> Result<(LogitMap, Self::Tape)>;

    /// Accumulates `d loss / d params` into `grads` given `d loss / d logits`.
    fn backward(&self, tape: Self::Tape, dlogits: &LogitMap, grads: &mut [f32]) -> Result<()>;

    /// Parameter ranges exempt from weight decay (normalization layers).
    fn no_decay_ranges(&self) -> Vec<std::ops::Range<usize>> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel count of the first encoder stage; deeper stages use 2x and 4x.
    pub base_width: usize,
    /// Group-norm groups after every hidden conv; 0 disables normalization.
    #[serde(default = "default_norm_groups")]
    pub norm_groups: usize,
}

fn default_norm_groups() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 8,
            norm_groups: default_norm_groups(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        if self.norm_groups > 0 && self.base_width % self.norm_groups != 0 {
            return Err(Error::Config(format!(
                "base_width {} not divisible by norm_groups {}",
                self.base_width, self.norm_groups
            )));
        }
        Ok(())
    }
}

/// Strided-conv encoder with dilated context layers and a two-step
/// bilinear-upsampling decoder with skip connections.
///
/// ```text
/// Every hidden conv is followed by group norm (when enabled) and ReLU.
///
/// e1 = relu(conv3x3(x))              full res,  w ch
/// e2 = relu(conv3x3/2(e1))           1/2,      2w
/// e3 = relu(conv3x3/2(e2))           1/4,      4w
/// e4 = relu(conv3x3 d2(e3))          1/4,      4w
/// e5 = relu(conv3x3 d4(e4))          1/4,      4w
/// d1 = relu(conv1x1([up(e5), e2]))   1/2,      2w
/// d2 = relu(conv3x3(d1))             1/2,      2w
/// out = conv1x1([up(d2), e1])        full res,  K
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SmallSegNet {
    in_channels: usize,
    classes: usize,
    config: ModelConfig,
    layers: [Conv2d; 8],
    norms: Vec<GroupNorm>,
    params: Vec<f32>,
}

pub struct SmallSegNetTape {
    input: Tensor3,
    acts: Vec<Tensor3>,
    cols: Vec<Vec<f32>>,
    norm_caches: Vec<GroupNormCache>,
    cat1: (usize, usize),
    cat2: (usize, usize),
}

impl SmallSegNet {
    pub fn new(in_channels: usize, classes: usize, config: ModelConfig, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if in_channels == 0 {
            return Err(Error::Config("model needs at least one input channel".into()));
        }
        config.validate()?;
        let w = config.base_width;
        let mut off = 0;
        let layers = [
            Conv2d::new(in_channels, w, 3, 1, 1, &mut off),
            Conv2d::new(w, 2 * w, 3, 2, 1, &mut off),
            Conv2d::new(2 * w, 4 * w, 3, 2, 1, &mut off),
            Conv2d::new(4 * w, 4 * w, 3, 1, 2, &mut off),
            Conv2d::new(4 * w, 4 * w, 3, 1, 4, &mut off),
            Conv2d::new(6 * w, 2 * w, 1, 1, 1, &mut off),
            Conv2d::new(2 * w, 2 * w, 3, 1, 1, &mut off),
            Conv2d::new(3 * w, classes, 1, 1, 1, &mut off),
        ];
        let norms: Vec<GroupNorm> = if config.norm_groups > 0 {
            layers[..7]
                .iter()
                .map(|l| GroupNorm::new(l.cout, config.norm_groups, &mut off))
                .collect()
        } else {
            Vec::new()
        };
        let mut params = vec![0.0f32; off];
        for n in &norms {
            params[n.g_off..n.b_off].fill(1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, layer) in layers.iter().enumerate() {
            // He initialisation for ReLU layers, smaller for the logit head.
            let gain = if i == layers.len() - 1 { 1.0 } else { 2.0 };
            let std = (gain / layer.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[layer.w_off..layer.b_off] {
                *p = normal.sample(&mut rng) as f32;
            }
        }
        Ok(Self {
            in_channels,
            classes,
            config,
            layers,
            norms,
            params,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.channels != self.in_channels {
            return Err(shape_err(
                format!("{} input channels", self.in_channels),
                image.channels,
            ));
        }
        if image.height < 4 || image.width < 4 {
            return Err(Error::InvalidInput(format!(
                "image {}x{} too small for the network",
                image.height, image.width
            )));
        }
        Ok(())
    }
}

impl SegModel for SmallSegNet {
    type Tape = SmallSegNetTape;

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn params(&self) -> &[f32] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    fn forward_train(&self, image: &Image) -> Result<(LogitMap, SmallSegNetTape)> {
        self.check_input(image)?;
        let p = &self.params;
        let l = &self.layers;
        let x = Tensor3 {
            c: image.channels,
            h: image.height,
            w: image.width,
            // centre inputs around zero
            data: image.values.iter().map(|v| v - 0.5).collect(),
        };
        let mut cols = Vec::with_capacity(8);
        let mut norm_caches = Vec::with_capacity(self.norms.len());
        let mut run = |i: usize, input: &Tensor3, relu: bool| {
            let (mut y, c) = l[i].forward(p, input);
            if let Some(n) = self.norms.get(i) {
                let (z, cache) = n.forward(p, &y);
                y = z;
                norm_caches.push(cache);
            }
            if relu {
                nn::relu_inplace(&mut y);
            }
            cols.push(c);
            y
        };
        let e1 = run(0, &x, true);
        let e2 = run(1, &e1, true);
        let e3 = run(2, &e2, true);
        let e4 = run(3, &e3, true);
        let e5 = run(4, &e4, true);
        let up1 = nn::resize_bilinear(&e5, e2.h, e2.w);
        let cat1 = nn::concat(&up1, &e2);
        let d1 = run(5, &cat1, true);
        let d2 = run(6, &d1, true);
        let up2 = nn::resize_bilinear(&d2, e1.h, e1.w);
        let cat2 = nn::concat(&up2, &e1);
        let out = run(7, &cat2, false);
        let logits = LogitMap::from_vec(
            self.classes,
            out.h,
            out.w,
            out.data.iter().map(|&v| f64::from(v)).collect(),
        )?;
        let tape = SmallSegNetTape {
            cat1: (e5.h, e5.w),
            cat2: (d2.h, d2.w),
            input: x,
            acts: vec![e1, e2, e3, e4, e5, d1, d2],
            cols,
            norm_caches,
        };
        Ok((logits, tape))
    }

    fn backward(&self, tape: SmallSegNetTape, dlogits: &LogitMap, grads: &mut [f32]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(shape_err(self.params.len(), grads.len()));
        }
        let [e1, e2, e3, e4, e5, d1, d2]: [Tensor3; 7] = tape
            .acts
            .try_into()
            .map_err(|_| Error::Contract("corrupt tape".into()))?;
        let p = &self.params;
        let l = &self.layers;
        let cols = &tape.cols;
        let w = self.config.base_width;
        let caches = &tape.norm_caches;
        // Gradient at layer i's pre-norm output given the gradient at its activation.
        let act_back = |i: usize, y: &Tensor3, mut dy: Tensor3, grads: &mut [f32]| {
            nn::relu_backward(y, &mut dy);
            match self.norms.get(i) {
                Some(n) => n.backward(p, &caches[i], &dy, grads),
                None => dy,
            }
        };

        let dout = Tensor3 {
            c: dlogits.classes,
            h: dlogits.height,
            w: dlogits.width,
            data: dlogits.values.iter().map(|&v| v as f32).collect(),
        };
        let dcat2 = l[7]
            .backward(p, (e1.h, e1.w), &cols[7], &dout, grads, true)
            .expect("dx requested");
        let (dup2, mut de1) = nn::split(dcat2, 2 * w);
        let dd2 = nn::resize_bilinear_backward(&dup2, tape.cat2.0, tape.cat2.1);
        let dd2 = act_back(6, &d2, dd2, grads);
        let dd1 = l[6]
            .backward(p, (d1.h, d1.w), &cols[6], &dd2, grads, true)
            .expect("dx requested");
        let dd1 = act_back(5, &d1, dd1, grads);
        let dcat1 = l[5]
            .backward(p, (e2.h, e2.w), &cols[5], &dd1, grads, true)
            .expect("dx requested");
        let (dup1, mut de2) = nn::split(dcat1, 4 * w);
        let de5 = nn::resize_bilinear_backward(&dup1, tape.cat1.0, tape.cat1.1);
        let de5 = act_back(4, &e5, de5, grads);
        let de4 = l[4]
            .backward(p, (e4.h, e4.w), &cols[4], &de5, grads, true)
            .expect("dx requested");
        let de4 = act_back(3, &e4, de4, grads);
        let de3 = l[3]
            .backward(p, (e3.h, e3.w), &cols[3], &de4, grads, true)
            .expect("dx requested");
        let de3 = act_back(2, &e3, de3, grads);
        let de2_from_e3 = l[2]
            .backward(p, (e2.h, e2.w), &cols[2], &de3, grads, true)
            .expect("dx requested");
        nn::add_assign(&mut de2, &de2_from_e3);
        let de2 = act_back(1, &e2, de2, grads);
        let de1_from_e2 = l[1]
            .backward(p, (e1.h, e1.w), &cols[1], &de2, grads, true)
            .expect("dx requested");
        nn::add_assign(&mut de1, &de1_from_e2);
        let de1 = act_back(0, &e1, de1, grads);
        l[0].backward(p, (tape.input.h, tape.input.w), &cols[0], &de1, grads, false);
        Ok(())
    }

    fn no_decay_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.norms.iter().map(GroupNorm::param_range).collect()
    }
}
