//! The dehazing network: a frozen pretrained encoder, a decoder with
//! transposed-convolution upsampling, and block-level skip connections that
//! pass through their own normalization before being concatenated onto the
//! decoder path.
//!
//! The encoder is the first three blocks plus the first convolution of the
//! fourth block of a 16-layer VGG feature stack (widths 64-64 / 128-128 /
//! 256-256-256 / 512), all 3×3 stride-1 convolutions with ReLU and stride-2
//! max pooling between blocks. The decoder mirrors it with three ×2
//! transposed convolutions and ends in a 3-channel Tanh layer. Skip features
//! are the post-ReLU outputs of the first convolution of encoder blocks 1-3,
//! concatenated (decoder features first) onto the inputs of decoder blocks
//! 4, 3, 2 respectively.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array4, ArrayD, Axis, Ix1, Ix4, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image_io::{self, ImageTensor, ModelSpace, ModelSpaceTensor};
use crate::layers::{self, Activation};
use crate::norm::{self, NormCache, BN_MOMENTUM, DEFAULT_EPS};

pub use crate::norm::NormKind;
use crate::weights::{TensorData, WeightArchive};

/// Network width preset. `Tiny` divides every channel count by 8 and keeps
/// the topology; it exists for desk-scale tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Tiny,
}

impl Scale {
    pub fn divisor(&self) -> usize {
        match self {
            Scale::Full => 1,
            Scale::Tiny => 8,
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scale::Full => write!(f, "full"),
            Scale::Tiny => write!(f, "tiny"),
        }
    }
}

/// One entry of a layer table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
        trainable: bool,
    },
    TConv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
        trainable: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Norm {
        name: String,
        channels: usize,
    },
    /// Concatenate skip features (by skip index 0..2) onto the running
    /// decoder features, decoder features first.
    ConcatSkip {
        index: usize,
    },
}

/// Total spatial downsampling of the encoder (and upsampling of the decoder).
pub const DOWNSAMPLE: usize = 8;

/// Structural and normalization choices for a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: Scale,
    pub skip_norm: NormKind,
    pub decoder_norm: NormKind,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
}

impl ModelConfig {
    /// Default layer tables for a scale and per-site normalization kinds.
    pub fn new(scale: Scale, skip_norm: NormKind, decoder_norm: NormKind) -> Self {
        let d = scale.divisor();
        let w = |c: usize| c / d;
        let conv =
            |name: &str, i: usize, o: usize, act: Activation, trainable: bool| LayerSpec::Conv {
                name: name.into(),
                in_ch: i,
                out_ch: o,
                kernel: 3,
                stride: 1,
                padding: 1,
                activation: act,
                trainable,
            };
        let tconv = |name: &str, i: usize, o: usize| LayerSpec::TConv {
            name: name.into(),
            in_ch: i,
            out_ch: o,
            kernel: 4,
            stride: 2,
            padding: 1,
            activation: Activation::Relu,
            trainable: true,
        };
        let pool = || LayerSpec::MaxPool { kernel: 2, stride: 2 };
        let nrm = |name: &str, c: usize| LayerSpec::Norm {
            name: name.into(),
            channels: c,
        };
        use Activation::{Relu, Tanh};

        let encoder = vec![
            conv("enc.b1c1", 3, w(64), Relu, false),
            conv("enc.b1c2", w(64), w(64), Relu, false),
            pool(),
            conv("enc.b2c1", w(64), w(128), Relu, false),
            conv("enc.b2c2", w(128), w(128), Relu, false),
            pool(),
            conv("enc.b3c1", w(128), w(256), Relu, false),
            conv("enc.b3c2", w(256), w(256), Relu, false),
            conv("enc.b3c3", w(256), w(256), Relu, false),
            pool(),
            conv("enc.b4c1", w(256), w(512), Relu, false),
        ];

        // Normalization precedes every decoder conv/tconv except the first.
        let decoder = vec![
            conv("dec.d1c1", w(512), w(256), Relu, true),
            nrm("dec.d1c2.norm", w(256)),
            conv("dec.d1c2", w(256), w(256), Relu, true),
            nrm("dec.d1up.norm", w(256)),
            tconv("dec.d1up", w(256), w(256)),
            LayerSpec::ConcatSkip { index: 2 },
            nrm("dec.d2c1.norm", w(512)),
            conv("dec.d2c1", w(512), w(256), Relu, true),
            nrm("dec.d2c2.norm", w(256)),
            conv("dec.d2c2", w(256), w(128), Relu, true),
            nrm("dec.d2up.norm", w(128)),
            tconv("dec.d2up", w(128), w(128)),
            LayerSpec::ConcatSkip { index: 1 },
            nrm("dec.d3c1.norm", w(256)),
            conv("dec.d3c1", w(256), w(128), Relu, true),
            nrm("dec.d3c2.norm", w(128)),
            conv("dec.d3c2", w(128), w(64), Relu, true),
            nrm("dec.d3up.norm", w(64)),
            tconv("dec.d3up", w(64), w(64)),
            LayerSpec::ConcatSkip { index: 0 },
            nrm("dec.d4c1.norm", w(128)),
            conv("dec.d4c1", w(128), w(64), Relu, true),
            nrm("dec.d4c2.norm", w(64)),
            conv("dec.d4c2", w(64), 3, Tanh, true),
        ];

        ModelConfig {
            scale,
            skip_norm,
            decoder_norm,
            encoder,
            decoder,
        }
    }

    /// Indices into the encoder table of the first convolution of blocks
    /// 1, 2, 3 — the skip/tap sites.
    pub fn encoder_tap_indices(&self) -> Result<[usize; 3]> {
        let mut taps = Vec::new();
        let mut at_block_start = true;
        for (i, spec) in self.encoder.iter().enumerate() {
            match spec {
                LayerSpec::Conv { .. } => {
                    if at_block_start {
                        taps.push(i);
                        at_block_start = false;
                    }
                }
                LayerSpec::MaxPool { .. } => at_block_start = true,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unexpected encoder entry {other:?}"
                    )))
                }
            }
        }
        if taps.len() < 3 {
            return Err(Error::InvalidConfig(
                "encoder needs at least three blocks".into(),
            ));
        }
        Ok([taps[0], taps[1], taps[2]])
    }

    /// Output channels of the skip taps.
    pub fn skip_channels(&self) -> Result<[usize; 3]> {
        let taps = self.encoder_tap_indices()?;
        let mut out = [0usize; 3];
        for (k, &i) in taps.iter().enumerate() {
            if let LayerSpec::Conv { out_ch, .. } = &self.encoder[i] {
                out[k] = *out_ch;
            }
        }
        Ok(out)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.encoder
            .iter()
            .rev()
            .find_map(|s| match s {
                LayerSpec::Conv { out_ch, .. } => Some(*out_ch),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// Structural checks: three stride-2 pools, three stride-2 transposed
    /// convolutions, channel bookkeeping through concatenations, Tanh output.
    pub fn validate(&self) -> Result<()> {
        let pools = self
            .encoder
            .iter()
            .filter(|s| matches!(s, LayerSpec::MaxPool { stride: 2, .. }))
            .count();
        if pools != 3 {
            return Err(Error::InvalidConfig(format!(
                "encoder must contain exactly three stride-2 maxpools, found {pools}"
            )));
        }
        let tconvs = self
            .decoder
            .iter()
            .filter(|s| matches!(s, LayerSpec::TConv { stride: 2, .. }))
            .count();
        if tconvs != 3 {
            return Err(Error::InvalidConfig(format!(
                "decoder must contain exactly three stride-2 transposed convolutions, found {tconvs}"
            )));
        }

        let mut ch = 3usize;
        for spec in &self.encoder {
            match spec {
                LayerSpec::Conv {
                    name,
                    in_ch,
                    out_ch,
                    trainable,
                    ..
                } => {
                    if *in_ch != ch {
                        return Err(Error::InvalidConfig(format!(
                            "{name}: expects {in_ch} input channels, gets {ch}"
                        )));
                    }
                    if *trainable {
                        return Err(Error::InvalidConfig(format!(
                            "{name}: encoder layers must be frozen"
                        )));
                    }
                    ch = *out_ch;
                }
                LayerSpec::MaxPool { .. } => {}
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unsupported encoder entry {other:?}"
                    )))
                }
            }
        }

        let skips = self.skip_channels()?;
        let mut ch = self.bottleneck_channels();
        let mut seen_concat = Vec::new();
        let mut last_activation = Activation::None;
        for spec in &self.decoder {
            match spec {
                LayerSpec::Conv {
                    name,
                    in_ch,
                    out_ch,
                    activation,
                    ..
                }
                | LayerSpec::TConv {
                    name,
                    in_ch,
                    out_ch,
                    activation,
                    ..
                } => {
                    if *in_ch != ch {
                        return Err(Error::InvalidConfig(format!(
                            "{name}: expects {in_ch} input channels, gets {ch}"
                        )));
                    }
                    ch = *out_ch;
                    last_activation = *activation;
                }
                LayerSpec::Norm { name, channels } => {
                    if *channels != ch {
                        return Err(Error::InvalidConfig(format!(
                            "{name}: normalizes {channels} channels, gets {ch}"
                        )));
                    }
                }
                LayerSpec::ConcatSkip { index } => {
                    if *index >= 3 || seen_concat.contains(index) {
                        return Err(Error::InvalidConfig(format!(
                            "bad skip concatenation index {index}"
                        )));
                    }
                    seen_concat.push(*index);
                    ch += skips[*index];
                }
                LayerSpec::MaxPool { .. } => {
                    return Err(Error::InvalidConfig("maxpool in decoder".into()))
                }
            }
        }
        if seen_concat != vec![2, 1, 0] {
            return Err(Error::InvalidConfig(format!(
                "skip concatenations must run deepest-first [2, 1, 0], found {seen_concat:?}"
            )));
        }
        if ch != 3 || last_activation != Activation::Tanh {
            return Err(Error::InvalidConfig(
                "decoder must end in a 3-channel Tanh layer".into(),
            ));
        }
        Ok(())
    }
}

/// A named tensor with a trainability flag.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub trainable: bool,
}

/// Flat, name-keyed parameter store. Iteration order is the name order,
/// which keeps checkpointing, updates, and digests deterministic.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    map: BTreeMap<String, Param<T>>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }
}

pub type Gradients<T> = BTreeMap<String, ArrayD<T>>;

impl<T: NdFloat> ParamSet<T> {
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>, trainable: bool) {
        self.map.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.map.get(name).ok_or_else(|| Error::MissingTensor {
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.map.get_mut(name).ok_or_else(|| Error::MissingTensor {
            name: name.to_string(),
        })
    }

    pub fn array4(&self, name: &str) -> Result<Array4<T>> {
        let p = self.get(name)?;
        p.value
            .view()
            .into_dimensionality::<Ix4>()
            .map(|v| v.to_owned())
            .map_err(|_| Error::TensorShape {
                name: name.to_string(),
                expected: vec![4],
                found: p.value.shape().to_vec(),
            })
    }

    pub fn array1(&self, name: &str) -> Result<Array1<T>> {
        let p = self.get(name)?;
        p.value
            .view()
            .into_dimensionality::<Ix1>()
            .map(|v| v.to_owned())
            .map_err(|_| Error::TensorShape {
                name: name.to_string(),
                expected: vec![1],
                found: p.value.shape().to_vec(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Where initial weights come from.
pub enum WeightInit<'a> {
    /// Fan-in-scaled uniform random initialization for everything.
    Random { seed: u64 },
    /// Encoder tensors from a converted pretrained archive; decoder and
    /// normalization parameters random from `seed`.
    Pretrained {
        archive: &'a WeightArchive,
        seed: u64,
    },
}

/// The dehazing model: config plus parameter store. Generic over the float
/// type so gradient checks can run in double precision; training and
/// checkpoints use `f32`.
#[derive(Debug, Clone)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

/// Builds a model, loading or initializing parameters per `init`.
pub fn build_model(config: ModelConfig, init: WeightInit<'_>) -> Result<Model<f32>> {
    config.validate()?;
    let (archive, seed) = match init {
        WeightInit::Random { seed } => (None, seed),
        WeightInit::Pretrained { archive, seed } => (Some(archive), seed),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::default();

    let mut init_conv = |name: &str,
                         shape: (usize, usize, usize, usize),
                         fan_in: usize,
                         bias_ch: usize,
                         trainable: bool,
                         params: &mut ParamSet<f32>,
                         from_archive: bool|
     -> Result<()> {
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        if from_archive {
            let archive = archive.expect("archive present when from_archive");
            let want = vec![shape.0, shape.1, shape.2, shape.3];
            let w = archive.tensor(&wname)?;
            if w.shape != want {
                return Err(Error::TensorShape {
                    name: wname,
                    expected: want,
                    found: w.shape.clone(),
                });
            }
            let b = archive.tensor(&bname)?;
            if b.shape != vec![bias_ch] {
                return Err(Error::TensorShape {
                    name: bname,
                    expected: vec![bias_ch],
                    found: b.shape.clone(),
                });
            }
            params.insert(&wname, w.to_dyn_array()?, trainable);
            params.insert(&bname, b.to_dyn_array()?, trainable);
        } else {
            let bound = (1.0 / fan_in as f32).sqrt();
            let w = Array4::from_shape_fn(shape, |_| rng.random_range(-bound..bound));
            params.insert(&wname, w.into_dyn(), trainable);
            params.insert(&bname, Array1::<f32>::zeros(bias_ch).into_dyn(), trainable);
        }
        Ok(())
    };

    for spec in &config.encoder {
        if let LayerSpec::Conv {
            name,
            in_ch,
            out_ch,
            kernel,
            trainable,
            ..
        } = spec
        {
            init_conv(
                name,
                (*out_ch, *in_ch, *kernel, *kernel),
                in_ch * kernel * kernel,
                *out_ch,
                *trainable,
                &mut params,
                archive.is_some(),
            )?;
        }
    }

    for spec in &config.decoder {
        match spec {
            LayerSpec::Conv {
                name,
                in_ch,
                out_ch,
                kernel,
                trainable,
                ..
            } => init_conv(
                name,
                (*out_ch, *in_ch, *kernel, *kernel),
                in_ch * kernel * kernel,
                *out_ch,
                *trainable,
                &mut params,
                false,
            )?,
            LayerSpec::TConv {
                name,
                in_ch,
                out_ch,
                kernel,
                trainable,
                ..
            } => init_conv(
                name,
                (*in_ch, *out_ch, *kernel, *kernel),
                in_ch * kernel * kernel,
                *out_ch,
                *trainable,
                &mut params,
                false,
            )?,
            LayerSpec::Norm { name, channels } => {
                insert_norm_params(&mut params, name, *channels, config.decoder_norm);
            }
            _ => {}
        }
    }

    let skip_ch = config.skip_channels()?;
    for (i, &c) in skip_ch.iter().enumerate() {
        insert_norm_params(&mut params, &format!("skip{}.norm", i + 1), c, config.skip_norm);
    }

    Ok(Model { config, params })
}

fn insert_norm_params(params: &mut ParamSet<f32>, name: &str, channels: usize, kind: NormKind) {
    if kind == NormKind::Na {
        return;
    }
    params.insert(
        format!("{name}.gamma"),
        Array1::<f32>::ones(channels).into_dyn(),
        true,
    );
    params.insert(
        format!("{name}.beta"),
        Array1::<f32>::zeros(channels).into_dyn(),
        true,
    );
    if kind == NormKind::Bn {
        params.insert(
            format!("{name}.running_mean"),
            Array1::<f32>::zeros(channels).into_dyn(),
            false,
        );
        params.insert(
            format!("{name}.running_var"),
            Array1::<f32>::ones(channels).into_dyn(),
            false,
        );
        params.insert(
            format!("{name}.batches"),
            Array1::<f32>::zeros(1).into_dyn(),
            false,
        );
    }
}

/// Whether a forward pass uses batch statistics (train) or running
/// statistics (eval) in batch-norm sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Replace skip features with zeros (sensitivity testing).
    pub zero_skips: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Eval,
            zero_skips: false,
        }
    }
}

enum StageCache<T> {
    Conv { x: Array4<T>, y_post: Array4<T> },
    TConv { x: Array4<T>, y_post: Array4<T> },
    Norm(Box<NormCache<T>>),
    NormIdentity,
    Concat { dec_channels: usize, skip_index: usize },
}

/// Caches from a training-mode forward pass, consumed by [`Model::backward`].
pub struct NetCache<T> {
    skip_caches: [Option<Box<NormCache<T>>>; 3],
    dec: Vec<StageCache<T>>,
}

impl<T: NdFloat> Model<T> {
    pub fn to_f64(&self) -> Model<f64> {
        let mut params = ParamSet::default();
        for (name, p) in self.params.iter() {
            params.insert(name, p.value.mapv(|v| v.to_f64().unwrap()), p.trainable);
        }
        Model {
            config: self.config.clone(),
            params,
        }
    }

    fn norm_kind_for(&self, name: &str) -> NormKind {
        if name.starts_with("skip") {
            self.config.skip_norm
        } else {
            self.config.decoder_norm
        }
    }

    fn eps(&self) -> T {
        T::from(DEFAULT_EPS).unwrap()
    }

    /// Apply the normalization site `name` to `x`. Batch statistics from
    /// train-mode batch norm are queued into `updates`.
    fn norm_forward(
        &self,
        name: &str,
        x: Array4<T>,
        mode: Mode,
        keep_cache: bool,
        updates: &mut Vec<(String, Array1<T>, Array1<T>)>,
    ) -> Result<(Array4<T>, Option<Box<NormCache<T>>>)> {
        match self.norm_kind_for(name) {
            NormKind::Na => Ok((x, None)),
            NormKind::In => {
                let gamma = self.params.array1(&format!("{name}.gamma"))?;
                let beta = self.params.array1(&format!("{name}.beta"))?;
                if keep_cache {
                    let (y, cache) =
                        norm::instance_norm_train(&x, &gamma.view(), &beta.view(), self.eps());
                    Ok((y, Some(Box::new(cache))))
                } else {
                    Ok((
                        norm::instance_norm_eval(&x, &gamma.view(), &beta.view(), self.eps()),
                        None,
                    ))
                }
            }
            NormKind::Bn => {
                let gamma = self.params.array1(&format!("{name}.gamma"))?;
                let beta = self.params.array1(&format!("{name}.beta"))?;
                match mode {
                    Mode::Train => {
                        let (y, cache, mean, var) =
                            norm::batch_norm_train(&x, &gamma.view(), &beta.view(), self.eps());
                        updates.push((name.to_string(), mean, var));
                        Ok((y, keep_cache.then(|| Box::new(cache))))
                    }
                    Mode::Eval => {
                        let batches = self.params.array1(&format!("{name}.batches"))?;
                        if batches[0] <= T::zero() {
                            return Err(Error::NoRunningStats);
                        }
                        let mean = self.params.array1(&format!("{name}.running_mean"))?;
                        let var = self.params.array1(&format!("{name}.running_var"))?;
                        Ok((
                            norm::batch_norm_eval(
                                &x,
                                &gamma.view(),
                                &beta.view(),
                                &mean.view(),
                                &var.view(),
                                self.eps(),
                            ),
                            None,
                        ))
                    }
                }
            }
        }
    }

    fn apply_bn_updates(&mut self, updates: Vec<(String, Array1<T>, Array1<T>)>) -> Result<()> {
        let momentum = T::from(BN_MOMENTUM).unwrap();
        for (name, mean, var) in updates {
            {
                let p = self.params.get_mut(&format!("{name}.running_mean"))?;
                let mut view = p.value.view_mut().into_dimensionality::<Ix1>().unwrap();
                for (r, &b) in view.iter_mut().zip(mean.iter()) {
                    *r = (T::one() - momentum) * *r + momentum * b;
                }
            }
            {
                let p = self.params.get_mut(&format!("{name}.running_var"))?;
                let mut view = p.value.view_mut().into_dimensionality::<Ix1>().unwrap();
                for (r, &b) in view.iter_mut().zip(var.iter()) {
                    *r = (T::one() - momentum) * *r + momentum * b;
                }
            }
            let p = self.params.get_mut(&format!("{name}.batches"))?;
            let mut view = p.value.view_mut().into_dimensionality::<Ix1>().unwrap();
            view[0] = view[0] + T::one();
        }
        Ok(())
    }

    fn conv_forward(&self, name: &str, x: &Array4<T>, stride: usize, padding: usize) -> Result<Array4<T>> {
        let w = self.params.array4(&format!("{name}.weight"))?;
        let b = self.params.array1(&format!("{name}.bias"))?;
        Ok(layers::conv2d_forward(x, &w, Some(&b.view()), stride, padding))
    }

    fn tconv_forward(&self, name: &str, x: &Array4<T>, stride: usize, padding: usize) -> Result<Array4<T>> {
        let w = self.params.array4(&format!("{name}.weight"))?;
        let b = self.params.array1(&format!("{name}.bias"))?;
        Ok(layers::tconv2d_forward(x, &w, Some(&b.view()), stride, padding))
    }

    /// Run the encoder, returning the three skip taps and the bottleneck.
    fn encoder_forward(&self, x: &Array4<T>) -> Result<([Array4<T>; 3], Array4<T>)> {
        let taps = self.config.encoder_tap_indices()?;
        let mut cur = x.clone();
        let mut skips: [Option<Array4<T>>; 3] = [None, None, None];
        for (i, spec) in self.config.encoder.iter().enumerate() {
            match spec {
                LayerSpec::Conv {
                    name,
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let mut y = self.conv_forward(name, &cur, *stride, *padding)?;
                    activation.apply(&mut y);
                    cur = y;
                    if let Some(k) = taps.iter().position(|&t| t == i) {
                        skips[k] = Some(cur.clone());
                    }
                }
                LayerSpec::MaxPool { .. } => {
                    let (y, _) = layers::maxpool2_forward(&cur);
                    cur = y;
                }
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unsupported encoder entry {other:?}"
                    )))
                }
            }
        }
        let skips = skips.map(|s| s.expect("taps assigned during walk"));
        Ok((skips, cur))
    }

    fn check_spatial(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "network input must have 3 channels, got {c}"
            )));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "spatial size {h}x{w} must be a positive multiple of {DOWNSAMPLE}; pad first"
            )));
        }
        Ok(())
    }

    /// Inference forward pass: encoder-standardized batch in, Tanh batch out.
    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.forward_opts(x, &ForwardOptions::default())
    }

    pub fn forward_opts(&self, x: &Array4<T>, opts: &ForwardOptions) -> Result<Array4<T>> {
        self.check_spatial(x)?;
        let (skips, bottleneck) = self.encoder_forward(x)?;
        let mut updates = Vec::new();

        let mut normed_skips = Vec::with_capacity(3);
        for (i, s) in skips.iter().enumerate() {
            let s = if opts.zero_skips {
                Array4::zeros(s.dim())
            } else {
                s.clone()
            };
            let (y, _) = self.norm_forward(
                &format!("skip{}.norm", i + 1),
                s,
                opts.mode,
                false,
                &mut updates,
            )?;
            normed_skips.push(y);
        }

        let mut cur = bottleneck;
        for spec in &self.config.decoder {
            match spec {
                LayerSpec::Conv {
                    name,
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let mut y = self.conv_forward(name, &cur, *stride, *padding)?;
                    activation.apply(&mut y);
                    cur = y;
                }
                LayerSpec::TConv {
                    name,
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let mut y = self.tconv_forward(name, &cur, *stride, *padding)?;
                    activation.apply(&mut y);
                    cur = y;
                }
                LayerSpec::Norm { name, .. } => {
                    let (y, _) = self.norm_forward(name, cur, opts.mode, false, &mut updates)?;
                    cur = y;
                }
                LayerSpec::ConcatSkip { index } => {
                    cur = concat_channels(&cur, &normed_skips[*index]);
                }
                LayerSpec::MaxPool { .. } => {
                    return Err(Error::InvalidConfig("maxpool in decoder".into()))
                }
            }
        }
        Ok(cur)
    }

    /// Named post-activation outputs of the skip taps, the bottleneck, and
    /// every decoder conv/tconv, for inspection in tests.
    pub fn forward_trace(&self, x: &Array4<T>) -> Result<Vec<(String, Array4<T>)>> {
        self.check_spatial(x)?;
        let (skips, bottleneck) = self.encoder_forward(x)?;
        let mut updates = Vec::new();
        let mut trace = Vec::new();

        let mut normed_skips = Vec::with_capacity(3);
        for (i, s) in skips.iter().enumerate() {
            trace.push((format!("enc.skip{}", i + 1), s.clone()));
            let (y, _) = self.norm_forward(
                &format!("skip{}.norm", i + 1),
                s.clone(),
                Mode::Eval,
                false,
                &mut updates,
            )?;
            normed_skips.push(y);
        }
        trace.push(("enc.bottleneck".to_string(), bottleneck.clone()));

        let mut cur = bottleneck;
        for spec in &self.config.decoder {
            match spec {
                LayerSpec::Conv {
                    name,
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let mut y = self.conv_forward(name, &cur, *stride, *padding)?;
                    activation.apply(&mut y);
                    cur = y;
                    trace.push((name.clone(), cur.clone()));
                }
                LayerSpec::TConv {
                    name,
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let mut y = self.tconv_forward(name, &cur, *stride, *padding)?;
                    activation.apply(&mut y);
                    cur = y;
                    trace.push((name.clone(), cur.clone()));
                }
                LayerSpec::Norm { name, .. } => {
                    let (y, _) = self.norm_forward(name, cur, Mode::Eval, false, &mut updates)?;
                    cur = y;
                }
                LayerSpec::ConcatSkip { index } => {
                    cur = concat_channels(&cur, &normed_skips[*index]);
                }
                LayerSpec::MaxPool { .. } => unreachable!("validated"),
            }
        }
        Ok(trace)
    }

    /// Training-mode forward pass: caches everything the backward pass needs
    /// and updates batch-norm running statistics.
    pub fn forward_train(&mut self, x: &Array4<T>) -> Result<(Array4<T>, NetCache<T>)> {
        self.check_spatial(x)?;
        let (skips, bottleneck) = self.encoder_forward(x)?;
        let mut updates = Vec::new();

        let mut skip_caches: [Option<Box<NormCache<T>>>; 3] = [None, None, None];
        let mut normed_skips = Vec::with_capacity(3);
        for (i, s) in skips.iter().enumerate() {
            let (y, cache) = self.norm_forward(
                &format!("skip{}.norm", i + 1),
                s.clone(),
                Mode::Train,
                true,
                &mut updates,
            )?;
            skip_caches[i] = cache;
            normed_skips.push(y);
        }

        let decoder = self.config.decoder.clone();
        let mut dec = Vec::with_capacity(decoder.len());
        let mut cur = bottleneck;
        for spec in &decoder {
            match spec {
                LayerSpec::Conv {
                    name,
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let mut y = self.conv_forward(name, &cur, *stride, *padding)?;
                    activation.apply(&mut y);
                    dec.push(StageCache::Conv {
                        x: cur,
                        y_post: y.clone(),
                    });
                    cur = y;
                }
                LayerSpec::TConv {
                    name,
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let mut y = self.tconv_forward(name, &cur, *stride, *padding)?;
                    activation.apply(&mut y);
                    dec.push(StageCache::TConv {
                        x: cur,
                        y_post: y.clone(),
                    });
                    cur = y;
                }
                LayerSpec::Norm { name, .. } => {
                    let (y, cache) = self.norm_forward(name, cur, Mode::Train, true, &mut updates)?;
                    dec.push(match cache {
                        Some(c) => StageCache::Norm(c),
                        None => StageCache::NormIdentity,
                    });
                    cur = y;
                }
                LayerSpec::ConcatSkip { index } => {
                    let dec_channels = cur.dim().1;
                    cur = concat_channels(&cur, &normed_skips[*index]);
                    dec.push(StageCache::Concat {
                        dec_channels,
                        skip_index: *index,
                    });
                }
                LayerSpec::MaxPool { .. } => unreachable!("validated"),
            }
        }

        self.apply_bn_updates(updates)?;
        Ok((cur, NetCache { skip_caches, dec }))
    }

    /// Backward pass from the gradient on the Tanh output. Returns gradients
    /// for every trainable parameter; encoder tensors never appear.
    pub fn backward(&self, cache: &NetCache<T>, grad_output: &Array4<T>) -> Result<Gradients<T>> {
        let mut grads: Gradients<T> = BTreeMap::new();
        let mut grad = grad_output.clone();

        for (spec, stage) in self.config.decoder.iter().zip(cache.dec.iter()).rev() {
            match (spec, stage) {
                (
                    LayerSpec::Conv {
                        name,
                        kernel,
                        stride,
                        padding,
                        activation,
                        trainable,
                        ..
                    },
                    StageCache::Conv { x, y_post },
                ) => {
                    let g_pre = activation.backward(y_post, &grad);
                    if *trainable {
                        let gw =
                            layers::conv2d_backward_weight(x, &g_pre, *kernel, *stride, *padding);
                        let gb = layers::bias_grad(&g_pre);
                        grads.insert(format!("{name}.weight"), gw.into_dyn());
                        grads.insert(format!("{name}.bias"), gb.into_dyn());
                    }
                    let w = self.params.array4(&format!("{name}.weight"))?;
                    let (_, _, h, wd) = x.dim();
                    grad = layers::conv2d_backward_input(&g_pre, &w, (h, wd), *stride, *padding);
                }
                (
                    LayerSpec::TConv {
                        name,
                        kernel,
                        stride,
                        padding,
                        activation,
                        trainable,
                        ..
                    },
                    StageCache::TConv { x, y_post },
                ) => {
                    let g_pre = activation.backward(y_post, &grad);
                    if *trainable {
                        let gw =
                            layers::tconv2d_backward_weight(x, &g_pre, *kernel, *stride, *padding);
                        let gb = layers::bias_grad(&g_pre);
                        grads.insert(format!("{name}.weight"), gw.into_dyn());
                        grads.insert(format!("{name}.bias"), gb.into_dyn());
                    }
                    let w = self.params.array4(&format!("{name}.weight"))?;
                    grad = layers::tconv2d_backward_input(&g_pre, &w, *stride, *padding);
                }
                (LayerSpec::Norm { name, .. }, StageCache::Norm(c)) => {
                    let gamma = self.params.array1(&format!("{name}.gamma"))?;
                    let (gx, gg, gb) = norm::norm_backward(&grad, c, &gamma.view());
                    grads.insert(format!("{name}.gamma"), gg.into_dyn());
                    grads.insert(format!("{name}.beta"), gb.into_dyn());
                    grad = gx;
                }
                (LayerSpec::Norm { .. }, StageCache::NormIdentity) => {}
                (
                    LayerSpec::ConcatSkip { index },
                    StageCache::Concat {
                        dec_channels,
                        skip_index,
                    },
                ) => {
                    debug_assert_eq!(index, skip_index);
                    let (dec_grad, skip_grad) = split_channels(&grad, *dec_channels);
                    if let Some(c) = &cache.skip_caches[*skip_index] {
                        let name = format!("skip{}.norm", skip_index + 1);
                        let gamma = self.params.array1(&format!("{name}.gamma"))?;
                        let (_gx, gg, gb) = norm::norm_backward(&skip_grad, c, &gamma.view());
                        grads.insert(format!("{name}.gamma"), gg.into_dyn());
                        grads.insert(format!("{name}.beta"), gb.into_dyn());
                        // The encoder is frozen; gradients into skip features
                        // stop here.
                    }
                    grad = dec_grad;
                }
                _ => {
                    return Err(Error::Other(
                        "decoder cache out of sync with layer table".into(),
                    ))
                }
            }
        }
        Ok(grads)
    }

    /// Feature tap used by the perceptual loss: encoder prefix through the
    /// first convolution of `block` (post-ReLU). Input is an
    /// encoder-standardized batch.
    pub fn perceptual_features(&self, x: &Array4<T>, block: usize) -> Result<Array4<T>> {
        let (out, _) = self.perceptual_prefix(x, block, false)?;
        Ok(out)
    }

    /// Vector-Jacobian product of [`Model::perceptual_features`] with respect
    /// to its input.
    pub fn perceptual_features_vjp(
        &self,
        x: &Array4<T>,
        block: usize,
        grad_features: &Array4<T>,
    ) -> Result<Array4<T>> {
        let (_, caches) = self.perceptual_prefix(x, block, true)?;
        let caches = caches.expect("caches requested");
        let mut grad = grad_features.clone();
        for stage in caches.into_iter().rev() {
            match stage {
                PrefixCache::Conv {
                    name,
                    x,
                    y_post,
                    stride,
                    padding,
                    activation,
                } => {
                    let g_pre = activation.backward(&y_post, &grad);
                    let w = self.params.array4(&format!("{name}.weight"))?;
                    let (_, _, h, wd) = x.dim();
                    grad = layers::conv2d_backward_input(&g_pre, &w, (h, wd), stride, padding);
                }
                PrefixCache::Pool { argmax, input_hw } => {
                    grad = layers::maxpool2_backward(&grad, &argmax, input_hw);
                }
            }
        }
        Ok(grad)
    }

    fn perceptual_prefix(
        &self,
        x: &Array4<T>,
        block: usize,
        keep: bool,
    ) -> Result<(Array4<T>, Option<Vec<PrefixCache<T>>>)> {
        if !(1..=3).contains(&block) {
            return Err(Error::InvalidArgument(format!(
                "perceptual tap block must be 1..=3, got {block}"
            )));
        }
        let taps = self.config.encoder_tap_indices()?;
        let stop = taps[block - 1];
        let mut caches = keep.then(Vec::new);
        let mut cur = x.clone();
        for (i, spec) in self.config.encoder.iter().enumerate() {
            match spec {
                LayerSpec::Conv {
                    name,
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let mut y = self.conv_forward(name, &cur, *stride, *padding)?;
                    activation.apply(&mut y);
                    if let Some(cs) = caches.as_mut() {
                        cs.push(PrefixCache::Conv {
                            name: name.clone(),
                            x: cur,
                            y_post: y.clone(),
                            stride: *stride,
                            padding: *padding,
                            activation: *activation,
                        });
                    }
                    cur = y;
                }
                LayerSpec::MaxPool { .. } => {
                    let (y, argmax) = layers::maxpool2_forward(&cur);
                    if let Some(cs) = caches.as_mut() {
                        cs.push(PrefixCache::Pool {
                            argmax,
                            input_hw: (cur.dim().2, cur.dim().3),
                        });
                    }
                    cur = y;
                }
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unsupported encoder entry {other:?}"
                    )))
                }
            }
            if i == stop {
                break;
            }
        }
        Ok((cur, caches))
    }

    /// SHA-256 over the encoder parameter bytes, for freeze checks.
    pub fn encoder_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in self.params.iter() {
            if name.starts_with("enc.") {
                hasher.update(name.as_bytes());
                for v in p.value.iter() {
                    hasher.update(v.to_f64().unwrap().to_le_bytes());
                }
            }
        }
        hex_string(&hasher.finalize())
    }
}

enum PrefixCache<T> {
    Conv {
        name: String,
        x: Array4<T>,
        y_post: Array4<T>,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    Pool {
        argmax: Array4<u8>,
        input_hw: (usize, usize),
    },
}

fn concat_channels<T: NdFloat>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    let (n, ca, h, w) = a.dim();
    let cb = b.dim().1;
    debug_assert_eq!((a.dim().0, a.dim().2, a.dim().3), (b.dim().0, b.dim().2, b.dim().3));
    let mut out = Array4::zeros((n, ca + cb, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    out
}

fn split_channels<T: NdFloat>(x: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    let a = x.slice(ndarray::s![.., ..first, .., ..]).to_owned();
    let b = x.slice(ndarray::s![.., first.., .., ..]).to_owned();
    (a, b)
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Model<f32> {
    /// Dehaze one RGB image of arbitrary size: reflect-pad to the next
    /// multiple of 8, standardize, run the network, map back to `[0, 1]`,
    /// and crop to the original size.
    pub fn dehaze_image(&self, img: &ImageTensor) -> Result<ImageTensor> {
        if !img.is_rgb() {
            return Err(Error::ShapeMismatch("dehaze expects an RGB image".into()));
        }
        let (h, w) = (img.height(), img.width());
        if h < 16 || w < 16 {
            return Err(Error::ShapeMismatch(format!(
                "image {h}x{w} too small, need at least 16x16"
            )));
        }
        let padded = reflect_pad_to_multiple(img, DOWNSAMPLE);
        let ms = image_io::to_model_space(&padded, image_io::ENCODER_MEAN, image_io::ENCODER_STD)?;
        let (c, ph, pw) = ms.data.dim();
        let batch = ms
            .data
            .into_shape_with_order((1, c, ph, pw))
            .expect("batch of one");
        let out = self.forward(&batch)?;
        let out3 = out.index_axis(Axis(0), 0).to_owned();
        let restored = image_io::from_model_space(&ModelSpaceTensor {
            data: out3,
            space: ModelSpace::TanhRange,
        })?;
        let cropped = restored.data.slice(ndarray::s![.., ..h, ..w]).to_owned();
        ImageTensor::new(cropped)
    }

    /// Serialize config plus every tensor (including batch-norm statistics).
    pub fn save_checkpoint(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let mut archive = WeightArchive::new(meta);
        archive.config = Some(self.config.clone());
        for (name, p) in self.params.iter() {
            archive.tensors.insert(
                name.to_string(),
                TensorData {
                    shape: p.value.shape().to_vec(),
                    data: p.value.iter().cloned().collect(),
                },
            );
        }
        archive.save(path)
    }

    /// Load a checkpoint written by [`Model::save_checkpoint`].
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
        let archive = WeightArchive::load(&path)?;
        let config = archive.config.clone().ok_or_else(|| {
            Error::MalformedArchive("checkpoint is missing its model config".into())
        })?;
        config.validate()?;
        let mut model = build_model(config, WeightInit::Random { seed: 0 })?;
        let names: Vec<String> = model.params.names().map(String::from).collect();
        for name in names {
            let t = archive.tensor(&name)?;
            let expected = model.params.get(&name)?.value.shape().to_vec();
            if t.shape != expected {
                return Err(Error::TensorShape {
                    name,
                    expected,
                    found: t.shape.clone(),
                });
            }
            model.params.get_mut(&name)?.value = t.to_dyn_array()?;
        }
        Ok(model)
    }
}

/// Reflect-pad (mirror without repeating the edge) bottom/right so both
/// spatial sizes become multiples of `m`.
pub fn reflect_pad_to_multiple(img: &ImageTensor, m: usize) -> ImageTensor {
    let (c, h, w) = img.data.dim();
    let nh = h.div_ceil(m) * m;
    let nw = w.div_ceil(m) * m;
    if nh == h && nw == w {
        return img.clone();
    }
    let mut out = ndarray::Array3::zeros((c, nh, nw));
    for ci in 0..c {
        for y in 0..nh {
            let sy = mirror_index(y, h);
            for x in 0..nw {
                let sx = mirror_index(x, w);
                out[[ci, y, x]] = img.data[[ci, sy, sx]];
            }
        }
    }
    ImageTensor::new(out).expect("padded image is valid")
}

fn mirror_index(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        // i = n + k reflects to n - 2 - k (mirror about the last sample).
        let k = i - n;
        n.saturating_sub(2 + k).min(n - 1)
    }
}
