//! The skip-layer FCN: a VGG-style backbone, two convolutionalised FC layers,
//! six 1x1 prediction heads (after each pooling layer and after fc7), per-head
//! learnable upsampling back to input resolution, channel concatenation of the
//! six 2-channel maps and a final 1x1 fusion classifier.

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::ops::{self, ConvSpec, DeconvSpec};
use crate::tensor::{gaussian_init, Scalar, Shape, Tensor};

pub const STAGE_COUNT: usize = 5;
pub const HEAD_COUNT: usize = 6;
pub const INPUT_MULTIPLE: usize = 32;
pub const INPUT_CHANNELS: usize = 3;

/// Upsampling factor per head, in tap order.
pub const UPSAMPLE_FACTORS: [usize; HEAD_COUNT] = [2, 4, 8, 16, 32, 32];

/// Lesion class index; skin is 0.
pub const LESION: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureConfig {
    /// Output channels of each 3x3 conv, grouped by pooling stage.
    pub stage_widths: Vec<Vec<usize>>,
    /// fc6 (7x7, pad 3) and fc7 (1x1) widths.
    pub fc_widths: [usize; 2],
    pub num_classes: usize,
    pub head_count: usize,
    pub input_multiple: usize,
}

impl ArchitectureConfig {
    /// VGG-16 widths.
    pub fn canonical() -> Self {
        Self::with_widths(
            vec![vec![64, 64], vec![128, 128], vec![256, 256, 256], vec![512, 512, 512], vec![512, 512, 512]],
            [4096, 4096],
        )
    }

    /// Same topology with widths small enough to train on a laptop core.
    pub fn desk() -> Self {
        Self::with_widths(
            vec![vec![4, 4], vec![8, 8], vec![8, 8, 8], vec![16, 16, 16], vec![16, 16, 16]],
            [32, 32],
        )
    }

    /// Width-2 backbone used for end-to-end gradient checks.
    pub fn micro() -> Self {
        Self::with_widths(
            vec![vec![2, 2], vec![2, 2], vec![2, 2, 2], vec![2, 2, 2], vec![2, 2, 2]],
            [4, 4],
        )
    }

    pub fn with_widths(stage_widths: Vec<Vec<usize>>, fc_widths: [usize; 2]) -> Self {
        ArchitectureConfig {
            stage_widths,
            fc_widths,
            num_classes: 2,
            head_count: HEAD_COUNT,
            input_multiple: INPUT_MULTIPLE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != STAGE_COUNT {
            return Err(Error::Config(format!(
                "expected {STAGE_COUNT} stages, got {}",
                self.stage_widths.len()
            )));
        }
        for (s, widths) in self.stage_widths.iter().enumerate() {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::Config(format!("stage {} has empty or zero-width convs", s + 1)));
            }
        }
        if self.fc_widths.contains(&0) {
            return Err(Error::Config("fc widths must be positive".into()));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(format!("binary segmentation needs 2 classes, got {}", self.num_classes)));
        }
        if self.head_count != HEAD_COUNT {
            return Err(Error::Config(format!("head count must be {HEAD_COUNT}, got {}", self.head_count)));
        }
        if self.input_multiple != INPUT_MULTIPLE {
            return Err(Error::Config(format!(
                "input multiple must be {INPUT_MULTIPLE}, got {}",
                self.input_multiple
            )));
        }
        Ok(())
    }

    /// Channels entering each head, in tap order.
    pub fn head_inputs(&self) -> [usize; HEAD_COUNT] {
        let mut c = [0; HEAD_COUNT];
        for (s, widths) in self.stage_widths.iter().enumerate().take(STAGE_COUNT) {
            c[s] = *widths.last().unwrap_or(&0);
        }
        c[STAGE_COUNT] = self.fc_widths[1];
        c
    }

    pub fn fused_channels(&self) -> usize {
        self.head_count * self.num_classes
    }

    /// Number of weighted layers (convs, heads, deconvs, fusion).
    pub fn layer_count(&self) -> usize {
        let backbone: usize = self.stage_widths.iter().map(Vec::len).sum();
        backbone + 2 + 2 * self.head_count + 1
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    spec: ConvSpec,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct DeconvLayer {
    spec: DeconvSpec,
    weight: ParamId,
}

/// Deconvolution initialisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UpsampleInit {
    #[default]
    Gaussian,
    Bilinear,
}

#[derive(Clone, Debug)]
pub struct FcnModel<T: Scalar> {
    config: ArchitectureConfig,
    params: ParamSet<T>,
    stages: Vec<Vec<ConvLayer>>,
    fc: [ConvLayer; 2],
    heads: Vec<ConvLayer>,
    ups: Vec<DeconvLayer>,
    fuse: ConvLayer,
    /// Per-channel RGB means subtracted from raw 0-255 input.
    pub means: [f32; 3],
}

/// Values recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Head outputs before upsampling, in tap order.
    pub heads: Vec<Var>,
    pub upsampled: Vec<Var>,
    pub fused: Var,
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Deterministic per-layer seed derived from the model seed.
fn layer_seed(seed: u64, layer: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ layer.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

struct Builder<'a, T: Scalar> {
    params: &'a mut ParamSet<T>,
    seed: u64,
    layer: u64,
}

impl<T: Scalar> Builder<'_, T> {
    fn next_seed(&mut self) -> u64 {
        self.layer += 1;
        layer_seed(self.seed, self.layer)
    }

    fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<ConvLayer> {
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let w = gaussian_init(spec.weight_shape(), he_std(fan_in), self.next_seed())?;
        let weight = self.params.add(format!("{name}.weight"), w, 4)?;
        let bias = self.params.add(format!("{name}.bias"), Tensor::zeros(spec.bias_shape()), 1)?;
        Ok(ConvLayer { spec, weight, bias })
    }

    fn deconv(&mut self, name: &str, spec: DeconvSpec, init: UpsampleInit) -> Result<DeconvLayer> {
        let seed = self.next_seed();
        let w = match init {
            UpsampleInit::Gaussian => gaussian_init(spec.weight_shape(), he_std(spec.kernel() * spec.kernel()), seed)?,
            UpsampleInit::Bilinear => ops::bilinear_weight(&spec)?,
        };
        let weight = self.params.add(format!("{name}.weight"), w, 4)?;
        Ok(DeconvLayer { spec, weight })
    }
}

impl<T: Scalar> FcnModel<T> {
    /// Builds and initialises every layer with Gaussian weights
    /// (std `sqrt(2 / fan_in)`) and zero biases.
    pub fn build(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        Self::build_with(config, seed, UpsampleInit::Gaussian)
    }

    pub fn build_with(config: ArchitectureConfig, seed: u64, up_init: UpsampleInit) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut b = Builder {
            params: &mut params,
            seed,
            layer: 0,
        };

        let mut in_c = INPUT_CHANNELS;
        let mut stages = Vec::with_capacity(STAGE_COUNT);
        for (s, widths) in config.stage_widths.iter().enumerate() {
            let mut layers = Vec::with_capacity(widths.len());
            for (k, &out_c) in widths.iter().enumerate() {
                let name = format!("stage{}.conv{}", s + 1, k + 1);
                layers.push(b.conv(&name, ConvSpec::square(in_c, out_c, 3, 1))?);
                in_c = out_c;
            }
            stages.push(layers);
        }
        let fc6 = b.conv("fc6", ConvSpec::square(in_c, config.fc_widths[0], 7, 3))?;
        let fc7 = b.conv("fc7", ConvSpec::square(config.fc_widths[0], config.fc_widths[1], 1, 0))?;

        let classes = config.num_classes;
        let mut heads = Vec::with_capacity(HEAD_COUNT);
        let mut ups = Vec::with_capacity(HEAD_COUNT);
        for (i, &head_in) in config.head_inputs().iter().enumerate() {
            heads.push(b.conv(&format!("head{}", i + 1), ConvSpec::square(head_in, classes, 1, 0))?);
        }
        for (i, &f) in UPSAMPLE_FACTORS.iter().enumerate() {
            ups.push(b.deconv(&format!("up{}", i + 1), DeconvSpec::new(classes, f)?, up_init)?);
        }
        let fuse = b.conv("fuse", ConvSpec::square(config.fused_channels(), classes, 1, 0))?;

        Ok(FcnModel {
            config,
            params,
            stages,
            fc: [fc6, fc7],
            heads,
            ups,
            fuse,
            means: [0.0; 3],
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Parameter names of the backbone and fc layers, in build order.
    pub fn backbone_names(&self) -> Vec<String> {
        self.stages
            .iter()
            .flatten()
            .chain(self.fc.iter())
            .flat_map(|l| [l.weight, l.bias])
            .map(|id| self.params.get(id).name().to_string())
            .collect()
    }

    fn conv(&self, tape: &mut Tape<T>, x: Var, layer: &ConvLayer) -> Result<Var> {
        let w = tape.param(&self.params, layer.weight);
        let b = tape.param(&self.params, layer.bias);
        ops::conv2d(tape, x, w, Some(b), &layer.spec)
    }

    /// Runs the network on an already normalised `(n, 3, h, w)` batch.
    /// Whether the pass supports `backward` follows the tape's recording mode.
    pub fn forward(&self, tape: &mut Tape<T>, batch: Tensor<T>) -> Result<ForwardOutput> {
        let s = batch.shape();
        if s.c != INPUT_CHANNELS {
            return Err(Error::shape(format!("expected {INPUT_CHANNELS} input channels, got {}", s.c)));
        }
        let m = self.config.input_multiple;
        if s.h % m != 0 || s.w % m != 0 {
            return Err(Error::shape(format!(
                "input {}x{} is not a multiple of {m}; pad before the forward pass",
                s.h, s.w
            )));
        }

        let mut x = tape.constant(batch);
        let mut taps = Vec::with_capacity(HEAD_COUNT);
        for stage in &self.stages {
            for layer in stage {
                let y = self.conv(tape, x, layer)?;
                x = ops::relu(tape, y)?;
            }
            x = ops::maxpool2(tape, x)?;
            taps.push(x);
        }
        for layer in &self.fc {
            let y = self.conv(tape, x, layer)?;
            x = ops::relu(tape, y)?;
        }
        taps.push(x);

        let mut heads = Vec::with_capacity(HEAD_COUNT);
        let mut upsampled = Vec::with_capacity(HEAD_COUNT);
        for ((&tap, head), up) in taps.iter().zip(&self.heads).zip(&self.ups) {
            let h = self.conv(tape, tap, head)?;
            let k = tape.param(&self.params, up.weight);
            let u = ops::transposed_conv2d(tape, h, k, &up.spec)?;
            heads.push(h);
            upsampled.push(u);
        }
        let fused = ops::concat_channels(tape, &upsampled)?;
        let logits = self.conv(tape, fused, &self.fuse)?;
        Ok(ForwardOutput {
            logits,
            heads,
            upsampled,
            fused,
        })
    }

    /// Logits for a normalised batch without recording backward rules.
    pub fn infer(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, batch)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Per-pixel argmax over the two class channels; the lesion class wins ties.
pub fn predict_mask<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<BinaryMask>> {
    let s = logits.shape();
    if s.c != 2 {
        return Err(Error::shape(format!("predict_mask expects 2 channels, got {}", s.c)));
    }
    (0..s.n)
        .map(|n| {
            let skin = logits.plane(n, 0);
            let lesion = logits.plane(n, LESION);
            let data = skin.iter().zip(lesion).map(|(a, b)| (b >= a) as u8).collect();
            BinaryMask::new(s.h, s.w, data)
        })
        .collect()
}

/// Spatial size of each head before upsampling for an `h x w` input.
pub fn head_sizes(h: usize, w: usize) -> [(usize, usize); HEAD_COUNT] {
    let mut sizes = [(0, 0); HEAD_COUNT];
    for (i, f) in UPSAMPLE_FACTORS.iter().enumerate() {
        sizes[i] = (h / f, w / f);
    }
    sizes
}

/// Shape of the input batch expected for `n` images of size `h x w`.
pub fn input_shape(n: usize, h: usize, w: usize) -> Result<Shape> {
    Shape::new(n, INPUT_CHANNELS, h, w)
}
