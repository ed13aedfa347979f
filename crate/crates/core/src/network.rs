//! The per-stage feed-forward network (four conv pairs with pooling, a shared
//! dense layer and twin landmark/emotion heads), the inter-stage connection
//! layer, and the multi-stage shape composition.
//!
//! Arithmetic is f64 throughout. Convolutions are 3x3, stride 1, padding 1,
//! realized as im2col + GEMM; pooling is 2x2 max with stride 2.

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{generate_landmark_heatmap, warp_image_to, Heatmap, SimilarityTransform};
use crate::interp::{bilinear_resize, bilinear_resize_backward};
use crate::types::{
    EmotionDistribution, EmotionScheme, Frame, GrayImage, LandmarkSet, NUM_LANDMARKS,
};

/// Names of the eight convolution layers, in forward order.
pub const CONV_NAMES: [&str; 8] = [
    "conv1a", "conv1b", "conv2a", "conv2b", "conv3a", "conv3b", "conv4a", "conv4b",
];

/// Structural dimensions of one stage. The default profile is the full-size
/// network; smaller profiles keep the same topology for desk-scale runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    /// Side of the square single-channel input.
    pub input_size: usize,
    /// Output channels of the four conv blocks.
    pub channels: [usize; 4],
    /// Width of the shared fully connected layer.
    pub fc1_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ArchConfig {
    /// The full-size profile: 224x224 input, channels 64/128/256/512, fc1 256.
    pub fn full() -> Self {
        Self {
            input_size: 224,
            channels: [64, 128, 256, 512],
            fc1_size: 256,
        }
    }

    /// A small profile for tests and desk-scale experiments.
    pub fn compact(input_size: usize, channels: [usize; 4], fc1_size: usize) -> Self {
        Self {
            input_size,
            channels,
            fc1_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 4 {
            return Err(Error::Config(format!(
                "input size {} too small for four pooling steps",
                self.input_size
            )));
        }
        if self.channels.contains(&0) || self.fc1_size == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.pooled_sizes()[4] == 0 {
            return Err(Error::Config(format!(
                "input size {} collapses to zero after pooling",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Spatial side before each block and after the final pool:
    /// `[s, s/2, s/4, s/8, s/16]` with floor division.
    pub fn pooled_sizes(&self) -> [usize; 5] {
        let mut s = [self.input_size; 5];
        for i in 1..5 {
            s[i] = s[i - 1] / 2;
        }
        s
    }

    /// Side of the connection layer's feature image before upsampling.
    pub fn connection_side(&self) -> usize {
        (self.input_size / 4).max(1)
    }

    /// Flattened input width of fc1.
    pub fn fc1_input(&self) -> usize {
        let s = self.pooled_sizes()[4];
        self.channels[3] * s * s
    }
}

/// 3x3 convolution parameters; weight layout (out, in, 3, 3).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

/// Fully connected parameters; weight layout (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }
}

/// Parameters of one cascade stage. `connection` produces this stage's input
/// feature image from the previous stage's shared features; the first stage
/// has none.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub convs: Vec<ConvLayer>,
    pub fc1: Linear,
    pub fc2_landmark: Linear,
    pub fc2_emotion: Linear,
    pub connection: Option<Linear>,
}

/// Gradient accumulators share the parameter layout.
pub type StageGrads = StageParams;

impl StageParams {
    fn init(
        arch: &ArchConfig,
        classes: usize,
        with_connection: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let he_conv = |cout: usize, cin: usize, rng: &mut ChaCha8Rng| -> ConvLayer {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            ConvLayer {
                weight: Array4::from_shape_fn((cout, cin, 3, 3), |_| normal.sample(rng)),
                bias: Array1::zeros(cout),
            }
        };
        let he_fc = |out: usize, inp: usize, rng: &mut ChaCha8Rng| -> Linear {
            let std = (2.0 / inp as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            Linear {
                weight: Array2::from_shape_fn((out, inp), |_| normal.sample(rng)),
                bias: Array1::zeros(out),
            }
        };

        let [c1, c2, c3, c4] = arch.channels;
        let plan = [
            (c1, 1),
            (c1, c1),
            (c2, c1),
            (c2, c2),
            (c3, c2),
            (c3, c3),
            (c4, c3),
            (c4, c4),
        ];
        let convs = plan
            .iter()
            .map(|&(cout, cin)| he_conv(cout, cin, rng))
            .collect();
        let fc1 = he_fc(arch.fc1_size, arch.fc1_input(), rng);
        let fc2_landmark = he_fc(2 * NUM_LANDMARKS, arch.fc1_size, rng);
        let fc2_emotion = he_fc(classes, arch.fc1_size, rng);
        let connection = with_connection.then(|| {
            let side = arch.connection_side();
            he_fc(side * side, arch.fc1_size, rng)
        });
        Self {
            convs,
            fc1,
            fc2_landmark,
            fc2_emotion,
            connection,
        }
    }

    /// Zero-filled gradients/velocity with the same layout.
    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self
                .convs
                .iter()
                .map(|c| ConvLayer {
                    weight: Array4::zeros(c.weight.raw_dim()),
                    bias: Array1::zeros(c.bias.raw_dim()),
                })
                .collect(),
            fc1: zero_linear(&self.fc1),
            fc2_landmark: zero_linear(&self.fc2_landmark),
            fc2_emotion: zero_linear(&self.fc2_emotion),
            connection: self.connection.as_ref().map(zero_linear),
        }
    }

    /// Flat views of every tensor, in a fixed order shared with
    /// [`Self::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.push(c.weight.as_slice().expect("standard layout"));
            v.push(c.bias.as_slice().expect("standard layout"));
        }
        for l in [&self.fc1, &self.fc2_landmark, &self.fc2_emotion] {
            v.push(l.weight.as_slice().expect("standard layout"));
            v.push(l.bias.as_slice().expect("standard layout"));
        }
        if let Some(conn) = &self.connection {
            v.push(conn.weight.as_slice().expect("standard layout"));
            v.push(conn.bias.as_slice().expect("standard layout"));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.push(c.weight.as_slice_mut().expect("standard layout"));
            v.push(c.bias.as_slice_mut().expect("standard layout"));
        }
        for l in [&mut self.fc1, &mut self.fc2_landmark, &mut self.fc2_emotion] {
            v.push(l.weight.as_slice_mut().expect("standard layout"));
            v.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        if let Some(conn) = &mut self.connection {
            v.push(conn.weight.as_slice_mut().expect("standard layout"));
            v.push(conn.bias.as_slice_mut().expect("standard layout"));
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Deterministic evaluation-mode forward pass.
    pub fn forward(&self, input: &StageInput) -> Result<StageOutput> {
        Ok(self.forward_traced(input)?.0)
    }

    /// Evaluation-mode forward pass keeping the activation trace.
    pub fn forward_traced(&self, input: &StageInput) -> Result<(StageOutput, StageTrace)> {
        stage_forward_impl(self, input.view(), None, None)
    }

    /// Training-mode forward pass: dropout with probability `dropout_p` after
    /// every pooling layer, inverted scaling, masks recorded in the trace.
    pub fn forward_training(
        &self,
        input: &StageInput,
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(StageOutput, StageTrace)> {
        stage_forward_impl(self, input.view(), Some((dropout_p, rng)), None)
    }

    pub(crate) fn forward_view(
        &self,
        input: StageInputView<'_>,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(StageOutput, StageTrace)> {
        stage_forward_impl(self, input, dropout, None)
    }
}

fn zero_linear(l: &Linear) -> Linear {
    Linear {
        weight: Array2::zeros(l.weight.raw_dim()),
        bias: Array1::zeros(l.bias.raw_dim()),
    }
}

/// The three inputs of a stage. A missing feature image (first stage) is
/// treated as zeros.
#[derive(Debug, Clone)]
pub struct StageInput {
    pub warped_image: GrayImage,
    pub heatmap: Heatmap,
    pub feature_image: Option<Array2<f64>>,
}

impl StageInput {
    pub(crate) fn view(&self) -> StageInputView<'_> {
        StageInputView {
            warped_image: &self.warped_image,
            heatmap: &self.heatmap,
            feature_image: self.feature_image.as_ref(),
        }
    }
}

/// Borrowed form of [`StageInput`] so training loops can reuse precomputed
/// inputs without cloning them.
#[derive(Clone, Copy)]
pub(crate) struct StageInputView<'a> {
    pub warped_image: &'a GrayImage,
    pub heatmap: &'a Heatmap,
    pub feature_image: Option<&'a Array2<f64>>,
}

/// Raw outputs of one stage.
#[derive(Debug, Clone)]
pub struct StageOutput {
    /// Landmark update in the canonical frame, 136 interleaved coordinates.
    pub landmark_delta: Vec<f64>,
    /// Raw emotion logits; softmax is applied by the loss and at inference.
    pub emotion_logits: Vec<f64>,
    /// Shared fc1 features feeding the next stage's connection layer.
    pub shared_features: Vec<f64>,
}

/// Activations recorded during a forward pass, enough to backpropagate
/// without recomputation (im2col buffers are rebuilt on demand).
pub struct StageTrace {
    pub(crate) combined: Array3<f64>,
    pub(crate) conv_out: Vec<Array3<f64>>,
    pub(crate) pool_idx: Vec<Array3<usize>>,
    pub(crate) post_drop: Vec<Array3<f64>>,
    pub(crate) drop_mask: Option<Vec<Array3<f64>>>,
    pub(crate) fc1_in: Array1<f64>,
    pub(crate) fc1_out: Array1<f64>,
}

impl StageTrace {
    /// Post-activation feature maps of a convolution layer, by index into
    /// [`CONV_NAMES`].
    pub fn conv_activation(&self, index: usize) -> &Array3<f64> {
        &self.conv_out[index]
    }
}

/// One row of the layer-by-layer shape audit; shapes are (height, width,
/// channels).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: &'static str,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
    pub kernel: Option<(usize, usize)>,
    pub stride: Option<usize>,
}

fn stage_forward_impl(
    params: &StageParams,
    input: StageInputView<'_>,
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    mut audit: Option<&mut Vec<LayerShape>>,
) -> Result<(StageOutput, StageTrace)> {
    let h = input.warped_image.height();
    let w = input.warped_image.width();
    if h != w {
        return Err(Error::Shape {
            layer: "conv1a".into(),
            details: format!("expected a square input, got {h}x{w}"),
        });
    }
    if input.heatmap.size() != (h, w) {
        return Err(Error::Shape {
            layer: "conv1a".into(),
            details: format!(
                "heatmap size {:?} does not match image size ({h}, {w})",
                input.heatmap.size()
            ),
        });
    }
    if let Some(f) = input.feature_image {
        if f.dim() != (h, w) {
            return Err(Error::Shape {
                layer: "conv1a".into(),
                details: format!(
                    "feature image size {:?} does not match image size ({h}, {w})",
                    f.dim()
                ),
            });
        }
    }

    // The stage body consumes a single channel: the three inputs are summed.
    let mut combined = Array2::zeros((h, w));
    combined += input.warped_image.pixels();
    combined += input.heatmap.values();
    if let Some(f) = input.feature_image {
        combined += f;
    }
    let combined = combined.insert_axis(Axis(0));

    let mut conv_out: Vec<Array3<f64>> = Vec::with_capacity(8);
    let mut pool_idx = Vec::with_capacity(4);
    let mut post_drop = Vec::with_capacity(4);
    let mut drop_mask: Option<Vec<Array3<f64>>> = dropout.is_some().then(Vec::new);

    let mut x = combined.clone();
    for block in 0..4 {
        for half in 0..2 {
            let k = 2 * block + half;
            let layer = &params.convs[k];
            let expected_cin = layer.weight.dim().1;
            if x.dim().0 != expected_cin {
                return Err(Error::Shape {
                    layer: CONV_NAMES[k].into(),
                    details: format!(
                        "expected {} input channels, got {}",
                        expected_cin,
                        x.dim().0
                    ),
                });
            }
            let in_shape = hwc(&x);
            let mut y = conv3x3_forward(&x, layer);
            relu_inplace(&mut y);
            if let Some(rows) = audit.as_deref_mut() {
                rows.push(LayerShape {
                    name: CONV_NAMES[k],
                    input: in_shape,
                    output: hwc(&y),
                    kernel: Some((3, 3)),
                    stride: Some(1),
                });
            }
            conv_out.push(y.clone());
            x = y;
        }
        let in_shape = hwc(&x);
        let (pooled, idx) = maxpool2x2(&x);
        if let Some(rows) = audit.as_deref_mut() {
            rows.push(LayerShape {
                name: ["pool1", "pool2", "pool3", "pool4"][block],
                input: in_shape,
                output: hwc(&pooled),
                kernel: Some((2, 2)),
                stride: Some(2),
            });
        }
        pool_idx.push(idx);
        let dropped = match dropout.as_mut() {
            Some((p, rng)) => {
                let mask = dropout_mask(pooled.raw_dim(), *p, rng);
                let out = &pooled * &mask;
                drop_mask.as_mut().expect("mask vec present").push(mask);
                out
            }
            None => pooled,
        };
        post_drop.push(dropped.clone());
        x = dropped;
    }

    let (c4, ph, pw) = x.dim();
    let flat_len = c4 * ph * pw;
    if flat_len != params.fc1.weight.dim().1 {
        return Err(Error::Shape {
            layer: "fc1".into(),
            details: format!(
                "flattened input has {} values, fc1 expects {}",
                flat_len,
                params.fc1.weight.dim().1
            ),
        });
    }
    let fc1_in = x
        .into_shape_with_order(flat_len)
        .expect("contiguous activation");
    let mut fc1_out = params.fc1.forward(&fc1_in);
    fc1_out.mapv_inplace(|v| v.max(0.0));
    if let Some(rows) = audit.as_deref_mut() {
        rows.push(LayerShape {
            name: "fc1",
            input: (ph, pw, c4),
            output: (1, 1, fc1_out.len()),
            kernel: None,
            stride: None,
        });
    }

    let delta = params.fc2_landmark.forward(&fc1_out);
    let logits = params.fc2_emotion.forward(&fc1_out);
    if let Some(rows) = audit {
        rows.push(LayerShape {
            name: "fc2_landmark",
            input: (1, 1, fc1_out.len()),
            output: (1, 1, delta.len()),
            kernel: None,
            stride: None,
        });
        rows.push(LayerShape {
            name: "fc2_emotion",
            input: (1, 1, fc1_out.len()),
            output: (1, 1, logits.len()),
            kernel: None,
            stride: None,
        });
    }

    let output = StageOutput {
        landmark_delta: delta.to_vec(),
        emotion_logits: logits.to_vec(),
        shared_features: fc1_out.to_vec(),
    };
    let trace = StageTrace {
        combined,
        conv_out,
        pool_idx,
        post_drop,
        drop_mask,
        fc1_in,
        fc1_out,
    };
    Ok((output, trace))
}

fn hwc(x: &Array3<f64>) -> (usize, usize, usize) {
    let (c, h, w) = x.dim();
    (h, w, c)
}

/// Backpropagates head gradients through one stage, producing parameter
/// gradients and the gradient with respect to the combined single-channel
/// input (image + heatmap + feature image).
pub(crate) fn stage_backward(
    params: &StageParams,
    trace: &StageTrace,
    d_delta: &Array1<f64>,
    d_logits: &Array1<f64>,
) -> (StageGrads, Array2<f64>) {
    let mut grads = params.zeros_like();

    grads.fc2_landmark.weight = outer(d_delta, &trace.fc1_out);
    grads.fc2_landmark.bias = d_delta.clone();
    grads.fc2_emotion.weight = outer(d_logits, &trace.fc1_out);
    grads.fc2_emotion.bias = d_logits.clone();

    let mut d_fc1 =
        params.fc2_landmark.weight.t().dot(d_delta) + params.fc2_emotion.weight.t().dot(d_logits);
    for (d, &a) in d_fc1.iter_mut().zip(trace.fc1_out.iter()) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }
    grads.fc1.weight = outer(&d_fc1, &trace.fc1_in);
    grads.fc1.bias = d_fc1.clone();

    let d_flat = params.fc1.weight.t().dot(&d_fc1);
    let last_dim = trace.post_drop[3].raw_dim();
    let mut d = d_flat
        .into_shape_with_order(last_dim)
        .expect("flat gradient reshapes to the pooled volume");

    for block in (0..4).rev() {
        if let Some(masks) = &trace.drop_mask {
            d *= &masks[block];
        }
        let conv_b_out = &trace.conv_out[2 * block + 1];
        d = maxpool2x2_backward(&d, &trace.pool_idx[block], conv_b_out.dim());

        relu_backward_inplace(&mut d, conv_b_out);
        let input_b = &trace.conv_out[2 * block];
        let (g, d_in) = conv3x3_backward(input_b, &params.convs[2 * block + 1], &d);
        grads.convs[2 * block + 1] = g;
        d = d_in;

        relu_backward_inplace(&mut d, &trace.conv_out[2 * block]);
        let input_a: &Array3<f64> = if block == 0 {
            &trace.combined
        } else {
            &trace.post_drop[block - 1]
        };
        let (g, d_in) = conv3x3_backward(input_a, &params.convs[2 * block], &d);
        grads.convs[2 * block] = g;
        d = d_in;
    }

    let d_combined = d.index_axis_move(Axis(0), 0);
    (grads, d_combined)
}

/// Gradient of one pre-softmax emotion logit with respect to the post-ReLU
/// activations of `conv4a` (index 6) or `conv4b` (index 7).
pub(crate) fn logit_gradient_at_conv(
    params: &StageParams,
    trace: &StageTrace,
    class_id: usize,
    conv_index: usize,
) -> Array3<f64> {
    assert!(
        conv_index == 6 || conv_index == 7,
        "only the last conv pair"
    );
    let mut d_z1 = params.fc2_emotion.weight.row(class_id).to_owned();
    for (d, &a) in d_z1.iter_mut().zip(trace.fc1_out.iter()) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }
    let d_flat = params.fc1.weight.t().dot(&d_z1);
    let mut d = d_flat
        .into_shape_with_order(trace.post_drop[3].raw_dim())
        .expect("flat gradient reshapes to the pooled volume");
    if let Some(masks) = &trace.drop_mask {
        d *= &masks[3];
    }
    d = maxpool2x2_backward(&d, &trace.pool_idx[3], trace.conv_out[7].dim());
    if conv_index == 7 {
        return d;
    }
    relu_backward_inplace(&mut d, &trace.conv_out[7]);
    let (_, d_in) = conv3x3_backward(&trace.conv_out[6], &params.convs[7], &d);
    d_in
}

/// Adds `scale * other` into `acc`, tensor by tensor.
pub(crate) fn accumulate_grads(acc: &mut StageGrads, other: &StageGrads, scale: f64) {
    let mut a = acc.tensors_mut();
    let b = other.tensors();
    for (at, bt) in a.iter_mut().zip(b) {
        for (x, y) in at.iter_mut().zip(bt) {
            *x += scale * y;
        }
    }
}

/// Maps the previous stage's shared features to a full-resolution,
/// single-channel feature image: a linear layer to a quarter-resolution
/// grid, then bilinear upsampling.
pub fn connection_layer(
    conn: &Linear,
    prev_features: &[f64],
    arch: &ArchConfig,
) -> Result<Array2<f64>> {
    if prev_features.len() != arch.fc1_size {
        return Err(Error::Shape {
            layer: "connection".into(),
            details: format!(
                "expected {} features, got {}",
                arch.fc1_size,
                prev_features.len()
            ),
        });
    }
    let side = arch.connection_side();
    if conn.weight.dim() != (side * side, arch.fc1_size) {
        return Err(Error::Shape {
            layer: "connection".into(),
            details: format!(
                "weight shape {:?} does not match ({}, {})",
                conn.weight.dim(),
                side * side,
                arch.fc1_size
            ),
        });
    }
    let x = ndarray::ArrayView1::from(prev_features);
    let raw = conn.weight.dot(&x) + &conn.bias;
    let small = raw
        .into_shape_with_order((side, side))
        .expect("side*side output");
    Ok(bilinear_resize(&small, arch.input_size, arch.input_size))
}

/// Gradient of [`connection_layer`] with respect to its parameters. The
/// previous stage's features are frozen inputs, so no gradient flows further
/// back.
pub(crate) fn connection_backward(
    d_feature_image: &Array2<f64>,
    prev_features: &[f64],
    arch: &ArchConfig,
) -> Linear {
    let side = arch.connection_side();
    let d_small = bilinear_resize_backward(d_feature_image, side, side);
    let d_raw = d_small
        .into_shape_with_order(side * side)
        .expect("contiguous gradient");
    let feats = ndarray::ArrayView1::from(prev_features);
    Linear {
        weight: Array2::from_shape_fn((d_raw.len(), feats.len()), |(i, j)| d_raw[i] * feats[j]),
        bias: d_raw,
    }
}

/// Composes a stage's landmark update with the previous estimate: the
/// previous shape is aligned to the canonical frame with `t`, the update is
/// added there, and the result is mapped back to the image frame through
/// `t^-1`.
pub fn compose_stage_output(
    prev_shape: &LandmarkSet,
    delta: &[f64],
    t: &SimilarityTransform,
) -> Result<LandmarkSet> {
    if delta.len() != 2 * NUM_LANDMARKS {
        return Err(Error::Validation(format!(
            "landmark delta must have {} values, got {}",
            2 * NUM_LANDMARKS,
            delta.len()
        )));
    }
    let inv = t.inverse()?;
    let mut canonical = t.apply(prev_shape).to_flat();
    for (c, d) in canonical.iter_mut().zip(delta) {
        *c += d;
    }
    let updated = LandmarkSet::from_flat(&canonical, prev_shape.frame())?;
    Ok(inv.apply(&updated).with_frame(Frame::Image))
}

/// Full model: per-stage parameters plus the frozen canonical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub arch: ArchConfig,
    pub scheme: EmotionScheme,
    pub stages: Vec<StageParams>,
    pub canonical_shape: LandmarkSet,
}

/// Per-stage context captured by a traced full forward pass.
pub(crate) struct StageEvalCtx {
    pub trace: StageTrace,
    pub shape_after: LandmarkSet,
    pub distribution: EmotionDistribution,
}

impl ModelState {
    /// He-initialized model with `num_stages` stages. The canonical shape is
    /// re-tagged to the canonical frame.
    pub fn new(
        arch: ArchConfig,
        scheme: EmotionScheme,
        num_stages: usize,
        canonical_shape: LandmarkSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        arch.validate()?;
        if num_stages < 1 {
            return Err(Error::Config("a model needs at least one stage".into()));
        }
        let stages = (0..num_stages)
            .map(|i| StageParams::init(&arch, scheme.num_classes(), i > 0, rng))
            .collect();
        Ok(Self {
            arch,
            scheme,
            stages,
            canonical_shape: canonical_shape.with_frame(Frame::Canonical),
        })
    }

    /// The canonical shape placed in the frame of an input image: uniform
    /// scale, centered.
    pub fn initial_shape(&self, img_h: usize, img_w: usize) -> LandmarkSet {
        let s = img_h.min(img_w) as f64 / self.arch.input_size as f64;
        let tx = (img_w as f64 - s * self.arch.input_size as f64) / 2.0;
        let ty = (img_h as f64 - s * self.arch.input_size as f64) / 2.0;
        SimilarityTransform::new(s, 0.0, (tx, ty))
            .apply(&self.canonical_shape)
            .with_frame(Frame::Image)
    }

    /// Runs every stage on the image, returning the per-stage shape estimate
    /// and emotion distribution. The final stage's distribution is the
    /// model's prediction.
    pub fn forward(&self, img: &GrayImage) -> Result<Vec<(LandmarkSet, EmotionDistribution)>> {
        Ok(self
            .forward_traced(img)?
            .into_iter()
            .map(|c| (c.shape_after, c.distribution))
            .collect())
    }

    pub(crate) fn forward_traced(&self, img: &GrayImage) -> Result<Vec<StageEvalCtx>> {
        let mut shape = self.initial_shape(img.height(), img.width());
        let mut prev_features: Option<Vec<f64>> = None;
        let mut ctxs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (input, transform) =
                self.stage_input(img, &shape, stage, prev_features.as_deref())?;
            let (output, trace) = stage.forward_traced(&input)?;
            let shape_after = compose_stage_output(&shape, &output.landmark_delta, &transform)?;
            let distribution = EmotionDistribution::from_logits(&output.emotion_logits)?;
            prev_features = Some(output.shared_features);
            shape = shape_after.clone();
            ctxs.push(StageEvalCtx {
                trace,
                shape_after,
                distribution,
            });
        }
        Ok(ctxs)
    }

    /// Builds the three stage inputs for the current shape estimate: the
    /// image warped to the canonical pose, the heatmap of the aligned
    /// estimate, and the connection feature image (zeros at the first stage).
    pub(crate) fn stage_input(
        &self,
        img: &GrayImage,
        shape: &LandmarkSet,
        stage: &StageParams,
        prev_features: Option<&[f64]>,
    ) -> Result<(StageInput, SimilarityTransform)> {
        let size = self.arch.input_size;
        let transform = SimilarityTransform::estimate(shape, &self.canonical_shape)?;
        let warped = warp_image_to(img, &transform, size, size)?;
        let aligned = transform.apply(shape).with_frame(Frame::Canonical);
        let heatmap = generate_landmark_heatmap(&aligned, size);
        let feature_image = match (&stage.connection, prev_features) {
            (Some(conn), Some(feats)) => Some(connection_layer(conn, feats, &self.arch)?),
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::Config(
                    "stage with a connection layer needs previous-stage features".into(),
                ))
            }
        };
        Ok((
            StageInput {
                warped_image: warped,
                heatmap,
                feature_image,
            },
            transform,
        ))
    }

    /// Runs a real first-stage forward pass recording the input/output shape
    /// of every layer.
    pub fn shape_audit(&self, img: &GrayImage) -> Result<Vec<LayerShape>> {
        let shape = self.initial_shape(img.height(), img.width());
        let (input, _t) = self.stage_input(img, &shape, &self.stages[0], None)?;
        let mut rows = Vec::new();
        stage_forward_impl(&self.stages[0], input.view(), None, Some(&mut rows))?;
        Ok(rows)
    }
}

// ---------------------------------------------------------------------------
// Layer primitives
// ---------------------------------------------------------------------------

fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

fn relu_backward_inplace(d: &mut Array3<f64>, post_activation: &Array3<f64>) {
    for (g, &a) in d.iter_mut().zip(post_activation.iter()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Unrolls 3x3 neighborhoods (padding 1) into a (cin*9, h*w) matrix.
fn im2col3x3(input: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let mut cols = Array2::zeros((c * 9, h * w));
    for ci in 0..c {
        let plane = input.index_axis(Axis(0), ci);
        for ky in 0..3usize {
            let dy = ky as i64 - 1;
            for kx in 0..3usize {
                let dx = kx as i64 - 1;
                let row_idx = ci * 9 + ky * 3 + kx;
                let mut row = cols.row_mut(row_idx);
                let rv = row.as_slice_mut().expect("row is contiguous");
                for y in 0..h {
                    let sy = y as i64 + dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    let src = plane.row(sy as usize);
                    let src = src.as_slice().expect("plane row is contiguous");
                    let dst = &mut rv[y * w..(y + 1) * w];
                    match dx {
                        -1 => dst[1..].copy_from_slice(&src[..w - 1]),
                        0 => dst.copy_from_slice(src),
                        1 => dst[..w - 1].copy_from_slice(&src[1..]),
                        _ => unreachable!(),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`]: accumulates column gradients back onto the input
/// grid.
fn col2im3x3(d_cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = out.index_axis_mut(Axis(0), ci);
        for ky in 0..3usize {
            let dy = ky as i64 - 1;
            for kx in 0..3usize {
                let dx = kx as i64 - 1;
                let row = d_cols.row(ci * 9 + ky * 3 + kx);
                let rv = row.as_slice().expect("row is contiguous");
                for y in 0..h {
                    let sy = y as i64 + dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    let mut dst = plane.row_mut(sy as usize);
                    let dst = dst.as_slice_mut().expect("plane row is contiguous");
                    let src = &rv[y * w..(y + 1) * w];
                    match dx {
                        -1 => {
                            for x in 0..w - 1 {
                                dst[x] += src[x + 1];
                            }
                        }
                        0 => {
                            for x in 0..w {
                                dst[x] += src[x];
                            }
                        }
                        1 => {
                            for x in 0..w - 1 {
                                dst[x + 1] += src[x];
                            }
                        }
                        _ => unreachable!(),
                    }
                }
            }
        }
    }
    out
}

/// 3x3 convolution, stride 1, padding 1; returns pre-activation values.
fn conv3x3_forward(input: &Array3<f64>, layer: &ConvLayer) -> Array3<f64> {
    let (cin, h, w) = input.dim();
    let cout = layer.weight.dim().0;
    let cols = im2col3x3(input);
    let w2 = layer
        .weight
        .view()
        .into_shape_with_order((cout, cin * 9))
        .expect("weight is contiguous");
    let mut out = Array2::zeros((cout, h * w));
    general_mat_mul(1.0, &w2, &cols.view(), 0.0, &mut out);
    for (mut row, &b) in out.rows_mut().into_iter().zip(layer.bias.iter()) {
        row += b;
    }
    out.into_shape_with_order((cout, h, w))
        .expect("sized above")
}

/// Gradients of a 3x3 convolution: weight/bias gradients plus the gradient
/// with respect to the layer input. `d_out` is the gradient at the
/// pre-activation output.
fn conv3x3_backward(
    input: &Array3<f64>,
    layer: &ConvLayer,
    d_out: &Array3<f64>,
) -> (ConvLayer, Array3<f64>) {
    let (cin, h, w) = input.dim();
    let cout = layer.weight.dim().0;
    let cols = im2col3x3(input);
    let d_out2 = d_out
        .view()
        .into_shape_with_order((cout, h * w))
        .expect("gradient is contiguous");

    let mut d_w2 = Array2::zeros((cout, cin * 9));
    general_mat_mul(1.0, &d_out2, &cols.t(), 0.0, &mut d_w2);
    let d_bias = d_out2.sum_axis(Axis(1));

    let w2 = layer
        .weight
        .view()
        .into_shape_with_order((cout, cin * 9))
        .expect("weight is contiguous");
    let mut d_cols = Array2::zeros((cin * 9, h * w));
    general_mat_mul(1.0, &w2.t(), &d_out2, 0.0, &mut d_cols);
    let d_input = col2im3x3(&d_cols, cin, h, w);

    (
        ConvLayer {
            weight: d_w2
                .into_shape_with_order((cout, cin, 3, 3))
                .expect("sized above"),
            bias: d_bias,
        },
        d_input,
    )
}

/// 2x2 max pooling with stride 2 (floor semantics for odd sizes). Also
/// returns the flat in-plane index of each selected element; ties go to the
/// first element in scan order.
fn maxpool2x2(input: &Array3<f64>) -> (Array3<f64>, Array3<usize>) {
    let (c, h, w) = input.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    let mut idx = Array3::zeros((c, oh, ow));
    for ci in 0..c {
        let plane = input.index_axis(Axis(0), ci);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (y, x) = (2 * oy + dy, 2 * ox + dx);
                        let v = plane[[y, x]];
                        if v > best {
                            best = v;
                            best_i = y * w + x;
                        }
                    }
                }
                out[[ci, oy, ox]] = best;
                idx[[ci, oy, ox]] = best_i;
            }
        }
    }
    (out, idx)
}

fn maxpool2x2_backward(
    d_out: &Array3<f64>,
    idx: &Array3<usize>,
    in_dim: (usize, usize, usize),
) -> Array3<f64> {
    let (c, h, w) = in_dim;
    let mut d_in = Array3::zeros((c, h, w));
    let (_, oh, ow) = d_out.dim();
    for ci in 0..c {
        let mut plane = d_in.index_axis_mut(Axis(0), ci);
        let flat = plane.as_slice_mut().expect("plane is contiguous");
        for oy in 0..oh {
            for ox in 0..ow {
                flat[idx[[ci, oy, ox]]] += d_out[[ci, oy, ox]];
            }
        }
    }
    d_in
}

fn dropout_mask(shape: ndarray::Ix3, p: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let keep_scale = 1.0 / (1.0 - p);
    Array3::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep_scale
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Point;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn test_arch() -> ArchConfig {
        ArchConfig::compact(32, [3, 4, 5, 6], 10)
    }

    fn canonical_for(size: usize) -> LandmarkSet {
        // A rough face layout scaled into the canvas; exact geometry is
        // irrelevant for network tests.
        let s = size as f64;
        let pts = (0..NUM_LANDMARKS)
            .map(|i| {
                let a = i as f64 / NUM_LANDMARKS as f64 * std::f64::consts::TAU;
                Point::new(s / 2.0 + s * 0.3 * a.cos(), s / 2.0 + s * 0.3 * a.sin())
            })
            .collect();
        LandmarkSet::new(pts, Frame::Canonical).unwrap()
    }

    fn test_model(stages: usize) -> ModelState {
        let arch = test_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        ModelState::new(
            arch,
            EmotionScheme::Three,
            stages,
            canonical_for(arch.input_size),
            &mut rng,
        )
        .unwrap()
    }

    fn random_image(size: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::new(Array2::from_shape_fn((size, size), |_| rng.random::<f64>())).unwrap()
    }

    fn zero_input(size: usize) -> StageInput {
        let zeros = LandmarkSet::new(
            vec![Point::new(-1000.0, -1000.0); NUM_LANDMARKS],
            Frame::Canonical,
        )
        .unwrap();
        StageInput {
            warped_image: GrayImage::zeros(size, size),
            heatmap: generate_landmark_heatmap(&zeros, size),
            feature_image: None,
        }
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero_outputs() {
        let model = test_model(1);
        let input = zero_input(model.arch.input_size);
        let out = model.stages[0].forward(&input).unwrap();
        assert!(out.landmark_delta.iter().all(|&v| v == 0.0));
        assert!(out.emotion_logits.iter().all(|&v| v == 0.0));
        assert!(out.shared_features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = test_model(1);
        let img = random_image(model.arch.input_size, 7);
        let a = model.forward(&img).unwrap();
        let b = model.forward(&img).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].0, b[0].0);
        assert_eq!(a[0].1, b[0].1);
    }

    #[test]
    fn training_forward_applies_dropout_only_in_training() {
        let model = test_model(1);
        let img = random_image(model.arch.input_size, 8);
        let shape = model.initial_shape(32, 32);
        let (input, _) = model
            .stage_input(&img, &shape, &model.stages[0], None)
            .unwrap();
        let eval = model.stages[0].forward(&input).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (train, trace) = model.stages[0]
            .forward_training(&input, 0.5, &mut rng)
            .unwrap();
        assert!(trace.drop_mask.is_some());
        // With p = 0.5 the dropped activations almost surely change the head.
        assert_ne!(eval.emotion_logits, train.emotion_logits);
    }

    #[test]
    fn stage_errors_name_the_offending_layer() {
        let model = test_model(1);
        let size = model.arch.input_size;
        let bad = StageInput {
            warped_image: GrayImage::zeros(size, size),
            heatmap: generate_landmark_heatmap(&canonical_for(16), 16),
            feature_image: None,
        };
        match model.stages[0].forward(&bad) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "conv1a"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn multi_stage_forward_returns_one_pair_per_stage() {
        let model = test_model(2);
        let img = random_image(model.arch.input_size, 9);
        let out = model.forward(&img).unwrap();
        assert_eq!(out.len(), 2);
        for (_, dist) in &out {
            // softmax output satisfies the simplex invariants by construction
            assert_eq!(dist.len(), 3);
        }
    }

    #[test]
    fn zero_delta_fixed_point_returns_initial_shape() {
        let mut model = test_model(2);
        for stage in &mut model.stages {
            stage.fc2_landmark.weight.fill(0.0);
            stage.fc2_landmark.bias.fill(0.0);
        }
        let img = random_image(model.arch.input_size, 10);
        let out = model.forward(&img).unwrap();
        let initial = model.initial_shape(img.height(), img.width());
        for (shape, _) in &out {
            for (p, q) in shape.points().iter().zip(initial.points()) {
                assert!(p.distance(q) < 1e-9, "distance {}", p.distance(q));
            }
        }
    }

    #[test]
    fn compose_stage_output_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prev = {
            let pts = (0..NUM_LANDMARKS)
                .map(|_| Point::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)))
                .collect();
            LandmarkSet::new(pts, Frame::Image).unwrap()
        };

        // Zero delta under the identity keeps the shape.
        let id = SimilarityTransform::identity();
        let same = compose_stage_output(&prev, &[0.0; 136], &id).unwrap();
        assert_eq!(same.points(), prev.points());

        // Unit delta under the identity shifts every point by (1, 1).
        let shifted = compose_stage_output(&prev, &[1.0; 136], &id).unwrap();
        for (p, q) in prev.points().iter().zip(shifted.points()) {
            assert_relative_eq!(q.x, p.x + 1.0, epsilon = 1e-12);
            assert_relative_eq!(q.y, p.y + 1.0, epsilon = 1e-12);
        }

        // Random transform and delta match the align/add/un-align oracle.
        for _ in 0..20 {
            let t = SimilarityTransform::new(
                rng.random_range(0.5..2.0),
                rng.random_range(-1.0..1.0),
                (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)),
            );
            let delta: Vec<f64> = (0..136).map(|_| rng.random_range(-5.0..5.0)).collect();
            let got = compose_stage_output(&prev, &delta, &t).unwrap();

            let aligned = t.apply(&prev);
            let mut flat = aligned.to_flat();
            for (f, d) in flat.iter_mut().zip(&delta) {
                *f += d;
            }
            let oracle = t
                .inverse()
                .unwrap()
                .apply(&LandmarkSet::from_flat(&flat, Frame::Image).unwrap());
            for (p, q) in got.points().iter().zip(oracle.points()) {
                assert!(p.distance(q) < 1e-9);
            }
        }
    }

    #[test]
    fn connection_layer_contract() {
        let arch = test_arch();
        let side = arch.connection_side();
        let conn = Linear {
            weight: Array2::zeros((side * side, arch.fc1_size)),
            bias: Array1::zeros(side * side),
        };
        // Zero features and bias give a zero feature image of full size.
        let img = connection_layer(&conn, &vec![0.0; arch.fc1_size], &arch).unwrap();
        assert_eq!(img.dim(), (arch.input_size, arch.input_size));
        assert!(img.iter().all(|&v| v == 0.0));

        // A constant pre-upsample map stays constant after upsampling.
        let conn = Linear {
            weight: Array2::zeros((side * side, arch.fc1_size)),
            bias: Array1::from_elem(side * side, 2.5),
        };
        let img = connection_layer(&conn, &vec![0.0; arch.fc1_size], &arch).unwrap();
        assert!(img.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = ConvLayer {
            weight: Array4::from_shape_fn((2, 3, 3, 3), |_| rng.random::<f64>() - 0.5),
            bias: Array1::from_shape_fn(2, |_| rng.random::<f64>() - 0.5),
        };
        let input = Array3::from_shape_fn((3, 5, 4), |_| rng.random::<f64>() - 0.5);
        // Scalar objective: weighted sum of outputs.
        let w_obj = Array3::from_shape_fn((2, 5, 4), |_| rng.random::<f64>() - 0.5);
        let loss = |inp: &Array3<f64>, lay: &ConvLayer| (&conv3x3_forward(inp, lay) * &w_obj).sum();

        let (grads, d_input) = conv3x3_backward(&input, &layer, &w_obj);
        let eps = 1e-6;

        let mut l2 = layer.clone();
        l2.weight[[1, 2, 0, 1]] += eps;
        let mut l3 = layer.clone();
        l3.weight[[1, 2, 0, 1]] -= eps;
        let fd = (loss(&input, &l2) - loss(&input, &l3)) / (2.0 * eps);
        assert_relative_eq!(grads.weight[[1, 2, 0, 1]], fd, epsilon = 1e-7);

        let mut i2 = input.clone();
        i2[[2, 3, 1]] += eps;
        let mut i3 = input.clone();
        i3[[2, 3, 1]] -= eps;
        let fd = (loss(&i2, &layer) - loss(&i3, &layer)) / (2.0 * eps);
        assert_relative_eq!(d_input[[2, 3, 1]], fd, epsilon = 1e-7);

        let mut l2 = layer.clone();
        l2.bias[1] += eps;
        let mut l3 = layer.clone();
        l3.bias[1] -= eps;
        let fd = (loss(&input, &l2) - loss(&input, &l3)) / (2.0 * eps);
        assert_relative_eq!(grads.bias[1], fd, epsilon = 1e-7);
    }

    #[test]
    fn maxpool_handles_odd_sizes_and_routes_gradients() {
        let input = Array3::from_shape_fn((1, 5, 5), |(_, y, x)| (y * 5 + x) as f64);
        let (out, idx) = maxpool2x2(&input);
        assert_eq!(out.dim(), (1, 2, 2));
        // Max of each 2x2 block is its bottom-right element.
        assert_eq!(out[[0, 0, 0]], 6.0);
        assert_eq!(out[[0, 1, 1]], 18.0);
        let d_out = Array3::from_elem((1, 2, 2), 1.0);
        let d_in = maxpool2x2_backward(&d_out, &idx, (1, 5, 5));
        assert_eq!(d_in[[0, 1, 1]], 1.0);
        assert_eq!(d_in[[0, 0, 0]], 0.0);
        let total: f64 = d_in.sum();
        assert_eq!(total, 4.0);
    }

    #[test]
    fn shape_audit_rows_cover_all_layers() {
        let model = test_model(1);
        let img = random_image(model.arch.input_size, 12);
        let rows = model.shape_audit(&img).unwrap();
        assert_eq!(rows.len(), 15);
        assert_eq!(rows[0].name, "conv1a");
        assert_eq!(rows[0].input, (32, 32, 1));
        assert_eq!(rows[14].name, "fc2_emotion");
        assert_eq!(rows[14].output, (1, 1, 3));
    }
}
