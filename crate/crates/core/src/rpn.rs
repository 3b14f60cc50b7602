//! Region proposal network: the layer graph with shape checking, a naive
//! forward pass with seeded weights, anchors and their matching, box-delta
//! coding, and the detection loss stack.

use std::fmt;

use ndarray::{Array1, Array3, Array4};
use thiserror::Error;

use crate::geometry::{bev_iou, Box3D, GeometryError, ObjectClass};
use crate::pillars::PillarGrid;
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::PseudoImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RpnError {
    #[error("shape error at {layer}: {detail}")]
    Shape { layer: String, detail: String },
    #[error("weights do not match the graph: {0}")]
    Weights(String),
    #[error("probability {0} outside the open interval (0, 1)")]
    Probability(f64),
    #[error("no positive anchors")]
    NoPositives,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
}

/// Position of a layer in the network topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    /// Down-sampling block `1..=3`.
    Conv(u8),
    /// Up-sampling branch fed by `Conv(k)`.
    Deconv(u8),
    Regression,
    Classification,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Conv(k) => write!(f, "Conv{k}"),
            Block::Deconv(k) => write!(f, "DeConv{k}"),
            Block::Regression => f.write_str("Regression"),
            Block::Classification => f.write_str("Classification"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub block: Block,
    pub kind: LayerKind,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerSpec {
    fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let f = |n: usize| -> Option<usize> {
            match self.kind {
                LayerKind::Conv => {
                    let span = (n + 2 * self.padding).checked_sub(self.kernel)?;
                    Some(span / self.stride + 1)
                }
                LayerKind::Deconv => ((n.checked_sub(1)?) * self.stride + self.kernel).checked_sub(2 * self.padding),
            }
        };
        let (oh, ow) = (f(h)?, f(w)?);
        (oh > 0 && ow > 0).then_some((oh, ow))
    }
}

/// Widths, depths and strides of the backbone and heads.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnConfig {
    pub input_channels: usize,
    pub block_layers: [usize; 3],
    pub block_channels: [usize; 3],
    pub block_strides: [usize; 3],
    pub deconv_channels: usize,
    pub deconv_kernels: [usize; 3],
    pub deconv_strides: [usize; 3],
    pub regression_channels: usize,
    pub classification_channels: usize,
}

impl RpnConfig {
    /// The reference architecture: 3x3 conv blocks of 4/6/6 layers at
    /// 128/256/512 channels, 256-channel deconvs with strides 1/2/4, and
    /// 1x1 heads of 14 and 2 channels.
    pub fn reference(input_channels: usize) -> Self {
        Self {
            input_channels,
            block_layers: [4, 6, 6],
            block_channels: [128, 256, 512],
            block_strides: [2, 2, 2],
            deconv_channels: 256,
            deconv_kernels: [1, 2, 4],
            deconv_strides: [1, 2, 4],
            regression_channels: 14,
            classification_channels: 2,
        }
    }

    pub fn build(&self) -> Result<RpnGraph, RpnError> {
        let mut layers = Vec::new();
        let mut c = self.input_channels;
        for b in 0..3 {
            for i in 0..self.block_layers[b] {
                layers.push(LayerSpec {
                    block: Block::Conv(b as u8 + 1),
                    kind: LayerKind::Conv,
                    kernel: 3,
                    in_channels: c,
                    out_channels: self.block_channels[b],
                    stride: if i == 0 { self.block_strides[b] } else { 1 },
                    padding: 1,
                });
                c = self.block_channels[b];
            }
        }
        for b in 0..3 {
            layers.push(LayerSpec {
                block: Block::Deconv(b as u8 + 1),
                kind: LayerKind::Deconv,
                kernel: self.deconv_kernels[b],
                in_channels: self.block_channels[b],
                out_channels: self.deconv_channels,
                stride: self.deconv_strides[b],
                padding: 0,
            });
        }
        let concat = 3 * self.deconv_channels;
        for (block, out) in [
            (Block::Regression, self.regression_channels),
            (Block::Classification, self.classification_channels),
        ] {
            layers.push(LayerSpec {
                block,
                kind: LayerKind::Conv,
                kernel: 1,
                in_channels: concat,
                out_channels: out,
                stride: 1,
                padding: 0,
            });
        }
        RpnGraph::from_layers(layers)
    }
}

/// Ordered layer list: conv blocks, the three deconv branches, then the
/// regression and classification heads.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnGraph {
    pub layers: Vec<LayerSpec>,
}

/// Reference graph for an input with `input_channels` channels.
pub fn build_rpn_graph(input_channels: usize) -> Result<RpnGraph, RpnError> {
    RpnConfig::reference(input_channels).build()
}

/// Per-layer output shapes of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTrace {
    pub input: (usize, usize, usize),
    /// `(layer name, (C, H, W))` in graph order.
    pub layers: Vec<(String, (usize, usize, usize))>,
    pub block_outputs: [(usize, usize, usize); 3],
    pub branch_outputs: [(usize, usize, usize); 3],
    pub concat: (usize, usize, usize),
    pub regression: (usize, usize, usize),
    pub classification: (usize, usize, usize),
}

impl RpnGraph {
    /// Validates topology and checks that the up-sampling branches line up
    /// on probe inputs.
    pub fn from_layers(layers: Vec<LayerSpec>) -> Result<Self, RpnError> {
        for l in &layers {
            if l.kernel == 0 || l.stride == 0 || l.in_channels == 0 || l.out_channels == 0 {
                return Err(RpnError::Shape { layer: l.block.to_string(), detail: "non-positive dimension".into() });
            }
        }
        let g = Self { layers };
        for k in 1..=3u8 {
            if !g.layers.iter().any(|l| l.block == Block::Conv(k)) {
                return Err(RpnError::Shape { layer: format!("Conv{k}"), detail: "block missing".into() });
            }
            if g.layers.iter().filter(|l| l.block == Block::Deconv(k)).count() != 1 {
                return Err(RpnError::Shape { layer: format!("DeConv{k}"), detail: "expected exactly one layer".into() });
            }
        }
        for head in [Block::Regression, Block::Classification] {
            if g.layers.iter().filter(|l| l.block == head).count() != 1 {
                return Err(RpnError::Shape { layer: head.to_string(), detail: "expected exactly one layer".into() });
            }
        }
        let c = g.input_channels();
        g.forward_shapes((c, 64, 64))?;
        g.forward_shapes((c, 128, 144))?;
        Ok(g)
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.layers.len());
        let mut idx = std::collections::HashMap::<Block, usize>::new();
        for l in &self.layers {
            match l.block {
                Block::Conv(_) => {
                    let n = idx.entry(l.block).or_default();
                    names.push(format!("{}.{}", l.block, n));
                    *n += 1;
                }
                _ => names.push(l.block.to_string()),
            }
        }
        names
    }

    fn block_layers(&self, block: Block) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers.iter().enumerate().filter(move |(_, l)| l.block == block)
    }

    fn single(&self, block: Block) -> (usize, &LayerSpec) {
        self.block_layers(block).next().expect("validated at construction")
    }

    /// Output shape of every layer for an input of shape `(C, H, W)`.
    pub fn forward_shapes(&self, input: (usize, usize, usize)) -> Result<ShapeTrace, RpnError> {
        let names = self.layer_names();
        let (c0, h0, w0) = input;
        if h0 % 8 != 0 || w0 % 8 != 0 {
            return Err(RpnError::Shape { layer: "input".into(), detail: format!("H={h0}, W={w0} must be divisible by 8") });
        }
        let mut out = vec![(0, 0, 0); self.layers.len()];
        let step = |i: usize, (c, h, w): (usize, usize, usize)| -> Result<(usize, usize, usize), RpnError> {
            let l = &self.layers[i];
            if l.in_channels != c {
                return Err(RpnError::Shape {
                    layer: names[i].clone(),
                    detail: format!("expects {} input channels, got {c}", l.in_channels),
                });
            }
            let (oh, ow) = l.out_hw(h, w).ok_or_else(|| RpnError::Shape {
                layer: names[i].clone(),
                detail: format!("kernel {} does not fit a {h}x{w} input", l.kernel),
            })?;
            Ok((l.out_channels, oh, ow))
        };
        let mut cur = (c0, h0, w0);
        let mut block_outputs = [(0, 0, 0); 3];
        for k in 0..3u8 {
            let idxs: Vec<usize> = self.block_layers(Block::Conv(k + 1)).map(|(i, _)| i).collect();
            for i in idxs {
                cur = step(i, cur)?;
                out[i] = cur;
            }
            block_outputs[k as usize] = cur;
        }
        let mut branch_outputs = [(0, 0, 0); 3];
        for k in 0..3u8 {
            let (i, _) = self.single(Block::Deconv(k + 1));
            let s = step(i, block_outputs[k as usize])?;
            out[i] = s;
            branch_outputs[k as usize] = s;
        }
        let (_, bh, bw) = branch_outputs[0];
        for (k, &(_, h, w)) in branch_outputs.iter().enumerate() {
            if (h, w) != (bh, bw) {
                return Err(RpnError::Shape {
                    layer: format!("DeConv{}", k + 1),
                    detail: format!("branch emerges at {h}x{w}, DeConv1 at {bh}x{bw}"),
                });
            }
        }
        let concat = (branch_outputs.iter().map(|b| b.0).sum(), bh, bw);
        let (ri, _) = self.single(Block::Regression);
        let regression = step(ri, concat)?;
        out[ri] = regression;
        let (ci, _) = self.single(Block::Classification);
        let classification = step(ci, concat)?;
        out[ci] = classification;
        for (name, shape) in [("Regression", regression), ("Classification", classification)] {
            if (shape.1, shape.2) != (bh, bw) {
                return Err(RpnError::Shape { layer: name.into(), detail: "head changes spatial size".into() });
            }
        }
        Ok(ShapeTrace {
            input,
            layers: names.into_iter().zip(out).collect(),
            block_outputs,
            branch_outputs,
            concat,
            regression,
            classification,
        })
    }

    /// Text table with one row per layer, in the reference column layout.
    pub fn render_table(&self) -> String {
        let mut s = String::from("Block          | Layer    | Filter size | Channels | Stride | Padding\n");
        for l in &self.layers {
            let kind = match l.kind {
                LayerKind::Conv => "Conv2d",
                LayerKind::Deconv => "Deconv2D",
            };
            s.push_str(&format!(
                "{:<14} | {:<8} | {:<11} | {:<8} | {:<6} | {}\n",
                l.block.to_string(),
                kind,
                format!("{0}x{0}", l.kernel),
                l.out_channels,
                l.stride,
                l.padding
            ));
        }
        s
    }
}

/// Inference-mode batch norm statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Array1<f32>,
    pub shift: Array1<f32>,
    pub mean: Array1<f32>,
    pub var: Array1<f32>,
}

impl BatchNorm {
    pub fn unit(c: usize) -> Self {
        Self { scale: Array1::ones(c), shift: Array1::zeros(c), mean: Array1::zeros(c), var: Array1::ones(c) }
    }
}

/// Kernel layout is `(out, in, k, k)` for convolutions and `(in, out, k, k)`
/// for transposed convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub kernel: Array4<f32>,
    pub bias: Array1<f32>,
    /// Absent on the heads.
    pub bn: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnWeights {
    pub layers: Vec<LayerWeights>,
}

impl RpnWeights {
    /// Uniform `+-1/sqrt(fan_in)` kernels from a SeededRng stream, zero
    /// biases, unit batch norm.
    pub fn seeded(graph: &RpnGraph, seed: u64) -> Self {
        let mut rng = SeededRng::new(derive_seed(seed, "rpn", 0));
        let layers = graph
            .layers
            .iter()
            .map(|l| {
                let fan_in = (l.in_channels * l.kernel * l.kernel) as f64;
                let bound = 1.0 / fan_in.sqrt();
                let shape = match l.kind {
                    LayerKind::Conv => (l.out_channels, l.in_channels, l.kernel, l.kernel),
                    LayerKind::Deconv => (l.in_channels, l.out_channels, l.kernel, l.kernel),
                };
                let kernel = Array4::from_shape_fn(shape, |_| rng.uniform(-bound, bound) as f32);
                let is_head = matches!(l.block, Block::Regression | Block::Classification);
                LayerWeights {
                    kernel,
                    bias: Array1::zeros(l.out_channels),
                    bn: (!is_head).then(|| BatchNorm::unit(l.out_channels)),
                }
            })
            .collect();
        Self { layers }
    }

    fn check(&self, graph: &RpnGraph) -> Result<(), RpnError> {
        if self.layers.len() != graph.layers.len() {
            return Err(RpnError::Weights(format!("{} weight sets for {} layers", self.layers.len(), graph.layers.len())));
        }
        for (i, (w, l)) in self.layers.iter().zip(&graph.layers).enumerate() {
            let shape = match l.kind {
                LayerKind::Conv => [l.out_channels, l.in_channels, l.kernel, l.kernel],
                LayerKind::Deconv => [l.in_channels, l.out_channels, l.kernel, l.kernel],
            };
            if w.kernel.shape() != shape || w.bias.len() != l.out_channels {
                return Err(RpnError::Weights(format!("layer {i}: kernel {:?}, expected {shape:?}", w.kernel.shape())));
            }
            if let Some(bn) = &w.bn {
                if [bn.scale.len(), bn.shift.len(), bn.mean.len(), bn.var.len()].iter().any(|&n| n != l.out_channels) {
                    return Err(RpnError::Weights(format!("layer {i}: batch-norm length")));
                }
            }
        }
        Ok(())
    }
}

/// Direct 2D convolution.
pub fn conv2d(input: &Array3<f32>, kernel: &Array4<f32>, bias: &Array1<f32>, stride: usize, padding: usize) -> Array3<f32> {
    let (ci, h, w) = input.dim();
    let (co, kci, k, _) = kernel.dim();
    assert_eq!(ci, kci, "conv2d channel mismatch");
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = Array3::<f32>::zeros((co, oh, ow));
    for o in 0..co {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias[o];
                for i in 0..ci {
                    for ky in 0..k {
                        let iy = (y * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (x * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += input[[i, iy as usize, ix as usize]] * kernel[[o, i, ky, kx]];
                        }
                    }
                }
                out[[o, y, x]] = acc;
            }
        }
    }
    out
}

/// Direct 2D transposed convolution (scatter form).
pub fn conv_transpose2d(input: &Array3<f32>, kernel: &Array4<f32>, bias: &Array1<f32>, stride: usize, padding: usize) -> Array3<f32> {
    let (ci, h, w) = input.dim();
    let (kci, co, k, _) = kernel.dim();
    assert_eq!(ci, kci, "conv_transpose2d channel mismatch");
    let oh = (h - 1) * stride + k - 2 * padding;
    let ow = (w - 1) * stride + k - 2 * padding;
    let mut out = Array3::<f32>::zeros((co, oh, ow));
    for o in 0..co {
        out.index_axis_mut(ndarray::Axis(0), o).fill(bias[o]);
    }
    for i in 0..ci {
        for y in 0..h {
            for x in 0..w {
                let v = input[[i, y, x]];
                if v == 0.0 {
                    continue;
                }
                for ky in 0..k {
                    let oy = (y * stride + ky) as isize - padding as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ox = (x * stride + kx) as isize - padding as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        for o in 0..co {
                            out[[o, oy as usize, ox as usize]] += v * kernel[[i, o, ky, kx]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// In-place inference batch norm followed by ReLU.
pub fn batch_norm_relu(x: &mut Array3<f32>, bn: &BatchNorm) {
    for (c, mut ch) in x.outer_iter_mut().enumerate() {
        let inv = bn.scale[c] / bn.var[c].sqrt();
        let (m, b) = (bn.mean[c], bn.shift[c]);
        ch.mapv_inplace(|v| ((v - m) * inv + b).max(0.0));
    }
}

fn apply(layer: &LayerSpec, w: &LayerWeights, x: &Array3<f32>) -> Array3<f32> {
    let mut y = match layer.kind {
        LayerKind::Conv => conv2d(x, &w.kernel, &w.bias, layer.stride, layer.padding),
        LayerKind::Deconv => conv_transpose2d(x, &w.kernel, &w.bias, layer.stride, layer.padding),
    };
    if let Some(bn) = &w.bn {
        batch_norm_relu(&mut y, bn);
    }
    y
}

/// Raw head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutput {
    pub cls_logits: Array3<f32>,
    pub regression: Array3<f32>,
}

impl RpnOutput {
    /// Per-anchor probability scores (logistic of the classification head).
    pub fn score_map(&self) -> Array3<f32> {
        self.cls_logits.mapv(|v| 1.0 / (1.0 + (-v).exp()))
    }
}

/// Full forward pass: conv blocks, deconv branches, concatenation, heads.
pub fn forward(graph: &RpnGraph, weights: &RpnWeights, input: &PseudoImage) -> Result<RpnOutput, RpnError> {
    weights.check(graph)?;
    let trace = graph.forward_shapes(input.dims())?;
    let mut x = input.data.clone();
    let mut block_out = Vec::with_capacity(3);
    for k in 1..=3u8 {
        for (i, l) in graph.block_layers(Block::Conv(k)) {
            x = apply(l, &weights.layers[i], &x);
        }
        block_out.push(x.clone());
    }
    let (cc, ch, cw) = trace.concat;
    let mut concat = Array3::<f32>::zeros((cc, ch, cw));
    let mut off = 0;
    for k in 1..=3u8 {
        let (i, l) = graph.single(Block::Deconv(k));
        let y = apply(l, &weights.layers[i], &block_out[k as usize - 1]);
        let n = y.dim().0;
        concat.slice_mut(ndarray::s![off..off + n, .., ..]).assign(&y);
        off += n;
    }
    let (ri, rl) = graph.single(Block::Regression);
    let (ci, cl) = graph.single(Block::Classification);
    Ok(RpnOutput {
        regression: apply(rl, &weights.layers[ri], &concat),
        cls_logits: apply(cl, &weights.layers[ci], &concat),
    })
}

/// Anchor template for one object class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorClassSpec {
    pub class: ObjectClass,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub z_center: f64,
}

impl AnchorClassSpec {
    pub const CAR: AnchorClassSpec = AnchorClassSpec { class: ObjectClass::Car, w: 1.6, l: 3.9, h: 1.56, z_center: -1.78 };
    pub const TRUCK: AnchorClassSpec = AnchorClassSpec { class: ObjectClass::Truck, w: 1.9, l: 4.9, h: 2.05, z_center: -1.5 };
    pub const DEFAULTS: [AnchorClassSpec; 2] = [Self::CAR, Self::TRUCK];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: Box3D,
    /// 0 for yaw 0, 1 for yaw 90 degrees.
    pub orientation: u8,
    pub class: ObjectClass,
    pub row: usize,
    pub col: usize,
}

/// One anchor per head cell, class and orientation (0 and 90 degrees), at
/// half the pillar-grid resolution. Ordered by row, column, class,
/// orientation.
pub fn generate_anchors(grid: &PillarGrid, specs: &[AnchorClassSpec]) -> Vec<Anchor> {
    generate_anchors_with_stride(grid, specs, 2)
}

pub fn generate_anchors_with_stride(grid: &PillarGrid, specs: &[AnchorClassSpec], stride: usize) -> Vec<Anchor> {
    let rows = grid.height() / stride;
    let cols = grid.width() / stride;
    let (sx, sy) = (grid.l_x * stride as f64, grid.l_y * stride as f64);
    let mut out = Vec::with_capacity(rows * cols * specs.len() * 2);
    for row in 0..rows {
        let y = grid.y_range.0 + (row as f64 + 0.5) * sy;
        for col in 0..cols {
            let x = grid.x_range.0 + (col as f64 + 0.5) * sx;
            for spec in specs {
                for (orientation, yaw) in [(0u8, 0.0), (1u8, std::f64::consts::FRAC_PI_2)] {
                    out.push(Anchor {
                        bbox: Box3D { center: [x, y, spec.z_center], w: spec.w, l: spec.l, h: spec.h, yaw },
                        orientation,
                        class: spec.class,
                        row,
                        col,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive { gt: usize },
    Negative,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchThresholds {
    pub positive: f64,
    pub negative: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        Self { positive: 0.6, negative: 0.45 }
    }
}

/// Labels anchors against same-class ground truth by bird's-eye IoU.
///
/// Positive when the anchor is (one of) the best match of some ground truth
/// or its IoU reaches `positive`; negative when its best IoU is below
/// `negative`; ignored otherwise.
pub fn match_anchors(
    anchors: &[Anchor],
    gts: &[(Box3D, ObjectClass)],
    thresholds: MatchThresholds,
) -> Result<Vec<AnchorLabel>, RpnError> {
    let mut best_iou = vec![0.0f64; anchors.len()];
    let mut best_gt = vec![usize::MAX; anchors.len()];
    let mut gt_best = vec![0.0f64; gts.len()];
    let mut overlaps: Vec<(usize, usize, f64)> = Vec::new();
    for (g, (gbox, gclass)) in gts.iter().enumerate() {
        gbox.validate()?;
        let rg = 0.5 * gbox.w.hypot(gbox.l);
        for (a, anchor) in anchors.iter().enumerate() {
            if anchor.class != *gclass {
                continue;
            }
            let ab = &anchor.bbox;
            let reach = rg + 0.5 * ab.w.hypot(ab.l);
            if (ab.center[0] - gbox.center[0]).hypot(ab.center[1] - gbox.center[1]) > reach {
                continue;
            }
            let iou = bev_iou(ab, gbox)?;
            if iou <= 0.0 {
                continue;
            }
            overlaps.push((a, g, iou));
            if iou > best_iou[a] {
                best_iou[a] = iou;
                best_gt[a] = g;
            }
            gt_best[g] = gt_best[g].max(iou);
        }
    }
    let mut labels: Vec<AnchorLabel> = best_iou
        .iter()
        .zip(&best_gt)
        .map(|(&iou, &g)| {
            if iou >= thresholds.positive {
                AnchorLabel::Positive { gt: g }
            } else if iou < thresholds.negative {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignored
            }
        })
        .collect();
    for (a, g, iou) in overlaps {
        if iou == gt_best[g] && !matches!(labels[a], AnchorLabel::Positive { .. }) {
            labels[a] = AnchorLabel::Positive { gt: g };
        }
    }
    Ok(labels)
}

/// Regression target between an anchor and a ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dw: f64,
    pub dl: f64,
    pub dh: f64,
    /// `sin` of the yaw difference.
    pub dtheta: f64,
}

impl BoxDelta {
    pub fn to_array(&self) -> [f64; 7] {
        [self.dx, self.dy, self.dz, self.dw, self.dl, self.dh, self.dtheta]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self { dx: a[0], dy: a[1], dz: a[2], dw: a[3], dl: a[4], dh: a[5], dtheta: a[6] }
    }
}

pub fn encode_delta(anchor: &Box3D, gt: &Box3D) -> Result<BoxDelta, RpnError> {
    anchor.validate()?;
    gt.validate()?;
    let d = anchor.w.hypot(anchor.l);
    Ok(BoxDelta {
        dx: (gt.center[0] - anchor.center[0]) / d,
        dy: (gt.center[1] - anchor.center[1]) / d,
        dz: (gt.center[2] - anchor.center[2]) / anchor.h,
        dw: (gt.w / anchor.w).ln(),
        dl: (gt.l / anchor.l).ln(),
        dh: (gt.h / anchor.h).ln(),
        dtheta: (gt.yaw - anchor.yaw).sin(),
    })
}

/// Inverse of [`encode_delta`] for yaw differences within `(-pi/2, pi/2)`.
pub fn decode_delta(anchor: &Box3D, delta: &BoxDelta) -> Result<Box3D, RpnError> {
    anchor.validate()?;
    let d = anchor.w.hypot(anchor.l);
    let b = Box3D {
        center: [
            anchor.center[0] + delta.dx * d,
            anchor.center[1] + delta.dy * d,
            anchor.center[2] + delta.dz * anchor.h,
        ],
        w: anchor.w * delta.dw.exp(),
        l: anchor.l * delta.dl.exp(),
        h: anchor.h * delta.dh.exp(),
        yaw: anchor.yaw + delta.dtheta.clamp(-1.0, 1.0).asin(),
    };
    b.validate()?;
    Ok(b)
}

fn open_unit(p: f64) -> Result<(), RpnError> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(RpnError::Probability(p))
    }
}

/// `-eta (1 - p)^gamma log p`.
pub fn focal_loss(p: f64, eta: f64, gamma: f64) -> Result<f64, RpnError> {
    open_unit(p)?;
    Ok(-eta * (1.0 - p).powf(gamma) * p.ln())
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Sum of smooth-L1 over the seven residuals.
pub fn localization_loss(pred: &BoxDelta, target: &BoxDelta) -> f64 {
    pred.to_array().iter().zip(target.to_array()).map(|(p, t)| smooth_l1(p - t)).sum()
}

/// Heading class target: 1 iff the ground-truth yaw is positive.
pub fn direction_target(theta_gt: f64) -> u8 {
    (theta_gt > 0.0) as u8
}

/// Binary cross-entropy between heading class `target` and estimate `p`.
pub fn direction_loss(target: u8, p: f64) -> Result<f64, RpnError> {
    open_unit(p)?;
    let t = f64::from(target.min(1));
    Ok(-(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub loc: f64,
    pub dir: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, loc: 2.0, dir: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub eta: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { eta: 0.25, gamma: 2.0 }
    }
}

/// `(b_cls L_cls + b_loc L_loc + b_dir L_dir) / N_pos`.
pub fn total_loss(cls: f64, loc: f64, dir: f64, n_pos: usize, w: LossWeights) -> Result<f64, RpnError> {
    if n_pos == 0 {
        return Err(RpnError::NoPositives);
    }
    Ok((w.cls * cls + w.loc * loc + w.dir * dir) / n_pos as f64)
}

/// A scored, classified box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub class: ObjectClass,
    pub score: f64,
    /// Heading class estimate in `[0, 1]`.
    pub direction: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn reference_graph_layout() {
        let g = build_rpn_graph(128).unwrap();
        assert_eq!(g.layers.len(), 21);
        let heads: Vec<_> = g.layers.iter().rev().take(2).map(|l| l.out_channels).collect();
        assert_eq!(heads, vec![2, 14]);
        let conv3: Vec<_> = g.layers.iter().filter(|l| l.block == Block::Conv(3)).collect();
        assert_eq!(conv3.len(), 6);
        assert!(conv3.iter().all(|l| l.out_channels == 512));
        let d3 = g.layers.iter().find(|l| l.block == Block::Deconv(3)).unwrap();
        assert_eq!((d3.kernel, d3.stride, d3.padding, d3.out_channels), (4, 4, 0, 256));
    }

    #[test]
    fn reference_shapes() {
        let g = build_rpn_graph(128).unwrap();
        let t = g.forward_shapes((128, 128, 144)).unwrap();
        assert_eq!(t.block_outputs, [(128, 64, 72), (256, 32, 36), (512, 16, 18)]);
        assert_eq!(t.branch_outputs, [(256, 64, 72); 3]);
        assert_eq!(t.concat, (768, 64, 72));
        assert_eq!(t.regression, (14, 64, 72));
        assert_eq!(t.classification, (2, 64, 72));
        assert!(g.forward_shapes((128, 100, 144)).is_err());
        assert!(g.forward_shapes((64, 128, 144)).is_err());
    }

    #[test]
    fn misaligned_strides_rejected_at_build() {
        let mut cfg = RpnConfig::reference(128);
        cfg.deconv_strides = [1, 2, 2];
        match cfg.build() {
            Err(RpnError::Shape { layer, .. }) => assert_eq!(layer, "DeConv3"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    fn tiny_config(input: usize) -> RpnConfig {
        RpnConfig {
            input_channels: input,
            block_layers: [2, 2, 2],
            block_channels: [4, 6, 8],
            block_strides: [2, 2, 2],
            deconv_channels: 3,
            deconv_kernels: [1, 2, 4],
            deconv_strides: [1, 2, 4],
            regression_channels: 14,
            classification_channels: 2,
        }
    }

    #[test]
    fn zero_input_zero_heads() {
        let g = tiny_config(3).build().unwrap();
        let w = RpnWeights::seeded(&g, 1);
        let out = forward(&g, &w, &PseudoImage::zeros(3, 16, 16)).unwrap();
        assert_eq!(out.regression.dim(), (14, 8, 8));
        assert_eq!(out.cls_logits.dim(), (2, 8, 8));
        assert!(out.regression.iter().chain(out.cls_logits.iter()).all(|&v| v == 0.0));
        assert!(out.score_map().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_is_deterministic_and_checks_weights() {
        let g = tiny_config(2).build().unwrap();
        let w = RpnWeights::seeded(&g, 4);
        let mut rng = SeededRng::new(3);
        let x = PseudoImage::from_array(Array3::from_shape_fn((2, 16, 24), |_| rng.uniform(0.0, 1.0) as f32));
        let a = forward(&g, &w, &x).unwrap();
        assert_eq!(a, forward(&g, &w, &x).unwrap());
        assert!(a.regression.iter().any(|&v| v != 0.0));
        let other = RpnWeights::seeded(&tiny_config(3).build().unwrap(), 4);
        assert!(matches!(forward(&g, &other, &x), Err(RpnError::Weights(_))));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let c = 3;
        let mut k = Array4::<f32>::zeros((c, c, 3, 3));
        for i in 0..c {
            k[[i, i, 1, 1]] = 1.0;
        }
        let mut rng = SeededRng::new(1);
        let x = Array3::from_shape_fn((c, 5, 6), |_| rng.uniform(0.0, 2.0) as f32);
        let mut y = conv2d(&x, &k, &Array1::zeros(c), 1, 1);
        batch_norm_relu(&mut y, &BatchNorm::unit(c));
        assert_eq!(y, x);
    }

    #[test]
    fn strided_conv_against_scalar_loop() {
        let mut rng = SeededRng::new(12);
        let (ci, co) = (3, 4);
        let x = Array3::from_shape_fn((ci, 8, 8), |_| rng.uniform(-1.0, 1.0) as f32);
        let k = Array4::from_shape_fn((co, ci, 3, 3), |_| rng.uniform(-1.0, 1.0) as f32);
        let b = Array1::from_shape_fn(co, |_| rng.uniform(-1.0, 1.0) as f32);
        let y = conv2d(&x, &k, &b, 2, 1);
        assert_eq!(y.dim(), (co, 4, 4));
        // padded copy, then plain windowed sums in f64
        let mut p = vec![vec![vec![0.0f64; 10]; 10]; ci];
        for i in 0..ci {
            for r in 0..8 {
                for c in 0..8 {
                    p[i][r + 1][c + 1] = x[[i, r, c]] as f64;
                }
            }
        }
        for o in 0..co {
            for r in 0..4 {
                for c in 0..4 {
                    let mut s = b[o] as f64;
                    for i in 0..ci {
                        for a in 0..3 {
                            for e in 0..3 {
                                s += p[i][2 * r + a][2 * c + e] * k[[o, i, a, e]] as f64;
                            }
                        }
                    }
                    assert!((y[[o, r, c]] as f64 - s).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn transposed_conv_against_gather_form() {
        let mut rng = SeededRng::new(13);
        let (ci, co, s, kk) = (2, 3, 2, 2);
        let x = Array3::from_shape_fn((ci, 3, 4), |_| rng.uniform(-1.0, 1.0) as f32);
        let k = Array4::from_shape_fn((ci, co, kk, kk), |_| rng.uniform(-1.0, 1.0) as f32);
        let b = Array1::from_shape_fn(co, |_| rng.uniform(-1.0, 1.0) as f32);
        let y = conv_transpose2d(&x, &k, &b, s, 0);
        assert_eq!(y.dim(), (co, 6, 8));
        for o in 0..co {
            for oy in 0..6 {
                for ox in 0..8 {
                    let mut acc = b[o] as f64;
                    for i in 0..ci {
                        for iy in 0..3 {
                            for ix in 0..4 {
                                let (dy, dx) = (oy as isize - (iy * s) as isize, ox as isize - (ix * s) as isize);
                                if (0..kk as isize).contains(&dy) && (0..kk as isize).contains(&dx) {
                                    acc += x[[i, iy, ix]] as f64 * k[[i, o, dy as usize, dx as usize]] as f64;
                                }
                            }
                        }
                    }
                    assert!((y[[o, oy, ox]] as f64 - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn table_mentions_every_layer() {
        let t = build_rpn_graph(128).unwrap().render_table();
        assert_eq!(t.lines().count(), 22);
        assert!(t.contains("DeConv3        | Deconv2D | 4x4         | 256      | 4      | 0"));
    }

    #[test]
    fn anchor_generation() {
        let a = generate_anchors(&PillarGrid::default(), &AnchorClassSpec::DEFAULTS);
        assert_eq!(a.len(), 64 * 72 * 4);
        let car = a.iter().find(|x| x.class == ObjectClass::Car).unwrap();
        assert_eq!(car.bbox.h, 1.56);
        assert_eq!(car.bbox.center[2], -1.78);
        let truck = a.iter().find(|x| x.class == ObjectClass::Truck).unwrap();
        assert_eq!(truck.bbox.center[2], -1.5);
        assert_eq!((truck.bbox.w, truck.bbox.l, truck.bbox.h), (1.9, 4.9, 2.05));
        assert_eq!(a[1].bbox.yaw, std::f64::consts::FRAC_PI_2);
    }

    fn car_anchor(x: f64, y: f64) -> Anchor {
        Anchor {
            bbox: Box3D { center: [x, y, -1.78], w: 1.6, l: 3.9, h: 1.56, yaw: 0.0 },
            orientation: 0,
            class: ObjectClass::Car,
            row: 0,
            col: 0,
        }
    }

    #[test]
    fn anchor_matching_examples() {
        let gt = (car_anchor(0.0, 0.0).bbox, ObjectClass::Car);
        // along-length offset d gives IoU (3.9 - d) / (3.9 + d); d = 1.3 -> 0.5
        let anchors = [car_anchor(0.0, 0.0), car_anchor(100.0, 0.0), car_anchor(1.3, 0.0)];
        assert_abs_diff_eq!(bev_iou(&anchors[2].bbox, &gt.0).unwrap(), 0.5, epsilon = 1e-12);
        let labels = match_anchors(&anchors, &[gt], MatchThresholds::default()).unwrap();
        assert_eq!(labels, vec![AnchorLabel::Positive { gt: 0 }, AnchorLabel::Negative, AnchorLabel::Ignored]);
    }

    #[test]
    fn best_anchor_is_positive_even_below_threshold() {
        let gt = (Box3D { center: [0.0, 0.0, 0.0], w: 1.6, l: 3.9, h: 1.5, yaw: 0.0 }, ObjectClass::Car);
        let anchors = [car_anchor(2.0, 0.0), car_anchor(3.0, 0.0)];
        let labels = match_anchors(&anchors, &[gt], MatchThresholds::default()).unwrap();
        assert_eq!(labels[0], AnchorLabel::Positive { gt: 0 });
        assert_eq!(labels[1], AnchorLabel::Negative);
        // class-aware
        let truck_gt = (gt.0, ObjectClass::Truck);
        let labels = match_anchors(&anchors, &[truck_gt], MatchThresholds::default()).unwrap();
        assert_eq!(labels, vec![AnchorLabel::Negative; 2]);
    }

    #[test]
    fn delta_examples() {
        let a = car_anchor(0.0, 0.0).bbox;
        let z = encode_delta(&a, &a).unwrap();
        assert_eq!(z.to_array(), [0.0; 7]);
        let mut g = a;
        g.center[0] += 1.0;
        let d = encode_delta(&a, &g).unwrap();
        assert_abs_diff_eq!(a.w.hypot(a.l), 4.2154, epsilon = 1e-4);
        assert_abs_diff_eq!(d.dx, 0.2372, epsilon = 1e-4);
        let bad = Box3D { w: 0.0, ..a };
        assert!(encode_delta(&bad, &a).is_err());
    }

    proptest! {
        #[test]
        fn delta_round_trip(
            ax in -30.0..30.0f64, ay in -30.0..30.0f64, ayaw in -1.5..1.5f64,
            gx in -3.0..3.0f64, gy in -3.0..3.0f64, gz in -1.0..1.0f64,
            gw in 0.5..3.0f64, gl in 1.0..8.0f64, gh in 0.5..3.0f64, dyaw in -1.5..1.5f64,
        ) {
            let a = Box3D { center: [ax, ay, -1.78], w: 1.6, l: 3.9, h: 1.56, yaw: ayaw };
            let g = Box3D { center: [ax + gx, ay + gy, gz], w: gw, l: gl, h: gh, yaw: ayaw + dyaw };
            let back = decode_delta(&a, &encode_delta(&a, &g).unwrap()).unwrap();
            for k in 0..3 {
                prop_assert!((back.center[k] - g.center[k]).abs() < 1e-9);
            }
            prop_assert!((back.w - g.w).abs() < 1e-9 && (back.l - g.l).abs() < 1e-9 && (back.h - g.h).abs() < 1e-9);
            prop_assert!((back.yaw - g.yaw).abs() < 1e-9);
        }

        #[test]
        fn smooth_l1_is_even(x in -10.0..10.0f64) {
            prop_assert_eq!(smooth_l1(x), smooth_l1(-x));
        }
    }

    #[test]
    fn focal_loss_values() {
        assert_abs_diff_eq!(focal_loss(0.5, 0.25, 2.0).unwrap(), 0.25 * 0.25 * 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(focal_loss(0.5, 0.25, 2.0).unwrap(), 0.04333, epsilon = 1e-5);
        assert!(focal_loss(1.0 - 1e-12, 0.25, 2.0).unwrap() < 1e-20);
        assert_abs_diff_eq!(focal_loss(0.3, 1.0, 0.0).unwrap(), -(0.3f64.ln()), epsilon = 1e-15);
        assert!(focal_loss(0.0, 0.25, 2.0).is_err());
        assert!(focal_loss(1.0, 0.25, 2.0).is_err());
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let v = focal_loss(i as f64 / 100.0, 0.25, 2.0).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn smooth_l1_values_and_derivative() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_abs_diff_eq!(smooth_l1(1.0 - 1e-12), 0.5, epsilon = 1e-11);
        let h = 1e-6;
        for &x in &[-3.0, -1.5, -0.7, -0.2, 0.0, 0.3, 0.9, 1.2, 4.0] {
            let fd = (smooth_l1(x + h) - smooth_l1(x - h)) / (2.0 * h);
            let exact: f64 = if f64::abs(x) < 1.0 { x } else { f64::signum(x) };
            assert!((fd - exact).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn localization_loss_values() {
        let z = BoxDelta::from_array([0.3; 7]);
        assert_eq!(localization_loss(&z, &z), 0.0);
        let t = BoxDelta::from_array([0.0; 7]);
        assert_eq!(localization_loss(&BoxDelta::from_array([0.5; 7]), &t), 0.875);
        assert_eq!(localization_loss(&BoxDelta::from_array([-0.5; 7]), &t), 0.875);
    }

    #[test]
    fn direction_loss_values() {
        assert!(direction_loss(1, 1.0 - 1e-12).unwrap() < 1e-11);
        assert_abs_diff_eq!(direction_loss(0, 0.5).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(direction_loss(1, 0.3).unwrap(), direction_loss(0, 0.7).unwrap(), epsilon = 1e-15);
        assert!(direction_loss(0, 1.0).is_err());
        assert_eq!(direction_target(0.1), 1);
        assert_eq!(direction_target(0.0), 0);
        assert_eq!(direction_target(-2.0), 0);
    }

    #[test]
    fn total_loss_values() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 3, w).unwrap(), 0.0);
        assert_eq!(total_loss(0.1, 0.2, 0.5, 2, w).unwrap(), 0.3);
        let one = total_loss(0.4, 0.9, 0.3, 1, w).unwrap();
        let two = total_loss(0.4, 0.9, 0.3, 2, w).unwrap();
        assert_abs_diff_eq!(two, one / 2.0, epsilon = 1e-15);
        assert_eq!(total_loss(1.0, 1.0, 1.0, 0, w), Err(RpnError::NoPositives));
    }
}
