//! Deeply supervised HED-style predictors over three-slice windows.

mod infer;
mod inputs;
mod train;

pub use infer::{assemble, predict_volume, SliceInputs};
pub use inputs::{corr_map, slice_inputs, volume_samples, MapStats, Predictor};
pub use train::{balanced_bce, train_predictor, validation_loss, History, PredictorTrainConfig, Sample};

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numcore::{seeded_rng, BatchNormState, Graph, NormMode, Tensor, Var, WeightFile};

/// Conv layers per VGG block.
pub const CONVS_PER_BLOCK: [usize; 5] = [2, 2, 3, 3, 3];
/// Standard VGG-16 filter widths.
pub const VGG_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
/// Slices per input window.
pub const WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Single stream of CorrNet maps.
    Hed3,
    /// T2W, ADC and CorrNet streams through private blocks 1–3, then shared
    /// blocks 4–5.
    HedBranch3,
}

impl Variant {
    pub fn n_sides(self) -> usize {
        match self {
            Variant::Hed3 => 5,
            Variant::HedBranch3 => 11,
        }
    }

    /// Input channel count of each stream for CorrNet dimension `k`.
    pub fn stream_channels(self, k: usize) -> Vec<usize> {
        match self {
            Variant::Hed3 => vec![WINDOW * k],
            Variant::HedBranch3 => vec![WINDOW, WINDOW, WINDOW * k],
        }
    }

    fn stream_names(self) -> &'static [&'static str] {
        match self {
            Variant::Hed3 => &["corr"],
            Variant::HedBranch3 => &["t2w", "adc", "corr"],
        }
    }

    /// Blocks private to each stream.
    fn private_blocks(self) -> usize {
        match self {
            Variant::Hed3 => 5,
            Variant::HedBranch3 => 3,
        }
    }

    /// Display name in the style `CorrSigNet(T2W, ADC, k)`.
    pub fn label(self, k: usize) -> String {
        match self {
            Variant::Hed3 => format!("CorrSigNet({k})"),
            Variant::HedBranch3 => format!("CorrSigNet(T2W, ADC, {k})"),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Hed3 => "hed3",
            Variant::HedBranch3 => "hedbranch3",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hed3" => Ok(Variant::Hed3),
            "hedbranch3" => Ok(Variant::HedBranch3),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected hed3 or hedbranch3)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvRef {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockRef {
    convs: Vec<ConvRef>,
    gamma: usize,
    beta: usize,
    bn: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    /// `streams[s][b]` for the private blocks.
    streams: Vec<Vec<BlockRef>>,
    shared: Vec<BlockRef>,
    sides: Vec<ConvRef>,
    fuse: ConvRef,
}

/// Network parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub variant: Variant,
    pub k: usize,
    pub widths: [usize; 5],
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub bn: Vec<BatchNormState>,
    layout: Layout,
}

/// Pre-sigmoid outputs, each `[N, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub sides: Vec<Var>,
    pub fused: Var,
}

impl Outputs {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.sides.iter().copied().chain(std::iter::once(self.fused))
    }
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    bn: Vec<usize>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, kernel: usize) -> ConvRef {
        ConvRef {
            weight: self.add(format!("{prefix}.weight"), vec![cout, cin, kernel, kernel]),
            bias: self.add(format!("{prefix}.bias"), vec![cout]),
        }
    }

    fn block(&mut self, prefix: &str, n_convs: usize, cin: usize, width: usize) -> BlockRef {
        let convs = (0..n_convs)
            .map(|i| self.conv(&format!("{prefix}.conv{}", i + 1), if i == 0 { cin } else { width }, width, 3))
            .collect();
        self.bn.push(width);
        BlockRef {
            convs,
            gamma: self.add(format!("{prefix}.bn.gamma"), vec![width]),
            beta: self.add(format!("{prefix}.bn.beta"), vec![width]),
            bn: self.bn.len() - 1,
        }
    }
}

fn layout(variant: Variant, k: usize, widths: [usize; 5]) -> (Layout, Builder) {
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        bn: Vec::new(),
    };
    let private = variant.private_blocks();
    let mut streams = Vec::new();
    let mut sides = Vec::new();
    for (name, cin) in variant.stream_names().iter().zip(variant.stream_channels(k)) {
        let mut blocks = Vec::new();
        let mut c = cin;
        for i in 0..private {
            blocks.push(b.block(&format!("{name}.block{}", i + 1), CONVS_PER_BLOCK[i], c, widths[i]));
            sides.push(b.conv(&format!("side.{name}.block{}", i + 1), widths[i], 1, 1));
            c = widths[i];
        }
        streams.push(blocks);
    }
    let mut shared = Vec::new();
    let mut c = widths[private.saturating_sub(1)] * streams.len();
    for i in private..5 {
        shared.push(b.block(&format!("shared.block{}", i + 1), CONVS_PER_BLOCK[i], c, widths[i]));
        sides.push(b.conv(&format!("side.shared.block{}", i + 1), widths[i], 1, 1));
        c = widths[i];
    }
    let fuse = b.conv("fuse", sides.len(), 1, 1);
    (
        Layout {
            streams,
            shared,
            sides,
            fuse,
        },
        b,
    )
}

impl PredictorModel {
    /// He-initialised network; identical seeds give identical parameters.
    pub fn build(variant: Variant, k: usize, widths: [usize; 5], seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("predictor k must be >= 1".into()));
        }
        if widths.contains(&0) {
            return Err(Error::Config("predictor widths must be positive".into()));
        }
        let (layout, b) = layout(variant, k, widths);
        let mut rng = seeded_rng(seed);
        let n_sides = layout.sides.len();
        let params = b
            .names
            .iter()
            .zip(&b.shapes)
            .map(|(name, shape)| {
                if name.ends_with(".bn.gamma") {
                    Tensor::ones(shape.clone())
                } else if name.ends_with(".bias") || name.ends_with(".bn.beta") {
                    Tensor::zeros(shape.clone())
                } else if name == "fuse.weight" {
                    Tensor::full(shape.clone(), 1.0 / n_sides as f32)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    Tensor::rand_normal(shape.clone(), (2.0 / fan_in as f64).sqrt(), &mut rng)
                }
            })
            .collect();
        Ok(Self {
            variant,
            k,
            widths,
            names: b.names,
            params,
            bn: b.bn.iter().map(|&c| BatchNormState::new(c)).collect(),
            layout,
        })
    }

    pub fn n_sides(&self) -> usize {
        self.layout.sides.len()
    }

    pub fn n_streams(&self) -> usize {
        self.layout.streams.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Indices of the side-head parameters, in tap order.
    pub fn side_param_indices(&self) -> Vec<[usize; 2]> {
        self.layout.sides.iter().map(|c| [c.weight, c.bias]).collect()
    }

    /// Checks per-stream `[N, C, H, W]` inputs against the model.
    pub fn check_inputs(&self, shapes: &[&[usize]]) -> Result<(usize, usize, usize)> {
        let want = self.variant.stream_channels(self.k);
        if shapes.len() != want.len() {
            return Err(dim_err!(
                "{} expects {} input streams, got {}",
                self.variant,
                want.len(),
                shapes.len()
            ));
        }
        let (n, h, w) = match shapes[0] {
            &[n, _, h, w] => (n, h, w),
            s => return Err(dim_err!("stream input must be [N, C, H, W], got {s:?}")),
        };
        for (s, &c) in shapes.iter().zip(&want) {
            if *s != [n, c, h, w] {
                return Err(dim_err!("stream input {s:?}, expected [{n}, {c}, {h}, {w}]"));
            }
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(dim_err!("input extent {h}x{w} must be divisible by 16"));
        }
        Ok((n, h, w))
    }

    /// Registers parameters on `g`; they receive gradients iff `trainable`.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    fn block(&mut self, g: &mut Graph, p: &[Var], blk: &BlockRef, mut x: Var, mode: NormMode) -> Result<Var> {
        let last = blk.convs.len() - 1;
        for (i, c) in blk.convs.iter().enumerate() {
            x = g.conv2d(x, p[c.weight], Some(p[c.bias]), 1, 1)?;
            if i == last {
                x = g.batchnorm(x, p[blk.gamma], p[blk.beta], mode, &mut self.bn[blk.bn])?;
            }
            x = g.relu(x);
        }
        Ok(x)
    }

    fn side(g: &mut Graph, p: &[Var], head: &ConvRef, x: Var, hw: (usize, usize)) -> Result<Var> {
        let s = g.conv2d(x, p[head.weight], Some(p[head.bias]), 1, 0)?;
        if (g.shape(s)[2], g.shape(s)[3]) == hw {
            Ok(s)
        } else {
            g.upsample(s, hw)
        }
    }

    /// Forward pass from stream inputs to pre-sigmoid side and fused maps.
    /// Train mode updates batch-norm running statistics.
    pub fn forward(&mut self, g: &mut Graph, p: &[Var], inputs: &[Var], mode: NormMode) -> Result<Outputs> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|&v| g.shape(v)).collect();
        let (_, h, w) = self.check_inputs(&shapes)?;
        let layout = self.layout.clone();
        let mut taps = layout.sides.iter();
        let mut sides = Vec::with_capacity(layout.sides.len());
        let mut ends = Vec::with_capacity(inputs.len());
        for (blocks, &input) in layout.streams.iter().zip(inputs) {
            let mut x = input;
            for (i, blk) in blocks.iter().enumerate() {
                if i > 0 {
                    x = g.maxpool2d(x, 2, 2)?;
                }
                x = self.block(g, p, blk, x, mode)?;
                sides.push(Self::side(g, p, taps.next().unwrap(), x, (h, w))?);
            }
            ends.push(x);
        }
        if !layout.shared.is_empty() {
            let mut x = if ends.len() == 1 { ends[0] } else { g.concat(&ends)? };
            for blk in &layout.shared {
                x = g.maxpool2d(x, 2, 2)?;
                x = self.block(g, p, blk, x, mode)?;
                sides.push(Self::side(g, p, taps.next().unwrap(), x, (h, w))?);
            }
        }
        let stacked = g.concat(&sides)?;
        let fused = g.conv2d(stacked, p[layout.fuse.weight], Some(p[layout.fuse.bias]), 1, 0)?;
        Ok(Outputs { sides, fused })
    }

    /// Eval-mode probabilities for a batch of stream inputs: `(sides, fused)`
    /// as `[N, H, W]` tensors.
    pub fn predict(&mut self, inputs: &[Tensor]) -> Result<(Vec<Tensor>, Tensor)> {
        let mut g = Graph::new();
        let p = self.register(&mut g, false);
        let x: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward(&mut g, &p, &x, NormMode::Eval)?;
        let prob = |g: &mut Graph, v: Var| -> Result<Tensor> {
            let s = g.sigmoid(v);
            let shape = g.shape(s).to_vec();
            g.value(s).clone().reshape([shape[0], shape[2], shape[3]])
        };
        let sides = out.sides.iter().map(|&v| prob(&mut g, v)).collect::<Result<_>>()?;
        let fused = prob(&mut g, out.fused)?;
        Ok((sides, fused))
    }

    pub fn to_weight_file(&self, extra: serde_json::Value) -> WeightFile {
        let mut meta = serde_json::json!({
            "variant": self.variant,
            "k": self.k,
            "widths": self.widths,
        });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        let mut wf = WeightFile::new(meta);
        for (n, t) in self.names.iter().zip(&self.params) {
            wf.push(n.clone(), t.clone());
        }
        for (i, s) in self.bn.iter().enumerate() {
            let c = s.running_mean.len();
            let f = |v: &[f64]| Tensor::new([c], v.iter().map(|&x| x as f32).collect()).unwrap();
            wf.push(format!("bn{i}.running_mean"), f(&s.running_mean));
            wf.push(format!("bn{i}.running_var"), f(&s.running_var));
        }
        wf
    }

    pub fn from_weight_file(wf: &WeightFile) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            variant: Variant,
            k: usize,
            widths: [usize; 5],
        }
        let m: Meta = serde_json::from_value(wf.metadata.clone())
            .map_err(|e| Error::Data(format!("predictor checkpoint metadata: {e}")))?;
        let mut model = Self::build(m.variant, m.k, m.widths, 0)?;
        for (n, t) in model.names.iter().zip(model.params.iter_mut()) {
            *t = wf.expect(n, t.shape())?.clone();
        }
        for (i, s) in model.bn.iter_mut().enumerate() {
            let c = [s.running_mean.len()];
            let get = |name: String| -> Result<Vec<f64>> {
                Ok(wf.expect(&name, &c)?.data().iter().map(|&v| v as f64).collect())
            };
            s.running_mean = get(format!("bn{i}.running_mean"))?;
            s.running_var = get(format!("bn{i}.running_var"))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        self.to_weight_file(extra).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weight_file(&WeightFile::load(path)?)
    }
}
