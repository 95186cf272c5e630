//! Building blocks the network topologies are assembled from: the three
//! convolution block designs, the multi-kernel input stage, attention gates,
//! the three deep-supervision signal chains, and the classification head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchNormLayer, ConvKernelRef, NodeId, ParamId, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Activation used inside the blocks.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    PRelu,
}

/// One activation application; PReLU owns a learned slope per channel.
#[derive(Clone, Debug)]
pub struct ActLayer {
    kind: Activation,
    slopes: Option<ParamId>,
}

impl ActLayer {
    pub fn create<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        kind: Activation,
    ) -> Self {
        let slopes = match kind {
            Activation::Relu => None,
            Activation::PRelu => Some(params.add(
                &format!("{name}.slopes"),
                vec![T::of(0.25); channels],
                true,
            )),
        };
        Self { kind, slopes }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        match self.kind {
            Activation::Relu => Ok(tape.relu(x)),
            Activation::PRelu => tape.prelu(params, x, self.slopes.expect("prelu slopes")),
        }
    }
}

/// Plain block: two 3x3 convolutions, then batch normalisation, then the
/// activation.
#[derive(Clone, Debug)]
pub struct UBlock {
    conv1: ConvKernelRef,
    conv2: ConvKernelRef,
    bn: BatchNormLayer,
    act: ActLayer,
    out_channels: usize,
}

impl UBlock {
    pub fn create<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        act: Activation,
    ) -> Self {
        let conv1 =
            ConvKernelRef::create(params, rng, &format!("{name}.conv1"), 3, 3, in_channels, out_channels);
        let conv2 =
            ConvKernelRef::create(params, rng, &format!("{name}.conv2"), 3, 3, out_channels, out_channels);
        let bn = BatchNormLayer::create(params, &format!("{name}.bn"), out_channels);
        let act = ActLayer::create(params, &format!("{name}.act"), out_channels, act);
        Self { conv1, conv2, bn, act, out_channels }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = tape.conv2d(params, x, &self.conv1)?;
        let h = tape.conv2d(params, h, &self.conv2)?;
        let h = tape.batchnorm(params, h, &self.bn)?;
        self.act.forward(tape, params, h)
    }
}

/// Stacked block: two or three 3x3 convolutions, each immediately followed
/// by the activation.
#[derive(Clone, Debug)]
pub struct VBlock {
    convs: Vec<(ConvKernelRef, ActLayer)>,
    out_channels: usize,
}

impl VBlock {
    pub fn create<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        depth: usize,
        act: Activation,
    ) -> Result<Self> {
        if !(2..=3).contains(&depth) {
            return Err(Error::InvalidTopology(format!(
                "stacked block depth must be 2 or 3, got {depth}"
            )));
        }
        let mut convs = Vec::new();
        let mut c_in = in_channels;
        for i in 0..depth {
            let conv = ConvKernelRef::create(
                params,
                rng,
                &format!("{name}.conv{}", i + 1),
                3,
                3,
                c_in,
                out_channels,
            );
            let act = ActLayer::create(params, &format!("{name}.act{}", i + 1), out_channels, act);
            convs.push((conv, act));
            c_in = out_channels;
        }
        Ok(Self { convs, out_channels })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = x;
        for (conv, act) in &self.convs {
            h = tape.conv2d(params, h, conv)?;
            h = act.forward(tape, params, h)?;
        }
        Ok(h)
    }
}

/// Densely connected block: three layers of batch normalisation, activation,
/// then convolution (kernels 5x5, 3x3, 1x1), where each layer consumes the
/// block input concatenated with all previous layer outputs. Every layer
/// produces `width` channels and the block output is the last layer's.
#[derive(Clone, Debug)]
pub struct QBlock {
    layers: Vec<(BatchNormLayer, ActLayer, ConvKernelRef)>,
    out_channels: usize,
}

impl QBlock {
    pub fn create<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        width: usize,
        act: Activation,
    ) -> Self {
        let kernel_sizes = [5usize, 3, 1];
        let mut layers = Vec::new();
        let mut c_in = in_channels;
        for (i, &k) in kernel_sizes.iter().enumerate() {
            let bn = BatchNormLayer::create(params, &format!("{name}.bn{}", i + 1), c_in);
            let a = ActLayer::create(params, &format!("{name}.act{}", i + 1), c_in, act);
            let conv =
                ConvKernelRef::create(params, rng, &format!("{name}.conv{}", i + 1), k, k, c_in, width);
            layers.push((bn, a, conv));
            c_in += width;
        }
        Self { layers, out_channels: width }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut inputs = vec![x];
        let mut last = x;
        for (bn, act, conv) in &self.layers {
            let cat = if inputs.len() == 1 { inputs[0] } else { tape.concat_channels(&inputs)? };
            let h = tape.batchnorm(params, cat, bn)?;
            let h = act.forward(tape, params, h)?;
            last = tape.conv2d(params, h, conv)?;
            inputs.push(last);
        }
        Ok(last)
    }
}

/// A convolution block of any of the three designs.
#[derive(Clone, Debug)]
pub enum ConvBlock {
    U(UBlock),
    V(VBlock),
    Q(QBlock),
}

impl ConvBlock {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        match self {
            ConvBlock::U(b) => b.forward(tape, params, x),
            ConvBlock::V(b) => b.forward(tape, params, x),
            ConvBlock::Q(b) => b.forward(tape, params, x),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ConvBlock::U(b) => b.out_channels,
            ConvBlock::V(b) => b.out_channels,
            ConvBlock::Q(b) => b.out_channels,
        }
    }
}

/// Input stage that looks at the image through four kernel sizes (1, 3, 5
/// and 7) in parallel and concatenates the responses.
#[derive(Clone, Debug)]
pub struct MultiKernelInput {
    branches: Vec<ConvKernelRef>,
    out_channels: usize,
}

impl MultiKernelInput {
    pub fn create<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        if out_channels % 4 != 0 {
            return Err(Error::InvalidTopology(format!(
                "multi-kernel input needs a channel count divisible by 4, got {out_channels}"
            )));
        }
        let per_branch = out_channels / 4;
        let branches = [1usize, 3, 5, 7]
            .iter()
            .map(|&k| {
                ConvKernelRef::create(
                    params,
                    rng,
                    &format!("{name}.k{k}"),
                    k,
                    k,
                    in_channels,
                    per_branch,
                )
            })
            .collect();
        Ok(Self { branches, out_channels })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let outs: Vec<NodeId> = self
            .branches
            .iter()
            .map(|b| tape.conv2d(params, x, b))
            .collect::<Result<_>>()?;
        tape.concat_channels(&outs)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
}

/// Attention gate: combines an encoder feature with the coarser decoder
/// feature one level below to produce a single-channel spatial mask, and
/// returns the encoder feature weighted by that mask.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    enc_proj: ConvKernelRef,
    dec_proj: ConvKernelRef,
    mask_conv: ConvKernelRef,
}

impl AttentionGate {
    pub fn create<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        enc_channels: usize,
        dec_channels: usize,
    ) -> Self {
        let enc_proj =
            ConvKernelRef::create(params, rng, &format!("{name}.enc"), 1, 1, enc_channels, dec_channels);
        let dec_proj =
            ConvKernelRef::create(params, rng, &format!("{name}.dec"), 1, 1, dec_channels, dec_channels);
        let mask_conv =
            ConvKernelRef::create(params, rng, &format!("{name}.mask"), 1, 1, dec_channels, 1);
        Self { enc_proj, dec_proj, mask_conv }
    }

    /// `enc` is the skip feature at full level resolution; `dec` is the
    /// decoder feature one level coarser (half the spatial size).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        enc: NodeId,
        dec: NodeId,
    ) -> Result<NodeId> {
        let g = tape.upsample_nearest2x(dec);
        let a = tape.conv2d(params, enc, &self.enc_proj)?;
        let b = tape.conv2d(params, g, &self.dec_proj)?;
        let s = tape.add(a, b)?;
        let s = tape.relu(s);
        let m = tape.conv2d(params, s, &self.mask_conv)?;
        let mask = tape.sigmoid(m);
        tape.mul_mask(enc, mask)
    }
}

/// Bottom-up deep-supervision chain: projects every encoder feature
/// (including the bottleneck) to `m` channels and accumulates them from the
/// bottleneck upwards, upsampling at each level. The resulting signals
/// replace the skip connections.
#[derive(Clone, Debug)]
pub struct DsUpChain {
    projections: Vec<ConvKernelRef>,
}

impl DsUpChain {
    pub fn create<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        enc_channels: &[usize; 5],
        m: usize,
    ) -> Self {
        let projections = enc_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                ConvKernelRef::create(params, rng, &format!("{name}.proj{}", i + 1), 1, 1, c, m)
            })
            .collect();
        Self { projections }
    }

    /// `enc` holds the encoder features for levels 1..=4 plus the bottleneck
    /// at index 4. Returns the signals for levels 1..=5 (index 4 is the
    /// projected bottleneck).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        enc: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let mut current = tape.conv2d(params, enc[4], &self.projections[4])?;
        let mut signals = vec![current];
        for n in (0..4).rev() {
            let proj = tape.conv2d(params, enc[n], &self.projections[n])?;
            let up = tape.upsample_nearest2x(current);
            current = tape.add(proj, up)?;
            signals.push(current);
        }
        signals.reverse();
        Ok(signals)
    }
}

/// Top-down deep-supervision chain: projects the encoder features for
/// levels 1..=4 to `m` channels and accumulates them from the top level
/// downwards, max-pooling at each step. The resulting signals replace the
/// skip connections.
#[derive(Clone, Debug)]
pub struct DsDownChain {
    projections: Vec<ConvKernelRef>,
}

impl DsDownChain {
    pub fn create<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        enc_channels: &[usize; 4],
        m: usize,
    ) -> Self {
        let projections = enc_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                ConvKernelRef::create(params, rng, &format!("{name}.proj{}", i + 1), 1, 1, c, m)
            })
            .collect();
        Self { projections }
    }

    /// `enc` holds the encoder features for levels 1..=4. Returns signals
    /// for those levels.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        enc: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let mut signals = Vec::with_capacity(4);
        signals.push(tape.conv2d(params, enc[0], &self.projections[0])?);
        for n in 1..4 {
            let proj = tape.conv2d(params, enc[n], &self.projections[n])?;
            let down = tape.maxpool2x(signals[n - 1])?;
            signals.push(tape.add(proj, down)?);
        }
        Ok(signals)
    }
}

/// Decoder-side deep-supervision chain: projects the bottleneck and every
/// decoder feature to 64 channels and accumulates them upwards to full
/// resolution. The final signal feeds the classification head.
#[derive(Clone, Debug)]
pub struct DsHeadChain {
    projections: Vec<ConvKernelRef>,
    width: usize,
}

pub const DS_HEAD_WIDTH: usize = 64;

impl DsHeadChain {
    /// `feat_channels` lists the channel counts of the decoder features for
    /// levels 1..=4 followed by the bottleneck's.
    pub fn create<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        feat_channels: &[usize; 5],
        width: usize,
    ) -> Self {
        let projections = feat_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                ConvKernelRef::create(params, rng, &format!("{name}.proj{}", i + 1), 1, 1, c, width)
            })
            .collect();
        Self { projections, width }
    }

    /// `bottleneck` is the deepest feature; `dec` holds the decoder features
    /// for levels 1..=4 (index 0 at full resolution). Returns all signals,
    /// full resolution first.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        bottleneck: NodeId,
        dec: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let mut z = tape.conv2d(params, bottleneck, &self.projections[4])?;
        let mut signals = vec![z];
        for n in (0..4).rev() {
            let proj = tape.conv2d(params, dec[n], &self.projections[n])?;
            let up = tape.upsample_nearest2x(z);
            z = tape.add(proj, up)?;
            signals.push(z);
        }
        signals.reverse();
        Ok(signals)
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Classification head: a 1x1 convolution to one channel per class followed
/// by a channel-wise softmax.
#[derive(Clone, Debug)]
pub struct ClassificationHead {
    conv: ConvKernelRef,
    num_classes: usize,
}

impl ClassificationHead {
    pub fn create<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        num_classes: usize,
    ) -> Self {
        let conv = ConvKernelRef::create(params, rng, &format!("{name}.conv"), 1, 1, in_channels, num_classes);
        Self { conv, num_classes }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let logits = tape.conv2d(params, x, &self.conv)?;
        Ok(tape.softmax_channelwise(logits))
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}
