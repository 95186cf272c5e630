//! Declarative network construction: a [`TopologySpec`] names which blocks
//! to combine, [`Network::build`] assembles the parameterised model, and
//! [`Network::forward`] runs it while recording every intermediate feature.
//!
//! Networks are four-level encoder/decoder pyramids joined by a bottleneck.
//! Encoder level n produces feature `C_n`; the bottleneck produces `C_5`.
//! On the way up, level n receives `D_n = concat(S_n, up(T_{n+1}))` where
//! `S_n` is the fusion signal (plain skip, attention-gated skip, or a
//! deep-supervision signal) and `T_n` is the decoder block output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvKernelRef, Mode, NodeId, ParamSet, Tape};
use crate::blocks::{
    Activation, AttentionGate, ClassificationHead, ConvBlock, DsDownChain, DsHeadChain,
    DsUpChain, MultiKernelInput, QBlock, UBlock, VBlock, DS_HEAD_WIDTH,
};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Channel width the densely connected block design uses at every level.
pub const Q_WIDTH: usize = 64;
/// Number of pyramid levels above the bottleneck.
pub const LEVELS: usize = 4;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    U,
    V,
    Q,
}

fn default_depth() -> usize {
    LEVELS
}

fn default_m() -> usize {
    64
}

fn default_classes() -> usize {
    12
}

/// Declarative description of a network variant.
///
/// The flags select optional blocks: `multi_kernel` widens the input stage,
/// `attention` gates the skip connections, `ds_v1`/`ds_v2` replace the skip
/// connections with accumulated supervision signals (bottom-up and top-down
/// respectively), and `ds_v3` accumulates decoder features into the
/// classification head's input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub id: String,
    pub conv_kind: ConvKind,
    #[serde(default)]
    pub multi_kernel: bool,
    #[serde(default)]
    pub attention: bool,
    #[serde(default)]
    pub ds_v1: bool,
    #[serde(default)]
    pub ds_v2: bool,
    #[serde(default)]
    pub ds_v3: bool,
    /// Channel count of the first encoder level; doubled at each descent.
    #[serde(default = "default_m")]
    pub m: usize,
    /// Pyramid depth above the bottleneck; fixed at 4 in this version.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub activation: Activation,
}

/// The twelve named variants, in the order they are usually reported.
pub const NAMED_IDS: [&str; 12] = [
    "U1", "UA", "UD", "UAD", "UMD", "UAMD", "UVMD", "UVDD", "UQD", "UDD", "UMDD", "UDD2",
];

impl TopologySpec {
    /// Expands one of the named variant IDs to its full configuration
    /// (base width 64, 12 classes).
    pub fn named(id: &str) -> Result<Self> {
        let mut spec = Self {
            id: id.to_string(),
            conv_kind: ConvKind::U,
            multi_kernel: false,
            attention: false,
            ds_v1: false,
            ds_v2: false,
            ds_v3: false,
            m: 64,
            depth: LEVELS,
            num_classes: 12,
            activation: Activation::Relu,
        };
        match id {
            "U1" => {}
            "UA" => spec.attention = true,
            "UD" => spec.ds_v3 = true,
            "UAD" => {
                spec.attention = true;
                spec.ds_v3 = true;
            }
            "UMD" => {
                spec.multi_kernel = true;
                spec.ds_v3 = true;
            }
            "UAMD" => {
                spec.attention = true;
                spec.multi_kernel = true;
                spec.ds_v3 = true;
            }
            "UVMD" => {
                spec.conv_kind = ConvKind::V;
                spec.multi_kernel = true;
                spec.ds_v3 = true;
            }
            "UVDD" => {
                spec.conv_kind = ConvKind::V;
                spec.ds_v1 = true;
                spec.ds_v3 = true;
                spec.activation = Activation::PRelu;
            }
            "UQD" => {
                spec.conv_kind = ConvKind::Q;
                spec.ds_v3 = true;
            }
            "UDD" => {
                spec.ds_v1 = true;
                spec.ds_v3 = true;
            }
            "UMDD" => {
                spec.multi_kernel = true;
                spec.ds_v1 = true;
                spec.ds_v3 = true;
            }
            "UDD2" => {
                spec.ds_v2 = true;
                spec.ds_v3 = true;
            }
            other => {
                return Err(Error::InvalidTopology(format!("unknown topology id: {other}")))
            }
        }
        Ok(spec)
    }

    /// Scales the base width; used for desk-scale runs.
    pub fn with_m(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth != LEVELS {
            return Err(Error::InvalidTopology(format!(
                "depth is fixed at {LEVELS} in this version, got {}",
                self.depth
            )));
        }
        if self.m == 0 {
            return Err(Error::InvalidTopology("m must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidTopology(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        let skip_replacers =
            [self.attention, self.ds_v1, self.ds_v2].iter().filter(|&&b| b).count();
        if skip_replacers > 1 {
            return Err(Error::InvalidTopology(
                "at most one of attention, ds_v1, ds_v2 may replace the skip connections".into(),
            ));
        }
        if self.multi_kernel && self.effective_m() % 4 != 0 {
            return Err(Error::InvalidTopology(format!(
                "multi-kernel input needs m divisible by 4, got {}",
                self.effective_m()
            )));
        }
        Ok(())
    }

    /// Level-1 width the structure is built around. The dense block design
    /// fixes every level to [`Q_WIDTH`] regardless of `m`.
    pub fn effective_m(&self) -> usize {
        match self.conv_kind {
            ConvKind::Q => Q_WIDTH,
            _ => self.m,
        }
    }

    /// Channel counts of C_1..C_4 and the bottleneck C_5.
    pub fn encoder_channels(&self) -> [usize; 5] {
        match self.conv_kind {
            ConvKind::Q => [Q_WIDTH; 5],
            _ => {
                let m = self.m;
                [m, 2 * m, 4 * m, 8 * m, 16 * m]
            }
        }
    }

    /// Channel counts of T_1..T_4 (mirror of the encoder).
    pub fn decoder_channels(&self) -> [usize; 4] {
        let e = self.encoder_channels();
        [e[0], e[1], e[2], e[3]]
    }

    /// Channel counts of the fusion signals S_1..S_4.
    pub fn skip_channels(&self) -> [usize; 4] {
        if self.ds_v1 || self.ds_v2 {
            [self.effective_m(); 4]
        } else {
            self.decoder_channels()
        }
    }

    pub fn head_input_channels(&self) -> usize {
        if self.ds_v3 {
            DS_HEAD_WIDTH
        } else {
            self.decoder_channels()[0]
        }
    }
}

/// A fully parameterised network ready for forward passes.
pub struct Network<T: Real = f32> {
    spec: TopologySpec,
    in_channels: usize,
    pub params: ParamSet<T>,
    mk: Option<MultiKernelInput>,
    encoder: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    gates: Option<Vec<AttentionGate>>,
    ds_up: Option<DsUpChain>,
    ds_down: Option<DsDownChain>,
    tconvs: Vec<ConvKernelRef>,
    decoder: Vec<ConvBlock>,
    ds_head: Option<DsHeadChain>,
    head: ClassificationHead,
}

/// Everything one forward pass produced, with handles into the tape for all
/// named intermediate features.
pub struct ForwardTrace<T: Real> {
    pub tape: Tape<T>,
    /// C_1..C_4 and the bottleneck output C_5.
    pub encoder: [NodeId; 5],
    /// Fusion signals S_1..S_4 entering the decoder concatenations.
    pub skips: [NodeId; 4],
    /// Projected bottleneck signal S_5 (only when ds_v1 is enabled).
    pub skip_bottom: Option<NodeId>,
    /// Decoder block inputs D_1..D_4.
    pub decoder_inputs: [NodeId; 4],
    /// Decoder block outputs T_1..T_4.
    pub decoder: [NodeId; 4],
    /// Head-chain signals Z_1..Z_5 (only when ds_v3 is enabled).
    pub ds_head_signals: Option<Vec<NodeId>>,
    /// What the classification head consumed (Z_1 if ds_v3, else T_1).
    pub head_input: NodeId,
    pub scores: NodeId,
}

impl<T: Real> ForwardTrace<T> {
    pub fn scores(&self) -> &Tensor<T> {
        self.tape.value(self.scores)
    }

    pub fn head_input(&self) -> &Tensor<T> {
        self.tape.value(self.head_input)
    }
}

impl<T: Real> Network<T> {
    /// Builds the network with He-initialised weights drawn from a
    /// deterministic generator; identical `(spec, in_channels, seed)` yield
    /// bit-identical parameters.
    pub fn build(spec: &TopologySpec, in_channels: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if in_channels == 0 {
            return Err(Error::InvalidDimension("input channels must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let enc_ch = spec.encoder_channels();
        let dec_ch = spec.decoder_channels();
        let skip_ch = spec.skip_channels();
        let eff_m = spec.effective_m();
        let act = spec.activation;

        let mk = if spec.multi_kernel {
            Some(MultiKernelInput::create(&mut params, &mut rng, "input_mk", in_channels, eff_m)?)
        } else {
            None
        };
        let enc_in0 = if spec.multi_kernel { eff_m } else { in_channels };

        // VGG16-style stage depths for the four encoder levels.
        let v_depths = [2usize, 2, 3, 3];
        let mut encoder = Vec::with_capacity(LEVELS);
        for n in 0..LEVELS {
            let cin = if n == 0 { enc_in0 } else { enc_ch[n - 1] };
            let name = format!("enc{}", n + 1);
            let block = match spec.conv_kind {
                ConvKind::U => {
                    ConvBlock::U(UBlock::create(&mut params, &mut rng, &name, cin, enc_ch[n], act))
                }
                ConvKind::V => ConvBlock::V(VBlock::create(
                    &mut params,
                    &mut rng,
                    &name,
                    cin,
                    enc_ch[n],
                    v_depths[n],
                    act,
                )?),
                ConvKind::Q => {
                    ConvBlock::Q(QBlock::create(&mut params, &mut rng, &name, cin, Q_WIDTH, act))
                }
            };
            encoder.push(block);
        }

        // The bottleneck uses the plain block except in the dense design,
        // which replaces every block.
        let bottleneck = match spec.conv_kind {
            ConvKind::Q => ConvBlock::Q(QBlock::create(
                &mut params,
                &mut rng,
                "bottleneck",
                enc_ch[3],
                Q_WIDTH,
                act,
            )),
            _ => ConvBlock::U(UBlock::create(
                &mut params,
                &mut rng,
                "bottleneck",
                enc_ch[3],
                enc_ch[4],
                act,
            )),
        };

        let gates = if spec.attention {
            Some(
                (0..LEVELS)
                    .map(|n| {
                        let dec_above = if n == 3 { enc_ch[4] } else { dec_ch[n + 1] };
                        AttentionGate::create(
                            &mut params,
                            &mut rng,
                            &format!("gate{}", n + 1),
                            enc_ch[n],
                            dec_above,
                        )
                    })
                    .collect(),
            )
        } else {
            None
        };

        let ds_up = if spec.ds_v1 {
            Some(DsUpChain::create(&mut params, &mut rng, "skip_up", &enc_ch, eff_m))
        } else {
            None
        };
        let ds_down = if spec.ds_v2 {
            let top = [enc_ch[0], enc_ch[1], enc_ch[2], enc_ch[3]];
            Some(DsDownChain::create(&mut params, &mut rng, "skip_down", &top, eff_m))
        } else {
            None
        };

        // Decoder, deepest level first (execution order).
        let mut tconvs_rev = Vec::with_capacity(LEVELS);
        let mut decoder_rev = Vec::with_capacity(LEVELS);
        for n in (0..LEVELS).rev() {
            let above = if n == 3 { enc_ch[4] } else { dec_ch[n + 1] };
            let tconv = ConvKernelRef::create(
                &mut params,
                &mut rng,
                &format!("up{}", n + 1),
                2,
                2,
                above,
                dec_ch[n],
            );
            tconvs_rev.push(tconv);
            let din = skip_ch[n] + dec_ch[n];
            let name = format!("dec{}", n + 1);
            let block = match spec.conv_kind {
                ConvKind::Q => {
                    ConvBlock::Q(QBlock::create(&mut params, &mut rng, &name, din, Q_WIDTH, act))
                }
                _ => {
                    ConvBlock::U(UBlock::create(&mut params, &mut rng, &name, din, dec_ch[n], act))
                }
            };
            decoder_rev.push(block);
        }
        tconvs_rev.reverse();
        decoder_rev.reverse();

        let ds_head = if spec.ds_v3 {
            let feats = [dec_ch[0], dec_ch[1], dec_ch[2], dec_ch[3], enc_ch[4]];
            Some(DsHeadChain::create(&mut params, &mut rng, "head_chain", &feats, DS_HEAD_WIDTH))
        } else {
            None
        };

        let head = ClassificationHead::create(
            &mut params,
            &mut rng,
            "head",
            spec.head_input_channels(),
            spec.num_classes,
        );

        Ok(Self {
            spec: spec.clone(),
            in_channels,
            params,
            mk,
            encoder,
            bottleneck,
            gates,
            ds_up,
            ds_down,
            tconvs: tconvs_rev,
            decoder: decoder_rev,
            ds_head,
            head,
        })
    }

    pub fn spec(&self) -> &TopologySpec {
        &self.spec
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Runs the network over one input, recording every feature on a tape.
    ///
    /// Spatial dimensions must be divisible by 16 (four 2x poolings). In
    /// `Mode::Train` the batch-normalisation layers use the statistics of
    /// this input and update their running estimates; in `Mode::Eval` they
    /// apply the stored running statistics.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<ForwardTrace<T>> {
        let (h, w, c) = input.shape();
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::InvalidDimension(format!(
                "input spatial dimensions must be divisible by 16, got {h}x{w}"
            )));
        }
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let params = &mut self.params;
        let mut tape = Tape::new(mode);
        let x0 = tape.constant(input.clone());

        let enc_in = match &self.mk {
            Some(mk) => mk.forward(&mut tape, params, x0)?,
            None => x0,
        };

        let mut encoder_nodes = Vec::with_capacity(5);
        let mut h_node = enc_in;
        for block in &self.encoder {
            let c_n = block.forward(&mut tape, params, h_node)?;
            encoder_nodes.push(c_n);
            h_node = tape.maxpool2x(c_n)?;
        }
        let c5 = self.bottleneck.forward(&mut tape, params, h_node)?;
        encoder_nodes.push(c5);

        let (ds_signals, skip_bottom) = if let Some(chain) = &self.ds_up {
            let signals = chain.forward(&mut tape, params, &encoder_nodes)?;
            let bottom = signals[4];
            (Some(signals), Some(bottom))
        } else if let Some(chain) = &self.ds_down {
            (Some(chain.forward(&mut tape, params, &encoder_nodes[..4])?), None)
        } else {
            (None, None)
        };

        let mut skips = [x0; 4];
        let mut decoder_inputs = [x0; 4];
        let mut decoder_nodes = [x0; 4];
        let mut t_above = c5;
        for n in (0..LEVELS).rev() {
            let up = tape.transposed_conv2d(params, t_above, &self.tconvs[n])?;
            let s_n = if let Some(gates) = &self.gates {
                gates[n].forward(&mut tape, params, encoder_nodes[n], t_above)?
            } else if let Some(signals) = &ds_signals {
                signals[n]
            } else {
                encoder_nodes[n]
            };
            let d_n = tape.concat_channels(&[s_n, up])?;
            let t_n = self.decoder[n].forward(&mut tape, params, d_n)?;
            skips[n] = s_n;
            decoder_inputs[n] = d_n;
            decoder_nodes[n] = t_n;
            t_above = t_n;
        }

        let (head_input, ds_head_signals) = match &self.ds_head {
            Some(chain) => {
                let signals = chain.forward(&mut tape, params, c5, &decoder_nodes)?;
                (signals[0], Some(signals))
            }
            None => (decoder_nodes[0], None),
        };
        let scores = self.head.forward(&mut tape, params, head_input)?;

        Ok(ForwardTrace {
            tape,
            encoder: [
                encoder_nodes[0],
                encoder_nodes[1],
                encoder_nodes[2],
                encoder_nodes[3],
                encoder_nodes[4],
            ],
            skips,
            skip_bottom,
            decoder_inputs,
            decoder: decoder_nodes,
            ds_head_signals,
            head_input,
            scores,
        })
    }
}

/// One row of the shape plan: expected sizes at a pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPlanRow {
    pub level: usize,
    pub spatial: (usize, usize),
    pub enc_channels: usize,
    pub skip_channels: usize,
    pub dec_channels: usize,
}

/// Shape plan for a topology at a given input size, confirmed against an
/// actual forward pass.
#[derive(Clone, Debug)]
pub struct LevelPlan {
    pub rows: Vec<LevelPlanRow>,
    pub bottleneck_spatial: (usize, usize),
    pub bottleneck_channels: usize,
    pub head_input_channels: usize,
    pub num_classes: usize,
    pub parameter_values: usize,
}

/// Builds the network, runs a zero input through it, and verifies that every
/// recorded feature matches the expected level plan. Returns the plan.
pub fn validate_shapes(spec: &TopologySpec, in_channels: usize, h: usize, w: usize) -> Result<LevelPlan> {
    let enc_ch = spec.encoder_channels();
    let dec_ch = spec.decoder_channels();
    let skip_ch = spec.skip_channels();
    let mut rows = Vec::new();
    for n in 0..LEVELS {
        rows.push(LevelPlanRow {
            level: n + 1,
            spatial: (h >> n, w >> n),
            enc_channels: enc_ch[n],
            skip_channels: skip_ch[n],
            dec_channels: dec_ch[n],
        });
    }
    let plan = LevelPlan {
        rows,
        bottleneck_spatial: (h >> LEVELS, w >> LEVELS),
        bottleneck_channels: enc_ch[4],
        head_input_channels: spec.head_input_channels(),
        num_classes: spec.num_classes,
        parameter_values: 0,
    };

    let mut net = Network::<f32>::build(spec, in_channels, 0)?;
    let parameter_values = net.params.total_values();
    let input = Tensor::zeros(h, w, in_channels);
    let trace = net.forward(&input, Mode::Eval)?;

    let expect = |name: &str, got: (usize, usize, usize), want: (usize, usize, usize)| {
        if got != want {
            Err(Error::ShapeMismatch(format!(
                "{name}: expected {want:?}, got {got:?} (topology {})",
                spec.id
            )))
        } else {
            Ok(())
        }
    };
    for (n, row) in plan.rows.iter().enumerate() {
        let (sh, sw) = row.spatial;
        expect(
            &format!("C_{}", n + 1),
            trace.tape.value(trace.encoder[n]).shape(),
            (sh, sw, row.enc_channels),
        )?;
        expect(
            &format!("S_{}", n + 1),
            trace.tape.value(trace.skips[n]).shape(),
            (sh, sw, row.skip_channels),
        )?;
        expect(
            &format!("D_{}", n + 1),
            trace.tape.value(trace.decoder_inputs[n]).shape(),
            (sh, sw, row.skip_channels + row.dec_channels),
        )?;
        expect(
            &format!("T_{}", n + 1),
            trace.tape.value(trace.decoder[n]).shape(),
            (sh, sw, row.dec_channels),
        )?;
    }
    expect(
        "C_5",
        trace.tape.value(trace.encoder[4]).shape(),
        (plan.bottleneck_spatial.0, plan.bottleneck_spatial.1, plan.bottleneck_channels),
    )?;
    expect(
        "head input",
        trace.tape.value(trace.head_input).shape(),
        (h, w, plan.head_input_channels),
    )?;
    expect("scores", trace.scores().shape(), (h, w, spec.num_classes))?;

    Ok(LevelPlan { parameter_values, ..plan })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_ids_expand_per_configuration_table() {
        let umd = TopologySpec::named("UMD").unwrap();
        assert!(umd.multi_kernel && umd.ds_v3 && !umd.attention && !umd.ds_v1 && !umd.ds_v2);
        assert_eq!(umd.conv_kind, ConvKind::U);
        assert_eq!(umd.activation, Activation::Relu);

        let udd2 = TopologySpec::named("UDD2").unwrap();
        assert!(udd2.ds_v2 && udd2.ds_v3 && !udd2.ds_v1);

        let uvdd = TopologySpec::named("UVDD").unwrap();
        assert_eq!(uvdd.conv_kind, ConvKind::V);
        assert!(uvdd.ds_v1 && uvdd.ds_v3);
        assert_eq!(uvdd.activation, Activation::PRelu);

        let uqd = TopologySpec::named("UQD").unwrap();
        assert_eq!(uqd.conv_kind, ConvKind::Q);
        assert!(uqd.ds_v3);

        assert!(TopologySpec::named("XYZ").is_err());
        for id in NAMED_IDS {
            let spec = TopologySpec::named(id).unwrap();
            spec.validate().unwrap();
            assert_eq!(spec.m, 64);
            assert_eq!(spec.num_classes, 12);
        }
    }

    #[test]
    fn validation_rejects_bad_combinations() {
        let mut spec = TopologySpec::named("UDD").unwrap();
        spec.ds_v2 = true;
        assert!(spec.validate().is_err());

        let mut spec = TopologySpec::named("UMD").unwrap();
        spec.m = 6;
        assert!(spec.validate().is_err());

        let mut spec = TopologySpec::named("U1").unwrap();
        spec.num_classes = 1;
        assert!(spec.validate().is_err());

        let mut spec = TopologySpec::named("U1").unwrap();
        spec.depth = 5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn channel_plans_follow_conv_kind() {
        let u = TopologySpec::named("U1").unwrap();
        assert_eq!(u.encoder_channels(), [64, 128, 256, 512, 1024]);
        let u8 = u.clone().with_m(8);
        assert_eq!(u8.encoder_channels(), [8, 16, 32, 64, 128]);
        let q = TopologySpec::named("UQD").unwrap();
        assert_eq!(q.encoder_channels(), [64; 5]);
        assert_eq!(q.clone().with_m(8).encoder_channels(), [64; 5]);
    }

    #[test]
    fn builds_are_seed_deterministic() {
        let spec = TopologySpec::named("UMD").unwrap().with_m(8).with_classes(3);
        let a = Network::<f32>::build(&spec, 2, 7).unwrap();
        let b = Network::<f32>::build(&spec, 2, 7).unwrap();
        let c = Network::<f32>::build(&spec, 2, 8).unwrap();
        assert_eq!(a.params.total_values(), b.params.total_values());
        let mut any_diff = false;
        for (ia, ib) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(ia.1.name, ib.1.name);
            assert_eq!(ia.1.data, ib.1.data);
        }
        for (ia, ic) in a.params.iter().zip(c.params.iter()) {
            if ia.1.data != ic.1.data {
                any_diff = true;
            }
        }
        assert!(any_diff, "different seeds must change the weights");
    }

    #[test]
    fn additive_blocks_increase_parameter_count() {
        // The input stage, the attention gates and the head chain each add
        // parameters without narrowing anything else.
        let base = TopologySpec::named("U1").unwrap().with_m(8);
        let count = |spec: &TopologySpec| {
            Network::<f32>::build(spec, 2, 0).unwrap().params.total_values()
        };
        let base_count = count(&base);

        let mut mk = base.clone();
        mk.multi_kernel = true;
        assert!(count(&mk) > base_count);

        let mut ag = base.clone();
        ag.attention = true;
        assert!(count(&ag) > base_count);

        let mut ds3 = base.clone();
        ds3.ds_v3 = true;
        assert!(count(&ds3) > base_count);
    }

    #[test]
    fn shape_plans_validate_for_small_variants() {
        for id in ["U1", "UA", "UD", "UDD", "UDD2", "UMD"] {
            let spec = TopologySpec::named(id).unwrap().with_m(8).with_classes(5);
            let plan = validate_shapes(&spec, 2, 32, 32).unwrap();
            assert_eq!(plan.rows[0].spatial, (32, 32));
            assert_eq!(plan.rows[3].spatial, (4, 4));
            assert_eq!(plan.bottleneck_spatial, (2, 2));
            assert_eq!(plan.num_classes, 5);
            assert!(plan.parameter_values > 0);
        }
    }

    #[test]
    fn skip_replacing_chains_narrow_the_fusion_signals() {
        let udd = TopologySpec::named("UDD").unwrap().with_m(8);
        assert_eq!(udd.skip_channels(), [8; 4]);
        let plain = TopologySpec::named("UD").unwrap().with_m(8);
        assert_eq!(plain.skip_channels(), [8, 16, 32, 64]);
    }

    #[test]
    fn forward_rejects_bad_input_sizes() {
        let spec = TopologySpec::named("U1").unwrap().with_m(4).with_classes(2);
        let mut net = Network::<f32>::build(&spec, 2, 0).unwrap();
        assert!(net.forward(&Tensor::zeros(24, 32, 2), Mode::Eval).is_err());
        assert!(net.forward(&Tensor::zeros(32, 32, 3), Mode::Eval).is_err());
        assert!(net.forward(&Tensor::zeros(32, 32, 2), Mode::Eval).is_ok());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = TopologySpec::named("UVDD").unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let back: TopologySpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
        // Defaults fill in omitted flags.
        let minimal: TopologySpec =
            serde_json::from_str(r#"{"id":"custom","conv_kind":"U","activation":"relu"}"#).unwrap();
        assert_eq!(minimal.m, 64);
        assert!(!minimal.ds_v1);
        assert_eq!(minimal.num_classes, 12);
    }
}
