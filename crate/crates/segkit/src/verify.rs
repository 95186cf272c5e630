//! Built-in self-check suites: finite-difference gradient verification for
//! every block family, and full-resolution shape/normalization sweeps over
//! the named topologies. The CLI `gradcheck`/`shapes` commands and the
//! acceptance tests both run these.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{gradient_check, GradCheckConfig, GradCheckReport, Mode, ParamSet};
use crate::blocks::{
    Activation, AttentionGate, ClassificationHead, DsDownChain, DsHeadChain, DsUpChain,
    MultiKernelInput, QBlock, UBlock, VBlock,
};
use crate::ensemble::{MergeMode, StackInput, StackingModel};
use crate::error::Result;
use crate::labelling::LabelMap;
use crate::tensor::Tensor;
use crate::topology::{Network, TopologySpec, NAMED_IDS};

/// One named check with its outcome, as printed by the CLI suites.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {} ({})", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn pattern(h: usize, w: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(h, w, c, |y, x, ch| ((y * 13 + x * 29 + ch * 7) as f64 * 0.61).sin())
}

/// Per-pixel normalized pattern (positive entries summing to 1).
fn normalized_pattern(h: usize, w: usize, c: usize, phase: usize) -> Tensor<f64> {
    let mut t = Tensor::from_fn(h, w, c, |y, x, ch| {
        ((y * 17 + x * 5 + ch * 11 + phase * 23) as f64 * 0.43).sin().exp()
    });
    for y in 0..h {
        for x in 0..w {
            let sum: f64 = t.pixel(y, x).iter().sum();
            for v in t.pixel_mut(y, x) {
                *v /= sum;
            }
        }
    }
    t
}

fn outcome(name: &str, report: &GradCheckReport) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        pass: report.pass,
        detail: format!(
            "{}/{} coords within tolerance, max rel err {:.3e}",
            report.within_tolerance, report.coords_checked, report.max_rel_err
        ),
    }
}

/// Runs a finite-difference gradient check for every block family
/// (conv blocks U/V/Q, the multi-kernel input, attention gates, the three
/// deep-supervision chains, the classification head, and the stacking
/// combiner in both input flavours), all at double precision.
pub fn gradient_suite() -> Result<Vec<CheckOutcome>> {
    let cfg = GradCheckConfig::default();
    let mut results = Vec::new();

    // Conv block U: conv, conv, batchnorm, activation.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut params = ParamSet::<f64>::new();
        let block = UBlock::create(&mut params, &mut rng, "u", 3, 6, Activation::Relu);
        let x = pattern(6, 6, 3);
        let report = gradient_check(
            &mut params,
            |tape, params| {
                let xid = tape.constant(x.clone());
                let h = block.forward(tape, params, xid)?;
                let s = tape.sigmoid(h);
                Ok(tape.sum_all(s))
            },
            &cfg,
        )?;
        results.push(outcome("conv-block-u", &report));
    }

    // Conv block V: stacked conv+activation, depth 3, learned slopes.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let mut params = ParamSet::<f64>::new();
        let block = VBlock::create(&mut params, &mut rng, "v", 3, 6, 3, Activation::PRelu)?;
        let x = pattern(6, 6, 3);
        let report = gradient_check(
            &mut params,
            |tape, params| {
                let xid = tape.constant(x.clone());
                let h = block.forward(tape, params, xid)?;
                let s = tape.sigmoid(h);
                Ok(tape.sum_all(s))
            },
            &cfg,
        )?;
        results.push(outcome("conv-block-v", &report));
    }

    // Conv block Q: densely connected 5/3/1 layers.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let mut params = ParamSet::<f64>::new();
        let block = QBlock::create(&mut params, &mut rng, "q", 3, 6, Activation::Relu);
        let x = pattern(6, 6, 3);
        let report = gradient_check(
            &mut params,
            |tape, params| {
                let xid = tape.constant(x.clone());
                let h = block.forward(tape, params, xid)?;
                let s = tape.sigmoid(h);
                Ok(tape.sum_all(s))
            },
            &cfg,
        )?;
        results.push(outcome("conv-block-q", &report));
    }

    // Multi-kernel input: parallel 1/3/5/7 convolutions.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let mut params = ParamSet::<f64>::new();
        let mk = MultiKernelInput::create(&mut params, &mut rng, "mk", 2, 8)?;
        let x = pattern(8, 8, 2);
        let report = gradient_check(
            &mut params,
            |tape, params| {
                let xid = tape.constant(x.clone());
                let h = mk.forward(tape, params, xid)?;
                let s = tape.sigmoid(h);
                Ok(tape.sum_all(s))
            },
            &cfg,
        )?;
        results.push(outcome("multi-kernel-input", &report));
    }

    // Attention gate masking an encoder feature with a decoder signal.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let mut params = ParamSet::<f64>::new();
        let gate = AttentionGate::create(&mut params, &mut rng, "ag", 4, 6);
        let enc = pattern(8, 8, 4);
        let dec = pattern(4, 4, 6);
        let report = gradient_check(
            &mut params,
            |tape, params| {
                let e = tape.constant(enc.clone());
                let d = tape.constant(dec.clone());
                let h = gate.forward(tape, params, e, d)?;
                let s = tape.sigmoid(h);
                Ok(tape.sum_all(s))
            },
            &cfg,
        )?;
        results.push(outcome("attention-gate", &report));
    }

    // Upward deep-supervision chain over encoder features + bottleneck.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let mut params = ParamSet::<f64>::new();
        let chain = DsUpChain::create(&mut params, &mut rng, "dsu", &[3, 4, 5, 6, 7], 4);
        let feats: Vec<Tensor<f64>> =
            (0..5).map(|n| pattern(16 >> n, 16 >> n, 3 + n)).collect();
        let report = gradient_check(
            &mut params,
            |tape, params| {
                let ids: Vec<_> = feats.iter().map(|f| tape.constant(f.clone())).collect();
                let signals = chain.forward(tape, params, &ids)?;
                let mut total = None;
                for sig in signals {
                    let s = tape.sigmoid(sig);
                    let sum = tape.sum_all(s);
                    total = Some(match total {
                        None => sum,
                        Some(t) => tape.add(t, sum)?,
                    });
                }
                Ok(total.expect("at least one signal"))
            },
            &cfg,
        )?;
        results.push(outcome("ds-up-chain", &report));
    }

    // Downward deep-supervision chain over the four encoder levels.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let mut params = ParamSet::<f64>::new();
        let chain = DsDownChain::create(&mut params, &mut rng, "dsd", &[3, 4, 5, 6], 4);
        let feats: Vec<Tensor<f64>> =
            (0..4).map(|n| pattern(16 >> n, 16 >> n, 3 + n)).collect();
        let report = gradient_check(
            &mut params,
            |tape, params| {
                let ids: Vec<_> = feats.iter().map(|f| tape.constant(f.clone())).collect();
                let signals = chain.forward(tape, params, &ids)?;
                let mut total = None;
                for sig in signals {
                    let s = tape.sigmoid(sig);
                    let sum = tape.sum_all(s);
                    total = Some(match total {
                        None => sum,
                        Some(t) => tape.add(t, sum)?,
                    });
                }
                Ok(total.expect("at least one signal"))
            },
            &cfg,
        )?;
        results.push(outcome("ds-down-chain", &report));
    }

    // Head-side deep-supervision chain over decoder features + bottleneck.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let mut params = ParamSet::<f64>::new();
        let chain = DsHeadChain::create(&mut params, &mut rng, "dsh", &[3, 4, 5, 6, 7], 8);
        let dec: Vec<Tensor<f64>> = (0..4).map(|n| pattern(16 >> n, 16 >> n, 3 + n)).collect();
        let bottleneck = pattern(1, 1, 7);
        let report = gradient_check(
            &mut params,
            |tape, params| {
                let dec_ids: Vec<_> = dec.iter().map(|f| tape.constant(f.clone())).collect();
                let b = tape.constant(bottleneck.clone());
                let signals = chain.forward(tape, params, b, &dec_ids)?;
                let s = tape.sigmoid(signals[0]);
                Ok(tape.sum_all(s))
            },
            &cfg,
        )?;
        results.push(outcome("ds-head-chain", &report));
    }

    // Classification head under the cross-entropy loss.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let mut params = ParamSet::<f64>::new();
        let head = ClassificationHead::create(&mut params, &mut rng, "head", 6, 4);
        let x = pattern(5, 5, 6);
        let truth = LabelMap::from_fn(5, 5, |y, x| ((y + x) % 4) as u8).to_one_hot::<f64>(4)?;
        let report = gradient_check(
            &mut params,
            |tape, params| {
                let xid = tape.constant(x.clone());
                let scores = head.forward(tape, params, xid)?;
                tape.cross_entropy(scores, &truth)
            },
            &cfg,
        )?;
        results.push(outcome("classification-head", &report));
    }

    // Stacking combiner over normalized member score maps.
    {
        let model =
            StackingModel::<f64>::build(StackInput::Normalized, MergeMode::Concat, 3, 3, 6, 3, 110)?;
        let members: Vec<Tensor<f64>> = (0..3).map(|i| normalized_pattern(6, 6, 3, i)).collect();
        let truth = LabelMap::from_fn(6, 6, |y, x| ((y * 2 + x) % 3) as u8).to_one_hot::<f64>(3)?;
        let mut params = model.params.clone();
        let report = gradient_check(
            &mut params,
            |tape, params| {
                let ids: Vec<_> = members.iter().map(|m| tape.constant(m.clone())).collect();
                let scores = model.forward_with(tape, params, &ids)?;
                tape.cross_entropy(scores, &truth)
            },
            &cfg,
        )?;
        results.push(outcome("stacking-normalized", &report));
    }

    // Stacking combiner over raw pre-head feature tensors.
    {
        let model =
            StackingModel::<f64>::build(StackInput::Tensor, MergeMode::Average, 2, 5, 6, 3, 111)?;
        let members: Vec<Tensor<f64>> = (0..2).map(|i| pattern(6, 6, 5).map(|v| v + i as f64 * 0.1)).collect();
        let truth = LabelMap::from_fn(6, 6, |y, x| ((y + 2 * x) % 3) as u8).to_one_hot::<f64>(3)?;
        let mut params = model.params.clone();
        let report = gradient_check(
            &mut params,
            |tape, params| {
                let ids: Vec<_> = members.iter().map(|m| tape.constant(m.clone())).collect();
                let scores = model.forward_with(tape, params, &ids)?;
                tape.cross_entropy(scores, &truth)
            },
            &cfg,
        )?;
        results.push(outcome("stacking-tensor", &report));
    }

    Ok(results)
}

/// Builds one named topology at the given size and checks that a forward
/// pass yields `height x width x num_classes` scores whose per-pixel sums
/// are within 1e-6 of 1.
pub fn shape_check(
    id: &str,
    height: usize,
    width: usize,
    m: usize,
    num_classes: usize,
) -> Result<CheckOutcome> {
    let input = Tensor::from_fn(height, width, 2, |y, x, ch| {
        ((y * 7 + x * 3 + ch * 13) as f32 * 0.37).sin()
    });
    let spec = TopologySpec::named(id)?.with_m(m).with_classes(num_classes);
    let mut net = Network::<f32>::build(&spec, 2, 17)?;
    let trace = net.forward(&input, Mode::Eval)?;
    let scores = trace.scores();
    let shape_ok = scores.shape() == (height, width, num_classes);
    let mut max_dev = 0.0f64;
    for y in 0..height {
        for x in 0..width {
            let sum: f64 = scores.pixel(y, x).iter().map(|&v| v as f64).sum();
            max_dev = max_dev.max((sum - 1.0).abs());
        }
    }
    Ok(CheckOutcome {
        name: format!("shapes-{id}"),
        pass: shape_ok && max_dev <= 1e-6,
        detail: if shape_ok {
            format!("{height}x{width}x{num_classes}, max |sum-1| = {max_dev:.3e}")
        } else {
            format!("unexpected output shape {:?}", scores.shape())
        },
    })
}

/// [`shape_check`] over every named topology.
pub fn shape_suite(
    height: usize,
    width: usize,
    m: usize,
    num_classes: usize,
) -> Result<Vec<CheckOutcome>> {
    NAMED_IDS.iter().map(|id| shape_check(id, height, width, m, num_classes)).collect()
}
