//! Runtime finite-difference suite: central differences against the
//! analytic gradients for every graph operation and for the full default
//! network. Deterministic, single-threaded, and fast enough to run as a
//! routine check.

use crate::error::{Error, Result};
use crate::loss::{
    class_weights, ohnem_loss_from, ohnem_selections, weighted_cross_entropy, OhnemSelection,
    DEFAULT_AUX_WEIGHT, DEFAULT_OHNEM_FLOOR,
};
use crate::network::{Model, NetworkConfig};
use crate::rng::{RngStream, STREAM_DROPOUT, STREAM_INIT};
use crate::tensor::conv::ConvSpec;
use crate::tensor::{finite_diff_check, Graph, TensorId};

pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rand_vec(rng: &mut RngStream, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.uniform_in(lo, hi)).collect()
}

/// Values bounded away from zero so relu kinks stay clear of the probe step.
fn rand_vec_offset(rng: &mut RngStream, n: usize, margin: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v = rng.uniform_in(0.1, 1.0);
            if rng.uniform() < 0.5 {
                v + margin
            } else {
                -v - margin
            }
        })
        .collect()
}

fn check_relu() -> Result<f64> {
    let mut g = Graph::new();
    let mut rng = RngStream::new(101, 0);
    let xv = rand_vec_offset(&mut rng, 24, 0.1);
    let x = g.leaf(vec![2, 3, 2, 2], xv, true)?;
    let w = rand_vec(&mut rng, 24, -1.0, 1.0);
    finite_diff_check(&mut g, 1e-3, move |g| {
        let y = g.relu(x);
        g.weighted_sum(y, w.clone())
    })
}

fn check_add() -> Result<f64> {
    let mut g = Graph::new();
    let mut rng = RngStream::new(102, 0);
    let a = g.leaf(vec![1, 2, 3, 3], rand_vec(&mut rng, 18, -1.0, 1.0), true)?;
    let b = g.leaf(vec![1, 2, 3, 3], rand_vec(&mut rng, 18, -1.0, 1.0), true)?;
    let w = rand_vec(&mut rng, 18, -1.0, 1.0);
    finite_diff_check(&mut g, 1e-3, move |g| {
        let y = g.add(a, b)?;
        g.weighted_sum(y, w.clone())
    })
}

fn check_mul() -> Result<f64> {
    let mut g = Graph::new();
    let mut rng = RngStream::new(103, 0);
    let a = g.leaf(vec![1, 2, 3, 3], rand_vec(&mut rng, 18, -1.0, 1.0), true)?;
    let b = g.leaf(vec![1, 2, 3, 3], rand_vec(&mut rng, 18, -1.0, 1.0), true)?;
    let w = rand_vec(&mut rng, 18, -1.0, 1.0);
    finite_diff_check(&mut g, 1e-3, move |g| {
        let y = g.mul(a, b)?;
        g.weighted_sum(y, w.clone())
    })
}

fn check_scale() -> Result<f64> {
    let mut g = Graph::new();
    let mut rng = RngStream::new(104, 0);
    let x = g.leaf(vec![1, 1, 4, 4], rand_vec(&mut rng, 16, -1.0, 1.0), true)?;
    let w = rand_vec(&mut rng, 16, -1.0, 1.0);
    finite_diff_check(&mut g, 1e-3, move |g| {
        let y = g.scale(x, -1.7);
        g.weighted_sum(y, w.clone())
    })
}

fn check_conv(name: &str) -> Result<f64> {
    let (spec, ih, iw) = match name {
        "conv_3x3" => (ConvSpec::new(3, 2, 3, 1, 1, 1), 6, 6),
        "conv_stride2" => (ConvSpec::new(2, 2, 3, 2, 1, 1), 7, 7),
        "conv_dilated" => (ConvSpec::new(2, 1, 3, 1, 2, 2), 8, 8),
        "conv_1x1" => (ConvSpec::new(4, 3, 1, 1, 0, 1), 5, 5),
        _ => return Err(Error::Config(format!("unknown conv check {name}"))),
    };
    let mut g = Graph::new();
    let mut rng = RngStream::new(105, 0);
    let ic = spec.in_channels;
    let oc = spec.out_channels;
    let x = g.leaf(vec![2, ic, ih, iw], rand_vec(&mut rng, 2 * ic * ih * iw, -1.0, 1.0), true)?;
    let wlen = oc * ic * spec.kh * spec.kw;
    let w = g.leaf(vec![oc, ic, spec.kh, spec.kw], rand_vec(&mut rng, wlen, -0.7, 0.7), true)?;
    let b = g.leaf(vec![oc], rand_vec(&mut rng, oc, -0.3, 0.3), true)?;
    let oh = spec.out_extent(ih, spec.kh)?;
    let ow = spec.out_extent(iw, spec.kw)?;
    let ws = rand_vec(&mut rng, 2 * oc * oh * ow, -1.0, 1.0);
    finite_diff_check(&mut g, 1e-3, move |g| {
        let y = g.conv2d(x, w, b, &spec)?;
        g.weighted_sum(y, ws.clone())
    })
}

fn check_avg_pool() -> Result<f64> {
    let mut g = Graph::new();
    let mut rng = RngStream::new(106, 0);
    let x = g.leaf(vec![1, 2, 7, 7], rand_vec(&mut rng, 98, -1.0, 1.0), true)?;
    let w = rand_vec(&mut rng, 2 * 3 * 3, -1.0, 1.0);
    finite_diff_check(&mut g, 1e-3, move |g| {
        let y = g.avg_pool(x, 3, 3)?;
        g.weighted_sum(y, w.clone())
    })
}

fn check_upsample() -> Result<f64> {
    let mut g = Graph::new();
    let mut rng = RngStream::new(107, 0);
    let x = g.leaf(vec![1, 2, 3, 3], rand_vec(&mut rng, 18, -1.0, 1.0), true)?;
    let w = rand_vec(&mut rng, 2 * 8 * 8, -1.0, 1.0);
    finite_diff_check(&mut g, 1e-3, move |g| {
        let y = g.upsample_bilinear(x, 8, 8)?;
        g.weighted_sum(y, w.clone())
    })
}

fn check_concat() -> Result<f64> {
    let mut g = Graph::new();
    let mut rng = RngStream::new(108, 0);
    let a = g.leaf(vec![1, 2, 3, 3], rand_vec(&mut rng, 18, -1.0, 1.0), true)?;
    let b = g.leaf(vec![1, 1, 3, 3], rand_vec(&mut rng, 9, -1.0, 1.0), true)?;
    let c = g.leaf(vec![1, 3, 3, 3], rand_vec(&mut rng, 27, -1.0, 1.0), true)?;
    let w = rand_vec(&mut rng, 6 * 9, -1.0, 1.0);
    finite_diff_check(&mut g, 1e-3, move |g| {
        let y = g.concat_channels(&[a, b, c])?;
        g.weighted_sum(y, w.clone())
    })
}

fn check_dropout() -> Result<f64> {
    let mut g = Graph::new();
    let mut rng = RngStream::new(109, 0);
    let x = g.leaf(vec![1, 2, 4, 4], rand_vec(&mut rng, 32, -1.0, 1.0), true)?;
    let w = rand_vec(&mut rng, 32, -1.0, 1.0);
    // identical stream seed on every rebuild freezes the mask
    finite_diff_check(&mut g, 1e-3, move |g| {
        let mut mask_rng = RngStream::new(555, STREAM_DROPOUT);
        let y = g.dropout(x, 0.3, true, &mut mask_rng)?;
        g.weighted_sum(y, w.clone())
    })
}

fn check_ce_map() -> Result<f64> {
    let mut g = Graph::new();
    let mut rng = RngStream::new(110, 0);
    let logits = g.leaf(vec![2, 3, 3, 3], rand_vec(&mut rng, 54, -2.0, 2.0), true)?;
    let labels: Vec<u8> = (0..18).map(|_| rng.index(3) as u8).collect();
    let w = rand_vec(&mut rng, 18, 0.0, 1.0);
    finite_diff_check(&mut g, 1e-3, move |g| {
        let m = g.cross_entropy_map(logits, &labels)?;
        g.weighted_sum(m, w.clone())
    })
}

fn check_weighted_sum() -> Result<f64> {
    let mut g = Graph::new();
    let mut rng = RngStream::new(111, 0);
    let x = g.leaf(vec![1, 1, 5, 5], rand_vec(&mut rng, 25, -1.0, 1.0), true)?;
    let w = rand_vec(&mut rng, 25, -1.0, 1.0);
    finite_diff_check(&mut g, 1e-3, move |g| g.weighted_sum(x, w.clone()))
}

fn check_residual_block() -> Result<f64> {
    // conv -> relu -> conv -> add shortcut -> relu -> pool, biases offset
    // so no preactivation sits on the relu kink
    let mut g = Graph::new();
    let mut rng = RngStream::new(112, 0);
    let spec = ConvSpec::new(2, 2, 3, 1, 1, 1);
    let x = g.leaf(vec![1, 2, 6, 6], rand_vec(&mut rng, 72, -1.0, 1.0), true)?;
    let w1 = g.leaf(vec![2, 2, 3, 3], rand_vec(&mut rng, 36, -0.4, 0.4), true)?;
    let b1 = g.leaf(vec![2], vec![0.45, -0.38], true)?;
    let w2 = g.leaf(vec![2, 2, 3, 3], rand_vec(&mut rng, 36, -0.4, 0.4), true)?;
    let b2 = g.leaf(vec![2], vec![-0.42, 0.47], true)?;
    let w = rand_vec(&mut rng, 2 * 3 * 3, -1.0, 1.0);
    let s1 = spec.clone();
    let s2 = spec;
    finite_diff_check(&mut g, 1e-3, move |g| {
        let y = g.conv2d(x, w1, b1, &s1)?;
        let y = g.relu(y);
        let y = g.conv2d(y, w2, b2, &s2)?;
        let y = g.add(y, x)?;
        let y = g.relu(y);
        let y = g.avg_pool(y, 3, 3)?;
        g.weighted_sum(y, w.clone())
    })
}

/// Directional central differences through the whole default network and
/// composite loss. Per-element probing of a deep f32 network is swamped
/// by forward rounding noise (small steps) or relu kink crossings (large
/// steps); probing each parameter tensor along its own normalized
/// gradient direction keeps the loss delta large while every individual
/// element moves by only step/||g||-scaled amounts, so both effects
/// shrink together. The analytic reference uses the realized f32
/// perturbations, making the comparison exact up to genuine gradient
/// error. A wrong gradient fails along its tensor's direction regardless
/// of step.
fn check_network(step: f64, verbose: bool) -> Result<f64> {
    let config = NetworkConfig::mini();
    let mut init = RngStream::new(31, STREAM_INIT);
    let mut model = Model::build(&config, &mut init)?;

    let (h, w) = config.input_size;
    let mut rng = RngStream::new(113, 0);
    let input = rand_vec(&mut rng, h * w, -1.0, 1.0);
    // a centered disk gives both classes and a nontrivial boundary
    let labels: Vec<u8> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let d = (y - h as f64 / 2.0).powi(2) + (x - w as f64 / 2.0).powi(2);
            (d < (h as f64 / 5.0).powi(2)) as u8
        })
        .collect();

    // freeze hard-negative selections at the base point so the probed
    // function stays differentiable
    let selections: Vec<OhnemSelection> = {
        model.reset();
        let mut drops = RngStream::new(77, STREAM_DROPOUT);
        let fwd = model.forward(&input, 1, true, &mut drops)?;
        let sel = ohnem_selections(&model.graph, fwd.main, &labels, DEFAULT_OHNEM_FLOOR)?;
        model.reset();
        sel
    };
    let weights = class_weights(&labels, config.num_classes);

    let eval = |model: &mut Model| -> Result<TensorId> {
        model.reset();
        let mut drops = RngStream::new(77, STREAM_DROPOUT);
        let fwd = model.forward(&input, 1, true, &mut drops)?;
        let main = ohnem_loss_from(&mut model.graph, fwd.main, &labels, &selections)?;
        let aux = weighted_cross_entropy(&mut model.graph, fwd.aux, &labels, &weights)?;
        let aux_scaled = model.graph.scale(aux, DEFAULT_AUX_WEIGHT);
        model.graph.add(main, aux_scaled)
    };

    let loss = eval(&mut model)?;
    let np = model.num_param_tensors();
    for p in 0..np {
        model.graph.zero_grad(p);
    }
    model.graph.backward(loss)?;
    let grads: Vec<Vec<f64>> =
        (0..np).map(|p| model.graph.grad(p).iter().map(|&g| g as f64).collect()).collect();
    let base = model.graph.value64(loss);

    // Freeze the relu activation pattern of the base point and probe the
    // smooth carrier function it defines. The carrier matches the network
    // at the base point bit for bit — checked below — and its gradient is
    // exactly what the backward pass computed, because relu backpropagates
    // through the same mask. Central differences of the carrier are immune
    // to activation boundary crossings, which would otherwise contaminate
    // the quotient at every usable step in 32-bit arithmetic: with tens of
    // thousands of relu units, some always sit closer to zero than a step
    // small enough to keep rounding noise acceptable.
    let masks = model.graph.relu_masks();
    model.graph.set_relu_override(Some(masks));
    {
        let l = eval(&mut model)?;
        let frozen = model.graph.value64(l);
        if frozen.to_bits() != base.to_bits() {
            model.graph.set_relu_override(None);
            return Err(Error::Numeric(format!(
                "frozen activation pattern altered the base loss: {base} vs {frozen}"
            )));
        }
    }

    // one probe direction per parameter tensor, plus one across all of
    // them; random signs rather than gradient-aligned moves so no term
    // dominates the inner product
    let mut dir_rng = RngStream::new(114, 0);
    let mut max_rel = 0.0f64;
    for slot in 0..=np {
        let parts: Vec<usize> = if slot < np { vec![slot] } else { (0..np).collect() };
        let n_dir: usize = parts.iter().map(|&p| grads[p].len()).sum();
        let s = (n_dir as f64).sqrt();
        let dir: Vec<Vec<f64>> = parts
            .iter()
            .map(|&p| {
                (0..grads[p].len())
                    .map(|_| if dir_rng.uniform() < 0.5 { -1.0 } else { 1.0 } / s)
                    .collect()
            })
            .collect();
        let originals: Vec<Vec<f32>> =
            parts.iter().map(|&p| model.graph.data(p).to_vec()).collect();

        // average a few nearby steps to cancel independent rounding noise;
        // the analytic side uses the realized f32 parameter moves so both
        // quotients measure exactly the same displacement
        let (mut asum, mut fsum) = (0.0f64, 0.0f64);
        let probes = 4;
        for j in 0..probes {
            let h = step * (16 - j) as f64 / 16.0;
            let mut losses = [0.0f64; 2];
            let mut moved = [0.0f64; 2];
            for (side, sign) in [1.0f64, -1.0].into_iter().enumerate() {
                for (k, &p) in parts.iter().enumerate() {
                    let data = model.graph.data_mut(p);
                    for (i, x) in data.iter_mut().enumerate() {
                        *x = (originals[k][i] as f64 + sign * h * dir[k][i]) as f32;
                        moved[side] += grads[p][i] * (*x as f64);
                    }
                }
                let l = eval(&mut model)?;
                losses[side] = model.graph.value64(l);
            }
            fsum += (losses[0] - losses[1]) / (2.0 * h);
            asum += (moved[0] - moved[1]) / (2.0 * h);
        }
        for (k, &p) in parts.iter().enumerate() {
            model.graph.data_mut(p).copy_from_slice(&originals[k]);
        }

        let (a, fd) = (asum / probes as f64, fsum / probes as f64);
        let rel = (a - fd).abs() / a.abs().max(1.0);
        if verbose {
            eprintln!("slot {slot}: a {a:.6} fd {fd:.6} rel {rel:.3e}");
        }
        if rel > max_rel {
            max_rel = rel;
        }
    }
    model.graph.set_relu_override(None);
    Ok(max_rel)
}

/// Runs every check; deterministic across runs and thread counts.
pub fn run_suite() -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<f64>| -> Result<()> {
        out.push(GradCheckReport { name: name.to_string(), max_rel_err: r? });
        Ok(())
    };
    push("relu", check_relu())?;
    push("add", check_add())?;
    push("mul", check_mul())?;
    push("scale", check_scale())?;
    push("conv_3x3", check_conv("conv_3x3"))?;
    push("conv_stride2", check_conv("conv_stride2"))?;
    push("conv_dilated", check_conv("conv_dilated"))?;
    push("conv_1x1", check_conv("conv_1x1"))?;
    push("avg_pool", check_avg_pool())?;
    push("upsample", check_upsample())?;
    push("concat", check_concat())?;
    push("dropout", check_dropout())?;
    push("cross_entropy_map", check_ce_map())?;
    push("weighted_sum", check_weighted_sum())?;
    push("residual_block", check_residual_block())?;
    push("full_network", check_network(1e-3, false))?;
    Ok(out)
}

pub fn max_error(reports: &[GradCheckReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}
