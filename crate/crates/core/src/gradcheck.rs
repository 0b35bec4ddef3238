//! Central finite-difference gradient checks.
//!
//! The error measure is `max_i |analytic_i − numeric_i| / max(1, |analytic_i|, |numeric_i|)`.
//! [`run_suite`] checks every tape operation, the LCA head, the losses and
//! whole models in `f64`.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::lca::{lca_forward_on, LcaConfig};
use crate::model::{build_model, BackboneConfig, HeadKind, Model, ModelConfig};
use crate::objectives::{max_entropy_loss, LossConfig};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = f(&mut tape, xv)?;
    tape.value(out).item()
}

/// Largest relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.gradients(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Gradient check over every parameter in `store`; returns `(name, error)`.
pub fn grad_check_params<F>(store: &ParamStore<f64>, f: F, eps: f64) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &analytic)?;
    tape.backward(loss, &mut analytic)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        t.value(l).item()
    };

    let mut probe = store.clone();
    let ids: Vec<_> = store.iter().map(|p| store.id(&p.name).expect("registered")).collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let mut worst = 0.0f64;
        for i in 0..probe.get(id).value.numel() {
            let orig = probe.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.get(id).grad.data()[i], numeric));
        }
        out.push((store.get(id).name.clone(), worst));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

pub const OP_THRESHOLD: f64 = 1e-6;
pub const MODEL_THRESHOLD: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).expect("shape")
}

/// Values at least `gap` away from zero, keeping ReLU off its kink.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor<f64> {
    random(shape, rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// Distinct values spaced well apart, so no pooling window holds a near-tie.
fn tie_free(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut ranks);
    let data = ranks.into_iter().map(|r| r as f64 / n as f64 - 0.5).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Reduces an output to a scalar with fixed random weights so every output
/// coordinate contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.input(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

struct Suite {
    results: Vec<CheckResult>,
}

impl Suite {
    fn record(&mut self, name: &str, err: f64, threshold: f64) {
        match self.results.iter_mut().find(|r| r.name == name) {
            Some(r) => r.max_rel_err = r.max_rel_err.max(err),
            None => self.results.push(CheckResult {
                name: name.to_string(),
                max_rel_err: err,
                threshold,
            }),
        }
    }
}

fn check_ops(suite: &mut Suite, rng: &mut Rng) -> Result<()> {
    let eps = DEFAULT_EPS;

    let a = random(&[4, 3], rng);
    let b = random(&[3, 2], rng);
    let r = random(&[4, 2], rng);
    let e = grad_check(
        |t, x| {
            let bv = t.input(b.clone());
            let y = t.matmul(x, bv)?;
            weighted_sum(t, y, &r)
        },
        &a,
        eps,
    )?
    .max(grad_check(
        |t, y| {
            let av = t.input(a.clone());
            let z = t.matmul(av, y)?;
            weighted_sum(t, z, &r)
        },
        &b,
        eps,
    )?);
    suite.record("matmul", e, OP_THRESHOLD);

    let x = random(&[5, 4], rng);
    let w = random(&[3, 4], rng);
    let bias = random(&[3], rng);
    let r = random(&[5, 3], rng);
    let lin = |t: &mut Tape<f64>, xv: Var, wv: Var, bv: Var| -> Result<Var> {
        let y = t.linear(xv, wv, bv)?;
        weighted_sum(t, y, &r)
    };
    let e = [
        grad_check(|t, v| { let (wv, bv) = (t.input(w.clone()), t.input(bias.clone())); lin(t, v, wv, bv) }, &x, eps)?,
        grad_check(|t, v| { let (xv, bv) = (t.input(x.clone()), t.input(bias.clone())); lin(t, xv, v, bv) }, &w, eps)?,
        grad_check(|t, v| { let (xv, wv) = (t.input(x.clone()), t.input(w.clone())); lin(t, xv, wv, v) }, &bias, eps)?,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    suite.record("linear", e, OP_THRESHOLD);

    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let x = random(&[2, 3, 5, 5], rng);
        let w = random(&[4, 3, 3, 3], rng);
        let bias = random(&[4], rng);
        let out_len = crate::ops::conv_out_len(5, 3, stride, pad);
        let r = random(&[2, 4, out_len, out_len], rng);
        let conv = |t: &mut Tape<f64>, xv: Var, wv: Var, bv: Var| -> Result<Var> {
            let y = t.conv2d(xv, wv, bv, stride, pad)?;
            weighted_sum(t, y, &r)
        };
        let e = [
            grad_check(|t, v| { let (wv, bv) = (t.input(w.clone()), t.input(bias.clone())); conv(t, v, wv, bv) }, &x, eps)?,
            grad_check(|t, v| { let (xv, bv) = (t.input(x.clone()), t.input(bias.clone())); conv(t, xv, v, bv) }, &w, eps)?,
            grad_check(|t, v| { let (xv, wv) = (t.input(x.clone()), t.input(w.clone())); conv(t, xv, wv, v) }, &bias, eps)?,
        ]
        .into_iter()
        .fold(0.0, f64::max);
        suite.record("conv2d", e, OP_THRESHOLD);
    }

    for (kh, kw, stride) in [(2, 3, 1), (3, 2, 2), (1, 2, 1)] {
        let x = random(&[2, 3, 5, 4], rng);
        let ho = (5 - kh) / stride + 1;
        let wo = (4 - kw) / stride + 1;
        let r = random(&[2, 3, ho, wo], rng);
        let e = grad_check(
            |t, v| {
                let y = t.avgpool2d(v, kh, kw, stride)?;
                weighted_sum(t, y, &r)
            },
            &x,
            eps,
        )?;
        suite.record("avgpool2d", e, OP_THRESHOLD);
    }

    for (k, stride) in [(2, 2), (3, 1)] {
        let x = tie_free(&[2, 2, 6, 6], rng);
        let o = (6 - k) / stride + 1;
        let r = random(&[2, 2, o, o], rng);
        let e = grad_check(
            |t, v| {
                let y = t.maxpool2d(v, k, stride)?;
                weighted_sum(t, y, &r)
            },
            &x,
            eps,
        )?;
        suite.record("maxpool2d", e, OP_THRESHOLD);
    }

    let x = away_from_zero(&[3, 7], 1e-3, rng);
    let r = random(&[3, 7], rng);
    let e = grad_check(
        |t, v| {
            let y = t.relu(v)?;
            weighted_sum(t, y, &r)
        },
        &x,
        eps,
    )?;
    suite.record("relu", e, OP_THRESHOLD);

    let x = random(&[3, 5], rng).map(|v| 3.0 * v);
    let r = random(&[3, 5], rng);
    let e = grad_check(
        |t, v| {
            let y = t.log_softmax(v)?;
            weighted_sum(t, y, &r)
        },
        &x,
        eps,
    )?;
    suite.record("log_softmax", e, OP_THRESHOLD);

    let x = random(&[2, 3, 2, 3], rng);
    let r = random(&[12, 3], rng);
    let e = grad_check(
        |t, v| {
            let y = t.spatial_rows(v)?;
            weighted_sum(t, y, &r)
        },
        &x,
        eps,
    )?;
    suite.record("spatial_rows", e, OP_THRESHOLD);

    let x = random(&[6, 4], rng);
    let r = random(&[2, 4], rng);
    let e = grad_check(
        |t, v| {
            let y = t.segment_sum(v, 2)?;
            weighted_sum(t, y, &r)
        },
        &x,
        eps,
    )?;
    suite.record("segment_sum", e, OP_THRESHOLD);

    let a = random(&[3, 4], rng);
    let b = random(&[3, 4], rng);
    let e = grad_check(
        |t, v| {
            let bv = t.input(b.clone());
            let s = t.add(v, bv)?;
            let d = t.sub(s, bv)?;
            let m = t.mul(d, bv)?;
            let m = t.mul(m, v)?;
            let sc = t.scale(m, -1.7)?;
            let re = t.reshape(sc, &[2, 6])?;
            t.sum(re)
        },
        &a,
        eps,
    )?;
    suite.record("elementwise", e, OP_THRESHOLD);
    Ok(())
}

fn check_lca(suite: &mut Suite, rng: &mut Rng) -> Result<()> {
    let eps = DEFAULT_EPS;
    for include_one_by_k in [true, false] {
        let cfg = LcaConfig {
            in_channels: 3,
            embed_dim: 5,
            include_one_by_k,
        };
        let x = random(&[2, 3, 3, 4], rng);
        let w = random(&[5, 3], rng);
        let b = random(&[5], rng).map(|v| 0.3 * v);
        let r = random(&[2, 5], rng);
        let head = |t: &mut Tape<f64>, xv: Var, wv: Var, bv: Var| -> Result<Var> {
            let y = lca_forward_on(t, xv, wv, bv, &cfg)?;
            weighted_sum(t, y, &r)
        };
        let e = [
            grad_check(|t, v| { let (wv, bv) = (t.input(w.clone()), t.input(b.clone())); head(t, v, wv, bv) }, &x, eps)?,
            grad_check(|t, v| { let (xv, bv) = (t.input(x.clone()), t.input(b.clone())); head(t, xv, v, bv) }, &w, eps)?,
            grad_check(|t, v| { let (xv, wv) = (t.input(x.clone()), t.input(w.clone())); head(t, xv, wv, v) }, &b, eps)?,
        ]
        .into_iter()
        .fold(0.0, f64::max);
        suite.record("lca_layer", e, MODEL_THRESHOLD);
    }
    Ok(())
}

fn check_losses(suite: &mut Suite, rng: &mut Rng) -> Result<()> {
    let eps = DEFAULT_EPS;
    let logits = random(&[4, 5], rng).map(|v| 2.0 * v);
    let targets: Vec<usize> = (0..4).map(|_| rng.below(5) as usize).collect();

    let e = grad_check(
        |t, v| {
            let lp = t.log_softmax(v)?;
            t.nll_loss(lp, &targets)
        },
        &logits,
        eps,
    )?;
    suite.record("nll_loss", e, OP_THRESHOLD);

    let e = grad_check(
        |t, v| {
            let lp = t.log_softmax(v)?;
            t.entropy(lp)
        },
        &logits,
        eps,
    )?;
    suite.record("entropy", e, OP_THRESHOLD);

    let cfg = LossConfig { lambda_entropy: 0.1 + rng.next_f64() };
    let e = grad_check(
        |t, v| Ok(max_entropy_loss(t, v, &targets, &cfg)?.total),
        &logits,
        eps,
    )?;
    suite.record("max_entropy_loss", e, OP_THRESHOLD);
    Ok(())
}

fn model_loss(
    model: &Model<f64>,
    store: &ParamStore<f64>,
    tape: &mut Tape<f64>,
    input: &Tensor<f64>,
    targets: &[usize],
) -> Result<Var> {
    let mut m = model.clone();
    m.params = store.clone();
    let x = tape.input(input.clone());
    let logits = m.forward(tape, x)?;
    Ok(max_entropy_loss(tape, logits, targets, &LossConfig { lambda_entropy: 0.1 })?.total)
}

fn check_model(suite: &mut Suite, rng: &mut Rng, name: &str, cfg: &ModelConfig) -> Result<()> {
    let model: Model<f64> = build_model(cfg, rng)?;
    // lift biases off zero so every ReLU sees a generic pre-activation
    let mut store = model.params.clone();
    for p in store.iter_mut() {
        if p.name.ends_with("bias") {
            p.value = random(p.value.shape(), rng).map(|v| 0.1 * v);
        }
    }
    let [c, h, w] = cfg.backbone.input_shape();
    let input = random(&[2, c, h, w], rng).map(|v| 0.5 * (v + 1.0));
    let targets: Vec<usize> = (0..2).map(|_| rng.below(cfg.num_classes as u64) as usize).collect();

    let per_param = grad_check_params(
        &store,
        |t, s| model_loss(&model, s, t, &input, &targets),
        DEFAULT_EPS,
    )?;
    let mut e = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let mut with_params = model.clone();
    with_params.params = store.clone();
    e = e.max(grad_check(
        |t, x| {
            let logits = with_params.forward(t, x)?;
            Ok(max_entropy_loss(t, logits, &targets, &LossConfig { lambda_entropy: 0.1 })?.total)
        },
        &input,
        DEFAULT_EPS,
    )?);
    suite.record(name, e, MODEL_THRESHOLD);
    Ok(())
}

/// The full `f64` suite over `seeds` consecutive seeds starting at `seed`.
/// Each result holds the worst error seen across seeds.
pub fn run_suite(seed: u64, seeds: u64) -> Result<Vec<CheckResult>> {
    let mut suite = Suite { results: Vec::new() };
    for s in seed..seed + seeds {
        let mut rng = Rng::seed_from_u64(s);
        check_ops(&mut suite, &mut rng)?;
        check_lca(&mut suite, &mut rng)?;
        check_losses(&mut suite, &mut rng)?;
        let gap = ModelConfig::new(BackboneConfig::tiny_cnn(4, 6, 4, 4), HeadKind::Gap, 3);
        check_model(&mut suite, &mut rng, "end_to_end_gap", &gap)?;
        let mut lca = ModelConfig::new(BackboneConfig::tiny_cnn(4, 6, 8, 8), HeadKind::Lca, 3);
        lca.lca.embed_dim = 5;
        check_model(&mut suite, &mut rng, "end_to_end_lca", &lca)?;
        let ext = ModelConfig::new(BackboneConfig::external(3, 3, 3), HeadKind::Lca, 4);
        check_model(&mut suite, &mut rng, "end_to_end_external_lca", &ext)?;
    }
    Ok(suite.results)
}

/// A square whose recorded adjoint is deliberately wrong (`x` instead of `2x`).
/// The harness must flag it.
pub fn mutant_check(seed: u64) -> Result<CheckResult> {
    let mut rng = Rng::seed_from_u64(seed);
    let x = random(&[6], &mut rng).map(|v| v + 2.0);
    let e = grad_check(
        |t, v| {
            let value = t.value(v).map(|a| a * a);
            let sq = t.custom(&[v], value, Box::new(|ins, _, g| {
                vec![crate::ops::zip_map("mutant", g, ins[0], |g, x| g * x).expect("shape")]
            }))?;
            t.sum(sq)
        },
        &x,
        DEFAULT_EPS,
    )?;
    Ok(CheckResult {
        name: "mutant_square".into(),
        max_rel_err: e,
        threshold: OP_THRESHOLD,
    })
}
