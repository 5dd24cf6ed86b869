use kldd::attention::{CaamBlock, CsamBlock};
use kldd::deform::ld_apply;
use kldd::diffusion::DiffusionSchedule;
use kldd::loss::{cl_dice, soft_skeleton, total_loss};
use kldd::model::{ModelBundle, ModelConfig};
use kldd::tensor::{finite_diff_grad, max_relative_error};
use kldd::{Graph, Orientation, ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

/// Denominator floor for the relative error, as a multiple of `max(1, |f|)`.
///
/// Central differences at `h = 1e-6` carry a rounding error of `ε·|f|/h`
/// times the number of ulps lost inside `f`; through a whole network this
/// reaches about `1e-8·|f|`. Gradients below `1e-4·|f|` (including exact
/// zeros such as conv biases feeding a group norm) are therefore compared
/// absolutely, to `1e-8·|f|`.
const FLOOR_SCALE: f64 = 1e-4;

fn floor_for(f: f64) -> f64 {
    FLOOR_SCALE * f.abs().max(1.0)
}
const SEEDS: u64 = 20;

fn randn(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct amount.
fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let w = randn(tape.shape(out), 1.0, &mut rng);
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv)?;
    tape.sum(prod)
}

/// Checks the gradient of `project(f(inputs))` with respect to every input.
fn check<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let s = project(&mut tape, out)?;
        Ok(tape.value(s).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = project(&mut tape, out).unwrap();
    let floor = floor_for(tape.value(s).data()[0]);
    tape.backward(s).unwrap();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x.numel()]);
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[k] = probe.clone();
                eval(&xs)
            },
            x,
            H,
        )
        .unwrap();
        let err = max_relative_error(&analytic, numeric.data(), floor);
        assert!(err <= TOL, "{name}: input {k} relative error {err:e}");
    }
}

fn each_seed(mut body: impl FnMut(&mut ChaCha8Rng)) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        body(&mut rng);
    }
}

pub fn elementwise_binary_ops() {
    each_seed(|rng| {
        let a = randn(&[2, 3, 4], 1.0, rng);
        let b = uniform(&[2, 3, 4], 0.5, 2.0, rng);
        check("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        check("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        check("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        check("div", &[a.clone(), b.clone()], |t, v| t.div(v[0], v[1]));
        check("scale", std::slice::from_ref(&a), |t, v| t.scale(v[0], -1.7));
        check("add_scalar", std::slice::from_ref(&a), |t, v| t.add_scalar(v[0], 0.3));
        let s = randn(&[1], 1.0, rng);
        check("scale_by", &[a.clone(), s], |t, v| t.scale_by(v[0], v[1]));
        let bias = randn(&[3], 1.0, rng);
        check("bias_add", &[a.clone(), bias.clone()], |t, v| t.bias_add(v[0], v[1], 1));
        check("scale_axis", &[a, bias], |t, v| t.scale_axis(v[0], v[1], 1));
    });
}

pub fn elementwise_unary_ops() {
    each_seed(|rng| {
        let a = randn(&[3, 5], 1.5, rng);
        check("silu", std::slice::from_ref(&a), |t, v| t.silu(v[0]));
        check("sigmoid", std::slice::from_ref(&a), |t, v| t.sigmoid(v[0]));
        check("tanh", std::slice::from_ref(&a), |t, v| t.tanh(v[0]));
        check("relu", std::slice::from_ref(&a), |t, v| t.relu(v[0]));
        check("clamp", std::slice::from_ref(&a), |t, v| t.clamp(v[0], -1.0, 1.0));
        check("softmax0", std::slice::from_ref(&a), |t, v| t.softmax(v[0], 0));
        check("softmax1", std::slice::from_ref(&a), |t, v| t.softmax(v[0], 1));
        check("sum", std::slice::from_ref(&a), |t, v| t.sum(v[0]));
        check("mean", std::slice::from_ref(&a), |t, v| t.mean(v[0]));
        check("transpose", std::slice::from_ref(&a), |t, v| t.transpose(v[0]));
        check("reshape", &[a], |t, v| t.reshape(v[0], &[5, 3]));
    });
}

pub fn matmul_and_concat() {
    each_seed(|rng| {
        let a = randn(&[3, 4], 1.0, rng);
        let b = randn(&[4, 5], 1.0, rng);
        check("matmul", &[a, b], |t, v| t.matmul(v[0], v[1]));
        let x = randn(&[2, 3, 3], 1.0, rng);
        let y = randn(&[1, 3, 3], 1.0, rng);
        check("concat", &[x, y], |t, v| t.concat(&[v[0], v[1]]));
    });
}

pub fn normalisation_and_pooling() {
    each_seed(|rng| {
        let x = randn(&[4, 6, 6], 1.0, rng);
        let gamma = uniform(&[4], 0.5, 1.5, rng);
        let beta = randn(&[4], 0.5, rng);
        check("group_norm", &[x.clone(), gamma, beta], |t, v| t.group_norm(v[0], v[1], v[2], 2));
        check("max_pool2", std::slice::from_ref(&x), |t, v| t.max_pool2(v[0]));
        check("avg_pool2", std::slice::from_ref(&x), |t, v| t.avg_pool2(v[0]));
        check("global_max_pool", std::slice::from_ref(&x), |t, v| t.global_max_pool(v[0]));
        check("global_avg_pool", std::slice::from_ref(&x), |t, v| t.global_avg_pool(v[0]));
        check("max_pool3", std::slice::from_ref(&x), |t, v| t.max_pool3(v[0]));
        check("min_pool3", std::slice::from_ref(&x), |t, v| t.min_pool3(v[0]));
        check("upsample2", &[x], |t, v| t.upsample2(v[0]));
    });
}

pub fn convolution() {
    each_seed(|rng| {
        let x = randn(&[3, 7, 6], 1.0, rng);
        let w = randn(&[4, 3, 3, 3], 0.5, rng);
        let b = randn(&[4], 0.5, rng);
        check("conv2d", &[x.clone(), w, b.clone()], |t, v| t.conv2d(v[0], v[1], v[2], 1, 1));
        let w = randn(&[4, 3, 3, 3], 0.5, rng);
        check("conv2d/stride2", &[x.clone(), w, b.clone()], |t, v| t.conv2d(v[0], v[1], v[2], 2, 0));
        let w = randn(&[4, 3, 1, 1], 0.5, rng);
        check("conv2d/1x1", &[x, w, b], |t, v| t.conv2d(v[0], v[1], v[2], 1, 0));
    });
}

pub fn bilinear_sampling() {
    each_seed(|rng| {
        let feat = randn(&[2, 5, 6], 1.0, rng);
        // a few coordinates fall outside the image and are clamped
        let coords = Tensor::from_fn(&[12, 2], |i| {
            let extent = if i % 2 == 0 { 5.0 } else { 6.0 };
            rng.random_range(-1.5..extent + 0.5)
        });
        check("bilinear_sample", &[feat, coords], |t, v| t.bilinear_sample(v[0], v[1]));
    });
}

pub fn kalman_taps_and_linear_deformable() {
    let gains = [0.990099, 0.497512, 0.332226, 0.249377];
    each_seed(|rng| {
        let deltas = randn(&[8, 4, 5], 1.0, rng);
        for o in [Orientation::Horizontal, Orientation::Vertical] {
            check("kalman_taps", std::slice::from_ref(&deltas), |t, v| t.kalman_taps(v[0], gains, o));
        }
        let input = randn(&[2, 5, 6], 1.0, rng);
        let deltas = randn(&[8, 5, 6], 0.8, rng);
        let taps = randn(&[3, 2, 9], 0.5, rng);
        let bias = randn(&[3], 0.5, rng);
        for o in [Orientation::Horizontal, Orientation::Vertical] {
            check("ld_apply", &[input.clone(), deltas.clone(), taps.clone(), bias.clone()], |t, v| {
                ld_apply(t, v[0], v[1], v[2], v[3], o, gains)
            });
        }
    });
}

pub fn soft_skeleton_and_cl_dice() {
    each_seed(|rng| {
        let a = uniform(&[1, 7, 7], 0.02, 0.98, rng);
        let b = uniform(&[1, 7, 7], 0.02, 0.98, rng);
        check("soft_skeleton", std::slice::from_ref(&a), |t, v| soft_skeleton(t, v[0], 3));
        check("cl_dice", &[a, b], |t, v| cl_dice(t, v[0], v[1], 3));
    });
}

pub fn total_loss_gradient() {
    let sched = DiffusionSchedule::scaled_default(100).unwrap();
    each_seed(|rng| {
        let t_step = rng.random_range(1..=100);
        let eps = randn(&[1, 6, 6], 1.0, rng);
        let eps_pred = randn(&[1, 6, 6], 1.0, rng);
        let x_t = randn(&[1, 6, 6], 0.5, rng);
        let gt = Tensor::from_fn(&[1, 6, 6], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        check("total_loss", &[eps_pred, x_t], |t, v| {
            let e = t.constant(eps.clone());
            let g = t.constant(gt.clone());
            Ok(total_loss(t, e, v[0], v[1], t_step, g, &sched, 0.7)?.total)
        });
    });
}

/// Gradient check of a graph built from a parameter store, over the given
/// inputs and a random subset of parameter coordinates.
fn check_graph<F>(name: &str, params: &ParamStore, inputs: &[Tensor], coords: usize, rng: &mut ChaCha8Rng, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, xs: &[Tensor]| -> f64 {
        let mut g = Graph::new(store, true);
        let vars: Vec<Var> = xs.iter().map(|x| g.tape.param(x.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        let s = project(&mut g.tape, out).unwrap();
        g.value(s).data()[0]
    };
    let mut g = Graph::new(params, true);
    let vars: Vec<Var> = inputs.iter().map(|x| g.tape.param(x.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let s = project(&mut g.tape, out).unwrap();
    let floor = floor_for(g.value(s).data()[0]);
    g.tape.backward(s).unwrap();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = g.tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x.numel()]);
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[k] = probe.clone();
                Ok(eval(params, &xs))
            },
            x,
            H,
        )
        .unwrap();
        let err = max_relative_error(&analytic, numeric.data(), floor);
        assert!(err <= TOL, "{name}: input {k} relative error {err:e}");
    }
    let grads = g.param_grads();
    let ids: Vec<_> = params.ids().collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..coords {
        let k = rng.random_range(0..ids.len());
        let n = params.get(ids[k]).numel();
        let i = rng.random_range(0..n);
        analytic.push(grads[k].as_ref().map_or(0.0, |g| g[i]));
        let mut plus = params.clone();
        plus.get_mut(ids[k]).data_mut()[i] += H;
        let mut minus = params.clone();
        minus.get_mut(ids[k]).data_mut()[i] -= H;
        numeric.push((eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * H));
    }
    let err = max_relative_error(&analytic, &numeric, floor);
    assert!(err <= TOL, "{name}: parameter relative error {err:e}");
}

/// Moves every parameter off its initial value so zero-initialised gates and
/// offsets do not hide gradient paths.
fn jitter(params: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

pub fn attention_blocks() {
    each_seed(|rng| {
        let mut store = ParamStore::new();
        let caam = CaamBlock::new(&mut store, "caam", 4, rng).unwrap();
        let csam = CsamBlock::new(&mut store, "csam", 4, rng).unwrap();
        jitter(&mut store, 0.3, rng);
        let cond = randn(&[4, 3, 3], 1.0, rng);
        let den = randn(&[4, 3, 3], 1.0, rng);
        check_graph("caam", &store, &[cond.clone(), den.clone()], 30, rng, |g, v| {
            caam.forward(g, v[0], v[1])
        });
        check_graph("csam", &store, &[cond, den], 30, rng, |g, v| csam.forward(g, v[0], v[1]));
    });
}

pub fn full_denoiser() {
    let cfg = ModelConfig {
        base_channels: 4,
        channel_mults: vec![1, 2],
        time_embed_dim: 8,
        steps: 10,
        ..Default::default()
    };
    each_seed(|rng| {
        let mut m = ModelBundle::new(cfg.clone(), rng.random()).unwrap();
        jitter(&mut m.params, 0.05, rng);
        let image = uniform(&[1, 8, 8], 0.0, 1.0, rng);
        let x_t = randn(&[1, 8, 8], 1.0, rng);
        let t_step = rng.random_range(1..=10);
        check_graph("denoiser", &m.params, &[image, x_t], 40, rng, |g, v| {
            let feats = m.extractor_forward(g, v[0])?;
            m.denoiser_forward(g, v[1], t_step, &feats)
        });
    });
}
