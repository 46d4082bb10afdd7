//! Central finite-difference verification of the tape's gradients (double precision).
//!
//! The error of a coordinate is `|a − n| / max(|a|, |n|, floor)` where `a` is the
//! analytic and `n` the numerical derivative; the floor keeps near-zero
//! derivatives from turning rounding noise into huge relative errors.
//! Coordinates whose perturbation flips a ReLU or changes a max-pool winner
//! are not differentiable there; they are detected via
//! [`Tape::kink_signature`] and replaced by other samples.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Mode, Model, ModelSpec};
use crate::tensor::{BatchNormMode, RunningStats, Tape, Tensor, Var};
use crate::topo_loss::{batched_topo_loss, combined_loss, SimilarityMode, TopoLayerSpec};
use crate::topography::Scheme;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Coordinates checked per parameter tensor (all of them when smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, tolerance: 1e-5, floor: 1e-3, samples_per_tensor: 6, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Where the maximum occurred: `(tensor, flat index)`.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub passed: bool,
}

/// Checks `build`, which records a scalar loss of `params` on a fresh tape.
pub fn check<F>(name: &str, params: &[Tensor<f64>], build: F, cfg: &GradCheckConfig) -> Result<CheckResult>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>], grad: bool| -> Result<(f64, u64, Option<Vec<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss).item().ok_or_else(|| Error::invalid("gradcheck loss must be scalar"))?;
        let sig = tape.kink_signature();
        let grads = if grad {
            let mut g = tape.backward(loss)?;
            Some(vars.iter().zip(ps).map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape()))).collect())
        } else {
            None
        };
        Ok((value, sig, grads))
    };

    let (_, base_sig, grads) = eval(params, true)?;
    let grads = grads.expect("requested gradients");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut result = CheckResult { name: name.into(), max_rel_error: 0.0, worst: None, checked: 0, skipped_kinks: 0, passed: true };

    for t in 0..params.len() {
        let n = params[t].numel();
        let want = cfg.samples_per_tensor.min(n);
        // Visit coordinates in random order until `want` smooth ones are found.
        let order: Vec<usize> = if n <= 4096 { sample(&mut rng, n, n).into_vec() } else { (0..n).map(|_| rng.random_range(0..n)).take(4 * want + 64).collect() };
        let mut done = 0;
        for idx in order {
            if done == want {
                break;
            }
            let orig = work[t].data()[idx];
            work[t].data_mut()[idx] = orig + cfg.step;
            let (fp, sp, _) = eval(&work, false)?;
            work[t].data_mut()[idx] = orig - cfg.step;
            let (fm, sm, _) = eval(&work, false)?;
            work[t].data_mut()[idx] = orig;
            if sp != base_sig || sm != base_sig {
                result.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let analytic = grads[t].data()[idx];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
            if !(err <= result.max_rel_error) {
                result.max_rel_error = err;
                result.worst = Some((t, idx));
            }
            result.checked += 1;
            done += 1;
        }
    }
    result.passed = result.max_rel_error < cfg.tolerance && result.checked > 0;
    Ok(result)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), std, rng)
}

/// Values bounded away from zero, so ReLU has no kink within `step`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| {
        let m = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) { m } else { -m }
    });
    Tensor::new(shape.to_vec(), data.collect()).expect("shape")
}

/// `sum(y ⊙ R)` for a fixed random `R`, so every output element gets a distinct weight.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = randn(&mut rng, tape.value(y).shape(), 1.0);
    let rv = tape.constant(r);
    let m = tape.mul(y, rv)?;
    tape.sum(m)
}

/// One check per differentiable operation of the tape.
pub fn op_suite(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = GradCheckConfig { samples_per_tensor: cfg.samples_per_tensor.max(24), ..*cfg };
    let mut out = Vec::new();
    let s = cfg.seed;

    let ps = vec![randn(&mut rng, &[2, 3, 5, 5], 1.0), randn(&mut rng, &[4, 3, 3, 3], 0.5), randn(&mut rng, &[4], 0.5)];
    out.push(check("conv2d", &ps, |t, v| { let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?; probe(t, y, s) }, &c)?);
    out.push(check("conv2d_stride2", &ps, |t, v| { let y = t.conv2d(v[0], v[1], None, 2, 1)?; probe(t, y, s) }, &c)?);

    let ps = vec![randn(&mut rng, &[3, 5], 1.0), randn(&mut rng, &[4, 5], 0.5), randn(&mut rng, &[4], 0.5)];
    out.push(check("linear", &ps, |t, v| { let y = t.linear(v[0], v[1], Some(v[2]))?; probe(t, y, s) }, &c)?);

    let ps = vec![away_from_zero(&mut rng, &[2, 3, 4])];
    out.push(check("relu", &ps, |t, v| { let y = t.relu(v[0])?; probe(t, y, s) }, &c)?);

    let ps = vec![randn(&mut rng, &[2, 2, 4, 4], 1.0)];
    out.push(check("max_pool2d", &ps, |t, v| { let y = t.max_pool2d(v[0], 2, 2)?; probe(t, y, s) }, &c)?);
    out.push(check("avg_pool2d", &ps, |t, v| { let y = t.avg_pool2d(v[0], 2, 2)?; probe(t, y, s) }, &c)?);
    out.push(check("avg_pool2d_overlap", &ps, |t, v| { let y = t.avg_pool2d(v[0], 3, 1)?; probe(t, y, s) }, &c)?);

    let ps = vec![randn(&mut rng, &[3, 2, 3, 3], 1.0), randn(&mut rng, &[2], 1.0), randn(&mut rng, &[2], 1.0)];
    out.push(check("batch_norm2d_train", &ps, |t, v| { let (y, _) = t.batch_norm2d(v[0], v[1], v[2], BatchNormMode::Train, 1e-5)?; probe(t, y, s) }, &c)?);
    let stats = RunningStats { mean: vec![0.3, -0.2], var: vec![1.5, 0.7] };
    out.push(check("batch_norm2d_eval", &ps, |t, v| { let (y, _) = t.batch_norm2d(v[0], v[1], v[2], BatchNormMode::Eval(&stats), 1e-5)?; probe(t, y, s) }, &c)?);

    let ps = vec![randn(&mut rng, &[2, 3, 2, 2], 1.0)];
    out.push(check("flatten", &ps, |t, v| { let y = t.flatten(v[0])?; probe(t, y, s) }, &c)?);
    out.push(check("reshape", &ps, |t, v| { let y = t.reshape(v[0], &[6, 4])?; probe(t, y, s) }, &c)?);

    let ps = vec![randn(&mut rng, &[3, 4], 1.0), randn(&mut rng, &[3, 4], 1.0)];
    out.push(check("add", &ps, |t, v| { let y = t.add(v[0], v[1])?; probe(t, y, s) }, &c)?);
    out.push(check("sub", &ps, |t, v| { let y = t.sub(v[0], v[1])?; probe(t, y, s) }, &c)?);
    out.push(check("mul", &ps, |t, v| { let y = t.mul(v[0], v[1])?; probe(t, y, s) }, &c)?);
    out.push(check("scale", &ps, |t, v| { let y = t.scale(v[0], -1.7)?; probe(t, y, s) }, &c)?);
    out.push(check("add_scalar", &ps, |t, v| { let y = t.add_scalar(v[0], 0.4)?; probe(t, y, s) }, &c)?);
    out.push(check("square", &ps, |t, v| { let y = t.square(v[0])?; probe(t, y, s) }, &c)?);
    out.push(check("sum", &ps, |t, v| { let y = t.square(v[0])?; t.sum(y) }, &c)?);
    out.push(check("mean", &ps, |t, v| { let y = t.square(v[0])?; t.mean(y) }, &c)?);

    let ps = vec![randn(&mut rng, &[3, 4], 1.0), randn(&mut rng, &[4, 5], 1.0)];
    out.push(check("matmul", &ps, |t, v| { let y = t.matmul(v[0], v[1])?; probe(t, y, s) }, &c)?);

    let ps = vec![randn(&mut rng, &[4, 5], 2.0)];
    let labels = [0usize, 3, 4, 1];
    out.push(check("softmax_cross_entropy", &ps, |t, v| t.softmax_cross_entropy(v[0], &labels), &c)?);

    let ps = vec![randn(&mut rng, &[2, 4, 3, 3], 1.0)];
    out.push(check("cosine_similarity", &ps, |t, v| { let y = t.cosine_similarity(v[0], false, 1e-12)?; probe(t, y, s) }, &c)?);
    out.push(check("cosine_similarity_pooled", &ps, |t, v| { let y = t.cosine_similarity(v[0], true, 1e-12)?; probe(t, y, s) }, &c)?);

    let spec = TopoLayerSpec::new("x", Scheme::Circle, 4)?;
    out.push(check("topo_loss", &ps, |t, v| batched_topo_loss(t, v[0], &spec.targets, SimilarityMode::PerSample), &c)?);
    out.push(check("topo_loss_pooled", &ps, |t, v| batched_topo_loss(t, v[0], &spec.targets, SimilarityMode::Pooled), &c)?);
    Ok(out)
}

/// The spec of the small network used by [`objective_suite`].
pub fn objective_model_spec() -> ModelSpec {
    ModelSpec::small_vgg(3, 16, 5).with_widths(vec![8, 16, 32, 64])
}

/// Gradient of `CE + λ · mean(topographic losses)` for a SmallVGG variant
/// (widths up to 64), once per layout scheme, sampling every parameter tensor.
pub fn objective_suite(cfg: &GradCheckConfig, lambda: f64) -> Result<Vec<CheckResult>> {
    let model = Model::<f64>::new(objective_model_spec(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a);
    let input = randn(&mut rng, &[2, 3, 16, 16], 1.0);
    let labels = [1usize, 3];
    let params: Vec<Tensor<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
    let mut out = Vec::new();
    for scheme in Scheme::ALL {
        let layers: Vec<TopoLayerSpec> = model
            .topo_layers()
            .into_iter()
            .map(|(id, c)| TopoLayerSpec::new(id, scheme, c))
            .collect::<Result<_>>()?;
        let build = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
            let x = tape.constant(input.clone());
            let fwd = model.forward_with_params(tape, x, Mode::Train, vars)?;
            let ce = tape.softmax_cross_entropy(fwd.logits, &labels)?;
            let mut losses = Vec::new();
            for (spec, (id, tap)) in layers.iter().zip(&fwd.taps) {
                losses.push((id.clone(), batched_topo_loss(tape, *tap, &spec.targets, SimilarityMode::PerSample)?));
            }
            Ok(combined_loss(tape, ce, &losses, lambda)?.0)
        };
        out.push(check(&format!("objective[{}]", scheme.name()), &params, build, cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_gradients_pass() {
        let ps = vec![Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap()];
        let ok = check("square", &ps, |t, v| { let y = t.square(v[0])?; t.sum(y) }, &GradCheckConfig::default()).unwrap();
        assert!(ok.passed, "{ok:?}");
        assert_eq!(ok.checked, 3);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x · stop_grad(x): the tape sees derivative x, the true derivative is 2x.
        let ps = vec![Tensor::new([2], vec![0.5, -1.0]).unwrap()];
        let build = |t: &mut Tape<f64>, v: &[Var]| {
            let c = t.constant(t.value(v[0]).clone());
            let y = t.mul(v[0], c)?;
            t.sum(y)
        };
        let r = check("detached", &ps, build, &GradCheckConfig::default()).unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn relative_error_uses_floor() {
        let ps = vec![Tensor::new([1], vec![0.0]).unwrap()];
        let r = check("const", &ps, |t, v| { let y = t.scale(v[0], 0.0)?; t.sum(y) }, &GradCheckConfig::default()).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }
}
