//! Fine-tuning the shading network against reference images.
//!
//! The grid stays frozen, so each training pixel reduces to a fixed
//! accumulated colour, feature vector and view direction. The loss for one
//! pixel is the squared error, summed over channels, between
//! `diffuse + mlp(input)` (before the render-time clamp) and the target
//! with the background contribution removed.

use std::path::Path;

use glam::{DVec3, DVec4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::Image;
use crate::math::Camera;
use crate::par;
use crate::renderer::{accumulate_frame, RenderConfig};
use crate::scene::{sigmoid, DeferredMlp};
use crate::store::{BlockGrid, Channel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainExample {
    pub diffuse: DVec3,
    pub feature: DVec4,
    pub direction: DVec3,
    pub target: DVec3,
}

/// Examples per gradient work item. Fixed so the reduction order, and so
/// the result, does not depend on the thread count.
const CHUNK: usize = 256;

struct Tape {
    input: Vec<f64>,
    /// Post-activation output of every layer, the last one pre-sigmoid.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl Tape {
    fn new() -> Self {
        Self {
            input: Vec::new(),
            acts: Vec::new(),
            delta: Vec::new(),
            next_delta: Vec::new(),
        }
    }
}

fn forward_tape(mlp: &DeferredMlp, ex: &TrainExample, tape: &mut Tape) -> DVec3 {
    mlp.assemble_input(ex.diffuse, ex.feature, ex.direction, &mut tape.input);
    let layers = mlp.layers();
    tape.acts.resize_with(layers.len(), Vec::new);
    for (i, layer) in layers.iter().enumerate() {
        let (done, rest) = tape.acts.split_at_mut(i);
        let input = if i == 0 { &tape.input } else { &done[i - 1] };
        let out = &mut rest[0];
        layer.apply(input, out);
        if i + 1 < layers.len() {
            out.iter_mut().for_each(|x| *x = x.max(0.0));
        }
    }
    let z = tape.acts.last().expect("at least one layer");
    ex.diffuse + DVec3::new(sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2]))
}

/// Adds `scale * d(loss)/d(params)` for one example into `grad`; returns
/// the example's loss.
fn backward_example(mlp: &DeferredMlp, ex: &TrainExample, scale: f64, tape: &mut Tape, grad: &mut [f64]) -> f64 {
    let pred = forward_tape(mlp, ex, tape);
    let err = pred - ex.target;
    let layers = mlp.layers();
    let last = layers.len() - 1;
    let z = &tape.acts[last];
    tape.delta.clear();
    for c in 0..3 {
        let s = sigmoid(z[c]);
        tape.delta.push(2.0 * err[c] * scale * s * (1.0 - s));
    }
    // Parameter offsets per layer.
    let mut offsets = Vec::with_capacity(layers.len());
    let mut o = 0;
    for l in layers {
        offsets.push(o);
        o += l.weights.len() + l.bias.len();
    }
    for i in (0..layers.len()).rev() {
        let layer = &layers[i];
        let input: &[f64] = if i == 0 { &tape.input } else { &tape.acts[i - 1] };
        let base = offsets[i];
        let (gw, gb) = grad[base..base + layer.weights.len() + layer.bias.len()].split_at_mut(layer.weights.len());
        for r in 0..layer.rows {
            let d = tape.delta[r];
            if d == 0.0 {
                continue;
            }
            gb[r] += d;
            let row = &mut gw[r * layer.cols..(r + 1) * layer.cols];
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
        }
        if i == 0 {
            break;
        }
        tape.next_delta.clear();
        tape.next_delta.resize(layer.cols, 0.0);
        for r in 0..layer.rows {
            let d = tape.delta[r];
            if d == 0.0 {
                continue;
            }
            let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
            for (nd, w) in tape.next_delta.iter_mut().zip(row) {
                *nd += d * w;
            }
        }
        // Rectifier derivative, read from the stored post-activation.
        for (nd, a) in tape.next_delta.iter_mut().zip(input) {
            if *a <= 0.0 {
                *nd = 0.0;
            }
        }
        std::mem::swap(&mut tape.delta, &mut tape.next_delta);
    }
    err.length_squared()
}

/// Mean over the batch of the per-example squared error, and its gradient
/// with respect to [`DeferredMlp::params`].
pub fn shade_loss_and_grad(mlp: &DeferredMlp, batch: &[TrainExample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let n = mlp.param_count();
    let scale = 1.0 / batch.len() as f64;
    let chunks: Vec<&[TrainExample]> = batch.chunks(CHUNK).collect();
    let partials = par::map_collect(chunks, |chunk| {
        let mut grad = vec![0.0; n];
        let mut tape = Tape::new();
        let loss: f64 = chunk
            .iter()
            .map(|ex| backward_example(mlp, ex, scale, &mut tape, &mut grad))
            .sum();
        (loss, grad)
    });
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss * scale, grad))
}

/// Mean loss without gradients.
pub fn shade_loss(mlp: &DeferredMlp, examples: &[TrainExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let chunks: Vec<&[TrainExample]> = examples.chunks(CHUNK).collect();
    let partials = par::map_collect(chunks, |chunk| {
        let mut tape = Tape::new();
        chunk
            .iter()
            .map(|ex| (forward_tape(mlp, ex, &mut tape) - ex.target).length_squared())
            .sum::<f64>()
    });
    Ok(partials.iter().sum::<f64>() / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::invalid(format!(
            "Adam shapes differ: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Settings used to march the training views.
    pub render: RenderConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 3e-4,
            batch_size: 4096,
            seed: 0,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneResult {
    pub mlp: DeferredMlp,
    /// Entry 0 is the initial loss; entry `e` the best loss after epoch `e`.
    pub loss_trace: Vec<f64>,
}

/// Marches every pixel of every view through the grid and keeps those
/// with nonzero accumulated alpha; pixels without alpha bypass the network.
pub fn training_examples<T: Channel>(grid: &BlockGrid<T>, views: &[(Camera, Image)], render: &RenderConfig) -> Result<Vec<TrainExample>> {
    render.validate()?;
    let mut out = Vec::new();
    for (i, (camera, image)) in views.iter().enumerate() {
        if (camera.width, camera.height) != (image.width, image.height) {
            return Err(Error::invalid(format!(
                "view {i}: camera is {}x{} but image is {}x{}",
                camera.width, camera.height, image.width, image.height
            )));
        }
        let accs = accumulate_frame(grid, camera, render);
        for (p, acc) in accs.iter().enumerate() {
            if acc.alpha <= 0.0 {
                continue;
            }
            let (row, col) = ((p / camera.width as usize) as u32, (p % camera.width as usize) as u32);
            let pixel = DVec3::from_array(image.pixels[p].map(f64::from));
            out.push(TrainExample {
                diffuse: acc.diffuse,
                feature: acc.feature,
                direction: camera.ray_unchecked(row, col).direction,
                target: pixel - (1.0 - acc.alpha) * render.background,
            });
        }
    }
    Ok(out)
}

/// Minibatch Adam on the shading network, keeping the best parameters seen.
pub fn finetune<T: Channel>(
    grid: &BlockGrid<T>,
    mlp: &DeferredMlp,
    views: &[(Camera, Image)],
    config: &FinetuneConfig,
) -> Result<FinetuneResult> {
    if views.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one view"));
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }
    let mut examples = training_examples(grid, views, &config.render)?;
    if examples.is_empty() {
        return Ok(FinetuneResult {
            mlp: mlp.clone(),
            loss_trace: vec![0.0; config.epochs + 1],
        });
    }
    let mut current = mlp.clone();
    let mut params = current.params();
    let mut best = (shade_loss(&current, &examples)?, params.clone());
    let mut trace = vec![best.0];
    let mut adam = AdamState::new(params.len(), config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.epochs {
        examples.shuffle(&mut rng);
        for batch in examples.chunks(config.batch_size) {
            let (_, grad) = shade_loss_and_grad(&current, batch)?;
            adam_step(&mut params, &grad, &mut adam)?;
            current.set_params(&params)?;
        }
        let loss = shade_loss(&current, &examples)?;
        if loss < best.0 {
            best = (loss, params.clone());
        }
        trace.push(best.0);
    }
    let mut out = mlp.clone();
    out.set_params(&best.1)?;
    Ok(FinetuneResult { mlp: out, loss_trace: trace })
}

/// Writes `epoch,loss` lines.
pub fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let text: String = trace
        .iter()
        .enumerate()
        .map(|(e, l)| format!("{e},{l:.12e}\n"))
        .collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
