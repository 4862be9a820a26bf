use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snerg::baker::{bake, training_rig, BakeConfig};
use snerg::finetune::{
    adam_step, finetune, shade_loss_and_grad, training_examples, AdamState, FinetuneConfig, TrainExample,
};
use snerg::math::Camera;
use snerg::renderer::{accumulate_frame, orbit_camera, render_frame, RenderConfig};
use snerg::scene::{BuiltinScene, DeferredMlp};
use snerg::store::SnergGrid;
use snerg::{DVec3, DVec4};

fn random_example(rng: &mut ChaCha8Rng) -> TrainExample {
    let mut unit = || rng.random_range(0.0..1.0);
    let diffuse = DVec3::new(unit(), unit(), unit());
    let feature = DVec4::new(unit(), unit(), unit(), unit());
    let target = DVec3::new(unit(), unit(), unit());
    let dir = DVec3::new(unit() - 0.5, unit() - 0.5, unit() - 0.5).normalize();
    TrainExample {
        diffuse,
        feature,
        direction: dir,
        target,
    }
}

fn loss_at(mlp: &DeferredMlp, params: &[f64], batch: &[TrainExample]) -> f64 {
    let mut m = mlp.clone();
    m.set_params(params).unwrap();
    shade_loss_and_grad(&m, batch).unwrap().0
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let mut mlp = DeferredMlp::random(&[16, 16], 4, case);
        // Random biases so hidden units sit away from zero in both directions.
        let mut params = mlp.params();
        params.iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
        mlp.set_params(&params).unwrap();
        let batch = vec![random_example(&mut rng)];
        let (_, grad) = shade_loss_and_grad(&mlp, &batch).unwrap();
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            let fd = (loss_at(&mlp, &plus, &batch) - loss_at(&mlp, &minus, &batch)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn first_adam_step_is_signed_learning_rate() {
    let lr = 3e-4;
    let grads = [0.5, -2.0, 1e-3, -7.0];
    let start = [0.1, 0.2, 0.3, 0.4];
    let mut params = start;
    let mut state = AdamState::new(4, lr);
    adam_step(&mut params, &grads, &mut state).unwrap();
    for i in 0..4 {
        let step = params[i] - start[i];
        // m_hat = g and v_hat = g^2, so the update is -lr * g / (|g| + eps).
        let expected = -lr * grads[i] / (grads[i].abs() + 1e-8);
        assert!((step - expected).abs() < 1e-15, "{step} vs {expected}");
        assert!((step + lr * grads[i].signum()).abs() < lr * 1e-5);
    }
}

fn small_grid() -> SnergGrid {
    let scene = BuiltinScene::parse("lambert-spheres").unwrap();
    let mut config = BakeConfig::new(32, 8);
    config.supersamples = 2;
    bake(&scene, &training_rig(8, 4.0, 50.0, 16, 16).unwrap(), &config).unwrap()
}

fn views_with(grid: &SnergGrid, mlp: &DeferredMlp, render: &RenderConfig) -> Vec<(Camera, snerg::image::Image)> {
    (0..3)
        .map(|i| {
            let cam = orbit_camera(i, 3, 24, 24).unwrap();
            let img = render_frame(grid, mlp, &cam, render).unwrap();
            (cam, img)
        })
        .collect()
}

fn views(grid: &SnergGrid, mlp: &DeferredMlp) -> Vec<(Camera, snerg::image::Image)> {
    views_with(grid, mlp, &RenderConfig::default())
}

#[test]
fn zero_epochs_leave_the_network_alone() {
    let grid = small_grid();
    let mlp = DeferredMlp::random_specular(1, -2.0);
    let config = FinetuneConfig {
        epochs: 0,
        ..Default::default()
    };
    let out = finetune(&grid, &mlp, &views(&grid, &DeferredMlp::zeros(&[16, 16], 4)), &config).unwrap();
    assert_eq!(out.mlp, mlp);
    assert_eq!(out.loss_trace.len(), 1);
}

#[test]
fn self_generated_targets_are_already_optimal() {
    let grid = small_grid();
    // A faint residual over a black background keeps every pixel below the
    // clamp, so the images are exactly the network's unclamped output.
    let mlp = DeferredMlp::random_specular(2, -5.0);
    let render = RenderConfig {
        background: DVec3::ZERO,
        ..Default::default()
    };
    let config = FinetuneConfig {
        epochs: 5,
        batch_size: 256,
        render,
        ..Default::default()
    };
    let out = finetune(&grid, &mlp, &views_with(&grid, &mlp, &render), &config).unwrap();
    let trace = &out.loss_trace;
    assert!(trace[0] < 1e-10, "initial loss {}", trace[0]);
    assert!(trace.last().unwrap() <= &trace[0]);
    assert!(trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let grid = small_grid();
    let start = DeferredMlp::random_specular(3, -2.0);
    let target = DeferredMlp::random_specular(4, -1.0);
    let config = FinetuneConfig {
        epochs: 20,
        lr: 1e-2,
        batch_size: 128,
        seed: 9,
        ..Default::default()
    };
    let v = views(&grid, &target);
    let a = finetune(&grid, &start, &v, &config).unwrap();
    let b = finetune(&grid, &start, &v, &config).unwrap();
    assert_eq!(a, b);
    assert!(a.loss_trace.last().unwrap() < &(0.5 * a.loss_trace[0]), "{:?}", a.loss_trace);
    assert!(a.loss_trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn examples_reuse_renderer_accumulations() {
    let grid = small_grid();
    let render = RenderConfig::default();
    let v = views(&grid, &DeferredMlp::zeros(&[16, 16], 4));
    let examples = training_examples(&grid, &v, &render).unwrap();
    let mut expected = Vec::new();
    for (cam, _) in &v {
        expected.extend(accumulate_frame(&grid, cam, &render).into_iter().filter(|a| a.alpha > 0.0));
    }
    assert_eq!(examples.len(), expected.len());
    for (e, acc) in examples.iter().zip(&expected) {
        assert_eq!(e.diffuse, acc.diffuse);
        assert_eq!(e.feature, acc.feature);
    }
}

#[test]
fn mismatched_view_is_rejected() {
    let grid = small_grid();
    let cam = orbit_camera(0, 1, 8, 8).unwrap();
    let img = snerg::image::Image::filled(4, 4, DVec3::ONE);
    assert!(finetune(&grid, &DeferredMlp::zeros(&[16, 16], 4), &[(cam, img)], &FinetuneConfig::default()).is_err());
    assert!(finetune(&grid, &DeferredMlp::zeros(&[16, 16], 4), &[], &FinetuneConfig::default()).is_err());
}
