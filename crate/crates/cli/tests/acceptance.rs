//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test --release -p snerg-cli --test acceptance`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snerg::baker::{bake, training_rig, BakeConfig};
use snerg::finetune::{finetune, shade_loss_and_grad, FinetuneConfig, TrainExample};
use snerg::image::{psnr, Image};
use snerg::math::{composite, Aabb, Camera, Ray, SampleValue};
use snerg::renderer::{march_ray, orbit_camera, render_frame, render_scene_direct, RenderConfig};
use snerg::scene::{BuiltinScene, DeferredMlp, EnclosedCore, Slab};
use snerg::store::{export_bundle_with, import_bundle, ExportOptions, PaddedBlock, QuantizedGrid, SnergGrid};
use snerg::{DVec3, DVec4};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rig() -> Vec<Camera> {
    training_rig(64, 4.0, 100.0, 64, 64).unwrap()
}

fn mlp() -> DeferredMlp {
    DeferredMlp::random_specular(0, -2.0)
}

fn scene(name: &str) -> BuiltinScene {
    BuiltinScene::parse(name).unwrap()
}

/// Spheres at N = 256 with the default 32-voxel macroblocks.
fn spheres_256() -> &'static SnergGrid {
    static GRID: OnceLock<SnergGrid> = OnceLock::new();
    GRID.get_or_init(|| bake(&scene("lambert-spheres"), &rig(), &BakeConfig::new(256, 32)).unwrap())
}

/// Spheres at N = 256 with 16-voxel macroblocks: under 10% occupancy.
fn sparse_spheres() -> &'static QuantizedGrid {
    static GRID: OnceLock<QuantizedGrid> = OnceLock::new();
    GRID.get_or_init(|| {
        bake(&scene("lambert-spheres"), &rig(), &BakeConfig::new(256, 16))
            .unwrap()
            .quantize()
    })
}

fn slab_128() -> &'static SnergGrid {
    static GRID: OnceLock<SnergGrid> = OnceLock::new();
    GRID.get_or_init(|| bake(&Slab::default(), &rig(), &BakeConfig::new(128, 16)).unwrap())
}

fn core_config(visibility: f64) -> BakeConfig {
    let mut config = BakeConfig::new(64, 4);
    config.visibility_threshold = visibility;
    config
}

fn enclosed_core(visibility: f64) -> SnergGrid {
    bake(&EnclosedCore::default(), &rig(), &core_config(visibility)).unwrap()
}

fn brute_force(samples: &[SampleValue], deltas: &[f64]) -> (DVec3, DVec4, f64) {
    let (mut diffuse, mut feature, mut optical) = (DVec3::ZERO, DVec4::ZERO, 0.0f64);
    for (s, d) in samples.iter().zip(deltas) {
        let w = (-optical).exp() * (1.0 - (-s.density * d).exp());
        diffuse += w * s.diffuse;
        feature += w * s.feature;
        optical += s.density * d;
    }
    (diffuse, feature, 1.0 - (-optical).exp())
}

fn quadrature_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let mut unit = || rng.random_range(0.0..=1.0);
        let samples: Vec<SampleValue> = (0..n)
            .map(|_| SampleValue {
                density: 20.0 * unit(),
                diffuse: DVec3::new(unit(), unit(), unit()),
                feature: DVec4::new(unit(), unit(), unit(), unit()),
            })
            .collect();
        let deltas: Vec<f64> = (0..n).map(|_| 0.001 + 0.2 * rng.random_range(0.0..1.0)).collect();
        let acc = composite(&samples, &deltas).unwrap();
        let (d, f, a) = brute_force(&samples, &deltas);
        worst = worst
            .max((acc.diffuse - d).abs().max_element())
            .max((acc.feature - f).abs().max_element())
            .max((acc.alpha - a).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-12 && secs < 1.0, format!("max error {worst:.2e} over 1000 lists in {secs:.3} s"))
}

fn analytic_transmittance() -> Outcome {
    let start = Instant::now();
    let slab = Slab::default();
    let grid = slab_128().quantize();
    let expected = 1.0 - (-slab.density * slab.thickness()).exp();
    let mut worst: f64 = 0.0;
    for (x, y) in [(0.0, 0.0), (0.123, -0.301), (-0.55, 0.41), (0.7, 0.66)] {
        let ray = Ray::new(DVec3::new(x, y, 3.0), -DVec3::Z).unwrap();
        let (_, alpha) = march_ray(&grid, &mlp(), &ray, &RenderConfig::default());
        worst = worst.max((alpha - expected).abs() / expected);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 0.02 && secs < 30.0,
        format!("worst relative alpha error {:.3}% (expected {expected:.4}) in {secs:.1} s", 100.0 * worst),
    )
}

fn bake_fidelity() -> Outcome {
    let grid = spheres_256();
    let quantized = grid.quantize();
    let scene = scene("lambert-spheres");
    let render = RenderConfig {
        step_size: Some(grid.voxel_width()),
        ..Default::default()
    };
    let (mut float_db, mut quant_db) = (0.0, 0.0);
    let views = 3;
    for i in 0..views {
        let cam = orbit_camera(i, views, 200, 200).unwrap();
        let direct = render_scene_direct(&scene, &mlp(), &cam, &render).unwrap();
        float_db += psnr(&render_frame(grid, &mlp(), &cam, &render).unwrap(), &direct);
        quant_db += psnr(&render_frame(&quantized, &mlp(), &cam, &render).unwrap(), &direct);
    }
    let (f, q) = (float_db / views as f64, quant_db / views as f64);
    // Quantization may cost at most 1.5 dB; scoring higher than the float
    // path is not a loss.
    check(
        f >= 30.0 && q >= f - 1.5,
        format!("float {f:.2} dB, 8-bit {q:.2} dB ({:+.2} dB) vs direct render", q - f),
    )
}

fn finetune_recovery() -> Outcome {
    let grid = bake(&scene("lambert-spheres"), &rig(), &BakeConfig::new(128, 16)).unwrap();
    let coarse = grid.quantize().requantize(6).unwrap();
    let render = RenderConfig::default();
    let views: Vec<(Camera, Image)> = (0..8)
        .map(|i| {
            let cam = orbit_camera(i, 8, 100, 100).unwrap();
            (cam, render_frame(&grid, &mlp(), &cam, &render).unwrap())
        })
        .collect();
    let score = |m: &DeferredMlp| {
        views
            .iter()
            .map(|(c, img)| psnr(&render_frame(&coarse, m, c, &render).unwrap(), img))
            .sum::<f64>()
            / views.len() as f64
    };
    let config = FinetuneConfig::default();
    let out = finetune(&coarse, &mlp(), &views, &config).unwrap();
    let (before, after) = (score(&mlp()), score(&out.mlp));
    let trace = &out.loss_trace;
    let monotone = trace.windows(2).all(|w| w[1] <= w[0]);
    check(
        after - before >= 0.2 && monotone && trace.len() == config.epochs + 1,
        format!(
            "6-bit PSNR {before:.2} -> {after:.2} dB over {} epochs at lr {}; loss {:.3e} -> {:.3e}, non-increasing: {monotone}",
            config.epochs,
            config.lr,
            trace[0],
            trace[trace.len() - 1]
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let mut mlp = DeferredMlp::random(&[16, 16], 4, case);
        let mut params = mlp.params();
        params.iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
        mlp.set_params(&params).unwrap();
        let mut unit = || rng.random_range(0.0..1.0);
        let example = TrainExample {
            diffuse: DVec3::new(unit(), unit(), unit()),
            feature: DVec4::new(unit(), unit(), unit(), unit()),
            direction: DVec3::new(unit() - 0.5, unit() - 0.5, unit() - 0.5).normalize(),
            target: DVec3::new(unit(), unit(), unit()),
        };
        let batch = [example];
        let (_, grad) = shade_loss_and_grad(&mlp, &batch).unwrap();
        let loss_at = |p: &[f64]| {
            let mut m = mlp.clone();
            m.set_params(p).unwrap();
            shade_loss_and_grad(&m, &batch).unwrap().0
        };
        for i in 0..params.len() {
            let (mut plus, mut minus) = (params.clone(), params.clone());
            plus[i] += h;
            minus[i] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6));
        }
    }
    check(worst <= 1e-4, format!("max relative error {worst:.2e} over 100 cases"))
}

fn optimization_equivalences() -> Outcome {
    let grid = sparse_spheres();
    let occupancy = grid.occupied_fraction();
    let fast = RenderConfig::default();
    let no_skip = RenderConfig {
        skip_empty: false,
        ..fast
    };
    let no_stop = RenderConfig {
        termination: 0.0,
        ..fast
    };
    let cams: Vec<Camera> = (0..4).map(|i| orbit_camera(i, 4, 200, 200).unwrap()).collect();
    let (mut skip_diff, mut stop_diff) = (0.0f32, 0.0f32);
    for cam in &cams {
        let base = render_frame(grid, &mlp(), cam, &fast).unwrap();
        skip_diff = skip_diff.max(base.max_abs_diff(&render_frame(grid, &mlp(), cam, &no_skip).unwrap()));
        stop_diff = stop_diff.max(base.max_abs_diff(&render_frame(grid, &mlp(), cam, &no_stop).unwrap()));
    }
    // Best of three passes over the views for each setting.
    let time = |config: &RenderConfig| {
        (0..3)
            .map(|_| {
                let start = Instant::now();
                for cam in &cams {
                    render_frame(grid, &mlp(), cam, config).unwrap();
                }
                start.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let speedup = time(&no_skip) / time(&fast);
    let tol = 2.0 / 255.0;
    check(
        occupancy <= 0.10 && skip_diff <= tol && stop_diff <= tol && speedup >= 2.0,
        format!(
            "occupancy {:.1}%, skip diff {:.2}/255, termination diff {:.2}/255, skip speedup {speedup:.2}x",
            100.0 * occupancy,
            255.0 * skip_diff,
            255.0 * stop_diff
        ),
    )
}

fn visibility_culling() -> Outcome {
    let scene = EnclosedCore::default();
    let config = core_config(BakeConfig::DEFAULT_VISIBILITY_THRESHOLD);
    let culled = enclosed_core(config.visibility_threshold);
    let unculled = enclosed_core(0.0);

    let nb = config.blocks_per_axis();
    let width = config.voxel_width() * config.block_size as f64;
    let mut interior = 0;
    let mut survivors = 0;
    for z in 0..nb {
        for y in 0..nb {
            for x in 0..nb {
                let lo = config.bounds.min + DVec3::new(x as f64, y as f64, z as f64) * width;
                let far = lo.abs().max((lo + width).abs());
                if far.length() < scene.inner - scene.falloff {
                    interior += 1;
                    survivors += culled.block_slot([x, y, z]).is_some() as usize;
                }
            }
        }
    }
    let mut diff = 0.0f32;
    for i in 0..4 {
        let cam = orbit_camera(i, 4, 128, 128).unwrap();
        let a = render_frame(&culled, &mlp(), &cam, &RenderConfig::default()).unwrap();
        let b = render_frame(&unculled, &mlp(), &cam, &RenderConfig::default()).unwrap();
        diff = diff.max(a.max_abs_diff(&b));
    }
    check(
        interior > 0 && survivors == 0 && diff <= 1.0 / 255.0 && culled.occupied_count() < unculled.occupied_count(),
        format!(
            "{survivors}/{interior} interior blocks kept, blocks {} -> {}, render diff {:.3}/255",
            unculled.occupied_count(),
            culled.occupied_count(),
            255.0 * diff
        ),
    )
}

fn random_grid(rng: &mut ChaCha8Rng) -> QuantizedGrid {
    let n = [32, 64][rng.random_range(0..2)];
    let b = [8, 16][rng.random_range(0..2)];
    let p = b + 1;
    let nb = n / b;
    let density = rng.random_range(0.0..0.6);
    let mut blocks = Vec::new();
    for i in 0..nb * nb * nb {
        if !rng.random_bool(density) {
            continue;
        }
        let mut block = PaddedBlock::<u8>::zeros(p);
        for v in 0..p * p * p {
            block.alpha[v] = rng.random();
            block.rgb[v] = rng.random();
            block.features[v] = rng.random();
        }
        blocks.push((i, block));
    }
    QuantizedGrid::from_blocks(n, b, Aabb::cube(1.0), blocks).unwrap()
}

fn bundle_ratio(grid: &SnergGrid, dir: &Path) -> f64 {
    let options = ExportOptions {
        timestamp: Some(0),
        ..Default::default()
    };
    let summary = export_bundle_with(&grid.quantize(), &mlp(), dir, &options).unwrap();
    summary.total_bytes() as f64 / grid.raw_float_bytes() as f64
}

fn serialization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let options = ExportOptions {
        timestamp: Some(0),
        ..Default::default()
    };
    let mut exact = 0;
    for k in 0..50 {
        let grid = random_grid(&mut rng);
        let m = DeferredMlp::random(&[16, 16], 4, k);
        let dir = tempfile::tempdir().unwrap();
        export_bundle_with(&grid, &m, dir.path(), &options).unwrap();
        let (back, back_mlp) = import_bundle(dir.path()).unwrap();
        exact += (back == grid && back_mlp == m) as usize;
    }
    let mut ratios = BTreeMap::new();
    for (name, grid) in [
        ("lambert-spheres", spheres_256().clone()),
        ("slab", slab_128().clone()),
        ("enclosed-core", enclosed_core(BakeConfig::DEFAULT_VISIBILITY_THRESHOLD)),
    ] {
        let dir = tempfile::tempdir().unwrap();
        ratios.insert(name, bundle_ratio(&grid, dir.path()));
    }
    let worst = ratios.values().copied().fold(0.0, f64::max);
    let listed: Vec<String> = ratios.iter().map(|(k, v)| format!("{k} {:.1}%", 100.0 * v)).collect();
    check(
        exact == 50 && worst < 0.25,
        format!("{exact}/50 bit-exact roundtrips; bundle/float bytes: {}", listed.join(", ")),
    )
}

fn bench_protocol() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let options = ExportOptions {
        timestamp: Some(0),
        ..Default::default()
    };
    export_bundle_with(sparse_spheres(), &mlp(), dir.path(), &options).unwrap();
    let report = dir.path().join("report.txt");
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_snerg"))
        .args(["bench", "--bundle"])
        .arg(dir.path())
        .arg("--report")
        .arg(&report)
        .output()
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    if !out.status.success() {
        return Err(format!("bench exited with {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr)));
    }
    let text = std::fs::read_to_string(&report).unwrap();
    let fields: BTreeMap<&str, f64> = text
        .lines()
        .filter_map(|l| l.split_once('='))
        .filter_map(|(k, v)| v.parse().ok().map(|v| (k, v)))
        .collect();
    let get = |k: &str| fields.get(k).copied().unwrap_or(f64::NAN);
    let keys = [
        "frames",
        "width",
        "height",
        "frame_ms_mean",
        "frame_ms_min",
        "frame_ms_max",
        "march_ms_mean",
        "shade_ms_mean",
        "occupied_fraction",
    ];
    let complete = keys.iter().all(|k| get(k).is_finite()) && fields.len() == keys.len();
    let consistent = get("frame_ms_min") <= get("frame_ms_mean") && get("frame_ms_mean") <= get("frame_ms_max");
    check(
        complete
            && consistent
            && get("frames") == 150.0
            && get("width") == 800.0
            && get("height") == 800.0
            && String::from_utf8_lossy(&out.stdout) == text,
        format!(
            "150 frames at 800x800 in {secs:.1} s, mean {:.1} ms/frame",
            get("frame_ms_mean")
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("quadrature oracle", quadrature_oracle),
        ("analytic transmittance", analytic_transmittance),
        ("bake fidelity", bake_fidelity),
        ("fine-tuning recovery", finetune_recovery),
        ("gradient correctness", gradient_correctness),
        ("optimization equivalences", optimization_equivalences),
        ("visibility culling", visibility_culling),
        ("serialization", serialization),
        ("bench protocol", bench_protocol),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
