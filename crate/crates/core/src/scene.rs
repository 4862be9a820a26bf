//! Scene functions and the deferred shading network.
//!
//! A [`SceneFunction`] maps a point to density, diffuse colour and a
//! 4-channel feature vector. Three analytic scenes are built in; their
//! closed forms are documented on each type and in the README.

use glam::{DVec3, DVec4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::math::{encode_into, Aabb, RayAccumulation, SampleValue};
use crate::{Error, Result};

/// Deterministic volumetric scene. Implementations may return anything
/// outside [`SceneFunction::bounds`]; [`eval_scene`] zeroes density there.
pub trait SceneFunction: Send + Sync {
    fn bounds(&self) -> Aabb;
    fn evaluate(&self, point: DVec3) -> SampleValue;
}

/// Evaluates `scene` with the bounds contract applied.
pub fn eval_scene(scene: &dyn SceneFunction, point: DVec3) -> Result<SampleValue> {
    if !point.is_finite() {
        return Err(Error::invalid(format!("non-finite scene query point {point}")));
    }
    Ok(eval_unchecked(scene, point))
}

#[inline]
pub(crate) fn eval_unchecked(scene: &dyn SceneFunction, point: DVec3) -> SampleValue {
    let mut s = scene.evaluate(point);
    if !scene.bounds().contains(point) {
        s.density = 0.0;
    }
    s
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    if edge1 <= edge0 {
        return if x < edge0 { 0.0 } else { 1.0 };
    }
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Density profile of a solid ball with a smooth boundary of half-width
/// `falloff`: full density for `d <= -falloff`, zero for `d >= falloff`,
/// where `d` is the signed distance to the sphere surface.
fn ball_profile(signed_distance: f64, falloff: f64) -> f64 {
    1.0 - smoothstep(-falloff, falloff, signed_distance)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere {
    pub center: DVec3,
    pub radius: f64,
    pub density: f64,
    pub albedo: DVec3,
    /// Specular tint (rgb) and sharpness.
    pub feature: DVec4,
}

/// Three solid spheres with smooth density falloff and Lambert-shaded
/// albedo under a fixed directional light.
///
/// For sphere `i` with signed surface distance `d_i = |p - c_i| - r_i`:
/// `sigma_i = rho_i * (1 - smoothstep(-w, w, d_i))`; total density is the
/// sum. The diffuse colour of sphere `i` is
/// `albedo_i * (0.3 + 0.7 * max(0, n_i . l))` with `n_i` the outward unit
/// normal (taken equal to `l` at the exact centre). Diffuse and feature are
/// density-weighted averages over spheres, falling back to the sphere with
/// the nearest surface where all densities vanish.
#[derive(Clone, Debug, PartialEq)]
pub struct LambertSpheres {
    pub spheres: Vec<Sphere>,
    pub falloff: f64,
    pub light: DVec3,
    pub ambient: f64,
}

impl Default for LambertSpheres {
    fn default() -> Self {
        Self {
            spheres: vec![
                Sphere {
                    center: DVec3::new(-0.38, -0.22, 0.0),
                    radius: 0.3,
                    density: 50.0,
                    albedo: DVec3::new(0.85, 0.3, 0.2),
                    feature: DVec4::new(0.9, 0.9, 0.9, 0.8),
                },
                Sphere {
                    center: DVec3::new(0.36, -0.16, 0.12),
                    radius: 0.25,
                    density: 50.0,
                    albedo: DVec3::new(0.2, 0.55, 0.85),
                    feature: DVec4::new(0.5, 0.7, 1.0, 0.3),
                },
                Sphere {
                    center: DVec3::new(0.02, 0.42, -0.1),
                    radius: 0.28,
                    density: 50.0,
                    albedo: DVec3::new(0.3, 0.75, 0.3),
                    feature: DVec4::new(1.0, 0.8, 0.4, 0.6),
                },
            ],
            falloff: 0.03,
            light: DVec3::new(0.4, -0.3, 0.85).normalize(),
            ambient: 0.3,
        }
    }
}

impl LambertSpheres {
    fn shaded(&self, sphere: &Sphere, p: DVec3) -> DVec3 {
        let n = (p - sphere.center).try_normalize().unwrap_or(self.light);
        sphere.albedo * (self.ambient + (1.0 - self.ambient) * n.dot(self.light).max(0.0))
    }
}

impl SceneFunction for LambertSpheres {
    fn bounds(&self) -> Aabb {
        Aabb::cube(1.0)
    }

    fn evaluate(&self, p: DVec3) -> SampleValue {
        let mut density = 0.0;
        let mut diffuse = DVec3::ZERO;
        let mut feature = DVec4::ZERO;
        let mut nearest = (f64::INFINITY, 0);
        for (i, s) in self.spheres.iter().enumerate() {
            let d = (p - s.center).length() - s.radius;
            if d < nearest.0 {
                nearest = (d, i);
            }
            let sigma = s.density * ball_profile(d, self.falloff);
            if sigma > 0.0 {
                density += sigma;
                diffuse += sigma * self.shaded(s, p);
                feature += sigma * s.feature;
            }
        }
        if density > 0.0 {
            diffuse /= density;
            feature /= density;
        } else if let Some(s) = self.spheres.get(nearest.1) {
            diffuse = self.shaded(s, p);
            feature = s.feature;
        }
        SampleValue {
            density,
            diffuse,
            feature,
        }
    }
}

/// Constant density `sigma0` for `z_min <= z <= z_max`, zero elsewhere.
/// Diffuse and feature are constant everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct Slab {
    pub density: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub diffuse: DVec3,
    pub feature: DVec4,
}

impl Default for Slab {
    fn default() -> Self {
        Self {
            density: 4.0,
            z_min: -0.125,
            z_max: 0.125,
            diffuse: DVec3::new(0.9, 0.6, 0.3),
            feature: DVec4::new(0.2, 0.4, 0.6, 0.8),
        }
    }
}

impl Slab {
    pub fn thickness(&self) -> f64 {
        self.z_max - self.z_min
    }
}

impl SceneFunction for Slab {
    fn bounds(&self) -> Aabb {
        Aabb::cube(1.0)
    }

    fn evaluate(&self, p: DVec3) -> SampleValue {
        let inside = p.z >= self.z_min && p.z <= self.z_max;
        SampleValue {
            density: if inside { self.density } else { 0.0 },
            diffuse: self.diffuse,
            feature: self.feature,
        }
    }
}

/// A dense spherical shell hiding a coloured core.
///
/// With `r = |p|`: shell density
/// `rho_s * (1 - smoothstep(-w, w, r - outer)) * smoothstep(-w, w, r - inner)`
/// and core density `rho_c * (1 - smoothstep(-w, w, r - core_radius))`.
/// Colours mix by density, falling back to whichever part has the nearer
/// surface in empty space.
#[derive(Clone, Debug, PartialEq)]
pub struct EnclosedCore {
    pub inner: f64,
    pub outer: f64,
    pub shell_density: f64,
    pub shell_diffuse: DVec3,
    pub shell_feature: DVec4,
    pub core_radius: f64,
    pub core_density: f64,
    pub core_diffuse: DVec3,
    pub core_feature: DVec4,
    pub falloff: f64,
}

impl Default for EnclosedCore {
    fn default() -> Self {
        Self {
            inner: 0.55,
            outer: 0.75,
            shell_density: 200.0,
            shell_diffuse: DVec3::new(0.55, 0.55, 0.6),
            shell_feature: DVec4::new(0.3, 0.3, 0.3, 0.2),
            core_radius: 0.3,
            core_density: 50.0,
            core_diffuse: DVec3::new(0.9, 0.15, 0.1),
            core_feature: DVec4::new(1.0, 0.2, 0.2, 0.9),
            falloff: 0.02,
        }
    }
}

impl SceneFunction for EnclosedCore {
    fn bounds(&self) -> Aabb {
        Aabb::cube(1.0)
    }

    fn evaluate(&self, p: DVec3) -> SampleValue {
        let r = p.length();
        let w = self.falloff;
        let shell =
            self.shell_density * ball_profile(r - self.outer, w) * smoothstep(-w, w, r - self.inner);
        let core = self.core_density * ball_profile(r - self.core_radius, w);
        let density = shell + core;
        let (diffuse, feature) = if density > 0.0 {
            (
                (shell * self.shell_diffuse + core * self.core_diffuse) / density,
                (shell * self.shell_feature + core * self.core_feature) / density,
            )
        } else {
            let to_shell = (self.inner - r).max(r - self.outer);
            let to_core = r - self.core_radius;
            if to_core < to_shell {
                (self.core_diffuse, self.core_feature)
            } else {
                (self.shell_diffuse, self.shell_feature)
            }
        };
        SampleValue {
            density,
            diffuse,
            feature,
        }
    }
}

/// The built-in scenes, selectable by name.
#[derive(Clone, Debug, PartialEq)]
pub enum BuiltinScene {
    LambertSpheres(LambertSpheres),
    Slab(Slab),
    EnclosedCore(EnclosedCore),
}

impl BuiltinScene {
    pub const NAMES: [&'static str; 3] = ["lambert-spheres", "slab", "enclosed-core"];

    /// Looks up a scene by name and applies `key=value` overrides.
    ///
    /// Keys: `lambert-spheres`: `density`, `falloff`; `slab`: `density`,
    /// `z_min`, `z_max`; `enclosed-core`: `inner`, `outer`, `shell_density`,
    /// `core_radius`, `core_density`, `falloff`.
    pub fn from_name(name: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut scene = match name {
            "lambert-spheres" => BuiltinScene::LambertSpheres(LambertSpheres::default()),
            "slab" => BuiltinScene::Slab(Slab::default()),
            "enclosed-core" => BuiltinScene::EnclosedCore(EnclosedCore::default()),
            other => {
                return Err(Error::invalid(format!(
                    "unknown scene {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        for (key, raw) in overrides {
            let value: f64 = raw
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("scene parameter {key}={raw:?} is not a number")))?;
            if !value.is_finite() {
                return Err(Error::invalid(format!("scene parameter {key} must be finite")));
            }
            scene.set(key.trim(), value)?;
        }
        scene.validate()?;
        Ok(scene)
    }

    /// Parses `name` or `name:key=value,key=value`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let overrides = rest
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::invalid(format!("expected key=value, got {kv:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_name(name.trim(), &overrides)
    }

    fn set(&mut self, key: &str, value: f64) -> Result<()> {
        match (self, key) {
            (BuiltinScene::LambertSpheres(s), "density") => s.spheres.iter_mut().for_each(|sp| sp.density = value),
            (BuiltinScene::LambertSpheres(s), "falloff") => s.falloff = value,
            (BuiltinScene::Slab(s), "density") => s.density = value,
            (BuiltinScene::Slab(s), "z_min") => s.z_min = value,
            (BuiltinScene::Slab(s), "z_max") => s.z_max = value,
            (BuiltinScene::EnclosedCore(s), "inner") => s.inner = value,
            (BuiltinScene::EnclosedCore(s), "outer") => s.outer = value,
            (BuiltinScene::EnclosedCore(s), "shell_density") => s.shell_density = value,
            (BuiltinScene::EnclosedCore(s), "core_radius") => s.core_radius = value,
            (BuiltinScene::EnclosedCore(s), "core_density") => s.core_density = value,
            (BuiltinScene::EnclosedCore(s), "falloff") => s.falloff = value,
            (scene, key) => {
                return Err(Error::invalid(format!("scene {} has no parameter {key:?}", scene.name())))
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            BuiltinScene::LambertSpheres(s) => s.falloff >= 0.0 && s.spheres.iter().all(|sp| sp.density >= 0.0),
            BuiltinScene::Slab(s) => s.density >= 0.0 && s.z_min <= s.z_max,
            BuiltinScene::EnclosedCore(s) => {
                s.falloff >= 0.0
                    && s.shell_density >= 0.0
                    && s.core_density >= 0.0
                    && s.inner < s.outer
                    && s.core_radius >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("inconsistent parameters for scene {}", self.name())))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BuiltinScene::LambertSpheres(_) => "lambert-spheres",
            BuiltinScene::Slab(_) => "slab",
            BuiltinScene::EnclosedCore(_) => "enclosed-core",
        }
    }

    fn inner(&self) -> &dyn SceneFunction {
        match self {
            BuiltinScene::LambertSpheres(s) => s,
            BuiltinScene::Slab(s) => s,
            BuiltinScene::EnclosedCore(s) => s,
        }
    }
}

impl SceneFunction for BuiltinScene {
    fn bounds(&self) -> Aabb {
        self.inner().bounds()
    }

    fn evaluate(&self, point: DVec3) -> SampleValue {
        self.inner().evaluate(point)
    }
}

/// Fully connected layer, `weights` row-major with `rows` outputs and
/// `cols` inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    #[inline]
    pub(crate) fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.cols).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(input).fold(*b, |acc, (w, x)| acc + w * x)
        }));
    }
}

pub const DEFAULT_HIDDEN: [usize; 2] = [16, 16];
pub const DEFAULT_DIR_BANDS: usize = 4;

/// Width of the accumulated diffuse colour plus features.
const ACCUMULATED_WIDTH: usize = 7;

/// The per-pixel view-dependence network: rectifier hidden layers and a
/// logistic output producing an RGB residual.
///
/// Input is `[accumulated diffuse (3), accumulated features (4),
/// positional_encode(direction, bands)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeferredMlp {
    layers: Vec<DenseLayer>,
    dir_bands: usize,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl DeferredMlp {
    pub fn new(layers: Vec<DenseLayer>, dir_bands: usize) -> Result<Self> {
        let input_width = Self::input_width_for(dir_bands);
        let Some(last) = layers.last() else {
            return Err(Error::invalid("network needs at least one layer"));
        };
        if last.rows != 3 {
            return Err(Error::invalid(format!("output layer must have 3 rows, has {}", last.rows)));
        }
        let mut width = input_width;
        for (i, layer) in layers.iter().enumerate() {
            if layer.cols != width {
                return Err(Error::invalid(format!(
                    "layer {i} expects {} inputs but receives {width}",
                    layer.cols
                )));
            }
            if layer.weights.len() != layer.rows * layer.cols || layer.bias.len() != layer.rows {
                return Err(Error::invalid(format!("layer {i} weight or bias length does not match its shape")));
            }
            if !layer.weights.iter().chain(&layer.bias).all(|w| w.is_finite()) {
                return Err(Error::invalid(format!("layer {i} has non-finite parameters")));
            }
            width = layer.rows;
        }
        Ok(Self { layers, dir_bands })
    }

    pub fn input_width_for(dir_bands: usize) -> usize {
        ACCUMULATED_WIDTH + 3 + 6 * dir_bands
    }

    fn widths(hidden: &[usize], dir_bands: usize) -> Vec<usize> {
        let mut widths = vec![Self::input_width_for(dir_bands)];
        widths.extend_from_slice(hidden);
        widths.push(3);
        widths
    }

    /// All weights and biases zero.
    pub fn zeros(hidden: &[usize], dir_bands: usize) -> Self {
        let layers = Self::widths(hidden, dir_bands)
            .windows(2)
            .map(|w| DenseLayer::zeros(w[1], w[0]))
            .collect();
        Self { layers, dir_bands }
    }

    /// Glorot-uniform weights, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`,
    /// and zero biases.
    pub fn random(hidden: &[usize], dir_bands: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = Self::widths(hidden, dir_bands)
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let a = (6.0 / (cols + rows) as f64).sqrt();
                let mut layer = DenseLayer::zeros(rows, cols);
                layer.weights.iter_mut().for_each(|x| *x = rng.random_range(-a..=a));
                layer
            })
            .collect();
        Self { layers, dir_bands }
    }

    /// Default-sized random network with every output bias set to
    /// `output_bias`, so the initial residual is a modest specular term.
    pub fn random_specular(seed: u64, output_bias: f64) -> Self {
        let mut mlp = Self::random(&DEFAULT_HIDDEN, DEFAULT_DIR_BANDS, seed);
        if let Some(last) = mlp.layers.last_mut() {
            last.bias.iter_mut().for_each(|b| *b = output_bias);
        }
        mlp
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn dir_bands(&self) -> usize {
        self.dir_bands
    }

    pub fn input_width(&self) -> usize {
        Self::input_width_for(self.dir_bands)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            l.weights.copy_from_slice(w);
            let (b, r) = r.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }

    /// Network output (after the logistic) for an already assembled input.
    pub fn forward(&self, input: &[f64]) -> Result<DVec3> {
        if input.len() != self.input_width() {
            return Err(Error::invalid(format!(
                "network expects {} inputs, got {}",
                self.input_width(),
                input.len()
            )));
        }
        Ok(self.forward_scratch(input, &mut Scratch::default()))
    }

    pub(crate) fn forward_scratch(&self, input: &[f64], scratch: &mut Scratch) -> DVec3 {
        let Scratch { a, b, .. } = scratch;
        a.clear();
        a.extend_from_slice(input);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(a, b);
            if i < last {
                b.iter_mut().for_each(|x| *x = x.max(0.0));
            }
            std::mem::swap(a, b);
        }
        DVec3::new(sigmoid(a[0]), sigmoid(a[1]), sigmoid(a[2]))
    }

    pub(crate) fn assemble_input(&self, diffuse: DVec3, feature: DVec4, direction: DVec3, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&diffuse.to_array());
        out.extend_from_slice(&feature.to_array());
        encode_into(&direction.to_array(), self.dir_bands, out);
    }
}

/// Reusable buffers for repeated forward passes.
#[derive(Default, Debug, Clone)]
pub(crate) struct Scratch {
    pub input: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

/// `mlp` applied to an assembled input vector.
pub fn mlp_forward(mlp: &DeferredMlp, input: &[f64]) -> Result<DVec3> {
    mlp.forward(input)
}

/// Final pixel colour before background compositing: accumulated diffuse
/// plus the network's residual, clamped to `[0, 1]`. Rays with zero
/// accumulated opacity skip the network.
pub fn shade_deferred(mlp: &DeferredMlp, acc: &RayAccumulation, direction: DVec3) -> Result<DVec3> {
    if (direction.length() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("view direction {direction} is not unit length")));
    }
    Ok(shade_with(mlp, acc, direction, &mut Scratch::default()))
}

pub(crate) fn shade_with(mlp: &DeferredMlp, acc: &RayAccumulation, direction: DVec3, scratch: &mut Scratch) -> DVec3 {
    if acc.alpha == 0.0 {
        return acc.diffuse;
    }
    let mut input = std::mem::take(&mut scratch.input);
    mlp.assemble_input(acc.diffuse, acc.feature, direction, &mut input);
    let residual = mlp.forward_scratch(&input, scratch);
    scratch.input = input;
    (acc.diffuse + residual).clamp(DVec3::ZERO, DVec3::ONE)
}

/// Weight and scale of the Cauchy density penalty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsityParams {
    pub lambda_s: f64,
    pub c: f64,
}

impl Default for SparsityParams {
    fn default() -> Self {
        Self { lambda_s: 1e-4, c: 0.5 }
    }
}

impl SparsityParams {
    pub fn new(lambda_s: f64, c: f64) -> Result<Self> {
        if !(lambda_s >= 0.0) || !(c > 0.0) {
            return Err(Error::invalid("sparsity weight must be >= 0 and scale > 0"));
        }
        Ok(Self { lambda_s, c })
    }
}

/// `lambda_s * sum log(1 + sigma^2 / c)`.
pub fn sparsity_loss(densities: &[f64], params: SparsityParams) -> f64 {
    params.lambda_s * densities.iter().map(|s| (s * s / params.c).ln_1p()).sum::<f64>()
}
