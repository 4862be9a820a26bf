//! CPU reference renderer for block-sparse grids.
//!
//! Samples sit at `t_near + (k + 1/2) * step` along the part of the ray
//! inside the grid box. A sample at continuous voxel coordinate `p` (voxel
//! `i` has its centre at `i + 1/2`) interpolates the eight voxels around it;
//! the lower corner decides which macroblock serves the lookup, and the
//! padded border makes the upper corner available inside the same slot.
//! Samples whose lower corner lies in an empty block contribute nothing, and
//! with skipping enabled the marcher jumps straight past that block.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use glam::{DVec3, DVec4};

use crate::image::Image;
use crate::math::{Camera, Compositor, Ray, RayAccumulation};
use crate::par;
use crate::scene::{eval_unchecked, shade_with, DeferredMlp, SceneFunction, Scratch};
use crate::store::{BlockGrid, Channel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    /// Step length in scene units; `None` means one voxel width.
    pub step_size: Option<f64>,
    /// Marching stops once transmittance drops below this.
    pub termination: f64,
    pub background: DVec3,
    pub unpremultiply: bool,
    /// Jump over empty macroblocks instead of stepping through them.
    pub skip_empty: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            step_size: None,
            termination: 0.005,
            background: DVec3::ONE,
            unpremultiply: false,
            skip_empty: true,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("step size must be positive, got {s}")));
            }
        }
        if !(0.0..1.0).contains(&self.termination) {
            return Err(Error::invalid(format!(
                "termination transmittance must be in [0, 1), got {}",
                self.termination
            )));
        }
        Ok(())
    }

    fn step(&self, voxel_width: f64) -> f64 {
        self.step_size.unwrap_or(voxel_width)
    }
}

/// Interpolated channels at one sample position.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct GridSample {
    pub alpha: f64,
    pub diffuse: DVec3,
    pub feature: DVec4,
}

/// Lower interpolation corner, clamped to the grid, of a continuous voxel
/// coordinate, and the fractional offset from it.
#[inline]
fn lower_corner(p: f64, n: usize) -> (usize, f64) {
    let u = (p - 0.5).clamp(0.0, (n - 1) as f64);
    let i = (u.floor() as usize).min(n - 1);
    (i, u - i as f64)
}

/// Sample at a position whose lower corner lives in `slot`. `local` is the
/// lower corner within the block and `frac` the trilinear weights.
#[inline]
fn sample_slot<T: Channel>(grid: &BlockGrid<T>, slot: usize, local: [usize; 3], frac: DVec3) -> GridSample {
    let nearest = [0, 1, 2].map(|a| local[a] + (frac[a] >= 0.5) as usize);
    if grid.alpha_raw(grid.voxel_offset(slot, nearest)).is_zero() {
        return GridSample::default();
    }
    let mut out = GridSample::default();
    let p = grid.physical_block_size();
    let base = grid.voxel_offset(slot, local);
    for corner in 0..8 {
        let d = [corner & 1, (corner >> 1) & 1, corner >> 2];
        let w = [0, 1, 2]
            .map(|a| if d[a] == 1 { frac[a] } else { 1.0 - frac[a] })
            .iter()
            .product::<f64>();
        if w == 0.0 {
            continue;
        }
        let o = base + d[0] + p * (d[1] + p * d[2]);
        let rgb = grid.rgb_raw(o);
        let f = grid.features_raw(o);
        out.alpha += w * grid.alpha_raw(o).to_unit();
        out.diffuse += w * DVec3::new(rgb[0].to_unit(), rgb[1].to_unit(), rgb[2].to_unit());
        out.feature += w * DVec4::new(f[0].to_unit(), f[1].to_unit(), f[2].to_unit(), f[3].to_unit());
    }
    out
}

/// Trilinear lookup at continuous voxel coordinates (`[0, N]` per axis).
/// Returns `None` inside an empty block and all zeros when the nearest
/// voxel has zero alpha.
pub fn trilinear_sample<T: Channel>(grid: &BlockGrid<T>, position: DVec3) -> Result<Option<GridSample>> {
    let n = grid.grid_resolution();
    if !position.is_finite() || position.min_element() < 0.0 || position.max_element() > n as f64 {
        return Err(Error::invalid(format!("position {position} outside the [0, {n}] voxel range")));
    }
    let b = grid.block_size();
    let corners = [0, 1, 2].map(|a| lower_corner(position[a], n));
    let lower = corners.map(|c| c.0);
    let frac = DVec3::new(corners[0].1, corners[1].1, corners[2].1);
    let block = lower.map(|i| i / b);
    Ok(grid
        .block_slot(block)
        .map(|slot| sample_slot(grid, slot, [0, 1, 2].map(|a| lower[a] - block[a] * b), frac)))
}

/// Front-to-back accumulation along `ray`, before shading. Applies
/// [`unpremultiply_saturate`] when the config asks for it.
pub fn march_accumulate<T: Channel>(grid: &BlockGrid<T>, ray: &Ray, config: &RenderConfig) -> RayAccumulation {
    let acc = march_raw(grid, ray, config);
    if config.unpremultiply {
        unpremultiply_saturate(&acc)
    } else {
        acc
    }
}

fn march_raw<T: Channel>(grid: &BlockGrid<T>, ray: &Ray, config: &RenderConfig) -> RayAccumulation {
    let bounds = grid.bounds();
    let Some((t_near, t_far)) = bounds.intersect(ray) else {
        return RayAccumulation::default();
    };
    let n = grid.grid_resolution();
    let b = grid.block_size();
    let nb = grid.blocks_per_axis();
    let v = grid.voxel_width();
    let step = config.step(v);
    let exponent = step / v;
    let unit_step = (exponent - 1.0).abs() < 1e-12;
    // Ray in voxel coordinates: q(t) = origin + t * dir.
    let origin = (ray.origin - bounds.min) / v;
    let dir = ray.direction / v;
    let mut comp = Compositor::new();
    let mut k: u64 = 0;
    loop {
        let t = t_near + (k as f64 + 0.5) * step;
        if t >= t_far {
            break;
        }
        let q = origin + t * dir;
        let corners = [0, 1, 2].map(|a| lower_corner(q[a], n));
        let lower = corners.map(|c| c.0);
        let block = lower.map(|i| i / b);
        let Some(slot) = grid.block_slot(block) else {
            k = if config.skip_empty {
                let exit = block_exit(origin, dir, block, b, nb);
                let next = ((exit - t_near) / step - 0.5 - 1e-6).ceil();
                if next.is_finite() && next > (k + 1) as f64 {
                    next as u64
                } else {
                    k + 1
                }
            } else {
                k + 1
            };
            continue;
        };
        let frac = DVec3::new(corners[0].1, corners[1].1, corners[2].1);
        let s = sample_slot(grid, slot, [0, 1, 2].map(|a| lower[a] - block[a] * b), frac);
        if s.alpha > 0.0 {
            let alpha = if unit_step {
                s.alpha
            } else {
                1.0 - (1.0 - s.alpha).max(0.0).powf(exponent)
            };
            comp.push_alpha(alpha, s.diffuse, s.feature);
            let tr = comp.transmittance();
            if tr < config.termination || tr <= 0.0 {
                break;
            }
        }
        k += 1;
    }
    comp.finish()
}

/// Parameter at which the ray leaves the region of sample positions served
/// by `block`, which extends to infinity past the grid faces.
fn block_exit(origin: DVec3, dir: DVec3, block: [usize; 3], b: usize, nb: usize) -> f64 {
    let mut exit = f64::INFINITY;
    for a in 0..3 {
        let d = dir[a];
        let face = if d > 0.0 {
            if block[a] + 1 == nb {
                continue;
            }
            ((block[a] + 1) * b) as f64 + 0.5
        } else if d < 0.0 {
            if block[a] == 0 {
                continue;
            }
            (block[a] * b) as f64 + 0.5
        } else {
            continue;
        };
        exit = exit.min((face - origin[a]) / d);
    }
    exit
}

/// Scales colour and features by `min(1, 1.5 alpha) / alpha` and replaces
/// alpha by `min(1, 1.5 alpha)`.
pub fn unpremultiply_saturate(acc: &RayAccumulation) -> RayAccumulation {
    if acc.alpha <= 0.0 {
        return *acc;
    }
    let alpha = (1.5 * acc.alpha).min(1.0);
    let scale = alpha / acc.alpha;
    RayAccumulation {
        diffuse: acc.diffuse * scale,
        feature: acc.feature * scale,
        alpha,
    }
}

fn finish_pixel(mlp: &DeferredMlp, acc: &RayAccumulation, dir: DVec3, background: DVec3, scratch: &mut Scratch) -> DVec3 {
    let color = shade_with(mlp, acc, dir, scratch);
    (color + (1.0 - acc.alpha) * background).clamp(DVec3::ZERO, DVec3::ONE)
}

/// Shaded colour (background included) and accumulated alpha of one ray.
pub fn march_ray<T: Channel>(grid: &BlockGrid<T>, mlp: &DeferredMlp, ray: &Ray, config: &RenderConfig) -> (DVec3, f64) {
    let acc = march_accumulate(grid, ray, config);
    let color = finish_pixel(mlp, &acc, ray.direction, config.background, &mut Scratch::default());
    (color, acc.alpha)
}

/// Wall-clock split of one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameTiming {
    pub march_ms: f64,
    pub shade_ms: f64,
}

impl FrameTiming {
    pub fn total_ms(&self) -> f64 {
        self.march_ms + self.shade_ms
    }
}

/// Per-pixel accumulations of a whole frame, row-major.
pub fn accumulate_frame<T: Channel>(grid: &BlockGrid<T>, camera: &Camera, config: &RenderConfig) -> Vec<RayAccumulation> {
    let w = camera.width as usize;
    let mut accs = vec![RayAccumulation::default(); w * camera.height as usize];
    par::for_each_chunk_mut(&mut accs, w, |row, out| {
        for (col, acc) in out.iter_mut().enumerate() {
            *acc = march_accumulate(grid, &camera.ray_unchecked(row as u32, col as u32), config);
        }
    });
    accs
}

fn shade_frame(mlp: &DeferredMlp, camera: &Camera, accs: &[RayAccumulation], background: DVec3) -> Image {
    let w = camera.width as usize;
    let mut image = Image::filled(camera.width, camera.height, DVec3::ZERO);
    par::for_each_chunk_mut(&mut image.pixels, w, |row, out| {
        let mut scratch = Scratch::default();
        for (col, px) in out.iter_mut().enumerate() {
            let dir = camera.ray_unchecked(row as u32, col as u32).direction;
            let c = finish_pixel(mlp, &accs[row * w + col], dir, background, &mut scratch);
            *px = c.as_vec3().to_array();
        }
    });
    image
}

pub fn render_frame<T: Channel>(grid: &BlockGrid<T>, mlp: &DeferredMlp, camera: &Camera, config: &RenderConfig) -> Result<Image> {
    config.validate()?;
    let accs = accumulate_frame(grid, camera, config);
    Ok(shade_frame(mlp, camera, &accs, config.background))
}

/// Renders in two passes, marching every pixel then shading every pixel,
/// and times each.
pub fn render_frame_timed<T: Channel>(
    grid: &BlockGrid<T>,
    mlp: &DeferredMlp,
    camera: &Camera,
    config: &RenderConfig,
) -> Result<(Image, FrameTiming)> {
    config.validate()?;
    let start = Instant::now();
    let accs = accumulate_frame(grid, camera, config);
    let marched = Instant::now();
    let image = shade_frame(mlp, camera, &accs, config.background);
    let done = Instant::now();
    Ok((
        image,
        FrameTiming {
            march_ms: (marched - start).as_secs_f64() * 1e3,
            shade_ms: (done - marched).as_secs_f64() * 1e3,
        },
    ))
}

/// Renders the scene function itself with the same sample lattice: samples
/// at `t_near + (k + 1/2) * step` inside the scene bounds, each adding
/// optical depth `density * step`. `config.step_size` must be set.
pub fn render_scene_direct(scene: &dyn SceneFunction, mlp: &DeferredMlp, camera: &Camera, config: &RenderConfig) -> Result<Image> {
    config.validate()?;
    let step = config
        .step_size
        .ok_or_else(|| Error::invalid("direct rendering needs an explicit step size"))?;
    let bounds = scene.bounds();
    let w = camera.width as usize;
    let mut image = Image::filled(camera.width, camera.height, DVec3::ZERO);
    par::for_each_chunk_mut(&mut image.pixels, w, |row, out| {
        let mut scratch = Scratch::default();
        for (col, px) in out.iter_mut().enumerate() {
            let ray = camera.ray_unchecked(row as u32, col as u32);
            let mut comp = Compositor::new();
            if let Some((t_near, t_far)) = bounds.intersect(&ray) {
                let mut k = 0u64;
                loop {
                    let t = t_near + (k as f64 + 0.5) * step;
                    if t >= t_far {
                        break;
                    }
                    let s = eval_unchecked(scene, ray.at(t));
                    if s.density > 0.0 {
                        comp.push_optical_depth(s.density * step, s.diffuse, s.feature);
                        let tr = comp.transmittance();
                        if tr < config.termination || tr <= 0.0 {
                            break;
                        }
                    }
                    k += 1;
                }
            }
            let mut acc = comp.finish();
            if config.unpremultiply {
                acc = unpremultiply_saturate(&acc);
            }
            *px = finish_pixel(mlp, &acc, ray.direction, config.background, &mut scratch)
                .as_vec3()
                .to_array();
        }
    });
    Ok(image)
}

pub const ORBIT_RADIUS: f64 = 4.0;
pub const ORBIT_ELEVATION_DEGREES: f64 = 30.0;
pub const ORBIT_FOV_DEGREES: f64 = 39.0;

/// Frame `index` of an `count`-frame equal-angle orbit around the origin.
pub fn orbit_camera(index: usize, count: usize, width: u32, height: u32) -> Result<Camera> {
    if count == 0 || index >= count {
        return Err(Error::invalid(format!("orbit frame {index} of {count}")));
    }
    let azimuth = std::f64::consts::TAU * index as f64 / count as f64;
    Camera::orbit(
        azimuth,
        ORBIT_ELEVATION_DEGREES.to_radians(),
        ORBIT_RADIUS,
        DVec3::ZERO,
        Camera::focal_from_fov(ORBIT_FOV_DEGREES, width),
        width,
        height,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub frame_ms_mean: f64,
    pub frame_ms_min: f64,
    pub frame_ms_max: f64,
    pub march_ms_mean: f64,
    pub shade_ms_mean: f64,
    pub occupied_fraction: f64,
}

impl BenchReport {
    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "frames={}\nwidth={}\nheight={}\nframe_ms_mean={:.4}\nframe_ms_min={:.4}\nframe_ms_max={:.4}\nmarch_ms_mean={:.4}\nshade_ms_mean={:.4}\noccupied_fraction={:.6}\n",
            self.frames,
            self.width,
            self.height,
            self.frame_ms_mean,
            self.frame_ms_min,
            self.frame_ms_max,
            self.march_ms_mean,
            self.shade_ms_mean,
            self.occupied_fraction,
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Times an equal-angle orbit of `frames` frames.
pub fn benchmark_orbit<T: Channel>(
    grid: &BlockGrid<T>,
    mlp: &DeferredMlp,
    frames: usize,
    width: u32,
    height: u32,
    config: &RenderConfig,
) -> Result<BenchReport> {
    if frames == 0 {
        return Err(Error::invalid("benchmark needs at least one frame"));
    }
    let mut timings = Vec::with_capacity(frames);
    for i in 0..frames {
        let camera = orbit_camera(i, frames, width, height)?;
        timings.push(render_frame_timed(grid, mlp, &camera, config)?.1);
    }
    let totals: Vec<f64> = timings.iter().map(FrameTiming::total_ms).collect();
    let mean = |xs: &mut dyn Iterator<Item = f64>| xs.sum::<f64>() / frames as f64;
    Ok(BenchReport {
        frames,
        width,
        height,
        frame_ms_mean: mean(&mut totals.iter().copied()),
        frame_ms_min: totals.iter().copied().fold(f64::INFINITY, f64::min),
        frame_ms_max: totals.iter().copied().fold(0.0, f64::max),
        march_ms_mean: mean(&mut timings.iter().map(|t| t.march_ms)),
        shade_ms_mean: mean(&mut timings.iter().map(|t| t.shade_ms)),
        occupied_fraction: grid.occupied_fraction(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Aabb;
    use crate::store::{PaddedBlock, SnergGrid};

    /// 8^3 grid of 4^3 blocks with only block (0, 0, 0) occupied. Voxel
    /// `(x, y, z)` has alpha 0.5 and red channel `x / 10`.
    fn ramp_grid() -> SnergGrid {
        let p = 5;
        let mut block = PaddedBlock::<f32>::zeros(p);
        for z in 0..p {
            for y in 0..p {
                for x in 0..p {
                    let i = x + p * (y + p * z);
                    block.alpha[i] = 0.5;
                    block.rgb[i] = [x as f32 / 10.0, 0.0, 0.0];
                }
            }
        }
        SnergGrid::from_blocks(8, 4, Aabb::cube(1.0), vec![(0, block)]).unwrap()
    }

    #[test]
    fn lookups() {
        let g = ramp_grid();
        assert_eq!(trilinear_sample(&g, DVec3::splat(6.0)).unwrap(), None);
        let at = trilinear_sample(&g, DVec3::new(2.5, 1.5, 1.5)).unwrap().unwrap();
        assert_eq!(at.alpha, 0.5);
        assert!((at.diffuse.x - 0.2).abs() < 1e-7);
        let mid = trilinear_sample(&g, DVec3::new(2.0, 1.5, 1.5)).unwrap().unwrap();
        assert!((mid.diffuse.x - 0.15).abs() < 1e-7);
        assert!(trilinear_sample(&g, DVec3::new(-0.1, 0.0, 0.0)).is_err());
    }

    #[test]
    fn zero_nearest_alpha_skips_fetch() {
        let p = 5;
        let mut block = PaddedBlock::<f32>::zeros(p);
        block.alpha[1] = 1.0;
        block.rgb[1] = [1.0; 3];
        let g = SnergGrid::from_blocks(8, 4, Aabb::cube(1.0), vec![(0, block)]).unwrap();
        // Nearest voxel (0,0,0) is empty although (1,0,0) contributes weight 0.4.
        let s = trilinear_sample(&g, DVec3::new(0.9, 0.5, 0.5)).unwrap().unwrap();
        assert_eq!(s, GridSample::default());
        let s = trilinear_sample(&g, DVec3::new(1.1, 0.5, 0.5)).unwrap().unwrap();
        assert!((s.alpha - 0.6).abs() < 1e-12);
    }

    #[test]
    fn unpremultiply_examples() {
        let acc = |a: f64| RayAccumulation {
            diffuse: DVec3::splat(0.2),
            feature: DVec4::splat(0.1),
            alpha: a,
        };
        assert_eq!(unpremultiply_saturate(&acc(0.0)), acc(0.0));
        let u = unpremultiply_saturate(&acc(0.8));
        assert_eq!(u.alpha, 1.0);
        assert!((u.diffuse.x - 0.25).abs() < 1e-12);
        let u = unpremultiply_saturate(&acc(0.4));
        assert!((u.alpha - 0.6).abs() < 1e-12);
        assert!((u.feature.x - 0.15).abs() < 1e-12);
    }

    #[test]
    fn miss_returns_background() {
        let g = ramp_grid();
        let mlp = DeferredMlp::zeros(&[16, 16], 4);
        let ray = Ray::new(DVec3::new(0.0, 5.0, 0.0), DVec3::Y).unwrap();
        let config = RenderConfig::default();
        assert_eq!(march_ray(&g, &mlp, &ray, &config), (DVec3::ONE, 0.0));
    }

    #[test]
    fn empty_grid_renders_background() {
        let g = SnergGrid::empty(16, 4, Aabb::cube(1.0)).unwrap();
        let mlp = DeferredMlp::random(&[16, 16], 4, 3);
        let config = RenderConfig {
            background: DVec3::new(0.1, 0.2, 0.3),
            ..Default::default()
        };
        let img = render_frame(&g, &mlp, &orbit_camera(0, 1, 6, 4).unwrap(), &config).unwrap();
        let bg = [0.1f32, 0.2, 0.3];
        assert!(img.pixels.iter().all(|p| *p == bg));
    }

    #[test]
    fn frame_matches_individual_rays() {
        let g = ramp_grid();
        let mlp = DeferredMlp::random(&[16, 16], 4, 5);
        let config = RenderConfig::default();
        let cam = Camera::look_at(DVec3::new(-0.5, -0.5, 3.0), DVec3::new(-0.5, -0.5, -0.5), DVec3::Y, 3.0, 2, 2).unwrap();
        let img = render_frame(&g, &mlp, &cam, &config).unwrap();
        for row in 0..2 {
            for col in 0..2 {
                let (c, _) = march_ray(&g, &mlp, &cam.generate_ray(row, col).unwrap(), &config);
                assert_eq!(img.get(row, col), c.as_vec3().to_array());
            }
        }
    }

    #[test]
    fn bench_single_frame() {
        let g = ramp_grid();
        let mlp = DeferredMlp::zeros(&[16, 16], 4);
        let r = benchmark_orbit(&g, &mlp, 1, 8, 8, &RenderConfig::default()).unwrap();
        assert_eq!(r.frame_ms_min, r.frame_ms_max);
        assert_eq!(r.frame_ms_mean, r.frame_ms_min);
        assert!(r.to_text().contains("frames=1\n"));
    }
}
