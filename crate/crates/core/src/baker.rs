//! Baking a scene function into a culled block-sparse grid.
//!
//! The pipeline is: one centre sample per voxel to get a coarse alpha grid,
//! block culling on maximum alpha and maximum visibility from the training
//! cameras, then Gaussian supersampling of every voxel (border included) of
//! the surviving blocks.

use glam::{DVec3, DVec4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::math::{Aabb, Camera};
use crate::par;
use crate::scene::{eval_unchecked, SceneFunction};
use crate::store::{validate_bounds, validate_shape, PaddedBlock, SnergGrid};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BakeConfig {
    pub grid_resolution: usize,
    pub block_size: usize,
    pub alpha_threshold: f64,
    pub visibility_threshold: f64,
    pub supersamples: usize,
    pub bounds: Aabb,
    pub seed: u64,
}

impl BakeConfig {
    pub const DEFAULT_ALPHA_THRESHOLD: f64 = 0.005;
    pub const DEFAULT_VISIBILITY_THRESHOLD: f64 = 0.01;
    pub const DEFAULT_SUPERSAMPLES: usize = 16;

    /// Default thresholds over the unit cube `[-1, 1]^3`.
    pub fn new(grid_resolution: usize, block_size: usize) -> Self {
        Self {
            grid_resolution,
            block_size,
            alpha_threshold: Self::DEFAULT_ALPHA_THRESHOLD,
            visibility_threshold: Self::DEFAULT_VISIBILITY_THRESHOLD,
            supersamples: Self::DEFAULT_SUPERSAMPLES,
            bounds: Aabb::cube(1.0),
            seed: 0,
        }
    }

    /// A zero visibility threshold is allowed and disables visibility culling.
    pub fn validate(&self) -> Result<()> {
        validate_shape(self.grid_resolution, self.block_size)?;
        validate_bounds(&self.bounds)?;
        if !(self.alpha_threshold > 0.0 && self.alpha_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "alpha threshold must be in (0, 1), got {}",
                self.alpha_threshold
            )));
        }
        if !(self.visibility_threshold >= 0.0 && self.visibility_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "visibility threshold must be in [0, 1), got {}",
                self.visibility_threshold
            )));
        }
        if self.supersamples == 0 {
            return Err(Error::invalid("supersample count must be at least 1"));
        }
        Ok(())
    }

    pub fn voxel_width(&self) -> f64 {
        self.bounds.extent().x / self.grid_resolution as f64
    }

    pub fn blocks_per_axis(&self) -> usize {
        self.grid_resolution / self.block_size
    }

    /// World-space centre of voxel `index` (indices may reach `N` for the
    /// padding border).
    pub fn voxel_center(&self, index: [usize; 3]) -> DVec3 {
        let v = self.voxel_width();
        self.bounds.min + (DVec3::from_array(index.map(|i| i as f64)) + 0.5) * v
    }
}

/// Unpadded `B^3` payload of one block from the coarse pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPayload {
    pub alpha: Vec<f32>,
    pub diffuse: Vec<[f32; 3]>,
    pub feature: Vec<[f32; 4]>,
}

impl BlockPayload {
    pub fn max_alpha(&self) -> f32 {
        self.alpha.iter().copied().fold(0.0, f32::max)
    }
}

/// Dense-per-block intermediate grid. Blocks whose every voxel has zero
/// alpha carry no payload.
#[derive(Clone, Debug)]
pub struct DenseBlockGrid {
    grid_resolution: usize,
    block_size: usize,
    bounds: Aabb,
    blocks: Vec<Option<BlockPayload>>,
}

impl DenseBlockGrid {
    /// Samples the scene once at each voxel centre.
    pub fn coarse(scene: &dyn SceneFunction, config: &BakeConfig) -> Result<Self> {
        config.validate()?;
        let nb = config.blocks_per_axis();
        let b = config.block_size;
        let v = config.voxel_width();
        let blocks = par::map_collect((0..nb * nb * nb).collect(), |index| {
            let origin = block_coord(index, nb).map(|c| c * b);
            let mut payload = BlockPayload {
                alpha: Vec::with_capacity(b * b * b),
                diffuse: Vec::with_capacity(b * b * b),
                feature: Vec::with_capacity(b * b * b),
            };
            let mut any = false;
            for z in 0..b {
                for y in 0..b {
                    for x in 0..b {
                        let p = config.voxel_center([origin[0] + x, origin[1] + y, origin[2] + z]);
                        let s = eval_unchecked(scene, p);
                        let alpha = -(-s.density * v).exp_m1();
                        any |= alpha > 0.0;
                        payload.alpha.push(alpha as f32);
                        payload.diffuse.push(unit3(s.diffuse));
                        payload.feature.push(unit4(s.feature));
                    }
                }
            }
            any.then_some(payload)
        });
        Ok(Self {
            grid_resolution: config.grid_resolution,
            block_size: b,
            bounds: config.bounds,
            blocks,
        })
    }

    /// Builds a grid from a per-voxel alpha function; colours are zero.
    pub fn from_alpha_fn(
        grid_resolution: usize,
        block_size: usize,
        bounds: Aabb,
        alpha: impl Fn([usize; 3]) -> f64,
    ) -> Result<Self> {
        validate_shape(grid_resolution, block_size)?;
        validate_bounds(&bounds)?;
        let nb = grid_resolution / block_size;
        let b = block_size;
        let blocks = (0..nb * nb * nb)
            .map(|index| {
                let origin = block_coord(index, nb).map(|c| c * b);
                let mut a = Vec::with_capacity(b * b * b);
                for z in 0..b {
                    for y in 0..b {
                        for x in 0..b {
                            a.push(alpha([origin[0] + x, origin[1] + y, origin[2] + z]).clamp(0.0, 1.0) as f32);
                        }
                    }
                }
                a.iter().any(|&x| x > 0.0).then(|| BlockPayload {
                    diffuse: vec![[0.0; 3]; a.len()],
                    feature: vec![[0.0; 4]; a.len()],
                    alpha: a,
                })
            })
            .collect();
        Ok(Self {
            grid_resolution,
            block_size,
            bounds,
            blocks,
        })
    }

    pub fn grid_resolution(&self) -> usize {
        self.grid_resolution
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn blocks_per_axis(&self) -> usize {
        self.grid_resolution / self.block_size
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn block(&self, index: usize) -> Option<&BlockPayload> {
        self.blocks.get(index).and_then(Option::as_ref)
    }

    pub fn occupancy(&self) -> Vec<bool> {
        self.blocks.iter().map(Option::is_some).collect()
    }

    pub fn occupied_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_some()).count()
    }

    /// Alpha of voxel `index`; zero for blocks without payload.
    #[inline]
    pub fn alpha_at(&self, index: [usize; 3]) -> f64 {
        let b = self.block_size;
        let nb = self.blocks_per_axis();
        let block = index[0] / b + nb * (index[1] / b + nb * (index[2] / b));
        match &self.blocks[block] {
            Some(p) => p.alpha[index[0] % b + b * (index[1] % b + b * (index[2] % b))] as f64,
            None => 0.0,
        }
    }

    /// Drops payloads of blocks whose mask entry is false.
    pub fn retain(&mut self, mask: &[bool]) {
        for (block, &keep) in self.blocks.iter_mut().zip(mask) {
            if !keep {
                *block = None;
            }
        }
    }
}

fn block_coord(index: usize, nb: usize) -> [usize; 3] {
    [index % nb, (index / nb) % nb, index / (nb * nb)]
}

fn unit3(v: DVec3) -> [f32; 3] {
    v.clamp(DVec3::ZERO, DVec3::ONE).as_vec3().to_array()
}

fn unit4(v: DVec4) -> [f32; 4] {
    v.clamp(DVec4::ZERO, DVec4::ONE).as_vec4().to_array()
}

/// Transmittance from the centre of `voxel` to `camera_position`, marching
/// one voxel width at a time with nearest-voxel alpha. The voxel's own alpha
/// is excluded. Stops once transmittance falls below `floor`.
fn transmittance_to(grid: &DenseBlockGrid, voxel: [usize; 3], camera_position: DVec3, floor: f64) -> f64 {
    let n = grid.grid_resolution as f64;
    let v = grid.bounds.extent().x / n;
    let start = DVec3::from_array(voxel.map(|i| i as f64 + 0.5));
    let target = (camera_position - grid.bounds.min) / v;
    let offset = target - start;
    let distance = offset.length();
    if distance == 0.0 {
        return 1.0;
    }
    let dir = offset / distance;
    let mut t = 1.0;
    let mut k = 1.0;
    while k < distance {
        let q = start + k * dir;
        if q.min_element() < 0.0 || q.max_element() >= n {
            break;
        }
        let a = grid.alpha_at([q.x as usize, q.y as usize, q.z as usize]);
        t *= 1.0 - a;
        if t < floor || t == 0.0 {
            break;
        }
        k += 1.0;
    }
    t
}

fn check_voxel(grid: &DenseBlockGrid, voxel: [usize; 3]) -> Result<()> {
    if voxel.iter().any(|&i| i >= grid.grid_resolution) {
        return Err(Error::invalid(format!(
            "voxel {voxel:?} outside {0}^3 grid",
            grid.grid_resolution
        )));
    }
    Ok(())
}

/// Maximum over cameras of the transmittance between the voxel centre and
/// the camera.
pub fn compute_visibility(grid: &DenseBlockGrid, voxel: [usize; 3], cameras: &[Camera]) -> Result<f64> {
    check_voxel(grid, voxel)?;
    Ok(cameras
        .iter()
        .map(|c| transmittance_to(grid, voxel, c.position, 0.0))
        .fold(0.0, f64::max))
}

/// Whether some camera sees `voxel` with transmittance at least `threshold`.
/// Equivalent to `compute_visibility(..) >= threshold` but cheaper.
fn visible_at_least(grid: &DenseBlockGrid, voxel: [usize; 3], cameras: &[Camera], threshold: f64) -> bool {
    cameras
        .iter()
        .any(|c| transmittance_to(grid, voxel, c.position, threshold) >= threshold)
}

/// Keep mask over blocks: maximum alpha at least the alpha threshold and
/// some voxel of the block visible at least the visibility threshold.
/// Visibility is evaluated on the grid before culling; payloads of culled
/// blocks are then released.
pub fn cull_blocks(grid: &mut DenseBlockGrid, cameras: &[Camera], config: &BakeConfig) -> Vec<bool> {
    let nb = grid.blocks_per_axis();
    let b = grid.block_size;
    let view: &DenseBlockGrid = grid;
    let mask = par::map_collect((0..nb * nb * nb).collect(), |index| {
        let Some(payload) = view.block(index) else {
            return false;
        };
        if (payload.max_alpha() as f64) < config.alpha_threshold {
            return false;
        }
        if config.visibility_threshold <= 0.0 {
            return true;
        }
        let origin = block_coord(index, nb).map(|c| c * b);
        (0..b * b * b).any(|l| {
            let voxel = [origin[0] + l % b, origin[1] + (l / b) % b, origin[2] + l / (b * b)];
            visible_at_least(view, voxel, cameras, config.visibility_threshold)
        })
    });
    grid.retain(&mask);
    mask
}

/// Averaged scene values over a Gaussian cloud around a voxel centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelSample {
    pub alpha: f64,
    pub density: f64,
    pub diffuse: DVec3,
    pub feature: DVec4,
}

/// Evaluates the scene at `count` points drawn from an isotropic Gaussian
/// with standard deviation `v / sqrt(12)` around `center`, averages density
/// and colours, and converts the mean density to `alpha = 1 - exp(-density * v)`.
pub fn voxel_supersample(scene: &dyn SceneFunction, center: DVec3, voxel_width: f64, count: usize, seed: u64) -> VoxelSample {
    voxel_supersample_stream(scene, center, voxel_width, count, seed, 0)
}

/// As [`voxel_supersample`], drawing from an independent stream of the
/// seeded generator.
pub fn voxel_supersample_stream(
    scene: &dyn SceneFunction,
    center: DVec3,
    voxel_width: f64,
    count: usize,
    seed: u64,
    stream: u64,
) -> VoxelSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let std = voxel_width / 12f64.sqrt();
    let count = count.max(1);
    let (mut density, mut diffuse, mut feature) = (0.0, DVec3::ZERO, DVec4::ZERO);
    for _ in 0..count {
        let g = DVec3::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        );
        let s = eval_unchecked(scene, center + std * g);
        density += s.density;
        diffuse += s.diffuse;
        feature += s.feature;
    }
    let inv = 1.0 / count as f64;
    let density = density * inv;
    VoxelSample {
        alpha: -(-density * voxel_width).exp_m1(),
        density,
        diffuse: diffuse * inv,
        feature: feature * inv,
    }
}

/// Supersamples every voxel of a padded block. The random stream is keyed
/// on the global voxel index, so border voxels match their neighbours.
fn supersample_block(scene: &dyn SceneFunction, config: &BakeConfig, block: [usize; 3]) -> PaddedBlock<f32> {
    let b = config.block_size;
    let p = b + 1;
    let wide = (config.grid_resolution + 1) as u64;
    let v = config.voxel_width();
    let mut out = PaddedBlock::zeros(p);
    let origin = block.map(|c| c * b);
    for z in 0..p {
        for y in 0..p {
            for x in 0..p {
                let g = [origin[0] + x, origin[1] + y, origin[2] + z];
                let stream = g[0] as u64 + wide * (g[1] as u64 + wide * g[2] as u64);
                let s = voxel_supersample_stream(scene, config.voxel_center(g), v, config.supersamples, config.seed, stream);
                let i = x + p * (y + p * z);
                out.alpha[i] = s.alpha as f32;
                out.rgb[i] = unit3(s.diffuse);
                out.features[i] = unit4(s.feature);
            }
        }
    }
    out
}

/// Coarse pass, culling and supersampling, packed into a grid.
pub fn bake(scene: &dyn SceneFunction, cameras: &[Camera], config: &BakeConfig) -> Result<SnergGrid> {
    let mut coarse = DenseBlockGrid::coarse(scene, config)?;
    let mask = cull_blocks(&mut coarse, cameras, config);
    drop(coarse);
    let nb = config.blocks_per_axis();
    let kept: Vec<usize> = mask.iter().enumerate().filter_map(|(i, &k)| k.then_some(i)).collect();
    let blocks = par::map_collect(kept, |index| (index, supersample_block(scene, config, block_coord(index, nb))));
    SnergGrid::from_blocks(config.grid_resolution, config.block_size, config.bounds, blocks)
}

/// `count` cameras spread over a sphere of `radius` on a Fibonacci lattice,
/// all looking at the origin.
pub fn training_rig(count: usize, radius: f64, focal: f64, width: u32, height: u32) -> Result<Vec<Camera>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / count as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let eye = radius * DVec3::new(r * phi.cos(), r * phi.sin(), z);
            Camera::look_at(eye, DVec3::ZERO, DVec3::Z, focal, width, height)
        })
        .collect()
}
