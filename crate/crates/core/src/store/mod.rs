//! Block-sparse grid container and quantization.
//!
//! An `N^3` voxel grid is split into `B^3` macroblocks. The indirection grid
//! has one cell per macroblock, either empty or pointing at a slot in the
//! atlas. Each atlas slot stores `(B+1)^3` voxels: the block itself plus a
//! one-voxel border on the three positive faces holding the content of the
//! neighbouring voxels, so trilinear lookups never leave the slot.
//!
//! Channels: alpha (1), diffuse rgb (3), features (4). Voxels within a slot
//! are ordered x fastest, then y, then z; blocks likewise.

mod bundle;

pub use bundle::{
    export_bundle, export_bundle_with, import_bundle, read_manifest, BoundsJson, ExportOptions,
    Manifest, ManifestSummary, MlpJson, Tiling, ALPHA_FILE, FEATURES_FILE, INDIRECTION_FILE,
    MANIFEST_FILE, RGB_FILE,
};

use std::fmt::Debug;

use crate::math::Aabb;
use crate::{Error, Result};

/// Largest atlas extent, in blocks, along one axis. Coordinate 255 is the
/// empty sentinel in the 8-bit indirection image.
pub const MAX_ATLAS_BLOCKS_PER_AXIS: usize = 255;
pub(crate) const EMPTY_SLOT: u32 = u32::MAX;

/// Storage type of one channel value.
pub trait Channel: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    fn to_unit(self) -> f64;
    fn is_zero(self) -> bool;
}

impl Channel for f32 {
    #[inline]
    fn to_unit(self) -> f64 {
        self as f64
    }
    #[inline]
    fn is_zero(self) -> bool {
        self == 0.0
    }
}

impl Channel for u8 {
    #[inline]
    fn to_unit(self) -> f64 {
        self as f64 / 255.0
    }
    #[inline]
    fn is_zero(self) -> bool {
        self == 0
    }
}

/// `round(255 x)` after clamping to `[0, 1]`.
pub fn quantize8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize8(q: u8) -> f64 {
    q as f64 / 255.0
}

/// Content of one padded macroblock.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBlock<T> {
    pub alpha: Vec<T>,
    pub rgb: Vec<[T; 3]>,
    pub features: Vec<[T; 4]>,
}

impl<T: Channel> PaddedBlock<T> {
    pub fn zeros(physical: usize) -> Self {
        let n = physical.pow(3);
        Self {
            alpha: vec![T::default(); n],
            rgb: vec![[T::default(); 3]; n],
            features: vec![[T::default(); 4]; n],
        }
    }
}

/// One voxel's channels, converted to unit range.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Voxel {
    pub alpha: f64,
    pub rgb: [f64; 3],
    pub features: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrid<T> {
    grid_resolution: usize,
    block_size: usize,
    bounds: Aabb,
    atlas_blocks: [usize; 3],
    indirection: Vec<u32>,
    alpha: Vec<T>,
    rgb: Vec<[T; 3]>,
    features: Vec<[T; 4]>,
}

/// Full-precision grid as produced by the baker.
pub type SnergGrid = BlockGrid<f32>;
/// The same layout with every channel stored as `round(255 x)`.
pub type QuantizedGrid = BlockGrid<u8>;

/// Smallest near-cubic atlas shape holding `count` blocks.
pub fn atlas_layout(count: usize) -> Result<[usize; 3]> {
    let max = MAX_ATLAS_BLOCKS_PER_AXIS;
    if count > max.pow(3) {
        return Err(Error::Capacity(format!(
            "{count} occupied blocks exceed the {max}^3 atlas limit"
        )));
    }
    if count == 0 {
        return Ok([0, 0, 0]);
    }
    let x = (1..=max).find(|a| a.pow(3) >= count).unwrap_or(max);
    let y = (1..=max).find(|b| x * b * b >= count).unwrap_or(max);
    let z = count.div_ceil(x * y);
    Ok([x, y, z])
}

pub(crate) fn validate_shape(grid_resolution: usize, block_size: usize) -> Result<()> {
    if block_size < 2 {
        return Err(Error::invalid(format!("block size must be at least 2, got {block_size}")));
    }
    if grid_resolution == 0 || !grid_resolution.is_multiple_of(block_size) {
        return Err(Error::invalid(format!(
            "grid resolution {grid_resolution} is not a positive multiple of block size {block_size}"
        )));
    }
    if grid_resolution / block_size > MAX_ATLAS_BLOCKS_PER_AXIS {
        return Err(Error::invalid("more than 255 blocks per axis"));
    }
    Ok(())
}

pub(crate) fn validate_bounds(bounds: &Aabb) -> Result<()> {
    let e = bounds.extent();
    if !(e.min_element() > 0.0) || (e.max_element() - e.min_element()) > 1e-9 * e.max_element() {
        return Err(Error::invalid(format!("grid bounds must be a cube, got extent {e}")));
    }
    Ok(())
}

impl<T: Channel> BlockGrid<T> {
    /// Packs blocks into atlas slots in increasing block-index order.
    pub fn from_blocks(
        grid_resolution: usize,
        block_size: usize,
        bounds: Aabb,
        mut blocks: Vec<(usize, PaddedBlock<T>)>,
    ) -> Result<Self> {
        validate_shape(grid_resolution, block_size)?;
        validate_bounds(&bounds)?;
        let nb = grid_resolution / block_size;
        let cells = nb.pow(3);
        let voxels = (block_size + 1).pow(3);
        blocks.sort_by_key(|(i, _)| *i);
        let atlas_blocks = atlas_layout(blocks.len())?;
        let mut indirection = vec![EMPTY_SLOT; cells];
        let mut alpha = Vec::with_capacity(blocks.len() * voxels);
        let mut rgb = Vec::with_capacity(blocks.len() * voxels);
        let mut features = Vec::with_capacity(blocks.len() * voxels);
        for (slot, (index, block)) in blocks.into_iter().enumerate() {
            if index >= cells {
                return Err(Error::invalid(format!("block index {index} outside {nb}^3 grid")));
            }
            if indirection[index] != EMPTY_SLOT {
                return Err(Error::invalid(format!("block {index} supplied twice")));
            }
            if block.alpha.len() != voxels || block.rgb.len() != voxels || block.features.len() != voxels {
                return Err(Error::invalid(format!("block {index} payload is not {voxels} voxels")));
            }
            indirection[index] = slot as u32;
            alpha.extend(block.alpha);
            rgb.extend(block.rgb);
            features.extend(block.features);
        }
        Ok(Self {
            grid_resolution,
            block_size,
            bounds,
            atlas_blocks,
            indirection,
            alpha,
            rgb,
            features,
        })
    }

    /// A grid with no occupied blocks.
    pub fn empty(grid_resolution: usize, block_size: usize, bounds: Aabb) -> Result<Self> {
        Self::from_blocks(grid_resolution, block_size, bounds, Vec::new())
    }

    pub fn grid_resolution(&self) -> usize {
        self.grid_resolution
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn physical_block_size(&self) -> usize {
        self.block_size + 1
    }

    pub fn blocks_per_axis(&self) -> usize {
        self.grid_resolution / self.block_size
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    /// Voxel edge length in scene units.
    pub fn voxel_width(&self) -> f64 {
        self.bounds.extent().x / self.grid_resolution as f64
    }

    pub fn atlas_blocks(&self) -> [usize; 3] {
        self.atlas_blocks
    }

    pub fn occupied_count(&self) -> usize {
        self.alpha.len() / self.physical_block_size().pow(3)
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied_count() as f64 / self.indirection.len() as f64
    }

    pub fn block_index(&self, block: [usize; 3]) -> usize {
        let nb = self.blocks_per_axis();
        block[0] + nb * (block[1] + nb * block[2])
    }

    /// Atlas slot of a block, if occupied.
    #[inline]
    pub fn block_slot(&self, block: [usize; 3]) -> Option<usize> {
        self.slot_at_index(self.block_index(block))
    }

    #[inline]
    pub(crate) fn slot_at_index(&self, index: usize) -> Option<usize> {
        match self.indirection[index] {
            EMPTY_SLOT => None,
            s => Some(s as usize),
        }
    }

    /// Atlas block coordinate of a slot.
    pub fn slot_coord(&self, slot: usize) -> [usize; 3] {
        let [ax, ay, _] = self.atlas_blocks;
        [slot % ax, (slot / ax) % ay, slot / (ax * ay)]
    }

    #[inline]
    pub(crate) fn voxel_offset(&self, slot: usize, local: [usize; 3]) -> usize {
        let p = self.physical_block_size();
        slot * p * p * p + local[0] + p * (local[1] + p * local[2])
    }

    #[inline]
    pub(crate) fn alpha_raw(&self, offset: usize) -> T {
        self.alpha[offset]
    }

    #[inline]
    pub(crate) fn rgb_raw(&self, offset: usize) -> [T; 3] {
        self.rgb[offset]
    }

    #[inline]
    pub(crate) fn features_raw(&self, offset: usize) -> [T; 4] {
        self.features[offset]
    }

    /// Voxel `local` (each coordinate `0..=B`) of an atlas slot.
    pub fn voxel(&self, slot: usize, local: [usize; 3]) -> Voxel {
        let o = self.voxel_offset(slot, local);
        Voxel {
            alpha: self.alpha[o].to_unit(),
            rgb: self.rgb[o].map(Channel::to_unit),
            features: self.features[o].map(Channel::to_unit),
        }
    }

    /// Voxel at a global index, `None` inside empty blocks. Indices up to
    /// `N - 1` are served from their own block.
    pub fn voxel_at(&self, index: [usize; 3]) -> Option<Voxel> {
        let b = self.block_size;
        let block = index.map(|i| i / b);
        let slot = self.block_slot(block)?;
        Some(self.voxel(slot, [0, 1, 2].map(|a| index[a] - block[a] * b)))
    }

    /// Indirection cells in block-index order.
    pub fn indirection(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        self.indirection.iter().map(|&s| (s != EMPTY_SLOT).then_some(s as usize))
    }

    /// Moves block content so that old slot `s` lands in slot `perm[s]`,
    /// updating the indirection to match.
    pub fn permute_slots(&self, perm: &[usize]) -> Result<Self> {
        let n = self.occupied_count();
        let mut seen = vec![false; n];
        if perm.len() != n || !perm.iter().all(|&p| p < n && !std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("slot permutation is not a bijection"));
        }
        let v = self.physical_block_size().pow(3);
        let mut out = self.clone();
        for (old, &new) in perm.iter().enumerate() {
            out.alpha[new * v..(new + 1) * v].copy_from_slice(&self.alpha[old * v..(old + 1) * v]);
            out.rgb[new * v..(new + 1) * v].copy_from_slice(&self.rgb[old * v..(old + 1) * v]);
            out.features[new * v..(new + 1) * v].copy_from_slice(&self.features[old * v..(old + 1) * v]);
        }
        for s in out.indirection.iter_mut().filter(|s| **s != EMPTY_SLOT) {
            *s = perm[*s as usize] as u32;
        }
        Ok(out)
    }

    /// Checks that every padding voxel equals the interior voxel of the
    /// occupied block it duplicates.
    pub fn check_padding(&self) -> Result<()> {
        let b = self.block_size;
        let p = b + 1;
        let nb = self.blocks_per_axis();
        for index in 0..self.indirection.len() {
            let Some(slot) = self.slot_at_index(index) else { continue };
            let block = [index % nb, (index / nb) % nb, index / (nb * nb)];
            for lz in 0..p {
                for ly in 0..p {
                    for lx in 0..p {
                        let local = [lx, ly, lz];
                        if local.iter().all(|&l| l < b) {
                            continue;
                        }
                        let global = [0, 1, 2].map(|a| block[a] * b + local[a]);
                        if global.iter().any(|&g| g >= self.grid_resolution) {
                            continue;
                        }
                        let owner = global.map(|g| g / b);
                        let Some(owner_slot) = self.block_slot(owner) else { continue };
                        let owner_local = [0, 1, 2].map(|a| global[a] - owner[a] * b);
                        let here = self.voxel_offset(slot, local);
                        let there = self.voxel_offset(owner_slot, owner_local);
                        if self.alpha[here] != self.alpha[there]
                            || self.rgb[here] != self.rgb[there]
                            || self.features[here] != self.features[there]
                        {
                            return Err(Error::invalid(format!(
                                "padding voxel {local:?} of block {block:?} disagrees with block {owner:?}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn map_channels<U: Channel>(&self, f: impl Fn(T) -> U + Copy) -> BlockGrid<U> {
        BlockGrid {
            grid_resolution: self.grid_resolution,
            block_size: self.block_size,
            bounds: self.bounds,
            atlas_blocks: self.atlas_blocks,
            indirection: self.indirection.clone(),
            alpha: self.alpha.iter().map(|&a| f(a)).collect(),
            rgb: self.rgb.iter().map(|c| c.map(f)).collect(),
            features: self.features.iter().map(|c| c.map(f)).collect(),
        }
    }

    /// Raw float payload size of the atlas and indirection, as if every
    /// channel were a 32-bit float.
    pub fn raw_float_bytes(&self) -> usize {
        4 * (8 * self.alpha.len() + 3 * self.indirection.len())
    }
}

impl SnergGrid {
    pub fn quantize(&self) -> QuantizedGrid {
        self.map_channels(|x| quantize8(x as f64))
    }
}

impl QuantizedGrid {
    pub fn dequantize(&self) -> SnergGrid {
        self.map_channels(|q| dequantize8(q) as f32)
    }

    /// Re-rounds every channel to `bits` bits of precision, keeping 8-bit
    /// storage.
    pub fn requantize(&self, bits: u32) -> Result<QuantizedGrid> {
        if !(1..=8).contains(&bits) {
            return Err(Error::invalid(format!("bit depth must be 1..=8, got {bits}")));
        }
        let levels = ((1u32 << bits) - 1) as f64;
        Ok(self.map_channels(move |q| {
            let coarse = (dequantize8(q) * levels).round() / levels;
            quantize8(coarse)
        }))
    }

    /// Assembles a grid from already-decoded parts; used by the bundle reader.
    pub(crate) fn from_parts(
        grid_resolution: usize,
        block_size: usize,
        bounds: Aabb,
        atlas_blocks: [usize; 3],
        indirection: Vec<u32>,
        block_data: (Vec<u8>, Vec<[u8; 3]>, Vec<[u8; 4]>),
    ) -> Self {
        let (alpha, rgb, features) = block_data;
        Self {
            grid_resolution,
            block_size,
            bounds,
            atlas_blocks,
            indirection,
            alpha,
            rgb,
            features,
        }
    }
}
