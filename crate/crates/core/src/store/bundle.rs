//! On-disk bundle: a JSON manifest plus four lossless 8-bit PNG images.
//!
//! 3D arrays are written as 2D images by tiling z-slices row-major into a
//! grid of `ceil(sqrt(depth))` columns; unused tiles are zero. The
//! indirection image stores each block's atlas coordinate in RGB with
//! `(255, 255, 255)` marking an empty block.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use glam::DVec3;
use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use super::{atlas_layout, validate_bounds, validate_shape, QuantizedGrid, EMPTY_SLOT, MAX_ATLAS_BLOCKS_PER_AXIS};
use crate::image::{decode_png, encode_png, PixelFormat};
use crate::math::Aabb;
use crate::scene::{DeferredMlp, DenseLayer};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INDIRECTION_FILE: &str = "indirection.png";
pub const ALPHA_FILE: &str = "atlas_alpha.png";
pub const RGB_FILE: &str = "atlas_rgb.png";
pub const FEATURES_FILE: &str = "atlas_features.png";

const FORMAT_VERSION: u32 = 1;
const CODEC: &str = "png8";
const SENTINEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiling {
    pub columns: usize,
    pub rows: usize,
}

impl Tiling {
    pub fn for_depth(depth: usize) -> Self {
        if depth == 0 {
            return Self { columns: 1, rows: 1 };
        }
        let columns = (1..=depth).find(|c| c * c >= depth).unwrap_or(depth);
        Self {
            columns,
            rows: depth.div_ceil(columns),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsJson {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpJson {
    pub dir_encoding_bands: usize,
    pub layers: Vec<DenseLayer>,
    pub hidden_activation: String,
    pub output_activation: String,
}

impl MlpJson {
    pub fn from_mlp(mlp: &DeferredMlp) -> Self {
        Self {
            dir_encoding_bands: mlp.dir_bands(),
            layers: mlp.layers().to_vec(),
            hidden_activation: "relu".into(),
            output_activation: "sigmoid".into(),
        }
    }

    pub fn to_mlp(&self) -> Result<DeferredMlp> {
        if self.hidden_activation != "relu" || self.output_activation != "sigmoid" {
            return Err(Error::Manifest(format!(
                "unsupported activations {}/{}",
                self.hidden_activation, self.output_activation
            )));
        }
        DeferredMlp::new(self.layers.clone(), self.dir_encoding_bands)
            .map_err(|e| Error::Manifest(format!("mlp section: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub grid_resolution: usize,
    pub block_size: usize,
    pub bounds: BoundsJson,
    pub atlas_blocks: [usize; 3],
    pub occupied_blocks: usize,
    pub physical_block_size: usize,
    pub slice_tiling: Tiling,
    pub indirection_tiling: Tiling,
    pub background_color: [f64; 3],
    pub codec: String,
    pub mlp: MlpJson,
    pub checksums: BTreeMap<String, String>,
    /// Seconds since the Unix epoch. Not covered by any checksum.
    pub timestamp: u64,
}

impl Manifest {
    pub fn background(&self) -> DVec3 {
        DVec3::from_array(self.background_color)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExportOptions {
    pub background: DVec3,
    /// Fixed timestamp; `None` stamps the current time.
    pub timestamp: Option<u64>,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            background: DVec3::ONE,
            timestamp: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestSummary {
    pub occupied_blocks: usize,
    pub atlas_blocks: [usize; 3],
    /// Bytes per written file, manifest included.
    pub file_bytes: BTreeMap<String, u64>,
}

impl ManifestSummary {
    pub fn total_bytes(&self) -> u64 {
        self.file_bytes.values().sum()
    }
}

fn checksum(bytes: &[u8]) -> String {
    let mut h = XxHash64::with_seed(0);
    h.write(bytes);
    format!("{:016x}", h.finish())
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// A 3D array of `channels`-wide texels flattened into a tiled 2D image.
struct TiledVolume {
    dims: [usize; 3],
    tiling: Tiling,
    channels: usize,
}

impl TiledVolume {
    fn new(dims: [usize; 3], channels: usize) -> Self {
        Self {
            dims,
            tiling: Tiling::for_depth(dims[2]),
            channels,
        }
    }

    /// Image size; empty volumes become a 1x1 placeholder.
    fn image_size(&self) -> (usize, usize) {
        if self.dims.contains(&0) {
            return (1, 1);
        }
        (self.dims[0] * self.tiling.columns, self.dims[1] * self.tiling.rows)
    }

    /// Byte offset of texel `(x, y, z)` in the image buffer.
    fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        let (w, _) = self.image_size();
        let px = (z % self.tiling.columns) * self.dims[0] + x;
        let py = (z / self.tiling.columns) * self.dims[1] + y;
        (py * w + px) * self.channels
    }

    fn buffer(&self) -> Vec<u8> {
        let (w, h) = self.image_size();
        vec![0; w * h * self.channels]
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the bundle, stamping the current time.
pub fn export_bundle(grid: &QuantizedGrid, mlp: &DeferredMlp, dir: &Path) -> Result<ManifestSummary> {
    export_bundle_with(grid, mlp, dir, &ExportOptions::default())
}

pub fn export_bundle_with(
    grid: &QuantizedGrid,
    mlp: &DeferredMlp,
    dir: &Path,
    options: &ExportOptions,
) -> Result<ManifestSummary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let nb = grid.blocks_per_axis();
    let p = grid.physical_block_size();
    let atlas = grid.atlas_blocks();
    if atlas.iter().any(|&a| a > MAX_ATLAS_BLOCKS_PER_AXIS) {
        return Err(Error::Capacity("atlas exceeds 255 blocks along an axis".into()));
    }

    let ind = TiledVolume::new([nb; 3], 3);
    let mut ind_buf = ind.buffer();
    for z in 0..nb {
        for y in 0..nb {
            for x in 0..nb {
                let o = ind.offset(x, y, z);
                let texel = match grid.block_slot([x, y, z]) {
                    Some(s) => grid.slot_coord(s).map(|c| c as u8),
                    None => [SENTINEL; 3],
                };
                ind_buf[o..o + 3].copy_from_slice(&texel);
            }
        }
    }

    let atlas_dims = atlas.map(|a| a * p);
    let vol = |channels| TiledVolume::new(atlas_dims, channels);
    let (alpha_vol, rgb_vol, feat_vol) = (vol(1), vol(3), vol(4));
    let (mut alpha_buf, mut rgb_buf, mut feat_buf) = (alpha_vol.buffer(), rgb_vol.buffer(), feat_vol.buffer());
    for slot in 0..grid.occupied_count() {
        let base = grid.slot_coord(slot).map(|c| c * p);
        for lz in 0..p {
            for ly in 0..p {
                for lx in 0..p {
                    let src = grid.voxel_offset(slot, [lx, ly, lz]);
                    let (x, y, z) = (base[0] + lx, base[1] + ly, base[2] + lz);
                    alpha_buf[alpha_vol.offset(x, y, z)] = grid.alpha_raw(src);
                    let o = rgb_vol.offset(x, y, z);
                    rgb_buf[o..o + 3].copy_from_slice(&grid.rgb_raw(src));
                    let o = feat_vol.offset(x, y, z);
                    feat_buf[o..o + 4].copy_from_slice(&grid.features_raw(src));
                }
            }
        }
    }

    let mut checksums = BTreeMap::new();
    let mut file_bytes = BTreeMap::new();
    for (name, volume, format, data) in [
        (INDIRECTION_FILE, &ind, PixelFormat::Rgb, &ind_buf),
        (ALPHA_FILE, &alpha_vol, PixelFormat::Gray, &alpha_buf),
        (RGB_FILE, &rgb_vol, PixelFormat::Rgb, &rgb_buf),
        (FEATURES_FILE, &feat_vol, PixelFormat::Rgba, &feat_buf),
    ] {
        let (w, h) = volume.image_size();
        let png = encode_png(w as u32, h as u32, format, data)?;
        write_file(dir, name, &png)?;
        checksums.insert(name.to_string(), checksum(&png));
        file_bytes.insert(name.to_string(), png.len() as u64);
    }

    let bounds = grid.bounds();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        grid_resolution: grid.grid_resolution(),
        block_size: grid.block_size(),
        bounds: BoundsJson {
            min: bounds.min.to_array(),
            max: bounds.max.to_array(),
        },
        atlas_blocks: atlas,
        occupied_blocks: grid.occupied_count(),
        physical_block_size: p,
        slice_tiling: alpha_vol.tiling,
        indirection_tiling: ind.tiling,
        background_color: options.background.to_array(),
        codec: CODEC.into(),
        mlp: MlpJson::from_mlp(mlp),
        checksums,
        timestamp: options.timestamp.unwrap_or_else(now_unix),
    };
    manifest.write(dir)?;
    let manifest_len = std::fs::metadata(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))?
        .len();
    file_bytes.insert(MANIFEST_FILE.to_string(), manifest_len);

    Ok(ManifestSummary {
        occupied_blocks: grid.occupied_count(),
        atlas_blocks: atlas,
        file_bytes,
    })
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path: PathBuf = dir.join(name);
    match std::fs::read(&path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile(path)),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = read_file(dir, MANIFEST_FILE)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Manifest(e.to_string()))
}

fn validate_manifest(m: &Manifest) -> Result<Aabb> {
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!("unsupported format_version {}", m.format_version)));
    }
    if m.codec != CODEC {
        return Err(Error::Manifest(format!("unsupported codec {:?}", m.codec)));
    }
    validate_shape(m.grid_resolution, m.block_size).map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    let bounds = Aabb::new(DVec3::from_array(m.bounds.min), DVec3::from_array(m.bounds.max))
        .map_err(|e| Error::Manifest(e.to_string()))?;
    validate_bounds(&bounds).map_err(|e| Error::Manifest(e.to_string()))?;
    if m.physical_block_size != m.block_size + 1 {
        return Err(Error::DimensionMismatch(format!(
            "physical_block_size {} does not match block_size {} + 1",
            m.physical_block_size, m.block_size
        )));
    }
    if atlas_layout(m.occupied_blocks)? != m.atlas_blocks {
        return Err(Error::DimensionMismatch(format!(
            "atlas_blocks {:?} inconsistent with {} occupied blocks",
            m.atlas_blocks, m.occupied_blocks
        )));
    }
    let atlas_depth = m.atlas_blocks[2] * m.physical_block_size;
    if m.slice_tiling != Tiling::for_depth(atlas_depth)
        || m.indirection_tiling != Tiling::for_depth(m.grid_resolution / m.block_size)
    {
        return Err(Error::DimensionMismatch("slice tiling does not match volume depth".into()));
    }
    Ok(bounds)
}

/// Reads and verifies one image file against its checksum and shape.
fn load_volume(dir: &Path, manifest: &Manifest, name: &str, volume: &TiledVolume, format: PixelFormat) -> Result<Vec<u8>> {
    let bytes = read_file(dir, name)?;
    let expected = manifest
        .checksums
        .get(name)
        .ok_or_else(|| Error::Manifest(format!("no checksum recorded for {name}")))?;
    let actual = checksum(&bytes);
    if &actual != expected {
        return Err(Error::ChecksumMismatch {
            file: name.to_string(),
            expected: expected.clone(),
            actual,
        });
    }
    let (w, h, got_format, data) = decode_png(&bytes, name)?;
    let (ew, eh) = volume.image_size();
    if (w as usize, h as usize) != (ew, eh) || got_format != format {
        return Err(Error::DimensionMismatch(format!(
            "{name} is {w}x{h} {got_format:?}, manifest implies {ew}x{eh} {format:?}"
        )));
    }
    Ok(data)
}

/// Reads a bundle back, verifying checksums and dimensions.
pub fn import_bundle(dir: &Path) -> Result<(QuantizedGrid, DeferredMlp)> {
    let manifest = read_manifest(dir)?;
    let bounds = validate_manifest(&manifest)?;
    let mlp = manifest.mlp.to_mlp()?;

    let n = manifest.grid_resolution;
    let nb = n / manifest.block_size;
    let p = manifest.physical_block_size;
    let atlas = manifest.atlas_blocks;
    let occupied = manifest.occupied_blocks;

    let ind = TiledVolume::new([nb; 3], 3);
    let ind_buf = load_volume(dir, &manifest, INDIRECTION_FILE, &ind, PixelFormat::Rgb)?;
    let atlas_dims = atlas.map(|a| a * p);
    let (alpha_vol, rgb_vol, feat_vol) = (
        TiledVolume::new(atlas_dims, 1),
        TiledVolume::new(atlas_dims, 3),
        TiledVolume::new(atlas_dims, 4),
    );
    let alpha_buf = load_volume(dir, &manifest, ALPHA_FILE, &alpha_vol, PixelFormat::Gray)?;
    let rgb_buf = load_volume(dir, &manifest, RGB_FILE, &rgb_vol, PixelFormat::Rgb)?;
    let feat_buf = load_volume(dir, &manifest, FEATURES_FILE, &feat_vol, PixelFormat::Rgba)?;

    let mut indirection = vec![EMPTY_SLOT; nb * nb * nb];
    let mut referenced = vec![false; occupied];
    for z in 0..nb {
        for y in 0..nb {
            for x in 0..nb {
                let o = ind.offset(x, y, z);
                let texel = [ind_buf[o], ind_buf[o + 1], ind_buf[o + 2]];
                if texel == [SENTINEL; 3] {
                    continue;
                }
                let c = texel.map(|v| v as usize);
                let slot = c[0] + atlas[0] * (c[1] + atlas[1] * c[2]);
                if (0..3).any(|a| c[a] >= atlas[a]) || slot >= occupied || referenced[slot] {
                    return Err(Error::DimensionMismatch(format!(
                        "indirection cell ({x}, {y}, {z}) points at invalid or shared atlas block {c:?}"
                    )));
                }
                referenced[slot] = true;
                indirection[x + nb * (y + nb * z)] = slot as u32;
            }
        }
    }
    if referenced.iter().any(|r| !r) {
        return Err(Error::DimensionMismatch("atlas holds blocks no indirection cell references".into()));
    }

    let voxels = p * p * p;
    let mut alpha = Vec::with_capacity(occupied * voxels);
    let mut rgb = Vec::with_capacity(occupied * voxels);
    let mut features = Vec::with_capacity(occupied * voxels);
    for slot in 0..occupied {
        let c = [slot % atlas[0], (slot / atlas[0]) % atlas[1], slot / (atlas[0] * atlas[1])];
        let base = c.map(|v| v * p);
        for lz in 0..p {
            for ly in 0..p {
                for lx in 0..p {
                    let (x, y, z) = (base[0] + lx, base[1] + ly, base[2] + lz);
                    alpha.push(alpha_buf[alpha_vol.offset(x, y, z)]);
                    let o = rgb_vol.offset(x, y, z);
                    rgb.push([rgb_buf[o], rgb_buf[o + 1], rgb_buf[o + 2]]);
                    let o = feat_vol.offset(x, y, z);
                    features.push([feat_buf[o], feat_buf[o + 1], feat_buf[o + 2], feat_buf[o + 3]]);
                }
            }
        }
    }

    let grid = QuantizedGrid::from_parts(
        n,
        manifest.block_size,
        bounds,
        atlas,
        indirection,
        (alpha, rgb, features),
    );
    debug_assert_eq!(grid.occupied_count(), occupied);
    Ok((grid, mlp))
}
