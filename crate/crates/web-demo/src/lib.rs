//! wasm-bindgen bindings for the single-page demo in `www/`.
//!
//! The page can bake a built-in scene into a small grid, orbit it with the
//! CPU ray marcher (with or without empty-block skipping), and requantize the
//! grid to fewer bits to see what precision costs in PSNR.

use snerg::baker::{bake, training_rig, BakeConfig};
use snerg::image::{psnr, Image};
use snerg::math::Camera;
use snerg::renderer::{render_frame, RenderConfig, ORBIT_FOV_DEGREES, ORBIT_RADIUS};
use snerg::scene::{BuiltinScene, DeferredMlp};
use snerg::store::QuantizedGrid;
use snerg::DVec3;
use wasm_bindgen::prelude::*;

/// Plain-Rust state behind [`Demo`], testable off the browser.
pub struct Session {
    full: QuantizedGrid,
    current: QuantizedGrid,
    bits: u32,
    mlp: DeferredMlp,
}

impl Session {
    pub fn bake(scene: &str, grid_res: usize, block_size: usize) -> Result<Self, String> {
        let scene = BuiltinScene::parse(scene).map_err(|e| e.to_string())?;
        let mut config = BakeConfig::new(grid_res, block_size);
        config.supersamples = 4;
        let res = 32;
        let rig = training_rig(32, ORBIT_RADIUS, Camera::focal_from_fov(ORBIT_FOV_DEGREES, res), res, res)
            .map_err(|e| e.to_string())?;
        let full = bake(&scene, &rig, &config).map_err(|e| e.to_string())?.quantize();
        Ok(Self {
            current: full.clone(),
            full,
            bits: 8,
            mlp: DeferredMlp::random_specular(0, -2.0),
        })
    }

    pub fn occupied_blocks(&self) -> usize {
        self.full.occupied_count()
    }

    pub fn total_blocks(&self) -> usize {
        self.full.blocks_per_axis().pow(3)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn set_bits(&mut self, bits: u32) -> Result<(), String> {
        self.current = self.full.requantize(bits).map_err(|e| e.to_string())?;
        self.bits = bits;
        Ok(())
    }

    fn frame(&self, grid: &QuantizedGrid, view: View, skip_empty: bool) -> Result<Image, String> {
        let camera = Camera::orbit(
            view.azimuth_deg.to_radians(),
            view.elevation_deg.to_radians(),
            ORBIT_RADIUS,
            DVec3::ZERO,
            Camera::focal_from_fov(ORBIT_FOV_DEGREES, view.width),
            view.width,
            view.height,
        )
        .map_err(|e| e.to_string())?;
        let config = RenderConfig {
            skip_empty,
            ..Default::default()
        };
        render_frame(grid, &self.mlp, &camera, &config).map_err(|e| e.to_string())
    }

    /// RGBA bytes of the current (possibly requantized) grid, row-major.
    pub fn render_rgba(&self, view: View, skip_empty: bool) -> Result<Vec<u8>, String> {
        let rgb = self.frame(&self.current, view, skip_empty)?.to_rgb8();
        Ok(rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect())
    }

    /// PSNR of the current grid's render against the 8-bit grid's.
    pub fn psnr_vs_full(&self, view: View) -> Result<f64, String> {
        let a = self.frame(&self.current, view, true)?;
        let b = self.frame(&self.full, view, true)?;
        Ok(psnr(&a, &b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct View {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub width: u32,
    pub height: u32,
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
impl Demo {
    /// Bakes `scene` (e.g. `"lambert-spheres"` or `"slab:density=4"`).
    #[wasm_bindgen(constructor)]
    pub fn new(scene: &str, grid_res: usize, block_size: usize) -> Result<Demo, JsError> {
        Ok(Demo {
            session: Session::bake(scene, grid_res, block_size).map_err(|e| JsError::new(&e))?,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn occupied_blocks(&self) -> usize {
        self.session.occupied_blocks()
    }

    #[wasm_bindgen(getter)]
    pub fn total_blocks(&self) -> usize {
        self.session.total_blocks()
    }

    #[wasm_bindgen(getter)]
    pub fn bits(&self) -> u32 {
        self.session.bits()
    }

    pub fn set_bits(&mut self, bits: u32) -> Result<(), JsError> {
        self.session.set_bits(bits).map_err(|e| JsError::new(&e))
    }

    pub fn render(
        &self,
        azimuth_deg: f64,
        elevation_deg: f64,
        width: u32,
        height: u32,
        skip_empty: bool,
    ) -> Result<Vec<u8>, JsError> {
        let view = View {
            azimuth_deg,
            elevation_deg,
            width,
            height,
        };
        self.session.render_rgba(view, skip_empty).map_err(|e| JsError::new(&e))
    }

    pub fn psnr_vs_full(&self, azimuth_deg: f64, elevation_deg: f64, width: u32, height: u32) -> Result<f64, JsError> {
        let view = View {
            azimuth_deg,
            elevation_deg,
            width,
            height,
        };
        self.session.psnr_vs_full(view).map_err(|e| JsError::new(&e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const VIEW: View = View {
        azimuth_deg: 30.0,
        elevation_deg: 20.0,
        width: 24,
        height: 16,
    };

    #[test]
    fn bake_render_and_requantize() {
        let mut s = Session::bake("lambert-spheres", 32, 8).unwrap();
        assert!(s.occupied_blocks() > 0 && s.occupied_blocks() < s.total_blocks());
        let rgba = s.render_rgba(VIEW, true).unwrap();
        assert_eq!(rgba.len(), 24 * 16 * 4);
        assert!(rgba.chunks_exact(4).all(|p| p[3] == 255));
        let dense = s.render_rgba(VIEW, false).unwrap();
        assert!(rgba.iter().zip(&dense).all(|(a, b)| a.abs_diff(*b) <= 1));
        assert!(s.psnr_vs_full(VIEW).unwrap().is_infinite());
        s.set_bits(3).unwrap();
        assert_eq!(s.bits(), 3);
        assert!(s.psnr_vs_full(VIEW).unwrap().is_finite());
        assert!(s.set_bits(0).is_err());
    }

    #[test]
    fn bad_inputs_are_reported() {
        assert!(Session::bake("teapot", 32, 8).is_err());
        assert!(Session::bake("slab", 30, 8).is_err());
    }
}
