//! Camera lists on disk.
//!
//! A camera list is a JSON object `{"cameras": [...]}`. Each entry holds a
//! row-major 4x4 camera-to-world matrix, the focal length in pixels, the image
//! size and optionally the image file it belongs to, relative to the list.

use std::path::Path;

use serde::{Deserialize, Serialize};
use snerg::glam::{DMat3, DVec3};
use snerg::math::Camera;

use crate::CliError;

pub const CAMERAS_FILE: &str = "cameras.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    pub camera_to_world: [[f64; 4]; 4],
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CameraList {
    pub cameras: Vec<CameraEntry>,
}

impl CameraEntry {
    pub fn from_camera(camera: &Camera, file: Option<String>) -> Self {
        let r = camera.rotation;
        let t = camera.position;
        let row = |i: usize| [r.x_axis[i], r.y_axis[i], r.z_axis[i], t[i]];
        Self {
            file,
            camera_to_world: [row(0), row(1), row(2), [0.0, 0.0, 0.0, 1.0]],
            focal: camera.focal,
            width: camera.width,
            height: camera.height,
        }
    }

    pub fn camera(&self) -> Result<Camera, CliError> {
        let m = &self.camera_to_world;
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(CliError::Usage("camera_to_world must have a bottom row of 0 0 0 1".into()));
        }
        let col = |j: usize| DVec3::new(m[0][j], m[1][j], m[2][j]);
        let rotation = DMat3::from_cols(col(0), col(1), col(2));
        Ok(Camera::new(rotation, col(3), self.focal, self.width, self.height)?)
    }
}

impl CameraList {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("cannot read camera list {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("malformed camera list {}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("camera list serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}
