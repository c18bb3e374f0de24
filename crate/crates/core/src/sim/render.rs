//! Top-down orthographic depth renderer.

use super::ParticleState;

/// Affine offset of the depth mapping: an object point at height `z` renders
/// as `DEPTH_BASE + z + cap`, where `cap` is the spherical-cap height of the
/// particle above the pixel. Nearer surfaces (higher `z`) map to larger
/// values, and every covered pixel is strictly positive; the background is
/// exactly zero.
pub const DEPTH_BASE: f32 = 0.5;

/// Masked top-down depth grid. Row-major, `pixels[r * width + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl DepthImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn nonzero_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v > 0.0).count()
    }

    /// Row-major `(row, col)` coordinates of the object mask.
    pub fn nonzero_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) > 0.0 {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Workspace coordinates of a pixel center.
    pub fn pixel_to_workspace(&self, row: usize, col: usize) -> (f32, f32) {
        (
            (col as f32 + 0.5) / self.width as f32,
            (row as f32 + 0.5) / self.height as f32,
        )
    }
}

/// Render particles as spheres seen from a top-down camera.
///
/// Each particle splats a disc of `particle_radius_px` pixels (scaled from
/// the 64-pixel baseline); within the disc the surface height is the
/// spherical cap `z + sqrt(r^2 - rho^2)`, and overlapping particles keep the
/// per-pixel maximum.
pub fn render_depth(
    state: &ParticleState,
    width: usize,
    height: usize,
    cfg: &super::SimConfig,
) -> DepthImage {
    assert!(width > 0 && height > 0, "image dims must be positive");
    let mut img = DepthImage::zeros(width, height);
    let radius_px = cfg.particle_radius_px * width as f32 / 64.0;
    let radius_ws = radius_px / width as f32;
    for p in &state.positions {
        let cx = p[0] * width as f32;
        let cy = p[1] * height as f32;
        let r0 = ((cy - radius_px).floor().max(0.0)) as usize;
        let r1 = ((cy + radius_px).ceil().min(height as f32)) as usize;
        let c0 = ((cx - radius_px).floor().max(0.0)) as usize;
        let c1 = ((cx + radius_px).ceil().min(width as f32)) as usize;
        for r in r0..r1 {
            for c in c0..c1 {
                let dx = c as f32 + 0.5 - cx;
                let dy = r as f32 + 0.5 - cy;
                let rho2 = dx * dx + dy * dy;
                if rho2 <= radius_px * radius_px {
                    let rho_ws2 = rho2 / (width as f32 * width as f32);
                    let cap = (radius_ws * radius_ws - rho_ws2).max(0.0).sqrt();
                    let value = DEPTH_BASE + p[2] + cap;
                    let px = &mut img.pixels[r * width + c];
                    if value > *px {
                        *px = value;
                    }
                }
            }
        }
    }
    img
}
