//! Frame rendering: depth images to grayscale PNGs with keypoint markers
//! and pick-to-place arrows, plus animated GIF assembly.

use anyhow::{Context, Result};
use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, Rgb, RgbImage, Rgba, RgbaImage};
use kpdyn_core::sim::{Action, DepthImage};

/// Overlay colors are pure so they never collide with the grayscale depth.
pub const ARROW_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const KEYPOINT_COLOR: Rgb<u8> = Rgb([0, 255, 0]);

/// Map depth to grayscale: background stays exactly black, object pixels get
/// a visible floor so faint depths never vanish.
pub fn depth_to_rgb(img: &DepthImage, scale: usize) -> RgbImage {
    let max = img.pixels.iter().copied().fold(0.0f32, f32::max);
    let min_pos = img
        .pixels
        .iter()
        .copied()
        .filter(|&v| v > 0.0)
        .fold(f32::INFINITY, f32::min);
    let mut out = RgbImage::new((img.width * scale) as u32, (img.height * scale) as u32);
    for r in 0..img.height {
        for c in 0..img.width {
            let v = img.get(r, c);
            let g = if v > 0.0 {
                let t = if max > min_pos {
                    (v - min_pos) / (max - min_pos)
                } else {
                    1.0
                };
                (80.0 + 175.0 * t) as u8
            } else {
                0
            };
            for dr in 0..scale {
                for dc in 0..scale {
                    out.put_pixel(
                        (c * scale + dc) as u32,
                        (r * scale + dr) as u32,
                        Rgb([g, g, g]),
                    );
                }
            }
        }
    }
    out
}

pub fn draw_disc(img: &mut RgbImage, cx: f32, cy: f32, radius: f32, color: Rgb<u8>) {
    let (w, h) = (img.width() as i32, img.height() as i32);
    let r = radius.ceil() as i32;
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx * dx + dy * dy) as f32 <= radius * radius {
                let (x, y) = (cx as i32 + dx, cy as i32 + dy);
                if x >= 0 && x < w && y >= 0 && y < h {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
}

pub fn draw_line(img: &mut RgbImage, from: (f32, f32), to: (f32, f32), color: Rgb<u8>) {
    let (mut x0, mut y0) = (from.0.round() as i32, from.1.round() as i32);
    let (x1, y1) = (to.0.round() as i32, to.1.round() as i32);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (w, h) = (img.width() as i32, img.height() as i32);
    loop {
        if x0 >= 0 && x0 < w && y0 >= 0 && y0 < h {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Arrow from pick to place with a two-segment head at the place end.
pub fn draw_arrow(img: &mut RgbImage, from: (f32, f32), to: (f32, f32), color: Rgb<u8>) {
    draw_line(img, from, to, color);
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let len = (dx * dx + dy * dy).sqrt();
    if len < 1.0 {
        return;
    }
    let (ux, uy) = (dx / len, dy / len);
    let head = (0.25 * len).clamp(3.0, 10.0);
    for side in [-1.0f32, 1.0] {
        // Unit vector rotated ~150 degrees off the shaft.
        let (hx, hy) = (
            -ux * 0.866 - side * uy * 0.5,
            -uy * 0.866 + side * ux * 0.5,
        );
        draw_line(img, to, (to.0 + hx * head, to.1 + hy * head), color);
    }
}

/// Overlay the action arrow for one frame, in workspace coordinates.
pub fn overlay_action(img: &mut RgbImage, action: Action) {
    let (w, h) = (img.width() as f32, img.height() as f32);
    draw_arrow(
        img,
        (action.xs * w, action.ys * h),
        (action.xg * w, action.yg * h),
        ARROW_COLOR,
    );
}

pub fn save_gif(path: &std::path::Path, frames: &[RgbImage], delay_ms: u32) -> Result<()> {
    let file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut encoder = GifEncoder::new(file);
    encoder.set_repeat(Repeat::Infinite)?;
    for frame in frames {
        let rgba: RgbaImage = image::ImageBuffer::from_fn(frame.width(), frame.height(), |x, y| {
            let p = frame.get_pixel(x, y);
            Rgba([p[0], p[1], p[2], 255])
        });
        encoder.encode_frame(Frame::from_parts(
            rgba,
            0,
            0,
            Delay::from_numer_denom_ms(delay_ms, 1),
        ))?;
    }
    Ok(())
}
