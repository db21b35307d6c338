//! Static plot images: trajectory overlays on the map and error curves.

use std::path::Path;

use image::{Rgb, RgbImage};

use radloc_core::bev::GridMap;
use radloc_core::error::PipelineError;
use radloc_core::se2::Pose2;

const GT_COLOR: Rgb<u8> = Rgb([40, 160, 60]);
const EST_COLOR: Rgb<u8> = Rgb([210, 60, 40]);
const AXIS_COLOR: Rgb<u8> = Rgb([90, 90, 90]);
const CURVE_COLOR: Rgb<u8> = Rgb([40, 90, 200]);

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=n {
        let t = k as f64 / n as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Ground truth and estimate drawn over the occupancy map. The map is
/// rendered row 0 at the bottom so +x (rows) points up.
pub fn plot_trajectories(
    path: &Path,
    map: &GridMap,
    gt: &[Pose2],
    est: &[Pose2],
) -> Result<(), PipelineError> {
    let scale = 6u32;
    let (rows, cols) = (map.cells.nrows() as u32, map.cells.ncols() as u32);
    let mut img = RgbImage::new(cols * scale, rows * scale);
    for (py, px, v) in map
        .cells
        .indexed_iter()
        .map(|((i, j), v)| (rows - 1 - i as u32, j as u32, *v))
    {
        let g = 255 - (v.clamp(0.0, 1.0) * 200.0) as u8;
        for dy in 0..scale {
            for dx in 0..scale {
                img.put_pixel(px * scale + dx, py * scale + dy, Rgb([g, g, g]));
            }
        }
    }
    let to_px = |p: &Pose2| {
        let (ci, cj) = map.world_to_cell(p.x, p.y);
        (
            cj * scale as f64,
            (rows as f64 - 1.0 - ci) * scale as f64,
        )
    };
    for (track, color) in [(gt, GT_COLOR), (est, EST_COLOR)] {
        for w in track.windows(2) {
            draw_line(&mut img, to_px(&w[0]), to_px(&w[1]), color);
        }
    }
    img.save(path)
        .map_err(|e| PipelineError::numerical("write plot", e.to_string()))
}

/// A single error-vs-x curve with plain axes.
pub fn plot_error_curve(path: &Path, points: &[(f64, f64)]) -> Result<(), PipelineError> {
    let (w, h) = (640u32, 400u32);
    let margin = 40.0;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    draw_line(&mut img, (margin, h as f64 - margin), (w as f64 - 10.0, h as f64 - margin), AXIS_COLOR);
    draw_line(&mut img, (margin, h as f64 - margin), (margin, 10.0), AXIS_COLOR);
    let finite: Vec<(f64, f64)> = points
        .iter()
        .cloned()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if finite.len() < 2 {
        return img
            .save(path)
            .map_err(|e| PipelineError::numerical("write plot", e.to_string()));
    }
    let (x0, x1) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (_, y1) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let y1 = if y1 > 0.0 { y1 } else { 1.0 };
    let sx = (w as f64 - margin - 10.0) / (x1 - x0).max(1e-12);
    let sy = (h as f64 - margin - 10.0) / y1;
    let to_px = |p: &(f64, f64)| {
        (
            margin + (p.0 - x0) * sx,
            h as f64 - margin - p.1.max(0.0) * sy,
        )
    };
    for pair in finite.windows(2) {
        draw_line(&mut img, to_px(&pair[0]), to_px(&pair[1]), CURVE_COLOR);
    }
    img.save(path)
        .map_err(|e| PipelineError::numerical("write plot", e.to_string()))
}
