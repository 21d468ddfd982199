use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Crop edge relative to the tightest square around the keypoint hull.
pub const CROP_SCALE: f64 = 1.2;

/// Square crop derived from a keypoint set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropSpec {
    /// `(x_min, y_min, x_max, y_max)` of the keypoint hull.
    pub bbox: [f64; 4],
    /// Edge of the tightest enclosing square.
    pub l: f64,
    pub center: (f64, f64),
    /// Edge of the crop square in pixels.
    pub edge: usize,
    /// Half-open pixel ranges `x0..x0+edge`, `y0..y0+edge`.
    pub x0: usize,
    pub y0: usize,
}

impl CropSpec {
    pub fn x_range(&self) -> (usize, usize) {
        (self.x0, self.x0 + self.edge)
    }

    pub fn y_range(&self) -> (usize, usize) {
        (self.y0, self.y0 + self.edge)
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn check_keypoints(points: &[(f64, f64)], width: usize, height: usize) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::invalid("crop_from_keypoints", format!("need at least 3 keypoints, got {}", points.len())));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !(p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= width as f64 && p.1 <= height as f64))
    {
        return Err(Error::invalid("crop_from_keypoints", format!("keypoint {p:?} lies outside the {width}x{height} image")));
    }
    let a = points[0];
    let far = points
        .iter()
        .copied()
        .max_by(|p, q| dist2(a, *p).total_cmp(&dist2(a, *q)))
        .expect("non-empty");
    if dist2(a, far) == 0.0 || points.iter().all(|p| cross(a, far, *p) == 0.0) {
        return Err(Error::invalid("crop_from_keypoints", "keypoints are collinear"));
    }
    Ok(())
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Square crop of edge `round(1.2 * l)` centred on the hull bounding box,
/// shifted (never shrunk) to lie inside a `width x height` image.
pub fn crop_from_keypoints(points: &[(f64, f64)], width: usize, height: usize) -> Result<CropSpec> {
    check_keypoints(points, width, height)?;
    let fold = |f: fn(f64, f64) -> f64, init: f64, axis: fn(&(f64, f64)) -> f64| points.iter().map(axis).fold(init, f);
    let bbox = [
        fold(f64::min, f64::INFINITY, |p| p.0),
        fold(f64::min, f64::INFINITY, |p| p.1),
        fold(f64::max, f64::NEG_INFINITY, |p| p.0),
        fold(f64::max, f64::NEG_INFINITY, |p| p.1),
    ];
    let l = (bbox[2] - bbox[0]).max(bbox[3] - bbox[1]);
    let center = ((bbox[0] + bbox[2]) / 2.0, (bbox[1] + bbox[3]) / 2.0);
    let edge = (CROP_SCALE * l).round() as usize;
    if edge > width || edge > height {
        return Err(Error::invalid(
            "crop_from_keypoints",
            format!("crop edge {edge} does not fit in a {width}x{height} image"),
        ));
    }
    let place = |c: f64, limit: usize| -> usize {
        let start = (c - edge as f64 / 2.0).round();
        start.clamp(0.0, (limit - edge) as f64) as usize
    };
    Ok(CropSpec {
        bbox,
        l,
        center,
        edge,
        x0: place(center.0, width),
        y0: place(center.1, height),
    })
}

/// Cuts `spec`'s square out of a `[B, C, H, W]` raster.
pub fn apply_crop(raster: &Tensor, spec: &CropSpec) -> Result<Tensor> {
    let [b, c, h, w] = raster.dims4("apply_crop")?;
    if spec.x0 + spec.edge > w || spec.y0 + spec.edge > h {
        return Err(Error::invalid("apply_crop", "crop box exceeds the raster"));
    }
    let e = spec.edge;
    let mut out = Vec::with_capacity(b * c * e * e);
    for plane in raster.data().chunks(h * w) {
        for i in spec.y0..spec.y0 + e {
            out.extend_from_slice(&plane[i * w + spec.x0..i * w + spec.x0 + e]);
        }
    }
    Tensor::from_vec(&[b, c, e, e], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Bilinear,
    /// For masks and other label rasters.
    Nearest,
}

/// Resizes a `[B, C, H, W]` raster with pixel-centre alignment.
pub fn resize(raster: &Tensor, out_h: usize, out_w: usize, method: Resample) -> Result<Tensor> {
    let [b, c, h, w] = raster.dims4("resize")?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("resize", "sizes must be positive"));
    }
    let src = |o: usize, n_out: usize, n_in: usize| ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in raster.data().chunks(h * w) {
        for i in 0..out_h {
            let sy = src(i, out_h, h);
            for j in 0..out_w {
                let sx = src(j, out_w, w);
                let v = match method {
                    Resample::Nearest => plane[sy.round() as usize * w + sx.round() as usize],
                    Resample::Bilinear => {
                        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                        let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
                        let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                        let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                        top * (1.0 - fy) + bottom * fy
                    }
                };
                out.push(v);
            }
        }
    }
    Tensor::from_vec(&[b, c, out_h, out_w], out)
}

/// Convex hull by the monotone chain, counter-clockwise, without collinear points.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// `[1, 1, H, W]` mask of pixel centres inside the keypoint hull.
pub fn hull_mask(points: &[(f64, f64)], width: usize, height: usize) -> Result<Tensor> {
    check_keypoints(points, width, height)?;
    let hull = convex_hull(points);
    let mut data = vec![0.0f32; width * height];
    for i in 0..height {
        for j in 0..width {
            let p = (j as f64 + 0.5, i as f64 + 0.5);
            let inside = (0..hull.len()).all(|k| cross(hull[k], hull[(k + 1) % hull.len()], p) >= 0.0);
            if inside {
                data[i * width + j] = 1.0;
            }
        }
    }
    Tensor::from_vec(&[1, 1, height, width], data)
}

/// Parses `x y` lines; blank lines and `#` comments are ignored.
pub fn parse_keypoints(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Format {
            what: "keypoint file",
            detail: format!("line {}: expected `x y`, got {line:?}", n + 1),
        };
        let mut fields = line.split_whitespace().map(str::parse::<f64>);
        match (fields.next(), fields.next(), fields.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) if x.is_finite() && y.is_finite() => points.push((x, y)),
            _ => return Err(bad()),
        }
    }
    Ok(points)
}

pub fn read_keypoints(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_keypoints(&text)
}
