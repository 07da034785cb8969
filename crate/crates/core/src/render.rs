//! Depth images and a deterministic z-buffer rasterizer.

use thiserror::Error;

use crate::model::FaceShape;
use crate::projection::WeakPerspective;

/// Depth value reserved for "no measurement".
pub const SENTINEL: f64 = 0.0;

/// Preprocessing crop size for face depth images.
pub const DEFAULT_OUT_SIZE: usize = 128;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("rejected input: {0}")]
    InvalidInput(String),
    #[error("image contains no valid depth pixels")]
    EmptyImage,
}

/// Row-major metric depth raster in millimeters; `0` marks missing data.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, RenderError> {
        if width == 0 || height == 0 {
            return Err(RenderError::InvalidInput(format!(
                "zero-area image {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(RenderError::InvalidInput(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(**v == SENTINEL || (v.is_finite() && **v > 0.0))) {
            return Err(RenderError::InvalidInput(format!("invalid depth value {bad}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// An image where every pixel is the sentinel.
    pub fn empty(width: usize, height: usize) -> Result<Self, RenderError> {
        Self::new(width, height, vec![SENTINEL; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y) != SENTINEL
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| **v != SENTINEL).count()
    }

    /// Applies `f` to every valid pixel. Results that are not strictly
    /// positive and finite become the sentinel.
    pub fn map_valid(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| {
                if v == SENTINEL {
                    return SENTINEL;
                }
                let out = f(v);
                if out.is_finite() && out > 0.0 {
                    out
                } else {
                    SENTINEL
                }
            })
            .collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Axis-aligned pixel rectangle, `x..x+width` by `y..y+height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl BBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64
            && y >= self.y as f64
            && x <= (self.x + self.width) as f64
            && y <= (self.y + self.height) as f64
    }
}

/// Twice the signed area of `(a, b, p)`.
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Top-left fill rule for an edge of a triangle whose interior is where
/// [`edge`] is positive, in a y-down raster: pixels exactly on a top or
/// left edge are owned by it.
fn is_top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

/// The surface seen at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    /// Index into the triangle list.
    pub triangle: u32,
    /// Barycentric weights of the triangle's vertices, in list order.
    pub weights: [f64; 3],
    pub depth: f64,
}

/// Per-pixel nearest fragments, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentBuffer {
    pub width: usize,
    pub height: usize,
    pub fragments: Vec<Option<Fragment>>,
}

/// Rasterizes already projected `(u, v, depth)` vertices.
///
/// Pixel `(x, y)` is sampled at its center `(x + 0.5, y + 0.5)`. Depth is
/// interpolated barycentrically; the smallest depth wins. Pixels whose
/// interpolated depth is not positive are left empty.
pub fn rasterize_projected(
    projected: &[[f64; 3]],
    triangles: &[[u32; 3]],
    width: usize,
    height: usize,
) -> Result<DepthImage, RenderError> {
    let buf = rasterize_fragments(projected, triangles, width, height)?;
    let data = buf
        .fragments
        .iter()
        .map(|f| f.map_or(SENTINEL, |f| f.depth))
        .collect();
    DepthImage::new(width, height, data)
}

/// Like [`rasterize_projected`] but keeps which triangle won each pixel and
/// where on it the pixel center falls.
pub fn rasterize_fragments(
    projected: &[[f64; 3]],
    triangles: &[[u32; 3]],
    width: usize,
    height: usize,
) -> Result<FragmentBuffer, RenderError> {
    if width == 0 || height == 0 {
        return Err(RenderError::InvalidInput(format!(
            "zero-area raster {width}x{height}"
        )));
    }
    let mut frags: Vec<Option<Fragment>> = vec![None; width * height];
    for (t, tri) in triangles.iter().enumerate() {
        let fetch = |i: u32| {
            projected.get(i as usize).copied().ok_or_else(|| {
                RenderError::InvalidInput(format!(
                    "triangle {t} references vertex {i} of {}",
                    projected.len()
                ))
            })
        };
        let (mut p0, mut p1, p2) = (fetch(tri[0])?, fetch(tri[1])?, fetch(tri[2])?);
        let mut area = edge([p0[0], p0[1]], [p1[0], p1[1]], [p2[0], p2[1]]);
        if !area.is_finite() || area == 0.0 {
            continue;
        }
        let swapped = area < 0.0;
        if swapped {
            std::mem::swap(&mut p0, &mut p1);
            area = -area;
        }
        let (a, b, c) = ([p0[0], p0[1]], [p1[0], p1[1]], [p2[0], p2[1]]);
        let min_x = a[0].min(b[0]).min(c[0]);
        let max_x = a[0].max(b[0]).max(c[0]);
        let min_y = a[1].min(b[1]).min(c[1]);
        let max_y = a[1].max(b[1]).max(c[1]);
        // Pixel centers inside [min, max]: x + 0.5 >= min  =>  x >= ceil(min - 0.5).
        let x0 = (min_x - 0.5).ceil().max(0.0);
        let y0 = (min_y - 0.5).ceil().max(0.0);
        let x1 = (max_x - 0.5).floor().min(width as f64 - 1.0);
        let y1 = (max_y - 0.5).floor().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let (tl_bc, tl_ca, tl_ab) = (is_top_left(b, c), is_top_left(c, a), is_top_left(a, b));
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let w0 = edge(b, c, p);
                let w1 = edge(c, a, p);
                let w2 = edge(a, b, p);
                let inside = |w: f64, tl: bool| w > 0.0 || (w == 0.0 && tl);
                if !(inside(w0, tl_bc) && inside(w1, tl_ca) && inside(w2, tl_ab)) {
                    continue;
                }
                let depth = (w0 * p0[2] + w1 * p1[2] + w2 * p2[2]) / area;
                if !(depth > 0.0 && depth.is_finite()) {
                    continue;
                }
                let slot = &mut frags[y * width + x];
                if slot.is_none_or(|f| depth < f.depth) {
                    let (u0, u1, u2) = (w0 / area, w1 / area, w2 / area);
                    *slot = Some(Fragment {
                        triangle: t as u32,
                        weights: if swapped { [u1, u0, u2] } else { [u0, u1, u2] },
                        depth,
                    });
                }
            }
        }
    }
    Ok(FragmentBuffer {
        width,
        height,
        fragments: frags,
    })
}

/// Projects a face mesh with `cam` and z-buffers it into a depth image.
pub fn rasterize_depth(
    shape: &FaceShape,
    triangles: &[[u32; 3]],
    cam: &WeakPerspective,
    width: usize,
    height: usize,
) -> Result<DepthImage, RenderError> {
    rasterize_projected(&cam.project(shape), triangles, width, height)
}

/// Nearest-neighbor crop-and-resize to an `out_size` square.
pub fn crop_resize(img: &DepthImage, bbox: BBox, out_size: usize) -> Result<DepthImage, RenderError> {
    if out_size < 8 {
        return Err(RenderError::InvalidInput(format!(
            "output size {out_size} is below the minimum of 8"
        )));
    }
    if bbox.width == 0
        || bbox.height == 0
        || bbox.x + bbox.width > img.width
        || bbox.y + bbox.height > img.height
    {
        return Err(RenderError::InvalidInput(format!(
            "bbox {bbox:?} outside {}x{} image",
            img.width, img.height
        )));
    }
    let mut data = Vec::with_capacity(out_size * out_size);
    for oy in 0..out_size {
        let sy = bbox.y + ((2 * oy + 1) * bbox.height) / (2 * out_size);
        for ox in 0..out_size {
            let sx = bbox.x + ((2 * ox + 1) * bbox.width) / (2 * out_size);
            data.push(img.get(sx, sy));
        }
    }
    DepthImage::new(out_size, out_size, data)
}

/// Tight box around valid pixels, grown by 5% of its size on each side and
/// clamped to the image.
pub fn face_bbox(img: &DepthImage) -> Result<BBox, RenderError> {
    let (mut x_lo, mut y_lo, mut x_hi, mut y_hi) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..img.height {
        for x in 0..img.width {
            if img.is_valid(x, y) {
                x_lo = x_lo.min(x);
                y_lo = y_lo.min(y);
                x_hi = x_hi.max(x);
                y_hi = y_hi.max(y);
            }
        }
    }
    if x_lo == usize::MAX {
        return Err(RenderError::EmptyImage);
    }
    let (w, h) = (x_hi - x_lo + 1, y_hi - y_lo + 1);
    let (mx, my) = ((w as f64 * 0.05).ceil() as usize, (h as f64 * 0.05).ceil() as usize);
    let x = x_lo.saturating_sub(mx);
    let y = y_lo.saturating_sub(my);
    let right = (x_hi + 1 + mx).min(img.width);
    let bottom = (y_hi + 1 + my).min(img.height);
    Ok(BBox {
        x,
        y,
        width: right - x,
        height: bottom - y,
    })
}
