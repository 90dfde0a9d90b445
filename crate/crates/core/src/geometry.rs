//! Bounding boxes and patch extraction.

use thiserror::Error;

use crate::image::ImageBuffer;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid box size {w}x{h}: width and height must be positive and finite")]
    InvalidSize { w: f64, h: f64 },
    #[error("box {0:?} lies entirely outside the {1}x{2} image")]
    OutsideImage(BoundingBox, usize, usize),
    #[error("output patch size must be at least 1x1")]
    EmptyOutput,
}

/// Axis-aligned region in 0-based pixel coordinates: `x`, `y` are the left/top edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite() && x.is_finite() && y.is_finite()) {
            return Err(GeometryError::InvalidSize { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn aspect(&self) -> f64 {
        self.w / self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Shift so the box lies inside a `width`x`height` image, shrinking it uniformly
    /// when it is larger than the image. Aspect ratio is kept.
    pub fn clamp_into(&self, width: usize, height: usize) -> BoundingBox {
        let (cx, cy) = self.center();
        let shrink = (width as f64 / self.w).min(height as f64 / self.h).min(1.0);
        let w = self.w * shrink;
        let h = self.h * shrink;
        let x = (cx - w / 2.0).clamp(0.0, width as f64 - w);
        let y = (cy - h / 2.0).clamp(0.0, height as f64 - h);
        BoundingBox { x, y, w, h }
    }

    /// Integer `x,y,w,h` with round-half-up, offset by `origin` (1 for OTB files).
    pub fn to_int_tuple(&self, origin: i64) -> (i64, i64, i64, i64) {
        let r = |v: f64| (v + 0.5).floor() as i64;
        (r(self.x) + origin, r(self.y) + origin, r(self.w).max(1), r(self.h).max(1))
    }
}

/// Intersection over union; 0 when the boxes are disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a == b {
        // (x + w) - x is not always w in floating point
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between box centers.
pub fn center_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Bilinear resample of `bbox` to `out_w`x`out_h`.
///
/// Sample centers sit at half-pixel offsets, out-of-frame coordinates clamp to the
/// nearest edge pixel and values are quantized with round-half-up.
pub fn crop_resize(
    img: &ImageBuffer,
    bbox: &BoundingBox,
    out_w: usize,
    out_h: usize,
) -> Result<ImageBuffer, GeometryError> {
    if out_w == 0 || out_h == 0 {
        return Err(GeometryError::EmptyOutput);
    }
    let (iw, ih) = (img.width(), img.height());
    if bbox.right() <= 0.0 || bbox.bottom() <= 0.0 || bbox.x >= iw as f64 || bbox.y >= ih as f64 {
        return Err(GeometryError::OutsideImage(*bbox, iw, ih));
    }
    let ch = img.channels();
    let src = img.data();
    let sx = bbox.w / out_w as f64;
    let sy = bbox.h / out_h as f64;
    let max_x = iw as i64 - 1;
    let max_y = ih as i64 - 1;

    // horizontal taps are shared by every output row
    let cols: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|ox| {
            let fx = bbox.x + (ox as f64 + 0.5) * sx - 0.5;
            let x0 = fx.floor();
            let t = fx - x0;
            let x0 = x0 as i64;
            (x0.clamp(0, max_x) as usize, (x0 + 1).clamp(0, max_x) as usize, t)
        })
        .collect();

    let mut out = Vec::with_capacity(out_w * out_h * ch);
    for oy in 0..out_h {
        let fy = bbox.y + (oy as f64 + 0.5) * sy - 0.5;
        let y0 = fy.floor();
        let u = fy - y0;
        let y0 = y0 as i64;
        let r0 = y0.clamp(0, max_y) as usize * iw;
        let r1 = (y0 + 1).clamp(0, max_y) as usize * iw;
        for &(x0, x1, t) in &cols {
            for c in 0..ch {
                let p00 = src[(r0 + x0) * ch + c] as f64;
                let p01 = src[(r0 + x1) * ch + c] as f64;
                let p10 = src[(r1 + x0) * ch + c] as f64;
                let p11 = src[(r1 + x1) * ch + c] as f64;
                let top = p00 + (p01 - p00) * t;
                let bot = p10 + (p11 - p10) * t;
                let v = top + (bot - top) * u;
                out.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(ImageBuffer::new(out_w, out_h, ch, out).expect("shape computed above"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 5.0, 5.0)), 0.0);
        assert!((iou(&a, &bx(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn center_distance_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(center_distance(&a, &a), 0.0);
        assert_eq!(center_distance(&bx(-5.0, -5.0, 10.0, 10.0), &bx(-2.0, -1.0, 10.0, 10.0)), 5.0);
        assert_eq!(center_distance(&a, &bx(20.0, 0.0, 10.0, 10.0)), 20.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn crop_full_image_is_identity() {
        let data: Vec<u8> = (0..48).map(|v| (v * 5) as u8).collect();
        let img = ImageBuffer::new(8, 6, 1, data).unwrap();
        let out = crop_resize(&img, &bx(0.0, 0.0, 8.0, 6.0), 8, 6).unwrap();
        assert_eq!(out, img);
        let rgb = ImageBuffer::new(4, 2, 3, (0..24).collect()).unwrap();
        assert_eq!(crop_resize(&rgb, &bx(0.0, 0.0, 4.0, 2.0), 4, 2).unwrap(), rgb);
    }

    #[test]
    fn checkerboard_to_single_pixel() {
        // oracle: the single output sample sits at the image center, equidistant from all
        // four pixels, so the bilinear value is their mean 127.5, rounded half-up
        let img = ImageBuffer::new(2, 2, 1, vec![0, 255, 255, 0]).unwrap();
        let oracle = (0.0 + 255.0 + 255.0 + 0.0) / 4.0_f64;
        let out = crop_resize(&img, &bx(0.0, 0.0, 2.0, 2.0), 1, 1).unwrap();
        assert_eq!(out.data(), &[(oracle + 0.5).floor() as u8]);
        assert_eq!(out.data(), &[128]);
    }

    #[test]
    fn left_overhang_replicates_first_column() {
        let data: Vec<u8> = (0..16).map(|v| (v * 10) as u8).collect();
        let img = ImageBuffer::new(4, 4, 1, data).unwrap();
        let out = crop_resize(&img, &bx(-2.0, 0.0, 4.0, 4.0), 4, 4).unwrap();
        for y in 0..4 {
            assert_eq!(out.get(0, y, 0), img.get(0, y, 0));
            assert_eq!(out.get(1, y, 0), img.get(0, y, 0));
            assert_eq!(out.get(2, y, 0), img.get(0, y, 0));
            assert_eq!(out.get(3, y, 0), img.get(1, y, 0));
        }
    }

    #[test]
    fn crop_outside_is_error() {
        let img = ImageBuffer::filled(4, 4, 1, 0).unwrap();
        assert!(matches!(
            crop_resize(&img, &bx(10.0, 0.0, 2.0, 2.0), 2, 2),
            Err(GeometryError::OutsideImage(..))
        ));
        assert_eq!(crop_resize(&img, &bx(0.0, 0.0, 2.0, 2.0), 0, 2), Err(GeometryError::EmptyOutput));
    }

    #[test]
    fn clamp_keeps_aspect() {
        let b = bx(-10.0, 5.0, 30.0, 15.0).clamp_into(20, 20);
        assert!((b.aspect() - 2.0).abs() < 1e-12);
        assert!(b.x >= 0.0 && b.right() <= 20.0 && b.y >= 0.0 && b.bottom() <= 20.0);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..60.0f64, 0.5..60.0f64).prop_map(|(x, y, w, h)| bx(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
        }

        #[test]
        fn iou_one_iff_same_region(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &a), 1.0);
            if a != b {
                prop_assert!(iou(&a, &b) < 1.0);
            }
        }

        #[test]
        fn center_distance_triangle(a in arb_box(), b in arb_box(), c in arb_box()) {
            let lhs = center_distance(&a, &c);
            prop_assert!(lhs <= center_distance(&a, &b) + center_distance(&b, &c) + 1e-9);
        }

        #[test]
        fn crop_is_deterministic(seed in 0u64..1000, b in arb_box()) {
            let data: Vec<u8> = (0..32 * 32).map(|i| ((i as u64 * 31 + seed) % 251) as u8).collect();
            let img = ImageBuffer::new(32, 32, 1, data).unwrap();
            let b = BoundingBox { x: b.x.abs() % 30.0, y: b.y.abs() % 30.0, ..b };
            let p = crop_resize(&img, &b, 9, 7).unwrap();
            prop_assert_eq!(p, crop_resize(&img, &b, 9, 7).unwrap());
        }
    }
}
