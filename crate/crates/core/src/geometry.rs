//! Axis-aligned box arithmetic.
//!
//! Boxes are `(x, y, w, h)` in pixels and cover the half-open region
//! `[x, x + w) × [y, y + h)`. Two boxes that share an edge therefore never
//! both contain a point on that edge. Points are integer pixel indices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box ({x}, {y}, {w}, {h}): width and height must be positive and finite")]
    DegenerateBox { x: f64, y: f64, w: f64, h: f64 },
    #[error("box ({x}, {y}, {w}, {h}) exceeds image bounds {width}x{height}")]
    OutOfBounds {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        width: u32,
        height: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: i32,
    pub y: i32,
}

impl Point {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    /// True when the point is a valid pixel index of a `width × height` image.
    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x >= 0 && self.y >= 0 && (self.x as i64) < width as i64 && (self.y as i64) < height as i64
    }
}

impl BoundingBox {
    /// Builds a box, rejecting non-positive or non-finite extents.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Converts corner format `(x1, y1, x2, y2)` to `(x, y, w, h)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite();
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(GeometryError::DegenerateBox { x: self.x, y: self.y, w: self.w, h: self.h });
        }
        Ok(())
    }

    /// Validates the box and checks that it lies inside a `width × height` image.
    pub fn validate_within(&self, width: u32, height: u32) -> Result<(), GeometryError> {
        self.validate()?;
        if self.x < 0.0
            || self.y < 0.0
            || self.x + self.w > width as f64
            || self.y + self.h > height as f64
        {
            return Err(GeometryError::OutOfBounds {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                width,
                height,
            });
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Exact geometric center (not floored).
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.right().min(b.right()) - a.x.max(b.x);
    let ih = a.bottom().min(b.bottom()) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        0.0
    } else {
        iw * ih
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

#[inline]
pub(crate) fn iou_unchecked(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_area(a, b);
    inter / (a.area() + b.area() - inter)
}

/// Half-open containment test.
pub fn contains(bbox: &BoundingBox, p: Point) -> Result<bool, GeometryError> {
    bbox.validate()?;
    Ok(contains_unchecked(bbox, p))
}

#[inline]
pub(crate) fn contains_unchecked(bbox: &BoundingBox, p: Point) -> bool {
    let (px, py) = (p.x as f64, p.y as f64);
    bbox.x <= px && px < bbox.right() && bbox.y <= py && py < bbox.bottom()
}

/// Center of the box, floored to the pixel that contains it.
///
/// For integer-aligned boxes the result is always inside the box.
pub fn center_point(bbox: &BoundingBox) -> Result<Point, GeometryError> {
    bbox.validate()?;
    let (cx, cy) = bbox.center();
    Ok(Point::new(cx.floor() as i32, cy.floor() as i32))
}
