//! T-block geometry: corner layout, oriented-rectangle decomposition,
//! closest-boundary queries for contact resolution, and exact polygon
//! clipping for the overlap reward.
//!
//! The block is the union of two rectangles in its local frame — a bar on
//! top and a stem below — stretched by per-axis scales before rotation, so
//! every world-space face stays a rectangle.

use crate::geom::Vec3;

/// Planar pose: position (z = 0) plus yaw about z.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Pose2 {
    pub pos: Vec3,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Pose2 {
        Pose2 { pos: Vec3::new(x, y, 0.0), yaw }
    }
}

/// Local-frame T dimensions derived from the unit length `L`: bar 4L × L on
/// top, stem L × 3L below, local origin at the stem's bottom centre.
#[derive(Debug, Clone, Copy)]
pub struct TShape {
    pub unit: f64,
    pub scale_x: f64,
    pub scale_y: f64,
}

/// An oriented rectangle given by centre, half-extents along its local
/// axes, and yaw.
#[derive(Debug, Clone, Copy)]
pub struct OrientedRect {
    pub center: [f64; 2],
    pub half: [f64; 2],
    pub yaw: f64,
}

impl TShape {
    /// The eight outline corners, local frame, counter-clockwise starting at
    /// the stem's bottom-left.
    pub fn local_corners(&self) -> [[f64; 2]; 8] {
        let l = self.unit;
        let (sx, sy) = (self.scale_x, self.scale_y);
        [
            [-0.5 * l * sx, 0.0],
            [0.5 * l * sx, 0.0],
            [0.5 * l * sx, 3.0 * l * sy],
            [2.0 * l * sx, 3.0 * l * sy],
            [2.0 * l * sx, 4.0 * l * sy],
            [-2.0 * l * sx, 4.0 * l * sy],
            [-2.0 * l * sx, 3.0 * l * sy],
            [-0.5 * l * sx, 3.0 * l * sy],
        ]
    }

    /// Convex decomposition: stem then bar, as local axis-aligned rectangles
    /// `(center, half-extents)`.
    pub fn local_rects(&self) -> [([f64; 2], [f64; 2]); 2] {
        let l = self.unit;
        let (sx, sy) = (self.scale_x, self.scale_y);
        [
            ([0.0, 1.5 * l * sy], [0.5 * l * sx, 1.5 * l * sy]),
            ([0.0, 3.5 * l * sy], [2.0 * l * sx, 0.5 * l * sy]),
        ]
    }

    pub fn area(&self) -> f64 {
        let l = self.unit;
        // stem L × 3L + bar 4L × L, under per-axis stretch.
        7.0 * l * l * self.scale_x * self.scale_y
    }

    /// Area centroid in the local frame.
    pub fn local_centroid(&self) -> [f64; 2] {
        let l = self.unit;
        let sy = self.scale_y;
        let a_stem = 3.0;
        let a_bar = 4.0;
        let y = (a_stem * 1.5 * l * sy + a_bar * 3.5 * l * sy) / (a_stem + a_bar);
        [0.0, y]
    }

    /// Second area moment about the centroid divided by area (the
    /// per-unit-mass moment of inertia, in squared length units).
    pub fn inertia_per_area(&self) -> f64 {
        let c = self.local_centroid();
        let mut total_area = 0.0;
        let mut second = 0.0;
        for (center, half) in self.local_rects() {
            let (w, h) = (2.0 * half[0], 2.0 * half[1]);
            let area = w * h;
            let own = area * (w * w + h * h) / 12.0;
            let dx = center[0] - c[0];
            let dy = center[1] - c[1];
            second += own + area * (dx * dx + dy * dy);
            total_area += area;
        }
        second / total_area
    }

    /// World-space outline corners under a pose.
    pub fn world_corners(&self, pose: &Pose2) -> [Vec3; 8] {
        let (s, c) = pose.yaw.sin_cos();
        let mut out = [Vec3::ZERO; 8];
        for (i, p) in self.local_corners().iter().enumerate() {
            let x = c * p[0] - s * p[1] + pose.pos.x;
            let y = s * p[0] + c * p[1] + pose.pos.y;
            out[i] = Vec3::new(x, y, 0.0);
        }
        out
    }

    /// World-space oriented rectangles of the decomposition.
    pub fn world_rects(&self, pose: &Pose2) -> [OrientedRect; 2] {
        let (s, c) = pose.yaw.sin_cos();
        let mut out = [OrientedRect { center: [0.0; 2], half: [0.0; 2], yaw: pose.yaw }; 2];
        for (i, (center, half)) in self.local_rects().iter().enumerate() {
            out[i] = OrientedRect {
                center: [
                    c * center[0] - s * center[1] + pose.pos.x,
                    s * center[0] + c * center[1] + pose.pos.y,
                ],
                half: *half,
                yaw: pose.yaw,
            };
        }
        out
    }

    /// World-space area centroid.
    pub fn world_centroid(&self, pose: &Pose2) -> [f64; 2] {
        let c = self.local_centroid();
        let (s, co) = pose.yaw.sin_cos();
        [
            co * c[0] - s * c[1] + pose.pos.x,
            s * c[0] + co * c[1] + pose.pos.y,
        ]
    }
}

impl OrientedRect {
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let mut out = [[0.0; 2]; 4];
        for (i, (ux, uy)) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
            .iter()
            .enumerate()
        {
            let lx = ux * self.half[0];
            let ly = uy * self.half[1];
            out[i] = [
                c * lx - s * ly + self.center[0],
                s * lx + c * ly + self.center[1],
            ];
        }
        out
    }

    pub fn contains(&self, p: [f64; 2], slack: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.half[0] + slack && ly.abs() <= self.half[1] + slack
    }
}

/// Closest point to `p` on a segment.
fn closest_on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> [f64; 2] {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len_sq = ab[0] * ab[0] + ab[1] * ab[1];
    if len_sq <= 0.0 {
        return a;
    }
    let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len_sq).clamp(0.0, 1.0);
    [a[0] + t * ab[0], a[1] + t * ab[1]]
}

fn dist_sq(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Closest point on the T's boundary to `p`, plus whether `p` is inside.
/// The boundary is exactly the eight-segment outline, so the query reduces
/// to per-segment closest points.
pub fn closest_on_boundary(shape: &TShape, pose: &Pose2, p: [f64; 2]) -> ([f64; 2], bool) {
    let inside = shape.world_rects(pose).iter().any(|r| r.contains(p, 0.0));
    let corners = shape.world_corners(pose);
    let mut best = [corners[0].x, corners[0].y];
    let mut best_d = f64::INFINITY;
    for e in 0..corners.len() {
        let a = corners[e];
        let b = corners[(e + 1) % corners.len()];
        let q = closest_on_segment([a.x, a.y], [b.x, b.y], p);
        let d = dist_sq(q, p);
        if d < best_d {
            best_d = d;
            best = q;
        }
    }
    (best, inside)
}

/// Distance from `p` to the T (0 when inside).
pub fn distance_to_block(shape: &TShape, pose: &Pose2, p: [f64; 2]) -> f64 {
    let (q, inside) = closest_on_boundary(shape, pose, p);
    if inside {
        0.0
    } else {
        dist_sq(q, p).sqrt()
    }
}

/// Whether the segment `a → b` keeps at least `clearance` away from the T.
pub fn segment_clears_block(
    shape: &TShape,
    pose: &Pose2,
    a: [f64; 2],
    b: [f64; 2],
    clearance: f64,
) -> bool {
    // Sample densely relative to the clearance radius; the shapes involved
    // are smooth at this scale.
    let steps = ((dist_sq(a, b).sqrt() / (clearance * 0.5)).ceil() as usize).clamp(1, 256);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        if distance_to_block(shape, pose, p) < clearance {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Exact convex clipping
// ---------------------------------------------------------------------------

fn edge_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Sutherland–Hodgman: clip `subject` to the inside of the CCW convex
/// `clip` polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    if subject.len() < 3 || clip.len() < 3 {
        return Vec::new();
    }
    let mut poly = subject.to_vec();
    for i in 0..clip.len() {
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut poly);
        if input.is_empty() {
            return Vec::new();
        }
        for j in 0..input.len() {
            let s = input[j];
            let e = input[(j + 1) % input.len()];
            let sc = edge_distance(a, b, s);
            let ec = edge_distance(a, b, e);
            let s_in = sc >= 0.0;
            let e_in = ec >= 0.0;
            match (s_in, e_in) {
                (true, true) => poly.push(e),
                (true, false) | (false, true) => {
                    let denom = sc - ec;
                    if denom.abs() > 1e-30 {
                        let t = sc / denom;
                        poly.push([s[0] + (e[0] - s[0]) * t, s[1] + (e[1] - s[1]) * t]);
                    }
                    if e_in {
                        poly.push(e);
                    }
                }
                (false, false) => {}
            }
        }
    }
    poly
}

/// Shoelace area of a CCW polygon.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * acc
}

/// Ensure counter-clockwise orientation.
fn ccw(corners: [[f64; 2]; 4]) -> [[f64; 2]; 4] {
    if polygon_area(&corners) < 0.0 {
        [corners[3], corners[2], corners[1], corners[0]]
    } else {
        corners
    }
}

/// Exact area of the intersection of two T-blocks via the rectangle
/// decomposition: the rects within one block are disjoint, so the union
/// intersection area is the sum of the four pairwise rect intersections.
pub fn intersection_area(shape: &TShape, a: &Pose2, b: &Pose2) -> f64 {
    let ra = shape.world_rects(a);
    let rb = shape.world_rects(b);
    let mut total = 0.0;
    for x in &ra {
        let xc = ccw(x.corners());
        for y in &rb {
            let yc = ccw(y.corners());
            let inter = clip_convex(&xc, &yc);
            total += polygon_area(&inter).max(0.0);
        }
    }
    total
}
