//! Domain boundaries and the distance queries walk on spheres runs on.
//!
//! Three representations are supported: signed distance trees built from a
//! few primitives and CSG operations, closed polylines in 2D, and triangle
//! meshes in 3D. Discrete boundaries are stored in a bounding volume hierarchy.
//!
//! Sign convention for signed distances: negative inside the domain.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Dim, Vec3};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point {point:?} is outside the domain (signed distance {signed_distance})")]
    Outside { point: Vec3, signed_distance: f64 },
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("boundary has no elements")]
    Empty,
    #[error("domain is unbounded; give explicit bounds for this boundary")]
    Unbounded,
    #[error("{kind} boundaries are only supported in {dim}D")]
    WrongDimension { kind: &'static str, dim: usize },
    #[error("invalid SDF node: {0}")]
    InvalidSdf(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Result of a closest-point query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryQuery {
    pub distance: f64,
    pub closest_point: Vec3,
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub const EMPTY: Aabb = Aabb {
        min: Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
        max: Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
    };
    pub const EVERYTHING: Aabb = Aabb {
        min: Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        max: Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
    };

    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn from_points(points: &[Vec3]) -> Self {
        points.iter().fold(Self::EMPTY, |b, &p| b.grow(p))
    }

    pub fn grow(self, p: Vec3) -> Self {
        Self::new(self.min.min(p), self.max.max(p))
    }

    pub fn union(self, o: Self) -> Self {
        Self::new(self.min.min(o.min), self.max.max(o.max))
    }

    pub fn intersection(self, o: Self) -> Self {
        Self::new(self.min.max(o.min), self.max.min(o.max))
    }

    pub fn expand(self, r: f64) -> Self {
        Self::new(self.min - Vec3::splat(r), self.max + Vec3::splat(r))
    }

    pub fn centroid(self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(self) -> Vec3 {
        self.max - self.min
    }

    pub fn is_finite(self) -> bool {
        self.min.is_finite() && self.max.is_finite()
    }

    pub fn contains(self, p: Vec3) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y && p.z >= self.min.z && p.z <= self.max.z
    }

    /// Squared distance from `p` to the box (0 inside).
    pub fn distance2(self, p: Vec3) -> f64 {
        let d = (self.min - p).max(p - self.max).max(Vec3::ZERO);
        d.norm2()
    }

    /// Slab test: does the ray `o + t d`, `t ≥ 0`, hit the box?
    fn ray_hits(self, o: Vec3, inv_d: Vec3) -> bool {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let (mut ta, mut tb) = ((self.min[a] - o[a]) * inv_d[a], (self.max[a] - o[a]) * inv_d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            // NaN from 0·∞ means the ray lies in the slab plane; treat as overlap
            if !ta.is_nan() {
                t0 = t0.max(ta);
            }
            if !tb.is_nan() {
                t1 = t1.min(tb);
            }
        }
        t0 <= t1
    }

    /// Corners of the box (8 in 3D).
    fn corners(self) -> [Vec3; 8] {
        let mut out = [Vec3::ZERO; 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = Vec3::new(
                if i & 1 == 0 { self.min.x } else { self.max.x },
                if i & 2 == 0 { self.min.y } else { self.max.y },
                if i & 4 == 0 { self.min.z } else { self.max.z },
            );
        }
        out
    }
}

// ---------------------------------------------------------------------------
// signed distance trees

/// Declarative SDF node, as written in scene files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sdf {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    Box {
        center: Vec3,
        half_extents: Vec3,
    },
    /// Half-space `normal · x ≤ offset`.
    Plane {
        normal: Vec3,
        offset: f64,
    },
    Union {
        children: Vec<Sdf>,
    },
    Intersection {
        children: Vec<Sdf>,
    },
    Difference {
        base: Box<Sdf>,
        subtract: Box<Sdf>,
    },
    SmoothUnion {
        a: Box<Sdf>,
        b: Box<Sdf>,
        blend: f64,
    },
    /// Rigid motion: rotate the child by `angle` radians about `axis`, then
    /// translate. In 2D only rotation about the z axis is meaningful.
    Transform {
        #[serde(default)]
        translation: Vec3,
        #[serde(default = "default_axis")]
        axis: Vec3,
        #[serde(default)]
        angle: f64,
        child: Box<Sdf>,
    },
}

fn default_axis() -> Vec3 {
    Vec3::new(0.0, 0.0, 1.0)
}

impl Sdf {
    pub fn sphere(center: Vec3, radius: f64) -> Self {
        Sdf::Sphere { center, radius }
    }

    pub fn cuboid(center: Vec3, half_extents: Vec3) -> Self {
        Sdf::Box { center, half_extents }
    }
}

#[derive(Debug, Clone)]
enum SdfNode {
    Sphere(Vec3, f64),
    Box(Vec3, Vec3),
    Plane(Vec3, f64),
    Union(Vec<SdfNode>),
    Intersection(Vec<SdfNode>),
    Difference(Box<SdfNode>, Box<SdfNode>),
    SmoothUnion(Box<SdfNode>, Box<SdfNode>, f64),
    /// rotation rows, translation
    Transform([Vec3; 3], Vec3, Box<SdfNode>),
}

fn rotation_matrix(axis: Vec3, angle: f64) -> [Vec3; 3] {
    let k = axis.normalized();
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        Vec3::new(c + k.x * k.x * t, k.x * k.y * t - k.z * s, k.x * k.z * t + k.y * s),
        Vec3::new(k.y * k.x * t + k.z * s, c + k.y * k.y * t, k.y * k.z * t - k.x * s),
        Vec3::new(k.z * k.x * t - k.y * s, k.z * k.y * t + k.x * s, c + k.z * k.z * t),
    ]
}

fn mat_mul(m: &[Vec3; 3], v: Vec3) -> Vec3 {
    Vec3::new(m[0].dot(v), m[1].dot(v), m[2].dot(v))
}

fn mat_mul_transpose(m: &[Vec3; 3], v: Vec3) -> Vec3 {
    m[0] * v.x + m[1] * v.y + m[2] * v.z
}

impl SdfNode {
    fn compile(sdf: &Sdf, dim: Dim) -> Result<Self, GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidSdf(m.to_string()));
        Ok(match sdf {
            Sdf::Sphere { center, radius } => {
                if !(*radius > 0.0) {
                    return bad("sphere radius must be positive");
                }
                SdfNode::Sphere(*center, *radius)
            }
            Sdf::Box { center, half_extents } => {
                let mut h = *half_extents;
                if dim == Dim::Two {
                    h.z = f64::INFINITY;
                }
                if !(h.x > 0.0 && h.y > 0.0 && h.z > 0.0) {
                    return bad("box half extents must be positive");
                }
                SdfNode::Box(*center, h)
            }
            Sdf::Plane { normal, offset } => {
                let n = *normal;
                if !(n.norm() > 0.0) {
                    return bad("plane normal must be nonzero");
                }
                SdfNode::Plane(n.normalized(), offset / n.norm())
            }
            Sdf::Union { children } | Sdf::Intersection { children } => {
                if children.is_empty() {
                    return bad("CSG node without children");
                }
                let c = children.iter().map(|c| Self::compile(c, dim)).collect::<Result<Vec<_>, _>>()?;
                if matches!(sdf, Sdf::Union { .. }) {
                    SdfNode::Union(c)
                } else {
                    SdfNode::Intersection(c)
                }
            }
            Sdf::Difference { base, subtract } => {
                SdfNode::Difference(Box::new(Self::compile(base, dim)?), Box::new(Self::compile(subtract, dim)?))
            }
            Sdf::SmoothUnion { a, b, blend } => {
                if !(*blend > 0.0) {
                    return bad("smooth union blend must be positive");
                }
                SdfNode::SmoothUnion(Box::new(Self::compile(a, dim)?), Box::new(Self::compile(b, dim)?), *blend)
            }
            Sdf::Transform {
                translation,
                axis,
                angle,
                child,
            } => {
                let axis = if dim == Dim::Two { default_axis() } else { *axis };
                if !(axis.norm() > 0.0) {
                    return bad("rotation axis must be nonzero");
                }
                let mut t = *translation;
                if dim == Dim::Two {
                    t.z = 0.0;
                }
                SdfNode::Transform(rotation_matrix(axis, *angle), t, Box::new(Self::compile(child, dim)?))
            }
        })
    }

    fn eval(&self, p: Vec3) -> f64 {
        match self {
            SdfNode::Sphere(c, r) => (p - *c).norm() - r,
            SdfNode::Box(c, h) => {
                let q = (p - *c).abs() - *h;
                q.max(Vec3::ZERO).norm() + q.max_element().min(0.0)
            }
            SdfNode::Plane(n, o) => n.dot(p) - o,
            SdfNode::Union(c) => c.iter().map(|n| n.eval(p)).fold(f64::INFINITY, f64::min),
            SdfNode::Intersection(c) => c.iter().map(|n| n.eval(p)).fold(f64::NEG_INFINITY, f64::max),
            SdfNode::Difference(a, b) => a.eval(p).max(-b.eval(p)),
            SdfNode::SmoothUnion(a, b, k) => {
                let (da, db) = (a.eval(p), b.eval(p));
                let h = (k - (da - db).abs()).max(0.0) / k;
                da.min(db) - h * h * k * 0.25
            }
            SdfNode::Transform(rot, t, child) => child.eval(mat_mul_transpose(rot, p - *t)),
        }
    }

    fn bounds(&self) -> Aabb {
        match self {
            SdfNode::Sphere(c, r) => Aabb::new(*c - Vec3::splat(*r), *c + Vec3::splat(*r)),
            SdfNode::Box(c, h) => Aabb::new(*c - *h, *c + *h),
            SdfNode::Plane(..) => Aabb::EVERYTHING,
            SdfNode::Union(c) => c.iter().fold(Aabb::EMPTY, |b, n| b.union(n.bounds())),
            SdfNode::Intersection(c) => c.iter().fold(Aabb::EVERYTHING, |b, n| b.intersection(n.bounds())),
            SdfNode::Difference(a, _) => a.bounds(),
            SdfNode::SmoothUnion(a, b, k) => a.bounds().union(b.bounds()).expand(*k),
            SdfNode::Transform(rot, t, child) => {
                let mut b = child.bounds();
                // z-invariant child (2D box): rotations are about z there
                let z_free = b.min.z == f64::NEG_INFINITY && b.max.z == f64::INFINITY;
                if z_free {
                    b.min.z = 0.0;
                    b.max.z = 0.0;
                }
                if !b.is_finite() {
                    return Aabb::EVERYTHING;
                }
                let mut out = Aabb::from_points(&b.corners().map(|c| mat_mul(rot, c) + *t));
                if z_free {
                    out.min.z = f64::NEG_INFINITY;
                    out.max.z = f64::INFINITY;
                }
                out
            }
        }
    }
}

// ---------------------------------------------------------------------------
// discrete boundaries

/// An element of a discrete boundary: a segment in 2D or a triangle in 3D.
trait Element: Sync + Send {
    fn bounds(&self) -> Aabb;
    fn closest_point(&self, p: Vec3) -> Vec3;
    /// Does the ray `o + t d` with `t > 0` cross the element?
    fn ray_crosses(&self, o: Vec3, d: Vec3) -> bool;
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: Vec3,
    b: Vec3,
}

impl Element for Segment {
    fn bounds(&self) -> Aabb {
        Aabb::from_points(&[self.a, self.b])
    }

    fn closest_point(&self, p: Vec3) -> Vec3 {
        let ab = self.b - self.a;
        let len2 = ab.norm2();
        if len2 == 0.0 {
            return self.a;
        }
        let t = ((p - self.a).dot(ab) / len2).clamp(0.0, 1.0);
        self.a + ab * t
    }

    fn ray_crosses(&self, o: Vec3, d: Vec3) -> bool {
        // solve o + t d = a + s (b − a) in the plane
        let e = self.b - self.a;
        let den = d.x * e.y - d.y * e.x;
        if den == 0.0 {
            return false;
        }
        let w = self.a - o;
        let t = (w.x * e.y - w.y * e.x) / den;
        let s = (w.x * d.y - w.y * d.x) / den;
        t > 0.0 && (0.0..1.0).contains(&s)
    }
}

#[derive(Debug, Clone, Copy)]
struct Triangle {
    a: Vec3,
    b: Vec3,
    c: Vec3,
}

impl Element for Triangle {
    fn bounds(&self) -> Aabb {
        Aabb::from_points(&[self.a, self.b, self.c])
    }

    // Ericson, Real-Time Collision Detection §5.1.5
    fn closest_point(&self, p: Vec3) -> Vec3 {
        let (a, b, c) = (self.a, self.b, self.c);
        let ab = b - a;
        let ac = c - a;
        let ap = p - a;
        let d1 = ab.dot(ap);
        let d2 = ac.dot(ap);
        if d1 <= 0.0 && d2 <= 0.0 {
            return a;
        }
        let bp = p - b;
        let d3 = ab.dot(bp);
        let d4 = ac.dot(bp);
        if d3 >= 0.0 && d4 <= d3 {
            return b;
        }
        let vc = d1 * d4 - d3 * d2;
        if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
            return a + ab * (d1 / (d1 - d3));
        }
        let cp = p - c;
        let d5 = ab.dot(cp);
        let d6 = ac.dot(cp);
        if d6 >= 0.0 && d5 <= d6 {
            return c;
        }
        let vb = d5 * d2 - d1 * d6;
        if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
            return a + ac * (d2 / (d2 - d6));
        }
        let va = d3 * d6 - d5 * d4;
        if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
            return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
        }
        let denom = 1.0 / (va + vb + vc);
        a + ab * (vb * denom) + ac * (vc * denom)
    }

    // Möller–Trumbore
    fn ray_crosses(&self, o: Vec3, d: Vec3) -> bool {
        let e1 = self.b - self.a;
        let e2 = self.c - self.a;
        let pv = d.cross(e2);
        let det = e1.dot(pv);
        if det.abs() < 1e-300 {
            return false;
        }
        let inv = 1.0 / det;
        let tv = o - self.a;
        let u = tv.dot(pv) * inv;
        if !(0.0..=1.0).contains(&u) {
            return false;
        }
        let qv = tv.cross(e1);
        let v = d.dot(qv) * inv;
        if v < 0.0 || u + v > 1.0 {
            return false;
        }
        e2.dot(qv) * inv > 0.0
    }
}

#[derive(Debug, Clone, Copy)]
struct BvhNode {
    bounds: Aabb,
    /// leaf: first element index; interior: index of the right child
    offset: u32,
    /// number of elements in a leaf, 0 for interior nodes
    count: u32,
}

const LEAF_SIZE: usize = 4;

/// Bounding volume hierarchy over boundary elements. The left child of an
/// interior node is stored right after it.
#[derive(Debug, Clone)]
struct Bvh<E> {
    nodes: Vec<BvhNode>,
    elements: Vec<E>,
}

impl<E: Element + Copy> Bvh<E> {
    fn build(mut elements: Vec<E>) -> Self {
        let mut nodes = Vec::with_capacity(2 * elements.len() / LEAF_SIZE + 1);
        if !elements.is_empty() {
            let n = elements.len();
            Self::build_range(&mut nodes, &mut elements, 0, n);
        }
        Self { nodes, elements }
    }

    fn build_range(nodes: &mut Vec<BvhNode>, el: &mut [E], start: usize, end: usize) -> usize {
        let bounds = el[start..end].iter().fold(Aabb::EMPTY, |b, e| b.union(e.bounds()));
        let idx = nodes.len();
        nodes.push(BvhNode {
            bounds,
            offset: start as u32,
            count: (end - start) as u32,
        });
        if end - start <= LEAF_SIZE {
            return idx;
        }
        let cb = el[start..end].iter().fold(Aabb::EMPTY, |b, e| b.grow(e.bounds().centroid()));
        let ext = cb.extent();
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        el[start..end].select_nth_unstable_by(mid - start, |a, b| {
            a.bounds().centroid()[axis].total_cmp(&b.bounds().centroid()[axis])
        });
        Self::build_range(nodes, el, start, mid);
        let right = Self::build_range(nodes, el, mid, end);
        nodes[idx].offset = right as u32;
        nodes[idx].count = 0;
        idx
    }

    /// Closest point over all elements, with the index of the element.
    fn closest(&self, p: Vec3) -> (f64, Vec3, usize) {
        let mut best = (f64::INFINITY, p, usize::MAX);
        let mut stack = [0usize; 64];
        let mut sp = 1;
        while sp > 0 {
            sp -= 1;
            let node = self.nodes[stack[sp]];
            if node.bounds.distance2(p) >= best.0 {
                continue;
            }
            if node.count > 0 {
                let first = node.offset as usize;
                for (i, e) in self.elements[first..first + node.count as usize].iter().enumerate() {
                    let q = e.closest_point(p);
                    let d2 = (q - p).norm2();
                    if d2 < best.0 {
                        best = (d2, q, first + i);
                    }
                }
            } else {
                let (l, r) = (stack[sp] + 1, node.offset as usize);
                // visit the nearer child first
                let (dl, dr) = (self.nodes[l].bounds.distance2(p), self.nodes[r].bounds.distance2(p));
                let (near, far) = if dl <= dr { (l, r) } else { (r, l) };
                stack[sp] = far;
                stack[sp + 1] = near;
                sp += 2;
            }
        }
        (best.0.sqrt(), best.1, best.2)
    }

    fn brute_force_closest(&self, p: Vec3) -> (f64, Vec3, usize) {
        let mut best = (f64::INFINITY, p, usize::MAX);
        for (i, e) in self.elements.iter().enumerate() {
            let q = e.closest_point(p);
            let d2 = (q - p).norm2();
            if d2 < best.0 {
                best = (d2, q, i);
            }
        }
        (best.0.sqrt(), best.1, best.2)
    }

    fn count_crossings(&self, o: Vec3, d: Vec3) -> usize {
        let inv = Vec3::new(1.0 / d.x, 1.0 / d.y, 1.0 / d.z);
        let mut hits = 0;
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let node = self.nodes[i];
            if !node.bounds.ray_hits(o, inv) {
                continue;
            }
            if node.count > 0 {
                let first = node.offset as usize;
                hits += self.elements[first..first + node.count as usize]
                    .iter()
                    .filter(|e| e.ray_crosses(o, d))
                    .count();
            } else {
                stack.push(i + 1);
                stack.push(node.offset as usize);
            }
        }
        hits
    }

    fn bounds(&self) -> Aabb {
        self.nodes.first().map_or(Aabb::EMPTY, |n| n.bounds)
    }
}

// ---------------------------------------------------------------------------
// file formats

/// Parses one or more `POLYLINE n` blocks, each followed by `n` rows `x y`.
/// Every polyline is closed: a segment joins the last vertex to the first
/// unless they coincide.
pub fn parse_polylines(text: &str, path: &str) -> Result<Vec<Vec<Vec3>>, GeometryError> {
    let err = |line: usize, message: String| GeometryError::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut out = Vec::new();
    while let Some((ln, header)) = lines.next() {
        let mut parts = header.split_whitespace();
        if parts.next() != Some("POLYLINE") {
            return Err(err(ln, format!("expected `POLYLINE n`, found `{header}`")));
        }
        let n: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(ln, "missing or invalid vertex count".into()))?;
        if n < 2 {
            return Err(err(ln, "a polyline needs at least two vertices".into()));
        }
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, row) = lines.next().ok_or_else(|| err(ln, "unexpected end of file".into()))?;
            let v: Vec<f64> = row
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| err(ln, format!("bad coordinate: {e}")))?;
            if v.len() != 2 || !v.iter().all(|c| c.is_finite()) {
                return Err(err(ln, format!("expected two finite coordinates, found `{row}`")));
            }
            pts.push(Vec3::new2(v[0], v[1]));
        }
        out.push(pts);
    }
    if out.is_empty() {
        return Err(GeometryError::Empty);
    }
    Ok(out)
}

/// Parses vertices and triangular faces of an ASCII OBJ file.
pub fn parse_obj(text: &str, path: &str) -> Result<(Vec<Vec3>, Vec<[usize; 3]>), GeometryError> {
    let err = |line: usize, message: String| GeometryError::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let c: Vec<f64> = parts
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(ln, format!("bad vertex: {e}")))?;
                if c.len() != 3 {
                    return Err(err(ln, "vertex needs three coordinates".into()));
                }
                verts.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx = parts
                    .map(|tok| {
                        let first = tok.split('/').next().unwrap_or("");
                        let k: i64 = first.parse().map_err(|_| err(ln, format!("bad face index `{tok}`")))?;
                        let resolved = if k < 0 { verts.len() as i64 + k } else { k - 1 };
                        if resolved < 0 || resolved as usize >= verts.len() {
                            return Err(err(ln, format!("face index {k} out of range")));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if idx.len() != 3 {
                    return Err(err(ln, format!("only triangles are supported, found a {}-gon", idx.len())));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    if faces.is_empty() {
        return Err(GeometryError::Empty);
    }
    Ok((verts, faces))
}

fn read(path: &Path) -> Result<String, GeometryError> {
    fs::read_to_string(path).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// scene

#[derive(Debug, Clone)]
enum Boundary {
    Sdf(SdfNode),
    Polylines(Bvh<Segment>),
    Mesh(Bvh<Triangle>),
}

/// Ray directions for the inside test; deliberately not axis aligned.
const PARITY_RAYS_3D: [Vec3; 3] = [
    Vec3::new(0.577_215_66, 0.618_033_99, 0.533_760_5),
    Vec3::new(-0.312_4, 0.684_9, -0.658_7),
    Vec3::new(0.713_2, -0.266_1, -0.648_5),
];
const PARITY_RAYS_2D: [Vec3; 3] = [
    Vec3::new(0.868_588_96, 0.495_546_32, 0.0),
    Vec3::new(-0.411_334_93, 0.911_490_61, 0.0),
    Vec3::new(-0.292_371_7, -0.956_304_76, 0.0),
];

/// A domain `Ω` with its boundary representation and ε-shell width.
#[derive(Debug, Clone)]
pub struct Scene {
    dim: Dim,
    boundary: Boundary,
    epsilon: f64,
    bounds: Aabb,
}

impl Scene {
    /// Scene bounded by the negative region of a signed distance tree.
    /// `bounds` overrides the box derived from the tree (needed for planes).
    pub fn from_sdf(dim: Dim, sdf: &Sdf, epsilon: f64, bounds: Option<Aabb>) -> Result<Self, GeometryError> {
        let node = SdfNode::compile(sdf, dim)?;
        let mut b = bounds.unwrap_or_else(|| node.bounds());
        if dim == Dim::Two {
            b.min.z = 0.0;
            b.max.z = 0.0;
        }
        if !b.is_finite() {
            return Err(GeometryError::Unbounded);
        }
        Self::finish(dim, Boundary::Sdf(node), epsilon, b)
    }

    /// 2D scene bounded by closed polylines.
    pub fn from_polylines(polylines: &[Vec<Vec3>], epsilon: f64) -> Result<Self, GeometryError> {
        let mut segs = Vec::new();
        for pl in polylines {
            for w in pl.windows(2) {
                segs.push(Segment { a: w[0], b: w[1] });
            }
            let (first, last) = (pl[0], pl[pl.len() - 1]);
            if first != last {
                segs.push(Segment { a: last, b: first });
            }
        }
        if segs.is_empty() {
            return Err(GeometryError::Empty);
        }
        let bvh = Bvh::build(segs);
        let b = bvh.bounds();
        Self::finish(Dim::Two, Boundary::Polylines(bvh), epsilon, b)
    }

    pub fn from_polyline_file(path: &Path, epsilon: f64) -> Result<Self, GeometryError> {
        let text = read(path)?;
        Self::from_polylines(&parse_polylines(&text, &path.display().to_string())?, epsilon)
    }

    /// 3D scene bounded by a closed triangle mesh.
    pub fn from_mesh(vertices: &[Vec3], faces: &[[usize; 3]], epsilon: f64) -> Result<Self, GeometryError> {
        let tris: Vec<Triangle> = faces
            .iter()
            .map(|f| Triangle {
                a: vertices[f[0]],
                b: vertices[f[1]],
                c: vertices[f[2]],
            })
            .collect();
        if tris.is_empty() {
            return Err(GeometryError::Empty);
        }
        let bvh = Bvh::build(tris);
        let b = bvh.bounds();
        Self::finish(Dim::Three, Boundary::Mesh(bvh), epsilon, b)
    }

    pub fn from_obj_file(path: &Path, epsilon: f64) -> Result<Self, GeometryError> {
        let text = read(path)?;
        let (v, f) = parse_obj(&text, &path.display().to_string())?;
        Self::from_mesh(&v, &f, epsilon)
    }

    fn finish(dim: Dim, boundary: Boundary, epsilon: f64, bounds: Aabb) -> Result<Self, GeometryError> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(GeometryError::InvalidEpsilon(epsilon));
        }
        Ok(Self {
            dim,
            boundary,
            epsilon,
            bounds,
        })
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self, GeometryError> {
        let mut s = self.clone();
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(GeometryError::InvalidEpsilon(epsilon));
        }
        s.epsilon = epsilon;
        Ok(s)
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    /// Half the diagonal of the bounding box; the length scale of the scene.
    pub fn scale(&self) -> f64 {
        0.5 * self.bounds.extent().norm()
    }

    /// Signed distance for SDF scenes; for discrete boundaries the unsigned
    /// distance with the sign from the parity test.
    pub fn signed_distance(&self, x: Vec3) -> f64 {
        match &self.boundary {
            Boundary::Sdf(node) => node.eval(x),
            _ => {
                let d = self.distance(x);
                if self.contains(x) {
                    -d
                } else {
                    d
                }
            }
        }
    }

    /// Is `x` strictly inside the domain?
    pub fn contains(&self, x: Vec3) -> bool {
        match &self.boundary {
            Boundary::Sdf(node) => node.eval(x) < 0.0,
            Boundary::Polylines(bvh) => majority_odd(&PARITY_RAYS_2D, |d| bvh.count_crossings(x, d)),
            Boundary::Mesh(bvh) => majority_odd(&PARITY_RAYS_3D, |d| bvh.count_crossings(x, d)),
        }
    }

    /// Radius of an empty ball around an interior point. Exact for discrete
    /// boundaries, a conservative lower bound for SDF trees. Does not check
    /// that `x` is inside.
    pub fn distance(&self, x: Vec3) -> f64 {
        match &self.boundary {
            Boundary::Sdf(node) => node.eval(x).abs(),
            Boundary::Polylines(bvh) => bvh.closest(x).0,
            Boundary::Mesh(bvh) => bvh.closest(x).0,
        }
    }

    /// Closest boundary point to `x` (projection for SDF trees).
    pub fn closest_point(&self, x: Vec3) -> Vec3 {
        match &self.boundary {
            Boundary::Sdf(node) => self.project(node, x),
            Boundary::Polylines(bvh) => bvh.closest(x).1,
            Boundary::Mesh(bvh) => bvh.closest(x).1,
        }
    }

    fn sdf_gradient(&self, node: &SdfNode, x: Vec3) -> Vec3 {
        let h = 1e-5 * self.scale().max(1e-12);
        let mut g = Vec3::ZERO;
        for a in 0..self.dim.get() {
            let e = Vec3::axis(a) * h;
            g[a] = (node.eval(x + e) - node.eval(x - e)) / (2.0 * h);
        }
        g
    }

    fn project(&self, node: &SdfNode, x: Vec3) -> Vec3 {
        let tol = 1e-12 * self.scale();
        let mut p = x;
        for _ in 0..16 {
            let s = node.eval(p);
            if s.abs() <= tol {
                break;
            }
            let g = self.sdf_gradient(node, p);
            let n2 = g.norm2();
            if n2 == 0.0 {
                break;
            }
            p -= g * (s / n2);
        }
        p
    }

    /// Distance and closest point for a point inside the domain.
    pub fn distance_to_boundary(&self, x: Vec3) -> Result<BoundaryQuery, GeometryError> {
        let sd = self.signed_distance(x);
        if !(sd < 0.0) {
            return Err(GeometryError::Outside {
                point: x,
                signed_distance: sd,
            });
        }
        Ok(BoundaryQuery {
            distance: -sd,
            closest_point: self.closest_point(x),
        })
    }

    /// Whether `x` lies in the ε-shell, with the closest boundary point.
    pub fn in_epsilon_shell(&self, x: Vec3) -> Result<(bool, BoundaryQuery), GeometryError> {
        let q = self.distance_to_boundary(x)?;
        Ok((q.distance < self.epsilon, q))
    }

    /// Closest distance and point by BVH and by brute force, for testing.
    #[doc(hidden)]
    pub fn closest_both(&self, x: Vec3) -> Option<((f64, Vec3), (f64, Vec3))> {
        match &self.boundary {
            Boundary::Sdf(_) => None,
            Boundary::Polylines(b) => {
                let (f, s) = (b.closest(x), b.brute_force_closest(x));
                Some(((f.0, f.1), (s.0, s.1)))
            }
            Boundary::Mesh(b) => {
                let (f, s) = (b.closest(x), b.brute_force_closest(x));
                Some(((f.0, f.1), (s.0, s.1)))
            }
        }
    }

    /// Number of boundary elements (0 for SDF trees).
    pub fn element_count(&self) -> usize {
        match &self.boundary {
            Boundary::Sdf(_) => 0,
            Boundary::Polylines(b) => b.elements.len(),
            Boundary::Mesh(b) => b.elements.len(),
        }
    }
}

fn majority_odd(rays: &[Vec3; 3], count: impl Fn(Vec3) -> usize) -> bool {
    rays.iter().filter(|&&d| count(d) % 2 == 1).count() >= 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere(dim: Dim, eps: f64) -> Scene {
        Scene::from_sdf(dim, &Sdf::sphere(Vec3::ZERO, 1.0), eps, None).unwrap()
    }

    fn square() -> Vec<Vec<Vec3>> {
        vec![vec![
            Vec3::new2(-1.0, -1.0),
            Vec3::new2(1.0, -1.0),
            Vec3::new2(1.0, 1.0),
            Vec3::new2(-1.0, 1.0),
        ]]
    }

    // icosphere-like UV sphere mesh
    fn sphere_mesh(n_theta: usize, n_phi: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
        let mut v = vec![Vec3::new(0.0, 0.0, 1.0)];
        for i in 1..n_theta {
            let th = std::f64::consts::PI * i as f64 / n_theta as f64;
            for j in 0..n_phi {
                let ph = 2.0 * std::f64::consts::PI * j as f64 / n_phi as f64;
                v.push(Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()));
            }
        }
        v.push(Vec3::new(0.0, 0.0, -1.0));
        let ring = |i: usize, j: usize| 1 + (i - 1) * n_phi + j % n_phi;
        let mut f = Vec::new();
        for j in 0..n_phi {
            f.push([0, ring(1, j), ring(1, j + 1)]);
        }
        for i in 1..n_theta - 1 {
            for j in 0..n_phi {
                f.push([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)]);
                f.push([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)]);
            }
        }
        let last = v.len() - 1;
        for j in 0..n_phi {
            f.push([last, ring(n_theta - 1, j + 1), ring(n_theta - 1, j)]);
        }
        (v, f)
    }

    #[test]
    fn sphere_query() {
        let s = unit_sphere(Dim::Three, 1e-3);
        let q = s.distance_to_boundary(Vec3::new(0.25, 0.0, 0.0)).unwrap();
        assert!((q.distance - 0.75).abs() < 1e-12);
        assert!((q.closest_point - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-8);
        assert!(s.distance_to_boundary(Vec3::new(1.5, 0.0, 0.0)).is_err());
    }

    #[test]
    fn union_of_spheres() {
        let sdf = Sdf::Union {
            children: vec![Sdf::sphere(Vec3::new(2.0, 0.0, 0.0), 1.0), Sdf::sphere(Vec3::new(-2.0, 0.0, 0.0), 1.0)],
        };
        let s = Scene::from_sdf(Dim::Three, &sdf, 1e-3, None).unwrap();
        // the origin is outside both spheres, one unit from each surface
        assert!((s.distance(Vec3::ZERO) - 1.0).abs() < 1e-12);
        assert!(s.distance_to_boundary(Vec3::ZERO).is_err());
        assert!(s.distance_to_boundary(Vec3::new(2.5, 0.0, 0.0)).is_ok());
    }

    #[test]
    fn square_polyline() {
        let s = Scene::from_polylines(&square(), 1e-3).unwrap();
        let q = s.distance_to_boundary(Vec3::new2(0.9, 0.0)).unwrap();
        assert!((q.distance - 0.1).abs() < 1e-12);
        assert!((q.closest_point - Vec3::new2(1.0, 0.0)).norm() < 1e-12);
        assert!(s.distance_to_boundary(Vec3::new2(1.2, 0.3)).is_err());
    }

    #[test]
    fn epsilon_shell() {
        let s = unit_sphere(Dim::Two, 0.01);
        let (hit, q) = s.in_epsilon_shell(Vec3::new2(0.995, 0.0)).unwrap();
        assert!(hit);
        assert!((q.closest_point - Vec3::new2(1.0, 0.0)).norm() < 1e-8);
        assert!(!s.in_epsilon_shell(Vec3::new2(0.5, 0.0)).unwrap().0);
        // a box side makes d exactly representable
        let b = Scene::from_sdf(Dim::Two, &Sdf::cuboid(Vec3::ZERO, Vec3::new2(1.0, 1.0)), 0.25, None).unwrap();
        assert_eq!(b.distance(Vec3::new2(0.75, 0.0)), 0.25);
        assert!(!b.in_epsilon_shell(Vec3::new2(0.75, 0.0)).unwrap().0);
    }

    #[test]
    fn two_dimensional_box_ignores_z() {
        let b = Scene::from_sdf(Dim::Two, &Sdf::cuboid(Vec3::ZERO, Vec3::new2(2.0, 1.0)), 1e-3, None).unwrap();
        assert!((b.distance(Vec3::new2(0.0, 0.5)) - 0.5).abs() < 1e-15);
        assert!((b.distance(Vec3::new2(1.5, 0.0)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bvh_matches_brute_force_polylines() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // a wobbly star with 800 segments
        let n = 800;
        let pts: Vec<Vec3> = (0..n)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let r = 1.0 + 0.3 * (7.0 * t).sin() + 0.05 * rng.random::<f64>();
                Vec3::new2(r * t.cos(), r * t.sin())
            })
            .collect();
        let s = Scene::from_polylines(&[pts], 1e-3).unwrap();
        for _ in 0..100 {
            let x = Vec3::new2(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let ((d1, p1), (d2, p2)) = s.closest_both(x).unwrap();
            assert!((d1 - d2).abs() < 1e-12);
            assert!((p1 - p2).norm() < 1e-9);
        }
    }

    #[test]
    fn bvh_matches_brute_force_mesh() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (v, f) = sphere_mesh(20, 25);
        assert!(f.len() <= 1000);
        let s = Scene::from_mesh(&v, &f, 1e-3).unwrap();
        for _ in 0..100 {
            let x = Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let ((d1, p1), (d2, p2)) = s.closest_both(x).unwrap();
            assert!((d1 - d2).abs() < 1e-12);
            assert!((p1 - p2).norm() < 1e-9);
        }
    }

    #[test]
    fn mesh_inside_test() {
        let (v, f) = sphere_mesh(16, 24);
        let s = Scene::from_mesh(&v, &f, 1e-3).unwrap();
        assert!(s.contains(Vec3::ZERO));
        assert!(s.contains(Vec3::new(0.5, -0.3, 0.2)));
        assert!(!s.contains(Vec3::new(1.2, 0.0, 0.0)));
        assert!(!s.contains(Vec3::new(0.0, 3.0, -1.0)));
        // facets sit inside the unit sphere by at most 1 - cos(π/16)
        let q = s.distance_to_boundary(Vec3::new(0.0, 0.0, 0.5)).unwrap();
        assert!(q.distance <= 0.5 && q.distance > 0.5 - 0.02);
        assert!((s.closest_point(Vec3::new(0.0, 0.0, 0.5)) - Vec3::new(0.0, 0.0, 0.5)).norm() - q.distance < 1e-12);
    }

    #[test]
    fn polyline_with_hole() {
        let outer = square()[0].clone();
        let hole: Vec<Vec3> = (0..32)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / 32.0;
                Vec3::new2(0.3 * t.cos(), 0.3 * t.sin())
            })
            .collect();
        let s = Scene::from_polylines(&[outer, hole], 1e-3).unwrap();
        assert!(!s.contains(Vec3::ZERO));
        assert!(s.contains(Vec3::new2(0.6, 0.6)));
    }

    #[test]
    fn csg_balls_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trees = [
            Sdf::Difference {
                base: Box::new(Sdf::cuboid(Vec3::ZERO, Vec3::splat(1.0))),
                subtract: Box::new(Sdf::sphere(Vec3::new(0.5, 0.5, 0.0), 0.6)),
            },
            Sdf::Intersection {
                children: vec![Sdf::sphere(Vec3::ZERO, 1.0), Sdf::Plane { normal: Vec3::new(1.0, 1.0, 0.0), offset: 0.2 }],
            },
            Sdf::SmoothUnion {
                a: Box::new(Sdf::sphere(Vec3::new(-0.5, 0.0, 0.0), 0.6)),
                b: Box::new(Sdf::cuboid(Vec3::new(0.5, 0.0, 0.0), Vec3::new(0.4, 0.4, 0.4))),
                blend: 0.3,
            },
            Sdf::Transform {
                translation: Vec3::new(0.1, 0.2, 0.0),
                axis: Vec3::new(1.0, 1.0, 0.0),
                angle: 0.7,
                child: Box::new(Sdf::cuboid(Vec3::ZERO, Vec3::new(1.0, 0.5, 0.3))),
            },
        ];
        for tree in &trees {
            for dim in [Dim::Two, Dim::Three] {
                let s = Scene::from_sdf(dim, tree, 1e-4, None).unwrap();
                let b = s.bounds();
                let mut tested = 0;
                while tested < 200 {
                    let mut x = Vec3::ZERO;
                    for a in 0..dim.get() {
                        x[a] = rng.random_range(b.min[a]..b.max[a]);
                    }
                    if !s.contains(x) {
                        continue;
                    }
                    tested += 1;
                    let r = s.distance(x);
                    for _ in 0..20 {
                        let dir = crate::kernels::sample_unit_direction(dim, &mut rng);
                        let y = x + dir * (r * (1.0 - 1e-9));
                        assert!(s.signed_distance(y) <= 1e-12, "{tree:?}");
                    }
                    // projection lands on the zero set
                    let p = s.closest_point(x);
                    assert!(s.signed_distance(p).abs() < 1e-6, "{tree:?} {x:?} {}", s.signed_distance(p));
                }
            }
        }
    }

    #[test]
    fn parse_formats() {
        let pl = parse_polylines("# square\nPOLYLINE 3\n0 0\n1 0\n0 1\n", "t").unwrap();
        assert_eq!(pl.len(), 1);
        assert_eq!(pl[0][2], Vec3::new2(0.0, 1.0));
        assert!(parse_polylines("POLYLINE 3\n0 0\n1 0\n", "t").is_err());
        assert!(parse_polylines("POLY 3\n", "t").is_err());
        let (v, f) = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1 2/2 -1\n", "t").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(f, vec![[0, 1, 2]]);
        assert!(parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n", "t").is_err());
    }

    #[test]
    fn sdf_json_round_trip() {
        let tree = Sdf::Difference {
            base: Box::new(Sdf::sphere(Vec3::ZERO, 1.0)),
            subtract: Box::new(Sdf::Plane { normal: Vec3::new(0.0, 1.0, 0.0), offset: 0.5 }),
        };
        let s = serde_json::to_string(&tree).unwrap();
        assert_eq!(serde_json::from_str::<Sdf>(&s).unwrap(), tree);
    }

    #[test]
    fn rejects_bad_scenes() {
        assert!(Scene::from_sdf(Dim::Two, &Sdf::sphere(Vec3::ZERO, 1.0), 0.0, None).is_err());
        assert!(Scene::from_sdf(Dim::Two, &Sdf::Plane { normal: Vec3::new2(1.0, 0.0), offset: 0.0 }, 1e-3, None).is_err());
        assert!(Scene::from_sdf(Dim::Two, &Sdf::sphere(Vec3::ZERO, -1.0), 1e-3, None).is_err());
    }
}
