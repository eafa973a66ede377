//! Procedural scenes: a tilted background plane with up to a handful of
//! shapes floating in front of it, rendered with depth- and normal-dependent
//! shading. All geometry lives in normalized image coordinates `[0, 1]²`.

use std::f64::consts::PI;

use rand::Rng as _;

use super::DatasetConfig;
use crate::numerics::Tensor;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Diamond];

    /// Semantic class; 0 is background.
    pub fn class(self) -> usize {
        self as usize + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Relief {
    /// `z0 + gx (x − cx) + gy (y − cy)`.
    Plane { gx: f64, gy: f64 },
    /// `z0 + k ((x − cx)² + (y − cy)²)`: bulges toward the camera.
    Dome { k: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Shape {
    pub kind: ShapeKind,
    cx: f64,
    cy: f64,
    /// Circumradius.
    r: f64,
    theta: f64,
    /// Depth at the center.
    pub z0: f64,
    relief: Relief,
    color: [f64; 3],
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.kind {
            ShapeKind::Disc => dx * dx + dy * dy <= (0.8 * self.r).powi(2),
            ShapeKind::Square => u.abs().max(v.abs()) <= 0.75 * self.r,
            ShapeKind::Diamond => u.abs() + v.abs() <= self.r,
            ShapeKind::Triangle => (0..3).all(|k| {
                let a = -PI / 2.0 + 2.0 * PI * k as f64 / 3.0;
                u * a.cos() + v * a.sin() <= 0.5 * self.r
            }),
        }
    }

    /// Depth and its gradient `(z, ∂z/∂x, ∂z/∂y)`.
    fn depth(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.relief {
            Relief::Plane { gx, gy } => (self.z0 + gx * dx + gy * dy, gx, gy),
            Relief::Dome { k } => (self.z0 + k * (dx * dx + dy * dy), 2.0 * k * dx, 2.0 * k * dy),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Scene {
    /// Painter's order: farthest first, so the closest shape is last.
    pub shapes: Vec<Shape>,
    bg_z: f64,
    bg_gx: f64,
    bg_gy: f64,
    bg_top: [f64; 3],
    bg_bottom: [f64; 3],
}

/// What the camera sees at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Surface {
    /// 0 for background, otherwise 1 + index into `Scene::shapes`.
    pub instance: usize,
    pub class: usize,
    pub z: f64,
    pub dzdx: f64,
    pub dzdy: f64,
}

impl Surface {
    /// `normalize(−∂z/∂x, −∂z/∂y, 1)`.
    pub fn normal(&self) -> [f64; 3] {
        let n = (self.dzdx * self.dzdx + self.dzdy * self.dzdy + 1.0).sqrt();
        [-self.dzdx / n, -self.dzdy / n, 1.0 / n]
    }
}

const PALETTE: [[f64; 3]; 4] = [[0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.25, 0.3, 0.95], [0.9, 0.8, 0.15]];

impl Scene {
    pub fn random(rng: &mut Rng, cfg: &DatasetConfig) -> Self {
        let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
        let kinds = &ShapeKind::ALL[..cfg.classes - 1];
        let mut shapes: Vec<Shape> = (0..count)
            .map(|_| {
                let kind = kinds[rng.gen_range(0..kinds.len())];
                let relief = match kind {
                    ShapeKind::Disc => Relief::Dome {
                        k: rng.gen_range(0.5..2.0),
                    },
                    _ => Relief::Plane {
                        gx: rng.gen_range(-0.3..0.3),
                        gy: rng.gen_range(-0.3..0.3),
                    },
                };
                let base = PALETTE[kind as usize];
                Shape {
                    kind,
                    cx: rng.gen_range(0.2..0.8),
                    cy: rng.gen_range(0.2..0.8),
                    r: rng.gen_range(0.18..0.3),
                    theta: rng.gen_range(0.0..2.0 * PI),
                    z0: rng.gen_range(0.2..0.55),
                    relief,
                    color: base.map(|c| (c + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0)),
                }
            })
            .collect();
        shapes.sort_by(|a, b| b.z0.total_cmp(&a.z0));
        let grey = |rng: &mut Rng| {
            let g = rng.gen_range(0.35..0.6);
            [0; 3].map(|_| g + rng.gen_range(-0.04..0.04))
        };
        Self {
            shapes,
            bg_z: rng.gen_range(0.75..0.85),
            bg_gx: rng.gen_range(-0.15..0.15),
            bg_gy: rng.gen_range(-0.15..0.15),
            bg_top: grey(rng),
            bg_bottom: grey(rng),
        }
    }

    pub fn surface(&self, x: f64, y: f64) -> Surface {
        for (i, s) in self.shapes.iter().enumerate().rev() {
            if s.contains(x, y) {
                let (z, dzdx, dzdy) = s.depth(x, y);
                return Surface {
                    instance: i + 1,
                    class: s.kind.class(),
                    z,
                    dzdx,
                    dzdy,
                };
            }
        }
        Surface {
            instance: 0,
            class: 0,
            z: self.bg_z + self.bg_gx * (x - 0.5) + self.bg_gy * (y - 0.5),
            dzdx: self.bg_gx,
            dzdy: self.bg_gy,
        }
    }

    fn shade(&self, x: f64, y: f64) -> [f64; 3] {
        let s = self.surface(x, y);
        let albedo = match s.instance {
            0 => {
                let t = y.clamp(0.0, 1.0);
                [0, 1, 2].map(|c| (1.0 - t) * self.bg_top[c] + t * self.bg_bottom[c])
            }
            i => self.shapes[i - 1].color,
        };
        let n = s.normal();
        let light = [-0.3, -0.3, 1.0];
        let ln = (0.09 + 0.09 + 1.0f64).sqrt();
        let lambert = ((n[0] * light[0] + n[1] * light[1] + n[2] * light[2]) / ln).max(0.0);
        let f = (1.15 - 0.5 * s.z) * (0.7 + 0.3 * lambert);
        albedo.map(|a| a * f)
    }

    /// `[3 x size x size]` image, 2x2 supersampled, plus Gaussian-ish noise.
    pub fn render(&self, size: usize, noise: &mut Rng) -> Tensor {
        let mut img = vec![0.0; 3 * size * size];
        let inv = 1.0 / size as f64;
        for py in 0..size {
            for px in 0..size {
                let mut acc = [0.0; 3];
                for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    let c = self.shade((px as f64 + ox) * inv, (py as f64 + oy) * inv);
                    for k in 0..3 {
                        acc[k] += 0.25 * c[k];
                    }
                }
                for (k, a) in acc.iter().enumerate() {
                    // Sum of 4 uniforms: mean 0, std 0.02.
                    let e: f64 = (0..4).map(|_| noise.gen_range(-1.0..1.0)).sum::<f64>() * 0.02 * (0.75f64).sqrt();
                    img[(k * size + py) * size + px] = (a + e).clamp(0.0, 1.0);
                }
            }
        }
        Tensor::new([3, size, size], img).expect("image shape")
    }
}

/// Token center `(x, y)` of cell `(row, col)` in a `grid x grid` layout.
pub(crate) fn token_center(row: usize, col: usize, grid: usize) -> (f64, f64) {
    ((col as f64 + 0.5) / grid as f64, (row as f64 + 0.5) / grid as f64)
}

pub(crate) fn scene_rng(seed: u64) -> (Rng, Rng) {
    (rng::rng(rng::derive_str(seed, "scene")), rng::rng(rng::derive_str(seed, "noise")))
}
