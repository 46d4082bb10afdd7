//! Channel position layouts and the distance/target matrices derived from them.
//!
//! Every scheme assigns channel `i` (0-based here) a point in 2-D or 3-D space.
//! Grids live in the unit box, the circle and sphere on the unit circle/sphere.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Grid2d,
    Nested2d,
    Circle,
    Grid3d,
    Nested3d,
    Sphere,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Grid2d,
        Scheme::Nested2d,
        Scheme::Circle,
        Scheme::Grid3d,
        Scheme::Nested3d,
        Scheme::Sphere,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Grid2d => "grid2d",
            Scheme::Nested2d => "nested2d",
            Scheme::Circle => "circle",
            Scheme::Grid3d => "grid3d",
            Scheme::Nested3d => "nested3d",
            Scheme::Sphere => "sphere",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Scheme::Grid2d | Scheme::Nested2d | Scheme::Circle => 2,
            Scheme::Grid3d | Scheme::Nested3d | Scheme::Sphere => 3,
        }
    }

    pub fn layout(self, channels: usize) -> Result<Layout> {
        match self {
            Scheme::Grid2d => make_grid2d(channels),
            Scheme::Nested2d => make_nested2d(channels),
            Scheme::Circle => make_circle(channels),
            Scheme::Grid3d => make_grid3d(channels),
            Scheme::Nested3d => make_nested3d(channels),
            Scheme::Sphere => make_sphere(channels),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL.iter().copied().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Scheme::ALL.iter().map(|k| k.name()).collect();
            Error::invalid(format!("unknown layout scheme `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Ordered channel positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    scheme: Option<Scheme>,
    channels: usize,
    dim: usize,
    coords: Vec<f64>,
}

impl Layout {
    /// Explicit positions, `dim` coordinates per channel.
    pub fn from_positions(dim: usize, coords: Vec<f64>) -> Result<Layout> {
        if !(dim == 2 || dim == 3) || !coords.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!("{} coordinates do not form {dim}-D points", coords.len())));
        }
        let channels = coords.len() / dim;
        check_count(channels)?;
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite channel position"));
        }
        Ok(Layout { scheme: None, channels, dim, coords })
    }

    /// `None` for layouts built from explicit positions.
    pub fn scheme(&self) -> Option<Scheme> {
        self.scheme
    }

    pub fn channel_count(&self) -> usize {
        self.channels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn position(&self, channel: usize) -> &[f64] {
        &self.coords[channel * self.dim..(channel + 1) * self.dim]
    }

    pub fn positions(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    /// Reorders channels: channel `i` of the result sits where channel `perm[i]` sat.
    pub fn permuted(&self, perm: &[usize]) -> Layout {
        let coords = perm.iter().flat_map(|&p| self.position(p).iter().copied()).collect();
        Layout { coords, ..self.clone() }
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.position(i)
            .iter()
            .zip(self.position(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// CSV with header `channel,x,y` (or `channel,x,y,z`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(if self.dim == 2 { "channel,x,y\n" } else { "channel,x,y,z\n" });
        for (i, p) in self.positions().enumerate() {
            out.push_str(&i.to_string());
            for v in p {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let positions: Vec<&[f64]> = self.positions().collect();
        serde_json::json!({
            "scheme": self.scheme.map_or("custom", Scheme::name),
            "channels": self.channels,
            "dim": self.dim,
            "positions": positions,
        })
    }
}

fn check_count(channels: usize) -> Result<()> {
    if channels < 2 {
        return Err(Error::invalid(format!("a layout needs at least 2 channels, got {channels}")));
    }
    Ok(())
}

/// Smallest `n` with `n^p >= c`.
fn int_root_ceil(c: usize, p: u32) -> usize {
    let mut n = (c as f64).powf(1.0 / p as f64).round().max(1.0) as usize;
    while n.pow(p) < c {
        n += 1;
    }
    while n > 1 && (n - 1).pow(p) >= c {
        n -= 1;
    }
    n
}

/// Regular `N x N` grid, `N = ceil(sqrt(C))`, row-major fill.
pub fn make_grid2d(channels: usize) -> Result<Layout> {
    check_count(channels)?;
    let n = int_root_ceil(channels, 2);
    let step = n as f64;
    let coords = (0..channels).flat_map(|i| [(i % n) as f64 / step, (i / n) as f64 / step]).collect();
    Ok(Layout { scheme: Some(Scheme::Grid2d), channels, dim: 2, coords })
}

/// Evenly spaced points on the unit circle; channel `i` (1-based) at angle `2 pi i / C`.
pub fn make_circle(channels: usize) -> Result<Layout> {
    check_count(channels)?;
    let coords = (1..=channels)
        .flat_map(|i| {
            let a = 2.0 * PI * i as f64 / channels as f64;
            [a.cos(), a.sin()]
        })
        .collect();
    Ok(Layout { scheme: Some(Scheme::Circle), channels, dim: 2, coords })
}

/// Unit offsets of the eight slots of a square ring, clockwise from the top-left vertex.
const SQUARE_RING: [(f64, f64); 8] = [
    (-1.0, 1.0),
    (0.0, 1.0),
    (1.0, 1.0),
    (1.0, 0.0),
    (1.0, -1.0),
    (0.0, -1.0),
    (-1.0, -1.0),
    (-1.0, 0.0),
];

/// Concentric square rings around `(0.5, 0.5)`, eight points per ring
/// (vertices and edge midpoints), filled innermost ring first.
pub fn make_nested2d(channels: usize) -> Result<Layout> {
    check_count(channels)?;
    let rings = channels.div_ceil(8);
    let coords = (0..channels)
        .flat_map(|i| {
            let k = i / 8 + 1;
            let half = k as f64 / (2 * rings) as f64;
            let (dx, dy) = SQUARE_RING[i % 8];
            [0.5 + half * dx, 0.5 + half * dy]
        })
        .collect();
    Ok(Layout { scheme: Some(Scheme::Nested2d), channels, dim: 2, coords })
}

/// Regular `N^3` lattice, `N = ceil(cbrt(C))`; `i = c N^2 + b N + a` maps to `(a, b, c) / N`.
pub fn make_grid3d(channels: usize) -> Result<Layout> {
    check_count(channels)?;
    let n = int_root_ceil(channels, 3);
    let step = n as f64;
    let coords = (0..channels)
        .flat_map(|i| [(i % n) as f64 / step, ((i / n) % n) as f64 / step, (i / (n * n)) as f64 / step])
        .collect();
    Ok(Layout { scheme: Some(Scheme::Grid3d), channels, dim: 3, coords })
}

/// The 20 slots of a cube shell: 8 vertices then 12 edge midpoints, each group
/// in lexicographic order of its unit offset.
fn cube_shell_slots() -> Vec<[f64; 3]> {
    let vals = [-1.0, 0.0, 1.0];
    let mut vertices = Vec::with_capacity(8);
    let mut edges = Vec::with_capacity(12);
    for &x in &vals {
        for &y in &vals {
            for &z in &vals {
                let zeros = [x, y, z].iter().filter(|v| **v == 0.0).count();
                match zeros {
                    0 => vertices.push([x, y, z]),
                    1 => edges.push([x, y, z]),
                    _ => {}
                }
            }
        }
    }
    vertices.extend(edges);
    vertices
}

/// Concentric cube shells around `(0.5, 0.5, 0.5)` with twenty points per shell.
pub fn make_nested3d(channels: usize) -> Result<Layout> {
    check_count(channels)?;
    let slots = cube_shell_slots();
    let shells = channels.div_ceil(slots.len());
    let coords = (0..channels)
        .flat_map(|i| {
            let k = i / slots.len() + 1;
            let half = k as f64 / (2 * shells) as f64;
            let s = slots[i % slots.len()];
            [0.5 + half * s[0], 0.5 + half * s[1], 0.5 + half * s[2]]
        })
        .collect();
    Ok(Layout { scheme: Some(Scheme::Nested3d), channels, dim: 3, coords })
}

/// Fibonacci lattice on the unit sphere.
///
/// Channel `i` (1-based) has height `z = 1 - (2i - 1) / C` and azimuth
/// `2 pi i g` with `g` the golden ratio conjugate.
pub fn make_sphere(channels: usize) -> Result<Layout> {
    check_count(channels)?;
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let coords = (1..=channels)
        .flat_map(|i| {
            let z = 1.0 - (2 * i - 1) as f64 / channels as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * PI * ((i as f64 * g).fract());
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect();
    Ok(Layout { scheme: Some(Scheme::Sphere), channels, dim: 3, coords })
}

/// Pairwise Euclidean distances and the `1 / (d + 1)` similarity targets.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceTarget {
    channels: usize,
    distances: Vec<f64>,
    targets: Vec<f64>,
}

impl DistanceTarget {
    pub fn new(layout: &Layout) -> Self {
        let c = layout.channel_count();
        let mut distances = vec![0.0; c * c];
        for i in 0..c {
            for j in i + 1..c {
                let d = layout.distance(i, j);
                distances[i * c + j] = d;
                distances[j * c + i] = d;
            }
        }
        let targets = distances.iter().map(|d| 1.0 / (d + 1.0)).collect();
        DistanceTarget { channels: c, distances, targets }
    }

    pub fn channel_count(&self) -> usize {
        self.channels
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances[i * self.channels + j]
    }

    pub fn target(&self, i: usize, j: usize) -> f64 {
        self.targets[i * self.channels + j]
    }

    /// Row-major `C x C` distances.
    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    /// Row-major `C x C` targets.
    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

pub fn distance_target(layout: &Layout) -> DistanceTarget {
    DistanceTarget::new(layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn grid2d_small() {
        let l = make_grid2d(4).unwrap();
        let got: Vec<_> = l.positions().map(|p| p.to_vec()).collect();
        assert_eq!(got, vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![0.0, 0.5], vec![0.5, 0.5]]);
        let l5 = make_grid2d(5).unwrap();
        assert_eq!(l5.position(4), &[1.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn grid2d_256_is_sixteen_square() {
        let l = make_grid2d(256).unwrap();
        assert_eq!(l.position(255), &[15.0 / 16.0, 15.0 / 16.0]);
        assert_eq!(l.position(17), &[1.0 / 16.0, 1.0 / 16.0]);
    }

    #[test]
    fn circle_quarter_turns() {
        let l = make_circle(4).unwrap();
        let flat: Vec<f64> = l.positions().flatten().copied().collect();
        assert!(close(&flat, &[0.0, 1.0, -1.0, 0.0, 0.0, -1.0, 1.0, 0.0]));
    }

    #[test]
    fn nested2d_single_and_double_ring() {
        let l = make_nested2d(8).unwrap();
        let expect = [
            [0.0, 1.0],
            [0.5, 1.0],
            [1.0, 1.0],
            [1.0, 0.5],
            [1.0, 0.0],
            [0.5, 0.0],
            [0.0, 0.0],
            [0.0, 0.5],
        ];
        for (p, e) in l.positions().zip(expect.iter()) {
            assert!(close(p, e), "{p:?} vs {e:?}");
        }
        let l16 = make_nested2d(16).unwrap();
        assert!(close(l16.position(0), &[0.25, 0.75]));
        assert!(close(l16.position(8), &[0.0, 1.0]));
        // inner ring spacing is half the outer ring spacing
        assert!((l16.distance(0, 1) * 2.0 - l16.distance(8, 9)).abs() < 1e-15);
    }

    #[test]
    fn grid3d_mixed_radix() {
        let l = make_grid3d(9).unwrap();
        assert_eq!(l.position(8), &[2.0 / 3.0, 2.0 / 3.0, 0.0]);
        assert_eq!(int_root_ceil(256, 3), 7);
        assert_eq!(int_root_ceil(343, 3), 7);
        assert_eq!(int_root_ceil(344, 3), 8);
        assert_eq!(int_root_ceil(8, 3), 2);
    }

    #[test]
    fn nested3d_slot_order() {
        let slots = cube_shell_slots();
        assert_eq!(slots.len(), 20);
        assert_eq!(slots[0], [-1.0, -1.0, -1.0]);
        assert_eq!(slots[7], [1.0, 1.0, 1.0]);
        assert_eq!(slots[8], [-1.0, -1.0, 0.0]);
        assert_eq!(slots[19], [1.0, 1.0, 0.0]);
        let l = make_nested3d(2).unwrap();
        assert_eq!(l.position(0), &[0.0, 0.0, 0.0]);
        assert_eq!(l.position(1), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sphere_two_points() {
        let l = make_sphere(2).unwrap();
        assert_eq!(l.position(0)[2], 0.5);
        assert_eq!(l.position(1)[2], -0.5);
    }

    #[test]
    fn rejects_fewer_than_two_channels() {
        for s in Scheme::ALL {
            assert!(s.layout(1).is_err());
            assert!(s.layout(0).is_err());
        }
        assert!("torus".parse::<Scheme>().unwrap_err().to_string().contains("grid2d"));
    }

    #[test]
    fn circle_antipodes_target() {
        let dt = distance_target(&make_circle(4).unwrap());
        assert!((dt.distance(0, 2) - 2.0).abs() < 1e-15);
        assert!((dt.target(0, 2) - 1.0 / 3.0).abs() < 1e-15);
        let g = distance_target(&make_grid2d(4).unwrap());
        assert!((g.target(0, 3) - 1.0 / (1.0 + 0.5f64.sqrt())).abs() < 1e-15);
        assert!((g.target(0, 3) - 0.5858).abs() < 1e-4);
    }

    #[test]
    fn csv_and_json_shapes() {
        let l = make_grid2d(4).unwrap();
        let csv = l.to_csv();
        assert_eq!(csv.lines().next(), Some("channel,x,y"));
        assert_eq!(csv.lines().nth(2), Some("1,0.5,0"));
        let j = l.to_json();
        assert_eq!(j["scheme"], "grid2d");
        assert_eq!(j["positions"].as_array().unwrap().len(), 4);
        assert_eq!(make_sphere(3).unwrap().to_csv().lines().next(), Some("channel,x,y,z"));
    }
}
