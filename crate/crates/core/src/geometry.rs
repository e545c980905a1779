//! Hexagonal sites on a torus, so every cell sees a full ring of neighbours.

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Shape (i, j) with i² + ij + j² = n, if one exists.
pub fn hex_shape(n: usize) -> Option<(usize, usize)> {
    (0..=n).flat_map(|i| (0..=i).map(move |j| (i, j))).find(|&(i, j)| i * i + i * j + j * j == n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HexTorus {
    spacing: f64,
    sites: Vec<[f64; 2]>,
    wrap_a: [f64; 2],
    wrap_b: [f64; 2],
}

fn rot60(v: [f64; 2]) -> [f64; 2] {
    [0.5 * v[0] - SQRT3 / 2.0 * v[1], SQRT3 / 2.0 * v[0] + 0.5 * v[1]]
}

impl HexTorus {
    /// `n` sites at inter-site distance `spacing`; `n` must be a hex number.
    pub fn new(n: usize, spacing: f64) -> Option<Self> {
        let (i, j) = hex_shape(n)?;
        let a1 = [spacing, 0.0];
        let a2 = [spacing / 2.0, spacing * SQRT3 / 2.0];
        let wrap_a = [i as f64 * a1[0] + j as f64 * a2[0], i as f64 * a1[1] + j as f64 * a2[1]];
        let wrap_b = rot60(wrap_a);
        let mut torus = Self { spacing, sites: Vec::with_capacity(n), wrap_a, wrap_b };
        let r = 2 * n as i64 + 2;
        let mut cands: Vec<(i64, i64)> = Vec::new();
        for m in -r..=r {
            for k in -r..=r {
                cands.push((m, k));
            }
        }
        // Sort by distance so the representative of each class is the one nearest the origin.
        cands.sort_by_key(|&(m, k)| (m * m + m * k + k * k, m, k));
        for (m, k) in cands {
            if torus.sites.len() == n {
                break;
            }
            let p = [m as f64 * a1[0] + k as f64 * a2[0], m as f64 * a1[1] + k as f64 * a2[1]];
            if torus.sites.iter().all(|s| torus.distance(*s, p) > spacing * 1e-6) {
                torus.sites.push(p);
            }
        }
        (torus.sites.len() == n).then_some(torus)
    }

    pub fn sites(&self) -> &[[f64; 2]] {
        &self.sites
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Shortest displacement from `from` to `to` over all wrap-around images.
    pub fn displacement(&self, from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
        let d = [to[0] - from[0], to[1] - from[1]];
        // Reduce into the fundamental cell by solving d = αA + βB.
        let det = self.wrap_a[0] * self.wrap_b[1] - self.wrap_a[1] * self.wrap_b[0];
        let alpha = (d[0] * self.wrap_b[1] - d[1] * self.wrap_b[0]) / det;
        let beta = (self.wrap_a[0] * d[1] - self.wrap_a[1] * d[0]) / det;
        let (ka, kb) = (alpha.round(), beta.round());
        let base = [d[0] - ka * self.wrap_a[0] - kb * self.wrap_b[0], d[1] - ka * self.wrap_a[1] - kb * self.wrap_b[1]];
        let mut best = base;
        let mut best_n = base[0].hypot(base[1]);
        for a in -1..=1 {
            for b in -1..=1 {
                let c = [
                    base[0] + a as f64 * self.wrap_a[0] + b as f64 * self.wrap_b[0],
                    base[1] + a as f64 * self.wrap_a[1] + b as f64 * self.wrap_b[1],
                ];
                let n = c[0].hypot(c[1]);
                if n < best_n - 1e-12 {
                    best = c;
                    best_n = n;
                }
            }
        }
        best
    }

    pub fn distance(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let d = self.displacement(a, b);
        d[0].hypot(d[1])
    }

    /// Whether `offset` from a site lies inside that site's hexagon.
    pub fn in_hexagon(&self, offset: [f64; 2]) -> bool {
        let half = self.spacing / 2.0;
        [0.0f64, 60.0, 120.0].iter().all(|deg| {
            let t = deg.to_radians();
            (offset[0] * t.cos() + offset[1] * t.sin()).abs() <= half
        })
    }

    /// Circumradius of a cell hexagon.
    pub fn cell_radius(&self) -> f64 {
        self.spacing / SQRT3
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_numbers() {
        assert_eq!(hex_shape(1), Some((1, 0)));
        assert_eq!(hex_shape(3), Some((1, 1)));
        assert_eq!(hex_shape(7), Some((2, 1)));
        assert_eq!(hex_shape(21), Some((4, 1)));
        assert_eq!(hex_shape(2), None);
        assert_eq!(hex_shape(5), None);
    }

    #[test]
    fn sites_are_evenly_spaced() {
        for n in [1, 3, 4, 7, 12, 21] {
            let t = HexTorus::new(n, 500.0).unwrap();
            assert_eq!(t.sites().len(), n);
            for (i, a) in t.sites().iter().enumerate() {
                for b in &t.sites()[i + 1..] {
                    assert!(t.distance(*a, *b) >= 500.0 - 1e-6, "n={n}");
                }
            }
        }
    }

    #[test]
    fn three_sites_neighbour_each_other() {
        let t = HexTorus::new(3, 500.0).unwrap();
        let s = t.sites();
        assert!((t.distance(s[0], s[1]) - 500.0).abs() < 1e-6);
        assert!((t.distance(s[1], s[2]) - 500.0).abs() < 1e-6);
        // A point just past one site wraps back near the others.
        let far = [s[1][0] * 40.0, s[1][1] * 40.0];
        assert!(t.distance(s[0], far) <= t.cell_radius() * 3.0);
    }

    #[test]
    fn hexagon_membership() {
        let t = HexTorus::new(3, 500.0).unwrap();
        assert!(t.in_hexagon([0.0, 0.0]));
        assert!(t.in_hexagon([249.0, 0.0]));
        assert!(!t.in_hexagon([251.0, 0.0]));
        assert!(t.in_hexagon([0.0, 280.0]));
        assert!(!t.in_hexagon([0.0, 290.0]));
    }
}
