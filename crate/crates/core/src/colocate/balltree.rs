use super::haversine_km;

const LEAF_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct GeoPoint {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug)]
struct Node {
    /// (lat, lon) degrees
    center: (f64, f64),
    /// max great-circle distance (km) from center to any member
    radius: f64,
    kind: NodeKind,
}

#[derive(Debug)]
enum NodeKind {
    Leaf(Vec<usize>),
    Split(Box<Node>, Box<Node>),
}

/// Ball tree over points on the sphere under the haversine metric. Splits
/// follow the widest axis of the points' unit vectors.
#[derive(Debug)]
pub struct BallTree {
    points: Vec<GeoPoint>,
    root: Option<Node>,
}

fn unit(p: &GeoPoint) -> [f64; 3] {
    let (la, lo) = (p.lat.to_radians(), p.lon.to_radians());
    [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
}

fn to_latlon(v: [f64; 3]) -> (f64, f64) {
    let h = (v[0] * v[0] + v[1] * v[1]).sqrt();
    (v[2].atan2(h).to_degrees(), v[1].atan2(v[0]).to_degrees())
}

impl BallTree {
    pub fn build(points: Vec<GeoPoint>) -> Self {
        let units: Vec<[f64; 3]> = points.iter().map(unit).collect();
        let idx: Vec<usize> = (0..points.len()).collect();
        let root = (!points.is_empty()).then(|| Self::build_node(&points, &units, idx));
        Self { points, root }
    }

    fn build_node(points: &[GeoPoint], units: &[[f64; 3]], mut idx: Vec<usize>) -> Node {
        let mut sum = [0.0; 3];
        for &i in &idx {
            for k in 0..3 {
                sum[k] += units[i][k];
            }
        }
        let norm = (sum[0] * sum[0] + sum[1] * sum[1] + sum[2] * sum[2]).sqrt();
        let center = if norm > 1e-12 {
            to_latlon([sum[0] / norm, sum[1] / norm, sum[2] / norm])
        } else {
            (points[idx[0]].lat, points[idx[0]].lon)
        };
        let radius = idx
            .iter()
            .map(|&i| haversine_km(center, (points[i].lat, points[i].lon)))
            .fold(0.0, f64::max);

        if idx.len() <= LEAF_SIZE {
            return Node {
                center,
                radius,
                kind: NodeKind::Leaf(idx),
            };
        }
        let mut axis = 0;
        let mut best = f64::NEG_INFINITY;
        for k in 0..3 {
            let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(units[i][k]), hi.max(units[i][k]))
            });
            if hi - lo > best {
                best = hi - lo;
                axis = k;
            }
        }
        idx.sort_by(|&a, &b| units[a][axis].total_cmp(&units[b][axis]).then(a.cmp(&b)));
        let right = idx.split_off(idx.len() / 2);
        Node {
            center,
            radius,
            kind: NodeKind::Split(
                Box::new(Self::build_node(points, units, idx)),
                Box::new(Self::build_node(points, units, right)),
            ),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of leaves; a tree over `n ≤ 32` points has one.
    pub fn leaf_count(&self) -> usize {
        fn count(n: &Node) -> usize {
            match &n.kind {
                NodeKind::Leaf(_) => 1,
                NodeKind::Split(a, b) => count(a) + count(b),
            }
        }
        self.root.as_ref().map_or(0, count)
    }

    /// All `(index, distance_km)` with distance ≤ `radius_km`, sorted by index.
    pub fn within(&self, q: (f64, f64), radius_km: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if let Some(root) = &self.root {
            self.visit(root, q, radius_km, &mut out);
        }
        out.sort_by_key(|&(i, _)| i);
        out
    }

    fn visit(&self, node: &Node, q: (f64, f64), r: f64, out: &mut Vec<(usize, f64)>) {
        // triangle inequality on the sphere; small slack absorbs rounding
        if haversine_km(q, node.center) - node.radius > r + 1e-9 {
            return;
        }
        match &node.kind {
            NodeKind::Leaf(idx) => {
                for &i in idx {
                    let p = &self.points[i];
                    let d = haversine_km(q, (p.lat, p.lon));
                    if d <= r {
                        out.push((i, d));
                    }
                }
            }
            NodeKind::Split(a, b) => {
                self.visit(a, q, r, out);
                self.visit(b, q, r, out);
            }
        }
    }

    /// Closest point within `radius_km`; ties go to the smaller id, then index.
    pub fn nearest_within(&self, q: (f64, f64), radius_km: f64) -> Option<(usize, f64)> {
        self.within(q, radius_km).into_iter().min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then_with(|| self.points[a.0].id.cmp(&self.points[b.0].id))
                .then(a.0.cmp(&b.0))
        })
    }
}
