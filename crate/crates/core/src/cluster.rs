//! Lesion clusters from labeled volumes.
//!
//! A *GS lesion map* clusters each grade's voxels independently, so adjacent
//! voxels of different grades never merge. A *CS lesion map* first
//! binarizes the clinically significant grades (GS > 6) and then clusters
//! that mask, so touching GS 3+4 / GS 4+3 / GS >= 8 regions form one lesion.

use std::fmt;

use serde::{Serialize, Serializer};

use crate::grade::{Grade, LabelClass};
use crate::volume::{ProbStack, Volume, Zone, ZoneMask};
use crate::{Error, Result};

/// 3D neighbourhood used for clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face and edge neighbours.
    Eighteen,
    /// Full 3x3x3 neighbourhood.
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn from_value(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::InvalidConnectivity(other)),
        }
    }

    pub fn value(self) -> u32 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    /// All neighbour offsets `(dx, dy, dz)`.
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let max_l1 = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::with_capacity(26);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let l1 = dx.abs() + dy.abs() + dz.abs();
                    if l1 > 0 && l1 <= max_l1 {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

struct DisjointSet {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new() -> Self {
        DisjointSet {
            parent: Vec::new(),
            rank: Vec::new(),
        }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        self.rank.push(0);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (ka, kb) = (self.rank[ra as usize], self.rank[rb as usize]);
        if ka < kb {
            self.parent[ra as usize] = rb;
        } else if ka > kb {
            self.parent[rb as usize] = ra;
        } else {
            self.parent[rb as usize] = ra;
            self.rank[ra as usize] += 1;
        }
    }
}

/// Partitions the `true` voxels of `mask` into maximal connected sets.
///
/// Components are ordered by their smallest linear index and each voxel list
/// is sorted ascending.
pub fn connected_components_mask(dims: [usize; 3], mask: &[bool], conn: Connectivity) -> Vec<Vec<usize>> {
    let [nx, ny, nz] = dims;
    assert_eq!(mask.len(), nx * ny * nz, "mask length must match dims");
    // neighbours already visited in raster order
    let backward: Vec<[i64; 3]> = conn
        .offsets()
        .into_iter()
        .filter(|d| (d[2], d[1], d[0]) < (0, 0, 0))
        .collect();

    const NONE: u32 = u32::MAX;
    let mut provisional = vec![NONE; mask.len()];
    let mut sets = DisjointSet::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = x + nx * (y + ny * z);
                if !mask[idx] {
                    continue;
                }
                let mut label = NONE;
                for d in &backward {
                    let (qx, qy, qz) = (x as i64 + d[0], y as i64 + d[1], z as i64 + d[2]);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 {
                        continue;
                    }
                    let q = qx as usize + nx * (qy as usize + ny * qz as usize);
                    let ql = provisional[q];
                    if ql == NONE {
                        continue;
                    }
                    if label == NONE {
                        label = ql;
                    } else if label != ql {
                        sets.union(label, ql);
                    }
                }
                provisional[idx] = if label == NONE { sets.make() } else { label };
            }
        }
    }

    let mut slot_of_root = vec![NONE; sets.parent.len()];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for (idx, &l) in provisional.iter().enumerate() {
        if l == NONE {
            continue;
        }
        let root = sets.find(l) as usize;
        if slot_of_root[root] == NONE {
            slot_of_root[root] = components.len() as u32;
            components.push(Vec::new());
        }
        components[slot_of_root[root] as usize].push(idx);
    }
    components
}

/// Connected components of the nonzero voxels of `v`.
pub fn connected_components(v: &Volume, conn: Connectivity) -> Vec<Vec<usize>> {
    connected_components_mask(v.dims(), &v.nonzero_mask(), conn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClusterGrade {
    Graded(Grade),
    /// Binary clinically-significant cluster from a CS map.
    Cs,
}

impl ClusterGrade {
    pub fn grade(self) -> Option<Grade> {
        match self {
            ClusterGrade::Graded(g) => Some(g),
            ClusterGrade::Cs => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClusterGrade::Graded(g) => g.name(),
            ClusterGrade::Cs => "CS",
        }
    }
}

impl Serialize for ClusterGrade {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionCluster {
    /// Sorted linear voxel indices.
    pub voxels: Vec<usize>,
    pub grade: ClusterGrade,
    pub volume_mm3: f64,
    pub score: f64,
}

impl LesionCluster {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Inclusive bounding box `(min, max)`.
    pub fn bbox(&self, dims: [usize; 3]) -> ([usize; 3], [usize; 3]) {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for &v in &self.voxels {
            let c = crate::volume::coords_of(dims, v);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        (lo, hi)
    }

    /// Size of the intersection with another sorted voxel list.
    pub fn intersection(&self, other: &[usize]) -> usize {
        sorted_intersection(&self.voxels, other)
    }
}

pub(crate) fn sorted_intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum MapKind {
    #[serde(rename = "gs")]
    Gs,
    #[serde(rename = "cs")]
    Cs,
}

impl std::str::FromStr for MapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gs" => Ok(MapKind::Gs),
            "cs" => Ok(MapKind::Cs),
            other => Err(Error::InvalidArgument(format!("unknown map kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionMap {
    pub clusters: Vec<LesionCluster>,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub kind: MapKind,
}

impl LesionMap {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        crate::volume::voxel_volume_mm3(self.spacing_mm)
    }

    pub fn same_grid(&self, other: &LesionMap) -> bool {
        self.dims == other.dims && self.spacing_mm == other.spacing_mm
    }

    /// Clusters with the given grade, other clusters dropped.
    pub fn of_grade(&self, g: Grade) -> LesionMap {
        LesionMap {
            clusters: self
                .clusters
                .iter()
                .filter(|c| c.grade == ClusterGrade::Graded(g))
                .cloned()
                .collect(),
            ..self.empty_like()
        }
    }

    fn empty_like(&self) -> LesionMap {
        LesionMap {
            clusters: Vec::new(),
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            kind: self.kind,
        }
    }
}

/// Mean over the cluster of its scoring channel: the grade's own channel for
/// graded clusters, the summed GS 3+4 / GS 4+3 / GS >= 8 channels for CS
/// clusters. Without a probability stack (ground truth) the score is 1.
pub fn lesion_probability_score(voxels: &[usize], grade: ClusterGrade, probs: Option<&ProbStack>) -> Result<f64> {
    if voxels.is_empty() {
        return Err(Error::InvalidArgument("cannot score an empty cluster".into()));
    }
    let Some(p) = probs else {
        return Ok(1.0);
    };
    if let Some(&v) = voxels.iter().find(|&&v| v >= p.len()) {
        return Err(Error::InvalidArgument(format!(
            "voxel {v} outside the probability grid of {} voxels",
            p.len()
        )));
    }
    let channels: &[usize] = match grade {
        ClusterGrade::Graded(g) => &[g.label_code() as usize][..],
        ClusterGrade::Cs => &[3, 4, 5][..],
    };
    let total: f64 = voxels
        .iter()
        .map(|&v| channels.iter().map(|&c| p.prob(v, c) as f64).sum::<f64>())
        .sum();
    Ok((total / voxels.len() as f64).min(1.0))
}

fn make_clusters(
    components: Vec<Vec<usize>>,
    grade: ClusterGrade,
    probs: Option<&ProbStack>,
    voxel_mm3: f64,
) -> Result<Vec<LesionCluster>> {
    components
        .into_iter()
        .map(|voxels| {
            let score = lesion_probability_score(&voxels, grade, probs)?;
            Ok(LesionCluster {
                volume_mm3: voxels.len() as f64 * voxel_mm3,
                voxels,
                grade,
                score,
            })
        })
        .collect()
}

fn check_probs(labels: &Volume, probs: Option<&ProbStack>) -> Result<()> {
    if let Some(p) = probs {
        labels.ensure_same_grid(p.grid(), "labels vs probabilities")?;
    }
    Ok(())
}

/// One set of clusters per Gleason grade, in grade order.
pub fn gs_lesion_maps(labels: &Volume, probs: Option<&ProbStack>, conn: Connectivity) -> Result<LesionMap> {
    check_probs(labels, probs)?;
    let mut clusters = Vec::new();
    for g in Grade::ALL {
        let code = g.label_code() as f32;
        let mask: Vec<bool> = labels.values().iter().map(|&l| l == code).collect();
        let comps = connected_components_mask(labels.dims(), &mask, conn);
        clusters.extend(make_clusters(comps, ClusterGrade::Graded(g), probs, labels.voxel_volume_mm3())?);
    }
    Ok(LesionMap {
        clusters,
        dims: labels.dims(),
        spacing_mm: labels.spacing_mm(),
        kind: MapKind::Gs,
    })
}

/// Clusters of the binary mask `label in {GS3+4, GS4+3, GS>=8}`.
pub fn cs_lesion_maps(labels: &Volume, probs: Option<&ProbStack>, conn: Connectivity) -> Result<LesionMap> {
    check_probs(labels, probs)?;
    let mask: Vec<bool> = labels
        .values()
        .iter()
        .map(|&l| {
            LabelClass::from_code(l as u8)
                .and_then(LabelClass::grade)
                .is_some_and(Grade::is_cs)
        })
        .collect();
    let comps = connected_components_mask(labels.dims(), &mask, conn);
    Ok(LesionMap {
        clusters: make_clusters(comps, ClusterGrade::Cs, probs, labels.voxel_volume_mm3())?,
        dims: labels.dims(),
        spacing_mm: labels.spacing_mm(),
        kind: MapKind::Cs,
    })
}

/// Drops clusters whose volume is strictly below `min_mm3`.
pub fn filter_by_volume(m: &LesionMap, min_mm3: f64) -> Result<LesionMap> {
    if !(min_mm3.is_finite() && min_mm3 >= 0.0) {
        return Err(Error::InvalidArgument(format!("minimum volume {min_mm3} must be >= 0")));
    }
    Ok(LesionMap {
        clusters: m.clusters.iter().filter(|c| c.volume_mm3 >= min_mm3).cloned().collect(),
        ..m.empty_like()
    })
}

/// Keeps the clusters whose majority zone (see [`ZoneMask::zone_of`]) is `zone`.
pub fn restrict_to_zone(m: &LesionMap, zones: &ZoneMask, zone: Zone) -> Result<LesionMap> {
    if zones.pz().dims() != m.dims || zones.pz().spacing_mm() != m.spacing_mm {
        return Err(Error::ShapeMismatch("zone masks vs lesion map grid".into()));
    }
    Ok(LesionMap {
        clusters: m
            .clusters
            .iter()
            .filter(|c| zones.zone_of(&c.voxels) == zone)
            .cloned()
            .collect(),
        ..m.empty_like()
    })
}

/// Serializable view of a cluster.
#[derive(Debug, Clone, Serialize)]
pub struct ClusterSummary {
    pub grade: ClusterGrade,
    pub voxel_count: usize,
    pub volume_mm3: f64,
    pub score: f64,
    pub bbox_min: [usize; 3],
    pub bbox_max: [usize; 3],
}

impl ClusterSummary {
    pub fn of(c: &LesionCluster, dims: [usize; 3]) -> Self {
        let (bbox_min, bbox_max) = c.bbox(dims);
        ClusterSummary {
            grade: c.grade,
            voxel_count: c.len(),
            volume_mm3: c.volume_mm3,
            score: c.score,
            bbox_min,
            bbox_max,
        }
    }
}

pub fn summarize(m: &LesionMap) -> Vec<ClusterSummary> {
    m.clusters.iter().map(|c| ClusterSummary::of(c, m.dims)).collect()
}
