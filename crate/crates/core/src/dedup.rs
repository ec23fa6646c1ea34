//! Stage 2: merge fragmented instance tracks by lifting their masks into
//! world-space point clouds and fusing same-category clouds that overlap.
//!
//! Each track's masks are backprojected and aggregated into one cloud,
//! voxel-subsampled for bounded runtime. A cloud's density `r` is its mean
//! nearest-other-neighbor distance; the track-specific proximity threshold is
//! `tau = tau_factor * r`. Two same-category tracks match when the fraction
//! of either cloud's points lying within the other's tau exceeds the merge
//! threshold (strictly), and union-find propagates matches into groups. The
//! resulting partition is exactly the connected components of the pairwise
//! match graph, so it is independent of track order and of the order in which
//! pairs are evaluated.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;

use crate::bundle::SceneBundle;
use crate::geom::{KdTree, Mask, PointCloud};
use crate::{Error, FrameId, InstanceId, Result, TrackId};

#[derive(Debug, Clone)]
pub struct DedupConfig {
    /// Voxel edge length for subsampling aggregated clouds, meters.
    pub voxel_size: f64,
    /// Hard cap on points per track cloud, enforced by a deterministic stride.
    pub max_points: usize,
    /// Directed overlap must exceed this strictly for a match.
    pub merge_threshold: f64,
    /// tau = tau_factor * density of the source cloud.
    pub tau_factor: f64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self { voxel_size: 0.01, max_points: 50_000, merge_threshold: 0.5, tau_factor: 3.0 }
    }
}

/// One tracker-assigned instance: a category and its per-frame masks.
#[derive(Debug, Clone)]
pub struct InstanceTrack {
    pub id: TrackId,
    pub category: String,
    /// (frame id, mask) pairs in ascending frame order.
    pub observations: Vec<(FrameId, Mask)>,
}

/// Collects every track in the bundle, observations in frame order, tracks
/// sorted by id.
pub fn build_tracks(bundle: &SceneBundle) -> Vec<InstanceTrack> {
    let mut by_id: BTreeMap<TrackId, InstanceTrack> = BTreeMap::new();
    for frame in &bundle.frames {
        for entry in &frame.masks {
            by_id
                .entry(entry.track)
                .or_insert_with(|| InstanceTrack {
                    id: entry.track,
                    category: entry.category.clone(),
                    observations: Vec::new(),
                })
                .observations
                .push((frame.id, entry.mask.clone()));
        }
    }
    by_id.into_values().collect()
}

/// Backprojects every in-mask valid-depth pixel of the track into world space
/// and voxel-subsamples the union.
///
/// Pixels are visited in ascending frame order, row-major within a frame; the
/// first point to land in a voxel wins, so the result is deterministic. When
/// the subsampled cloud still exceeds `config.max_points` it is thinned by a
/// deterministic stride.
pub fn aggregate_cloud(
    track: &InstanceTrack,
    bundle: &SceneBundle,
    config: &DedupConfig,
) -> Result<PointCloud> {
    let inv_voxel = 1.0 / config.voxel_size;
    let mut points = Vec::new();
    let mut seen: HashSet<(i64, i64, i64)> = HashSet::new();
    for (fid, mask) in &track.observations {
        let frame = bundle
            .frame(*fid)
            .ok_or_else(|| Error::UnknownReference { kind: "frame", name: fid.to_string() })?;
        for (x, y) in mask.iter_set() {
            let Some(z) = frame.depth.get(x, y) else { continue };
            let p = frame.camera.backproject(x as f64, y as f64, z)?;
            let key = (
                (p.x * inv_voxel).floor() as i64,
                (p.y * inv_voxel).floor() as i64,
                (p.z * inv_voxel).floor() as i64,
            );
            if seen.insert(key) {
                points.push(p);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyTrack(track.id));
    }
    if points.len() > config.max_points {
        let stride = points.len().div_ceil(config.max_points);
        points = points.into_iter().step_by(stride).collect();
    }
    Ok(PointCloud { points, normals: None })
}

/// Mean distance from each point to its nearest *other* point in the cloud.
pub fn cloud_density(cloud: &PointCloud) -> Result<f64> {
    let n = cloud.points.len();
    if n < 2 {
        return Err(Error::DensityUndefined { points: n });
    }
    let tree = KdTree::build(&cloud.points);
    let mut sum = 0.0;
    for (i, p) in cloud.points.iter().enumerate() {
        let (_, d2) = tree
            .nearest_excluding(p, i)
            .expect("n >= 2 guarantees another point exists");
        sum += d2.sqrt();
    }
    Ok(sum / n as f64)
}

/// Fraction of `src` points whose nearest `dst` point lies strictly within
/// `tau`. An empty `dst` yields 0.
pub fn overlap_ratio(src: &PointCloud, dst: &PointCloud, tau: f64) -> Result<f64> {
    if src.points.is_empty() {
        return Err(Error::EmptyCloud("overlap source"));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("overlap tau must be positive, got {tau}")));
    }
    if dst.points.is_empty() {
        return Ok(0.0);
    }
    let tree = KdTree::build(&dst.points);
    let tau2 = tau * tau;
    let close = src
        .points
        .iter()
        .filter(|p| {
            let (_, d2) = tree.nearest(p).expect("dst is nonempty");
            d2 < tau2
        })
        .count();
    Ok(close as f64 / src.points.len() as f64)
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n as u32).collect() }
    }

    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            // Path halving.
            let grand = self.parent[self.parent[i as usize] as usize];
            self.parent[i as usize] = grand;
            i = grand;
        }
        i
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        // Lower index becomes the root, so each root is its component's
        // minimum — exactly the stable group id we want.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
    }
}

/// Partition produced by cloud-overlap matching: each entry is one group's
/// member indices into the input slice, members sorted, groups sorted by
/// first member.
pub type Partition = Vec<Vec<usize>>;

/// Matches same-category clouds by directed overlap and returns the connected
/// components of the match graph.
///
/// Clouds with fewer than two points have undefined density and never merge;
/// a warning is recorded for each.
pub fn merge_clouds(
    items: &[(TrackId, String, PointCloud)],
    config: &DedupConfig,
) -> Result<(Partition, Vec<String>)> {
    let n = items.len();
    let mut warnings = Vec::new();

    let mut densities: Vec<Option<f64>> = Vec::with_capacity(n);
    for (id, _, cloud) in items {
        match cloud_density(cloud) {
            Ok(r) => densities.push(Some(r)),
            Err(Error::DensityUndefined { points }) => {
                warnings.push(format!(
                    "track {id}: density undefined on {points} point(s); kept as singleton"
                ));
                log::warn!("{}", warnings.last().unwrap());
                densities.push(None);
            }
            Err(e) => return Err(e),
        }
    }

    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if items[i].1 == items[j].1 && densities[i].is_some() && densities[j].is_some() {
                pairs.push((i, j));
            }
        }
    }
    let matches: Vec<bool> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let tau_i = config.tau_factor * densities[i].unwrap();
            let tau_j = config.tau_factor * densities[j].unwrap();
            let ov_ij = overlap_ratio(&items[i].2, &items[j].2, tau_i)?;
            let ov_ji = overlap_ratio(&items[j].2, &items[i].2, tau_j)?;
            Ok(ov_ij > config.merge_threshold || ov_ji > config.merge_threshold)
        })
        .collect::<Result<_>>()?;

    let mut uf = UnionFind::new(n);
    for (&(i, j), &matched) in pairs.iter().zip(&matches) {
        if matched {
            uf.union(i as u32, j as u32);
        }
    }

    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        groups.entry(uf.find(i as u32)).or_default().push(i);
    }
    Ok((groups.into_values().collect(), warnings))
}

/// One deduplicated instance: the merged track group with unioned per-frame
/// masks. The group id is the smallest member track id, which keeps ids
/// stable under track reordering.
#[derive(Debug, Clone)]
pub struct InstanceGroup {
    pub id: InstanceId,
    pub category: String,
    /// Member track ids, ascending.
    pub members: Vec<TrackId>,
    /// Union of member masks per frame, ascending frame order.
    pub observations: Vec<(FrameId, Mask)>,
}

#[derive(Debug, Clone)]
pub struct DedupOutcome {
    /// Groups sorted by id.
    pub groups: Vec<InstanceGroup>,
    /// track id -> group id for every input track.
    pub assignment: BTreeMap<TrackId, InstanceId>,
    pub warnings: Vec<String>,
}

/// Full stage 2: aggregate per-track clouds, match, and merge.
///
/// Tracks whose masks contain no valid depth at all cannot be lifted; they
/// are kept as singleton groups with a warning.
pub fn merge_instances(
    tracks: &[InstanceTrack],
    bundle: &SceneBundle,
    config: &DedupConfig,
) -> Result<DedupOutcome> {
    let mut warnings = Vec::new();
    let mut items: Vec<(TrackId, String, PointCloud)> = Vec::new();
    let mut unliftable: Vec<&InstanceTrack> = Vec::new();
    for track in tracks {
        match aggregate_cloud(track, bundle, config) {
            Ok(cloud) => items.push((track.id, track.category.clone(), cloud)),
            Err(Error::EmptyTrack(id)) => {
                warnings.push(format!("track {id}: no valid depth under any mask; kept as singleton"));
                log::warn!("{}", warnings.last().unwrap());
                unliftable.push(track);
            }
            Err(e) => return Err(e),
        }
    }

    let (partition, merge_warnings) = merge_clouds(&items, config)?;
    warnings.extend(merge_warnings);

    let track_by_id: HashMap<TrackId, &InstanceTrack> =
        tracks.iter().map(|t| (t.id, t)).collect();
    let mut groups = Vec::new();
    for component in partition {
        let members: Vec<TrackId> = {
            let mut m: Vec<TrackId> = component.iter().map(|&i| items[i].0).collect();
            m.sort_unstable();
            m
        };
        groups.push(build_group(&members, &track_by_id)?);
    }
    for track in unliftable {
        groups.push(build_group(&[track.id], &track_by_id)?);
    }
    groups.sort_by_key(|g| g.id);

    let mut assignment = BTreeMap::new();
    for g in &groups {
        for &m in &g.members {
            assignment.insert(m, g.id);
        }
    }
    Ok(DedupOutcome { groups, assignment, warnings })
}

fn build_group(
    members: &[TrackId],
    track_by_id: &HashMap<TrackId, &InstanceTrack>,
) -> Result<InstanceGroup> {
    let mut per_frame: BTreeMap<FrameId, Mask> = BTreeMap::new();
    for id in members {
        let track = track_by_id[id];
        for (fid, mask) in &track.observations {
            match per_frame.entry(*fid) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(mask.clone());
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    e.get_mut().union_with(mask)?;
                }
            }
        }
    }
    Ok(InstanceGroup {
        id: members[0],
        category: track_by_id[&members[0]].category.clone(),
        members: members.to_vec(),
        observations: per_frame.into_iter().collect(),
    })
}
