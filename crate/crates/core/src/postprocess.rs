//! Connected-component cleanup of predicted segmentations.
//!
//! Components are labeled with a two-pass union-find scan. Ids are assigned
//! in order of each component's first voxel in C order, so the labeling is
//! canonical.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::volcore::{LabelVolume, Volume, BACKGROUND, KIDNEY, TUMOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(format!("connectivity must be 6 or 26, got {v}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbour offsets that precede a voxel in C-order scan.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let mut v = Vec::new();
        for dx in -1isize..=1 {
            for dy in -1isize..=1 {
                for dz in -1isize..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let precedes = (dx, dy, dz) < (0, 0, 0);
                    let ok = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if ok && precedes {
                        v.push([dx, dy, dz]);
                    }
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub enabled: bool,
    pub connectivity: Connectivity,
    /// Union components kept, largest first.
    pub max_components: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            enabled: true,
            connectivity: Connectivity::TwentySix,
            max_components: 2,
        }
    }
}

/// Component ids (0 = outside the mask, otherwise dense `1..=K`) and sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMap {
    pub ids: Array3<u32>,
    /// `sizes[k - 1]` is the voxel count of component `k`.
    pub sizes: Vec<usize>,
    pub connectivity: Connectivity,
}

impl ComponentMap {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    // Smaller root wins, so roots keep first-occurrence order.
    if ra < rb {
        parent[rb as usize] = ra;
    } else if rb < ra {
        parent[ra as usize] = rb;
    }
}

pub fn connected_components(mask: &Array3<bool>, connectivity: Connectivity) -> ComponentMap {
    let (nx, ny, nz) = mask.dim();
    let offsets = connectivity.backward_offsets();
    let mut provisional = Array3::<u32>::zeros((nx, ny, nz));
    // parent[0] is a dummy for "no label".
    let mut parent: Vec<u32> = vec![0];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if !mask[[x, y, z]] {
                    continue;
                }
                let mut label = 0u32;
                for o in &offsets {
                    let (qx, qy, qz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                    if qx < 0 || qy < 0 || qz < 0 || qy >= ny as isize || qz >= nz as isize {
                        continue;
                    }
                    let q = provisional[[qx as usize, qy as usize, qz as usize]];
                    if q == 0 {
                        continue;
                    }
                    if label == 0 {
                        label = q;
                    } else {
                        union(&mut parent, label, q);
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[[x, y, z]] = label;
            }
        }
    }
    // Second pass: resolve roots and renumber by first occurrence.
    let mut dense = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    for v in provisional.iter_mut() {
        if *v == 0 {
            continue;
        }
        let root = find(&mut parent, *v);
        if dense[root as usize] == 0 {
            sizes.push(0);
            dense[root as usize] = sizes.len() as u32;
        }
        let id = dense[root as usize];
        sizes[id as usize - 1] += 1;
        *v = id;
    }
    ComponentMap {
        ids: provisional,
        sizes,
        connectivity,
    }
}

/// Keeps the `max_components` largest kidney∪tumor components (ties broken
/// toward the component whose first voxel comes earlier) and removes tumor
/// in kept components that contain no kidney.
pub fn apply_rules_with(seg: &LabelVolume, cfg: &PostprocessConfig) -> LabelVolume {
    if !cfg.enabled {
        return seg.clone();
    }
    let mask = seg.data.mapv(|v| v != BACKGROUND);
    let comps = connected_components(&mask, cfg.connectivity);
    let mut order: Vec<usize> = (0..comps.count()).collect();
    // Ids follow first occurrence, so the id breaks size ties.
    order.sort_by(|&a, &b| comps.sizes[b].cmp(&comps.sizes[a]).then(a.cmp(&b)));
    let mut keep = vec![false; comps.count() + 1];
    for &k in order.iter().take(cfg.max_components) {
        keep[k + 1] = true;
    }
    let mut has_kidney = vec![false; comps.count() + 1];
    for (&id, &v) in comps.ids.iter().zip(&seg.data) {
        if v == KIDNEY {
            has_kidney[id as usize] = true;
        }
    }
    let mut out = seg.data.clone();
    for (o, &id) in out.iter_mut().zip(&comps.ids) {
        let id = id as usize;
        if id == 0 {
            continue;
        }
        if !keep[id] || (*o == TUMOR && !has_kidney[id]) {
            *o = BACKGROUND;
        }
    }
    Volume::new(out, seg.spacing)
}

/// [`apply_rules_with`] under the default rules: two components, 26-connected.
pub fn apply_rules(seg: &LabelVolume) -> LabelVolume {
    apply_rules_with(seg, &PostprocessConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volcore::Spacing;

    fn seg(shape: [usize; 3], blocks: &[([usize; 3], [usize; 3], u8)]) -> LabelVolume {
        let mut a = Array3::<u8>::zeros(shape);
        for &(lo, hi, v) in blocks {
            for x in lo[0]..hi[0] {
                for y in lo[1]..hi[1] {
                    for z in lo[2]..hi[2] {
                        a[[x, y, z]] = v;
                    }
                }
            }
        }
        Volume::new(a, Spacing::default())
    }

    #[test]
    fn empty_mask_has_no_components() {
        let m = connected_components(&Array3::from_elem((3, 4, 5), false), Connectivity::Six);
        assert_eq!(m.count(), 0);
        assert!(m.ids.iter().all(|&v| v == 0));
    }

    #[test]
    fn corner_touching_voxels() {
        let mut m = Array3::from_elem((2, 2, 2), false);
        m[[0, 0, 0]] = true;
        m[[1, 1, 1]] = true;
        assert_eq!(connected_components(&m, Connectivity::TwentySix).count(), 1);
        assert_eq!(connected_components(&m, Connectivity::Six).count(), 2);
    }

    #[test]
    fn ids_follow_first_occurrence() {
        let mut m = Array3::from_elem((1, 1, 5), false);
        for z in [0, 2, 4] {
            m[[0, 0, z]] = true;
        }
        let c = connected_components(&m, Connectivity::Six);
        assert_eq!(c.ids.iter().copied().collect::<Vec<_>>(), vec![1, 0, 2, 0, 3]);
        assert_eq!(c.sizes, vec![1, 1, 1]);
    }

    #[test]
    fn clean_two_kidneys_unchanged() {
        let s = seg([20, 10, 10], &[([1, 1, 1], [6, 6, 6], 1), ([2, 2, 2], [4, 4, 4], 2), ([12, 1, 1], [18, 6, 6], 1)]);
        assert_eq!(apply_rules(&s), s);
    }

    #[test]
    fn third_component_removed() {
        // Sizes 100, 80, 5.
        let s = seg(
            [30, 10, 10],
            &[([0, 0, 0], [10, 10, 1], 1), ([12, 0, 0], [20, 10, 1], 1), ([25, 0, 0], [30, 1, 1], 1)],
        );
        let out = apply_rules(&s);
        assert_eq!(out.count(KIDNEY), 180);
        assert!((25..30).all(|x| out.data[[x, 0, 0]] == 0));
    }

    #[test]
    fn isolated_tumor_blob_removed() {
        let s = seg(
            [40, 12, 12],
            &[([1, 1, 1], [8, 8, 8], 1), ([3, 3, 3], [5, 5, 5], 2), ([30, 4, 4], [33, 7, 7], 2)],
        );
        let out = apply_rules(&s);
        assert_eq!(out.count(TUMOR), 8);
        assert_eq!(out.count(KIDNEY), s.count(KIDNEY));
    }

    #[test]
    fn size_tie_keeps_earlier_component() {
        let s = seg([20, 2, 2], &[([0, 0, 0], [2, 2, 2], 1), ([5, 0, 0], [7, 2, 2], 1), ([10, 0, 0], [12, 2, 2], 1)]);
        let out = apply_rules(&s);
        assert_eq!(out.data[[10, 0, 0]], 0);
        assert_eq!(out.data[[5, 0, 0]], 1);
    }

    #[test]
    fn disabled_rules_are_identity() {
        let s = seg([30, 2, 2], &[([20, 0, 0], [22, 2, 2], 2)]);
        let cfg = PostprocessConfig {
            enabled: false,
            ..PostprocessConfig::default()
        };
        assert_eq!(apply_rules_with(&s, &cfg), s);
        assert_eq!(apply_rules(&s).foreground_count(), 0);
    }

    #[test]
    fn connectivity_serializes_as_number() {
        let c: PostprocessConfig = serde_json::from_str(r#"{"connectivity": 6}"#).unwrap();
        assert_eq!(c.connectivity, Connectivity::Six);
        assert!(serde_json::from_str::<PostprocessConfig>(r#"{"connectivity": 8}"#).is_err());
    }
}
