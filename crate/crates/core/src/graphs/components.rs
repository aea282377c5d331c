//! Habitats: 26-connected components of equal composite code.

use std::collections::{BTreeMap, VecDeque};

use crate::graphs::label_map::LabelMap;
use crate::volume::Grid;

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub code: i64,
    /// Sorted ascending.
    pub voxels: Vec<usize>,
}

/// Component id per voxel (`usize::MAX` outside the mask) plus the count.
fn flood(map: &LabelMap) -> (Vec<usize>, usize) {
    let grid = map.grid();
    let mut comp = vec![usize::MAX; grid.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..grid.len() {
        if !map.is_masked(start) || comp[start] != usize::MAX {
            continue;
        }
        let code = map.get(start);
        comp[start] = next;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            for &u in &grid.neighbors26(v) {
                if comp[u] == usize::MAX && map.get(u) == code {
                    comp[u] = next;
                    queue.push_back(u);
                }
            }
        }
        next += 1;
    }
    (comp, next)
}

/// 26-neighbour voxel pairs between component `c` and each other component.
fn boundary_counts(grid: &Grid, comp: &[usize], voxels: &[usize], c: usize) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for &v in voxels {
        for &u in &grid.neighbors26(v) {
            let o = comp[u];
            if o != usize::MAX && o != c {
                *counts.entry(o).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Partition the mask into habitats.
///
/// Components smaller than `min_size` are absorbed, smallest first, by the
/// neighbouring component sharing the most 26-neighbour voxel pairs (ties go
/// to the lower id); the absorbing component keeps its code. A small
/// component with no masked neighbour is kept. Output is ordered by each
/// component's lowest voxel index.
pub fn connected_components(map: &LabelMap, min_size: usize) -> Vec<Component> {
    let grid = map.grid();
    let (mut comp, count) = flood(map);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (v, &c) in comp.iter().enumerate() {
        if c != usize::MAX {
            members[c].push(v);
        }
    }
    let codes: Vec<i64> = members.iter().map(|m| map.get(m[0])).collect();
    let mut stuck = vec![false; count];
    loop {
        let small = (0..count)
            .filter(|&c| !members[c].is_empty() && members[c].len() < min_size && !stuck[c])
            .min_by_key(|&c| (members[c].len(), c));
        let Some(c) = small else { break };
        let counts = boundary_counts(&grid, &comp, &members[c], c);
        let target = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&o, _)| o);
        match target {
            Some(t) => {
                let moved = std::mem::take(&mut members[c]);
                for &v in &moved {
                    comp[v] = t;
                }
                members[t].extend(moved);
                members[t].sort_unstable();
            }
            None => stuck[c] = true,
        }
    }
    let mut out: Vec<Component> = members
        .into_iter()
        .zip(codes)
        .filter(|(m, _)| !m.is_empty())
        .map(|(voxels, code)| Component { code, voxels })
        .collect();
    out.sort_by_key(|c| c.voxels[0]);
    out
}
