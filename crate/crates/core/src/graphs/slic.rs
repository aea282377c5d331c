//! 3-D SLIC supervoxels restricted to a voxel domain.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::volume::{Grid, StructuralVolume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicParams {
    pub compactness: f64,
    /// Domains smaller than this many voxels stay a single supervoxel.
    pub nominal_size: usize,
    pub iterations: usize,
}

/// Per-channel z-score of a structural volume over `mask` (voxels outside the
/// mask are left at 0). Channels with zero spread become 0.
pub fn standardize_over(vol: &StructuralVolume, mask: &[bool]) -> StructuralVolume {
    let c = vol.channels;
    let idx: Vec<usize> = (0..vol.grid.len()).filter(|&v| mask[v]).collect();
    let mut out = vec![0.0; vol.data.len()];
    for ch in 0..c {
        let n = idx.len().max(1) as f64;
        let mean = idx.iter().map(|&v| vol.data[v * c + ch]).sum::<f64>() / n;
        let var = idx.iter().map(|&v| (vol.data[v * c + ch] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for &v in &idx {
            out[v * c + ch] = if sd > 0.0 { (vol.data[v * c + ch] - mean) / sd } else { 0.0 };
        }
    }
    StructuralVolume {
        grid: vol.grid,
        channels: c,
        data: out,
    }
}

struct Centre {
    pos: [f64; 3],
    color: Vec<f64>,
}

/// Partition `domain` (sorted, non-empty, connected) into at most roughly
/// `target_count` spatially connected supervoxels.
///
/// Seeds sit on a regular lattice over the domain's bounding box with spacing
/// `S = (|domain| / target_count)^(1/3)`, snapped to the nearest domain voxel.
/// Assignment minimises `d_color² + (m·d_space/S)²`; voxels outside every
/// centre's `2S` window fall back to a global search. Disconnected fragments
/// of a label are relabelled to the adjacent label sharing the most
/// 26-neighbour pairs. Returned sets are sorted and ordered by first voxel.
pub fn supervoxelize(
    vol: &StructuralVolume,
    domain: &[usize],
    target_count: usize,
    params: SlicParams,
) -> Vec<Vec<usize>> {
    assert!(!domain.is_empty(), "SLIC domain must be non-empty");
    let grid = vol.grid;
    if target_count <= 1 || domain.len() < params.nominal_size.max(2) {
        return vec![domain.to_vec()];
    }
    let c = vol.channels;
    let coords: Vec<[f64; 3]> = domain
        .iter()
        .map(|&v| {
            let p = grid.coords(v);
            [p[0] as f64, p[1] as f64, p[2] as f64]
        })
        .collect();
    let step = (domain.len() as f64 / target_count as f64).cbrt().max(1.0);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &coords {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    // Lattice seeds snapped to the nearest domain voxel, deduplicated.
    let mut seeds: Vec<usize> = Vec::new();
    let axis = |a: usize| -> Vec<f64> {
        let span = hi[a] - lo[a];
        let n = (span / step).floor() as usize + 1;
        let offset = (span - (n - 1) as f64 * step) / 2.0;
        (0..n).map(|i| lo[a] + offset + i as f64 * step).collect()
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let half = step / 2.0;
    for &x in &ax {
        for &y in &ay {
            for &z in &az {
                let q = [x, y, z];
                let mut best: Option<(f64, usize)> = None;
                for (i, p) in coords.iter().enumerate() {
                    if (0..3).all(|a| (p[a] - q[a]).abs() <= half + 1e-9) {
                        let d = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
                        if best.is_none_or(|(bd, _)| d < bd) {
                            best = Some((d, i));
                        }
                    }
                }
                if let Some((_, i)) = best {
                    seeds.push(i);
                }
            }
        }
    }
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() <= 1 {
        return vec![domain.to_vec()];
    }
    let mut centres: Vec<Centre> = seeds
        .iter()
        .map(|&i| Centre {
            pos: coords[i],
            color: vol.voxel(domain[i]).to_vec(),
        })
        .collect();
    let m = params.compactness;
    let cost = |ctr: &Centre, i: usize| -> f64 {
        let col = vol.voxel(domain[i]);
        let dc: f64 = col.iter().zip(&ctr.color).map(|(a, b)| (a - b).powi(2)).sum();
        let ds: f64 = (0..3).map(|a| (coords[i][a] - ctr.pos[a]).powi(2)).sum();
        dc + ds * (m / step).powi(2)
    };
    let mut label = vec![0usize; domain.len()];
    for _ in 0..params.iterations.max(1) {
        let mut best = vec![(f64::INFINITY, usize::MAX); domain.len()];
        let window = 2.0 * step;
        for (k, ctr) in centres.iter().enumerate() {
            for i in 0..domain.len() {
                if (0..3).all(|a| (coords[i][a] - ctr.pos[a]).abs() <= window) {
                    let d = cost(ctr, i);
                    if d < best[i].0 {
                        best[i] = (d, k);
                    }
                }
            }
        }
        for i in 0..domain.len() {
            if best[i].1 == usize::MAX {
                best[i] = centres
                    .iter()
                    .enumerate()
                    .map(|(k, ctr)| (cost(ctr, i), k))
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                    .expect("at least one centre");
            }
            label[i] = best[i].1;
        }
        let mut sums = vec![([0.0; 3], vec![0.0; c], 0usize); centres.len()];
        for i in 0..domain.len() {
            let s = &mut sums[label[i]];
            for a in 0..3 {
                s.0[a] += coords[i][a];
            }
            for (acc, x) in s.1.iter_mut().zip(vol.voxel(domain[i])) {
                *acc += x;
            }
            s.2 += 1;
        }
        for (ctr, (p, col, n)) in centres.iter_mut().zip(sums) {
            if n > 0 {
                let n = n as f64;
                ctr.pos = [p[0] / n, p[1] / n, p[2] / n];
                ctr.color = col.into_iter().map(|x| x / n).collect();
            }
        }
    }
    enforce_connectivity(&grid, domain, &mut label);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in label.iter().enumerate() {
        groups.entry(l).or_default().push(domain[i]);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|s| s[0]);
    out
}

/// Relabel every non-largest fragment of a label to its best-connected
/// neighbouring label until each label is one 26-connected piece.
fn enforce_connectivity(grid: &Grid, domain: &[usize], label: &mut [usize]) {
    let pos: HashMap<usize, usize> = domain.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let neighbours: Vec<Vec<usize>> = domain
        .iter()
        .map(|&v| grid.neighbors26(v).as_slice().iter().filter_map(|u| pos.get(u).copied()).collect())
        .collect();
    loop {
        let mut frag = vec![usize::MAX; domain.len()];
        let mut pieces: Vec<Vec<usize>> = Vec::new();
        for s in 0..domain.len() {
            if frag[s] != usize::MAX {
                continue;
            }
            let id = pieces.len();
            let mut members = vec![s];
            frag[s] = id;
            let mut q = VecDeque::from([s]);
            while let Some(i) = q.pop_front() {
                for &j in &neighbours[i] {
                    if frag[j] == usize::MAX && label[j] == label[s] {
                        frag[j] = id;
                        members.push(j);
                        q.push_back(j);
                    }
                }
            }
            pieces.push(members);
        }
        // Largest piece per label is kept (ties: earliest found).
        let mut keep: HashMap<usize, usize> = HashMap::new();
        for (id, p) in pieces.iter().enumerate() {
            let l = label[p[0]];
            match keep.get(&l) {
                Some(&k) if pieces[k].len() >= p.len() => {}
                _ => {
                    keep.insert(l, id);
                }
            }
        }
        let mut changed = false;
        for (id, p) in pieces.iter().enumerate() {
            let l = label[p[0]];
            if keep[&l] == id {
                continue;
            }
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in p {
                for &j in &neighbours[i] {
                    if frag[j] != id {
                        *counts.entry(label[j]).or_insert(0) += 1;
                    }
                }
            }
            if let Some((&target, _)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
                for &i in p {
                    label[i] = target;
                }
                changed = true;
                // Fragments were computed before this relabel; restart.
                break;
            }
        }
        if !changed {
            break;
        }
    }
}
