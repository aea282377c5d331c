//! Two-level tumour graph: habitats (coarse) over supervoxels (fine).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::Archive;
use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::graphs::components::connected_components;
use crate::graphs::edges::{cosine_matrix, knn_edges, normalized_outer, transpose_flat};
use crate::graphs::label_map::LabelMap;
use crate::graphs::slic::{standardize_over, supervoxelize, SlicParams};
use crate::signal::curves::{extract_curves, zscore, PerfusionVolume};
use crate::signal::vqvae::VqVae;
use crate::volume::{centroid, rle_decode, rle_encode, Grid, StructuralVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Nearest neighbours proposed per node.
    pub k: usize,
    /// Centroid distance cut-off in voxels.
    pub delta_max: f64,
    pub min_component_size: usize,
    /// Nominal supervoxel volume; target count is `⌈|domain| / this⌉`.
    pub voxels_per_supervoxel: usize,
    pub compactness: f64,
    pub slic_iterations: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: 5,
            delta_max: 15.0,
            min_component_size: 5,
            voxels_per_supervoxel: 125,
            compactness: 0.1,
            slic_iterations: 10,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.voxels_per_supervoxel == 0 || self.min_component_size == 0 {
            return Err(Error::param("graph k, supervoxel size and min component size must be positive"));
        }
        if !(self.delta_max > 0.0) || !(self.compactness >= 0.0) {
            return Err(Error::param("delta_max must be positive and compactness non-negative"));
        }
        Ok(())
    }

    pub fn slic(&self) -> SlicParams {
        SlicParams {
            compactness: self.compactness,
            nominal_size: self.voxels_per_supervoxel,
            iterations: self.slic_iterations,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseNode {
    pub id: usize,
    pub voxels: Vec<usize>,
    pub centroid: [f64; 3],
    /// Row-major flatten of `mean_latents`.
    pub feature: Vec<f64>,
    pub mean_latents: Mat,
    pub composite_code: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineNode {
    pub id: usize,
    pub parent: usize,
    pub voxels: Vec<usize>,
    pub centroid: [f64; 3],
    /// Mean structural intensity per channel.
    pub feature: Vec<f64>,
}

/// Nodes plus undirected edges stored once as `(u, v)`, `u < v`.
///
/// `edge_features` row `e` is the similarity matrix oriented `u → v`; the
/// `v → u` direction is its transpose (see [`GraphLevel::directed_feature`]).
#[derive(Clone, Debug, PartialEq)]
pub struct GraphLevel<N> {
    pub nodes: Vec<N>,
    pub edges: Vec<(usize, usize)>,
    pub edge_features: Mat,
    /// Side length of the square similarity matrix.
    pub feature_side: usize,
}

impl<N> GraphLevel<N> {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_dim(&self) -> usize {
        self.feature_side * self.feature_side
    }

    pub fn directed_feature(&self, e: usize, reverse: bool) -> Vec<f64> {
        let f = self.edge_features.row(e).to_vec();
        if reverse {
            transpose_flat(&f, self.feature_side, self.feature_side)
        } else {
            f
        }
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.nodes.len()];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }
}

/// Strict many-to-one map from fine nodes to coarse nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Coarse parent of each fine node.
    pub parent: Vec<usize>,
    pub num_coarse: usize,
}

impl Assignment {
    /// Coordinate list `(fine, coarse)` of the nonzero entries.
    pub fn coo(&self) -> Vec<(usize, usize)> {
        self.parent.iter().copied().enumerate().collect()
    }

    /// Row sums of the dense matrix (all 1 for a valid assignment).
    pub fn row_sums(&self) -> Vec<usize> {
        let mut sums = vec![0; self.parent.len()];
        for (f, c) in self.coo() {
            if c < self.num_coarse {
                sums[f] += 1;
            }
        }
        sums
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalGraph {
    pub case_id: String,
    pub label: usize,
    pub grid: Grid,
    pub coarse: GraphLevel<CoarseNode>,
    pub fine: GraphLevel<FineNode>,
    pub assignment: Assignment,
    pub label_map: LabelMap,
    pub k_codes: usize,
    pub n_positions: usize,
    pub d_enc: usize,
    pub channels: usize,
}

/// Violations of the structural invariants, empty when the graph is sound.
pub fn integrity_report(g: &HierarchicalGraph, mask: &[bool]) -> Vec<String> {
    let mut issues = Vec::new();
    if g.assignment.row_sums().iter().any(|&s| s != 1) || g.assignment.parent.len() != g.fine.num_nodes() {
        issues.push("assignment rows do not each sum to 1".to_string());
    }
    let mut owner = vec![usize::MAX; g.grid.len()];
    for n in &g.coarse.nodes {
        for &v in &n.voxels {
            if owner[v] != usize::MAX {
                issues.push(format!("voxel {v} in two coarse nodes"));
            }
            owner[v] = n.id;
        }
    }
    for (v, &m) in mask.iter().enumerate() {
        if m != (owner[v] != usize::MAX) {
            issues.push(format!("coarse nodes do not partition the mask at voxel {v}"));
            break;
        }
    }
    let mut fine_owner = vec![false; g.grid.len()];
    for (f, n) in g.fine.nodes.iter().enumerate() {
        if g.assignment.parent.get(f) != Some(&n.parent) {
            issues.push(format!("fine node {f} parent disagrees with assignment"));
        }
        for &v in &n.voxels {
            if owner[v] != n.parent {
                issues.push(format!("fine node {f} voxel {v} outside its parent"));
                break;
            }
            if fine_owner[v] {
                issues.push(format!("voxel {v} in two fine nodes"));
            }
            fine_owner[v] = true;
        }
    }
    for level in [(&g.coarse.edges, g.coarse.num_nodes()), (&g.fine.edges, g.fine.num_nodes())] {
        for w in level.0.windows(2) {
            if w[0] >= w[1] {
                issues.push("edge list not strictly sorted".into());
            }
        }
        if level.0.iter().any(|&(u, v)| u >= v || v >= level.1) {
            issues.push("edge endpoint invalid or not canonical".into());
        }
    }
    issues
}

/// Per-voxel latent rows for the masked voxels, in lexicographic order.
pub struct VoxelLatents {
    pub voxels: Vec<usize>,
    /// `[voxels, n·d_enc]`, row-major flatten per voxel.
    pub latents: Mat,
    pub codes: Vec<Vec<usize>>,
    /// Voxels whose curve was constant (encoded as an all-zero curve).
    pub degenerate: Vec<bool>,
}

/// Encode every masked curve with the frozen model.
pub fn encode_volume(vol: &PerfusionVolume, model: &VqVae) -> Result<VoxelLatents> {
    let curves = extract_curves(vol)?;
    let mut voxels = Vec::with_capacity(curves.len());
    let mut z = Vec::with_capacity(curves.len());
    let mut degenerate = Vec::with_capacity(curves.len());
    for (v, c) in curves {
        let s = zscore(&c)?;
        voxels.push(v);
        degenerate.push(s.degenerate);
        z.push(s.curve.into_values());
    }
    let refs: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
    let lat = model.encode_many(&refs)?;
    let cb = model.codebook();
    let d = model.arch.d_flat();
    let mut latents = Mat::zeros((voxels.len(), d));
    let mut codes = Vec::with_capacity(voxels.len());
    for (i, m) in lat.iter().enumerate() {
        latents.row_mut(i).assign(&ndarray::ArrayView1::from(m.as_slice().expect("contiguous latents")));
        codes.push(crate::signal::vqvae::quantize(&cb, m)?.0);
    }
    Ok(VoxelLatents {
        voxels,
        latents,
        codes,
        degenerate,
    })
}

pub fn build_label_map(vol: &PerfusionVolume, model: &VqVae) -> Result<(LabelMap, VoxelLatents)> {
    let enc = encode_volume(vol, model)?;
    let map = LabelMap::from_codes(vol.grid(), model.arch.k, model.arch.n, &enc.voxels, &enc.codes)?;
    Ok((map, enc))
}

/// Habitat nodes described by their mean latents.
pub fn coarse_nodes(map: &LabelMap, enc: &VoxelLatents, n: usize, d_enc: usize, min_size: usize) -> Result<Vec<CoarseNode>> {
    let grid = map.grid();
    let mut row_of = vec![usize::MAX; grid.len()];
    for (i, &v) in enc.voxels.iter().enumerate() {
        row_of[v] = i;
    }
    connected_components(map, min_size)
        .into_iter()
        .enumerate()
        .map(|(id, comp)| {
            if comp.voxels.is_empty() {
                return Err(Error::Consistency(format!("coarse node {id} is empty")));
            }
            let mut sum = vec![0.0; n * d_enc];
            for &v in &comp.voxels {
                let r = row_of[v];
                if r == usize::MAX {
                    return Err(Error::Consistency(format!("voxel {v} has no latent row")));
                }
                for (s, x) in sum.iter_mut().zip(enc.latents.row(r)) {
                    *s += x;
                }
            }
            let inv = 1.0 / comp.voxels.len() as f64;
            let feature: Vec<f64> = sum.into_iter().map(|s| s * inv).collect();
            let mean_latents = Mat::from_shape_vec((n, d_enc), feature.clone()).expect("n·d_enc values");
            Ok(CoarseNode {
                id,
                centroid: centroid(&grid, &comp.voxels),
                voxels: comp.voxels,
                feature,
                mean_latents,
                composite_code: comp.code,
            })
        })
        .collect()
}

fn coarse_level(nodes: Vec<CoarseNode>, cfg: &GraphConfig, n: usize) -> GraphLevel<CoarseNode> {
    let cents: Vec<[f64; 3]> = nodes.iter().map(|c| c.centroid).collect();
    let edges = knn_edges(&cents, cfg.k, cfg.delta_max);
    let mut feats = Mat::zeros((edges.len(), n * n));
    for (e, &(u, v)) in edges.iter().enumerate() {
        let a: Vec<&[f64]> = nodes[u].mean_latents.rows().into_iter().map(|r| r.to_slice().expect("row")).collect();
        let b: Vec<&[f64]> = nodes[v].mean_latents.rows().into_iter().map(|r| r.to_slice().expect("row")).collect();
        feats.row_mut(e).assign(&ndarray::Array1::from(cosine_matrix(&a, &b)));
    }
    GraphLevel {
        nodes,
        edges,
        edge_features: feats,
        feature_side: n,
    }
}

/// Supervoxels inside each habitat plus the fine-level kNN graph.
pub fn fine_level(
    structural: &StructuralVolume,
    mask: &[bool],
    coarse: &[CoarseNode],
    cfg: &GraphConfig,
) -> (GraphLevel<FineNode>, Assignment) {
    let grid = structural.grid;
    let c = structural.channels;
    let normalized = standardize_over(structural, mask);
    let mut nodes = Vec::new();
    for parent in coarse {
        let target = parent.voxels.len().div_ceil(cfg.voxels_per_supervoxel).max(1);
        let sets = supervoxelize(&normalized, &parent.voxels, target, cfg.slic());
        for voxels in sets {
            let mut feature = vec![0.0; c];
            for &v in &voxels {
                for (f, x) in feature.iter_mut().zip(structural.voxel(v)) {
                    *f += x;
                }
            }
            let inv = 1.0 / voxels.len() as f64;
            feature.iter_mut().for_each(|f| *f *= inv);
            nodes.push(FineNode {
                id: nodes.len(),
                parent: parent.id,
                centroid: centroid(&grid, &voxels),
                voxels,
                feature,
            });
        }
    }
    let cents: Vec<[f64; 3]> = nodes.iter().map(|f| f.centroid).collect();
    let edges = knn_edges(&cents, cfg.k, cfg.delta_max);
    let mut feats = Mat::zeros((edges.len(), c * c));
    for (e, &(u, v)) in edges.iter().enumerate() {
        feats
            .row_mut(e)
            .assign(&ndarray::Array1::from(normalized_outer(&nodes[u].feature, &nodes[v].feature)));
    }
    let assignment = Assignment {
        parent: nodes.iter().map(|f| f.parent).collect(),
        num_coarse: coarse.len(),
    };
    (
        GraphLevel {
            nodes,
            edges,
            edge_features: feats,
            feature_side: c,
        },
        assignment,
    )
}

pub fn build_hierarchical_graph(
    case_id: &str,
    label: usize,
    perfusion: &PerfusionVolume,
    structural: &StructuralVolume,
    model: &VqVae,
    cfg: &GraphConfig,
) -> Result<HierarchicalGraph> {
    cfg.validate()?;
    if structural.grid != perfusion.grid() {
        return Err(Error::Consistency("structural and perfusion grids differ".into()));
    }
    let (map, enc) = build_label_map(perfusion, model)?;
    let (n, d) = (model.arch.n, model.arch.d_enc);
    let coarse_nodes = coarse_nodes(&map, &enc, n, d, cfg.min_component_size)?;
    let (fine, assignment) = fine_level(structural, perfusion.mask(), &coarse_nodes, cfg);
    let coarse = coarse_level(coarse_nodes, cfg, n);
    Ok(HierarchicalGraph {
        case_id: case_id.to_string(),
        label,
        grid: perfusion.grid(),
        coarse,
        fine,
        assignment,
        label_map: map,
        k_codes: model.arch.k,
        n_positions: n,
        d_enc: d,
        channels: structural.channels,
    })
}

fn voxel_table(sets: impl Iterator<Item = Vec<usize>>) -> (Vec<i64>, Vec<i64>) {
    let mut runs = Vec::new();
    let mut offsets = vec![0i64];
    for s in sets {
        for (start, len) in rle_encode(&s) {
            runs.push(start as i64);
            runs.push(len as i64);
        }
        offsets.push((runs.len() / 2) as i64);
    }
    (runs, offsets)
}

fn voxel_sets(runs: &[i64], offsets: &[i64]) -> Vec<Vec<usize>> {
    offsets
        .windows(2)
        .map(|w| {
            let r: Vec<(usize, usize)> = (w[0] as usize..w[1] as usize)
                .map(|i| (runs[2 * i] as usize, runs[2 * i + 1] as usize))
                .collect();
            rle_decode(&r)
        })
        .collect()
}

fn flat_edges(edges: &[(usize, usize)]) -> Vec<i64> {
    edges.iter().flat_map(|&(u, v)| [u as i64, v as i64]).collect()
}

fn unflat_edges(x: &[i64]) -> Vec<(usize, usize)> {
    x.chunks(2).map(|p| (p[0] as usize, p[1] as usize)).collect()
}

fn centroids_mat(c: impl Iterator<Item = [f64; 3]>) -> Vec<f64> {
    c.flat_map(|p| p.into_iter()).collect()
}

impl HierarchicalGraph {
    pub fn to_archive(&self, config_hash: &str, cfg: &GraphConfig) -> Archive {
        let mut a = Archive::new(json!({
            "kind": "hierarchical-graph",
            "case_id": self.case_id,
            "label": self.label,
            "grid": self.grid.shape,
            "K": self.k_codes,
            "N": self.n_positions,
            "d_enc": self.d_enc,
            "C": self.channels,
            "k": cfg.k,
            "delta_max": cfg.delta_max,
            "config_hash": config_hash,
            "num_coarse": self.coarse.num_nodes(),
            "num_fine": self.fine.num_nodes(),
        }));
        let nc = self.coarse.num_nodes();
        let nf = self.fine.num_nodes();
        let d_flat = self.n_positions * self.d_enc;
        a.put_f64("coarse.centroids", vec![nc, 3], centroids_mat(self.coarse.nodes.iter().map(|n| n.centroid)));
        a.put_f64(
            "coarse.features",
            vec![nc, d_flat],
            self.coarse.nodes.iter().flat_map(|n| n.feature.iter().copied()).collect(),
        );
        a.put_i64("coarse.codes", vec![nc], self.coarse.nodes.iter().map(|n| n.composite_code).collect());
        let (runs, offs) = voxel_table(self.coarse.nodes.iter().map(|n| n.voxels.clone()));
        a.put_i64("coarse.voxel_runs", vec![runs.len() / 2, 2], runs);
        a.put_i64("coarse.voxel_offsets", vec![offs.len()], offs);
        a.put_i64("coarse.edges", vec![self.coarse.edges.len(), 2], flat_edges(&self.coarse.edges));
        a.put_mat("coarse.edge_features", &self.coarse.edge_features);
        a.put_f64("fine.centroids", vec![nf, 3], centroids_mat(self.fine.nodes.iter().map(|n| n.centroid)));
        a.put_f64(
            "fine.features",
            vec![nf, self.channels],
            self.fine.nodes.iter().flat_map(|n| n.feature.iter().copied()).collect(),
        );
        let (runs, offs) = voxel_table(self.fine.nodes.iter().map(|n| n.voxels.clone()));
        a.put_i64("fine.voxel_runs", vec![runs.len() / 2, 2], runs);
        a.put_i64("fine.voxel_offsets", vec![offs.len()], offs);
        a.put_i64("fine.edges", vec![self.fine.edges.len(), 2], flat_edges(&self.fine.edges));
        a.put_mat("fine.edge_features", &self.fine.edge_features);
        a.put_i64("assignment.coo", vec![nf, 2], flat_edges(&self.assignment.coo()));
        a.put_i64("label_map", vec![self.grid.len()], self.label_map.labels().to_vec());
        a
    }

    pub fn from_archive(a: &Archive, origin: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(origin, r.to_string());
        let meta = &a.meta;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("hierarchical-graph") {
            return Err(bad("not a graph cache file"));
        }
        let get_usize = |k: &str| meta.get(k).and_then(|v| v.as_u64()).map(|v| v as usize).ok_or_else(|| bad(k));
        let grid: [usize; 3] = serde_json::from_value(meta["grid"].clone()).map_err(|e| bad(&e.to_string()))?;
        let grid = Grid { shape: grid };
        let (kc, n, d, c) = (get_usize("K")?, get_usize("N")?, get_usize("d_enc")?, get_usize("C")?);
        let label = get_usize("label")?;
        let case_id = meta["case_id"].as_str().ok_or_else(|| bad("case_id"))?.to_string();
        let cent = |name: &str| -> Result<Vec<[f64; 3]>> {
            Ok(a.get_f64(name)?.1.chunks(3).map(|p| [p[0], p[1], p[2]]).collect())
        };
        let coarse_vox = voxel_sets(a.get_i64("coarse.voxel_runs")?.1, a.get_i64("coarse.voxel_offsets")?.1);
        let coarse_feat = a.get_f64("coarse.features")?.1;
        let codes = a.get_i64("coarse.codes")?.1;
        let coarse_cent = cent("coarse.centroids")?;
        let d_flat = n * d;
        if coarse_feat.len() != coarse_vox.len() * d_flat || codes.len() != coarse_vox.len() {
            return Err(bad("coarse tables disagree in length"));
        }
        let coarse_nodes: Vec<CoarseNode> = coarse_vox
            .into_iter()
            .enumerate()
            .map(|(id, voxels)| {
                let feature = coarse_feat[id * d_flat..(id + 1) * d_flat].to_vec();
                CoarseNode {
                    id,
                    voxels,
                    centroid: coarse_cent[id],
                    mean_latents: Mat::from_shape_vec((n, d), feature.clone()).expect("n·d values"),
                    feature,
                    composite_code: codes[id],
                }
            })
            .collect();
        let coo = unflat_edges(a.get_i64("assignment.coo")?.1);
        let fine_vox = voxel_sets(a.get_i64("fine.voxel_runs")?.1, a.get_i64("fine.voxel_offsets")?.1);
        let fine_feat = a.get_f64("fine.features")?.1;
        let fine_cent = cent("fine.centroids")?;
        if coo.len() != fine_vox.len() || fine_feat.len() != fine_vox.len() * c {
            return Err(bad("fine tables disagree in length"));
        }
        let fine_nodes: Vec<FineNode> = fine_vox
            .into_iter()
            .enumerate()
            .map(|(id, voxels)| FineNode {
                id,
                parent: coo[id].1,
                voxels,
                centroid: fine_cent[id],
                feature: fine_feat[id * c..(id + 1) * c].to_vec(),
            })
            .collect();
        let num_coarse = coarse_nodes.len();
        let label_map = LabelMap::new(grid, kc, n, a.get_i64("label_map")?.1.to_vec())?;
        Ok(Self {
            case_id,
            label,
            grid,
            coarse: GraphLevel {
                nodes: coarse_nodes,
                edges: unflat_edges(a.get_i64("coarse.edges")?.1),
                edge_features: a.get_mat("coarse.edge_features")?,
                feature_side: n,
            },
            fine: GraphLevel {
                nodes: fine_nodes,
                edges: unflat_edges(a.get_i64("fine.edges")?.1),
                edge_features: a.get_mat("fine.edge_features")?,
                feature_side: c,
            },
            assignment: Assignment {
                parent: coo.iter().map(|p| p.1).collect(),
                num_coarse,
            },
            label_map,
            k_codes: kc,
            n_positions: n,
            d_enc: d,
            channels: c,
        })
    }

    pub fn save(&self, path: &Path, config_hash: &str, cfg: &GraphConfig) -> Result<()> {
        self.to_archive(config_hash, cfg).write(path)
    }

    /// Load a cached graph, refusing one built under a different config hash.
    pub fn load(path: &Path, expected_hash: &str) -> Result<Self> {
        let a = Archive::read(path)?;
        let found = a.meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or("").to_string();
        if found != expected_hash {
            return Err(Error::StaleCache {
                path: path.to_path_buf(),
                found,
                expected: expected_hash.to_string(),
            });
        }
        Self::from_archive(&a, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cohort, PhantomSpec};
    use crate::signal::vqvae::VqVaeArch;

    fn small_case() -> (crate::phantom::PhantomCase, VqVae) {
        let spec = PhantomSpec {
            num_cases: 1,
            grid_shape: [16, 16, 10],
            ..Default::default()
        };
        let case = generate_cohort(&spec).unwrap().remove(0);
        let arch = VqVaeArch {
            d_enc: 8,
            hidden: [4, 4],
            ..Default::default()
        };
        (case, VqVae::new(arch, 2).unwrap())
    }

    #[test]
    fn built_graph_is_sound_and_round_trips() {
        let (case, model) = small_case();
        let cfg = GraphConfig::default();
        let g = build_hierarchical_graph(&case.id, case.label, &case.perfusion, &case.structural, &model, &cfg).unwrap();
        assert!(integrity_report(&g, case.mask()).is_empty(), "{:?}", integrity_report(&g, case.mask()));
        assert_eq!(g.coarse.edge_dim(), 9);
        assert_eq!(g.fine.edge_dim(), 16);
        for (e, &(u, v)) in g.coarse.edges.iter().enumerate() {
            assert!(crate::graphs::edges::distance(&g.coarse.nodes[u].centroid, &g.coarse.nodes[v].centroid) <= cfg.delta_max);
            assert!(g.coarse.edge_features.row(e).iter().all(|x| x.abs() <= 1.0 + 1e-9));
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.hpg");
        g.save(&p, "abc", &cfg).unwrap();
        assert_eq!(HierarchicalGraph::load(&p, "abc").unwrap(), g);
        assert!(matches!(HierarchicalGraph::load(&p, "xyz"), Err(Error::StaleCache { .. })));
    }

    #[test]
    fn coarse_feature_is_mean_latent() {
        let (case, model) = small_case();
        let (map, enc) = build_label_map(&case.perfusion, &model).unwrap();
        let nodes = coarse_nodes(&map, &enc, 3, 8, 5).unwrap();
        let node = nodes.iter().max_by_key(|n| n.voxels.len()).unwrap();
        let mut brute = vec![0.0; 24];
        for &v in &node.voxels {
            let i = enc.voxels.iter().position(|&x| x == v).unwrap();
            for (b, x) in brute.iter_mut().zip(enc.latents.row(i)) {
                *b += x / node.voxels.len() as f64;
            }
        }
        for (a, b) in node.feature.iter().zip(&brute) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
