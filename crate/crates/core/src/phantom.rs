//! Synthetic perfusion phantoms with genotype-linked hemodynamic habitats.
//!
//! Each case is a connected tumour blob partitioned into contiguous habitats.
//! Every habitat carries one kinetic kind; its voxels follow a tri-phasic
//! curve (flat baseline, gamma-variate first-pass drop, smaller delayed
//! recirculation dip, incomplete recovery) plus Gaussian noise. The label is
//! 1 exactly when the hypervascular volume fraction exceeds one half.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{self, Dtype};
use crate::par;
use crate::seed;
use crate::signal::curves::{check_timepoints, PerfusionVolume, TimeIntensityCurve};
use crate::volume::{Grid, StructuralVolume, STRUCTURAL_CHANNELS};

pub const MIN_TUMOUR_VOXELS: usize = 200;
const MASK_ATTEMPTS: usize = 24;
const GAMMA_SHAPE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KineticKind {
    NormalVascular,
    Hypervascular,
    Necrotic,
    Background,
}

/// Closed-form kinetic parameters. Times are fractions of the acquisition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KineticParams {
    /// Peak fractional signal drop of the first pass.
    pub depth: f64,
    /// Delay from bolus arrival to the first-pass trough.
    pub time_to_peak: f64,
    /// Recirculation dip height relative to the first pass.
    pub recirculation: f64,
    /// Fraction of the drop recovered after the bolus (1 = full).
    pub recovery: f64,
}

impl KineticKind {
    pub const TUMOUR: [KineticKind; 3] = [
        KineticKind::NormalVascular,
        KineticKind::Hypervascular,
        KineticKind::Necrotic,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Ok(match id {
            0 => KineticKind::NormalVascular,
            1 => KineticKind::Hypervascular,
            2 => KineticKind::Necrotic,
            3 => KineticKind::Background,
            _ => return Err(Error::param(format!("unknown kinetic kind {id}"))),
        })
    }

    pub fn params(self) -> KineticParams {
        let (depth, time_to_peak, recirculation, recovery) = match self {
            KineticKind::NormalVascular => (0.30, 0.10, 0.15, 0.97),
            KineticKind::Hypervascular => (0.60, 0.07, 0.30, 0.80),
            KineticKind::Necrotic => (0.10, 0.16, 0.05, 1.00),
            KineticKind::Background => (0.20, 0.09, 0.10, 1.00),
        };
        KineticParams {
            depth,
            time_to_peak,
            recirculation,
            recovery,
        }
    }

    /// Mean structural intensity per channel (T1, T1CE, T2, FLAIR).
    pub fn structural_means(self) -> [f64; STRUCTURAL_CHANNELS] {
        match self {
            KineticKind::NormalVascular => [0.8, 1.0, 1.2, 1.1],
            KineticKind::Hypervascular => [0.7, 1.8, 1.3, 1.4],
            KineticKind::Necrotic => [0.5, 0.6, 1.9, 1.0],
            KineticKind::Background => [1.0, 1.0, 1.0, 1.0],
        }
    }
}

/// Per-case acquisition settings shared by all voxels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub baseline: f64,
    /// Bolus arrival as a fraction of the acquisition.
    pub arrival: f64,
}

impl Default for Acquisition {
    fn default() -> Self {
        Self {
            baseline: 100.0,
            arrival: 0.18,
        }
    }
}

fn gamma_variate(tau: f64, onset: f64, time_to_peak: f64) -> f64 {
    if tau <= onset {
        return 0.0;
    }
    let u = (tau - onset) / time_to_peak;
    (u.powf(GAMMA_SHAPE) * (GAMMA_SHAPE * (1.0 - u)).exp()).max(0.0)
}

/// Noise-free signal of `kind` at `t` samples.
pub fn kinetic_curve(kind: KineticKind, t: usize, acq: &Acquisition) -> Vec<f64> {
    let p = kind.params();
    (0..t)
        .map(|i| {
            let tau = i as f64 / (t - 1) as f64;
            let first = gamma_variate(tau, acq.arrival, p.time_to_peak);
            let second = p.recirculation
                * gamma_variate(tau, acq.arrival + 2.2 * p.time_to_peak, 1.6 * p.time_to_peak);
            let since = (tau - acq.arrival).max(0.0);
            let leak = (1.0 - p.recovery) * (1.0 - (-since / (2.0 * p.time_to_peak)).exp());
            acq.baseline * (1.0 - p.depth * (first + second + leak))
        })
        .collect()
}

/// Synthesize one curve with the default acquisition.
pub fn synth_tic(kind: KineticKind, t: usize, noise_sigma: f64, rng: &mut impl Rng) -> Result<TimeIntensityCurve> {
    synth_tic_with(kind, t, noise_sigma, &Acquisition::default(), rng)
}

pub fn synth_tic_with(
    kind: KineticKind,
    t: usize,
    noise_sigma: f64,
    acq: &Acquisition,
    rng: &mut impl Rng,
) -> Result<TimeIntensityCurve> {
    check_timepoints(t)?;
    if !(noise_sigma >= 0.0) {
        return Err(Error::param("noise sigma must be non-negative"));
    }
    let mut v = kinetic_curve(kind, t, acq);
    if noise_sigma > 0.0 {
        let n = Normal::new(0.0, noise_sigma).expect("sigma validated");
        for x in &mut v {
            *x += n.sample(rng);
        }
    }
    TimeIntensityCurve::new(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub grid_shape: [usize; 3],
    /// Inclusive range of acquisition lengths; each case draws one.
    pub num_timepoints: [usize; 2],
    pub num_habitats_range: [usize; 2],
    pub num_cases: usize,
    pub class_balance: f64,
    pub noise_sigma: f64,
    pub structural_noise: f64,
    /// Validation and test fractions; the rest is training.
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid_shape: [20, 20, 14],
            num_timepoints: [45, 60],
            num_habitats_range: [3, 7],
            num_cases: 200,
            class_balance: 0.5,
            noise_sigma: 1.5,
            structural_noise: 0.05,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 7,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_shape.iter().any(|&d| d < 8) {
            return Err(Error::param("phantom grid dimensions must be at least 8"));
        }
        let [t0, t1] = self.num_timepoints;
        check_timepoints(t0)?;
        check_timepoints(t1)?;
        if t0 > t1 {
            return Err(Error::param("num_timepoints range is reversed"));
        }
        let [h0, h1] = self.num_habitats_range;
        if h0 == 0 || h0 > h1 {
            return Err(Error::param("num_habitats_range must be a non-empty positive interval"));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return Err(Error::param("class_balance must lie in (0, 1)"));
        }
        if !(self.noise_sigma >= 0.0 && self.structural_noise >= 0.0) {
            return Err(Error::param("noise levels must be non-negative"));
        }
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && self.val_fraction + self.test_fraction < 1.0) {
            return Err(Error::param("split fractions must be non-negative and sum below 1"));
        }
        if self.num_cases == 0 {
            return Err(Error::param("num_cases must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.grid_shape[0], self.grid_shape[1], self.grid_shape[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub id: String,
    pub perfusion: PerfusionVolume,
    pub structural: StructuralVolume,
    pub label: usize,
    /// Habitat id per voxel, −1 outside the mask.
    pub ground_truth_habitats: Vec<i64>,
    pub habitat_kinds: Vec<KineticKind>,
    pub acquisition: Acquisition,
    pub split: Split,
}

impl PhantomCase {
    pub fn mask(&self) -> &[bool] {
        self.perfusion.mask()
    }

    pub fn hypervascular_fraction(&self) -> f64 {
        hyper_fraction(&self.ground_truth_habitats, &self.habitat_kinds)
    }

    /// Generator kind per voxel (`None` outside the mask).
    pub fn kind_at(&self, voxel: usize) -> Option<KineticKind> {
        let h = self.ground_truth_habitats[voxel];
        (h >= 0).then(|| self.habitat_kinds[h as usize])
    }
}

fn hyper_fraction(habitats: &[i64], kinds: &[KineticKind]) -> f64 {
    let mut total = 0usize;
    let mut hyper = 0usize;
    for &h in habitats.iter().filter(|&&h| h >= 0) {
        total += 1;
        if kinds[h as usize] == KineticKind::Hypervascular {
            hyper += 1;
        }
    }
    hyper as f64 / total.max(1) as f64
}

/// Largest 26-connected component of `mask`.
pub(crate) fn largest_component(grid: &Grid, mask: &[bool]) -> Vec<bool> {
    let mut comp = vec![usize::MAX; grid.len()];
    let mut best: Option<(usize, usize)> = None;
    let mut n_comp = 0;
    let mut queue = VecDeque::new();
    for s in 0..grid.len() {
        if !mask[s] || comp[s] != usize::MAX {
            continue;
        }
        comp[s] = n_comp;
        queue.push_back(s);
        let mut size = 0;
        while let Some(v) = queue.pop_front() {
            size += 1;
            for &n in &grid.neighbors26(v) {
                if mask[n] && comp[n] == usize::MAX {
                    comp[n] = n_comp;
                    queue.push_back(n);
                }
            }
        }
        if best.is_none_or(|(_, bs)| size > bs) {
            best = Some((n_comp, size));
        }
        n_comp += 1;
    }
    match best {
        Some((id, _)) => comp.iter().map(|&c| c == id).collect(),
        None => vec![false; grid.len()],
    }
}

fn synth_mask(grid: &Grid, rng: &mut impl Rng) -> Result<Vec<bool>> {
    let dims = grid.shape.map(|d| d as f64);
    for _ in 0..MASK_ATTEMPTS {
        let n_ell = rng.random_range(2..=4);
        let ellipsoids: Vec<([f64; 3], [f64; 3])> = (0..n_ell)
            .map(|_| {
                let c = dims.map(|d| d / 2.0 + rng.random_range(-0.15..0.15) * d);
                let r = dims.map(|d| rng.random_range(0.20..0.32) * d);
                (c, r)
            })
            .collect();
        let mask: Vec<bool> = (0..grid.len())
            .map(|i| {
                let p = grid.coords(i).map(|x| x as f64);
                ellipsoids.iter().any(|(c, r)| {
                    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
                })
            })
            .collect();
        let blob = largest_component(grid, &mask);
        if blob.iter().filter(|&&m| m).count() >= MIN_TUMOUR_VOXELS {
            return Ok(blob);
        }
    }
    Err(Error::Generation(format!(
        "grid {:?} cannot host a connected tumour of {MIN_TUMOUR_VOXELS} voxels",
        grid.shape
    )))
}

/// Partition the mask into `n` contiguous regions by multi-source BFS from
/// spread-out seeds (geodesic Voronoi cells are connected by construction).
fn partition(grid: &Grid, mask: &[bool], n: usize, rng: &mut impl Rng) -> Vec<i64> {
    let voxels: Vec<usize> = (0..grid.len()).filter(|&i| mask[i]).collect();
    let n = n.clamp(1, voxels.len());
    let mut seeds = vec![voxels[rng.random_range(0..voxels.len())]];
    let dist2 = |a: usize, b: usize| {
        let (p, q) = (grid.coords(a), grid.coords(b));
        (0..3).map(|k| (p[k] as f64 - q[k] as f64).powi(2)).sum::<f64>()
    };
    while seeds.len() < n {
        let cand = (0..16)
            .map(|_| voxels[rng.random_range(0..voxels.len())])
            .filter(|c| !seeds.contains(c))
            .max_by(|&a, &b| {
                let da = seeds.iter().map(|&s| dist2(a, s)).fold(f64::INFINITY, f64::min);
                let db = seeds.iter().map(|&s| dist2(b, s)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            });
        if let Some(c) = cand {
            seeds.push(c);
        }
    }
    let mut label = vec![-1i64; grid.len()];
    let mut queue = VecDeque::new();
    for (r, &s) in seeds.iter().enumerate() {
        label[s] = r as i64;
        queue.push_back(s);
    }
    while let Some(v) = queue.pop_front() {
        for &nb in &grid.neighbors26(v) {
            if mask[nb] && label[nb] < 0 {
                label[nb] = label[v];
                queue.push_back(nb);
            }
        }
    }
    label
}

/// Choose habitat kinds: class 1 tumours are at least 65% hypervascular by
/// volume, class 0 tumours have normalized vasculature with no hypervascular
/// habitat at all.
fn assign_kinds(habitats: &[i64], n: usize, target: usize, rng: &mut impl Rng) -> Vec<KineticKind> {
    let mut sizes = vec![0usize; n];
    for &h in habitats.iter().filter(|&&h| h >= 0) {
        sizes[h as usize] += 1;
    }
    let total: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut kinds: Vec<Option<KineticKind>> = vec![None; n];
    let mut hyper = 0usize;
    for &r in order.iter().filter(|_| target == 1) {
        if (hyper as f64 / total as f64) < 0.65 {
            kinds[r] = Some(KineticKind::Hypervascular);
            hyper += sizes[r];
        }
    }
    kinds
        .into_iter()
        .map(|k| {
            k.unwrap_or_else(|| {
                if rng.random_bool(0.5) {
                    KineticKind::NormalVascular
                } else {
                    KineticKind::Necrotic
                }
            })
        })
        .collect()
}

fn generate_case(spec: &PhantomSpec, index: usize) -> Result<PhantomCase> {
    let grid = spec.grid();
    let mut rng = seed::rng(seed::derive_indexed(spec.seed, "phantom-case", index as u64));
    let target = usize::from(rng.random_bool(spec.class_balance));
    let t = rng.random_range(spec.num_timepoints[0]..=spec.num_timepoints[1]);
    let acq = Acquisition {
        baseline: rng.random_range(80.0..120.0),
        arrival: 0.18 + rng.random_range(-0.02..0.02),
    };
    let mask = synth_mask(&grid, &mut rng)?;
    let n_hab = rng.random_range(spec.num_habitats_range[0]..=spec.num_habitats_range[1]);
    let habitats = partition(&grid, &mask, n_hab, &mut rng);
    let n_hab = habitats.iter().copied().max().map_or(0, |m| m as usize + 1);
    let kinds = assign_kinds(&habitats, n_hab, target, &mut rng);
    let label = usize::from(hyper_fraction(&habitats, &kinds) > 0.5);
    debug_assert_eq!(label, target);

    let structural_noise = Normal::new(0.0, spec.structural_noise.max(0.0)).expect("validated");
    let habitat_means: Vec<[f64; STRUCTURAL_CHANNELS]> = kinds
        .iter()
        .map(|k| k.structural_means().map(|m| m + 0.05 * rng.random_range(-1.0..1.0)))
        .collect();
    let background_curve = kinetic_curve(KineticKind::Background, t, &acq);
    let kind_curves: Vec<Vec<f64>> = kinds.iter().map(|&k| kinetic_curve(k, t, &acq)).collect();
    let perf_noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("validated");

    let mut perf = Vec::with_capacity(grid.len() * t);
    let mut structural = Vec::with_capacity(grid.len() * STRUCTURAL_CHANNELS);
    for v in 0..grid.len() {
        let h = habitats[v];
        let (curve, means) = if h >= 0 {
            (&kind_curves[h as usize], habitat_means[h as usize])
        } else {
            (&background_curve, KineticKind::Background.structural_means())
        };
        perf.extend(curve.iter().map(|&x| x + perf_noise.sample(&mut rng)));
        structural.extend(means.iter().map(|&m| m + structural_noise.sample(&mut rng)));
    }
    Ok(PhantomCase {
        id: format!("case_{index:04}"),
        perfusion: PerfusionVolume::new(grid, t, perf, mask)?,
        structural: StructuralVolume::new(grid, STRUCTURAL_CHANNELS, structural)?,
        label,
        ground_truth_habitats: habitats,
        habitat_kinds: kinds,
        acquisition: acq,
        split: Split::Train,
    })
}

/// Apportion `total` slots over classes proportionally (largest remainder).
fn apportion(class_sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = class_sizes.iter().sum();
    if n == 0 {
        return vec![0; class_sizes.len()];
    }
    let quotas: Vec<f64> = class_sizes.iter().map(|&c| c as f64 * total as f64 / n as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..class_sizes.len()).collect();
    rest.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
    let mut left = total - alloc.iter().sum::<usize>();
    for c in rest {
        if left == 0 {
            break;
        }
        if alloc[c] < class_sizes[c] {
            alloc[c] += 1;
            left -= 1;
        }
    }
    alloc
}

/// Stratified split with exact overall validation and test counts.
pub fn stratified_split(labels: &[usize], val_fraction: f64, test_fraction: f64, seed_value: u64) -> Vec<Split> {
    let n = labels.len();
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let n_val = (val_fraction * n as f64).round() as usize;
    let n_test = (test_fraction * n as f64).round() as usize;
    let val = apportion(&sizes, n_val);
    let remaining: Vec<usize> = sizes.iter().zip(&val).map(|(s, v)| s - v).collect();
    let test = apportion(&remaining, n_test);
    let mut rng = seed::rng(seed::derive(seed_value, "split"));
    let mut out = vec![Split::Train; n];
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        for (k, &i) in members.iter().enumerate() {
            out[i] = if k < val[c] {
                Split::Val
            } else if k < val[c] + test[c] {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    out
}

pub fn generate_cohort(spec: &PhantomSpec) -> Result<Vec<PhantomCase>> {
    spec.validate()?;
    let mut cases = par::map_range(spec.num_cases, |i| generate_case(spec, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = cases.iter().map(|c| c.label).collect();
    let splits = stratified_split(&labels, spec.val_fraction, spec.test_fraction, spec.seed);
    for (c, s) in cases.iter_mut().zip(splits) {
        c.split = s;
    }
    Ok(cases)
}

// ---------------------------------------------------------------------------
// On-disk layout

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub num_timepoints: usize,
    pub habitat_kinds: Vec<KineticKind>,
    pub hypervascular_fraction: f64,
    pub tumour_voxels: usize,
    pub acquisition: Acquisition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConstants {
    pub kinetics: Vec<(KineticKind, KineticParams)>,
    pub structural_means: Vec<(KineticKind, [f64; STRUCTURAL_CHANNELS])>,
    pub gamma_shape: f64,
    pub recirculation_delay: String,
    pub baseline_range: [f64; 2],
    pub arrival_range: [f64; 2],
    pub habitat_structural_jitter: f64,
    pub label_rule: String,
    pub hyper_fraction_targets: String,
}

impl GeneratorConstants {
    pub fn current() -> Self {
        let all = [
            KineticKind::NormalVascular,
            KineticKind::Hypervascular,
            KineticKind::Necrotic,
            KineticKind::Background,
        ];
        Self {
            kinetics: all.iter().map(|&k| (k, k.params())).collect(),
            structural_means: all.iter().map(|&k| (k, k.structural_means())).collect(),
            gamma_shape: GAMMA_SHAPE,
            recirculation_delay: "onset = arrival + 2.2·ttp, ttp = 1.6·ttp".into(),
            baseline_range: [80.0, 120.0],
            arrival_range: [0.16, 0.20],
            habitat_structural_jitter: 0.05,
            label_rule: "label = 1 iff hypervascular volume fraction > 0.5".into(),
            hyper_fraction_targets: "label 1: ≥ 0.65, label 0: 0 (no hypervascular habitat)".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub version: u32,
    pub spec: PhantomSpec,
    pub generator: GeneratorConstants,
    pub cases: Vec<CaseEntry>,
}

impl CohortManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn ids_in(&self, split: Split) -> Vec<&CaseEntry> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }
}

pub fn case_dir(root: &Path, id: &str) -> PathBuf {
    root.join(id)
}

pub fn write_case(root: &Path, case: &PhantomCase) -> Result<()> {
    let dir = case_dir(root, &case.id);
    let g = case.perfusion.grid();
    let [h, w, d] = g.shape;
    let t = case.perfusion.timepoints();
    nifti::write(&dir.join("perfusion.nii.gz"), &[h, w, d, t], case.perfusion.data(), Dtype::F32, "perfusion")?;
    nifti::write(
        &dir.join("structural.nii.gz"),
        &[h, w, d, case.structural.channels],
        &case.structural.data,
        Dtype::F32,
        "T1 T1CE T2 FLAIR",
    )?;
    let mask: Vec<f64> = case.mask().iter().map(|&m| f64::from(u8::from(m))).collect();
    nifti::write(&dir.join("mask.nii.gz"), &[h, w, d], &mask, Dtype::U8, "tumour mask")?;
    let hab: Vec<f64> = case.ground_truth_habitats.iter().map(|&x| x as f64).collect();
    nifti::write(&dir.join("habitats.nii.gz"), &[h, w, d], &hab, Dtype::I16, "habitats")
}

pub fn write_cohort(root: &Path, spec: &PhantomSpec, cases: &[PhantomCase]) -> Result<CohortManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    par::try_map(cases, |c| write_case(root, c))?;
    let manifest = CohortManifest {
        version: 1,
        spec: spec.clone(),
        generator: GeneratorConstants::current(),
        cases: cases
            .iter()
            .map(|c| CaseEntry {
                id: c.id.clone(),
                label: c.label,
                split: c.split,
                num_timepoints: c.perfusion.timepoints(),
                habitat_kinds: c.habitat_kinds.clone(),
                hypervascular_fraction: c.hypervascular_fraction(),
                tumour_voxels: c.mask().iter().filter(|&&m| m).count(),
                acquisition: c.acquisition,
            })
            .collect(),
    };
    manifest.write(&root.join("cohort.json"))?;
    Ok(manifest)
}

fn grid_of(dims: &[usize], path: &Path) -> Result<Grid> {
    if dims.len() < 3 {
        return Err(Error::format(path, "expected at least 3 dimensions"));
    }
    Ok(Grid::new(dims[0], dims[1], dims[2]))
}

/// Load a case written by [`write_case`].
pub fn read_case(root: &Path, entry: &CaseEntry) -> Result<PhantomCase> {
    let dir = case_dir(root, &entry.id);
    let need = |name: &str| {
        let p = dir.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                path: p,
                stage: "generate-phantom".into(),
            })
        }
    };
    let perf_path = need("perfusion.nii.gz")?;
    let perf = nifti::read(&perf_path)?;
    let grid = grid_of(&perf.dims, &perf_path)?;
    let t = perf.dims.get(3).copied().unwrap_or(1);
    let mask_path = need("mask.nii.gz")?;
    let mask_v = nifti::read(&mask_path)?;
    if grid_of(&mask_v.dims, &mask_path)? != grid {
        return Err(Error::Consistency(format!("{}: mask and perfusion grids differ", entry.id)));
    }
    let mask: Vec<bool> = mask_v.data.iter().map(|&m| m > 0.5).collect();
    let st_path = need("structural.nii.gz")?;
    let st = nifti::read(&st_path)?;
    if grid_of(&st.dims, &st_path)? != grid {
        return Err(Error::Consistency(format!("{}: structural and perfusion grids differ", entry.id)));
    }
    let channels = st.dims.get(3).copied().unwrap_or(1);
    let hab = nifti::read(&need("habitats.nii.gz")?)?;
    Ok(PhantomCase {
        id: entry.id.clone(),
        perfusion: PerfusionVolume::new(grid, t, perf.data, mask)?,
        structural: StructuralVolume::new(grid, channels, st.data)?,
        label: entry.label,
        ground_truth_habitats: hab.data.iter().map(|&x| x.round() as i64).collect(),
        habitat_kinds: entry.habitat_kinds.clone(),
        acquisition: entry.acquisition,
        split: entry.split,
    })
}
