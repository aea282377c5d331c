//! Pipeline stages over on-disk artifacts.
//!
//! Each stage writes a `stamp.json` holding the hash of the configuration that
//! produced it, after all of its artifacts. A stage whose stamp matches the
//! current hash is skipped; a mismatching stamp is a stale-cache error unless
//! `force` is set; a missing upstream stamp names the subcommand to run first.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graphs::{build_hierarchical_graph, integrity_report, HierarchicalGraph};
use crate::model::{GraphTensors, Hgnn, InputDims};
use crate::nifti::{self, Dtype};
use crate::par;
use crate::phantom::{self, CohortManifest, KineticKind, PhantomCase, Split};
use crate::saliency::{case_saliency, region_saliency_summary, write_panel, SaliencyMap};
use crate::seed;
use crate::signal::vqvae::mean_reconstruction_l1;
use crate::signal::{extract_curves, zscore, VqVae};
use crate::train::{case_predictions, train_hgnn, EvaluationReport};

pub const GENERATE_PHANTOM: &str = "generate-phantom";
pub const TRAIN_VQVAE: &str = "train-vqvae";
pub const BUILD_GRAPHS: &str = "build-graphs";
pub const TRAIN_HGNN: &str = "train-hgnn";
pub const EVALUATE: &str = "evaluate";
pub const SALIENCY: &str = "saliency";

/// Where every artifact lives.
#[derive(Clone, Debug)]
pub struct Layout {
    pub data: PathBuf,
    pub cache: PathBuf,
    pub output: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            data: cfg.paths.data_root.clone(),
            cache: cfg.paths.cache_dir.clone(),
            output: cfg.paths.output_dir.clone(),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.data.join("cohort.json")
    }

    pub fn vqvae_dir(&self) -> PathBuf {
        self.cache.join("vqvae")
    }

    pub fn vqvae_model(&self) -> PathBuf {
        self.vqvae_dir().join("model.hgar")
    }

    pub fn graphs_dir(&self) -> PathBuf {
        self.cache.join("graphs")
    }

    pub fn graph(&self, case: &str) -> PathBuf {
        self.graphs_dir().join(case).join("graph.hgar")
    }

    pub fn codes(&self, case: &str) -> PathBuf {
        self.graphs_dir().join(case).join("codes.nii.gz")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output.join("checkpoints")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("hgnn.hgar")
    }

    pub fn evaluation_dir(&self) -> PathBuf {
        self.output.join("evaluation")
    }

    pub fn saliency_dir(&self) -> PathBuf {
        self.output.join("saliency")
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.output.join("resolved_config.toml")
    }

    pub fn stamp(&self, stage: &str) -> PathBuf {
        match stage {
            GENERATE_PHANTOM => self.data.join("stamp.json"),
            TRAIN_VQVAE => self.vqvae_dir().join("stamp.json"),
            BUILD_GRAPHS => self.graphs_dir().join("stamp.json"),
            TRAIN_HGNN => self.checkpoint_dir().join("stamp.json"),
            EVALUATE => self.evaluation_dir().join("stamp.json"),
            SALIENCY => self.saliency_dir().join("stamp.json"),
            other => panic!("unknown stage {other}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub hash: String,
    pub details: Value,
}

fn read_stamp(path: &Path) -> Result<Option<Stamp>> {
    if !path.exists() {
        return Ok(None);
    }
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map(Some).map_err(|e| Error::format(path, e.to_string()))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let s = serde_json::to_string_pretty(v).expect("artifact serializes");
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in rows {
        let line = serde_json::to_string(r).expect("log row serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Outcome of one stage invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: String,
    pub skipped: bool,
    pub details: Value,
}

/// Mean pre-smoothing saliency inside and outside the class-driving habitat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HabitatSaliency {
    pub case_id: String,
    pub label: usize,
    pub target_class: usize,
    pub hypervascular_mean: f64,
    pub complement_mean: f64,
    pub hypervascular_voxels: usize,
    pub complement_voxels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub cases: Vec<HabitatSaliency>,
    /// Voxel-pooled means of per-case max-scaled raw maps.
    pub pooled_hypervascular: f64,
    pub pooled_complement: f64,
}

impl SaliencyReport {
    pub fn ratio(&self) -> f64 {
        self.pooled_hypervascular / self.pooled_complement
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stages: Vec<StageOutcome>,
    pub evaluation: EvaluationReport,
    pub saliency: SaliencyReport,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub layout: Layout,
    pub force: bool,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            layout: Layout::new(&cfg),
            cfg,
            force,
        })
    }

    pub fn write_resolved_config(&self) -> Result<()> {
        let p = self.layout.resolved_config();
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&p, self.cfg.to_toml_string()).map_err(|e| Error::io(&p, e))
    }

    /// `Some(stamp)` when the stage is up to date and may be skipped.
    fn gate(&self, stage: &str, hash: &str) -> Result<Option<Stamp>> {
        let path = self.layout.stamp(stage);
        match read_stamp(&path)? {
            None => Ok(None),
            Some(s) if s.hash == hash && !self.force => Ok(Some(s)),
            Some(_) if self.force => {
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                Ok(None)
            }
            Some(s) => Err(Error::StaleCache {
                path,
                found: s.hash,
                expected: hash.to_string(),
            }),
        }
    }

    /// The upstream stamp must exist and match `hash`.
    fn require(&self, stage: &str, hash: &str) -> Result<Stamp> {
        let path = self.layout.stamp(stage);
        match read_stamp(&path)? {
            None => Err(Error::MissingArtifact {
                path,
                stage: stage.to_string(),
            }),
            Some(s) if s.hash != hash => Err(Error::StaleCache {
                path,
                found: s.hash,
                expected: hash.to_string(),
            }),
            Some(s) => Ok(s),
        }
    }

    fn finish(&self, stage: &str, hash: String, details: Value) -> Result<StageOutcome> {
        let stamp = Stamp {
            stage: stage.to_string(),
            hash,
            details: details.clone(),
        };
        write_json(&self.layout.stamp(stage), &stamp)?;
        Ok(StageOutcome {
            stage: stage.to_string(),
            skipped: false,
            details,
        })
    }

    fn skipped(stage: &str, stamp: Stamp) -> StageOutcome {
        tracing::info!(stage, "up to date; skipping");
        StageOutcome {
            stage: stage.to_string(),
            skipped: true,
            details: stamp.details,
        }
    }

    fn manifest(&self) -> Result<CohortManifest> {
        self.require(GENERATE_PHANTOM, &self.cfg.phantom_hash())?;
        CohortManifest::read(&self.layout.manifest())
    }

    pub fn generate_phantom(&self) -> Result<StageOutcome> {
        let hash = self.cfg.phantom_hash();
        if let Some(s) = self.gate(GENERATE_PHANTOM, &hash)? {
            return Ok(Self::skipped(GENERATE_PHANTOM, s));
        }
        tracing::info!(cases = self.cfg.phantom.num_cases, "generating phantom cohort");
        let cases = phantom::generate_cohort(&self.cfg.phantom)?;
        let manifest = phantom::write_cohort(&self.layout.data, &self.cfg.phantom, &cases)?;
        let count = |s: Split| manifest.ids_in(s).len();
        let positives = manifest.cases.iter().filter(|c| c.label == 1).count();
        self.finish(
            GENERATE_PHANTOM,
            hash,
            json!({
                "cases": manifest.cases.len(),
                "train": count(Split::Train),
                "val": count(Split::Val),
                "test": count(Split::Test),
                "positives": positives,
            }),
        )
    }

    fn read_cases(&self, manifest: &CohortManifest, split: Option<Split>) -> Result<Vec<PhantomCase>> {
        let entries: Vec<_> = manifest.cases.iter().filter(|c| split.is_none_or(|s| c.split == s)).collect();
        par::try_map(&entries, |e| phantom::read_case(&self.layout.data, e))
    }

    /// Z-scored, non-degenerate curves of the given cases.
    fn curves(cases: &[PhantomCase]) -> Result<Vec<Vec<f64>>> {
        let per_case = par::try_map(cases, |c| -> Result<Vec<Vec<f64>>> {
            let mut out = Vec::new();
            for (_, tic) in extract_curves(&c.perfusion)? {
                let z = zscore(&tic)?;
                if !z.degenerate {
                    out.push(z.curve.into_values());
                }
            }
            Ok(out)
        })?;
        Ok(per_case.into_iter().flatten().collect())
    }

    fn sample(mut curves: Vec<Vec<f64>>, cap: usize, seed_value: u64) -> Vec<Vec<f64>> {
        curves.shuffle(&mut seed::rng(seed_value));
        curves.truncate(cap);
        curves
    }

    pub fn train_vqvae(&self) -> Result<StageOutcome> {
        let hash = self.cfg.vqvae_hash();
        let manifest = self.manifest()?;
        if let Some(s) = self.gate(TRAIN_VQVAE, &hash)? {
            return Ok(Self::skipped(TRAIN_VQVAE, s));
        }
        let vq = &self.cfg.vqvae;
        let sample_seed = seed::derive(vq.train.seed, "curve-sample");
        let train_curves = Self::sample(
            Self::curves(&self.read_cases(&manifest, Some(Split::Train))?)?,
            vq.train.max_training_curves,
            sample_seed,
        );
        let val_curves = Self::sample(Self::curves(&self.read_cases(&manifest, Some(Split::Val))?)?, 1000, sample_seed);
        if train_curves.is_empty() {
            return Err(Error::Domain("training split has no informative curves".into()));
        }
        tracing::info!(curves = train_curves.len(), epochs = vq.train.epochs, "training VQ-VAE");
        let mut model = VqVae::new(vq.arch.clone(), seed::derive(vq.train.seed, "init"))?;
        let log = model.train(&train_curves, &vq.train)?;
        let last = log.epochs.last().cloned();
        let val_l1 = if val_curves.is_empty() {
            None
        } else {
            Some(mean_reconstruction_l1(&model, &val_curves)?)
        };
        reset_dir(&self.layout.vqvae_dir())?;
        write_jsonl(&self.layout.vqvae_dir().join("train_log.jsonl"), &log.epochs)?;
        let details = json!({
            "training_curves": train_curves.len(),
            "epochs": log.epochs.len(),
            "final_loss": last.as_ref().map(|e| e.loss),
            "code_usage": last.as_ref().map(|e| e.code_usage.clone()),
            "val_reconstruction_l1": val_l1,
        });
        model.save(
            &self.layout.vqvae_model(),
            json!({
                "config_hash": hash,
                "seed": vq.train.seed,
                "epoch": log.epochs.len(),
                "loss": last.map(|e| e.loss),
            }),
        )?;
        self.finish(TRAIN_VQVAE, hash, details)
    }

    pub fn build_graphs(&self) -> Result<StageOutcome> {
        let hash = self.cfg.graphs_hash();
        let manifest = self.manifest()?;
        self.require(TRAIN_VQVAE, &self.cfg.vqvae_hash())?;
        if let Some(s) = self.gate(BUILD_GRAPHS, &hash)? {
            return Ok(Self::skipped(BUILD_GRAPHS, s));
        }
        let model = VqVae::load(&self.layout.vqvae_model())?;
        reset_dir(&self.layout.graphs_dir())?;
        tracing::info!(cases = manifest.cases.len(), "building hierarchical graphs");
        let rows = par::try_map(&manifest.cases, |entry| -> Result<Value> {
            let case = phantom::read_case(&self.layout.data, entry)?;
            let g = build_hierarchical_graph(&case.id, case.label, &case.perfusion, &case.structural, &model, &self.cfg.graphs)?;
            let problems = integrity_report(&g, case.mask());
            if !problems.is_empty() {
                return Err(Error::Consistency(format!("{}: {}", case.id, problems.join("; "))));
            }
            g.save(&self.layout.graph(&case.id), &hash, &self.cfg.graphs)?;
            let labels: Vec<f64> = g.label_map.labels().iter().map(|&l| l as f64).collect();
            nifti::write(&self.layout.codes(&case.id), &g.grid.shape, &labels, Dtype::I16, "composite codes")?;
            Ok(json!({
                "case": case.id,
                "coarse_nodes": g.coarse.num_nodes(),
                "coarse_edges": g.coarse.edges.len(),
                "fine_nodes": g.fine.num_nodes(),
                "fine_edges": g.fine.edges.len(),
            }))
        })?;
        let mean = |k: &str| rows.iter().map(|r| r[k].as_f64().unwrap_or(0.0)).sum::<f64>() / rows.len().max(1) as f64;
        let details = json!({
            "graphs": rows.len(),
            "mean_coarse_nodes": mean("coarse_nodes"),
            "mean_fine_nodes": mean("fine_nodes"),
        });
        write_json(&self.layout.graphs_dir().join("index.json"), &rows)?;
        self.finish(BUILD_GRAPHS, hash, details)
    }

    fn load_graphs(&self, manifest: &CohortManifest, split: Split) -> Result<Vec<HierarchicalGraph>> {
        let hash = self.cfg.graphs_hash();
        let entries = manifest.ids_in(split);
        par::try_map(&entries, |e| HierarchicalGraph::load(&self.layout.graph(&e.id), &hash))
    }

    fn tensors(graphs: &[HierarchicalGraph]) -> Vec<GraphTensors> {
        par::map(graphs, GraphTensors::from_graph)
    }

    pub fn train_hgnn(&self) -> Result<StageOutcome> {
        let hash = self.cfg.hgnn_hash();
        let manifest = self.manifest()?;
        self.require(BUILD_GRAPHS, &self.cfg.graphs_hash())?;
        if let Some(s) = self.gate(TRAIN_HGNN, &hash)? {
            return Ok(Self::skipped(TRAIN_HGNN, s));
        }
        let train = Self::tensors(&self.load_graphs(&manifest, Split::Train)?);
        let val = Self::tensors(&self.load_graphs(&manifest, Split::Val)?);
        let first = train
            .first()
            .ok_or_else(|| Error::Split("training split is empty".into()))?;
        let dims: InputDims = first.dims();
        let init_seed = seed::derive(self.cfg.seed, "hgnn-init");
        let mut model = Hgnn::new(self.cfg.model.clone(), dims, init_seed)?;
        tracing::info!(train = train.len(), val = val.len(), params = model.num_parameters(), "training HGNN");
        let outcome = train_hgnn(&mut model, &train, &val, &self.cfg.train)?;
        reset_dir(&self.layout.checkpoint_dir())?;
        write_jsonl(&self.layout.output.join("logs").join("train_hgnn.jsonl"), &outcome.history)?;
        model.save(
            &self.layout.checkpoint(),
            json!({
                "graph_config_hash": self.cfg.graphs_hash(),
                "config_hash": hash,
                "seed": self.cfg.train.seed,
                "init_seed": init_seed,
                "epoch": outcome.best_epoch,
                "best_val_auc": outcome.best_val_auc,
                "class_weights": outcome.class_weights,
                "history": outcome.history,
            }),
        )?;
        let details = json!({
            "epochs_run": outcome.history.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_auc": outcome.best_val_auc,
            "stopped_early": outcome.stopped_early,
        });
        self.finish(TRAIN_HGNN, hash, details)
    }

    fn load_model(&self) -> Result<Hgnn> {
        self.require(TRAIN_HGNN, &self.cfg.hgnn_hash())?;
        let path = self.layout.checkpoint();
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                stage: TRAIN_HGNN.into(),
            });
        }
        Ok(Hgnn::load(&path, &self.cfg.graphs_hash())?.0)
    }

    pub fn evaluate(&self) -> Result<(StageOutcome, EvaluationReport)> {
        let hash = self.cfg.evaluation_hash();
        let manifest = self.manifest()?;
        let model = self.load_model()?;
        let report_path = self.layout.evaluation_dir().join("metrics.json");
        if let Some(s) = self.gate(EVALUATE, &hash)? {
            return Ok((Self::skipped(EVALUATE, s), read_json(&report_path)?));
        }
        let graphs = self.load_graphs(&manifest, Split::Test)?;
        let ids: Vec<String> = graphs.iter().map(|g| g.case_id.clone()).collect();
        let preds = case_predictions(&model, &Self::tensors(&graphs), &ids)?;
        let report = EvaluationReport::new(
            preds,
            self.cfg.model.num_classes,
            self.cfg.evaluation.bootstrap_resamples,
            seed::derive(self.cfg.seed, "bootstrap"),
        )?;
        reset_dir(&self.layout.evaluation_dir())?;
        report.write(&self.layout.evaluation_dir())?;
        let details = json!(report
            .metrics
            .iter()
            .map(|(n, i)| (n.clone(), json!([i.point, i.lower, i.upper])))
            .collect::<serde_json::Map<_, _>>());
        tracing::info!(auc = report.metric("auc").map(|i| i.point), f1 = report.metric("macro_f1").map(|i| i.point), "test metrics");
        Ok((self.finish(EVALUATE, hash, details)?, report))
    }

    pub fn saliency(&self) -> Result<(StageOutcome, SaliencyReport)> {
        let hash = self.cfg.saliency_hash();
        let manifest = self.manifest()?;
        let model = self.load_model()?;
        let report_path = self.layout.saliency_dir().join("summary.json");
        if let Some(s) = self.gate(SALIENCY, &hash)? {
            return Ok((Self::skipped(SALIENCY, s), read_json(&report_path)?));
        }
        let dir = self.layout.saliency_dir();
        reset_dir(&dir)?;
        let graphs = self.load_graphs(&manifest, Split::Test)?;
        let cases = self.read_cases(&manifest, Some(Split::Test))?;
        let cfg = &self.cfg.saliency;
        let pairs: Vec<(&HierarchicalGraph, &PhantomCase)> = graphs.iter().zip(&cases).collect();
        let rows = par::try_map(&pairs, |&(g, case)| -> Result<(HabitatSaliency, f64, f64)> {
            if g.case_id != case.id {
                return Err(Error::Consistency(format!("graph {} paired with case {}", g.case_id, case.id)));
            }
            let t = GraphTensors::from_graph(g);
            let map = case_saliency(&model, g, &t, case.mask(), cfg)?;
            map.write(&dir)?;
            if cfg.png_panels {
                write_panel(&dir.join(format!("panel_{}_{}.png", g.case_id, map.target_class)), &case.structural, g, &map, 1)?;
            }
            Ok(habitat_saliency(case, &map))
        })?;
        let mut pooled = [0.0; 2];
        let mut counts = [0usize; 2];
        let mut per_case = Vec::with_capacity(rows.len());
        for (h, hyper_sum, comp_sum) in rows {
            pooled[0] += hyper_sum;
            pooled[1] += comp_sum;
            counts[0] += h.hypervascular_voxels;
            counts[1] += h.complement_voxels;
            per_case.push(h);
        }
        let report = SaliencyReport {
            cases: per_case,
            pooled_hypervascular: pooled[0] / counts[0].max(1) as f64,
            pooled_complement: pooled[1] / counts[1].max(1) as f64,
        };
        write_json(&report_path, &report)?;
        let mut csv = String::from("case_id,label,target_class,hypervascular_mean,complement_mean,hypervascular_voxels,complement_voxels\n");
        for c in &report.cases {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.case_id, c.label, c.target_class, c.hypervascular_mean, c.complement_mean, c.hypervascular_voxels, c.complement_voxels
            ));
        }
        let p = dir.join("regions.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        tracing::info!(ratio = report.ratio(), "habitat saliency ratio");
        let details = json!({
            "maps": report.cases.len(),
            "pooled_hypervascular": report.pooled_hypervascular,
            "pooled_complement": report.pooled_complement,
        });
        Ok((self.finish(SALIENCY, hash, details)?, report))
    }

    pub fn run_all(&self) -> Result<RunSummary> {
        let mut stages = vec![
            self.generate_phantom()?,
            self.train_vqvae()?,
            self.build_graphs()?,
            self.train_hgnn()?,
        ];
        let (e, evaluation) = self.evaluate()?;
        stages.push(e);
        let (s, saliency) = self.saliency()?;
        stages.push(s);
        Ok(RunSummary {
            stages,
            evaluation,
            saliency,
        })
    }
}

/// Region means of the raw map plus the max-scaled sums used for pooling.
fn habitat_saliency(case: &PhantomCase, map: &SaliencyMap) -> (HabitatSaliency, f64, f64) {
    let mask = case.mask();
    let hyper: Vec<bool> = (0..mask.len())
        .map(|v| case.kind_at(v) == Some(KineticKind::Hypervascular))
        .collect();
    let complement: Vec<bool> = (0..mask.len()).map(|v| mask[v] && !hyper[v]).collect();
    let h = region_saliency_summary(&map.raw, &hyper).expect("region matches grid");
    let c = region_saliency_summary(&map.raw, &complement).expect("region matches grid");
    let max = map.raw.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    (
        HabitatSaliency {
            case_id: case.id.clone(),
            label: case.label,
            target_class: map.target_class,
            hypervascular_mean: h.mean,
            complement_mean: c.mean,
            hypervascular_voxels: h.voxels,
            complement_voxels: c.voxels,
        },
        h.mean * h.voxels as f64 * scale,
        c.mean * c.voxels as f64 * scale,
    )
}
