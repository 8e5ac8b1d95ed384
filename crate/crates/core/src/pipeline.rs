//! End-to-end run: dataset, split, training, density fit and evaluation,
//! with every artifact hashed into `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Protocol, RunConfig};
use crate::data::{
    build_corruption_protocol, corrupt, load_image_folder, sample_few_shot, subsample_anomalies,
    synth_dataset, DatasetManifest, FewShotSplit, Label, ManifestEntry, SPLIT_FILE,
};
use crate::density::{fit_density, DensityModel};
use crate::encoder::checkpoint::sha256_hex;
use crate::encoder::OnlineNetwork;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::image::Image;
use crate::rng;
use crate::train::train_to_dir;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DENSITY_FILE: &str = "density.bin";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const DATA_DIR: &str = "data";
pub const TRAIN_DIR: &str = "train";
pub const EVAL_DIR: &str = "eval";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub crate_version: String,
    pub stages: Vec<String>,
    /// Path relative to the run directory → sha256 of its contents.
    pub artifacts: BTreeMap<String, String>,
    pub auroc: Option<f64>,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Materializes the configured dataset and draws the split. Synthetic data
/// and corruption-protocol test sets are written under `out/data`.
pub fn prepare_split(cfg: &RunConfig, out: &Path) -> Result<FewShotSplit> {
    let d = &cfg.dataset;
    let manifest = match (&d.root, &d.synth) {
        (_, Some(spec)) => synth_dataset(spec, &out.join(DATA_DIR))?.0,
        (Some(root), None) => load_image_folder(root)?.0,
        (None, None) => return Err(Error::Config("dataset needs `root` or `synth`".into())),
    };
    let split = match d.protocol {
        Protocol::FewShot => {
            let s = sample_few_shot(&manifest, d.k, d.seed, d.reserve)?;
            match d.subsample_anomalies {
                Some(n) => subsample_anomalies(&s, n, d.seed)?,
                None => s,
            }
        }
        Protocol::Corruption => corruption_split(cfg, &manifest, &out.join(DATA_DIR).join("corruption"))?,
    };
    split.save(&out.join(SPLIT_FILE))?;
    Ok(split)
}

fn corruption_split(cfg: &RunConfig, manifest: &DatasetManifest, dir: &Path) -> Result<FewShotSplit> {
    let d = &cfg.dataset;
    let reserve = d.reserve.map(|(n, _)| (n, 0)).or(Some((manifest.count(Label::Normal).saturating_sub(d.k), 0)));
    let clean = sample_few_shot(manifest, d.k, d.seed, reserve)?;
    let test_manifest = DatasetManifest {
        root: manifest.root.clone(),
        entries: clean
            .test_normal_ids
            .iter()
            .map(|id| ManifestEntry {
                id: id.clone(),
                label: Label::Normal,
                group: String::new(),
            })
            .collect(),
        image_size: manifest.image_size,
    };
    let built = build_corruption_protocol(&test_manifest, &d.corruption, corrupt, d.seed, dir)?;
    // training images live beside the generated test set so one root serves both
    let mut train_ids = Vec::with_capacity(clean.train_ids.len());
    for (i, id) in clean.train_ids.iter().enumerate() {
        let rel = format!("train/{i:05}.png");
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        manifest.load(id)?.save_png(&path)?;
        train_ids.push(rel);
    }
    let split = FewShotSplit {
        protocol: format!("{}-shot-corruption-s{}", d.k, d.corruption.severity),
        seed: d.seed,
        root: dir.to_path_buf(),
        train_ids,
        test_normal_ids: built.ids(Label::Normal),
        test_abnormal_ids: built.ids(Label::Abnormal),
    };
    match d.subsample_anomalies {
        Some(n) => subsample_anomalies(&split, n, d.seed),
        None => Ok(split),
    }
}

/// Fine-tunes on the split's training images; artifacts go to `out`.
pub fn train_stage(cfg: &RunConfig, fewshot: &[Image], out: &Path) -> Result<OnlineNetwork> {
    let state = train_to_dir(
        fewshot,
        &cfg.train,
        &cfg.encoder,
        &cfg.augment.positive,
        &cfg.augment.negative,
        out,
    )?;
    Ok(state.online)
}

pub fn density_stage(cfg: &RunConfig, net: &OnlineNetwork, fewshot: &[Image]) -> Result<DensityModel> {
    fit_density(
        net,
        fewshot,
        &cfg.augment.positive,
        cfg.density.n_a,
        cfg.density.epsilon,
        &mut rng::stream(cfg.train.seed, "density", 0),
    )
}

pub fn eval_options(cfg: &RunConfig) -> Result<EvalOptions> {
    Ok(EvalOptions {
        scorer: cfg.density.scorer,
        k_nn: cfg.density.k_nn,
        histogram_bins: cfg.eval.histogram_bins,
        export_embeddings: cfg.eval.export_embeddings,
        config_echo: serde_json::to_value(cfg)?,
    })
}

fn collect_hashes(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_hashes(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let rel = path.strip_prefix(root).unwrap_or(&path);
            out.insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes));
        }
    }
    Ok(())
}

/// Hashes every file under `out` except generated datasets and writes the
/// manifest.
fn write_manifest(out: &Path, stages: Vec<String>, auroc: Option<f64>, error: Option<String>) -> Result<RunManifest> {
    let mut artifacts = BTreeMap::new();
    if out.is_dir() {
        collect_hashes(out, out, &mut artifacts)?;
    }
    artifacts.retain(|k, _| !k.starts_with(&format!("{DATA_DIR}/")));
    let manifest = RunManifest {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        stages,
        artifacts,
        auroc,
        error,
    };
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Runs every stage into `out`. The config is validated before any compute.
/// A failing stage still leaves a manifest naming the error.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = out.join(CONFIG_ECHO_FILE);
    std::fs::write(&echo, cfg.to_toml()?).map_err(|e| Error::io(&echo, e))?;
    let mut stages = Vec::new();
    let result = run_stages(cfg, out, &mut stages);
    let (auroc, error) = match &result {
        Ok(r) => (Some(r.auroc), None),
        Err(e) => (None, Some(e.to_string())),
    };
    write_manifest(out, stages, auroc, error)?;
    result
}

fn run_stages(cfg: &RunConfig, out: &Path, stages: &mut Vec<String>) -> Result<EvalReport> {
    let split = prepare_split(cfg, out)?;
    stages.push("split".into());
    let fewshot = split.load_train()?;
    let net = train_stage(cfg, &fewshot, &out.join(TRAIN_DIR))?;
    stages.push("train".into());
    let model = density_stage(cfg, &net, &fewshot)?;
    model.save(&out.join(DENSITY_FILE))?;
    stages.push("density".into());
    let report = evaluate(&net, &model, &split, &eval_options(cfg)?, &out.join(EVAL_DIR))?;
    stages.push("eval".into());
    Ok(report)
}
