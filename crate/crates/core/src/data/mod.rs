//! Dataset folders, few-shot splits and evaluation protocols.

pub mod corrupt;
pub mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Rng};

pub use corrupt::{build_corruption_protocol, corrupt, CorruptionSpec, CORRUPTIONS};
pub use synth::{synth_dataset, DefectFamily, ShapeFamily, SynthSpec, SynthTruth};

pub const SPLIT_FILE: &str = "split.json";
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }
}

/// A loaded image with its identity.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub label: Label,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root, with `/` separators.
    pub id: String,
    pub label: Label,
    /// Subfolder below the label folder, empty for top-level files.
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// `(height, width)` when every image has the same size.
    pub image_size: Option<(usize, usize)>,
}

impl DatasetManifest {
    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn ids(&self, label: Label) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.label == label)
            .map(|e| e.id.clone())
            .collect()
    }

    pub fn path_of(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn load(&self, id: &str) -> Result<Image> {
        Image::load(&self.path_of(id))
    }
}

/// Files that could not be decoded while scanning a folder.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub unreadable: Vec<(String, String)>,
}

fn collect_images(dir: &Path, rel: &str, out: &mut Vec<String>) -> Result<()> {
    let mut children: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    children.sort_by_key(|c| c.file_name());
    for child in children {
        let name = child.file_name().to_string_lossy().into_owned();
        let path = child.path();
        let child_rel = format!("{rel}/{name}");
        if path.is_dir() {
            collect_images(&path, &child_rel, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        {
            out.push(child_rel);
        }
    }
    Ok(())
}

/// Scans `root/normal` (required) and `root/abnormal` (optional), recursing
/// into subfolders in lexicographic order. Undecodable files are skipped and
/// listed in the report.
pub fn load_image_folder(root: &Path) -> Result<(DatasetManifest, LoadReport)> {
    let normal = root.join("normal");
    if !normal.is_dir() {
        return Err(Error::Data(format!("{} has no `normal/` folder", root.display())));
    }
    let mut entries = Vec::new();
    let mut report = LoadReport::default();
    let mut sizes = std::collections::BTreeSet::new();
    for label in [Label::Normal, Label::Abnormal] {
        let dir = root.join(label.as_str());
        if !dir.is_dir() {
            continue;
        }
        let mut files = Vec::new();
        collect_images(&dir, label.as_str(), &mut files)?;
        for id in files {
            match Image::load(&root.join(&id)) {
                Ok(img) => {
                    sizes.insert((img.height(), img.width()));
                    let parts: Vec<&str> = id.split('/').collect();
                    let group = parts[1..parts.len() - 1].join("/");
                    entries.push(ManifestEntry { id, label, group });
                }
                Err(e) => report.unreadable.push((id, e.to_string())),
            }
        }
    }
    if !entries.iter().any(|e| e.label == Label::Normal) {
        return Err(Error::Data(format!("{} contains no readable normal images", root.display())));
    }
    let image_size = if sizes.len() == 1 { sizes.into_iter().next() } else { None };
    Ok((
        DatasetManifest {
            root: root.to_path_buf(),
            entries,
            image_size,
        },
        report,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub protocol: String,
    pub seed: u64,
    pub root: PathBuf,
    pub train_ids: Vec<String>,
    pub test_normal_ids: Vec<String>,
    pub test_abnormal_ids: Vec<String>,
}

impl FewShotSplit {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let split: Self = serde_json::from_str(&text)?;
        split.check_disjoint()?;
        Ok(split)
    }

    /// Content hash of the id lists and seed.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::json!({
            "protocol": self.protocol,
            "seed": self.seed,
            "train": self.train_ids,
            "test_normal": self.test_normal_ids,
            "test_abnormal": self.test_abnormal_ids,
        });
        Ok(sha256_hex(&serde_json::to_vec(&canonical)?))
    }

    fn check_disjoint(&self) -> Result<()> {
        let train: std::collections::HashSet<&String> = self.train_ids.iter().collect();
        if let Some(id) = self
            .test_normal_ids
            .iter()
            .chain(&self.test_abnormal_ids)
            .find(|id| train.contains(id))
        {
            return Err(Error::Data(format!("`{id}` appears in both train and test")));
        }
        Ok(())
    }

    fn load_all(&self, ids: &[String]) -> Result<Vec<Image>> {
        ids.iter().map(|id| Image::load(&self.root.join(id))).collect()
    }

    pub fn load_train(&self) -> Result<Vec<Image>> {
        self.load_all(&self.train_ids)
    }

    /// Test images, ids and labels: normals first, then abnormals.
    pub fn load_test(&self) -> Result<(Vec<Image>, Vec<String>, Vec<Label>)> {
        let ids: Vec<String> = self
            .test_normal_ids
            .iter()
            .chain(&self.test_abnormal_ids)
            .cloned()
            .collect();
        let labels = std::iter::repeat_n(Label::Normal, self.test_normal_ids.len())
            .chain(std::iter::repeat_n(Label::Abnormal, self.test_abnormal_ids.len()))
            .collect();
        Ok((self.load_all(&ids)?, ids, labels))
    }
}

fn shuffled(mut ids: Vec<String>, rng: &mut Rng) -> Vec<String> {
    ids.shuffle(rng);
    ids
}

/// Samples `k` training normals without replacement, then reserves
/// `(n_normal, n_abnormal)` test images from the rest. Without a reserve,
/// every remaining image goes to test.
pub fn sample_few_shot(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
    reserve: Option<(usize, usize)>,
) -> Result<FewShotSplit> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let normals = manifest.ids(Label::Normal);
    let abnormals = manifest.ids(Label::Abnormal);
    let (n_norm, n_abn) = reserve.unwrap_or((normals.len().saturating_sub(k), abnormals.len()));
    if normals.len() < k + n_norm {
        return Err(Error::Data(format!(
            "need {} normal images ({k} train + {n_norm} test), found {} (short by {})",
            k + n_norm,
            normals.len(),
            k + n_norm - normals.len()
        )));
    }
    if abnormals.len() < n_abn {
        return Err(Error::Data(format!(
            "need {n_abn} abnormal test images, found {} (short by {})",
            abnormals.len(),
            n_abn - abnormals.len()
        )));
    }
    let normals = shuffled(normals, &mut rng::stream(seed, "split-normal", 0));
    let abnormals = shuffled(abnormals, &mut rng::stream(seed, "split-abnormal", 0));
    Ok(FewShotSplit {
        protocol: format!("{k}-shot"),
        seed,
        root: manifest.root.clone(),
        train_ids: normals[..k].to_vec(),
        test_normal_ids: normals[k..k + n_norm].to_vec(),
        test_abnormal_ids: abnormals[..n_abn].to_vec(),
    })
}

/// Keeps `n_abn` randomly chosen test anomalies; everything else is kept.
pub fn subsample_anomalies(split: &FewShotSplit, n_abn: usize, seed: u64) -> Result<FewShotSplit> {
    let have = split.test_abnormal_ids.len();
    if n_abn > have {
        return Err(Error::Data(format!("requested {n_abn} anomalies, split has {have}")));
    }
    let mut out = split.clone();
    if n_abn < have {
        let mut ids = shuffled(split.test_abnormal_ids.clone(), &mut rng::stream(seed, "subsample", 0));
        ids.truncate(n_abn);
        out.test_abnormal_ids = ids;
        out.protocol = format!("{}+{n_abn}-anomalies", split.protocol);
    }
    Ok(out)
}

/// `n` crops of `size × size` at uniformly random positions.
pub fn crop_patches(image: &Image, size: usize, n: usize, rng: &mut Rng) -> Result<Vec<Image>> {
    use rand::Rng as _;
    if image.height() < size || image.width() < size || size == 0 {
        return Err(Error::DegenerateInput(format!(
            "{}x{} image cannot host a {size}x{size} patch",
            image.height(),
            image.width()
        )));
    }
    (0..n)
        .map(|_| {
            let y = rng.random_range(0..=image.height() - size);
            let x = rng.random_range(0..=image.width() - size);
            image.crop(y, x, size, size)
        })
        .collect()
}

/// Loads every image named by `ids` under `root`.
pub fn load_samples(root: &Path, ids: &[String], label: Label) -> Result<Vec<ImageSample>> {
    ids.iter()
        .map(|id| {
            Ok(ImageSample {
                id: id.clone(),
                label,
                image: Image::load(&root.join(id))?,
            })
        })
        .collect()
}
