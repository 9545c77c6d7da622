//! Synthetic shapes dataset and its directory format.
//!
//! ```text
//! <dir>/manifest.json        ids, label vectors, file names
//! <dir>/images/<id>.wten     H x W x 1 intensity tensor (tensor container format)
//! <dir>/proposals/<id>.txt   "x0 y0 x1 y1 objectness" per line
//! <dir>/gt/<id>.txt          "classIndex x0 y0 x1 y1" per line
//! ```
//!
//! Boxes live in their own files so a training loader can skip them.

mod generate;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use generate::{generate_sample, generate_split, sample_seed, ClassSpec, DatasetConfig, Shape};

use crate::autodiff::{checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::evaluation::GroundTruthSet;
use crate::network::Region;
use crate::proposals::{format_proposals, parse_proposals};
use crate::training::LabelVector;

const MANIFEST: &str = "manifest.json";
const IMAGE_TENSOR: &str = "image";

/// One image with its weak labels, proposals, and evaluation-only boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `H × W × 1` intensities in [0, 1].
    pub image: Tensor,
    pub labels: LabelVector,
    pub proposals: Vec<Region>,
    /// `(class, box)` instances. Empty when loaded for training.
    pub gt: Vec<(usize, Region)>,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn ground_truth(&self) -> GroundTruthSet {
        self.samples
            .iter()
            .map(|s| (s.id.clone(), s.gt.clone()))
            .collect()
    }

    /// Checks every sample can be used for weakly supervised training.
    pub fn validate_for_training(&self) -> Result<()> {
        for s in &self.samples {
            if s.proposals.is_empty() {
                return Err(Error::usage(format!("image {} has no region proposals", s.id)));
            }
            if s.labels.len() != self.num_classes() {
                return Err(Error::usage(format!(
                    "image {} has {} labels for {} classes",
                    s.id,
                    s.labels.len(),
                    self.num_classes()
                )));
            }
            if s.labels.positives().next().is_none() {
                return Err(Error::usage(format!("image {} has no positive label", s.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    class_names: Vec<String>,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    labels: Vec<i8>,
    image: String,
    proposals: String,
    gt: String,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::usage(format!("image id {id:?} is not a plain file-name token")))
    }
}

pub fn format_ground_truth(gt: &[(usize, Region)]) -> String {
    let mut s = String::new();
    for (c, r) in gt {
        let _ = writeln!(s, "{c} {} {} {} {}", r.x0, r.y0, r.x1, r.y1);
    }
    s
}

pub fn parse_ground_truth(text: &str, file: &Path) -> Result<Vec<(usize, Region)>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let here = offset;
        offset += line.len() as u64;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fail = |m: &str| Error::Parse {
            file: file.to_path_buf(),
            offset: here,
            message: format!("{m}: {line:?}"),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(fail("expected 5 fields"));
        }
        let class = fields[0].parse().map_err(|_| fail("bad class index"))?;
        let v = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| fail("bad coordinate"))?;
        out.push((class, Region::new(v[0], v[1], v[2], v[3])));
    }
    Ok(out)
}

/// Writes a dataset directory, creating it if needed.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "proposals", "gt"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        check_id(&s.id)?;
        let entry = ManifestEntry {
            id: s.id.clone(),
            labels: s.labels.values().to_vec(),
            image: format!("images/{}.wten", s.id),
            proposals: format!("proposals/{}.txt", s.id),
            gt: format!("gt/{}.txt", s.id),
        };
        checkpoint::write_file(&dir.join(&entry.image), &[(IMAGE_TENSOR.to_string(), s.image.clone())])?;
        write(&dir.join(&entry.proposals), format_proposals(&s.proposals))?;
        write(&dir.join(&entry.gt), format_ground_truth(&s.gt))?;
        entries.push(entry);
    }
    let manifest = Manifest {
        format: "wsddn-dataset".into(),
        version: 1,
        class_names: dataset.class_names.clone(),
        entries,
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write(&dir.join(MANIFEST), json)
}

/// Whether to read ground-truth boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadBoxes {
    /// Evaluation: read `gt/` files.
    Yes,
    /// Training: never open `gt/`; every sample's `gt` stays empty.
    No,
}

fn json_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (before + column.saturating_sub(1)) as u64
}

fn resolve(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(Error::usage(format!("manifest path {rel:?} escapes the dataset directory")));
    }
    Ok(dir.join(p))
}

pub fn read_dataset(dir: &Path, boxes: LoadBoxes) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let text = read_text(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: manifest_path.clone(),
        offset: json_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if manifest.format != "wsddn-dataset" || manifest.version != 1 {
        return Err(Error::Parse {
            file: manifest_path,
            offset: 0,
            message: format!("unsupported dataset format {} v{}", manifest.format, manifest.version),
        });
    }
    let num_classes = manifest.class_names.len();
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        let labels = LabelVector::new(e.labels).map_err(|err| Error::Parse {
            file: dir.join(MANIFEST),
            offset: 0,
            message: format!("entry {}: {err}", e.id),
        })?;
        if labels.len() != num_classes {
            return Err(Error::Parse {
                file: dir.join(MANIFEST),
                offset: 0,
                message: format!("entry {} has {} labels for {num_classes} classes", e.id, labels.len()),
            });
        }
        let image_path = resolve(dir, &e.image)?;
        let mut tensors = checkpoint::read_file(&image_path)?;
        let image = match tensors.pop() {
            Some((name, t)) if tensors.is_empty() && name == IMAGE_TENSOR && t.rank() == 3 => t,
            _ => {
                return Err(Error::Parse {
                    file: image_path,
                    offset: 0,
                    message: "expected a single rank-3 tensor named \"image\"".into(),
                })
            }
        };
        let prop_path = resolve(dir, &e.proposals)?;
        let proposals = parse_proposals(&read_text(&prop_path)?, &prop_path)?;
        let gt = match boxes {
            LoadBoxes::Yes => {
                let gt_path = resolve(dir, &e.gt)?;
                parse_ground_truth(&read_text(&gt_path)?, &gt_path)?
            }
            LoadBoxes::No => Vec::new(),
        };
        samples.push(ImageSample {
            id: e.id,
            image,
            labels,
            proposals,
            gt,
        });
    }
    Ok(Dataset {
        class_names: manifest.class_names,
        samples,
    })
}

/// Generates both splits for a configuration.
pub fn generate_dataset(
    cfg: &DatasetConfig,
    proposal_cfg: &crate::proposals::ProposalConfig,
) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let names = cfg.class_names();
    let train = generate_split(cfg, proposal_cfg, "train", cfg.train_count)?;
    let test = generate_split(cfg, proposal_cfg, "test", cfg.test_count)?;
    Ok((
        Dataset {
            class_names: names.clone(),
            samples: train,
        },
        Dataset {
            class_names: names,
            samples: test,
        },
    ))
}
