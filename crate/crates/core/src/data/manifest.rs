use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::audit;
use super::image::{load_image, Image};
use crate::error::{Error, Result};
use crate::metrics::Annotation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One manifest line. Boxes are only reachable through [`ImageSample::boxes`]
/// so that reads of target annotations are always audited.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSample {
    pub image: String,
    pub domain: Domain,
    #[serde(default)]
    pub labels: Vec<usize>,
    #[serde(default)]
    boxes: Vec<Annotation>,
}

impl ImageSample {
    pub fn new(image: impl Into<String>, domain: Domain, labels: Vec<usize>, boxes: Vec<Annotation>) -> Self {
        Self {
            image: image.into(),
            domain,
            labels,
            boxes,
        }
    }

    pub fn boxes(&self) -> &[Annotation] {
        if self.domain == Domain::Target && !self.boxes.is_empty() {
            audit::record_target_box_read(self.boxes.len());
        }
        &self.boxes
    }

    /// Box count without touching the annotations themselves.
    pub fn n_boxes(&self) -> usize {
        self.boxes.len()
    }

    /// Copy of the sample carrying the same annotations under a new image path.
    pub fn with_image(&self, image: impl Into<String>) -> Self {
        Self {
            image: image.into(),
            ..self.clone()
        }
    }

    pub fn without_boxes(&self) -> Self {
        Self {
            boxes: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Registry {
    classes: Vec<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    provenance: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory that sample image paths are relative to.
    pub root: PathBuf,
    pub samples: Vec<ImageSample>,
    pub classes: Vec<String>,
    pub provenance: String,
}

/// Sidecar path holding the class registry of a manifest.
pub fn registry_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("classes.json")
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, classes: Vec<String>, provenance: impl Into<String>) -> Self {
        Self {
            root: root.into(),
            samples: Vec::new(),
            classes,
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.samples[i].image)
    }

    pub fn load(&self, i: usize) -> Result<Image> {
        load_image(self.image_path(i))
    }

    /// Total box annotations across all samples, without auditing a read.
    pub fn n_boxes(&self) -> usize {
        self.samples.iter().map(ImageSample::n_boxes).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(&c) = s.labels.iter().find(|&&c| c >= self.classes.len()) {
                return Err(Error::Format(format!("sample {i}: class {c} not in registry")));
            }
            if let Some(a) = s.boxes.iter().find(|a| a.class_id >= self.classes.len()) {
                return Err(Error::Format(format!("sample {i}: box class {} not in registry", a.class_id)));
            }
        }
        Ok(())
    }

    /// Writes `path` (JSON lines) and the class registry sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut out = Vec::new();
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.push(b'\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
        let reg = Registry {
            classes: self.classes.clone(),
            provenance: self.provenance.clone(),
        };
        let reg_path = registry_path(path);
        let mut f = std::fs::File::create(&reg_path).map_err(|e| Error::io(&reg_path, e))?;
        serde_json::to_writer_pretty(&mut f, &reg)?;
        f.write_all(b"\n").map_err(|e| Error::io(&reg_path, e))
    }

    /// Reads a manifest; image paths resolve against the manifest's directory.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reg_path = registry_path(path);
        for p in [path, reg_path.as_path()] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.to_path_buf()));
            }
        }
        let reg: Registry =
            serde_json::from_slice(&std::fs::read(&reg_path).map_err(|e| Error::io(&reg_path, e))?)?;
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut samples = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: ImageSample = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            samples.push(s);
        }
        let m = Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            samples,
            classes: reg.classes,
            provenance: reg.provenance,
        };
        m.validate()?;
        Ok(m)
    }
}
