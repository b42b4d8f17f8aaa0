//! On-disk bundles: a JSON manifest next to raw little-endian `f32` blobs.
//!
//! ```text
//! bundle/
//!   manifest.json
//!   images/0000_features.f32     h*w*d floats, cell-major
//!   images/0000_embedding.f32    h*w*d' floats
//!   head/layer0_weight.f32       out*in floats, row-major
//!   ...
//! ```
//!
//! Blob shapes live only in the manifest. Every blob must hold exactly
//! `4 * prod(shape)` bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeBank, ClassAttributeMatrix, PartProbGrid};
use crate::error::{Error, Result};
use crate::head::{DecisionHead, HeadKind, Layer};
use crate::metrics::{project_keypoints, CaseAnnotations, ConfusionMatrix, Keypoint, KeypointSet, PartGrid};
use crate::numerics::{EmbeddingGrid, FeatureGrid};
use crate::search::{EditTrace, SearchCase};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub path: String,
    pub shape: Vec<usize>,
}

impl BlobRef {
    fn new(path: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            path: path.into(),
            shape,
        }
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct GridDims {
    height: usize,
    width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct PartAlias {
    from: usize,
    to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct KeypointEntry {
    image_width: u32,
    image_height: u32,
    points: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ImageEntry {
    id: String,
    class: usize,
    features: BlobRef,
    embedding: BlobRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoints: Option<KeypointEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    part_probs: Option<BlobRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerEntry {
    weight: BlobRef,
    bias: BlobRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadEntry {
    kind: HeadKind,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AttributeEntry {
    weights: BlobRef,
    biases: BlobRef,
    names: Vec<String>,
    parts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    grid: GridDims,
    channels: usize,
    embedding_channels: usize,
    class_names: Vec<String>,
    #[serde(default)]
    part_names: Vec<String>,
    #[serde(default)]
    part_aliases: Vec<PartAlias>,
    images: Vec<ImageEntry>,
    head: HeadEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attributes: Option<AttributeEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_attributes: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confusion: Option<BlobRef>,
}

/// One image of a bundle with its tensors and optional annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleImage {
    pub id: String,
    pub class: usize,
    pub features: FeatureGrid,
    /// Embedding exactly as stored; `embedding` is its row-normalized form.
    pub raw_embedding: FeatureGrid,
    pub embedding: EmbeddingGrid,
    pub keypoints: Option<KeypointSet>,
    pub mask: Option<Vec<bool>>,
    pub part_probs: Option<PartProbGrid>,
}

impl BundleImage {
    pub fn new(id: impl Into<String>, class: usize, features: FeatureGrid, raw_embedding: FeatureGrid) -> Result<Self> {
        let id = id.into();
        if (features.height(), features.width()) != (raw_embedding.height(), raw_embedding.width()) {
            return Err(Error::shape(format!("image `{id}`: feature and embedding grids differ in size")));
        }
        let embedding = EmbeddingGrid::new(
            raw_embedding.height(),
            raw_embedding.width(),
            raw_embedding.channels(),
            raw_embedding.data().to_vec(),
        )?;
        Ok(Self {
            id,
            class,
            features,
            raw_embedding,
            embedding,
            keypoints: None,
            mask: None,
            part_probs: None,
        })
    }

    /// Keypoints projected onto the feature grid.
    pub fn part_grid(&self) -> Option<Result<PartGrid>> {
        self.keypoints
            .as_ref()
            .map(|k| project_keypoints(k, self.features.height(), self.features.width()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub embedding_channels: usize,
    pub class_names: Vec<String>,
    pub part_names: Vec<String>,
    /// Part id rewrites applied to keypoints at load, e.g. left wing to wing.
    pub part_aliases: BTreeMap<usize, usize>,
    pub images: Vec<BundleImage>,
    pub head: DecisionHead,
    pub attributes: Option<AttributeBank>,
    pub class_attributes: Option<ClassAttributeMatrix>,
    pub confusion: Option<ConfusionMatrix>,
    /// Diagnostics such as ignored manifest fields; never part of the data.
    pub warnings: Vec<String>,
}

impl Bundle {
    pub fn image_index(&self, id: &str) -> Result<usize> {
        self.images
            .iter()
            .position(|i| i.id == id)
            .ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    pub fn image(&self, id: &str) -> Result<&BundleImage> {
        Ok(&self.images[self.image_index(id)?])
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Invalid(format!("unknown class `{name}`")))
    }

    pub fn images_of_class(&self, class: usize) -> impl Iterator<Item = &BundleImage> {
        self.images.iter().filter(move |i| i.class == class)
    }

    /// Search case for `query` against the named distractors.
    pub fn search_case(&self, query: &str, distractors: &[String], target_class: usize) -> Result<SearchCase> {
        if target_class >= self.class_names.len() {
            return Err(Error::OutOfRange(format!("target class {target_class}")));
        }
        let q = self.image(query)?;
        let ds = distractors.iter().map(|id| self.image(id)).collect::<Result<Vec<_>>>()?;
        Ok(SearchCase {
            query_id: q.id.clone(),
            query: q.features.clone(),
            query_embedding: q.embedding.clone(),
            distractor_ids: ds.iter().map(|d| d.id.clone()).collect(),
            distractors: ds.iter().map(|d| d.features.clone()).collect(),
            distractor_embeddings: ds.iter().map(|d| d.embedding.clone()).collect(),
            target_class,
            clusters: None,
        })
    }

    /// Keypoint and mask annotations for the images a trace touches. Masks are
    /// included only when every involved image has one.
    pub fn annotations(&self, trace: &EditTrace) -> Result<CaseAnnotations> {
        let parts = |id: &str| -> Result<PartGrid> {
            self.image(id)?
                .part_grid()
                .unwrap_or_else(|| Err(Error::Invalid(format!("image `{id}` has no keypoints"))))
        };
        let ids: Vec<&str> = std::iter::once(trace.query_id.as_str())
            .chain(trace.distractor_ids.iter().map(String::as_str))
            .collect();
        let masks: Option<Vec<Vec<bool>>> = ids
            .iter()
            .map(|id| self.image(id).map(|i| i.mask.clone()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .collect();
        let (query_mask, distractor_masks) = match masks {
            Some(mut m) => {
                let q = m.remove(0);
                (Some(q), Some(m))
            }
            None => (None, None),
        };
        Ok(CaseAnnotations {
            query_parts: parts(&trace.query_id)?,
            distractor_parts: trace.distractor_ids.iter().map(|id| parts(id)).collect::<Result<_>>()?,
            query_mask,
            distractor_masks,
        })
    }

    /// Checks cross-references between the parts of an in-memory bundle.
    pub fn validate(&self) -> Result<()> {
        let classes = self.class_names.len();
        if self.head.num_classes() != classes {
            return Err(Error::shape(format!(
                "head has {} classes, bundle declares {classes}",
                self.head.num_classes()
            )));
        }
        let mut seen = BTreeSet::new();
        for img in &self.images {
            if !seen.insert(img.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate image id `{}`", img.id)));
            }
            if img.class >= classes {
                return Err(Error::OutOfRange(format!("image `{}` has class {}", img.id, img.class)));
            }
            let f = &img.features;
            if (f.height(), f.width(), f.channels()) != (self.height, self.width, self.channels) {
                return Err(Error::shape(format!("image `{}` features are not {}x{}x{}", img.id, self.height, self.width, self.channels)));
            }
            let e = &img.raw_embedding;
            if (e.height(), e.width(), e.channels()) != (self.height, self.width, self.embedding_channels) {
                return Err(Error::shape(format!(
                    "image `{}` embedding is not {}x{}x{}",
                    img.id, self.height, self.width, self.embedding_channels
                )));
            }
            if let Some(mask) = &img.mask {
                if mask.len() != self.height * self.width {
                    return Err(Error::shape(format!("image `{}` mask has {} cells", img.id, mask.len())));
                }
            }
            if let Some(p) = &img.part_probs {
                if (p.height(), p.width()) != (self.height, self.width) {
                    return Err(Error::shape(format!("image `{}` part grid size differs", img.id)));
                }
            }
            if let Some(k) = &img.keypoints {
                for p in k.points.iter().filter(|p| p.visible) {
                    let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < f64::from(k.image_width) && p.y < f64::from(k.image_height);
                    if !inside {
                        return Err(Error::Invalid(format!(
                            "image `{}` keypoint ({}, {}) lies outside {}x{}",
                            img.id, p.x, p.y, k.image_width, k.image_height
                        )));
                    }
                }
            }
        }
        // first layer sees pooled or flattened features depending on the kind
        let expected_in = match self.head.kind() {
            HeadKind::GapLinear => self.channels,
            HeadKind::FlattenMlp => self.height * self.width * self.channels,
        };
        if self.head.input_dim() != expected_in {
            return Err(Error::shape(format!(
                "head input dim {} does not match features ({expected_in})",
                self.head.input_dim()
            )));
        }
        for (&from, &to) in &self.part_aliases {
            if self.part_aliases.contains_key(&to) {
                return Err(Error::Invalid(format!("part alias {from} -> {to} points at another alias")));
            }
        }
        if let Some(bank) = &self.attributes {
            if bank.dim() != self.channels {
                return Err(Error::shape(format!("attribute bank dim {} vs {} channels", bank.dim(), self.channels)));
            }
        }
        if let Some(m) = &self.class_attributes {
            if m.classes() != classes {
                return Err(Error::shape(format!("class-attribute matrix has {} rows", m.classes())));
            }
            if let Some(bank) = &self.attributes {
                if m.attributes() != bank.len() {
                    return Err(Error::shape(format!(
                        "class-attribute matrix has {} columns, bank has {} attributes",
                        m.attributes(),
                        bank.len()
                    )));
                }
            }
        }
        if let Some(cm) = &self.confusion {
            if cm.classes() != classes {
                return Err(Error::shape(format!("confusion matrix covers {} classes", cm.classes())));
            }
        }
        Ok(())
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Reads `4 * expected` bytes of little-endian `f32`.
pub fn read_f32_blob(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == ErrorKind::NotFound => return Err(Error::MissingRef(path.to_path_buf())),
        Err(e) => return Err(Error::io(path, e)),
    };
    let want = 4 * expected as u64;
    if bytes.len() as u64 != want {
        return Err(Error::ByteLength {
            path: path.to_path_buf(),
            expected: want,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32_blob(path: &Path, values: &[f32]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct BlobReader<'a> {
    root: &'a Path,
}

impl BlobReader<'_> {
    fn read(&self, blob: &BlobRef, expected_shape: &[usize], what: &str) -> Result<Vec<f32>> {
        if blob.shape != expected_shape {
            return Err(Error::shape(format!(
                "{what} `{}` declares shape {:?}, expected {expected_shape:?}",
                blob.path, blob.shape
            )));
        }
        let path = self.root.join(&blob.path);
        read_f32_blob(&path, blob.numel())
    }

    /// Blob whose shape is free apart from its rank.
    fn read_rank(&self, blob: &BlobRef, rank: usize, what: &str) -> Result<Vec<f32>> {
        if blob.shape.len() != rank {
            return Err(Error::shape(format!(
                "{what} `{}` must have rank {rank}, declares {:?}",
                blob.path, blob.shape
            )));
        }
        read_f32_blob(&self.root.join(&blob.path), blob.numel())
    }
}

/// Parses and validates a bundle. `path` may name the directory or its manifest.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<Bundle> {
    let manifest_file = manifest_path(path.as_ref());
    let text = match fs::read_to_string(&manifest_file) {
        Ok(t) => t,
        Err(e) if e.kind() == ErrorKind::NotFound => return Err(Error::MissingRef(manifest_file)),
        Err(e) => return Err(Error::io(&manifest_file, e)),
    };
    let json_err = |source| Error::Json {
        path: manifest_file.clone(),
        source,
    };
    // Check the version before the schema so future layouts fail clearly.
    let value: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
    let found = value.get("schema_version").and_then(serde_json::Value::as_u64);
    match found {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(Error::SchemaVersion {
                found: u32::try_from(v).unwrap_or(u32::MAX),
                supported: SCHEMA_VERSION,
            })
        }
        None => return Err(Error::Invalid(format!("`{}` lacks schema_version", manifest_file.display()))),
    }
    let mut warnings = Vec::new();
    let manifest: Manifest = serde_ignored::deserialize(value, |p| {
        warnings.push(format!("ignoring unknown manifest field `{p}`"));
    })
    .map_err(json_err)?;
    for w in &warnings {
        log::warn!("{}: {w}", manifest_file.display());
    }

    let root = manifest_file.parent().unwrap_or(Path::new("."));
    let reader = BlobReader { root };
    let (h, w) = (manifest.grid.height, manifest.grid.width);
    let aliases: BTreeMap<usize, usize> = manifest.part_aliases.iter().map(|a| (a.from, a.to)).collect();

    let mut images = Vec::with_capacity(manifest.images.len());
    for entry in &manifest.images {
        let features = reader.read(&entry.features, &[h, w, manifest.channels], "features")?;
        let embedding = reader.read(&entry.embedding, &[h, w, manifest.embedding_channels], "embedding")?;
        let mut img = BundleImage::new(
            &entry.id,
            entry.class,
            FeatureGrid::new(h, w, manifest.channels, features)?,
            FeatureGrid::new(h, w, manifest.embedding_channels, embedding)?,
        )?;
        img.keypoints = entry.keypoints.as_ref().map(|k| KeypointSet {
            image_id: entry.id.clone(),
            image_width: k.image_width,
            image_height: k.image_height,
            points: k
                .points
                .iter()
                .map(|p| Keypoint {
                    part: *aliases.get(&p.part).unwrap_or(&p.part),
                    ..*p
                })
                .collect(),
        });
        img.mask = entry.mask.clone();
        if let Some(blob) = &entry.part_probs {
            if blob.shape.len() != 3 || blob.shape[..2] != [h, w] {
                return Err(Error::shape(format!(
                    "part_probs `{}` declares shape {:?}, expected [{h}, {w}, parts]",
                    blob.path, blob.shape
                )));
            }
            let probs = reader.read(blob, &blob.shape, "part_probs")?;
            img.part_probs = Some(PartProbGrid::new(h, w, blob.shape[2], probs)?);
        }
        images.push(img);
    }

    let mut layers = Vec::with_capacity(manifest.head.layers.len());
    for (i, l) in manifest.head.layers.iter().enumerate() {
        let weight = reader.read_rank(&l.weight, 2, &format!("head layer {i} weight"))?;
        let (out_dim, in_dim) = (l.weight.shape[0], l.weight.shape[1]);
        let bias = reader.read(&l.bias, &[out_dim], &format!("head layer {i} bias"))?;
        layers.push(Layer::new(out_dim, in_dim, weight, bias)?);
    }
    let head = DecisionHead::new(manifest.head.kind, layers, manifest.class_names.clone())?;

    let attributes = match &manifest.attributes {
        Some(a) => {
            let weights = reader.read(&a.weights, &[a.names.len(), manifest.channels], "attribute weights")?;
            let biases = reader.read(&a.biases, &[a.names.len()], "attribute biases")?;
            Some(AttributeBank::new(manifest.channels, weights, biases, a.names.clone(), a.parts.clone())?)
        }
        None => None,
    };
    let class_attributes = match &manifest.class_attributes {
        Some(blob) => {
            let values = reader.read_rank(blob, 2, "class_attributes")?;
            Some(ClassAttributeMatrix::new(
                blob.shape[0],
                blob.shape[1],
                values.into_iter().map(f64::from).collect(),
            )?)
        }
        None => None,
    };
    let classes = manifest.class_names.len();
    let confusion = match &manifest.confusion {
        Some(blob) => {
            let values = reader.read(blob, &[classes, classes], "confusion")?;
            let counts = values
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as u64)
                    } else {
                        Err(Error::Invalid(format!("confusion `{}` holds non-count value {v}", blob.path)))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Some(ConfusionMatrix::new(classes, counts)?)
        }
        None => None,
    };

    let bundle = Bundle {
        height: h,
        width: w,
        channels: manifest.channels,
        embedding_channels: manifest.embedding_channels,
        class_names: manifest.class_names,
        part_names: manifest.part_names,
        part_aliases: aliases,
        images,
        head,
        attributes,
        class_attributes,
        confusion,
        warnings,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `bundle` under `dir` and returns the manifest path. Re-loading the
/// result yields bit-identical tensors. Class-attribute entries are stored as
/// `f32` like every other blob, so they round-trip exactly only when they are
/// representable in `f32`.
pub fn write_bundle(bundle: &Bundle, dir: impl AsRef<Path>) -> Result<PathBuf> {
    bundle.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |rel: String, shape: Vec<usize>, values: &[f32]| -> Result<BlobRef> {
        write_f32_blob(&dir.join(&rel), values)?;
        Ok(BlobRef::new(rel, shape))
    };
    let (h, w) = (bundle.height, bundle.width);

    let mut images = Vec::with_capacity(bundle.images.len());
    for (i, img) in bundle.images.iter().enumerate() {
        let part_probs = match &img.part_probs {
            Some(p) => Some(put(format!("images/{i:04}_part_probs.f32"), vec![h, w, p.parts()], p.probs())?),
            None => None,
        };
        images.push(ImageEntry {
            id: img.id.clone(),
            class: img.class,
            features: put(
                format!("images/{i:04}_features.f32"),
                vec![h, w, bundle.channels],
                img.features.data(),
            )?,
            embedding: put(
                format!("images/{i:04}_embedding.f32"),
                vec![h, w, bundle.embedding_channels],
                img.raw_embedding.data(),
            )?,
            keypoints: img.keypoints.as_ref().map(|k| KeypointEntry {
                image_width: k.image_width,
                image_height: k.image_height,
                points: k.points.clone(),
            }),
            mask: img.mask.clone(),
            part_probs,
        });
    }

    let mut layers = Vec::new();
    for (i, l) in bundle.head.layers().iter().enumerate() {
        layers.push(LayerEntry {
            weight: put(format!("head/layer{i}_weight.f32"), vec![l.out_dim(), l.in_dim()], l.weight())?,
            bias: put(format!("head/layer{i}_bias.f32"), vec![l.out_dim()], l.bias())?,
        });
    }

    let attributes = match &bundle.attributes {
        Some(bank) => Some(AttributeEntry {
            weights: put("attributes/weights.f32".into(), vec![bank.len(), bank.dim()], bank.weights())?,
            biases: put("attributes/biases.f32".into(), vec![bank.len()], bank.biases())?,
            names: bank.names().to_vec(),
            parts: bank.parts().to_vec(),
        }),
        None => None,
    };
    let class_attributes = match &bundle.class_attributes {
        Some(m) => {
            let values: Vec<f32> = (0..m.classes()).flat_map(|c| m.row(c).iter().map(|&v| v as f32)).collect();
            Some(put("attributes/class_attributes.f32".into(), vec![m.classes(), m.attributes()], &values)?)
        }
        None => None,
    };
    let confusion = match &bundle.confusion {
        Some(cm) => {
            let values: Vec<f32> = (0..cm.classes()).flat_map(|c| cm.row(c).iter().map(|&v| v as f32)).collect();
            Some(put("confusion.f32".into(), vec![cm.classes(), cm.classes()], &values)?)
        }
        None => None,
    };

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        grid: GridDims { height: h, width: w },
        channels: bundle.channels,
        embedding_channels: bundle.embedding_channels,
        class_names: bundle.class_names.clone(),
        part_names: bundle.part_names.clone(),
        part_aliases: bundle.part_aliases.iter().map(|(&from, &to)| PartAlias { from, to }).collect(),
        images,
        head: HeadEntry {
            kind: bundle.head.kind(),
            layers,
        },
        attributes,
        class_attributes,
        confusion,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
