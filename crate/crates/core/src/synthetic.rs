//! Seeded random bundles for demos, benchmarks and tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attributes::{AttributeBank, ClassAttributeMatrix, PartProbGrid};
use crate::bundle::{Bundle, BundleImage};
use crate::error::Result;
use crate::head::{DecisionHead, HeadKind, Layer};
use crate::metrics::{ConfusionMatrix, Keypoint, KeypointSet};
use crate::numerics::FeatureGrid;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub embedding_channels: usize,
    pub classes: usize,
    pub images_per_class: usize,
    pub parts: usize,
    pub attributes: usize,
    /// Side length in pixels of the square images keypoints refer to.
    pub image_size: u32,
    pub head: HeadKind,
    /// Hidden width of `flatten_mlp` heads.
    pub hidden: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 7,
            width: 7,
            channels: 16,
            embedding_channels: 8,
            classes: 4,
            images_per_class: 3,
            parts: 5,
            attributes: 10,
            image_size: 224,
            head: HeadKind::GapLinear,
            hidden: 8,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Builds a complete bundle (head, annotations, attributes, confusion counts)
/// from `spec`. Features are class-biased so the head is not pure noise.
pub fn random_bundle(spec: &SyntheticSpec, seed: u64) -> Result<Bundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, d) = (spec.height, spec.width, spec.channels);
    let hw = h * w;
    let class_names: Vec<String> = (0..spec.classes).map(|c| format!("class_{c:03}")).collect();
    // per-class feature offsets, mirrored in the head weights
    let prototypes: Vec<Vec<f32>> = (0..spec.classes).map(|_| uniform(&mut rng, d, -1.0, 1.0)).collect();

    let head = match spec.head {
        HeadKind::GapLinear => {
            let weight: Vec<f32> = prototypes.iter().flatten().copied().collect();
            DecisionHead::gap_linear(weight, uniform(&mut rng, spec.classes, -0.1, 0.1), class_names.clone())?
        }
        HeadKind::FlattenMlp => {
            let first = Layer::new(
                spec.hidden,
                hw * d,
                uniform(&mut rng, spec.hidden * hw * d, -0.2, 0.2),
                uniform(&mut rng, spec.hidden, -0.1, 0.1),
            )?;
            let second = Layer::new(
                spec.classes,
                spec.hidden,
                uniform(&mut rng, spec.classes * spec.hidden, -1.0, 1.0),
                uniform(&mut rng, spec.classes, -0.1, 0.1),
            )?;
            DecisionHead::new(HeadKind::FlattenMlp, vec![first, second], class_names.clone())?
        }
    };

    let size = spec.image_size;
    let mut images = Vec::new();
    for class in 0..spec.classes {
        for k in 0..spec.images_per_class {
            let mut features = uniform(&mut rng, hw * d, -1.0, 1.0);
            for cell in features.chunks_exact_mut(d) {
                for (v, p) in cell.iter_mut().zip(&prototypes[class]) {
                    *v += p;
                }
            }
            // keep every row away from zero so renormalisation is defined
            let embedding = uniform(&mut rng, hw * spec.embedding_channels, 0.05, 1.0);
            let mut img = BundleImage::new(
                format!("{}_{k:02}", class_names[class]),
                class,
                FeatureGrid::new(h, w, d, features)?,
                FeatureGrid::new(h, w, spec.embedding_channels, embedding)?,
            )?;
            let points = (0..spec.parts)
                .map(|part| Keypoint {
                    part,
                    x: f64::from(rng.random_range(0..size)),
                    y: f64::from(rng.random_range(0..size)),
                    visible: rng.random_bool(0.8),
                })
                .collect();
            img.keypoints = Some(KeypointSet {
                image_id: img.id.clone(),
                image_width: size,
                image_height: size,
                points,
            });
            img.mask = Some((0..hw).map(|_| rng.random_bool(0.5)).collect());
            img.part_probs = Some(PartProbGrid::new(h, w, spec.parts, uniform(&mut rng, hw * spec.parts, 0.0, 1.0))?);
            images.push(img);
        }
    }

    let t = spec.attributes;
    let attributes = (t > 0 && spec.parts > 0)
        .then(|| {
            AttributeBank::new(
                d,
                uniform(&mut rng, t * d, -1.0, 1.0),
                uniform(&mut rng, t, -0.1, 0.1),
                (0..t).map(|i| format!("attribute_{i:02}")).collect(),
                (0..t).map(|i| i % spec.parts).collect(),
            )
        })
        .transpose()?;
    let class_attributes = (t > 0)
        .then(|| {
            // f32-representable so the matrix survives the f32 blob unchanged
            let values = (0..spec.classes * t).map(|_| f64::from(f32::from(rng.random_range(0u8..=20)) / 20.0)).collect();
            ClassAttributeMatrix::new(spec.classes, t, values)
        })
        .transpose()?;
    let counts = (0..spec.classes * spec.classes)
        .map(|i| {
            if i / spec.classes == i % spec.classes {
                rng.random_range(20..40)
            } else {
                rng.random_range(0..8)
            }
        })
        .collect();

    let bundle = Bundle {
        height: h,
        width: w,
        channels: d,
        embedding_channels: spec.embedding_channels,
        class_names,
        part_names: (0..spec.parts).map(|p| format!("part_{p}")).collect(),
        part_aliases: BTreeMap::new(),
        images,
        head,
        attributes,
        class_attributes,
        confusion: Some(ConfusionMatrix::new(spec.classes, counts)?),
        warnings: Vec::new(),
    };
    bundle.validate()?;
    Ok(bundle)
}
