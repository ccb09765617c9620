//! Dataset handling: synthetic generation, PGM I/O, ROI extraction,
//! augmentation, splitting and batching.

pub mod dataset;
pub mod pgm;
pub mod roi;
pub mod synth;

pub use dataset::{
    load_dataset, load_roi_cache, read_index, save_dataset, save_roi_cache, split_dataset, DatasetSplit, Identified,
    IndexEntry, SplitGuard,
};
pub use roi::{
    augment_flips, bounding_box, context_box, extract_rois, flip_sample, whole_image_crops, PixelBox, RoiGeometry,
    RoiSample,
};
pub use synth::{synth_background, synth_dataset, synth_image, SynthSpec};

use crate::error::{Error, Result};
use crate::net::{Batch, NetConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A full image with its mass annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage<T: Scalar> {
    pub id: String,
    /// `H×W` intensities in `[0, 1]`.
    pub image: Tensor<T>,
    /// `H×W` binary mass mask.
    pub mask: Tensor<T>,
    pub label: usize,
}

impl RoiGeometry {
    pub fn for_net(cfg: &NetConfig) -> Self {
        RoiGeometry { bbox: cfg.bbox_size, context: cfg.context_size, mask: cfg.mask_size }
    }
}

/// Stacks samples into network inputs, replicating the grey context ROI
/// over the network's input channels.
pub fn make_batch<T: Scalar>(samples: &[&RoiSample<T>], cfg: &NetConfig) -> Result<Batch<T>> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let g = RoiGeometry::for_net(cfg);
    let (s, c) = (cfg.context_size, cfg.in_channels);
    let mut context = Vec::with_capacity(samples.len() * c * s * s);
    let mut bbox = Vec::new();
    let mut mask = Vec::new();
    for sample in samples {
        sample.validate(&g)?;
        for _ in 0..c {
            context.extend_from_slice(sample.context_roi.data());
        }
        bbox.extend_from_slice(sample.bbox_roi.data());
        mask.extend_from_slice(sample.mask_roi.data());
    }
    let n = samples.len();
    Ok(Batch {
        context: Tensor::new(&[n, c, s, s], context)?,
        bbox: Tensor::new(&[n, 1, g.bbox, g.bbox], bbox)?,
        mask: Tensor::new(&[n, 1, g.mask, g.mask], mask)?,
        labels: samples.iter().map(|s| s.label).collect(),
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    })
}

/// Batch of one unannotated image for inference: no mask (all zeros) and
/// label 0.
pub fn inference_batch<T: Scalar>(id: &str, image: &Tensor<T>, cfg: &NetConfig) -> Result<Batch<T>> {
    let g = RoiGeometry::for_net(cfg);
    let (bbox, context) = whole_image_crops(image, &g)?;
    let (s, c) = (cfg.context_size, cfg.in_channels);
    let context: Vec<T> = (0..c).flat_map(|_| context.data().iter().copied()).collect();
    Ok(Batch {
        context: Tensor::new(&[1, c, s, s], context)?,
        bbox: bbox.into_shape(&[1, 1, g.bbox, g.bbox])?,
        mask: Tensor::zeros(&[1, 1, g.mask, g.mask]),
        labels: vec![0],
        ids: vec![id.to_string()],
    })
}
