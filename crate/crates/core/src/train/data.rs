use rayon::prelude::*;

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::imageproc::ImageU8;
use crate::model::IN_CHANNELS;
use crate::tensor::Tensor;

/// Equally sized RGB images held in memory as bytes, with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledImages {
    pub fn new(images: &[ImageU8], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dimension(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index(format!("label {bad} out of range for {num_classes} classes")));
        }
        let (height, width) = images.first().map_or((0, 0), |i| (i.height(), i.width()));
        let mut pixels = Vec::with_capacity(images.len() * height * width * IN_CHANNELS);
        for img in images {
            let rgb = img.to_rgb();
            if (rgb.height(), rgb.width()) != (height, width) {
                return Err(Error::Dimension(format!(
                    "expected {height}x{width} images, got {}x{}",
                    rgb.height(),
                    rgb.width()
                )));
            }
            pixels.extend_from_slice(rgb.data());
        }
        Ok(Self { height, width, pixels, labels, num_classes })
    }

    /// Decodes every record of `manifest`, in record order.
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let images = manifest.records.par_iter().map(|r| manifest.load_image(r)).collect::<Result<Vec<_>>>()?;
        let labels = manifest.records.iter().map(|r| r.class_id).collect();
        Self::new(&images, labels, manifest.num_classes())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image(&self, i: usize) -> ImageU8 {
        let n = self.height * self.width * IN_CHANNELS;
        ImageU8::new(self.height, self.width, IN_CHANNELS, self.pixels[i * n..(i + 1) * n].to_vec())
            .expect("stored image has a consistent size")
    }

    /// `[indices.len(), H, W, 3]` tensor scaled to `[0, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let n = self.height * self.width * IN_CHANNELS;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.pixels[i * n..(i + 1) * n].iter().map(|&v| v as f32 / 255.0));
        }
        Tensor::new(vec![indices.len(), self.height, self.width, IN_CHANNELS], data).expect("batch size matches")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Subset in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let n = self.height * self.width * IN_CHANNELS;
        let pixels = indices.iter().flat_map(|&i| self.pixels[i * n..(i + 1) * n].iter().copied()).collect();
        Self { height: self.height, width: self.width, pixels, labels: self.batch_labels(indices), num_classes: self.num_classes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_scale_and_order() {
        let imgs = [ImageU8::filled(2, 2, 3, 0).unwrap(), ImageU8::filled(2, 2, 1, 255).unwrap()];
        let set = LabeledImages::new(&imgs, vec![0, 1], 2).unwrap();
        let b = set.batch(&[1, 0]);
        assert_eq!(b.shape(), &[2, 2, 2, 3]);
        assert!(b.data()[..12].iter().all(|&v| v == 1.0));
        assert!(b.data()[12..].iter().all(|&v| v == 0.0));
        assert_eq!(set.select(&[1]).labels(), &[1]);
        assert_eq!(set.image(1).data(), &[255; 12]);
    }

    #[test]
    fn rejects_mismatches() {
        let imgs = [ImageU8::filled(2, 2, 3, 0).unwrap(), ImageU8::filled(3, 2, 3, 0).unwrap()];
        assert!(LabeledImages::new(&imgs, vec![0, 1], 2).is_err());
        assert!(LabeledImages::new(&imgs[..1], vec![2], 2).is_err());
        assert!(LabeledImages::new(&imgs[..1], vec![0, 1], 2).is_err());
    }
}
