use std::path::Path;

use super::idx::{load_idx_images, load_idx_labels};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Conventional IDX file names for this split.
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// Images in `[0, 1]` with class labels in `[0, classes)`.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::DatasetAssembly(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidLabel { label, classes });
        }
        if let Some(first) = images.first() {
            if images.iter().any(|i| i.shape() != first.shape()) {
                return Err(Error::DatasetAssembly("images differ in shape".into()));
            }
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    /// Loads `dir/<images file>` and `dir/<labels file>` for `split`.
    pub fn load_idx(dir: impl AsRef<Path>, split: Split, classes: usize) -> Result<Self> {
        let (img_name, lbl_name) = split.file_names();
        let dir = dir.as_ref();
        Self::load_idx_files(dir.join(img_name), dir.join(lbl_name), split, classes)
    }

    pub fn load_idx_files(
        images: impl AsRef<Path>,
        labels: impl AsRef<Path>,
        split: Split,
        classes: usize,
    ) -> Result<Self> {
        let images = load_idx_images(images)?;
        let labels = load_idx_labels(labels)?;
        if images.images.len() != labels.len() {
            return Err(Error::DatasetAssembly(format!(
                "image file holds {} images, label file holds {} labels",
                images.images.len(),
                labels.len()
            )));
        }
        Self::new(
            images.images,
            labels.into_iter().map(usize::from).collect(),
            classes,
            split,
        )
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, index: usize) -> Option<(&Tensor, usize)> {
        self.images.get(index).map(|i| (i, self.labels[index]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tensor, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    /// The first `n` examples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatch_and_bad_labels() {
        let img = Tensor::zeros(&[1, 2, 2]).unwrap();
        assert!(matches!(
            LabeledDataset::new(vec![img.clone()], vec![], 10, Split::Train),
            Err(Error::DatasetAssembly(_))
        ));
        assert!(matches!(
            LabeledDataset::new(vec![img.clone()], vec![10], 10, Split::Train),
            Err(Error::InvalidLabel { label: 10, .. })
        ));
        let d = LabeledDataset::new(vec![img.clone(), img], vec![1, 2], 10, Split::Test).unwrap();
        assert_eq!(d.take(1).len(), 1);
        assert_eq!(d.take(5).len(), 2);
    }
}
