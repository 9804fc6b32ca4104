//! Dataset loading and preprocessing for a resolved run configuration.

use anyhow::{Context, Result};
use convkernels::data::{downsample_dataset, read_dataset};
use convkernels::{load_cifar10, load_fashion_mnist, standardize, DataSplit, Image, LabeledDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetKind, ResolvedDataset};

/// Class templates plus uniform noise; reproducible from the seed alone.
pub fn synthetic(d: &ResolvedDataset) -> Result<DataSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let (h, w, c) = (d.height, d.width, d.channels);
    let templates: Vec<Image> = (0..d.classes)
        .map(|_| Image::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0)))
        .collect();
    let mut draw = |n: usize, tag: &str| {
        let labels: Vec<usize> = (0..n).map(|i| i % d.classes).collect();
        let images = labels
            .iter()
            .map(|&l| {
                let t = &templates[l];
                Image::from_fn(h, w, c, |i, j, k| t.get(i, j, k) + rng.random_range(-1.0..1.0))
            })
            .collect();
        LabeledDataset::new(images, labels, d.classes, format!("synthetic:{tag}@{}", d.seed))
    };
    let train = draw(d.train, "train")?;
    let test = draw(d.test, "test")?;
    Ok(DataSplit { train, test })
}

fn load_raw(d: &ResolvedDataset) -> Result<DataSplit> {
    if d.name == DatasetKind::Synthetic {
        return synthetic(d);
    }
    let path = d.path.as_deref().context("dataset path")?;
    Ok(match d.name {
        DatasetKind::Synthetic => unreachable!(),
        DatasetKind::Cifar10 => load_cifar10(path)?,
        DatasetKind::FashionMnist => load_fashion_mnist(path)?,
        DatasetKind::Ckim => DataSplit {
            train: read_dataset(&path.join("train.ckim"))?,
            test: read_dataset(&path.join("test.ckim"))?,
        },
    })
}

/// Loads, subsamples, optionally downsamples, then standardizes with
/// training statistics.
pub fn load(d: &ResolvedDataset) -> Result<DataSplit> {
    let raw = load_raw(d)?;
    let mut split = if d.name == DatasetKind::Synthetic {
        raw
    } else {
        DataSplit {
            train: raw.train.subsample(d.train, d.seed)?,
            test: raw.test.subsample(d.test, d.seed.wrapping_add(1))?,
        }
    };
    if d.downsample {
        split = DataSplit {
            train: downsample_dataset(&split.train),
            test: downsample_dataset(&split.test),
        };
    }
    if d.standardize {
        split = standardize(&split)?;
    }
    Ok(split)
}
