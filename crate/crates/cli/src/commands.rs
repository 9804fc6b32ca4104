use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use convkernels::{
    build_augmented_dataset, kernel_blocks, krr_fit, krr_predict, write_cross_kernel, write_dataset,
    write_kernel_matrix, AssemblyOptions, DataSplit, Group, KernelBlocks, KernelSpec, LabeledSet,
    Prediction, Readout,
};

use crate::config::{Augmentation, AugmentationPath, RunConfig};
use crate::data;

fn report_tile(done: usize, total: usize) {
    eprintln!("progress tiles={done}/{total}");
}

fn assembly_options(cfg: &RunConfig) -> AssemblyOptions {
    AssemblyOptions {
        tile: Some(cfg.tile),
        threads: cfg.threads,
        work_dir: Some(cfg.out_dir.join("work")),
        stop_after_tiles: cfg.stop_after_tiles,
        progress: Some(report_tile),
    }
}

fn group_for(cfg: &RunConfig, split: &DataSplit) -> Result<Option<Group>> {
    let (p, q, _) = split.train.shape().context("empty training set")?;
    let padding = cfg.kernel_config()?.padding;
    Ok(match cfg.augmentation {
        Augmentation::None => None,
        Augmentation::Flip => Some(Group::flips(p, q, padding)),
        Augmentation::Translation => Some(Group::translations(p, q, padding)),
    })
}

/// Kernel blocks plus the ridge that matches `cfg.lambda` on the original
/// training set.
pub struct Computed {
    pub blocks: KernelBlocks,
    pub lambda: f64,
    pub path: &'static str,
    pub train_len: usize,
}

pub fn compute(cfg: &RunConfig, spec: &KernelSpec, split: &DataSplit) -> Result<Computed> {
    spec.validate()?;
    let group = group_for(cfg, split)?;
    let opts = assembly_options(cfg);
    let test = LabeledSet {
        images: &split.test.images,
        labels: &split.test.labels,
    };
    let classes = split.train.class_count.max(split.test.class_count);
    match (&group, cfg.augmentation_path) {
        (Some(g), AugmentationPath::Dataset) => {
            let aug = build_augmented_dataset(&split.train.images, &split.train.labels, g)?;
            let (images, labels) = (aug.images(), aug.labels());
            let train = LabeledSet {
                images: &images,
                labels: &labels,
            };
            Ok(Computed {
                blocks: kernel_blocks(spec, None, &train, &test, classes, &opts)?,
                lambda: cfg.lambda * g.len() as f64,
                path: "augmented-dataset",
                train_len: images.len(),
            })
        }
        _ => {
            let train = LabeledSet {
                images: &split.train.images,
                labels: &split.train.labels,
            };
            Ok(Computed {
                blocks: kernel_blocks(spec, group.as_ref(), &train, &test, classes, &opts)?,
                lambda: cfg.lambda,
                path: if group.is_some() { "augmented-kernel" } else { "base-kernel" },
                train_len: split.train.len(),
            })
        }
    }
}

fn single_spec(cfg: &RunConfig) -> Result<KernelSpec> {
    Ok(KernelSpec::single(cfg.kernel_config()?, cfg.readout()?).with_precision(cfg.precision()?))
}

fn prepare(cfg: &RunConfig) -> Result<DataSplit> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    print!("{}", cfg.echo());
    let split = data::load(&cfg.dataset)?;
    let shape = split.train.shape().context("empty training set")?;
    println!(
        "data train={} test={} shape={}x{}x{} classes={}",
        split.train.len(),
        split.test.len(),
        shape.0,
        shape.1,
        shape.2,
        split.train.class_count
    );
    Ok(split)
}

fn write_blocks(dir: &Path, blocks: &KernelBlocks, output: usize) -> Result<(PathBuf, PathBuf)> {
    let (tr, te) = (dir.join("train.ck4m"), dir.join("test.ck4r"));
    write_kernel_matrix(&tr, &blocks.train[output])?;
    write_cross_kernel(&te, &blocks.test[output])?;
    Ok((tr, te))
}

pub fn kernel(cfg: &RunConfig) -> Result<()> {
    let split = prepare(cfg)?;
    let c = compute(cfg, &single_spec(cfg)?, &split)?;
    let (tr, te) = write_blocks(&cfg.out_dir, &c.blocks, 0)?;
    println!("path={}", c.path);
    println!("train_kernel={}", tr.display());
    println!("test_kernel={}", te.display());
    Ok(())
}

fn fit_predict(c: &Computed, output: usize) -> Result<(Prediction, f64)> {
    let model = krr_fit(&c.blocks.train[output], c.lambda)?;
    Ok((krr_predict(&model, &c.blocks.test[output])?, model.relative_residual))
}

fn write_predictions(path: &Path, pred: &Prediction, truth: &[usize]) -> Result<()> {
    let mut out = String::from("index,label,predicted");
    for k in 0..pred.class_count {
        write!(out, ",score_{k}")?;
    }
    out.push('\n');
    for (i, (&y, &p)) in truth.iter().zip(&pred.labels).enumerate() {
        write!(out, "{i},{y},{p}")?;
        for s in &pred.scores[i * pred.class_count..(i + 1) * pred.class_count] {
            write!(out, ",{s:e}")?;
        }
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn regress(cfg: &RunConfig) -> Result<()> {
    let split = prepare(cfg)?;
    let c = compute(cfg, &single_spec(cfg)?, &split)?;
    write_blocks(&cfg.out_dir, &c.blocks, 0)?;
    let (pred, residual) = fit_predict(&c, 0)?;
    let truth = &split.test.labels;
    let preds = cfg.out_dir.join("predictions.csv");
    write_predictions(&preds, &pred, truth)?;
    println!("path={}", c.path);
    println!("train_points={}", c.train_len);
    println!("test_points={}", truth.len());
    println!("lambda={:e}", cfg.lambda);
    println!("effective_lambda={:e}", c.lambda);
    println!("relative_residual={residual:e}");
    println!("accuracy={:.6}", pred.accuracy(truth));
    for k in 0..pred.class_count {
        let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == k).collect();
        if idx.is_empty() {
            continue;
        }
        let hits = idx.iter().filter(|&&i| pred.labels[i] == k).count();
        println!("class_{k}_accuracy={:.6} n={}", hits as f64 / idx.len() as f64, idx.len());
    }
    println!("predictions={}", preds.display());
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let s = cfg.sweep.as_ref().context("sweep values")?;
    let padding = cfg.kernel_config()?.padding;
    let outputs: Vec<(usize, Readout)> = s
        .depths
        .iter()
        .flat_map(|&d| s.c.iter().map(move |&c| (d, Readout::lap(c, padding))))
        .collect();
    let spec = KernelSpec {
        config: cfg.kernel_config()?,
        outputs,
        precision: cfg.precision()?,
    };
    let split = prepare(cfg)?;
    let c = compute(cfg, &spec, &split)?;
    let mut acc = vec![vec![0.0; s.depths.len()]; s.c.len()];
    for (o, &(d, r)) in spec.outputs.iter().enumerate() {
        let (pred, _) = fit_predict(&c, o)?;
        let (di, ci) = (o / s.c.len(), o % s.c.len());
        debug_assert_eq!((s.depths[di], Readout::lap(s.c[ci], padding)), (d, r));
        acc[ci][di] = pred.accuracy(&split.test.labels);
    }
    let mut table = format!("{:>6}", "c\\L");
    for d in &s.depths {
        write!(table, " {d:>9}")?;
    }
    table.push('\n');
    for (ci, c) in s.c.iter().enumerate() {
        write!(table, "{c:>6}")?;
        for a in &acc[ci] {
            write!(table, " {a:>9.4}")?;
        }
        table.push('\n');
    }
    print!("path={}\n{table}", c.path);
    fs::write(cfg.out_dir.join("sweep.txt"), &table)?;
    Ok(())
}

pub struct FeatureArgs {
    pub patches: usize,
    pub patch_size: usize,
    pub epsilon: f64,
    pub flip_closed: bool,
}

pub fn features(cfg: &RunConfig, a: &FeatureArgs) -> Result<()> {
    let split = prepare(cfg)?;
    let opts = convkernels::PatchBankOptions {
        count: a.patches,
        size: a.patch_size,
        seed: cfg.dataset.seed,
        epsilon: a.epsilon,
        flip_closed: a.flip_closed,
    };
    let bank = convkernels::build_patch_bank(&split.train, &opts)?;
    let train = convkernels::data::featurize_dataset(&split.train, &bank)?;
    let test = convkernels::data::featurize_dataset(&split.test, &bank)?;
    let (tr, te) = (cfg.out_dir.join("train.ckim"), cfg.out_dir.join("test.ckim"));
    write_dataset(&tr, &train)?;
    write_dataset(&te, &test)?;
    let shape = train.shape().context("empty training set")?;
    println!("filters={} patch_dim={}", bank.filters.len(), bank.dim());
    println!("feature_shape={}x{}x{}", shape.0, shape.1, shape.2);
    println!("train_features={}", tr.display());
    println!("test_features={}", te.display());
    Ok(())
}
