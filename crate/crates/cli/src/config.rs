//! Run configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use convkernels::{Family, KernelConfig, PaddingScheme, Precision, Readout};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<DatasetSection>,
    pub kernel: Option<KernelSection>,
    pub readout: Option<String>,
    pub augmentation: Option<String>,
    pub augmentation_path: Option<String>,
    pub lambda: Option<f64>,
    pub precision: Option<String>,
    pub threads: Option<usize>,
    pub tile: Option<usize>,
    pub output: Option<OutputSection>,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: Option<String>,
    pub path: Option<PathBuf>,
    pub train: Option<usize>,
    pub test: Option<usize>,
    pub seed: Option<u64>,
    pub downsample: Option<bool>,
    pub standardize: Option<bool>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: Option<usize>,
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub family: Option<String>,
    pub depth: Option<usize>,
    pub filter_size: Option<usize>,
    pub bias_scale: Option<f64>,
    pub padding: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub c: Option<Vec<usize>>,
    pub depths: Option<Vec<usize>>,
}

/// Flags shared by the compute subcommands; each overrides the file value.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// cifar10, fashion-mnist, ckim or synthetic.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub data_path: Option<PathBuf>,
    /// Training subsample size.
    #[arg(long)]
    pub train: Option<usize>,
    /// Test subsample size.
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Average 2x2 pixel blocks before use.
    #[arg(long)]
    pub downsample: Option<bool>,
    #[arg(long)]
    pub standardize: Option<bool>,
    /// cnngp or cntk.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub filter_size: Option<usize>,
    #[arg(long)]
    pub bias_scale: Option<f64>,
    /// zero or circular.
    #[arg(long)]
    pub padding: Option<String>,
    /// fc, gap, or lap:<c>[:zero|circular].
    #[arg(long)]
    pub readout: Option<String>,
    /// none, flip or translation.
    #[arg(long)]
    pub augmentation: Option<String>,
    /// kernel (augmented kernel on the original data) or dataset (base
    /// kernel on the augmented data).
    #[arg(long)]
    pub augmentation_path: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Worker threads.
    #[arg(long, env = "CONVKERNELS_THREADS")]
    pub threads: Option<usize>,
    /// Tile side for kernel assembly.
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Stop after this many newly computed tiles, leaving a resumable journal.
    #[arg(long, hide = true)]
    pub stop_after_tiles: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Cifar10,
    FashionMnist,
    Ckim,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    None,
    Flip,
    Translation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentationPath {
    Kernel,
    Dataset,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedDataset {
    pub name: DatasetKind,
    pub path: Option<PathBuf>,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    pub downsample: bool,
    pub standardize: bool,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedKernel {
    pub family: String,
    pub depth: usize,
    pub filter_size: usize,
    pub bias_scale: f64,
    pub padding: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedSweep {
    pub c: Vec<usize>,
    pub depths: Vec<usize>,
}

/// Fully resolved configuration; echoed at the top of every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub readout: String,
    pub augmentation: Augmentation,
    pub augmentation_path: AugmentationPath,
    pub lambda: f64,
    pub precision: String,
    pub threads: Option<usize>,
    pub tile: usize,
    pub out_dir: PathBuf,
    pub dataset: ResolvedDataset,
    pub kernel: ResolvedKernel,
    pub sweep: Option<ResolvedSweep>,
    #[serde(skip)]
    pub stop_after_tiles: Option<usize>,
}

pub fn parse_readout(s: &str, default_padding: PaddingScheme) -> Result<Readout> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts[..] {
        ["fc"] => Ok(Readout::Fc),
        ["gap"] => Ok(Readout::Gap),
        ["lap", c] => Ok(Readout::lap(c.parse().context("LAP c")?, default_padding)),
        ["lap", c, p] => Ok(Readout::lap(c.parse().context("LAP c")?, p.parse()?)),
        _ => bail!("unknown readout '{s}', expected fc, gap or lap:<c>[:zero|circular]"),
    }
}

fn parse_kind(s: &str) -> Result<DatasetKind> {
    Ok(match s {
        "cifar10" => DatasetKind::Cifar10,
        "fashion-mnist" => DatasetKind::FashionMnist,
        "ckim" => DatasetKind::Ckim,
        "synthetic" => DatasetKind::Synthetic,
        other => bail!("unknown dataset '{other}'"),
    })
}

fn parse_augmentation(s: &str) -> Result<Augmentation> {
    Ok(match s {
        "none" => Augmentation::None,
        "flip" => Augmentation::Flip,
        "translation" => Augmentation::Translation,
        other => bail!("unknown augmentation '{other}', expected none, flip or translation"),
    })
}

fn parse_augmentation_path(s: &str) -> Result<AugmentationPath> {
    Ok(match s {
        "kernel" => AugmentationPath::Kernel,
        "dataset" => AugmentationPath::Dataset,
        other => bail!("unknown augmentation path '{other}', expected kernel or dataset"),
    })
}

pub fn load_file(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

impl RunConfig {
    pub fn resolve(command: &str, o: &Overrides, sweep: Option<(&[usize], &[usize])>) -> Result<Self> {
        let f = load_file(o.config.as_deref())?;
        let d = f.dataset.clone().unwrap_or_default();
        let k = f.kernel.clone().unwrap_or_default();
        let name = parse_kind(o.dataset.as_deref().or(d.name.as_deref()).unwrap_or("synthetic"))?;
        let dataset = ResolvedDataset {
            name,
            path: o.data_path.clone().or(d.path),
            train: o.train.or(d.train).unwrap_or(100),
            test: o.test.or(d.test).unwrap_or(100),
            seed: o.seed.or(d.seed).unwrap_or(0),
            downsample: o.downsample.or(d.downsample).unwrap_or(false),
            standardize: o.standardize.or(d.standardize).unwrap_or(true),
            height: d.height.unwrap_or(8),
            width: d.width.unwrap_or(8),
            channels: d.channels.unwrap_or(3),
            classes: d.classes.unwrap_or(10),
        };
        if dataset.name != DatasetKind::Synthetic && dataset.path.is_none() {
            bail!("dataset {:?} needs a path (--data-path)", dataset.name);
        }
        let kernel = ResolvedKernel {
            family: o.family.clone().or(k.family).unwrap_or_else(|| "cntk".into()),
            depth: o.depth.or(k.depth).unwrap_or(5),
            filter_size: o.filter_size.or(k.filter_size).unwrap_or(3),
            bias_scale: o.bias_scale.or(k.bias_scale).unwrap_or(0.0),
            padding: o.padding.clone().or(k.padding).unwrap_or_else(|| "zero".into()),
        };
        let sweep = match sweep {
            Some((c, depths)) => {
                let fs = f.sweep.clone().unwrap_or_default();
                let c = if c.is_empty() { fs.c.unwrap_or_else(|| vec![0, 4, 8]) } else { c.to_vec() };
                let depths = if depths.is_empty() { fs.depths.unwrap_or_else(|| vec![kernel.depth]) } else { depths.to_vec() };
                if c.is_empty() || depths.is_empty() || depths.contains(&0) {
                    bail!("sweep needs at least one c value and positive depths");
                }
                Some(ResolvedSweep { c, depths })
            }
            None => None,
        };
        let cfg = RunConfig {
            command: command.into(),
            readout: o.readout.clone().or(f.readout).unwrap_or_else(|| "fc".into()),
            augmentation: parse_augmentation(o.augmentation.as_deref().or(f.augmentation.as_deref()).unwrap_or("none"))?,
            augmentation_path: parse_augmentation_path(
                o.augmentation_path.as_deref().or(f.augmentation_path.as_deref()).unwrap_or("kernel"),
            )?,
            lambda: o.lambda.or(f.lambda).unwrap_or(convkernels::DEFAULT_LAMBDA),
            precision: o.precision.clone().or(f.precision).unwrap_or_else(|| "f64".into()),
            threads: o.threads.or(f.threads),
            tile: o.tile.or(f.tile).unwrap_or(convkernels::assembly::DEFAULT_TILE),
            out_dir: o.out_dir.clone().or(f.output.and_then(|s| s.dir)).unwrap_or_else(|| "convkernels-out".into()),
            dataset,
            kernel,
            sweep,
            stop_after_tiles: o.stop_after_tiles,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.kernel_config()?.validate()?;
        self.readout()?;
        self.precision()?;
        if !(self.lambda >= 0.0) {
            bail!("lambda must be non-negative");
        }
        if self.tile == 0 {
            bail!("tile must be positive");
        }
        if self.threads == Some(0) {
            bail!("threads must be positive");
        }
        if self.dataset.train == 0 {
            bail!("training subsample must be non-empty");
        }
        Ok(())
    }

    pub fn kernel_config(&self) -> Result<KernelConfig> {
        let family: Family = self.kernel.family.parse()?;
        let padding: PaddingScheme = self.kernel.padding.parse()?;
        Ok(KernelConfig::new(self.kernel.depth, family)
            .with_filter_size(self.kernel.filter_size)
            .with_bias_scale(self.kernel.bias_scale)
            .with_padding(padding))
    }

    pub fn readout(&self) -> Result<Readout> {
        parse_readout(&self.readout, self.kernel.padding.parse()?)
    }

    pub fn precision(&self) -> Result<Precision> {
        Ok(self.precision.parse()?)
    }

    /// The resolved configuration as commented TOML.
    pub fn echo(&self) -> String {
        let body = toml::to_string(self).unwrap_or_else(|e| format!("unserializable config: {e}"));
        let mut out = String::from("# resolved configuration\n");
        for line in body.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}
