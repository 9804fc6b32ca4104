//! Tiled, resumable assembly of kernel blocks.
//!
//! One dynamic-program pass per pair serves every requested `(depth, readout)`
//! output. Pairs are grouped into square tiles; finished tiles are persisted
//! to a work directory and recorded in a journal, so an interrupted run picks
//! up where it stopped. Every pair value is a pure function of its two images,
//! so the result does not depend on thread count or on where a run was
//! interrupted.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::augment::Group;
use crate::dp::{compute_pair_depths, KernelConfig, SelfState};
use crate::error::{Error, Result};
use crate::readout::Readout;
use crate::regression::{CrossKernel, KernelMatrix};
use crate::tensor::{Image, KernelTensor4, Real};

pub const DEFAULT_TILE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidConfig(format!("unknown precision '{other}'"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// One kernel per `(depth, readout)` output, all sharing `config` apart from
/// depth.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub config: KernelConfig,
    pub outputs: Vec<(usize, Readout)>,
    pub precision: Precision,
}

enum AnySelf {
    F32(SelfState<f32>),
    F64(SelfState<f64>),
}

impl KernelSpec {
    pub fn single(config: KernelConfig, readout: Readout) -> Self {
        KernelSpec {
            outputs: vec![(config.depth, readout)],
            config,
            precision: Precision::F64,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    fn max_depth(&self) -> usize {
        self.outputs.iter().map(|o| o.0).max().unwrap_or(0)
    }

    fn run_config(&self) -> KernelConfig {
        KernelConfig {
            depth: self.max_depth(),
            ..self.config
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outputs.is_empty() {
            return Err(Error::InvalidConfig("no kernel outputs requested".into()));
        }
        if self.outputs.iter().any(|o| o.0 == 0) {
            return Err(Error::InvalidConfig("depth must be at least 1".into()));
        }
        self.run_config().validate()
    }

    fn depths(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.outputs.iter().map(|o| o.0).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    fn self_state(&self, x: &Image) -> Result<AnySelf> {
        let cfg = self.run_config();
        Ok(match self.precision {
            Precision::F32 => AnySelf::F32(SelfState::compute(x, &cfg)?),
            Precision::F64 => AnySelf::F64(SelfState::compute(x, &cfg)?),
        })
    }

    fn eval_typed<T: Real>(
        &self,
        x: &Image,
        y: &Image,
        sx: &SelfState<T>,
        sy: &SelfState<T>,
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.outputs.len()];
        compute_pair_depths(x, y, sx, sy, &self.run_config(), &self.depths(), |h, t: KernelTensor4<T>| {
            for (k, &(depth, readout)) in self.outputs.iter().enumerate() {
                if depth == h {
                    out[k] = readout.apply(&t);
                }
            }
            Ok(())
        })?;
        Ok(out)
    }

    fn eval(&self, x: &Image, y: &Image, sx: &AnySelf, sy: &AnySelf) -> Result<Vec<f64>> {
        match (sx, sy) {
            (AnySelf::F32(a), AnySelf::F32(b)) => self.eval_typed(x, y, a, b),
            (AnySelf::F64(a), AnySelf::F64(b)) => self.eval_typed(x, y, a, b),
            _ => unreachable!("self states share the spec's precision"),
        }
    }

    /// All outputs for one pair, without caching.
    pub fn eval_pair(&self, x: &Image, y: &Image) -> Result<Vec<f64>> {
        self.validate()?;
        let sx = self.self_state(x)?;
        let sy = self.self_state(y)?;
        self.eval(x, y, &sx, &sy)
    }

    fn describe(&self) -> String {
        let outs: Vec<String> = self.outputs.iter().map(|(d, r)| format!("{d}:{r}")).collect();
        let c = &self.config;
        format!(
            "family={} q={} gamma={:e} padding={} precision={} outputs={}",
            c.family,
            c.filter_size,
            c.bias_scale,
            c.padding,
            self.precision,
            outs.join(",")
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct AssemblyOptions {
    pub tile: Option<usize>,
    /// Worker count; `None` uses the global rayon pool.
    pub threads: Option<usize>,
    /// Persist tiles and a journal here; resume from it when present.
    pub work_dir: Option<PathBuf>,
    /// Stop with [`Error::Interrupted`] after this many newly computed tiles.
    pub stop_after_tiles: Option<usize>,
    /// Called after each tile with `(done, total)`.
    pub progress: Option<fn(usize, usize)>,
}

/// Raw kernel values for every output; row-major `rows x cols` per output.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledKernels {
    pub outputs: Vec<(usize, Readout)>,
    pub rows: usize,
    pub cols: usize,
    pub raw: Vec<Vec<f64>>,
    pub row_self: Vec<Vec<f64>>,
    pub col_self: Vec<Vec<f64>>,
}

impl AssembledKernels {
    pub fn kernel_matrix(&self, output: usize, labels: &[usize], class_count: usize) -> Result<KernelMatrix> {
        if self.rows != self.cols {
            return Err(Error::ShapeMismatch("kernel matrix requires a square block".into()));
        }
        KernelMatrix::from_raw(self.rows, self.raw[output].clone(), labels.to_vec(), class_count)
    }

    pub fn cross_kernel(&self, output: usize, labels: &[usize]) -> Result<CrossKernel> {
        CrossKernel::from_raw(
            self.raw[output].clone(),
            &self.row_self[output],
            &self.col_self[output],
            labels.to_vec(),
        )
    }
}

struct Job<'a> {
    spec: &'a KernelSpec,
    rows: &'a [Image],
    cols: &'a [Image],
    symmetric: bool,
    row_states: Vec<AnySelf>,
    col_states: Vec<AnySelf>,
}

impl Job<'_> {
    fn tile_pairs(&self, r0: usize, c0: usize, tile: usize) -> Vec<(usize, usize)> {
        let r1 = (r0 + tile).min(self.rows.len());
        let c1 = (c0 + tile).min(self.cols.len());
        let mut pairs = Vec::new();
        for i in r0..r1 {
            for j in c0..c1 {
                if !self.symmetric || j >= i {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }

    /// Output-major values of the tile's pairs.
    fn compute_tile(&self, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let col_states = if self.symmetric { &self.row_states } else { &self.col_states };
        let vals = pairs
            .par_iter()
            .map(|&(i, j)| {
                self.spec
                    .eval(&self.rows[i], &self.cols[j], &self.row_states[i], &col_states[j])
                    .map_err(|e| Error::Pair {
                        row: i,
                        col: j,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let k = self.spec.outputs.len();
        let mut out = vec![0.0; k * pairs.len()];
        for (p, v) in vals.iter().enumerate() {
            for (o, &x) in v.iter().enumerate() {
                out[o * pairs.len() + p] = x;
            }
        }
        Ok(out)
    }
}

fn hash_images(h: &mut Sha256, images: &[Image]) {
    h.update((images.len() as u64).to_le_bytes());
    for x in images {
        for d in [x.height(), x.width(), x.channels()] {
            h.update((d as u64).to_le_bytes());
        }
        for v in x.values() {
            h.update(v.to_le_bytes());
        }
    }
}

fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

struct Journal {
    dir: PathBuf,
    done: HashSet<(usize, usize)>,
}

const MANIFEST: &str = "manifest.txt";
const JOURNAL: &str = "journal.txt";

impl Journal {
    fn open(dir: &Path, fingerprint: &str, tile: usize) -> Result<Self> {
        fs::create_dir_all(dir.join("tiles"))?;
        let manifest = format!("fingerprint {fingerprint}\ntile {tile}\n");
        let mpath = dir.join(MANIFEST);
        if mpath.exists() {
            if fs::read_to_string(&mpath)? != manifest {
                return Err(Error::JournalMismatch(dir.to_path_buf()));
            }
        } else {
            let _ = fs::remove_file(dir.join(JOURNAL));
            fs::write(&mpath, manifest)?;
        }
        let mut done = HashSet::new();
        let jpath = dir.join(JOURNAL);
        if jpath.exists() {
            for line in BufReader::new(File::open(&jpath)?).lines() {
                let line = line?;
                let parts: Vec<&str> = line.split_whitespace().collect();
                let [r, c, sum] = parts[..] else { continue };
                let (Ok(r), Ok(c)) = (r.parse::<usize>(), c.parse::<usize>()) else { continue };
                // A tile counts as done only if its file still matches the journal.
                if let Ok(bytes) = fs::read(Self::tile_path(dir, r, c)) {
                    if checksum(&bytes) == sum {
                        done.insert((r, c));
                    }
                }
            }
        }
        Ok(Journal {
            dir: dir.to_path_buf(),
            done,
        })
    }

    fn tile_path(dir: &Path, r: usize, c: usize) -> PathBuf {
        dir.join("tiles").join(format!("{r}_{c}.bin"))
    }

    fn load(&self, r: usize, c: usize) -> Result<Vec<f64>> {
        Ok(from_bytes(&fs::read(Self::tile_path(&self.dir, r, c))?))
    }

    fn record(&mut self, r: usize, c: usize, values: &[f64]) -> Result<()> {
        let bytes = to_bytes(values);
        let path = Self::tile_path(&self.dir, r, c);
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        let mut j = OpenOptions::new().create(true).append(true).open(self.dir.join(JOURNAL))?;
        writeln!(j, "{r} {c} {}", checksum(&bytes))?;
        j.sync_all()?;
        self.done.insert((r, c));
        Ok(())
    }
}

/// Assembles `K(rows_i, cols_j)` for every output. `cols = None` assembles the
/// symmetric block over `rows`, computing only the upper triangle.
pub fn assemble(
    spec: &KernelSpec,
    rows: &[Image],
    cols: Option<&[Image]>,
    opts: &AssemblyOptions,
) -> Result<AssembledKernels> {
    spec.validate()?;
    if rows.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    let pool = match opts.threads {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?,
        ),
        None => None,
    };
    match pool {
        Some(p) => p.install(|| assemble_in_pool(spec, rows, cols, opts)),
        None => assemble_in_pool(spec, rows, cols, opts),
    }
}

fn self_states(spec: &KernelSpec, images: &[Image]) -> Result<Vec<AnySelf>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            spec.self_state(x).map_err(|e| Error::Pair {
                row: i,
                col: i,
                source: Box::new(e),
            })
        })
        .collect()
}

fn self_values(spec: &KernelSpec, images: &[Image], states: &[AnySelf]) -> Result<Vec<Vec<f64>>> {
    let per_image = images
        .par_iter()
        .zip(states)
        .enumerate()
        .map(|(i, (x, s))| {
            spec.eval(x, x, s, s).map_err(|e| Error::Pair {
                row: i,
                col: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..spec.outputs.len())
        .map(|o| per_image.iter().map(|v| v[o]).collect())
        .collect())
}

fn assemble_in_pool(
    spec: &KernelSpec,
    rows: &[Image],
    cols: Option<&[Image]>,
    opts: &AssemblyOptions,
) -> Result<AssembledKernels> {
    let symmetric = cols.is_none();
    let cols_imgs = cols.unwrap_or(rows);
    let tile = opts.tile.unwrap_or(DEFAULT_TILE).max(1);
    let row_states = self_states(spec, rows)?;
    let col_states = if symmetric { Vec::new() } else { self_states(spec, cols_imgs)? };
    let job = Job {
        spec,
        rows,
        cols: cols_imgs,
        symmetric,
        row_states,
        col_states,
    };

    let mut journal = match &opts.work_dir {
        Some(dir) => {
            let mut h = Sha256::new();
            h.update(spec.describe().as_bytes());
            h.update([symmetric as u8]);
            hash_images(&mut h, rows);
            if !symmetric {
                hash_images(&mut h, cols_imgs);
            }
            Some(Journal::open(dir, &hex::encode(h.finalize()), tile)?)
        }
        None => None,
    };

    let (n, m) = (rows.len(), cols_imgs.len());
    let k = spec.outputs.len();
    let mut raw = vec![vec![0.0; n * m]; k];
    let tiles: Vec<(usize, usize)> = (0..n)
        .step_by(tile)
        .flat_map(|r| (0..m).step_by(tile).map(move |c| (r, c)))
        .filter(|&(r, c)| !symmetric || c + tile > r)
        .collect();
    let total = tiles.len();
    let mut fresh = 0;
    for (done, &(r0, c0)) in tiles.iter().enumerate() {
        let pairs = job.tile_pairs(r0, c0, tile);
        let cached = match &journal {
            Some(j) if j.done.contains(&(r0, c0)) => {
                let v = j.load(r0, c0)?;
                (v.len() == k * pairs.len()).then_some(v)
            }
            _ => None,
        };
        let values = match cached {
            Some(v) => v,
            None => {
                if opts.stop_after_tiles.is_some_and(|s| fresh >= s) {
                    return Err(Error::Interrupted { completed: done });
                }
                let v = job.compute_tile(&pairs)?;
                if let Some(j) = journal.as_mut() {
                    j.record(r0, c0, &v)?;
                }
                fresh += 1;
                v
            }
        };
        for o in 0..k {
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let v = values[o * pairs.len() + p];
                raw[o][i * m + j] = v;
                if symmetric {
                    raw[o][j * m + i] = v;
                }
            }
        }
        if let Some(f) = opts.progress {
            f(done + 1, total);
        }
    }

    let (row_self, col_self) = if symmetric {
        let diag: Vec<Vec<f64>> = raw.iter().map(|r| (0..n).map(|i| r[i * n + i]).collect()).collect();
        (diag.clone(), diag)
    } else {
        (
            self_values(spec, rows, &job.row_states)?,
            self_values(spec, cols_imgs, &job.col_states)?,
        )
    };
    Ok(AssembledKernels {
        outputs: spec.outputs.clone(),
        rows: n,
        cols: m,
        raw,
        row_self,
        col_self,
    })
}

/// Normalized train and test-by-train blocks for every output of `spec`.
pub struct KernelBlocks {
    pub outputs: Vec<(usize, Readout)>,
    pub train: Vec<KernelMatrix>,
    pub test: Vec<CrossKernel>,
}

fn with_subdir(opts: &AssemblyOptions, name: &str) -> AssemblyOptions {
    AssemblyOptions {
        work_dir: opts.work_dir.as_ref().map(|d| d.join(name)),
        ..opts.clone()
    }
}

/// Computes train and test blocks. With a group, the blocks hold the
/// augmented kernel `mean_g K(g x, y)`, normalized by the base kernel's self
/// values so that it equals the augmentation of the normalized base kernel;
/// the train block is symmetrized, which is exact for equivariant kernels.
pub fn kernel_blocks(
    spec: &KernelSpec,
    group: Option<&Group>,
    train: &LabeledSet,
    test: &LabeledSet,
    class_count: usize,
    opts: &AssemblyOptions,
) -> Result<KernelBlocks> {
    let k = spec.outputs.len();
    let Some(group) = group.filter(|g| g.len() > 1) else {
        let tr = assemble(spec, train.images, None, &with_subdir(opts, "train"))?;
        let te = assemble(spec, test.images, Some(train.images), &with_subdir(opts, "test"))?;
        return Ok(KernelBlocks {
            outputs: spec.outputs.clone(),
            train: (0..k).map(|o| tr.kernel_matrix(o, train.labels, class_count)).collect::<Result<_>>()?,
            test: (0..k).map(|o| te.cross_kernel(o, test.labels)).collect::<Result<_>>()?,
        });
    };
    group.require_group()?;
    let id = group
        .elements()
        .iter()
        .position(|g| g.is_identity())
        .ok_or_else(|| Error::InvalidConfig("group has no identity element".into()))?;
    let g_len = group.len();
    let augment_rows = |images: &[Image]| -> Vec<Image> {
        group
            .elements()
            .iter()
            .flat_map(|g| images.iter().map(move |x| group.apply(g, x)))
            .collect()
    };
    let average = |block: &AssembledKernels, o: usize, m: usize| -> Vec<f64> {
        let n = block.cols;
        let mut out = vec![0.0; m * n];
        for g in 0..g_len {
            for (dst, src) in out.iter_mut().zip(&block.raw[o][g * m * n..(g + 1) * m * n]) {
                *dst += src;
            }
        }
        out.iter_mut().for_each(|v| *v /= g_len as f64);
        out
    };
    let (n, m) = (train.images.len(), test.images.len());
    let tr = assemble(spec, &augment_rows(train.images), Some(train.images), &with_subdir(opts, "train"))?;
    let te = assemble(spec, &augment_rows(test.images), Some(train.images), &with_subdir(opts, "test"))?;
    let mut train_blocks = Vec::with_capacity(k);
    let mut test_blocks = Vec::with_capacity(k);
    for o in 0..k {
        let mut raw = average(&tr, o, n);
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (raw[i * n + j] + raw[j * n + i]);
                raw[i * n + j] = v;
                raw[j * n + i] = v;
            }
        }
        let train_self = tr.col_self[o].clone();
        let test_self = block_slice(&te.row_self[o], id, m);
        train_blocks.push(KernelMatrix::from_raw_with_self(n, raw, train_self.clone(), train.labels.to_vec(), class_count)?);
        test_blocks.push(CrossKernel::from_raw(average(&te, o, m), &test_self, &train_self, test.labels.to_vec())?);
    }
    Ok(KernelBlocks {
        outputs: spec.outputs.clone(),
        train: train_blocks,
        test: test_blocks,
    })
}

fn block_slice(values: &[f64], block: usize, len: usize) -> Vec<f64> {
    values[block * len..(block + 1) * len].to_vec()
}

/// Borrowed images with their labels.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSet<'a> {
    pub images: &'a [Image],
    pub labels: &'a [usize],
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{ConvKernel, PairKernel};
    use crate::dp::Family;
    use crate::regression::gram_matrix;
    use crate::tensor::PaddingScheme;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Image::from_fn(4, 4, 2, |_, _, _| rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn sweep_spec() -> KernelSpec {
        KernelSpec {
            config: KernelConfig::new(3, Family::Cntk),
            outputs: vec![
                (1, Readout::Fc),
                (3, Readout::Fc),
                (3, Readout::Gap),
                (3, Readout::lap(1, PaddingScheme::Zero)),
            ],
            precision: Precision::F64,
        }
    }

    #[test]
    fn matches_direct_pair_evaluation() {
        let imgs = images(5, 1);
        let spec = sweep_spec();
        let out = assemble(&spec, &imgs, None, &AssemblyOptions { tile: Some(2), ..Default::default() }).unwrap();
        for (o, &(depth, readout)) in spec.outputs.iter().enumerate() {
            let cfg = KernelConfig { depth, ..spec.config };
            let direct = gram_matrix(&ConvKernel::new(cfg, readout), &imgs).unwrap();
            for (a, b) in out.raw[o].iter().zip(&direct) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{o}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn cross_block_and_self_values() {
        let train = images(3, 2);
        let test = images(2, 3);
        let spec = KernelSpec::single(KernelConfig::new(2, Family::CnnGp), Readout::Gap);
        let out = assemble(&spec, &test, Some(&train), &AssemblyOptions::default()).unwrap();
        let k = ConvKernel::new(spec.config, Readout::Gap);
        for i in 0..2 {
            assert!((out.row_self[0][i] - k.eval(&test[i], &test[i]).unwrap()).abs() < 1e-12);
            for j in 0..3 {
                assert!((out.raw[0][i * 3 + j] - k.eval(&test[i], &train[j]).unwrap()).abs() < 1e-12);
            }
        }
        let cross = out.cross_kernel(0, &[0, 1]).unwrap();
        assert!(cross.values.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn single_image_is_unit() {
        let imgs = images(1, 4);
        let spec = KernelSpec::single(KernelConfig::new(2, Family::Cntk), Readout::Fc);
        let out = assemble(&spec, &imgs, None, &AssemblyOptions::default()).unwrap();
        assert_eq!(out.kernel_matrix(0, &[0], 1).unwrap().values, vec![1.0]);
    }

    #[test]
    fn thread_count_does_not_change_bytes() {
        let imgs = images(7, 5);
        let spec = sweep_spec();
        let run = |t| {
            let opts = AssemblyOptions { tile: Some(3), threads: Some(t), ..Default::default() };
            assemble(&spec, &imgs, None, &opts).unwrap()
        };
        let a = run(1);
        let b = run(8);
        for o in 0..spec.outputs.len() {
            assert_eq!(to_bytes(&a.raw[o]), to_bytes(&b.raw[o]));
        }
    }

    #[test]
    fn interrupted_run_resumes_to_identical_output() {
        let imgs = images(7, 6);
        let spec = sweep_spec();
        let dir = tempfile::tempdir().unwrap();
        let opts = |stop| AssemblyOptions {
            tile: Some(2),
            work_dir: Some(dir.path().to_path_buf()),
            stop_after_tiles: stop,
            ..Default::default()
        };
        let err = assemble(&spec, &imgs, None, &opts(Some(3))).unwrap_err();
        assert!(matches!(err, Error::Interrupted { completed: 3 }));
        let journal = fs::read_to_string(dir.path().join(JOURNAL)).unwrap();
        assert_eq!(journal.lines().count(), 3);
        let resumed = assemble(&spec, &imgs, None, &opts(None)).unwrap();
        let clean = assemble(&spec, &imgs, None, &AssemblyOptions { tile: Some(2), ..Default::default() }).unwrap();
        assert_eq!(resumed, clean);
    }

    #[test]
    fn corrupted_tile_is_recomputed() {
        let imgs = images(4, 7);
        let spec = KernelSpec::single(KernelConfig::new(2, Family::CnnGp), Readout::Fc);
        let dir = tempfile::tempdir().unwrap();
        let opts = AssemblyOptions { tile: Some(2), work_dir: Some(dir.path().to_path_buf()), ..Default::default() };
        let first = assemble(&spec, &imgs, None, &opts).unwrap();
        fs::write(Journal::tile_path(dir.path(), 0, 0), [0u8; 24]).unwrap();
        let second = assemble(&spec, &imgs, None, &opts).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn changed_inputs_are_detected() {
        let imgs = images(3, 8);
        let spec = KernelSpec::single(KernelConfig::new(1, Family::CnnGp), Readout::Fc);
        let dir = tempfile::tempdir().unwrap();
        let opts = AssemblyOptions { work_dir: Some(dir.path().to_path_buf()), ..Default::default() };
        assemble(&spec, &imgs, None, &opts).unwrap();
        let other = images(3, 9);
        assert!(matches!(assemble(&spec, &other, None, &opts), Err(Error::JournalMismatch(_))));
    }

    #[test]
    fn f32_mode_tracks_f64() {
        let imgs = images(3, 10);
        let spec = sweep_spec();
        let a = assemble(&spec, &imgs, None, &AssemblyOptions::default()).unwrap();
        let b = assemble(&spec.clone().with_precision(Precision::F32), &imgs, None, &AssemblyOptions::default()).unwrap();
        for o in 0..spec.outputs.len() {
            for (x, y) in a.raw[o].iter().zip(&b.raw[o]) {
                assert!((x - y).abs() <= 1e-4 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn flip_blocks_match_augmented_dataset_regression() {
        use crate::augment::build_augmented_dataset;
        use crate::regression::{augmented_ridge, krr_fit, krr_predict, max_score_difference};
        let train = images(6, 11);
        let test = images(3, 12);
        let (ytr, yte) = (vec![0, 1, 2, 0, 1, 2], vec![0, 1, 2]);
        let spec = KernelSpec::single(KernelConfig::new(2, Family::CnnGp), Readout::lap(1, PaddingScheme::Zero));
        let group = Group::flips(4, 4, PaddingScheme::Zero);
        let opts = AssemblyOptions::default();
        let a = kernel_blocks(&spec, Some(&group), &LabeledSet { images: &train, labels: &ytr }, &LabeledSet { images: &test, labels: &yte }, 3, &opts).unwrap();
        let aug = build_augmented_dataset(&train, &ytr, &group).unwrap();
        let (ax, ay) = (aug.images(), aug.labels());
        let b = kernel_blocks(&spec, None, &LabeledSet { images: &ax, labels: &ay }, &LabeledSet { images: &test, labels: &yte }, 3, &opts).unwrap();
        for lambda in [0.0, 1e-3] {
            let pa = krr_predict(&krr_fit(&a.train[0], lambda).unwrap(), &a.test[0]).unwrap();
            let pb = krr_predict(&krr_fit(&b.train[0], augmented_ridge(lambda, 2)).unwrap(), &b.test[0]).unwrap();
            assert!(max_score_difference(&pa, &pb) < 1e-8, "{lambda}");
        }
    }
}
