//! Little-endian binary files: tensors, datasets and checkpoints.
//!
//! A tensor record is the name length (`u64`), the UTF-8 name, the rank
//! (`u64`), the extents (`u64` each) and the data (`f64` each). Dataset and
//! checkpoint files are built from these records behind a magic tag and a
//! format version.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use sitemeta_core::backbone::ModelSpec;
use sitemeta_core::episodes::{Roles, SiteDataset, SiteTable};
use sitemeta_core::metalearn::{Checkpoint, LearnableLRTable, MetaConfig, Order};
use sitemeta_core::{ParamSet, Tensor};

pub const DATASET_MAGIC: [u8; 4] = *b"SMDS";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SMCK";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on any length field, to fail fast on corrupt input.
const MAX_LEN: u64 = 1 << 32;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a {expected} file")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Invalid(#[from] sitemeta_core::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(FormatError::Corrupt(msg.into()))
}

pub fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_usize(w: &mut impl Write, v: usize) -> io::Result<()> {
    write_u64(w, v as u64)
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_len(r: &mut impl Read) -> Result<usize> {
    let v = read_u64(r)?;
    if v > MAX_LEN {
        return corrupt(format!("length {v} out of range"));
    }
    Ok(v as usize)
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    write_usize(w, s.len())?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_len(r)?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).or_else(|_| corrupt("name is not UTF-8"))
}

fn write_usizes(w: &mut impl Write, v: &[usize]) -> io::Result<()> {
    write_usize(w, v.len())?;
    v.iter().try_for_each(|&x| write_usize(w, x))
}

fn read_usizes(r: &mut impl Read) -> Result<Vec<usize>> {
    let n = read_len(r)?;
    (0..n).map(|_| read_len(r)).collect()
}

pub fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> io::Result<()> {
    write_str(w, name)?;
    write_usizes(w, t.shape())?;
    t.data().iter().try_for_each(|&v| write_f64(w, v))
}

pub fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name = read_str(r)?;
    let shape = read_usizes(r)?;
    let n = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
    let n = match n {
        Some(n) if (n as u64) <= MAX_LEN => n,
        _ => return corrupt(format!("tensor {name} has extents {shape:?}")),
    };
    let data = (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
    Ok((name, Tensor::new(&shape, data)?))
}

fn expect_name(got: &str, want: &str) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        corrupt(format!("expected tensor {want}, found {got}"))
    }
}

fn write_header(w: &mut impl Write, magic: [u8; 4]) -> io::Result<()> {
    w.write_all(&magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())
}

fn read_header(r: &mut impl Read, magic: [u8; 4], expected: &'static str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if m != magic {
        return Err(FormatError::BadMagic { expected });
    }
    match read_u32(r)? {
        FORMAT_VERSION => Ok(()),
        v => Err(FormatError::Version(v)),
    }
}

fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => corrupt("trailing bytes"),
    }
}

/// Header: site count, the three role lists, per-site example and holdout
/// counts, generation lengths and the feature shape. Then per site its
/// features, labels and (when present) generation parameters.
pub fn write_dataset(w: &mut impl Write, table: &SiteTable) -> Result<()> {
    write_header(w, DATASET_MAGIC)?;
    write_usize(w, table.sites.len())?;
    write_usizes(w, &table.roles.meta_train)?;
    write_usizes(w, &table.roles.meta_test)?;
    write_usizes(w, &table.roles.zero_shot)?;
    for s in &table.sites {
        write_usize(w, s.len())?;
        write_usize(w, s.holdout)?;
        write_usize(w, s.generation.len())?;
    }
    write_usizes(w, table.feature_shape())?;
    for s in &table.sites {
        let id = s.site_id;
        write_tensor(w, &format!("site{id}.features"), &s.features)?;
        let labels = Tensor::from_vec(s.labels.iter().map(|&y| f64::from(y)).collect())?;
        write_tensor(w, &format!("site{id}.labels"), &labels)?;
        if !s.generation.is_empty() {
            write_tensor(
                w,
                &format!("site{id}.generation"),
                &Tensor::from_vec(s.generation.clone())?,
            )?;
        }
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<SiteTable> {
    read_header(r, DATASET_MAGIC, "dataset")?;
    let n_sites = read_len(r)?;
    let roles = Roles {
        meta_train: read_usizes(r)?,
        meta_test: read_usizes(r)?,
        zero_shot: read_usizes(r)?,
    };
    let counts = (0..n_sites)
        .map(|_| Ok((read_len(r)?, read_len(r)?, read_len(r)?)))
        .collect::<Result<Vec<_>>>()?;
    let feature_shape = read_usizes(r)?;
    let mut sites = Vec::with_capacity(n_sites);
    for (id, &(n, holdout, gen_len)) in counts.iter().enumerate() {
        let (name, features) = read_tensor(r)?;
        expect_name(&name, &format!("site{id}.features"))?;
        if features.shape().first() != Some(&n) || features.shape()[1..] != feature_shape[..] {
            return corrupt(format!(
                "site {id} features have shape {:?}",
                features.shape()
            ));
        }
        let (name, labels) = read_tensor(r)?;
        expect_name(&name, &format!("site{id}.labels"))?;
        if labels.numel() != n {
            return corrupt(format!(
                "site {id} has {} labels for {n} examples",
                labels.numel()
            ));
        }
        let labels = labels
            .data()
            .iter()
            .map(|&y| match y {
                0.0 => Ok(0u8),
                1.0 => Ok(1u8),
                _ => corrupt(format!("site {id} has label {y}")),
            })
            .collect::<Result<Vec<u8>>>()?;
        let generation = if gen_len > 0 {
            let (name, g) = read_tensor(r)?;
            expect_name(&name, &format!("site{id}.generation"))?;
            if g.numel() != gen_len {
                return corrupt(format!("site {id} generation length mismatch"));
            }
            g.data().to_vec()
        } else {
            Vec::new()
        };
        sites.push(SiteDataset::new(id, features, labels, holdout, generation)?);
    }
    expect_eof(r)?;
    Ok(SiteTable::new(sites, roles)?)
}

fn write_config(w: &mut impl Write, c: &MetaConfig) -> io::Result<()> {
    for v in [
        c.n_sites_per_episode,
        c.k_support,
        c.t_target,
        c.inner_steps,
        c.msl_anneal_epochs,
        c.max_epochs,
        c.early_stop_patience,
        c.episodes_per_epoch,
        c.meta_batch_size,
        c.val_episodes,
    ] {
        write_usize(w, v)?;
    }
    for v in [c.inner_lr_init, c.meta_lr, c.lr_table_lr, c.weight_decay] {
        write_f64(w, v)?;
    }
    w.write_all(&[match c.order {
        Order::First => 1,
        Order::Second => 2,
    }])?;
    write_u64(w, c.seed)
}

fn read_config(r: &mut impl Read) -> Result<MetaConfig> {
    let mut u = [0usize; 10];
    for v in &mut u {
        *v = read_len(r)?;
    }
    let mut f = [0f64; 4];
    for v in &mut f {
        *v = read_f64(r)?;
    }
    let order = match read_u8(r)? {
        1 => Order::First,
        2 => Order::Second,
        o => return corrupt(format!("unknown order tag {o}")),
    };
    Ok(MetaConfig {
        n_sites_per_episode: u[0],
        k_support: u[1],
        t_target: u[2],
        inner_steps: u[3],
        msl_anneal_epochs: u[4],
        max_epochs: u[5],
        early_stop_patience: u[6],
        episodes_per_epoch: u[7],
        meta_batch_size: u[8],
        val_episodes: u[9],
        inner_lr_init: f[0],
        meta_lr: f[1],
        lr_table_lr: f[2],
        weight_decay: f[3],
        order,
        seed: read_u64(r)?,
    })
}

/// Magic, version, model record (kind tag and plan), parameters, inner
/// rate table, training configuration, validation score and epoch.
pub fn write_checkpoint(w: &mut impl Write, c: &Checkpoint) -> Result<()> {
    write_header(w, CHECKPOINT_MAGIC)?;
    w.write_all(&[c.spec.kind_tag()])?;
    write_usizes(w, &c.spec.plan())?;
    write_usize(w, c.params.len())?;
    for (name, t) in c.params.iter() {
        write_tensor(w, name, t)?;
    }
    write_usize(w, c.lr_table.names().len())?;
    write_usize(w, c.lr_table.steps())?;
    for (name, rates) in c.lr_table.names().iter().zip(c.lr_table.rates()) {
        write_str(w, name)?;
        rates.iter().try_for_each(|&v| write_f64(w, v))?;
    }
    write_config(w, &c.config)?;
    write_f64(w, c.score)?;
    write_usize(w, c.epoch)?;
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    read_header(r, CHECKPOINT_MAGIC, "checkpoint")?;
    let tag = read_u8(r)?;
    let spec = ModelSpec::from_record(tag, &read_usizes(r)?)?;
    let n = read_len(r)?;
    let entries = (0..n).map(|_| read_tensor(r)).collect::<Result<Vec<_>>>()?;
    let params = ParamSet::new(entries)?;
    let rows = read_len(r)?;
    let steps = read_len(r)?;
    let mut names = Vec::with_capacity(rows);
    let mut rates = Vec::with_capacity(rows);
    for _ in 0..rows {
        names.push(read_str(r)?);
        rates.push(
            (0..steps)
                .map(|_| read_f64(r))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let lr_table = LearnableLRTable::from_rates(names, rates)?;
    lr_table.check_matches(&params)?;
    let config = read_config(r)?;
    let score = read_f64(r)?;
    let epoch = read_len(r)?;
    expect_eof(r)?;
    let expected: Vec<_> = spec
        .param_layout()
        .into_iter()
        .map(|(name, shape, _)| (name, shape))
        .collect();
    let found: Vec<_> = params
        .iter()
        .map(|(name, t)| (name.to_string(), t.shape().to_vec()))
        .collect();
    if expected != found {
        return corrupt("parameters do not match the model record");
    }
    Ok(Checkpoint {
        score,
        epoch,
        spec,
        params,
        lr_table,
        config,
    })
}

pub fn save_dataset(path: &Path, table: &SiteTable) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, table)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<SiteTable> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, c)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

/// File name of the checkpoint at ring position `rank`.
pub fn checkpoint_name(rank: usize) -> String {
    format!("rank{rank}.ckpt")
}

/// Loads `rank0.ckpt`, `rank1.ckpt`, … from `dir` until one is missing.
pub fn load_ring(dir: &Path) -> Result<Vec<Checkpoint>> {
    let mut out = Vec::new();
    loop {
        let path = dir.join(checkpoint_name(out.len()));
        if !path.exists() {
            break;
        }
        out.push(load_checkpoint(&path)?);
    }
    if out.is_empty() {
        return Err(FormatError::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("no checkpoints in {}", dir.display()),
        )));
    }
    Ok(out)
}
