//! Multi-site data: synthetic heterogeneous sites, the volume-to-mosaic
//! preprocessing pipeline, and support/target episode sampling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::rng_stream;

/// One data-collection site. The last `holdout` examples are reserved for
/// validation when the site plays the meta-train role.
#[derive(Debug, Clone)]
pub struct SiteDataset {
    pub site_id: usize,
    /// `[n, ...feature_shape]`.
    pub features: Tensor,
    pub labels: Vec<u8>,
    pub holdout: usize,
    /// Flattened generation parameters, kept for provenance.
    pub generation: Vec<f64>,
}

impl SiteDataset {
    pub fn new(
        site_id: usize,
        features: Tensor,
        labels: Vec<u8>,
        holdout: usize,
        generation: Vec<f64>,
    ) -> Result<Self> {
        if features.rank() < 2 || features.shape()[0] != labels.len() {
            return Err(Error::shape("site", features.shape(), &[labels.len()]));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::Spec(format!(
                "site {site_id} has a label outside {{0, 1}}"
            )));
        }
        if holdout >= labels.len() {
            return Err(Error::Spec(format!(
                "site {site_id} holdout {holdout} leaves no training examples"
            )));
        }
        if !features.is_finite() {
            return Err(Error::non_finite(format!("features of site {site_id}")));
        }
        Ok(SiteDataset {
            site_id,
            features: features.detach(),
            labels,
            holdout,
            generation,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    fn example_len(&self) -> usize {
        self.feature_shape().iter().product()
    }

    /// Indices available for training (everything before the holdout).
    pub fn train_indices(&self) -> core::ops::Range<usize> {
        0..self.len() - self.holdout
    }

    pub fn holdout_indices(&self) -> core::ops::Range<usize> {
        self.len() - self.holdout..self.len()
    }

    /// Copies the given examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        gather_batch(&[(self, indices)])
    }
}

/// Concatenates examples from several sites into one batch.
pub fn gather_batch(parts: &[(&SiteDataset, &[usize])]) -> Result<Batch> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Spec("empty batch".into()))?
        .0;
    let feat_shape = first.feature_shape().to_vec();
    let m = first.example_len();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (site, indices) in parts {
        if site.feature_shape() != feat_shape.as_slice() {
            return Err(Error::shape(
                "gather_batch",
                site.feature_shape(),
                &feat_shape,
            ));
        }
        let src = site.features.data();
        for &i in indices.iter() {
            features.extend_from_slice(&src[i * m..(i + 1) * m]);
            labels.push(f64::from(site.labels[i]));
        }
    }
    let mut shape = vec![labels.len()];
    shape.extend(feat_shape);
    Batch::new(Tensor::new(&shape, features)?, Tensor::from_vec(labels)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    MetaTrain,
    /// Same sites as `MetaTrain`; targets come from each site's holdout.
    MetaVal,
    MetaTest,
    ZeroShot,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Roles {
    pub meta_train: Vec<usize>,
    pub meta_test: Vec<usize>,
    pub zero_shot: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SiteTable {
    pub sites: Vec<SiteDataset>,
    pub roles: Roles,
}

impl SiteTable {
    pub fn new(sites: Vec<SiteDataset>, roles: Roles) -> Result<Self> {
        let table = SiteTable { sites, roles };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sites.iter().enumerate() {
            if s.site_id != i {
                return Err(Error::Spec(format!(
                    "site at position {i} has id {}",
                    s.site_id
                )));
            }
        }
        let mut seen = vec![0usize; self.sites.len()];
        let all = self
            .roles
            .meta_train
            .iter()
            .chain(&self.roles.meta_test)
            .chain(&self.roles.zero_shot);
        for &id in all {
            match seen.get_mut(id) {
                Some(c) => *c += 1,
                None => return Err(Error::Spec(format!("role lists name unknown site {id}"))),
            }
        }
        if let Some(id) = seen.iter().position(|&c| c != 1) {
            return Err(Error::Spec(format!(
                "site {id} appears in {} roles",
                seen[id]
            )));
        }
        Ok(())
    }

    pub fn site(&self, id: usize) -> &SiteDataset {
        &self.sites[id]
    }

    pub fn role_sites(&self, role: Role) -> &[usize] {
        match role {
            Role::MetaTrain | Role::MetaVal => &self.roles.meta_train,
            Role::MetaTest => &self.roles.meta_test,
            Role::ZeroShot => &self.roles.zero_shot,
        }
    }

    pub fn feature_shape(&self) -> &[usize] {
        self.sites.first().map(|s| s.feature_shape()).unwrap_or(&[])
    }

    /// Copy of the table with labels shuffled within every site.
    pub fn with_permuted_labels(&self, seed: u64) -> SiteTable {
        let mut rng = rng_stream(seed, 0x9e1);
        let mut out = self.clone();
        for s in &mut out.sites {
            s.labels.shuffle(&mut rng);
        }
        out
    }
}

/// Parameters of the synthetic multi-site generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_sites: usize,
    pub n_per_site: usize,
    pub heterogeneity: f64,
    pub feature_dim: usize,
    /// Sites assigned to meta-train, meta-test and zero-shot, in id order.
    pub split: [usize; 3],
    /// Fraction of each site's examples held out for validation.
    pub holdout_fraction: f64,
    /// Distance between the two class means before site distortion.
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sites: 38,
            n_per_site: 80,
            heterogeneity: 1.0,
            feature_dim: 16,
            split: [30, 7, 1],
            holdout_fraction: 0.25,
            class_separation: 2.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_sites < 2 || self.n_per_site < 8 {
            return Err(Error::Spec(format!(
                "need at least 2 sites and 8 examples per site, got {} and {}",
                self.n_sites, self.n_per_site
            )));
        }
        if !(self.heterogeneity >= 0.0 && self.heterogeneity.is_finite()) {
            return Err(Error::Spec(format!(
                "heterogeneity must be >= 0, got {}",
                self.heterogeneity
            )));
        }
        if self.split.iter().sum::<usize>() != self.n_sites {
            return Err(Error::Spec(format!(
                "split {:?} does not sum to {} sites",
                self.split, self.n_sites
            )));
        }
        if !(0.0..0.5).contains(&self.holdout_fraction) {
            return Err(Error::Spec(format!(
                "holdout fraction {} outside [0, 0.5)",
                self.holdout_fraction
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Spec("feature dimension must be positive".into()));
        }
        Ok(())
    }

    fn roles(&self) -> Roles {
        let [a, b, _] = self.split;
        Roles {
            meta_train: (0..a).collect(),
            meta_test: (a..a + b).collect(),
            zero_shot: (a + b..self.n_sites).collect(),
        }
    }

    fn holdout(&self) -> usize {
        libm::round(self.n_per_site as f64 * self.holdout_fraction) as usize
    }
}

/// Balanced labels for a block of `n` examples, shuffled.
fn balanced_labels(n: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i >= n / 2)).collect();
    labels.shuffle(rng);
    labels
}

fn site_labels(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<u8> {
    let holdout = cfg.holdout();
    let mut labels = balanced_labels(cfg.n_per_site - holdout, rng);
    labels.extend(balanced_labels(holdout, rng));
    labels
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Synthetic sites with two class-conditional Gaussians each.
///
/// Every site sees the shared class geometry through its own affine map
/// `x ↦ A_s x + b_s` with `A_s = I + h·G_s/(2√d)` and `b_s = h·g_s`, where
/// `G_s`, `g_s` are standard normal and `h` is the heterogeneity. With
/// `h = 0` all sites are identically distributed.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SiteTable> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let h = cfg.heterogeneity;
    let mut rng = rng_stream(cfg.seed, 1);
    let mut direction: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let norm = libm::sqrt(direction.iter().map(|v| v * v).sum::<f64>());
    direction.iter_mut().for_each(|v| *v /= norm);
    let half = cfg.class_separation / 2.0;

    let mut sites = Vec::with_capacity(cfg.n_sites);
    for site_id in 0..cfg.n_sites {
        let mut srng = rng_stream(cfg.seed, 1000 + site_id as u64);
        let scale = h / (2.0 * libm::sqrt(d as f64));
        let mut affine = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                let eye = if r == c { 1.0 } else { 0.0 };
                affine[r * d + c] = if h == 0.0 {
                    eye
                } else {
                    eye + scale * normal(&mut srng)
                };
            }
        }
        let offset: Vec<f64> = (0..d)
            .map(|_| if h == 0.0 { 0.0 } else { h * normal(&mut srng) })
            .collect();

        let labels = site_labels(cfg, &mut srng);
        let mut features = Vec::with_capacity(cfg.n_per_site * d);
        let mut z = vec![0.0; d];
        for &y in &labels {
            let sign = if y == 1 { half } else { -half };
            for (zi, ui) in z.iter_mut().zip(&direction) {
                *zi = sign * ui + normal(&mut srng);
            }
            for r in 0..d {
                let row = &affine[r * d..(r + 1) * d];
                features.push(row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + offset[r]);
            }
        }
        let mut generation = affine;
        generation.extend(offset);
        sites.push(SiteDataset::new(
            site_id,
            Tensor::new(&[cfg.n_per_site, d], features)?,
            labels,
            cfg.holdout(),
            generation,
        )?);
    }
    SiteTable::new(sites, cfg.roles())
}

/// Synthetic 3-D scans for the volume pipeline: a smooth background plus a
/// central blob whose amplitude depends on the class, with per-site gain
/// and offset scaled by the heterogeneity.
pub fn synth_volumes(cfg: &SynthConfig, extents: [usize; 3]) -> Result<SiteTable> {
    cfg.validate()?;
    if extents.iter().any(|&e| e < 2) {
        return Err(Error::Spec(format!(
            "volume extents {extents:?} must be at least 2"
        )));
    }
    let [nx, ny, nz] = extents;
    let n_vox = nx * ny * nz;
    let mut sites = Vec::with_capacity(cfg.n_sites);
    for site_id in 0..cfg.n_sites {
        let mut srng = rng_stream(cfg.seed, 5000 + site_id as u64);
        let h = cfg.heterogeneity;
        let gain = 1.0 + 0.3 * h * normal(&mut srng);
        let offset = h * normal(&mut srng);
        let shift = 0.1 * h * normal(&mut srng);
        let labels = site_labels(cfg, &mut srng);
        let mut data = Vec::with_capacity(labels.len() * n_vox);
        for &y in &labels {
            let amp = 1.0 + cfg.class_separation * 0.25 * if y == 1 { 1.0 } else { -1.0 };
            for i in 0..nx {
                for j in 0..ny {
                    for k in 0..nz {
                        let c = |v: usize, n: usize| v as f64 / (n - 1) as f64 - 0.5 - shift;
                        let (a, b, d) = (c(i, nx), c(j, ny), c(k, nz));
                        let r2 = a * a + b * b + d * d;
                        let background = 0.5 * c(i, nx) + 0.25 * c(k, nz);
                        let blob = amp * libm::exp(-r2 / 0.05);
                        data.push(gain * (background + blob + 0.3 * normal(&mut srng)) + offset);
                    }
                }
            }
        }
        sites.push(SiteDataset::new(
            site_id,
            Tensor::new(&[labels.len(), nx, ny, nz], data)?,
            labels,
            cfg.holdout(),
            vec![gain, offset, shift],
        )?);
    }
    SiteTable::new(sites, cfg.roles())
}

/// Standardizes each example (leading index) to mean 0 and population
/// standard deviation 1 over its own elements. A rank-1 tensor is treated
/// as a single example.
pub fn zscore(features: &Tensor) -> Result<Tensor> {
    if !features.is_finite() {
        return Err(Error::non_finite("zscore input"));
    }
    let block = if features.rank() <= 1 {
        features.numel()
    } else {
        features.numel() / features.shape()[0]
    };
    let mut out = Vec::with_capacity(features.numel());
    for (example, chunk) in features.data().chunks_exact(block).enumerate() {
        let first = chunk[0];
        if chunk.iter().all(|&v| v == first) {
            return Err(Error::ConstantInput { example });
        }
        let n = chunk.len() as f64;
        let mean = chunk.iter().sum::<f64>() / n;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = libm::sqrt(var);
        out.extend(chunk.iter().map(|v| (v - mean) / std));
    }
    Tensor::new(features.shape(), out)
}

pub const MOSAIC_EDGE: usize = 91;
pub const SLICE_STRIDE: usize = 5;
pub const MOSAIC_SCALE: f64 = 0.25;

/// Number of slices kept per orientation: 0, 5, …, 90.
pub const SLICES_PER_ROW: usize = (MOSAIC_EDGE - 1) / SLICE_STRIDE + 1;

/// Shape of the final mosaic, `[68, 432]`.
pub fn mosaic_shape() -> [usize; 2] {
    let rows = 3 * MOSAIC_EDGE;
    let cols = SLICES_PER_ROW * MOSAIC_EDGE;
    [
        libm::floor(rows as f64 * MOSAIC_SCALE) as usize,
        libm::floor(cols as f64 * MOSAIC_SCALE) as usize,
    ]
}

/// Linear resampling along one axis with corner-aligned sample positions,
/// so constants are preserved and resizing to the same length is exact.
fn resize_axis(data: &[f64], shape: &[usize], axis: usize, len: usize) -> Vec<f64> {
    let old = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for i in 0..len {
            let pos = if len == 1 {
                0.0
            } else {
                i as f64 * (old - 1) as f64 / (len - 1) as f64
            };
            let lo = (libm::floor(pos) as usize).min(old - 1);
            let hi = (lo + 1).min(old - 1);
            let t = pos - lo as f64;
            for k in 0..inner {
                let a = data[(o * old + lo) * inner + k];
                let b = data[(o * old + hi) * inner + k];
                out[(o * len + i) * inner + k] = if t == 0.0 { a } else { a + (b - a) * t };
            }
        }
    }
    out
}

/// Separable linear resize of a tensor to `target` extents.
pub fn resize_linear(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    if target.len() != t.rank() || target.contains(&0) {
        return Err(Error::shape("resize", t.shape(), target));
    }
    let mut shape = t.shape().to_vec();
    let mut data = t.data().to_vec();
    for (axis, &len) in target.iter().enumerate() {
        if shape[axis] != len {
            data = resize_axis(&data, &shape, axis, len);
            shape[axis] = len;
        }
    }
    Tensor::new(&shape, data)
}

/// 3-D scan to 2-D mosaic.
///
/// Steps: trilinear resize to 91³; keep every fifth slice (0, 5, …, 90)
/// of each orientation; tile each orientation's 19 slices side by side
/// into one 91×1729 row, axial then coronal then sagittal, giving
/// 273×1729; bilinear downsample by 0.25 (floor) to 68×432.
pub fn mosaic_preprocess(volume: &Tensor) -> Result<Tensor> {
    if volume.rank() != 3 || volume.shape().iter().any(|&e| e < 2) {
        return Err(Error::shape(
            "mosaic_preprocess",
            volume.shape(),
            &[MOSAIC_EDGE; 3],
        ));
    }
    if !volume.is_finite() {
        return Err(Error::non_finite("mosaic_preprocess input"));
    }
    let e = MOSAIC_EDGE;
    let cube = resize_linear(volume, &[e; 3])?;
    let v = cube.data();
    let at = |i: usize, j: usize, k: usize| v[(i * e + j) * e + k];
    let cols = SLICES_PER_ROW * e;
    let mut mosaic = vec![0.0; 3 * e * cols];
    for orientation in 0..3 {
        for m in 0..SLICES_PER_ROW {
            let s = m * SLICE_STRIDE;
            for r in 0..e {
                for c in 0..e {
                    let value = match orientation {
                        0 => at(r, c, s), // axial: fixed third axis
                        1 => at(r, s, c), // coronal: fixed second axis
                        _ => at(s, r, c), // sagittal: fixed first axis
                    };
                    mosaic[(orientation * e + r) * cols + m * e + c] = value;
                }
            }
        }
    }
    let full = Tensor::new(&[3 * e, cols], mosaic)?;
    resize_linear(&full, &mosaic_shape())
}

/// Mosaic followed by per-example z-scoring: the full scan pipeline.
pub fn preprocess_volume(volume: &Tensor) -> Result<Tensor> {
    zscore(&mosaic_preprocess(volume)?)
}

/// Support and target sets drawn from one or more sites.
#[derive(Debug, Clone)]
pub struct Episode {
    pub site_ids: Vec<usize>,
    pub support: Batch,
    pub target: Batch,
    /// Per-site example indices, aligned with `site_ids`.
    pub support_indices: Vec<Vec<usize>>,
    pub target_indices: Vec<Vec<usize>>,
}

/// Draws `k` indices from `pool`, alternating classes so the two class
/// counts differ by at most one. The odd example's class is random.
pub(crate) fn draw_balanced(
    site: &SiteDataset,
    pool: &[usize],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &i in pool {
        by_class[usize::from(site.labels[i])].push(i);
    }
    by_class[0].shuffle(rng);
    by_class[1].shuffle(rng);
    let first = usize::from(rng.random_bool(0.5));
    let want = [
        k / 2 + usize::from(k % 2 == 1 && first == 0),
        k / 2 + usize::from(k % 2 == 1 && first == 1),
    ];
    for c in 0..2 {
        if by_class[c].len() < want[c] {
            return Err(Error::Episode {
                site: site.site_id,
                reason: format!(
                    "needs {} examples of class {c}, has {}",
                    want[c],
                    by_class[c].len()
                ),
            });
        }
    }
    let mut taken = [0usize; 2];
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let c = if i % 2 == 0 { first } else { 1 - first };
        out.push(by_class[c][taken[c]]);
        taken[c] += 1;
    }
    Ok(out)
}

/// Samples one episode from `role`.
///
/// Sites are drawn uniformly without replacement. Within a site the
/// support is class-balanced and the target is drawn uniformly from the
/// remaining examples, so the two never overlap. For `Role::MetaVal` the
/// support comes from the site's training examples and the target from its
/// holdout.
pub fn sample_episode(
    table: &SiteTable,
    role: Role,
    n_sites: usize,
    k_support: usize,
    t_target: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let candidates = table.role_sites(role);
    if n_sites == 0 || k_support == 0 || t_target == 0 {
        return Err(Error::Spec(format!(
            "episode sizes must be positive: sites {n_sites}, support {k_support}, target {t_target}"
        )));
    }
    if candidates.len() < n_sites {
        return Err(Error::Episode {
            site: candidates.first().copied().unwrap_or(0),
            reason: format!(
                "role {role:?} has {} sites, episode needs {n_sites}",
                candidates.len()
            ),
        });
    }
    let mut chosen = candidates.to_vec();
    chosen.shuffle(rng);
    chosen.truncate(n_sites);

    let mut support_indices = Vec::with_capacity(n_sites);
    let mut target_indices = Vec::with_capacity(n_sites);
    for &id in &chosen {
        let site = table.site(id);
        let (support_pool, target_pool): (Vec<usize>, Option<Vec<usize>>) = match role {
            Role::MetaTrain => (site.train_indices().collect(), None),
            Role::MetaVal => (
                site.train_indices().collect(),
                Some(site.holdout_indices().collect()),
            ),
            Role::MetaTest | Role::ZeroShot => ((0..site.len()).collect(), None),
        };
        let target_source_len = target_pool.as_ref().map_or(support_pool.len(), Vec::len);
        let needed = if target_pool.is_some() {
            t_target
        } else {
            k_support + t_target
        };
        if target_source_len < needed || support_pool.len() < k_support {
            return Err(Error::Episode {
                site: id,
                reason: format!("too few examples for support {k_support} and target {t_target}"),
            });
        }
        let support = draw_balanced(site, &support_pool, k_support, rng)?;
        let mut rest: Vec<usize> = match target_pool {
            Some(pool) => pool,
            None => support_pool
                .into_iter()
                .filter(|i| !support.contains(i))
                .collect(),
        };
        rest.shuffle(rng);
        rest.truncate(t_target);
        support_indices.push(support);
        target_indices.push(rest);
    }

    let parts = |idx: &[Vec<usize>]| -> Result<Batch> {
        let p: Vec<(&SiteDataset, &[usize])> = chosen
            .iter()
            .zip(idx)
            .map(|(&id, v)| (table.site(id), v.as_slice()))
            .collect();
        gather_batch(&p)
    };
    Ok(Episode {
        support: parts(&support_indices)?,
        target: parts(&target_indices)?,
        site_ids: chosen,
        support_indices,
        target_indices,
    })
}
