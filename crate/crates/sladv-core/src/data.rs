//! Dataset ingestion, synthetic task generation, and client/attacker
//! partitioning.
//!
//! Three synthetic families provide desk-scale stand-ins for real image
//! tasks. They share intensity statistics but differ in structure, so one
//! family can play the role of a shifted-distribution attacker pool for
//! another. Samples are drawn sequentially from one stream: a smaller pool
//! with the same seed is a prefix of a larger one, which keeps pool-size
//! sweeps monotone in information rather than in sampling luck.

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;
use flate2::read::GzDecoder;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::Read;
use std::path::Path;

/// Attacker pool sizes shipped as sweep presets.
pub const ATTACKER_POOL_PRESETS: [usize; 5] = [128, 256, 1024, 2048, 4096];

/// Labeled image set; pixel values always in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::input(format!(
                "images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::input(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::input(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::input("image values must lie in [0,1]"));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        // Values were validated on construction; gathering cannot break them.
        Ok(Dataset {
            images,
            labels,
            class_count: self.class_count,
        })
    }

    /// First `n` samples; errors if fewer exist.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::input(format!(
                "requested {n} samples from a dataset of {}",
                self.len()
            )));
        }
        let idx: Vec<usize> = (0..n).collect();
        self.subset(&idx)
    }
}

/// Synthetic image family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Horizontal or vertical bands; class encodes orientation and position.
    Bars,
    /// Gaussian bumps at class-specific centers on a ring.
    Blobs,
    /// Seven-segment glyph of the class digit.
    #[serde(alias = "digits")]
    DigitsLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    /// Images are `size x size`, single channel.
    pub size: usize,
    pub samples_per_class: usize,
    pub generator: Family,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=10).contains(&self.classes) {
            return Err(Error::config(format!(
                "synth classes must be 2..=10, got {}",
                self.classes
            )));
        }
        if !(8..=64).contains(&self.size) {
            return Err(Error::config(format!(
                "synth size must be 8..=64, got {}",
                self.size
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class must be positive"));
        }
        Ok(())
    }
}

/// Deterministic synthetic dataset; labels cycle round-robin so every prefix
/// is class-balanced.
pub fn synth_task(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    synth_with_stream(spec, seed, Stream::TaskData)
}

/// Same generator driven by a caller-chosen stream, so evaluation sets and
/// attacker pools never replay the training draws.
pub fn synth_with_stream(spec: &SynthSpec, seed: u64, stream: Stream) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream_rng(seed, stream);
    let n = spec.classes * spec.samples_per_class;
    let s = spec.size;
    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        labels.push(class);
        let img = match spec.generator {
            Family::Bars => gen_bars(class, s, &mut rng),
            Family::Blobs => gen_blobs(class, spec.classes, s, &mut rng),
            Family::DigitsLike => gen_digit(class, s, &mut rng),
        };
        data.extend_from_slice(&img);
    }
    let images = Tensor::new(vec![n, 1, s, s], data)?;
    Dataset::new(images, labels, spec.classes)
}

const BACKGROUND: f64 = 0.10;
const PIXEL_NOISE: f64 = 0.12;

fn finish(mut img: Vec<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    for v in &mut img {
        *v = (*v + rng.gen_range(-PIXEL_NOISE..PIXEL_NOISE)).clamp(0.0, 1.0);
    }
    img
}

/// Class k: orientation k%2, band position k/2 of five slots.
fn gen_bars(class: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![BACKGROUND; s * s];
    let slot = class / 2;
    let base = 1.0 + slot as f64 * (s as f64 - 3.0) / 4.0;
    let jitter = rng.gen_range(-1.0..1.0);
    let center = (base + jitter).round().clamp(1.0, s as f64 - 2.0) as usize;
    let amp = rng.gen_range(0.75..0.95);
    for t in center.saturating_sub(1)..=(center + 1).min(s - 1) {
        for u in 0..s {
            let idx = if class % 2 == 0 { t * s + u } else { u * s + t };
            img[idx] = amp;
        }
    }
    finish(img, rng)
}

/// Class centers sit on a ring; each sample jitters its center and width.
fn gen_blobs(class: usize, classes: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![BACKGROUND * 0.8; s * s];
    let angle = std::f64::consts::TAU * class as f64 / classes as f64;
    let radius = s as f64 * 0.30;
    let mid = (s as f64 - 1.0) / 2.0;
    let cx = mid + radius * angle.cos() + rng.gen_range(-0.7..0.7);
    let cy = mid + radius * angle.sin() + rng.gen_range(-0.7..0.7);
    let sigma = s as f64 * rng.gen_range(0.10..0.14);
    let amp = rng.gen_range(0.70..0.90);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for r in 0..s {
        for c in 0..s {
            let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
            img[r * s + c] += amp * (-d2 * inv).exp();
        }
    }
    finish(img, rng)
}

/// Segment bit masks per digit, segments ordered A B C D E F G.
const SEGMENTS: [u8; 10] = [
    0b1111110, // 0: ABCDEF
    0b0110000, // 1: BC
    0b1101101, // 2: ABDEG
    0b1111001, // 3: ABCDG
    0b0110011, // 4: BCFG
    0b1011011, // 5: ACDFG
    0b1011111, // 6: ACDEFG
    0b1110000, // 7: ABC
    0b1111111, // 8
    0b1111011, // 9: ABCDFG
];

/// Seven-segment glyph with one-pixel jitter and intensity variation.
fn gen_digit(class: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![BACKGROUND; s * s];
    let dx = rng.gen_range(-1i64..=1);
    let dy = rng.gen_range(-1i64..=1);
    let amp = rng.gen_range(0.75..0.95);
    let top = 1i64 + dy;
    let bottom = s as i64 - 2 + dy;
    let middle = (top + bottom) / 2;
    let left = s as i64 / 4 + dx;
    let right = s as i64 - 1 - s as i64 / 4 + dx;
    let mask = SEGMENTS[class];
    let mut stroke_h = |row: i64, c0: i64, c1: i64| {
        for c in c0..=c1 {
            if (0..s as i64).contains(&row) && (0..s as i64).contains(&c) {
                img[(row * s as i64 + c) as usize] = amp;
            }
        }
    };
    if mask & 0b1000000 != 0 {
        stroke_h(top, left, right); // A
    }
    if mask & 0b0001000 != 0 {
        stroke_h(bottom, left, right); // D
    }
    if mask & 0b0000001 != 0 {
        stroke_h(middle, left, right); // G
    }
    let mut stroke_v = |col: i64, r0: i64, r1: i64| {
        for r in r0..=r1 {
            if (0..s as i64).contains(&r) && (0..s as i64).contains(&col) {
                img[(r * s as i64 + col) as usize] = amp;
            }
        }
    };
    if mask & 0b0100000 != 0 {
        stroke_v(right, top, middle); // B
    }
    if mask & 0b0010000 != 0 {
        stroke_v(right, middle, bottom); // C
    }
    if mask & 0b0000100 != 0 {
        stroke_v(left, middle, bottom); // E
    }
    if mask & 0b0000010 != 0 {
        stroke_v(left, top, middle); // F
    }
    finish(img, rng)
}

/// How the attacker pool D2 is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AttackerSource {
    /// Held out of the clients' dataset itself.
    SameDistribution { size: usize },
    /// Generated from a different synthetic family (distribution shift).
    /// `size`, when set, truncates the generated pool to exactly that many
    /// samples (a prefix, so pools of different sizes still nest).
    Shifted {
        spec: SynthSpec,
        #[serde(default)]
        size: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum Scheme {
    Iid,
    LabelShards { labels_per_client: usize },
    Dirichlet { concentration: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub n_clients: usize,
    pub scheme: Scheme,
    pub seed: u64,
    pub attacker: AttackerSource,
}

/// Splits a dataset into per-client shards plus the attacker pool.
///
/// Shards are disjoint subsets of `ds`; the attacker pool is either a
/// held-out subset (then disjoint from every shard) or freshly generated
/// from a different family.
pub fn partition(ds: &Dataset, plan: &PartitionPlan) -> Result<(Vec<Dataset>, Dataset)> {
    if plan.n_clients == 0 {
        return Err(Error::config("partition needs at least one client"));
    }
    let mut rng = stream_rng(plan.seed, Stream::Partition);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    shuffle(&mut order, &mut rng);

    let (client_indices, attacker) = match &plan.attacker {
        AttackerSource::SameDistribution { size } => {
            if *size + plan.n_clients > ds.len() {
                return Err(Error::input(format!(
                    "cannot hold out {size} attacker samples and still feed {} clients from {}",
                    plan.n_clients,
                    ds.len()
                )));
            }
            let pool = ds.subset(&order[..*size])?;
            (order[*size..].to_vec(), pool)
        }
        AttackerSource::Shifted { spec, size } => {
            let pool = synth_with_stream(spec, plan.seed, Stream::AttackerData)?;
            let pool = match size {
                Some(n) => pool.take(*n)?,
                None => pool,
            };
            (order, pool)
        }
    };
    if client_indices.len() < plan.n_clients {
        return Err(Error::input(format!(
            "{} samples cannot cover {} clients",
            client_indices.len(),
            plan.n_clients
        )));
    }

    let shards_idx = match plan.scheme {
        Scheme::Iid => split_even(&client_indices, plan.n_clients),
        Scheme::LabelShards { labels_per_client } => {
            label_shards(ds, &client_indices, plan.n_clients, labels_per_client)?
        }
        Scheme::Dirichlet { concentration } => {
            dirichlet_shards(ds, &client_indices, plan.n_clients, concentration, &mut rng)?
        }
    };
    let mut shards = Vec::with_capacity(plan.n_clients);
    for idx in &shards_idx {
        if idx.is_empty() {
            return Err(Error::input(
                "partition produced an empty client shard; add data or reduce clients",
            ));
        }
        shards.push(ds.subset(idx)?);
    }
    Ok((shards, attacker))
}

/// Fisher-Yates; kept local so the draw sequence is pinned by this crate,
/// not by whatever `SliceRandom` does across `rand` versions.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

fn split_even(indices: &[usize], n: usize) -> Vec<Vec<usize>> {
    let base = indices.len() / n;
    let extra = indices.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut at = 0;
    for c in 0..n {
        let len = base + usize::from(c < extra);
        out.push(indices[at..at + len].to_vec());
        at += len;
    }
    out
}

/// Client `i` is assigned labels `{(i*L + j) mod classes}`; each label's
/// samples are dealt round-robin to the clients holding that label. Every
/// client sees exactly `labels_per_client` distinct labels.
fn label_shards(
    ds: &Dataset,
    indices: &[usize],
    n_clients: usize,
    labels_per_client: usize,
) -> Result<Vec<Vec<usize>>> {
    if labels_per_client == 0 || labels_per_client > ds.class_count {
        return Err(Error::config(format!(
            "labels_per_client must be 1..={}, got {labels_per_client}",
            ds.class_count
        )));
    }
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for client in 0..n_clients {
        for j in 0..labels_per_client {
            let label = (client * labels_per_client + j) % ds.class_count;
            holders[label].push(client);
        }
    }
    let mut shards = vec![Vec::new(); n_clients];
    let mut dealt = vec![0usize; ds.class_count];
    for &i in indices {
        let label = ds.labels[i];
        let owners = &holders[label];
        if owners.is_empty() {
            continue; // no client was assigned this label
        }
        let owner = owners[dealt[label] % owners.len()];
        dealt[label] += 1;
        shards[owner].push(i);
    }
    Ok(shards)
}

/// Per class, client proportions are drawn from a symmetric Dirichlet and
/// the class samples are cut at the cumulative boundaries.
fn dirichlet_shards(
    ds: &Dataset,
    indices: &[usize],
    n_clients: usize,
    concentration: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if !concentration.is_finite() || concentration <= 0.0 {
        return Err(Error::config(format!(
            "dirichlet concentration must be positive, got {concentration}"
        )));
    }
    let gamma = rand_distr::Gamma::new(concentration, 1.0)
        .map_err(|e| Error::config(format!("dirichlet setup failed: {e}")))?;
    let mut shards = vec![Vec::new(); n_clients];
    for class in 0..ds.class_count {
        let members: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| ds.labels[i] == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut weights: Vec<f64> = (0..n_clients)
            .map(|_| rand::Rng::sample(rng, gamma).max(1e-12))
            .collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        let mut at = 0usize;
        let mut acc = 0.0;
        for (client, &w) in weights.iter().enumerate() {
            acc += w;
            let end = if client + 1 == n_clients {
                members.len()
            } else {
                ((members.len() as f64) * acc).round() as usize
            }
            .min(members.len());
            shards[client].extend_from_slice(&members[at..end]);
            at = end;
        }
    }
    Ok(shards)
}

/// Draws a batch by sampling indices with replacement from `rng`.
///
/// Both the split protocol and the monolithic oracle call this, so their
/// batch sequences coincide draw for draw.
pub fn sample_batch(
    ds: &Dataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    if ds.is_empty() {
        return Err(Error::input("cannot sample from an empty dataset"));
    }
    let indices: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..ds.len())).collect();
    let x = ds.images.gather_rows(&indices)?;
    let y = indices.iter().map(|&i| ds.labels[i]).collect();
    Ok((x, y))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX image/label file pair (the classic handwritten-digit
/// container). Files may be gzip-compressed; offsets in errors refer to the
/// decompressed stream.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = read_maybe_gzip(images_path)?;
    let lbl_bytes = read_maybe_gzip(labels_path)?;

    let mut r = IdxReader::new(&img_bytes);
    let magic = r.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("bad image magic 0x{magic:08X}, expected 0x{IDX_IMAGES_MAGIC:08X}"),
        ));
    }
    let n = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    if h == 0 || w == 0 {
        return Err(Error::format(8, format!("degenerate image dims {h}x{w}")));
    }
    let pixels = r.bytes(n * h * w)?;
    r.expect_end()?;

    let mut r = IdxReader::new(&lbl_bytes);
    let magic = r.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("bad label magic 0x{magic:08X}, expected 0x{IDX_LABELS_MAGIC:08X}"),
        ));
    }
    let n_labels = r.u32()? as usize;
    if n_labels != n {
        return Err(Error::format(
            4,
            format!("{n} images but {n_labels} labels"),
        ));
    }
    let raw_labels = r.bytes(n_labels)?;
    r.expect_end()?;

    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1);
    let images = Tensor::new(vec![n, 1, h, w], data)?;
    Dataset::new(images, labels, class_count)
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(File::open(path)?)
            .read_to_end(&mut out)
            .map_err(|e| Error::format(0, format!("gzip stream corrupt: {e}")))?;
        return Ok(out);
    }
    Ok(raw)
}

/// Big-endian byte reader with offset tracking (IDX is big-endian).
struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        IdxReader { bytes, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "unexpected end of IDX data: wanted {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes in IDX file", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
