//! Triplet objective, triplet mining, P x K batch sampling and the
//! support-set gallery used for nearest-neighbour identification.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use candle_core::{Tensor, D};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::rng::{self, StreamRng};

pub const DEFAULT_MARGIN: f32 = 1.0;
pub const DEFAULT_EMBED_DIM: usize = 512;
pub const DEFAULT_SUPPORT: usize = 3;

fn check_triple(a: &[f32], p: &[f32], n: &[f32]) -> Result<()> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::InvalidArgument(format!(
            "embedding length mismatch: {} / {} / {}",
            a.len(),
            p.len(),
            n.len()
        )));
    }
    if a.iter().chain(p).chain(n).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("triplet input contains NaN or Inf".into()));
    }
    Ok(())
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

/// `max(|a-p|^2 - |a-n|^2 + margin, 0)`.
pub fn triplet_loss(a: &[f32], p: &[f32], n: &[f32], margin: f32) -> Result<f32> {
    check_triple(a, p, n)?;
    if !(margin >= 0.0) {
        return Err(Error::InvalidArgument(format!("margin {margin} must be >= 0")));
    }
    Ok((squared_distance(a, p) - squared_distance(a, n) + margin as f64).max(0.0) as f32)
}

/// `|a-p| + |a-n| + margin`, unhinged. Minimizing it pulls the negative
/// closer too; it exists only so its behaviour can be demonstrated.
pub fn triplet_loss_as_printed(a: &[f32], p: &[f32], n: &[f32], margin: f32) -> Result<f32> {
    check_triple(a, p, n)?;
    Ok((squared_distance(a, p).sqrt() + squared_distance(a, n).sqrt() + margin as f64) as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// A triplet objective over a batch of embeddings.
pub trait TripletObjective: Send + Sync {
    fn name(&self) -> &'static str;

    /// Per-triplet loss from squared anchor-positive and anchor-negative
    /// distances, both of shape `(T,)`.
    fn per_triplet(&self, d_ap: &Tensor, d_an: &Tensor, margin: f64) -> candle_core::Result<Tensor>;

    /// Mean loss over `triplets` for embeddings of shape `(B, N)`.
    fn batch_loss(
        &self,
        embeddings: &Tensor,
        triplets: &[Triplet],
        margin: f64,
    ) -> candle_core::Result<Tensor> {
        let dev = embeddings.device();
        let take = |f: fn(&Triplet) -> usize| {
            let idx: Vec<u32> = triplets.iter().map(|t| f(t) as u32).collect();
            let idx = Tensor::new(idx.as_slice(), dev)?;
            embeddings.index_select(&idx, 0)
        };
        let a = take(|t| t.anchor)?;
        let p = take(|t| t.positive)?;
        let n = take(|t| t.negative)?;
        let d_ap = (&a - &p)?.sqr()?.sum(D::Minus1)?;
        let d_an = (&a - &n)?.sqr()?.sum(D::Minus1)?;
        self.per_triplet(&d_ap, &d_an, margin)?.mean(0)
    }
}

pub struct HingedTriplet;

impl TripletObjective for HingedTriplet {
    fn name(&self) -> &'static str {
        "hinged"
    }

    fn per_triplet(&self, d_ap: &Tensor, d_an: &Tensor, margin: f64) -> candle_core::Result<Tensor> {
        ((d_ap - d_an)? + margin)?.relu()
    }
}

pub struct AsPrintedTriplet;

impl TripletObjective for AsPrintedTriplet {
    fn name(&self) -> &'static str {
        "as-printed"
    }

    fn per_triplet(&self, d_ap: &Tensor, d_an: &Tensor, margin: f64) -> candle_core::Result<Tensor> {
        // sqrt has an infinite derivative at 0; the epsilon keeps a = p finite.
        ((d_ap + 1e-12)?.sqrt()? + (d_an + 1e-12)?.sqrt()?)? + margin
    }
}

pub fn objectives() -> Registry<dyn TripletObjective> {
    let mut r: Registry<dyn TripletObjective> = Registry::new("triplet objective");
    r.register("hinged", |_| Ok(Box::new(HingedTriplet)));
    r.register("as-printed", |_| Ok(Box::new(AsPrintedTriplet)));
    r
}

/// Chooses triplets inside a labelled batch.
pub trait TripletMiner: Send + Sync {
    fn name(&self) -> &'static str;

    fn needs_distances(&self) -> bool {
        false
    }

    /// `sq_dist`, when supplied, is the row-major `B x B` squared distance
    /// matrix of the batch embeddings.
    fn mine(&self, labels: &[usize], sq_dist: Option<&[f32]>, rng: &mut StreamRng) -> Vec<Triplet>;
}

fn candidates(labels: &[usize], i: usize) -> (Vec<usize>, Vec<usize>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (j, l) in labels.iter().enumerate() {
        if *l != labels[i] {
            neg.push(j);
        } else if j != i {
            pos.push(j);
        }
    }
    (pos, neg)
}

/// One uniformly drawn positive and negative per eligible anchor.
pub struct RandomMiner;

impl TripletMiner for RandomMiner {
    fn name(&self) -> &'static str {
        "random"
    }

    fn mine(&self, labels: &[usize], _: Option<&[f32]>, rng: &mut StreamRng) -> Vec<Triplet> {
        let mut out = Vec::new();
        for anchor in 0..labels.len() {
            let (pos, neg) = candidates(labels, anchor);
            if let (Some(&positive), Some(&negative)) = (pos.choose(rng), neg.choose(rng)) {
                out.push(Triplet {
                    anchor,
                    positive,
                    negative,
                });
            }
        }
        out
    }
}

/// Prefers negatives with `d_ap < d_an < d_ap + margin`; falls back to a
/// uniform negative when the band is empty.
pub struct SemiHardMiner {
    pub margin: f32,
}

impl TripletMiner for SemiHardMiner {
    fn name(&self) -> &'static str {
        "semi-hard"
    }

    fn needs_distances(&self) -> bool {
        true
    }

    fn mine(&self, labels: &[usize], sq_dist: Option<&[f32]>, rng: &mut StreamRng) -> Vec<Triplet> {
        let Some(d) = sq_dist else {
            return RandomMiner.mine(labels, None, rng);
        };
        let b = labels.len();
        let mut out = Vec::new();
        for anchor in 0..b {
            let (pos, neg) = candidates(labels, anchor);
            let Some(&positive) = pos.choose(rng) else { continue };
            let d_ap = d[anchor * b + positive];
            let band: Vec<usize> = neg
                .iter()
                .copied()
                .filter(|&n| d_ap < d[anchor * b + n] && d[anchor * b + n] < d_ap + self.margin)
                .collect();
            let pool = if band.is_empty() { &neg } else { &band };
            if let Some(&negative) = pool.choose(rng) {
                out.push(Triplet {
                    anchor,
                    positive,
                    negative,
                });
            }
        }
        out
    }
}

pub fn miners() -> Registry<dyn TripletMiner, f32> {
    let mut r: Registry<dyn TripletMiner, f32> = Registry::new("triplet miner");
    r.register("random", |_| Ok(Box::new(RandomMiner)));
    r.register("semi-hard", |margin: &f32| Ok(Box::new(SemiHardMiner { margin: *margin })));
    r
}

/// Uniform random valid triplets; empty (with a warning) when the batch has
/// no anchor-positive pair or a single class.
pub fn sample_triplets(labels: &[usize], rng: &mut StreamRng) -> Vec<Triplet> {
    let out = RandomMiner.mine(labels, None, rng);
    if out.is_empty() {
        log::warn!("batch of {} has no valid triplet; step skipped", labels.len());
    }
    out
}

/// Class-balanced batches: each batch draws `p` distinct classes and up to
/// `k` distinct samples from each. An epoch has enough batches to cover the
/// pool about once.
pub fn pk_batches(labels: &[usize], p: usize, k: usize, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(*l).or_default().push(i);
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    if classes.is_empty() || p == 0 || k == 0 {
        return Vec::new();
    }
    let p = p.min(classes.len());
    let n_batches = labels.len().div_ceil(p * k).max(1);
    (0..n_batches)
        .map(|_| {
            let mut batch = Vec::with_capacity(p * k);
            for c in classes.choose_multiple(rng, p) {
                let pool = &by_class[c];
                batch.extend(pool.choose_multiple(rng, k.min(pool.len())).copied());
            }
            batch
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GalleryMode {
    /// One row per class: the mean of its support embeddings.
    #[default]
    Mean,
    /// One row per support image.
    PerImage,
}

/// Rows of embeddings, each tagged with a class label in `0..classes.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGallery {
    pub class_ids: Vec<String>,
    pub row_labels: Vec<usize>,
    /// Row-major, `row_labels.len() x embed_dim`.
    pub embeddings: Vec<f32>,
    pub embed_dim: usize,
    pub support_size: usize,
    pub seed: u64,
    pub mode: GalleryMode,
}

pub const GALLERY_FORMAT: &str = "catreid-gallery/1";

#[derive(Debug, Serialize, Deserialize)]
struct GalleryHeader {
    format: String,
    classes: Vec<String>,
    row_labels: Vec<usize>,
    embed_dim: usize,
    support_size: usize,
    seed: u64,
    mode: GalleryMode,
}

impl EmbeddingGallery {
    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    /// Gallery with one row per class, labelled `0..C`.
    pub fn from_rows(class_ids: Vec<String>, rows: Vec<Vec<f32>>) -> Result<Self> {
        let embed_dim = rows.first().map_or(0, Vec::len);
        if rows.len() != class_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{} rows for {} classes",
                rows.len(),
                class_ids.len()
            )));
        }
        let g = EmbeddingGallery {
            row_labels: (0..rows.len()).collect(),
            class_ids,
            embeddings: rows.concat(),
            embed_dim,
            support_size: 1,
            seed: 0,
            mode: GalleryMode::Mean,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embeddings.len() != self.rows() * self.embed_dim {
            return Err(Error::InvalidArgument(format!(
                "gallery has {} values for {} rows of width {}",
                self.embeddings.len(),
                self.rows(),
                self.embed_dim
            )));
        }
        if let Some(l) = self.row_labels.iter().find(|l| **l >= self.class_ids.len()) {
            return Err(Error::InvalidArgument(format!("row label {l} out of range")));
        }
        if let Some(i) = (0..self.rows()).find(|i| self.row(*i).iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gallery row {i} is not finite")));
        }
        Ok(())
    }

    /// Label of the nearest row and its squared distance (`k = 1`), or the
    /// majority label among the `k` nearest rows with the distance of the
    /// closest row carrying that label. Ties go to the lowest class index.
    pub fn classify_scored(&self, query: &[f32], k: usize) -> Result<(usize, f64)> {
        if self.rows() == 0 {
            return Err(Error::InvalidArgument("empty gallery".into()));
        }
        if query.len() != self.embed_dim {
            return Err(Error::InvalidArgument(format!(
                "query length {} does not match gallery width {}",
                query.len(),
                self.embed_dim
            )));
        }
        if k == 0 || k > self.rows() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} must be in 1..={}",
                self.rows()
            )));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.rows())
            .map(|i| (squared_distance(query, self.row(i)), self.row_labels[i]))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if k == 1 {
            let (d, l) = scored[0];
            return Ok((l, d));
        }
        let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for &(d, l) in &scored[..k] {
            let e = votes.entry(l).or_insert((0, d));
            e.0 += 1;
        }
        // BTreeMap iterates labels ascending, so max_by keeps the lowest
        // label on equal vote counts only if we compare reversed labels.
        let (label, (_, d)) = votes
            .into_iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.0.cmp(&a.0)))
            .expect("k >= 1");
        Ok((label, d))
    }

    pub fn classify(&self, query: &[f32], k: usize) -> Result<usize> {
        self.classify_scored(query, k).map(|(l, _)| l)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = GalleryHeader {
            format: GALLERY_FORMAT.into(),
            classes: self.class_ids.clone(),
            row_labels: self.row_labels.clone(),
            embed_dim: self.embed_dim,
            support_size: self.support_size,
            seed: self.seed,
            mode: self.mode,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for v in &self.embeddings {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: GalleryHeader = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?;
        if header.format != GALLERY_FORMAT {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                expected: GALLERY_FORMAT.into(),
                found: header.format,
            });
        }
        let mut raw = Vec::new();
        reader.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
        let want = header.row_labels.len() * header.embed_dim * 4;
        if raw.len() != want {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 2,
                message: format!("expected {want} bytes of embeddings, found {}", raw.len()),
            });
        }
        let g = EmbeddingGallery {
            class_ids: header.classes,
            row_labels: header.row_labels,
            embeddings: raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            embed_dim: header.embed_dim,
            support_size: header.support_size,
            seed: header.seed,
            mode: header.mode,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }
}

/// Anything that can embed manifest records in inference mode.
pub trait EmbeddingSource {
    fn embed_dim(&self) -> usize;
    fn embed(&self, records: &[&ImageRecord]) -> Result<Vec<Vec<f32>>>;
}

/// Per class (in label order) a seeded sample of `support` train records.
pub fn support_set<'a>(
    manifest: &'a DatasetManifest,
    support: usize,
    seed: u64,
) -> Result<Vec<Vec<&'a ImageRecord>>> {
    if support == 0 {
        return Err(Error::InvalidArgument("support size must be >= 1".into()));
    }
    let mut by_class: Vec<Vec<&ImageRecord>> = vec![Vec::new(); manifest.num_classes()];
    for r in manifest.records_in(Split::Train) {
        if let Some(l) = manifest.label_of(r) {
            by_class[l].push(r);
        }
    }
    let ids = manifest.class_ids();
    by_class
        .into_iter()
        .enumerate()
        .map(|(label, mut recs)| {
            if recs.len() < support {
                return Err(Error::Dataset(format!(
                    "class {} has {} train images, gallery needs {support}",
                    ids[label],
                    recs.len()
                )));
            }
            recs.shuffle(&mut rng::substream(seed, "support", &[label as u64]));
            recs.truncate(support);
            Ok(recs)
        })
        .collect()
}

pub fn build_gallery(
    embedder: &dyn EmbeddingSource,
    manifest: &DatasetManifest,
    support: usize,
    seed: u64,
    mode: GalleryMode,
) -> Result<EmbeddingGallery> {
    let sets = support_set(manifest, support, seed)?;
    let flat: Vec<&ImageRecord> = sets.iter().flatten().copied().collect();
    let emb = embedder.embed(&flat)?;
    let dim = embedder.embed_dim();
    let mut row_labels = Vec::new();
    let mut embeddings = Vec::new();
    for (label, chunk) in emb.chunks(support).enumerate() {
        match mode {
            GalleryMode::Mean => {
                let mut mean = vec![0.0f64; dim];
                for e in chunk {
                    mean.iter_mut().zip(e).for_each(|(m, v)| *m += *v as f64);
                }
                embeddings.extend(mean.iter().map(|m| (m / chunk.len() as f64) as f32));
                row_labels.push(label);
            }
            GalleryMode::PerImage => {
                for e in chunk {
                    embeddings.extend_from_slice(e);
                    row_labels.push(label);
                }
            }
        }
    }
    let g = EmbeddingGallery {
        class_ids: manifest.class_ids(),
        row_labels,
        embeddings,
        embed_dim: dim,
        support_size: support,
        seed,
        mode,
    };
    g.validate()?;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub true_label: usize,
    pub predicted: usize,
    pub sq_distance: f64,
}

/// Identify every record against the gallery.
pub fn identify(
    embedder: &dyn EmbeddingSource,
    gallery: &EmbeddingGallery,
    manifest: &DatasetManifest,
    records: &[&ImageRecord],
    k: usize,
) -> Result<Vec<Identification>> {
    let emb = embedder.embed(records)?;
    records
        .iter()
        .zip(&emb)
        .map(|(r, e)| {
            let true_label = manifest.label_of(r).ok_or_else(|| {
                Error::Dataset(format!("{} is excluded and cannot be scored", r.path.display()))
            })?;
            let (predicted, sq_distance) = gallery.classify_scored(e, k)?;
            Ok(Identification {
                true_label,
                predicted,
                sq_distance,
            })
        })
        .collect()
}

/// Fraction of `records` whose nearest gallery class is their own.
pub fn evaluate_siamese(
    embedder: &dyn EmbeddingSource,
    gallery: &EmbeddingGallery,
    manifest: &DatasetManifest,
    records: &[&ImageRecord],
    k: usize,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Dataset("no query records to evaluate".into()));
    }
    let ids = identify(embedder, gallery, manifest, records, k)?;
    Ok(ids.iter().filter(|i| i.predicted == i.true_label).count() as f64 / ids.len() as f64)
}
