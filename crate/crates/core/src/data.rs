//! Item embedding datasets: JSONL and packed binary IO, behavioral norm
//! statistics, and a seeded synthetic generator with Zipf-skewed popularity.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::l2_norm;
use crate::scalar::Scalar;

/// Magic prefix of the packed embedding format.
pub const PACKED_MAGIC: &[u8; 16] = b"MIXQUANT-EMB\0\0\0\0";

/// One item and its three pretrained embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemRecord<T> {
    pub item_id: String,
    pub text: Vec<T>,
    pub vision: Vec<T>,
    pub behavior: Vec<T>,
}

impl<T: Scalar> ItemRecord<T> {
    pub fn behavior_norm(&self) -> T {
        l2_norm(&self.behavior)
    }

    pub fn dims(&self) -> InputDims {
        InputDims {
            text: self.text.len(),
            vision: self.vision.len(),
            behavior: self.behavior.len(),
        }
    }

    /// `[text, vision, behavior]` concatenated; the reconstruction target.
    pub fn concatenated(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.text.len() + self.vision.len() + self.behavior.len());
        out.extend_from_slice(&self.text);
        out.extend_from_slice(&self.vision);
        out.extend_from_slice(&self.behavior);
        out
    }
}

/// Input widths of the three pretrained modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputDims {
    pub text: usize,
    pub vision: usize,
    pub behavior: usize,
}

impl InputDims {
    pub fn new(text: usize, vision: usize, behavior: usize) -> Self {
        Self {
            text,
            vision,
            behavior,
        }
    }

    pub fn total(&self) -> usize {
        self.text + self.vision + self.behavior
    }
}

impl FromStr for InputDims {
    type Err = String;

    /// Parses `"t,v,b"` or a single `"n"` shared by all three.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad dimension {p:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        let dims = match parts.as_slice() {
            [n] => Self::new(*n, *n, *n),
            [t, v, b] => Self::new(*t, *v, *b),
            _ => return Err(format!("expected 1 or 3 comma-separated dimensions, got {s:?}")),
        };
        if dims.text == 0 || dims.vision == 0 || dims.behavior == 0 {
            return Err("dimensions must be positive".into());
        }
        Ok(dims)
    }
}

/// Min and max behavioral L2 norm over a whole dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
}

impl NormStats {
    pub fn new(min: f64, max: f64) -> Self {
        debug_assert!(min <= max);
        Self { min, max }
    }

    /// True when every item has the same behavioral norm.
    pub fn is_degenerate(&self) -> bool {
        self.max <= self.min
    }
}

/// Exact min and max of the behavioral norms.
pub fn compute_norm_stats<T: Scalar>(items: &[ItemRecord<T>]) -> Result<NormStats> {
    let mut norms = items.iter().map(|it| it.behavior_norm().as_f64());
    let first = norms
        .next()
        .ok_or_else(|| Error::Precondition("norm statistics need at least one item".into()))?;
    let (min, max) = norms.fold((first, first), |(lo, hi), n| (lo.min(n), hi.max(n)));
    Ok(NormStats::new(min, max))
}

/// Validated, immutable collection of items.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    items: Vec<ItemRecord<T>>,
    dims: InputDims,
    norm_stats: NormStats,
}

impl<T: Scalar> Dataset<T> {
    /// Checks dimensions, finiteness and id uniqueness, and caches the
    /// behavioral norm statistics.
    pub fn new(items: Vec<ItemRecord<T>>) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Precondition("dataset is empty".into()))?;
        let dims = first.dims();
        let mut seen = HashSet::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let got = item.dims();
            for (name, have, want) in [
                ("e_t", got.text, dims.text),
                ("e_v", got.vision, dims.vision),
                ("e_b", got.behavior, dims.behavior),
            ] {
                if have != want {
                    return Err(Error::Schema(format!(
                        "item {} (id {:?}): {name} has {have} values, expected {want}",
                        i + 1,
                        item.item_id
                    )));
                }
            }
            let finite = item
                .text
                .iter()
                .chain(&item.vision)
                .chain(&item.behavior)
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::Schema(format!(
                    "item {} (id {:?}) has non-finite values",
                    i + 1,
                    item.item_id
                )));
            }
            if !seen.insert(item.item_id.as_str()) {
                return Err(Error::Schema(format!(
                    "item {} duplicates id {:?}",
                    i + 1,
                    item.item_id
                )));
            }
        }
        let norm_stats = compute_norm_stats(&items)?;
        Ok(Self {
            items,
            dims,
            norm_stats,
        })
    }

    pub fn items(&self) -> &[ItemRecord<T>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dims(&self) -> InputDims {
        self.dims
    }

    pub fn norm_stats(&self) -> NormStats {
        self.norm_stats
    }

    pub fn into_items(self) -> Vec<ItemRecord<T>> {
        self.items
    }
}

/// On-disk dataset encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Packed,
}

impl DataFormat {
    /// Sniffs the packed magic; anything else is treated as JSONL.
    pub fn detect(path: &Path) -> Result<Self> {
        let mut head = [0u8; 16];
        let mut f = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut filled = 0;
        while filled < head.len() {
            match f.read(&mut head[filled..]).map_err(|e| Error::file(path, e))? {
                0 => break,
                n => filled += n,
            }
        }
        Ok(if filled == 16 && &head == PACKED_MAGIC {
            DataFormat::Packed
        } else {
            DataFormat::Jsonl
        })
    }
}

impl FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "jsonl" => Ok(DataFormat::Jsonl),
            "packed" => Ok(DataFormat::Packed),
            other => Err(format!("unknown format {other:?} (expected jsonl or packed)")),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonItem {
    item_id: String,
    e_t: Vec<f64>,
    e_v: Vec<f64>,
    e_b: Vec<f64>,
}

fn to_scalars<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

pub fn load_dataset<T: Scalar>(path: &Path, format: DataFormat) -> Result<Dataset<T>> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let reader = BufReader::new(file);
    match format {
        DataFormat::Jsonl => read_jsonl(reader),
        DataFormat::Packed => read_packed(reader),
    }
}

pub fn save_dataset<T: Scalar>(dataset: &Dataset<T>, path: &Path, format: DataFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        DataFormat::Jsonl => write_jsonl(dataset, &mut w)?,
        DataFormat::Packed => write_packed(dataset, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: Scalar, R: BufRead>(reader: R) -> Result<Dataset<T>> {
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonItem = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        items.push(ItemRecord {
            item_id: parsed.item_id,
            text: to_scalars(&parsed.e_t),
            vision: to_scalars(&parsed.e_v),
            behavior: to_scalars(&parsed.e_b),
        });
    }
    Dataset::new(items)
}

pub fn write_jsonl<T: Scalar, W: Write>(dataset: &Dataset<T>, w: &mut W) -> Result<()> {
    for item in dataset.items() {
        let row = JsonItem {
            item_id: item.item_id.clone(),
            e_t: to_f64(&item.text),
            e_v: to_f64(&item.vision),
            e_b: to_f64(&item.behavior),
        };
        serde_json::to_writer(&mut *w, &row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated packed file reading {what}: {e}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_packed<T: Scalar, R: Read>(mut r: R) -> Result<Dataset<T>> {
    let mut magic = [0u8; 16];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != PACKED_MAGIC {
        return Err(Error::Format("missing MIXQUANT-EMB magic".into()));
    }
    let dims = InputDims::new(
        read_u32(&mut r, "text dim")? as usize,
        read_u32(&mut r, "vision dim")? as usize,
        read_u32(&mut r, "behavior dim")? as usize,
    );
    let count = read_u32(&mut r, "item count")? as usize;
    let mut items = Vec::with_capacity(count.min(1 << 20));
    let read_vec = |r: &mut R, n: usize, what: &str| -> Result<Vec<T>> {
        let mut buf = vec![0u8; n * 4];
        read_exact_or(r, &mut buf, what)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect())
    };
    for i in 0..count {
        let mut len = [0u8; 2];
        read_exact_or(&mut r, &mut len, "id length")?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact_or(&mut r, &mut id, "id")?;
        let item_id = String::from_utf8(id)
            .map_err(|_| Error::Format(format!("item {} id is not UTF-8", i + 1)))?;
        let text = read_vec(&mut r, dims.text, "e_t")?;
        let vision = read_vec(&mut r, dims.vision, "e_v")?;
        let behavior = read_vec(&mut r, dims.behavior, "e_b")?;
        items.push(ItemRecord {
            item_id,
            text,
            vision,
            behavior,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last item".into()));
    }
    Dataset::new(items)
}

pub fn write_packed<T: Scalar, W: Write>(dataset: &Dataset<T>, w: &mut W) -> Result<()> {
    let dims = dataset.dims();
    let count = u32::try_from(dataset.len())
        .map_err(|_| Error::Format("too many items for packed format".into()))?;
    w.write_all(PACKED_MAGIC)?;
    for d in [dims.text, dims.vision, dims.behavior] {
        let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&count.to_le_bytes())?;
    for item in dataset.items() {
        let id = item.item_id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Format(format!("item id {:?} longer than 65535 bytes", item.item_id)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id)?;
        for v in item.text.iter().chain(&item.vision).chain(&item.behavior) {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Parameters of [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_items: usize,
    pub dims: InputDims,
    pub n_clusters: usize,
    pub zipf_s: f64,
    pub seed: u64,
    /// Fraction of least-popular items whose behavior embedding carries no
    /// cluster signal at all (pure noise direction).
    #[serde(default)]
    pub noise_tail_fraction: f64,
}

impl SyntheticConfig {
    pub fn new(n_items: usize, dims: InputDims, n_clusters: usize, zipf_s: f64, seed: u64) -> Self {
        Self {
            n_items,
            dims,
            n_clusters,
            zipf_s,
            seed,
            noise_tail_fraction: 0.0,
        }
    }
}

/// Synthetic dataset plus the ground truth it was generated from.
#[derive(Clone, Debug)]
pub struct SyntheticData<T> {
    pub dataset: Dataset<T>,
    /// Content cluster of each item.
    pub clusters: Vec<usize>,
    /// Popularity rank of each item, 1 = most popular.
    pub popularity_rank: Vec<usize>,
    pub text_centers: Vec<Vec<f64>>,
    pub vision_centers: Vec<Vec<f64>>,
    /// Upper bound on `‖e_t − center‖` over all items.
    pub text_radius: f64,
    /// Upper bound on `‖e_v − center‖` over all items.
    pub vision_radius: f64,
}

/// Width of the hidden content factor shared by text and vision.
const CONTENT_FACTORS: usize = 8;
/// Half-width of the per-item content offset, in factor units.
const ITEM_SPREAD: f64 = 0.3;
/// Per-coordinate noise standard deviation relative to unit-scale centers.
const NOISE_STD: f64 = 0.1;
const BEHAVIOR_NORM_MIN: f64 = 0.25;
const BEHAVIOR_NORM_MAX: f64 = 4.0;

/// Generates a seeded dataset with clustered, correlated content
/// embeddings and behavior embeddings whose norm grows with Zipf popularity.
///
/// Each cluster has a hidden factor vector; each item adds a bounded offset
/// to its cluster's factor and both content modalities are fixed random
/// linear images of that item factor plus bounded noise, so text and vision
/// agree per item and per cluster. The behavior direction is a noisy image
/// of the same factor, scaled to a norm that is strictly decreasing in the
/// item's popularity rank (ranks are a seeded permutation; weights follow
/// `rank^-s`, compressed logarithmically into a fixed norm range).
pub fn generate_synthetic<T: Scalar>(cfg: &SyntheticConfig) -> Result<SyntheticData<T>> {
    if cfg.n_clusters == 0 || cfg.n_items < cfg.n_clusters {
        return Err(Error::Precondition(format!(
            "need n_items ≥ n_clusters ≥ 1, got {} items and {} clusters",
            cfg.n_items, cfg.n_clusters
        )));
    }
    if cfg.zipf_s.is_nan() || cfg.zipf_s <= 0.0 || cfg.zipf_s.is_infinite() {
        return Err(Error::Precondition(format!("zipf exponent must be positive, got {}", cfg.zipf_s)));
    }
    if !(0.0..=1.0).contains(&cfg.noise_tail_fraction) {
        return Err(Error::Precondition("noise_tail_fraction must lie in [0, 1]".into()));
    }
    let dims = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let factor_scale = (CONTENT_FACTORS as f64).sqrt().recip();
    let projection = |rows: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..CONTENT_FACTORS).map(|_| normal(rng) * factor_scale).collect())
            .collect()
    };
    let proj_t = projection(dims.text, &mut rng);
    let proj_v = projection(dims.vision, &mut rng);
    let proj_b = projection(dims.behavior, &mut rng);
    let apply = |p: &[Vec<f64>], f: &[f64]| -> Vec<f64> {
        p.iter().map(|row| row.iter().zip(f).map(|(a, b)| a * b).sum()).collect()
    };

    let factors: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| (0..CONTENT_FACTORS).map(|_| normal(&mut rng)).collect())
        .collect();
    let text_centers: Vec<Vec<f64>> = factors.iter().map(|f| apply(&proj_t, f)).collect();
    let vision_centers: Vec<Vec<f64>> = factors.iter().map(|f| apply(&proj_v, f)).collect();

    // Bounded uniform noise with the target standard deviation.
    let noise_amp = NOISE_STD * 3f64.sqrt();
    let frob = |p: &[Vec<f64>]| p.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let offset_bound = ITEM_SPREAD * (CONTENT_FACTORS as f64).sqrt();
    let text_radius = frob(&proj_t) * offset_bound + noise_amp * (dims.text as f64).sqrt();
    let vision_radius = frob(&proj_v) * offset_bound + noise_amp * (dims.vision as f64).sqrt();

    // Every cluster gets at least one item; the rest are assigned at random.
    let mut clusters: Vec<usize> = (0..cfg.n_items)
        .map(|i| if i < cfg.n_clusters { i } else { rng.random_range(0..cfg.n_clusters) })
        .collect();
    clusters.shuffle(&mut rng);

    let mut popularity_rank: Vec<usize> = (1..=cfg.n_items).collect();
    popularity_rank.shuffle(&mut rng);

    let weight = |rank: usize| (rank as f64).powf(-cfg.zipf_s);
    let w_min = weight(cfg.n_items);
    let log_span = (1.0 + weight(1) / w_min).ln();
    let n_noise = (cfg.noise_tail_fraction * cfg.n_items as f64).round() as usize;

    let mut items = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let k = clusters[i];
        let factor: Vec<f64> = factors[k]
            .iter()
            .map(|&f| f + ITEM_SPREAD * rng.random_range(-1.0..=1.0))
            .collect();
        let noisy = |base: Vec<f64>, rng: &mut ChaCha8Rng| -> Vec<f64> {
            base.into_iter()
                .map(|v| v + rng.random_range(-noise_amp..=noise_amp))
                .collect()
        };
        let text = noisy(apply(&proj_t, &factor), &mut rng);
        let vision = noisy(apply(&proj_v, &factor), &mut rng);

        let rank = popularity_rank[i];
        let direction: Vec<f64> = if rank > cfg.n_items - n_noise {
            (0..dims.behavior).map(|_| normal(&mut rng)).collect()
        } else {
            apply(&proj_b, &factor)
                .into_iter()
                .map(|v| v + NOISE_STD * normal(&mut rng))
                .collect()
        };
        let richness = if log_span > 0.0 {
            (1.0 + weight(rank) / w_min).ln() / log_span
        } else {
            1.0
        };
        let target_norm = BEHAVIOR_NORM_MIN + (BEHAVIOR_NORM_MAX - BEHAVIOR_NORM_MIN) * richness;
        let dn = l2_norm(&direction).max(1e-12);
        let behavior: Vec<f64> = direction.iter().map(|v| v / dn * target_norm).collect();

        items.push(ItemRecord {
            item_id: format!("item-{i:06}"),
            text: to_scalars(&text),
            vision: to_scalars(&vision),
            behavior: to_scalars(&behavior),
        });
    }

    Ok(SyntheticData {
        dataset: Dataset::new(items)?,
        clusters,
        popularity_rank,
        text_centers,
        vision_centers,
        text_radius,
        vision_radius,
    })
}
