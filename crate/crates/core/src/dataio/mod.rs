//! Dataset ingestion, patch sampling and multi-view batch assembly.

mod image;
pub mod synthetic;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::{sample_spec, CorruptionPool, CorruptionSpec};
use crate::error::{Error, Result};
use crate::rng;

pub(crate) use image::reflect;
pub use image::{ColorSpace, ImageTensor, MaskTensor};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Percentages assigned to each split; must sum to 100.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRule {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl SplitRule {
    pub fn new(train: u32, val: u32, test: u32) -> Result<Self> {
        if train + val + test != 100 {
            return Err(Error::Config(format!(
                "split rule {train}/{val}/{test} does not sum to 100"
            )));
        }
        Ok(Self { train, val, test })
    }

    pub fn all_train() -> Self {
        Self {
            train: 100,
            val: 0,
            test: 0,
        }
    }

    /// Parses `90/10` or `80/10/10`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split('/')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad split rule '{s}'")))
            })
            .collect::<Result<_>>()?;
        match parts[..] {
            [t, v] => Self::new(t, v, 0),
            [t, v, e] => Self::new(t, v, e),
            _ => Err(Error::Config(format!("bad split rule '{s}'"))),
        }
    }
}

impl std::fmt::Display for SplitRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.train, self.val, self.test)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest root.
    pub path: PathBuf,
    pub split: Split,
}

/// Sorted listing of a dataset folder with split tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Lists, decodes and splits every image directly inside `root`.
///
/// Files are ranked by a hash of their name; the first `train%` of the
/// ranking goes to train, the next `val%` to val, the rest to test.
pub fn scan_dataset(root: &Path, rule: SplitRule) -> Result<DatasetManifest> {
    let dir = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut files = Vec::new();
    for entry in dir {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    if files.is_empty() {
        return Err(Error::Ingest {
            path: root.to_path_buf(),
            reason: "no images found".into(),
        });
    }
    files.sort();
    for f in &files {
        ImageTensor::load_png(f)?;
    }
    let names: Vec<PathBuf> = files
        .iter()
        .map(|f| f.strip_prefix(root).unwrap_or(f).to_path_buf())
        .collect();
    let mut ranked: Vec<usize> = (0..names.len()).collect();
    ranked.sort_by_key(|&i| (fnv1a(names[i].to_string_lossy().as_bytes()), i));
    let n = names.len();
    let n_train = (n as f64 * rule.train as f64 / 100.0).round() as usize;
    let n_val = ((n as f64 * (rule.train + rule.val) as f64 / 100.0).round() as usize).saturating_sub(n_train);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in ranked.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries: names
            .into_iter()
            .zip(splits)
            .map(|(path, split)| ManifestEntry { path, split })
            .collect(),
    })
}

impl DatasetManifest {
    pub fn files(&self, split: Split) -> impl Iterator<Item = PathBuf> + '_ {
        self.entries
            .iter()
            .filter(move |e| e.split == split)
            .map(|e| self.root.join(&e.path))
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    /// JSON-lines: a header line with the root, then one line per file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let header = serde_json::json!({ "root": self.root });
        writeln!(out, "{header}").expect("write to vec");
        for e in &self.entries {
            writeln!(out, "{}", serde_json::to_string(e).expect("serializable")).expect("write to vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let bad = |why: String| Error::Ingest {
            path: path.to_path_buf(),
            reason: why,
        };
        let header: serde_json::Value = serde_json::from_str(lines.next().ok_or_else(|| bad("empty manifest".into()))?)
            .map_err(|e| bad(e.to_string()))?;
        let root = header["root"]
            .as_str()
            .ok_or_else(|| bad("missing root".into()))?
            .into();
        let entries = lines
            .map(|l| serde_json::from_str(l).map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        Ok(Self { root, entries })
    }
}

/// Decoded images of one split, held in memory for patch sampling.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<ImageTensor>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let mut names = Vec::new();
        let mut images = Vec::new();
        for path in manifest.files(split) {
            names.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
            images.push(ImageTensor::load_png(&path)?);
        }
        if images.is_empty() {
            return Err(Error::Config(format!(
                "split {split:?} of {} is empty",
                manifest.root.display()
            )));
        }
        Ok(Self { names, images })
    }

    pub fn from_images(images: Vec<ImageTensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("dataset has no images".into()));
        }
        let names = (0..images.len()).map(|i| format!("{i:04}")).collect();
        Ok(Self { names, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn min_dim(&self) -> usize {
        self.images.iter().map(|i| i.height().min(i.width())).min().unwrap_or(0)
    }
}

/// Uniformly random `patch`×`patch` crop from a uniformly random image,
/// optionally flipped and quarter-turned.
pub fn sample_patch<R: Rng + ?Sized>(data: &Dataset, patch: usize, augment: bool, rng: &mut R) -> Result<ImageTensor> {
    if patch == 0 || patch > data.min_dim() {
        return Err(Error::Config(format!(
            "patch {patch} does not fit the smallest image ({} px)",
            data.min_dim()
        )));
    }
    let img = &data.images[rng.random_range(0..data.len())];
    let y = rng.random_range(0..=img.height() - patch);
    let x = rng.random_range(0..=img.width() - patch);
    let mut out = img.crop(y, x, patch, patch)?;
    if augment {
        if rng.random_bool(0.5) {
            out = out.flip_horizontal();
        }
        if rng.random_bool(0.5) {
            out = out.flip_vertical();
        }
        if rng.random_bool(0.5) {
            out = out.rotate90();
        }
    }
    Ok(out)
}

/// `k` independently corrupted views of one clean patch.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub views: Vec<ImageTensor>,
    /// Pixel-drop masks, one slot per view.
    pub masks: Vec<Option<MaskTensor>>,
    pub specs: Vec<CorruptionSpec>,
    clean: Option<ImageTensor>,
}

impl ViewSet {
    pub fn new(
        views: Vec<ImageTensor>,
        masks: Vec<Option<MaskTensor>>,
        specs: Vec<CorruptionSpec>,
        clean: Option<ImageTensor>,
    ) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::Config(format!(
                "a view set needs at least 2 views, got {}",
                views.len()
            )));
        }
        if specs.len() != views.len() || masks.len() != views.len() {
            return Err(Error::Shape("views, masks and specs differ in length".into()));
        }
        for v in &views[1..] {
            views[0].ensure_same_shape(v)?;
        }
        if let Some(c) = &clean {
            views[0].ensure_same_shape(c)?;
        }
        Ok(Self {
            views,
            masks,
            specs,
            clean,
        })
    }

    pub fn k(&self) -> usize {
        self.views.len()
    }

    /// Clean reference, available only before [`ViewSet::strip_clean`].
    pub fn clean(&self) -> Option<&ImageTensor> {
        self.clean.as_ref()
    }

    /// Drops the clean reference; self-supervised code only sees stripped sets.
    pub fn strip_clean(mut self) -> Self {
        self.clean = None;
        self
    }

    pub fn has_clean(&self) -> bool {
        self.clean.is_some()
    }
}

/// Corrupts `clean` `k` times with specs drawn independently from `pool`.
pub fn make_viewset<R: Rng + ?Sized>(
    clean: &ImageTensor,
    pool: &CorruptionPool,
    k: usize,
    rng: &mut R,
) -> Result<ViewSet> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 views, got {k}")));
    }
    let mut views = Vec::with_capacity(k);
    let mut masks = Vec::with_capacity(k);
    let mut specs = Vec::with_capacity(k);
    for _ in 0..k {
        let spec = sample_spec(pool, rng)?;
        let out = spec.apply(clean)?;
        views.push(out.image);
        masks.push(out.mask);
        specs.push(spec);
    }
    ViewSet::new(views, masks, specs, Some(clean.clone()))
}

/// Batch geometry for [`batch_viewsets`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub batch: usize,
    pub views: usize,
    pub patch: usize,
    pub augment: bool,
}

/// Assembles `batch` view sets. Item `i` uses its own stream derived from
/// `(seed, batch_index, i)`, so results do not depend on evaluation order.
pub fn batch_viewsets(
    data: &Dataset,
    pool: &CorruptionPool,
    spec: &BatchSpec,
    seed: u64,
    batch_index: u64,
) -> Result<Vec<ViewSet>> {
    if spec.batch == 0 {
        return Err(Error::Config("batch must be >= 1".into()));
    }
    (0..spec.batch)
        .map(|i| {
            let mut r = rng::stream(seed, &[batch_index, i as u64]);
            let clean = sample_patch(data, spec.patch, spec.augment, &mut r)?;
            make_viewset(&clean, pool, spec.views, &mut r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::Family;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_images(dir: &Path, n: usize) {
        for (i, img) in synthetic::toy_set(n, 16, 3).into_iter().enumerate() {
            img.save_png(&dir.join(format!("img_{i:03}.png"))).unwrap();
        }
    }

    #[test]
    fn split_counts_follow_rule() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), 40);
        let m = scan_dataset(dir.path(), SplitRule::parse("90/10").unwrap()).unwrap();
        assert_eq!(m.count(Split::Train), 36);
        assert_eq!(m.count(Split::Val), 4);
        assert_eq!(m.count(Split::Test), 0);
        assert_eq!(m, scan_dataset(dir.path(), SplitRule::parse("90/10").unwrap()).unwrap());
        let saved = dir.path().join("manifest.jsonl");
        m.save(&saved).unwrap();
        assert_eq!(DatasetManifest::load(&saved).unwrap(), m);
    }

    #[test]
    fn corrupt_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), 2);
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        match scan_dataset(dir.path(), SplitRule::all_train()) {
            Err(Error::Ingest { path, .. }) => assert!(path.ends_with("broken.png")),
            other => panic!("expected ingest error, got {other:?}"),
        }
        let empty = tempfile::tempdir().unwrap();
        assert!(scan_dataset(empty.path(), SplitRule::all_train()).is_err());
    }

    #[test]
    fn patches_have_requested_shape_and_are_reproducible() {
        let data = Dataset::from_images(synthetic::toy_set(2, 64, 1)).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let p = sample_patch(&data, 48, true, &mut a).unwrap();
        assert_eq!(p.shape(), (48, 48, 3));
        assert_eq!(p, sample_patch(&data, 48, true, &mut b).unwrap());
        assert!(sample_patch(&data, 65, false, &mut a).is_err());
    }

    #[test]
    fn image_selection_is_uniform() {
        // Two constant images of different value, so the crop reveals its source.
        let data = Dataset::from_images(vec![
            ImageTensor::filled(8, 8, 3, 0.0),
            ImageTensor::filled(8, 8, 3, 1.0),
        ])
        .unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let ones = (0..n)
            .filter(|_| sample_patch(&data, 4, false, &mut r).unwrap().get(0, 0, 0) == 1.0)
            .count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn identity_pool_views_equal_clean() {
        let clean = synthetic::toy_image(4, 16);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let vs = make_viewset(&clean, &CorruptionPool::identity(), 3, &mut r).unwrap();
        assert!(vs.views.iter().all(|v| *v == clean));
        assert!(make_viewset(&clean, &CorruptionPool::identity(), 1, &mut r).is_err());
    }

    #[test]
    fn gaussian_views_have_uncorrelated_residuals() {
        let clean = ImageTensor::filled(48, 48, 3, 0.5);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let vs = make_viewset(&clean, &CorruptionPool::gaussian(25.0, 25.0), 2, &mut r).unwrap();
        let ra: Vec<f64> = vs.views[0].data().iter().map(|v| *v as f64 - 0.5).collect();
        let rb: Vec<f64> = vs.views[1].data().iter().map(|v| *v as f64 - 0.5).collect();
        let dot: f64 = ra.iter().zip(&rb).map(|(a, b)| a * b).sum();
        let norm = (ra.iter().map(|a| a * a).sum::<f64>() * rb.iter().map(|b| b * b).sum::<f64>()).sqrt();
        assert!((dot / norm).abs() < 0.05);
    }

    #[test]
    fn four_views_have_distinct_seeds() {
        let clean = synthetic::toy_image(4, 16);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let vs = make_viewset(&clean, &CorruptionPool::noise_pool(), 4, &mut r).unwrap();
        assert_eq!(vs.k(), 4);
        let mut seeds: Vec<u64> = vs.specs.iter().map(|s| s.seed).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 4);
    }

    #[test]
    fn batches_are_deterministic() {
        let data = Dataset::from_images(synthetic::toy_set(3, 64, 2)).unwrap();
        let spec = BatchSpec {
            batch: 8,
            views: 2,
            patch: 48,
            augment: true,
        };
        let pool = CorruptionPool::gaussian(25.0, 25.0);
        let a = batch_viewsets(&data, &pool, &spec, 11, 0).unwrap();
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|v| v.k() == 2 && v.views[0].shape() == (48, 48, 3)));
        assert_eq!(a, batch_viewsets(&data, &pool, &spec, 11, 0).unwrap());
        assert_ne!(a, batch_viewsets(&data, &pool, &spec, 11, 1).unwrap());
        let one = batch_viewsets(&data, &pool, &BatchSpec { batch: 1, ..spec }, 11, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], a[0]);
    }

    #[test]
    fn stripping_removes_clean() {
        let clean = synthetic::toy_image(1, 8);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let vs = make_viewset(&clean, &CorruptionPool::identity(), 2, &mut r).unwrap();
        assert!(vs.has_clean());
        assert_eq!(vs.specs[0].family, Family::Identity);
        assert!(vs.strip_clean().clean().is_none());
    }
}
