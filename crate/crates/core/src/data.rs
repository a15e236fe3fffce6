//! Dataset ingestion for Market-1501 / DukeMTMC-reID style trees and
//! one-folder-per-identity face collections.
//!
//! Pixels are held as `(3, H, W)` f32 tensors in `[-1, 1]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{Device, Tensor};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity label used by Market-1501 for junk detections.
pub const JUNK_IDENTITY: i64 = -1;

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    /// Market-1501 / Duke directory name for this split.
    pub fn market_dir(self) -> &'static str {
        match self {
            Split::Train => "bounding_box_train",
            Split::Query => "query",
            Split::Gallery => "bounding_box_test",
        }
    }

    fn from_dir_name(name: &str) -> Option<Split> {
        match name {
            "bounding_box_train" | "train" => Some(Split::Train),
            "query" => Some(Split::Query),
            "bounding_box_test" | "gallery" | "test" => Some(Split::Gallery),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Market1501,
    Dukemtmc,
    FaceFolder,
    Synthetic,
}

impl Layout {
    /// Layouts whose filenames carry `PPPP_cC...` identity and camera tokens.
    pub fn encodes_cameras(self) -> bool {
        !matches!(self, Layout::FaceFolder)
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "market1501" => Ok(Layout::Market1501),
            "dukemtmc" => Ok(Layout::Dukemtmc),
            "face_folder" => Ok(Layout::FaceFolder),
            "synthetic" => Ok(Layout::Synthetic),
            other => Err(Error::config("layout", format!("unknown layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub image_path: PathBuf,
    pub identity: i64,
    /// 1-based camera id, 0 when the dataset has no cameras.
    pub camera: u32,
    pub split: Split,
}

impl PersonRecord {
    pub fn is_junk(&self) -> bool {
        self.identity < 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub records: Vec<PersonRecord>,
    pub num_identities: usize,
    pub layout: Layout,
}

impl DatasetIndex {
    pub fn new(records: Vec<PersonRecord>, layout: Layout) -> Self {
        let num_identities = records
            .iter()
            .filter(|r| !r.is_junk())
            .map(|r| r.identity)
            .collect::<BTreeSet<_>>()
            .len();
        Self {
            records,
            num_identities,
            layout,
        }
    }

    pub fn split(&self, split: Split) -> Vec<&PersonRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Sub-index restricted to one split.
    pub fn subset(&self, split: Split) -> DatasetIndex {
        DatasetIndex::new(
            self.records.iter().filter(|r| r.split == split).cloned().collect(),
            self.layout,
        )
    }

    pub fn usable(&self) -> impl Iterator<Item = &PersonRecord> {
        self.records.iter().filter(|r| !r.is_junk())
    }

    /// Sorted distinct non-junk identities.
    pub fn identities(&self) -> Vec<i64> {
        self.usable()
            .map(|r| r.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Write the `path,identity,camera,split` manifest.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["path", "identity", "camera", "split"])?;
        for r in &self.records {
            w.write_record([
                r.image_path.display().to_string(),
                r.identity.to_string(),
                r.camera.to_string(),
                r.split.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parse `PPPP_cC...` into `(identity, camera)`.
pub fn parse_reid_filename(name: &str) -> Option<(i64, u32)> {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    let mut tokens = stem.split('_');
    let identity: i64 = tokens.next()?.parse().ok()?;
    let cam_token = tokens.next()?.strip_prefix('c')?;
    let digits: String = cam_token.chars().take_while(|c| c.is_ascii_digit()).collect();
    let camera: u32 = digits.parse().ok()?;
    if camera == 0 || identity < JUNK_IDENTITY {
        return None;
    }
    Some((identity, camera))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn scan_reid_dir(dir: &Path, split: Split, out: &mut Vec<PersonRecord>) -> Result<()> {
    for path in sorted_entries(dir)? {
        if !path.is_file() || !is_image(&path) {
            continue;
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        match parse_reid_filename(name) {
            Some((identity, camera)) => out.push(PersonRecord {
                image_path: path,
                identity,
                camera,
                split,
            }),
            None => log::warn!("skipping malformed filename {}", path.display()),
        }
    }
    Ok(())
}

fn scan_face_dir(
    dir: &Path,
    split: Split,
    ids: &mut BTreeMap<String, i64>,
    out: &mut Vec<PersonRecord>,
) -> Result<()> {
    for sub in sorted_entries(dir)? {
        if !sub.is_dir() {
            continue;
        }
        let name = sub.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let next = ids.len() as i64;
        let identity = *ids.entry(name).or_insert(next);
        for path in sorted_entries(&sub)? {
            if path.is_file() && is_image(&path) {
                out.push(PersonRecord {
                    image_path: path,
                    identity,
                    camera: 0,
                    split,
                });
            }
        }
    }
    Ok(())
}

/// Index every image under `root` following `layout`'s naming convention.
///
/// `root` may be the dataset root (holding the split directories) or a
/// single split directory such as `bounding_box_train/`.
pub fn scan_dataset(root: &Path, layout: Layout) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Path(root.display().to_string()));
    }
    let mut records = Vec::new();
    let split_dirs: Vec<(Split, PathBuf)> = [Split::Train, Split::Query, Split::Gallery]
        .into_iter()
        .flat_map(|s| {
            let names: &[&str] = if layout.encodes_cameras() {
                &[s.market_dir()]
            } else {
                &[s.as_str()]
            };
            names.iter().map(move |n| (s, root.join(n))).collect::<Vec<_>>()
        })
        .filter(|(_, p)| p.is_dir())
        .collect();

    let own_split = root
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(Split::from_dir_name)
        .unwrap_or(Split::Train);

    if layout.encodes_cameras() {
        if split_dirs.is_empty() {
            scan_reid_dir(root, own_split, &mut records)?;
        } else {
            for (split, dir) in &split_dirs {
                scan_reid_dir(dir, *split, &mut records)?;
            }
        }
    } else {
        let mut ids = BTreeMap::new();
        if split_dirs.is_empty() {
            scan_face_dir(root, own_split, &mut ids, &mut records)?;
        } else {
            for (split, dir) in &split_dirs {
                scan_face_dir(dir, *split, &mut ids, &mut records)?;
            }
        }
    }

    if records.is_empty() {
        return Err(Error::EmptyDataset(format!("no parsable images under {}", root.display())));
    }
    Ok(DatasetIndex::new(records, layout))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Targeted,
    Untargeted,
}

impl FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "targeted" => Ok(AttackMode::Targeted),
            "untargeted" => Ok(AttackMode::Untargeted),
            other => Err(Error::config("mode", format!("unknown attack mode `{other}`"))),
        }
    }
}

/// Seeded stream of (source, target) pairs over the usable records of an index.
pub struct PairSampler<'a> {
    records: Vec<&'a PersonRecord>,
    mode: AttackMode,
    rng: ChaCha8Rng,
}

impl<'a> PairSampler<'a> {
    pub fn new(index: &'a DatasetIndex, mode: AttackMode, seed: u64) -> Result<Self> {
        let records: Vec<_> = index.usable().collect();
        let ids = records.iter().map(|r| r.identity).collect::<BTreeSet<_>>().len();
        if mode == AttackMode::Targeted && ids < 2 {
            return Err(Error::InsufficientIdentities { needed: 2, found: ids });
        }
        if records.is_empty() {
            return Err(Error::InsufficientIdentities { needed: 1, found: 0 });
        }
        Ok(Self {
            records,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_pair(&mut self) -> (&'a PersonRecord, Option<&'a PersonRecord>) {
        let source = *self.records.choose(&mut self.rng).expect("nonempty");
        let target = match self.mode {
            AttackMode::Untargeted => None,
            AttackMode::Targeted => loop {
                let t = *self.records.choose(&mut self.rng).expect("nonempty");
                if t.identity != source.identity {
                    break Some(t);
                }
            },
        };
        (source, target)
    }
}

pub fn sample_pair(
    index: &DatasetIndex,
    mode: AttackMode,
    seed: u64,
) -> Result<(PersonRecord, Option<PersonRecord>)> {
    let mut sampler = PairSampler::new(index, mode, seed)?;
    let (s, t) = sampler.next_pair();
    Ok((s.clone(), t.cloned()))
}

/// Decode, resize (bilinear, no aspect preservation) and rescale to `[-1, 1]`.
pub fn load_image_path(path: &Path, height: usize, width: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.dimensions() == (width as u32, height as u32) {
        rgb
    } else {
        image::imageops::resize(
            &rgb,
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    rgb8_to_tensor(&rgb)
}

pub fn load_image(record: &PersonRecord, height: usize, width: usize) -> Result<Tensor> {
    load_image_path(&record.image_path, height, width)
}

/// Load many records into one `(N, 3, H, W)` batch using up to `workers` threads.
pub fn load_batch(
    records: &[&PersonRecord],
    height: usize,
    width: usize,
    workers: usize,
) -> Result<Tensor> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let workers = workers.max(1).min(records.len());
    let chunk = records.len().div_ceil(workers);
    let images: Vec<Tensor> = std::thread::scope(|scope| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|c| {
                scope.spawn(move || {
                    c.iter()
                        .map(|r| load_image(r, height, width))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("loader thread panicked"))
            .collect::<Result<Vec<Vec<_>>>>()
            .map(|v| v.into_iter().flatten().collect())
    })?;
    Ok(Tensor::stack(&images, 0)?)
}

pub fn rgb8_to_tensor(rgb: &image::RgbImage) -> Result<Tensor> {
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// Map a `(3, H, W)` tensor in `[-1, 1]` to 8-bit RGB, rounding half up.
pub fn tensor_to_rgb8(t: &Tensor) -> Result<image::RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let data: Vec<f32> = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = data[ch * h * w + y as usize * w + x as usize];
            px[ch] = to_u8(v);
        }
    }
    Ok(img)
}

pub fn to_u8(v: f32) -> u8 {
    let scaled = (v.clamp(-1.0, 1.0) + 1.0) * 127.5;
    (scaled + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str, color: [u8; 3]) -> PathBuf {
        let p = dir.join(name);
        image::RgbImage::from_pixel(8, 4, image::Rgb(color)).save(&p).unwrap();
        p
    }

    #[test]
    fn parses_market_and_duke_names() {
        assert_eq!(parse_reid_filename("0001_c1s1_000001_00.jpg"), Some((1, 1)));
        assert_eq!(parse_reid_filename("0002_c2s1_000002_00.jpg"), Some((2, 2)));
        assert_eq!(parse_reid_filename("-1_c3s2_000123_01.jpg"), Some((-1, 3)));
        assert_eq!(parse_reid_filename("0005_c8_f0046182.jpg"), Some((5, 8)));
        assert_eq!(parse_reid_filename("Thumbs.db"), None);
        assert_eq!(parse_reid_filename("0001_x1s1.jpg"), None);
        assert_eq!(parse_reid_filename("0001_c0s1.jpg"), None);
    }

    #[test]
    fn scans_two_file_fixture() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "0001_c1s1_000001_00.jpg", [0, 0, 0]);
        touch(dir.path(), "0002_c2s1_000002_00.jpg", [0, 0, 0]);
        touch(dir.path(), "garbage.jpg", [0, 0, 0]);
        let idx = scan_dataset(dir.path(), Layout::Market1501).unwrap();
        assert_eq!(idx.records.len(), 2);
        assert_eq!(idx.identities(), vec![1, 2]);
        let cams: BTreeSet<u32> = idx.records.iter().map(|r| r.camera).collect();
        assert_eq!(cams, BTreeSet::from([1, 2]));
        assert_eq!(idx.num_identities, 2);
    }

    #[test]
    fn split_directories_and_junk() {
        let dir = tempfile::tempdir().unwrap();
        for s in ["bounding_box_train", "query", "bounding_box_test"] {
            std::fs::create_dir(dir.path().join(s)).unwrap();
        }
        touch(&dir.path().join("bounding_box_train"), "0001_c1s1_000001_00.jpg", [9, 9, 9]);
        touch(&dir.path().join("query"), "0001_c1s1_000002_00.jpg", [9, 9, 9]);
        touch(&dir.path().join("bounding_box_test"), "-1_c2s1_000003_00.jpg", [9, 9, 9]);
        touch(&dir.path().join("bounding_box_test"), "0001_c2s1_000004_00.jpg", [9, 9, 9]);
        let idx = scan_dataset(dir.path(), Layout::Market1501).unwrap();
        assert_eq!(idx.records.len(), 4);
        assert_eq!(idx.num_identities, 1);
        assert_eq!(idx.split(Split::Gallery).len(), 2);
        assert_eq!(idx.usable().count(), 3);
        // idempotent
        assert_eq!(idx, scan_dataset(dir.path(), Layout::Market1501).unwrap());
    }

    #[test]
    fn face_folder_layout() {
        let dir = tempfile::tempdir().unwrap();
        for (who, n) in [("alice", 2), ("bob", 3)] {
            let sub = dir.path().join(who);
            std::fs::create_dir(&sub).unwrap();
            for i in 0..n {
                touch(&sub, &format!("{i}.png"), [1, 2, 3]);
            }
        }
        let idx = scan_dataset(dir.path(), Layout::FaceFolder).unwrap();
        assert_eq!(idx.records.len(), 5);
        assert_eq!(idx.num_identities, 2);
        assert!(idx.records.iter().all(|r| r.camera == 0));
    }

    #[test]
    fn empty_and_missing_roots() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            scan_dataset(dir.path(), Layout::Market1501),
            Err(Error::EmptyDataset(_))
        ));
        assert!(matches!(
            scan_dataset(&dir.path().join("nope"), Layout::Market1501),
            Err(Error::Path(_))
        ));
    }

    fn index_of(ids: &[i64]) -> DatasetIndex {
        let records = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| PersonRecord {
                image_path: PathBuf::from(format!("{i}.jpg")),
                identity: id,
                camera: 1,
                split: Split::Train,
            })
            .collect();
        DatasetIndex::new(records, Layout::Synthetic)
    }

    #[test]
    fn pair_sampling_contract() {
        let single = index_of(&[3, 3, 3]);
        assert!(matches!(
            sample_pair(&single, AttackMode::Targeted, 1),
            Err(Error::InsufficientIdentities { .. })
        ));
        let (_, t) = sample_pair(&single, AttackMode::Untargeted, 1).unwrap();
        assert!(t.is_none());

        let idx = index_of(&[1, 1, 2, 2, 3, -1]);
        for seed in 0..50 {
            let (s, t) = sample_pair(&idx, AttackMode::Targeted, seed).unwrap();
            let t = t.unwrap();
            assert_ne!(s.identity, t.identity);
            assert!(!s.is_junk() && !t.is_junk());
            assert_eq!(sample_pair(&idx, AttackMode::Targeted, seed).unwrap(), (s, Some(t)));
        }
    }

    #[test]
    fn load_image_rescales_endpoints_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        let black = dir.path().join("b.png");
        let white = dir.path().join("w.png");
        image::RgbImage::from_pixel(32, 64, image::Rgb([0, 0, 0])).save(&black).unwrap();
        image::RgbImage::from_pixel(32, 64, image::Rgb([255, 255, 255])).save(&white).unwrap();
        let b = load_image_path(&black, 128, 64).unwrap();
        assert_eq!(b.dims(), &[3, 128, 64]);
        let bv: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert!(bv.iter().all(|&v| v == -1.0));
        let wv: Vec<f32> = load_image_path(&white, 128, 64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert!(wv.iter().all(|&v| v == 1.0));

        let bad = dir.path().join("bad.jpg");
        std::fs::write(&bad, b"not an image").unwrap();
        let err = load_image_path(&bad, 8, 8).unwrap_err();
        assert!(err.to_string().contains("bad.jpg"));
    }

    #[test]
    fn u8_mapping_rounds_half_up() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.0), 128); // 127.5 rounds up
        assert_eq!(to_u8(7.0), 255);
    }
}
