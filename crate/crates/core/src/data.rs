//! Class spaces, split manifests, and the parametric toy-shapes dataset.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub String);

impl ClassId {
    pub fn new(id: impl Into<String>) -> Self {
        ClassId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        ClassId(s.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: ClassId,
    pub name: String,
}

/// All classes of a dataset, partitioned into seen and unseen.
///
/// Classes are kept sorted by id; that order is the index order used by every
/// score vector, softmax and argmax in the crate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpace {
    classes: Vec<ClassInfo>,
    seen: BTreeSet<ClassId>,
    unseen: BTreeSet<ClassId>,
}

impl ClassSpace {
    /// Build a space from `(id, display name)` pairs; every class not listed in
    /// `unseen` is seen.
    pub fn new<I, S>(classes: I, unseen: &[ClassId]) -> Result<Self>
    where
        I: IntoIterator<Item = (ClassId, S)>,
        S: Into<String>,
    {
        let mut classes: Vec<ClassInfo> = classes
            .into_iter()
            .map(|(id, name)| ClassInfo { id, name: name.into() })
            .collect();
        classes.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in classes.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::structural(format!("duplicate class id {}", pair[0].id)));
            }
        }
        let all: BTreeSet<ClassId> = classes.iter().map(|c| c.id.clone()).collect();
        let unseen: BTreeSet<ClassId> = unseen.iter().cloned().collect();
        if let Some(missing) = unseen.iter().find(|c| !all.contains(*c)) {
            return Err(Error::structural(format!("unseen class {missing} is not in the class list")));
        }
        let seen = all.difference(&unseen).cloned().collect();
        Ok(ClassSpace { classes, seen, unseen })
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ClassId> {
        self.classes.iter().map(|c| &c.id)
    }

    pub fn seen(&self) -> &BTreeSet<ClassId> {
        &self.seen
    }

    pub fn unseen(&self) -> &BTreeSet<ClassId> {
        &self.unseen
    }

    /// Seen ids in the fixed class order.
    pub fn seen_ids(&self) -> Vec<ClassId> {
        self.seen.iter().cloned().collect()
    }

    pub fn unseen_ids(&self) -> Vec<ClassId> {
        self.unseen.iter().cloned().collect()
    }

    pub fn all_ids(&self) -> Vec<ClassId> {
        self.ids().cloned().collect()
    }

    pub fn contains(&self, id: &ClassId) -> bool {
        self.index_of(id).is_some()
    }

    pub fn is_seen(&self, id: &ClassId) -> bool {
        self.seen.contains(id)
    }

    pub fn is_unseen(&self, id: &ClassId) -> bool {
        self.unseen.contains(id)
    }

    pub fn index_of(&self, id: &ClassId) -> Option<usize> {
        self.classes.binary_search_by(|c| c.id.cmp(id)).ok()
    }

    pub fn name(&self, id: &ClassId) -> Option<&str> {
        self.index_of(id).map(|i| self.classes[i].name.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    TrainSeen,
    TestSeen,
    TestUnseen,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::TrainSeen, Partition::TestSeen, Partition::TestUnseen];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::TrainSeen => "train-seen",
            Partition::TestSeen => "test-seen",
            Partition::TestUnseen => "test-unseen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub class_id: ClassId,
    pub partition: Partition,
}

/// Declared totals a split must reproduce.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedCounts {
    pub images: Option<usize>,
    pub classes: Option<usize>,
    pub seen_classes: Option<usize>,
    pub unseen_classes: Option<usize>,
    pub train_seen: Option<usize>,
    pub test_seen: Option<usize>,
    pub test_unseen: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub dataset: String,
    pub records: Vec<ImageRecord>,
    pub expected: ExpectedCounts,
}

impl SplitSpec {
    pub fn partition(&self, p: Partition) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.partition == p)
    }

    /// Read `image_id,class_id,partition` rows (with header).
    pub fn read_csv(dataset: &str, path: &Path, expected: ExpectedCounts) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            image_id: String,
            class_id: String,
            partition: String,
        }
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (line, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let partition = Partition::parse(&row.partition).ok_or_else(|| {
                Error::Config(format!(
                    "{}: line {}: unknown partition {:?}",
                    path.display(),
                    line + 2,
                    row.partition
                ))
            })?;
            records.push(ImageRecord { image_id: row.image_id, class_id: ClassId(row.class_id), partition });
        }
        Ok(SplitSpec { dataset: dataset.to_string(), records, expected })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// The same image id appears more than once.
    DuplicateImage { image_id: String, partitions: Vec<Partition> },
    /// A seen-class image sits in the unseen test partition or vice versa.
    WrongPartition { image_id: String, class_id: ClassId, partition: Partition },
    CountMismatch { what: String, expected: usize, actual: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateImage { image_id, partitions } => {
                let parts: Vec<&str> = partitions.iter().map(|p| p.as_str()).collect();
                write!(f, "image {image_id} appears in several partitions: {}", parts.join(", "))
            }
            Violation::WrongPartition { image_id, class_id, partition } => {
                write!(f, "image {image_id} of class {class_id} cannot be in {partition}")
            }
            Violation::CountMismatch { what, expected, actual } => {
                write!(f, "{what}: expected {expected}, found {actual}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub dataset: String,
    pub counts: BTreeMap<String, usize>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        match self.violations.first() {
            None => Ok(self),
            Some(v) => Err(Error::Protocol(format!("split {}: {v}", self.dataset))),
        }
    }
}

/// Check a split against a class space and its declared totals.
///
/// A record naming a class outside `space` is a structural error; all other
/// problems are collected as violations.
pub fn validate_split(spec: &SplitSpec, space: &ClassSpace) -> Result<ValidationReport> {
    let mut violations = Vec::new();

    let mut by_image: HashMap<&str, Vec<Partition>> = HashMap::with_capacity(spec.records.len());
    let mut order: Vec<&str> = Vec::new();
    for r in &spec.records {
        if !space.contains(&r.class_id) {
            return Err(Error::structural(format!(
                "image {} refers to class {} which is not in the class space",
                r.image_id, r.class_id
            )));
        }
        let entry = by_image.entry(r.image_id.as_str()).or_default();
        if entry.is_empty() {
            order.push(r.image_id.as_str());
        }
        entry.push(r.partition);

        let ok = match r.partition {
            Partition::TrainSeen | Partition::TestSeen => space.is_seen(&r.class_id),
            Partition::TestUnseen => space.is_unseen(&r.class_id),
        };
        if !ok {
            violations.push(Violation::WrongPartition {
                image_id: r.image_id.clone(),
                class_id: r.class_id.clone(),
                partition: r.partition,
            });
        }
    }
    for id in order {
        let parts = &by_image[id];
        if parts.len() > 1 {
            violations.push(Violation::DuplicateImage { image_id: id.to_string(), partitions: parts.clone() });
        }
    }

    let mut counts = BTreeMap::new();
    counts.insert("images".to_string(), by_image.len());
    counts.insert("classes".to_string(), space.len());
    counts.insert("seen_classes".to_string(), space.seen().len());
    counts.insert("unseen_classes".to_string(), space.unseen().len());
    for p in Partition::ALL {
        counts.insert(p.as_str().replace('-', "_"), spec.partition(p).count());
    }

    let e = &spec.expected;
    let declared = [
        ("images", e.images),
        ("classes", e.classes),
        ("seen_classes", e.seen_classes),
        ("unseen_classes", e.unseen_classes),
        ("train_seen", e.train_seen),
        ("test_seen", e.test_seen),
        ("test_unseen", e.test_unseen),
    ];
    for (what, expected) in declared {
        if let Some(expected) = expected {
            let actual = counts[what];
            if actual != expected {
                violations.push(Violation::CountMismatch { what: what.to_string(), expected, actual });
            }
        }
    }

    Ok(ValidationReport { dataset: spec.dataset.clone(), counts, violations })
}

/// Published size of one of the standard benchmarks under the proposed-split
/// protocol, together with the per-dataset threshold and calibration defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkDescriptor {
    pub name: String,
    pub images: usize,
    pub classes: usize,
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub train_seen: usize,
    pub test_seen: usize,
    pub test_unseen: usize,
    pub gamma: f64,
    pub lambda: f64,
}

impl BenchmarkDescriptor {
    pub fn expected_counts(&self) -> ExpectedCounts {
        ExpectedCounts {
            images: Some(self.images),
            classes: Some(self.classes),
            seen_classes: Some(self.seen_classes),
            unseen_classes: Some(self.unseen_classes),
            train_seen: Some(self.train_seen),
            test_seen: Some(self.test_seen),
            test_unseen: Some(self.test_unseen),
        }
    }

    /// A synthetic split with exactly the declared counts; classes are named
    /// `c000`, `c001`, … with the last `unseen_classes` ids unseen. Images are
    /// spread round-robin over the classes of each partition.
    pub fn synthetic(&self) -> Result<(ClassSpace, SplitSpec)> {
        let ids: Vec<ClassId> = (0..self.classes).map(|i| ClassId(format!("c{i:03}"))).collect();
        let unseen = &ids[self.seen_classes..];
        let space = ClassSpace::new(ids.iter().map(|c| (c.clone(), c.0.clone())), unseen)?;
        let seen = &ids[..self.seen_classes];
        let mut records = Vec::with_capacity(self.images);
        let mut push = |n: usize, pool: &[ClassId], p: Partition| {
            for i in 0..n {
                records.push(ImageRecord {
                    image_id: format!("{}_{}_{i:06}", self.name, p.as_str()),
                    class_id: pool[i % pool.len()].clone(),
                    partition: p,
                });
            }
        };
        push(self.train_seen, seen, Partition::TrainSeen);
        push(self.test_seen, seen, Partition::TestSeen);
        push(self.test_unseen, unseen, Partition::TestUnseen);
        let spec = SplitSpec { dataset: self.name.clone(), records, expected: self.expected_counts() };
        Ok((space, spec))
    }
}

/// The four standard benchmarks. Partition sizes follow the proposed-split
/// protocol files; the threshold/calibration pairs are the published defaults.
pub fn benchmarks() -> Vec<BenchmarkDescriptor> {
    let d = |name: &str, images, classes, seen, unseen, tr, ts, tu, gamma, lambda| BenchmarkDescriptor {
        name: name.to_string(),
        images,
        classes,
        seen_classes: seen,
        unseen_classes: unseen,
        train_seen: tr,
        test_seen: ts,
        test_unseen: tu,
        gamma,
        lambda,
    };
    vec![
        d("AWA2", 37_322, 50, 40, 10, 23_527, 5_882, 7_913, 0.6, 0.8),
        d("CUB", 11_788, 200, 150, 50, 7_057, 1_764, 2_967, 0.4, 0.95),
        d("SUN", 14_340, 717, 645, 72, 10_320, 2_580, 1_440, 0.6, 0.6),
        d("FLO", 8_189, 102, 82, 20, 5_631, 1_403, 1_155, 0.4, 0.9),
    ]
}

pub fn benchmark(name: &str) -> Option<BenchmarkDescriptor> {
    benchmarks().into_iter().find(|b| b.name.eq_ignore_ascii_case(name))
}

/// An RGB image with values in `[0, 1]`, stored row-major as `(y, x, channel)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn zeros(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height * Self::CHANNELS] }
    }

    pub fn from_flat(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * Self::CHANNELS {
            return Err(Error::structural(format!(
                "image buffer of {} values does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::structural("image buffer size"))?;
        buf.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image_id: String,
    pub class_id: ClassId,
    pub image: Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "circle" => Some(Shape::Circle),
            "square" => Some(Shape::Square),
            "triangle" => Some(Shape::Triangle),
            _ => None,
        }
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Triangle => {
                // Apex up; base at dy = r.
                if !(-r..=r).contains(&dy) {
                    return false;
                }
                let half = (dy + r) / 2.0;
                dx.abs() <= half
            }
        }
    }
}

fn color_rgb(name: &str) -> Option<[f64; 3]> {
    Some(match name {
        "red" => [0.9, 0.1, 0.1],
        "green" => [0.1, 0.85, 0.15],
        "blue" => [0.15, 0.2, 0.95],
        "yellow" => [0.9, 0.85, 0.1],
        "white" => [0.9, 0.9, 0.9],
        _ => return None,
    })
}

/// Configuration of the colored-shapes toy dataset. Class ids have the form
/// `<color>_<shape>`, e.g. `red_circle`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyShapesConfig {
    pub image_size: usize,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub train_per_class: usize,
    pub test_seen_per_class: usize,
    pub test_unseen_per_class: usize,
    /// Maximum centre offset in pixels.
    pub position_jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f64,
}

impl Default for ToyShapesConfig {
    fn default() -> Self {
        ToyShapesConfig {
            image_size: 32,
            seen: vec!["red_circle".into(), "green_circle".into(), "blue_square".into()],
            unseen: vec!["red_square".into(), "green_square".into()],
            train_per_class: 60,
            test_seen_per_class: 20,
            test_unseen_per_class: 40,
            position_jitter: 3.0,
            pixel_noise: 0.03,
        }
    }
}

/// Images plus the split and class space describing them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub space: ClassSpace,
    pub split: SplitSpec,
    pub images: HashMap<String, Image>,
}

impl Dataset {
    pub fn samples(&self, p: Partition) -> Vec<LabeledImage> {
        self.split
            .partition(p)
            .map(|r| LabeledImage {
                image_id: r.image_id.clone(),
                class_id: r.class_id.clone(),
                image: self.images[&r.image_id].clone(),
            })
            .collect()
    }
}

fn parse_toy_class(id: &str) -> Result<([f64; 3], Shape)> {
    let (color, shape) = id
        .split_once('_')
        .ok_or_else(|| Error::Config(format!("toy class {id:?} is not <color>_<shape>")))?;
    let rgb = color_rgb(color).ok_or_else(|| Error::Config(format!("toy class {id:?}: unknown color {color:?}")))?;
    let shape = Shape::parse(shape).ok_or_else(|| Error::Config(format!("toy class {id:?}: unknown shape {shape:?}")))?;
    Ok((rgb, shape))
}

/// Render one toy image.
pub fn render_shape(size: usize, rgb: [f64; 3], shape: Shape, cfg: &ToyShapesConfig, rng: &mut impl Rng) -> Image {
    let noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).expect("noise std");
    let c = size as f64 / 2.0 - 0.5;
    let j = cfg.position_jitter;
    let (cx, cy) = if j > 0.0 { (c + rng.random_range(-j..=j), c + rng.random_range(-j..=j)) } else { (c, c) };
    let r = size as f64 * 0.25 * rng.random_range(0.85..=1.15);
    let shade = rng.random_range(0.9..=1.0);
    let mut img = Image::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let inside = shape.contains(x as f64 - cx, y as f64 - cy, r);
            for ch in 0..3 {
                let base = if inside { rgb[ch] * shade } else { 0.0 };
                let v = base + if cfg.pixel_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                img.data[(y * size + x) * 3 + ch] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Generate the toy dataset deterministically from `seed`.
pub fn toy_shapes(cfg: &ToyShapesConfig, seed: u64) -> Result<Dataset> {
    let mut classes = Vec::new();
    for id in cfg.seen.iter().chain(&cfg.unseen) {
        parse_toy_class(id)?;
        classes.push((ClassId::new(id.as_str()), id.replace('_', " ")));
    }
    let unseen: Vec<ClassId> = cfg.unseen.iter().map(|s| ClassId::new(s.as_str())).collect();
    let space = ClassSpace::new(classes, &unseen)?;

    let mut records = Vec::new();
    let mut images = HashMap::new();
    for (ci, class) in space.classes().iter().enumerate() {
        let (rgb, shape) = parse_toy_class(class.id.as_str())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(ci as u64 + 1)));
        let parts: &[(Partition, usize)] = if space.is_seen(&class.id) {
            &[(Partition::TrainSeen, cfg.train_per_class), (Partition::TestSeen, cfg.test_seen_per_class)]
        } else {
            &[(Partition::TestUnseen, cfg.test_unseen_per_class)]
        };
        for &(p, n) in parts {
            for i in 0..n {
                let image_id = format!("{}_{}_{i:04}", class.id, p.as_str());
                images.insert(image_id.clone(), render_shape(cfg.image_size, rgb, shape, cfg, &mut rng));
                records.push(ImageRecord { image_id, class_id: class.id.clone(), partition: p });
            }
        }
    }
    let n_seen = cfg.seen.len();
    let n_unseen = cfg.unseen.len();
    let expected = ExpectedCounts {
        images: Some(records.len()),
        classes: Some(n_seen + n_unseen),
        seen_classes: Some(n_seen),
        unseen_classes: Some(n_unseen),
        train_seen: Some(n_seen * cfg.train_per_class),
        test_seen: Some(n_seen * cfg.test_seen_per_class),
        test_unseen: Some(n_unseen * cfg.test_unseen_per_class),
    };
    let split = SplitSpec { dataset: "toy".to_string(), records, expected };
    Ok(Dataset { space, split, images })
}
