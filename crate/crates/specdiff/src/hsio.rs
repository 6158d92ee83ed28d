//! Hyperspectral cube I/O: loading named-array containers, normalization,
//! train/test splits over labeled pixels, and patch extraction with mirror
//! boundary handling. Label 0 always means unlabeled; classes are 1..=n.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{NpzReader, NpzWriter};

#[derive(Debug, Clone)]
pub struct LabeledCube {
    /// Reflectance values, [H, W, B].
    pub data: Array3<f64>,
    /// Class ids, [H, W]; 0 = unlabeled.
    pub labels: Array2<u32>,
    /// One name per class, 1-indexed (class_names[0] names class 1).
    pub class_names: Vec<String>,
    pub name: String,
}

impl LabeledCube {
    pub fn new(
        data: Array3<f64>,
        labels: Array2<u32>,
        class_names: Vec<String>,
        name: String,
    ) -> Result<Self> {
        let (h, w, _) = data.dim();
        if labels.dim() != (h, w) {
            return Err(Error::shape(format!(
                "data is [{h}, {w}, {}] but labels is [{}, {}]",
                data.dim().2,
                labels.dim().0,
                labels.dim().1
            )));
        }
        let n_classes = labels.iter().copied().max().unwrap_or(0) as usize;
        let class_names = if class_names.is_empty() {
            (1..=n_classes).map(|c| format!("class {c}")).collect()
        } else {
            if class_names.len() < n_classes {
                return Err(Error::invalid(format!(
                    "{} class names given but labels reach class {n_classes}",
                    class_names.len()
                )));
            }
            class_names
        };
        Ok(LabeledCube {
            data,
            labels,
            class_names,
            name,
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn bands(&self) -> usize {
        self.data.dim().2
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v > 0).count()
    }
}

/// Load a cube from named-array containers. `data_path` must hold a 3-D
/// "data" entry; `labels_path` a 2-D "labels" entry. The two paths may point
/// at the same archive. Class names come from an optional `<stem>.classes.txt`
/// sidecar next to the data container, one name per line, first line = class 1.
pub fn load_cube(data_path: &Path, labels_path: &Path) -> Result<LabeledCube> {
    let (dshape, draw) = NpzReader::open(data_path)?.f64("data")?;
    if dshape.len() != 3 {
        return Err(Error::shape(format!(
            "data entry in {} is {}-D, expected [H, W, B]",
            data_path.display(),
            dshape.len()
        )));
    }
    let (lshape, lraw) = NpzReader::open(labels_path)?.u32("labels")?;
    if lshape.len() != 2 {
        return Err(Error::shape(format!(
            "labels entry in {} is {}-D, expected [H, W]",
            labels_path.display(),
            lshape.len()
        )));
    }
    let data = Array3::from_shape_vec((dshape[0], dshape[1], dshape[2]), draw)
        .expect("shape/data length agree by construction");
    let labels = Array2::from_shape_vec((lshape[0], lshape[1]), lraw)
        .expect("shape/data length agree by construction");

    let class_names = read_class_sidecar(data_path)?;
    let name = data_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cube".to_string());
    LabeledCube::new(data, labels, class_names, name)
}

fn read_class_sidecar(data_path: &Path) -> Result<Vec<String>> {
    let sidecar = data_path.with_extension("classes.txt");
    if !sidecar.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&sidecar)?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

pub fn save_cube(cube: &LabeledCube, path: &Path) -> Result<()> {
    let mut w = NpzWriter::create(path)?;
    let (h, wd, b) = cube.data.dim();
    w.add_f64(
        "data",
        &[h, wd, b],
        cube.data.as_slice().expect("cube data is contiguous"),
    )?;
    w.add_u32(
        "labels",
        &[h, wd],
        cube.labels.as_slice().expect("labels are contiguous"),
    )?;
    w.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormalizeMode {
    #[default]
    #[serde(rename = "per-band-minmax")]
    PerBandMinMax,
    #[serde(rename = "global-minmax")]
    GlobalMinMax,
    #[serde(rename = "zscore")]
    ZScore,
}

impl std::fmt::Display for NormalizeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            NormalizeMode::PerBandMinMax => "per-band-minmax",
            NormalizeMode::GlobalMinMax => "global-minmax",
            NormalizeMode::ZScore => "zscore",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for NormalizeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-band-minmax" => Ok(NormalizeMode::PerBandMinMax),
            "global-minmax" => Ok(NormalizeMode::GlobalMinMax),
            "zscore" => Ok(NormalizeMode::ZScore),
            other => Err(Error::invalid(format!(
                "unknown normalization {other:?}; expected per-band-minmax, global-minmax, or zscore"
            ))),
        }
    }
}

/// Normalize band values. Constant bands (and zero-variance bands under
/// zscore) map to all zeros rather than dividing by a degenerate range.
pub fn normalize(mut cube: LabeledCube, mode: NormalizeMode) -> Result<LabeledCube> {
    let bad: Vec<usize> = (0..cube.bands())
        .filter(|&b| {
            cube.data
                .index_axis(ndarray::Axis(2), b)
                .iter()
                .any(|v| !v.is_finite())
        })
        .collect();
    if !bad.is_empty() {
        return Err(Error::Numeric(format!(
            "non-finite values in bands {bad:?}"
        )));
    }

    let bands = cube.bands();
    match mode {
        NormalizeMode::PerBandMinMax => {
            for b in 0..bands {
                let mut band = cube.data.index_axis_mut(ndarray::Axis(2), b);
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &v in band.iter() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                let range = hi - lo;
                if range == 0.0 {
                    band.fill(0.0);
                } else {
                    band.mapv_inplace(|v| (v - lo) / range);
                }
            }
        }
        NormalizeMode::GlobalMinMax => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in cube.data.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let range = hi - lo;
            if range == 0.0 {
                cube.data.fill(0.0);
            } else {
                cube.data.mapv_inplace(|v| (v - lo) / range);
            }
        }
        NormalizeMode::ZScore => {
            for b in 0..bands {
                let mut band = cube.data.index_axis_mut(ndarray::Axis(2), b);
                let n = band.len() as f64;
                let mean = band.iter().sum::<f64>() / n;
                let var = band.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let std = var.sqrt();
                if std == 0.0 {
                    band.fill(0.0);
                } else {
                    band.mapv_inplace(|v| (v - mean) / std);
                }
            }
        }
    }
    Ok(cube)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitSpec {
    /// Training count per class, index 0 = class 1; the rest becomes test.
    PerClassCounts(Vec<usize>),
    /// Per-class training fraction in [0, 1]; nonzero fractions keep at least
    /// one sample per present class.
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: u32,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSplit {
    pub train: Vec<(usize, usize, u32)>,
    pub test: Vec<(usize, usize, u32)>,
    pub seed: u64,
    pub per_class_counts: Vec<ClassCount>,
}

impl SampleSplit {
    /// Line-oriented audit form: `class_id,row,col,split`.
    pub fn to_audit_text(&self) -> String {
        let mut out = String::new();
        for &(r, c, class) in &self.train {
            out.push_str(&format!("{class},{r},{c},train\n"));
        }
        for &(r, c, class) in &self.test {
            out.push_str(&format!("{class},{r},{c},test\n"));
        }
        out
    }
}

pub fn split_samples(cube: &LabeledCube, spec: &SplitSpec, seed: u64) -> Result<SampleSplit> {
    let n_classes = cube.n_classes();
    if n_classes == 0 {
        return Err(Error::invalid("cube has no labeled pixels to split"));
    }
    // Row-major scan keeps the pre-shuffle ordering deterministic.
    let mut per_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_classes];
    for ((r, c), &label) in cube.labels.indexed_iter() {
        if label > 0 {
            per_class[label as usize - 1].push((r, c));
        }
    }

    let train_counts: Vec<usize> = match spec {
        SplitSpec::PerClassCounts(counts) => {
            if counts.len() != n_classes {
                return Err(Error::invalid(format!(
                    "{} per-class counts given but cube has {n_classes} classes",
                    counts.len()
                )));
            }
            for (i, (&want, coords)) in counts.iter().zip(&per_class).enumerate() {
                if want > coords.len() {
                    return Err(Error::invalid(format!(
                        "class {} has {} labeled pixels, {} requested (short by {})",
                        i + 1,
                        coords.len(),
                        want,
                        want - coords.len()
                    )));
                }
            }
            counts.clone()
        }
        SplitSpec::Fraction(f) => {
            if !(0.0..=1.0).contains(f) {
                return Err(Error::invalid(format!(
                    "split fraction {f} outside [0, 1]"
                )));
            }
            per_class
                .iter()
                .map(|coords| {
                    let n = coords.len();
                    if *f == 0.0 || n == 0 {
                        0
                    } else {
                        ((*f * n as f64).floor() as usize).clamp(1, n)
                    }
                })
                .collect()
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut per_class_counts = Vec::with_capacity(n_classes);
    for (idx, mut coords) in per_class.into_iter().enumerate() {
        let class = idx as u32 + 1;
        coords.shuffle(&mut rng);
        let n_train = train_counts[idx];
        for (i, (r, c)) in coords.iter().copied().enumerate() {
            if i < n_train {
                train.push((r, c, class));
            } else {
                test.push((r, c, class));
            }
        }
        per_class_counts.push(ClassCount {
            class,
            n_train,
            n_test: coords.len() - n_train,
        });
    }
    Ok(SampleSplit {
        train,
        test,
        seed,
        per_class_counts,
    })
}

#[derive(Debug, Clone)]
pub struct Patch {
    /// [P, P, B]; index (P/2, P/2) holds the center pixel.
    pub values: Array3<f64>,
    pub center: (usize, usize),
    pub timestep_tag: Option<usize>,
}

/// Reflect an out-of-range index about the array edges (edge samples are not
/// duplicated). Valid for any offset thanks to the 2n-2 period.
fn reflect_index(q: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = q.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub fn extract_patch(cube: &LabeledCube, coord: (usize, usize), p: usize) -> Result<Patch> {
    let (h, w, bands) = cube.data.dim();
    let (r, c) = coord;
    if r >= h || c >= w {
        return Err(Error::invalid(format!(
            "coordinate ({r}, {c}) outside cube [{h}, {w}]"
        )));
    }
    if p == 0 {
        return Err(Error::invalid("patch size must be at least 1"));
    }
    if p > 2 * h.min(w) {
        return Err(Error::invalid(format!(
            "patch size {p} exceeds 2*min(H, W) = {}; mirror padding undefined",
            2 * h.min(w)
        )));
    }
    let half = (p / 2) as isize;
    let top = r as isize - half;
    let left = c as isize - half;
    let values = Array3::from_shape_fn((p, p, bands), |(i, j, b)| {
        let rr = reflect_index(top + i as isize, h);
        let cc = reflect_index(left + j as isize, w);
        cube.data[[rr, cc, b]]
    });
    Ok(Patch {
        values,
        center: coord,
        timestep_tag: None,
    })
}

/// Draw patch center positions uniformly over the full scene. Labels play no
/// part: pretraining consumes every pixel.
pub fn sample_patch_positions(
    h: usize,
    w: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| {
            let r = rng.random_range(0..h);
            let c = rng.random_range(0..w);
            (r, c)
        })
        .collect()
}

pub fn sample_unlabeled_patches(
    cube: &LabeledCube,
    count: usize,
    p: usize,
    seed: u64,
) -> Result<Vec<Patch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_patch_positions(cube.height(), cube.width(), count, &mut rng)
        .into_iter()
        .map(|coord| extract_patch(cube, coord, p))
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 48,
            width: 48,
            bands: 8,
            n_classes: 4,
            seed: 7,
        }
    }
}

/// Deterministic synthetic scene: a block mosaic of classes, each class a
/// Gaussian bump spectrum at its own band position plus mild noise. Classes
/// are separable by construction, which end-to-end checks rely on.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LabeledCube> {
    let SyntheticSpec {
        height: h,
        width: w,
        bands,
        n_classes,
        seed,
    } = *spec;
    if h == 0 || w == 0 || bands == 0 || n_classes == 0 {
        return Err(Error::invalid("synthetic dimensions must be positive"));
    }
    let block = (h.min(w) / n_classes).max(1);
    let labels = Array2::from_shape_fn((h, w), |(r, c)| {
        ((r / block + c / block) % n_classes) as u32 + 1
    });

    let centers: Vec<f64> = (0..n_classes)
        .map(|k| (k as f64 + 0.5) * bands as f64 / n_classes as f64 - 0.5)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Array3::zeros((h, w, bands));
    for r in 0..h {
        for c in 0..w {
            let class = labels[[r, c]] as usize - 1;
            for b in 0..bands {
                let d = b as f64 - centers[class];
                let mean = (-0.5 * d * d).exp();
                let noise: f64 = rng.sample(StandardNormal);
                data[[r, c, b]] = mean + 0.05 * noise;
            }
        }
    }
    LabeledCube::new(
        data,
        labels,
        (1..=n_classes).map(|c| format!("class {c}")).collect(),
        "synthetic".to_string(),
    )
}

/// Published per-class sample counts for the standard splits of the three
/// benchmark scenes. The widely circulated tables print grand totals that
/// disagree with their own rows; the rows are authoritative here, and the
/// totals exposed below are their sums.
#[derive(Debug, Clone, Copy)]
pub struct BenchmarkSplit {
    pub name: &'static str,
    pub class_names: &'static [&'static str],
    pub train: &'static [usize],
    pub test: &'static [usize],
}

impl BenchmarkSplit {
    pub fn train_total(&self) -> usize {
        self.train.iter().sum()
    }

    pub fn test_total(&self) -> usize {
        self.test.iter().sum()
    }

    pub fn by_name(name: &str) -> Option<&'static BenchmarkSplit> {
        match name {
            "indian_pines" => Some(&INDIAN_PINES),
            "pavia_university" => Some(&PAVIA_UNIVERSITY),
            "salinas" => Some(&SALINAS),
            _ => None,
        }
    }
}

pub const INDIAN_PINES: BenchmarkSplit = BenchmarkSplit {
    name: "indian_pines",
    class_names: &[
        "Alfalfa",
        "Corn-notill",
        "Corn-mintill",
        "Corn",
        "Grass-pasture",
        "Grass-trees",
        "Grass-pasture-mowed",
        "Hay-windrowed",
        "Oats",
        "Soybean-notill",
        "Soybean-mintill",
        "Soybean-clean",
        "Wheat",
        "Woods",
        "Buildings-Grass-Trees-Drives",
        "Stone-Steel-Towers",
    ],
    train: &[5, 143, 83, 24, 48, 73, 3, 48, 2, 97, 245, 59, 20, 126, 39, 9],
    test: &[
        41, 1285, 747, 213, 435, 657, 25, 430, 18, 875, 2210, 534, 185, 1139, 347, 84,
    ],
};

pub const PAVIA_UNIVERSITY: BenchmarkSplit = BenchmarkSplit {
    name: "pavia_university",
    class_names: &[
        "Asphalt",
        "Meadows",
        "Gravel",
        "Trees",
        "Painted metal sheets",
        "Bare Soil",
        "Bitumen",
        "Self-Blocking Bricks",
        "Shadows",
    ],
    train: &[332, 932, 105, 153, 67, 251, 67, 184, 47],
    test: &[6299, 17717, 1994, 2911, 1278, 4778, 1263, 3498, 900],
};

pub const SALINAS: BenchmarkSplit = BenchmarkSplit {
    name: "salinas",
    class_names: &[
        "Brocoli_green_weeds_1",
        "Brocoli_green_weeds_2",
        "Fallow",
        "Fallow_rough_plow",
        "Fallow_smooth",
        "Stubble",
        "Celery",
        "Grapes_untrained",
        "Soil_vinyard_develop",
        "Corn_senesced_green_weeds",
        "Lettuce_romaine_4wk",
        "Lettuce_romaine_5wk",
        "Lettuce_romaine_6wk",
        "Lettuce_romaine_7wk",
        "Vinyard_untrained",
        "Vinyard_vertical_trellis",
    ],
    train: &[
        100, 186, 98, 69, 133, 197, 178, 563, 310, 163, 53, 96, 45, 53, 363, 90,
    ],
    test: &[
        1909, 3540, 1878, 1325, 2545, 3762, 3401, 10708, 5893, 3115, 1015, 1831, 871, 1017, 6905,
        1717,
    ],
};

/// Class histogram of a label raster, keyed by class id (0 excluded).
pub fn class_histogram(labels: &Array2<u32>) -> BTreeMap<u32, usize> {
    let mut hist = BTreeMap::new();
    for &v in labels.iter() {
        if v > 0 {
            *hist.entry(v).or_insert(0) += 1;
        }
    }
    hist
}
