//! Scoring and reporting for classification maps: confusion matrices,
//! overall/average accuracy and Cohen's kappa, per-class breakdown tables,
//! color-coded map rendering, and the timestep/tap ablation grid.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store;

/// Tally predictions against ground truth. Rows index the true class, columns
/// the predicted class, both 1-based in the inputs and 0-based in the matrix.
/// Empty inputs produce an all-zero matrix.
pub fn confusion_matrix(y_true: &[u32], y_pred: &[u32], n_classes: usize) -> Result<Array2<u64>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::invalid(format!(
            "{} true labels against {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if n_classes == 0 {
        return Err(Error::invalid("confusion matrix needs at least one class"));
    }
    let mut m = Array2::zeros((n_classes, n_classes));
    for (i, (&t, &p)) in y_true.iter().zip(y_pred.iter()).enumerate() {
        for (role, v) in [("true", t), ("predicted", p)] {
            if v < 1 || v as usize > n_classes {
                return Err(Error::invalid(format!(
                    "sample {i}: {role} label {v} outside 1..={n_classes}"
                )));
            }
        }
        m[[t as usize - 1, p as usize - 1]] += 1;
    }
    Ok(m)
}

/// Summary scores computed from a confusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Per-class recall. Classes with no test samples carry NaN and are
    /// excluded from the average accuracy.
    pub per_class_acc: Vec<f64>,
}

/// Overall accuracy, average accuracy, and Cohen's kappa.
///
/// The expected-agreement numerator is accumulated in integers and divided
/// exactly once, so results are reproducible down to the last bit. When
/// expected agreement reaches 1 the usual quotient is undefined; a diagonal
/// matrix scores 1 and anything else scores 0.
pub fn metrics(confusion: &Array2<u64>) -> Result<Metrics> {
    let (n, m) = confusion.dim();
    if n != m {
        return Err(Error::shape(format!(
            "confusion matrix is {n}x{m}, expected square"
        )));
    }
    let total: u64 = confusion.iter().sum();
    if total == 0 {
        return Err(Error::invalid("confusion matrix has no samples"));
    }
    let trace: u64 = (0..n).map(|i| confusion[[i, i]]).sum();
    let oa = trace as f64 / total as f64;

    let mut per_class_acc = Vec::with_capacity(n);
    let mut aa_sum = 0.0;
    let mut aa_count = 0usize;
    for i in 0..n {
        let row: u64 = confusion.row(i).sum();
        if row == 0 {
            per_class_acc.push(f64::NAN);
        } else {
            let acc = confusion[[i, i]] as f64 / row as f64;
            per_class_acc.push(acc);
            aa_sum += acc;
            aa_count += 1;
        }
    }
    // total > 0 guarantees at least one occupied row.
    let aa = aa_sum / aa_count as f64;

    let mut pe_num: u128 = 0;
    for i in 0..n {
        let row: u64 = confusion.row(i).sum();
        let col: u64 = confusion.column(i).sum();
        pe_num += row as u128 * col as u128;
    }
    let p_e = pe_num as f64 / (total as u128 * total as u128) as f64;
    let kappa = if p_e == 1.0 {
        if trace == total { 1.0 } else { 0.0 }
    } else {
        (oa - p_e) / (1.0 - p_e)
    };

    Ok(Metrics {
        oa,
        aa,
        kappa,
        per_class_acc,
    })
}

/// Everything a benchmark evaluation produces in one place.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: Array2<u64>,
    pub per_class_acc: Vec<f64>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub n_test: u64,
}

pub fn evaluate(y_true: &[u32], y_pred: &[u32], n_classes: usize) -> Result<EvalReport> {
    let confusion = confusion_matrix(y_true, y_pred, n_classes)?;
    let m = metrics(&confusion)?;
    Ok(EvalReport {
        confusion,
        per_class_acc: m.per_class_acc,
        oa: m.oa,
        aa: m.aa,
        kappa: m.kappa,
        n_test: y_true.len() as u64,
    })
}

/// Per-class accuracy table plus the three summary scores, formatted the way
/// benchmark results are usually quoted: percentages to two decimals, kappa
/// to four.
pub fn report_text(report: &EvalReport, class_names: &[String]) -> String {
    let n = report.confusion.nrows();
    let name_of = |i: usize| {
        class_names
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("class {}", i + 1))
    };
    let name_w = (0..n).map(|i| name_of(i).len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    out.push_str(&format!(
        "{:>3}  {:<name_w$}  {:>7}  {:>7}\n",
        "id", "class", "acc(%)", "test"
    ));
    for i in 0..n {
        let row: u64 = report.confusion.row(i).sum();
        let acc = report.per_class_acc[i];
        let acc_text = if acc.is_nan() {
            "-".to_string()
        } else {
            format!("{:.2}", 100.0 * acc)
        };
        out.push_str(&format!(
            "{:>3}  {:<name_w$}  {:>7}  {:>7}\n",
            i + 1,
            name_of(i),
            acc_text,
            row
        ));
    }
    out.push_str(&format!(
        "\nOA(%)  {:.2}\nAA(%)  {:.2}\nkappa  {:.4}\ntest samples  {}\n",
        100.0 * report.oa,
        100.0 * report.aa,
        report.kappa,
        report.n_test
    ));
    out
}

/// Machine-readable form of the same report. Classes with no test samples
/// serialize as null rather than NaN.
pub fn report_json(report: &EvalReport, class_names: &[String]) -> Result<String> {
    #[derive(Serialize)]
    struct Doc<'a> {
        n_classes: usize,
        n_test: u64,
        oa: f64,
        aa: f64,
        kappa: f64,
        per_class_acc: Vec<Option<f64>>,
        confusion: Vec<Vec<u64>>,
        class_names: &'a [String],
    }
    let n = report.confusion.nrows();
    let doc = Doc {
        n_classes: n,
        n_test: report.n_test,
        oa: report.oa,
        aa: report.aa,
        kappa: report.kappa,
        per_class_acc: report
            .per_class_acc
            .iter()
            .map(|&v| if v.is_nan() { None } else { Some(v) })
            .collect(),
        confusion: (0..n)
            .map(|i| report.confusion.row(i).to_vec())
            .collect(),
        class_names,
    };
    store::to_json_text(&doc)
}

/// Fixed 16-color palette for classification maps, chosen for pairwise
/// contrast. Versioned: rendered maps are compared byte for byte across
/// machines, so these values must never change. Class k uses entry k-1;
/// unlabeled pixels stay black, which is deliberately not in the palette.
pub const PALETTE_V1: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

/// Paint labeled pixels onto a black canvas and write a PNG. `pixels` holds
/// (row, col, class) with 1-based classes indexing into `palette`. Encoding
/// is byte-stable: the same inputs always produce the same file.
pub fn render_map(
    shape: (usize, usize),
    pixels: &[(usize, usize, u32)],
    palette: &[[u8; 3]],
    path: &Path,
) -> Result<()> {
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("map shape {h}x{w} has no pixels")));
    }
    let (wi, hi) = (
        u32::try_from(w).map_err(|_| Error::invalid("map width exceeds u32"))?,
        u32::try_from(h).map_err(|_| Error::invalid("map height exceeds u32"))?,
    );
    let mut img = image::RgbImage::new(wi, hi);
    for &(r, c, class) in pixels {
        if r >= h || c >= w {
            return Err(Error::invalid(format!(
                "pixel ({r}, {c}) outside a {h}x{w} map"
            )));
        }
        if class == 0 || class as usize > palette.len() {
            return Err(Error::invalid(format!(
                "class {class} has no palette entry; palette covers 1..={}",
                palette.len()
            )));
        }
        img.put_pixel(c as u32, r as u32, image::Rgb(palette[class as usize - 1]));
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::container(format!("png encode {}: {e}", path.display())))
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub timestep: usize,
    pub feature_index: usize,
    pub fraction: f64,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CellOutcome {
    Ok { oa: f64, aa: f64, kappa: f64 },
    Failed { error: String },
}

/// Run `run_cell(timestep, feature_index, fraction)` over the full grid and
/// collect one cell per combination. The walk is feature index outermost,
/// then timestep, then fraction, matching [`ablation_table`] row order. A
/// failing cell records its error text in place and the sweep continues.
///
/// Full-scale reference runs put Indian Pines and Pavia University at their
/// best near (t=5, f=1), around 99.1 and 99.7 OA, while Salinas is nearly
/// flat across the grid with its best near (t=10, f=0) at about 99.9.
pub fn ablate(
    timesteps: &[usize],
    feature_indices: &[usize],
    fractions: &[f64],
    mut run_cell: impl FnMut(usize, usize, f64) -> Result<(f64, f64, f64)>,
) -> Vec<AblationCell> {
    let mut cells =
        Vec::with_capacity(timesteps.len() * feature_indices.len() * fractions.len());
    for &f in feature_indices {
        for &t in timesteps {
            for &fraction in fractions {
                let outcome = match run_cell(t, f, fraction) {
                    Ok((oa, aa, kappa)) => CellOutcome::Ok { oa, aa, kappa },
                    Err(e) => CellOutcome::Failed {
                        error: e.to_string(),
                    },
                };
                cells.push(AblationCell {
                    timestep: t,
                    feature_index: f,
                    fraction,
                    outcome,
                });
            }
        }
    }
    cells
}

/// Human-readable grid, grouped by feature index: the index is printed once
/// per group and left blank on continuation rows.
pub fn ablation_table(cells: &[AblationCell]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<13}  {:<8}  {:<8}  {:>7}  {:>7}  {:>7}\n",
        "feature index", "timestep", "fraction", "OA(%)", "AA(%)", "kappa"
    ));
    let mut last_f = None;
    for cell in cells {
        let f_text = if last_f == Some(cell.feature_index) {
            String::new()
        } else {
            cell.feature_index.to_string()
        };
        last_f = Some(cell.feature_index);
        let frac_text = format!("{:.2}", cell.fraction);
        match &cell.outcome {
            CellOutcome::Ok { oa, aa, kappa } => out.push_str(&format!(
                "{:<13}  {:<8}  {:<8}  {:>7.2}  {:>7.2}  {:>7.4}\n",
                f_text,
                cell.timestep,
                frac_text,
                100.0 * oa,
                100.0 * aa,
                kappa
            )),
            CellOutcome::Failed { error } => out.push_str(&format!(
                "{:<13}  {:<8}  {:<8}  failed: {error}\n",
                f_text, cell.timestep, frac_text
            )),
        }
    }
    out
}

/// CSV rows for the same grid. Failed cells keep their coordinates with
/// empty score fields; error text lives in the table and the cell JSON.
pub fn ablation_rows(cells: &[AblationCell]) -> String {
    let mut out = String::from("timestep,feature_index,fraction,status,oa,aa,kappa\n");
    for cell in cells {
        match &cell.outcome {
            CellOutcome::Ok { oa, aa, kappa } => out.push_str(&format!(
                "{},{},{},ok,{oa},{aa},{kappa}\n",
                cell.timestep, cell.feature_index, cell.fraction
            )),
            CellOutcome::Failed { .. } => out.push_str(&format!(
                "{},{},{},failed,,,\n",
                cell.timestep, cell.feature_index, cell.fraction
            )),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight-off-the-definition scorer working from label slices, with no
    /// confusion matrix in sight. Divisions and accumulation order mirror
    /// `metrics` so agreement must be exact, not approximate.
    fn brute_force_scores(y_true: &[u32], y_pred: &[u32], k: usize) -> (f64, f64, f64) {
        let n = y_true.len();
        let correct = y_true
            .iter()
            .zip(y_pred)
            .filter(|(t, p)| t == p)
            .count();
        let oa = correct as f64 / n as f64;

        let mut aa_sum = 0.0;
        let mut aa_count = 0usize;
        for c in 1..=k as u32 {
            let class_total = y_true.iter().filter(|&&t| t == c).count();
            if class_total == 0 {
                continue;
            }
            let class_hits = y_true
                .iter()
                .zip(y_pred)
                .filter(|(&t, &p)| t == c && p == c)
                .count();
            aa_sum += class_hits as f64 / class_total as f64;
            aa_count += 1;
        }
        let aa = aa_sum / aa_count as f64;

        let mut pe_num: u128 = 0;
        for c in 1..=k as u32 {
            let row = y_true.iter().filter(|&&t| t == c).count() as u128;
            let col = y_pred.iter().filter(|&&p| p == c).count() as u128;
            pe_num += row * col;
        }
        let p_e = pe_num as f64 / (n as u128 * n as u128) as f64;
        let kappa = if p_e == 1.0 {
            if correct == n { 1.0 } else { 0.0 }
        } else {
            (oa - p_e) / (1.0 - p_e)
        };
        (oa, aa, kappa)
    }

    #[test]
    fn confusion_matches_a_hand_tally() {
        let m = confusion_matrix(&[1, 1, 2, 2, 2], &[1, 2, 2, 2, 1], 2).unwrap();
        assert_eq!(m, ndarray::arr2(&[[1u64, 1], [1, 2]]));
    }

    #[test]
    fn perfect_predictions_fill_the_diagonal() {
        let labels = [3u32, 1, 2, 3, 3, 1];
        let m = confusion_matrix(&labels, &labels, 3).unwrap();
        assert_eq!(m, ndarray::arr2(&[[2u64, 0, 0], [0, 1, 0], [0, 0, 3]]));
        let s = metrics(&m).unwrap();
        assert_eq!(s.oa, 1.0);
        assert_eq!(s.aa, 1.0);
        assert_eq!(s.kappa, 1.0);
    }

    #[test]
    fn empty_inputs_tally_to_zero_and_refuse_to_score() {
        let m = confusion_matrix(&[], &[], 4).unwrap();
        assert_eq!(m.sum(), 0);
        let err = metrics(&m).unwrap_err().to_string();
        assert!(err.contains("no samples"), "{err}");
    }

    #[test]
    fn bad_labels_and_shapes_are_rejected() {
        let err = confusion_matrix(&[1, 2], &[1], 2).unwrap_err().to_string();
        assert!(err.contains("2 true labels against 1"), "{err}");

        let err = confusion_matrix(&[1, 0], &[1, 1], 2).unwrap_err().to_string();
        assert!(err.contains("sample 1") && err.contains("true label 0"), "{err}");

        let err = confusion_matrix(&[1, 2], &[1, 3], 2).unwrap_err().to_string();
        assert!(err.contains("predicted label 3 outside 1..=2"), "{err}");

        let err = metrics(&Array2::<u64>::zeros((2, 3))).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
    }

    #[test]
    fn worked_example_scores_exactly() {
        // [[2,1],[1,2]]: OA 4/6, expected agreement (3*3 + 3*3)/36 = 1/2,
        // kappa (2/3 - 1/2)/(1/2) = 1/3.
        let m = ndarray::arr2(&[[2u64, 1], [1, 2]]);
        let s = metrics(&m).unwrap();
        assert_eq!(s.oa, 4.0 / 6.0);
        assert_eq!(s.aa, (2.0 / 3.0 + 2.0 / 3.0) / 2.0);
        assert_eq!(s.kappa, (4.0 / 6.0 - 0.5) / 0.5);
        assert_eq!(format!("{:.4}", s.oa), "0.6667");
        assert_eq!(format!("{:.4}", s.kappa), "0.3333");
    }

    #[test]
    fn absent_classes_carry_nan_and_leave_averages_alone() {
        let padded = metrics(&ndarray::arr2(&[[1u64, 1, 0], [0, 2, 0], [0, 0, 0]])).unwrap();
        let plain = metrics(&ndarray::arr2(&[[1u64, 1], [0, 2]])).unwrap();
        assert!(padded.per_class_acc[2].is_nan());
        assert_eq!(padded.per_class_acc[0], 0.5);
        assert_eq!(padded.per_class_acc[1], 1.0);
        assert_eq!(padded.oa, plain.oa);
        assert_eq!(padded.aa, plain.aa);
        assert_eq!(padded.aa, 0.75);
    }

    #[test]
    fn degenerate_agreement_uses_the_diagonal_rule() {
        // Every sample in one cell: expected agreement is exactly 1.
        let diag = metrics(&ndarray::arr2(&[[0u64, 0], [0, 5]])).unwrap();
        assert_eq!(diag.kappa, 1.0);
        let off = metrics(&ndarray::arr2(&[[0u64, 5], [0, 0]])).unwrap();
        assert_eq!(off.kappa, 0.0);
        assert_eq!(off.oa, 0.0);
    }

    #[test]
    fn scores_match_a_brute_force_oracle_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(90210);
        for trial in 0..1000 {
            let k = rng.random_range(1..=6usize);
            let n = rng.random_range(1..=40usize);
            let y_true: Vec<u32> = (0..n).map(|_| rng.random_range(1..=k as u32)).collect();
            let y_pred: Vec<u32> = (0..n)
                .map(|i| {
                    // Bias toward agreement so perfect runs actually occur.
                    if rng.random_range(0..4) > 0 {
                        y_true[i]
                    } else {
                        rng.random_range(1..=k as u32)
                    }
                })
                .collect();
            let report = evaluate(&y_true, &y_pred, k).unwrap();
            let (oa, aa, kappa) = brute_force_scores(&y_true, &y_pred, k);
            assert_eq!(report.oa, oa, "trial {trial}");
            assert_eq!(report.aa, aa, "trial {trial}");
            assert_eq!(report.kappa, kappa, "trial {trial}");

            assert!((0.0..=1.0).contains(&report.oa));
            assert!((0.0..=1.0).contains(&report.aa));
            assert!((-1.0..=1.0).contains(&report.kappa), "trial {trial}");
            let perfect = y_true == y_pred;
            assert_eq!(report.kappa == 1.0, perfect, "trial {trial}");
        }
    }

    #[test]
    fn report_text_lists_classes_and_summary_lines() {
        let report = evaluate(&[1, 1, 2, 2, 2], &[1, 2, 2, 2, 1], 3).unwrap();
        let names = vec!["corn".to_string(), "woods".to_string()];
        let text = report_text(&report, &names);
        assert!(text.contains("corn"), "{text}");
        assert!(text.contains("woods"), "{text}");
        // Third class has no name supplied and no samples.
        assert!(text.contains("class 3"), "{text}");
        assert!(text.lines().any(|l| l.contains("class 3") && l.contains('-')));
        assert!(text.contains("OA(%)  60.00"), "{text}");
        // Marginals (2,3,0) both ways: p_e = 13/25, kappa = (0.6-0.52)/0.48.
        assert!(text.contains("kappa  0.1667"), "{text}");
        assert!(text.contains("test samples  5"), "{text}");

        let json = report_json(&report, &names).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(doc["n_classes"], 3);
        assert_eq!(doc["per_class_acc"][2], serde_json::Value::Null);
        assert_eq!(doc["confusion"][1][1], 2);
    }

    #[test]
    fn rendered_map_has_exactly_the_painted_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.png");
        render_map((4, 5), &[(1, 3, 2)], &PALETTE_V1, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (5, 4));
        let mut colored = 0;
        for (x, y, px) in img.enumerate_pixels() {
            if px.0 == [0, 0, 0] {
                continue;
            }
            colored += 1;
            assert_eq!((x, y), (3, 1));
            assert_eq!(px.0, PALETTE_V1[1]);
        }
        assert_eq!(colored, 1);
    }

    #[test]
    fn map_color_histogram_matches_the_label_histogram() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w) = (9usize, 7usize);
        let mut pixels = Vec::new();
        let mut wanted = std::collections::HashMap::new();
        for r in 0..h {
            for c in 0..w {
                if rng.random_range(0..3) == 0 {
                    continue;
                }
                let class = rng.random_range(1..=16u32);
                *wanted.entry(PALETTE_V1[class as usize - 1]).or_insert(0u64) += 1;
                pixels.push((r, c, class));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.png");
        render_map((h, w), &pixels, &PALETTE_V1, &path).unwrap();

        let img = image::open(&path).unwrap().to_rgb8();
        let mut got = std::collections::HashMap::new();
        for px in img.pixels() {
            if px.0 != [0, 0, 0] {
                *got.entry(px.0).or_insert(0u64) += 1;
            }
        }
        assert_eq!(got, wanted);

        // The histogram check above only works because every palette entry
        // is distinct and none is black.
        let mut seen = std::collections::HashSet::new();
        for color in PALETTE_V1 {
            assert_ne!(color, [0, 0, 0]);
            assert!(seen.insert(color));
        }
    }

    #[test]
    fn same_pixels_render_to_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = [(0usize, 0usize, 1u32), (2, 2, 5), (3, 1, 16)];
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        render_map((4, 4), &pixels, &PALETTE_V1, &a).unwrap();
        render_map((4, 4), &pixels, &PALETTE_V1, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn render_rejects_stray_pixels_and_unknown_classes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.png");
        let err = render_map((4, 4), &[(4, 0, 1)], &PALETTE_V1, &path)
            .unwrap_err()
            .to_string();
        assert!(err.contains("(4, 0)"), "{err}");

        let err = render_map((4, 4), &[(0, 0, 17)], &PALETTE_V1, &path)
            .unwrap_err()
            .to_string();
        assert!(err.contains("class 17") && err.contains("1..=16"), "{err}");

        let err = render_map((4, 4), &[(0, 0, 0)], &PALETTE_V1, &path)
            .unwrap_err()
            .to_string();
        assert!(err.contains("class 0"), "{err}");

        let err = render_map((0, 4), &[], &PALETTE_V1, &path)
            .unwrap_err()
            .to_string();
        assert!(err.contains("no pixels"), "{err}");
    }

    #[test]
    fn ablation_walks_the_grid_in_table_order_and_survives_failures() {
        let cells = ablate(&[5, 10], &[0, 1, 2], &[1.0], |t, f, frac| {
            if t == 10 && f == 0 {
                Err(Error::invalid("solver fell over"))
            } else {
                Ok((f as f64 / 10.0, frac, t as f64 / 100.0))
            }
        });
        assert_eq!(cells.len(), 6);
        let coords: Vec<(usize, usize)> = cells
            .iter()
            .map(|c| (c.feature_index, c.timestep))
            .collect();
        assert_eq!(coords, [(0, 5), (0, 10), (1, 5), (1, 10), (2, 5), (2, 10)]);

        let failed: Vec<_> = cells
            .iter()
            .filter(|c| matches!(c.outcome, CellOutcome::Failed { .. }))
            .collect();
        assert_eq!(failed.len(), 1);
        assert_eq!((failed[0].timestep, failed[0].feature_index), (10, 0));
        match &failed[0].outcome {
            CellOutcome::Failed { error } => assert!(error.contains("solver fell over")),
            _ => unreachable!(),
        }
        match cells[2].outcome {
            CellOutcome::Ok { oa, aa, kappa } => {
                assert_eq!((oa, aa, kappa), (0.1, 1.0, 0.05));
            }
            _ => panic!("cell (f=1, t=5) should have run"),
        }
    }

    #[test]
    fn ablation_tables_group_by_feature_index() {
        let cells = ablate(&[5, 10], &[0, 1], &[1.0], |t, f, _| {
            if (t, f) == (10, 1) {
                Err(Error::invalid("boom"))
            } else {
                Ok((0.9, 0.8, 0.7))
            }
        });
        let table = ablation_table(&cells);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].contains("feature index"));
        // Group label appears once, continuation rows leave it blank.
        assert!(lines[1].trim_start().starts_with('0'));
        assert!(lines[2].starts_with(' '));
        assert!(lines[3].trim_start().starts_with('1'));
        assert!(lines[4].contains("failed: invalid argument: boom"), "{table}");

        let csv = ablation_rows(&cells);
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0], "timestep,feature_index,fraction,status,oa,aa,kappa");
        assert_eq!(rows[1], "5,0,1,ok,0.9,0.8,0.7");
        assert_eq!(rows[4], "10,1,1,failed,,,");
    }

    #[test]
    fn degenerate_single_cell_grid_works() {
        let cells = ablate(&[400], &[2], &[0.25], |t, f, frac| {
            Ok((t as f64, f as f64, frac))
        });
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].fraction, 0.25);
        match cells[0].outcome {
            CellOutcome::Ok { oa, aa, kappa } => assert_eq!((oa, aa, kappa), (400.0, 2.0, 0.25)),
            _ => unreachable!(),
        }
    }
}
