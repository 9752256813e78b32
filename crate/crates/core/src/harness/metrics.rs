//! Evaluation metrics on decoded scenes.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::scene::{bounding_box, component, dominant_colour};
use crate::data::{decode_bbox, edge_map, iou, ConditionSet, ImageTokens, ModalityKind, SceneKnobs};
use crate::error::{Error, Result};

/// Minimum IoU between a specified box and a decoded region.
pub const BBOX_IOU_THRESHOLD: f64 = 0.5;

/// Fraction of each present condition that the decoded image satisfies.
///
/// Grid modalities are scored over their covered cells, boxes per specified
/// object, text as 0 or 1 on the dominant colour. A bbox condition that lists
/// no objects is vacuous and omitted.
pub fn constraint_accuracy(image: &ImageTokens, conds: &ConditionSet, knobs: &SceneKnobs) -> Result<BTreeMap<ModalityKind, f64>> {
    let grid = image.decode_exact()?;
    let (h, w) = (knobs.height, knobs.width);
    if grid.len() != h * w || (image.height, image.width) != (h, w) {
        return Err(Error::Dimension { op: "constraint_accuracy", lhs: vec![image.height, image.width], rhs: vec![h, w] });
    }
    if let Some(&bad) = grid.iter().find(|&&v| v >= knobs.palette) {
        return Err(Error::Index { what: "palette".into(), index: bad, size: knobs.palette });
    }
    let mut out = BTreeMap::new();
    for (&kind, seq) in &conds.present {
        let acc = match kind {
            ModalityKind::Text => f64::from(u8::from(dominant_colour(&grid, knobs.palette) == seq.tokens[0])),
            ModalityKind::Segmentation | ModalityKind::Sketch => {
                let unknown = kind.unknown_token(knobs).expect("grid modality");
                let observed = if kind == ModalityKind::Sketch { edge_map(&grid, h, w) } else { grid.clone() };
                let covered: Vec<usize> = (0..h * w)
                    .filter(|&i| match conds.coverage.get(&kind) {
                        Some(c) => c.cells[i],
                        None => seq.tokens[i] != unknown,
                    })
                    .collect();
                if covered.is_empty() {
                    continue;
                }
                covered.iter().filter(|&&i| observed[i] == seq.tokens[i]).count() as f64 / covered.len() as f64
            }
            ModalityKind::BBox => {
                let boxes = decode_bbox(seq, knobs)?;
                if boxes.is_empty() {
                    continue;
                }
                let regions = colour_regions(&grid, h, w);
                let hit = boxes
                    .iter()
                    .filter(|b| {
                        regions.iter().any(|(cat, bb)| *cat == b.category && iou(*bb, (b.top_left, b.bottom_right)) >= BBOX_IOU_THRESHOLD)
                    })
                    .count();
                hit as f64 / boxes.len() as f64
            }
        };
        out.insert(kind, acc);
    }
    Ok(out)
}

type Rect = ((usize, usize), (usize, usize));

/// Bounding box of every 4-connected single-colour region.
fn colour_regions(grid: &[usize], h: usize, w: usize) -> Vec<(usize, Rect)> {
    let mut seen = vec![false; grid.len()];
    let mut out = Vec::new();
    for start in 0..grid.len() {
        if seen[start] {
            continue;
        }
        let comp = component(grid, h, w, start);
        for &i in &comp {
            seen[i] = true;
        }
        out.push((grid[start], bounding_box(&comp, w)));
    }
    out
}

/// Per-colour cell counts followed by the number of edge cells.
pub fn scene_features(grid: &[usize], knobs: &SceneKnobs) -> Vec<f64> {
    let mut f = vec![0.0; knobs.palette + 1];
    for &v in grid {
        f[v] += 1.0;
    }
    f[knobs.palette] = edge_map(grid, knobs.height, knobs.width).iter().sum::<usize>() as f64;
    f
}

/// Sample mean and unbiased covariance.
pub fn moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if features.len() < 2 {
        return Err(Error::contract(format!("need at least 2 feature vectors, got {}", features.len())));
    }
    let d = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(Error::Dimension { op: "moments", lhs: vec![d], rhs: vec![f.len()] });
    }
    let n = features.len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// The cross term uses `Tr((A^{1/2} S_b A^{1/2})^{1/2})` with `A = S_a`,
/// which keeps every square root symmetric.
pub fn frechet_from_moments(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    if mu_a.len() != mu_b.len() || cov_a.shape() != cov_b.shape() || cov_a.nrows() != mu_a.len() {
        return Err(Error::Dimension { op: "frechet_distance", lhs: vec![mu_a.len()], rhs: vec![mu_b.len()] });
    }
    let ra = psd_sqrt(cov_a);
    let cross = psd_sqrt(&(&ra * cov_b * &ra)).trace();
    let dmu = (mu_a - mu_b).norm_squared();
    Ok((dmu + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = moments(a)?;
    let (mb, cb) = moments(b)?;
    frechet_from_moments(&ma, &ca, &mb, &cb)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::{derive_image_tokens, generate_dataset, DataConfig, ImageTokenizer};
    use crate::numerics::RngState;
    use crate::parallel::Exec;

    #[test]
    fn ground_truth_scores_one_everywhere() {
        let data = DataConfig::default();
        for ex in generate_dataset(&data, 200, 3, Exec::Sequential).unwrap() {
            let acc = constraint_accuracy(&ex.image, &ex.conditions, &data.knobs).unwrap();
            for (k, v) in &acc {
                assert_eq!(*v, 1.0, "{k}");
            }
            assert!(acc.len() >= 3);
        }
    }

    #[test]
    fn empty_conditions_give_empty_report() {
        let data = DataConfig::default();
        let ex = &generate_dataset(&data, 1, 0, Exec::Sequential).unwrap()[0];
        assert!(constraint_accuracy(&ex.image, &ConditionSet::empty(), &data.knobs).unwrap().is_empty());
    }

    #[test]
    fn vq_tokens_are_rejected() {
        let data = DataConfig::default();
        let ex = &generate_dataset(&data, 1, 0, Exec::Sequential).unwrap()[0];
        let img = ImageTokens { tokenizer: ImageTokenizer::Vq { patch: 2 }, ..ex.image.clone() };
        assert!(matches!(constraint_accuracy(&img, &ex.conditions, &data.knobs), Err(Error::Contract(_))));
    }

    #[test]
    fn random_grids_hit_chance_segmentation_accuracy() {
        let data = DataConfig { coverage_min: 1.0, ..Default::default() };
        let knobs = &data.knobs;
        let exs = generate_dataset(&data, 400, 8, Exec::Sequential).unwrap();
        let mut rng = RngState::new(1);
        let mut total = 0.0;
        for ex in &exs {
            let tokens = (0..knobs.cells()).map(|_| rng.below(knobs.palette)).collect();
            let img = ImageTokens { tokens, ..ex.image.clone() };
            let seg = ex.conditions.only(ModalityKind::Segmentation);
            total += constraint_accuracy(&img, &seg, knobs).unwrap()[&ModalityKind::Segmentation];
        }
        let mean = total / exs.len() as f64;
        assert!((mean - 1.0 / knobs.palette as f64).abs() < 0.02, "{mean}");
    }

    #[test]
    fn wrong_colour_fails_text_and_boxes() {
        let data = DataConfig { coverage_min: 1.0, ..Default::default() };
        let ex = &generate_dataset(&data, 1, 4, Exec::Sequential).unwrap()[0];
        let img = ImageTokens { tokens: vec![0; data.knobs.cells()], ..ex.image.clone() };
        let acc = constraint_accuracy(&img, &ex.conditions, &data.knobs).unwrap();
        assert_eq!(acc[&ModalityKind::Text], 0.0);
        assert_eq!(acc[&ModalityKind::BBox], 0.0);
    }

    #[test]
    fn features_count_colours_and_edges() {
        let knobs = SceneKnobs::default();
        let mut rng = RngState::new(2);
        let scene = crate::data::generate_scene(&mut rng, &knobs).unwrap();
        let f = scene_features(&derive_image_tokens(&scene, None).unwrap().tokens, &knobs);
        assert_eq!(f.len(), 7);
        assert_eq!(f[..6].iter().sum::<f64>(), 64.0);
    }

    #[test]
    fn analytic_one_dimensional_case() {
        let a = vec![vec![-1.0], vec![1.0]];
        let b = vec![vec![2.0], vec![4.0]];
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 9.0).abs() < 1e-12);
        let unit = DMatrix::from_element(1, 1, 1.0);
        let d = frechet_from_moments(&DVector::from_element(1, 0.0), &unit, &DVector::from_element(1, 3.0), &unit).unwrap();
        assert!((d - 9.0).abs() < 1e-4);
        let wide = DMatrix::from_element(1, 1, 4.0);
        let d = frechet_from_moments(&DVector::from_element(1, 0.0), &unit, &DVector::from_element(1, 0.0), &wide).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_and_tiny_sets_rejected() {
        assert!(frechet_distance(&[vec![1.0], vec![2.0]], &[vec![1.0, 2.0], vec![2.0, 3.0]]).is_err());
        assert!(matches!(frechet_distance(&[vec![1.0]], &[vec![1.0], vec![2.0]]), Err(Error::Contract(_))));
    }

    fn cloud(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = RngState::new(seed);
        (0..n).map(|_| (0..d).map(|j| rng.normal() * (1.0 + j as f64) + rng.uniform()).collect()).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn frechet_is_a_symmetric_premetric(sa in 0u64..1000, sb in 0u64..1000, shift in -5.0f64..5.0) {
            let a = cloud(sa, 40, 4);
            let b = cloud(sb + 5000, 30, 4);
            prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-6);
            let mv = |s: &[Vec<f64>]| s.iter().map(|v| v.iter().map(|x| x + shift).collect()).collect::<Vec<Vec<f64>>>();
            prop_assert!((frechet_distance(&mv(&a), &mv(&b)).unwrap() - ab).abs() < 1e-6);
        }
    }
}
