//! Visualizations reused as additive perturbations, and fooling-rate sweeps.
//!
//! Images are in `[0, 1]`; coefficients are given in 8-bit pixel units and
//! applied as `(e / 255) · V_i`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discriminator::Classifier;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::io::LabeledDataset;
use crate::tensor::{derive_seed, Tensor};

/// Maximum value of 8-bit source pixels.
pub const PIXEL_MAX: f32 = 255.0;

/// `clamp(image + e·v, 0, pixel_max)`, elementwise.
pub fn perturb(image: &Tensor, v: &Tensor, e: f32, pixel_max: f32) -> Result<Tensor> {
    if !(e >= 0.0 && e.is_finite()) {
        return Err(Error::InvalidCoefficient(e));
    }
    if image.shape() != v.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs perturbation {:?}",
            image.shape(),
            v.shape()
        )));
    }
    if e == 0.0 {
        return Ok(image.clone());
    }
    let data = image
        .data()
        .iter()
        .zip(v.data())
        .map(|(&x, &d)| (x + e * d).clamp(0.0, pixel_max))
        .collect();
    Tensor::new(image.shape(), data)
}

/// Perturbs a `[0, 1]` image by `e` given in 8-bit pixel units.
pub fn perturb_unit(image: &Tensor, v: &Tensor, e: f32) -> Result<Tensor> {
    if !(e >= 0.0 && e.is_finite()) {
        return Err(Error::InvalidCoefficient(e));
    }
    perturb(image, v, e / PIXEL_MAX, 1.0)
}

/// One visualization `V_i` per class, each in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualizationBank {
    images: Vec<Tensor>,
}

impl VisualizationBank {
    pub fn new(images: Vec<Tensor>) -> Result<Self> {
        let first = images.first().ok_or(Error::IncompleteBank(0))?;
        for (i, v) in images.iter().enumerate() {
            if v.shape() != first.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "V_{i} has shape {:?}, V_0 has {:?}",
                    v.shape(),
                    first.shape()
                )));
            }
            if !v.data().iter().all(|x| (-1.0..=1.0).contains(x)) {
                return Err(Error::InvalidShape(format!("V_{i} leaves [-1, 1]")));
            }
        }
        Ok(Self { images })
    }

    pub fn from_generator(generator: &Generator) -> Result<Self> {
        let images = (0..generator.classes())
            .map(|c| generator.generate(c))
            .collect::<Result<_>>()?;
        Self::new(images)
    }

    /// Uniform noise in `[-1, 1]`, one independent draw per class.
    pub fn random_noise(classes: usize, shape: &[usize], seed: u64) -> Result<Self> {
        let images = (0..classes)
            .map(|c| Tensor::random_uniform(shape, derive_seed(seed, c as u64), -1.0, 1.0))
            .collect::<Result<_>>()?;
        Self::new(images)
    }

    pub fn classes(&self) -> usize {
        self.images.len()
    }

    pub fn get(&self, class: usize) -> Option<&Tensor> {
        self.images.get(class)
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    /// Fails with the first class id in `0..classes` that has no image.
    pub fn require(&self, classes: usize) -> Result<()> {
        if self.images.len() < classes {
            return Err(Error::IncompleteBank(self.images.len()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoolingResult {
    pub class: usize,
    pub coefficient: f32,
    /// Eligible images, i.e. those not already predicted as `class`.
    pub evaluated: usize,
    pub fooled: usize,
    pub targeted: usize,
}

impl FoolingResult {
    pub fn fooling_rate(&self) -> f64 {
        self.fooled as f64 / self.evaluated as f64
    }

    pub fn targeted_rate(&self) -> f64 {
        self.targeted as f64 / self.evaluated as f64
    }
}

/// One row of the per-image log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageOutcome {
    pub image_index: usize,
    pub label_clean: usize,
    pub label_perturbed: usize,
}

/// Clean-image predictions `L_correct`, computed once and reused.
#[derive(Clone, Debug)]
pub struct CleanPredictions {
    labels: Vec<usize>,
}

impl CleanPredictions {
    pub fn compute(d: &Classifier, images: &LabeledDataset) -> Result<Self> {
        let labels = images
            .images()
            .par_iter()
            .map(|img| d.predict_label(img))
            .collect::<Result<_>>()?;
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

fn check_frozen(d: &Classifier) -> Result<()> {
    if !d.is_frozen() {
        return Err(Error::FrozenModelRequired);
    }
    Ok(())
}

fn evaluate_with(
    d: &Classifier,
    images: &LabeledDataset,
    clean: &CleanPredictions,
    v: &Tensor,
    class: usize,
    e: f32,
    mut log: Option<&mut Vec<ImageOutcome>>,
) -> Result<FoolingResult> {
    if class >= d.classes() {
        return Err(Error::InvalidClass {
            class,
            classes: d.classes(),
        });
    }
    let mut result = FoolingResult {
        class,
        coefficient: e,
        evaluated: 0,
        fooled: 0,
        targeted: 0,
    };
    for (index, (image, _)) in images.iter().enumerate() {
        let label_clean = clean.labels[index];
        if label_clean == class {
            continue;
        }
        let label_perturbed = if e == 0.0 {
            label_clean
        } else {
            d.predict_label(&perturb_unit(image, v, e)?)?
        };
        result.evaluated += 1;
        result.fooled += usize::from(label_perturbed != label_clean);
        result.targeted += usize::from(label_perturbed == class);
        if let Some(log) = log.as_deref_mut() {
            log.push(ImageOutcome {
                image_index: index,
                label_clean,
                label_perturbed,
            });
        }
    }
    Ok(result)
}

/// Fooling counts of `e·V_i` over `images`, skipping images already
/// predicted as `class`.
pub fn evaluate_fooling(
    d: &Classifier,
    images: &LabeledDataset,
    v: &Tensor,
    class: usize,
    e: f32,
) -> Result<FoolingResult> {
    check_frozen(d)?;
    let clean = CleanPredictions::compute(d, images)?;
    let result = evaluate_with(d, images, &clean, v, class, e, None)?;
    if result.evaluated == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub coefficient: f32,
    pub fooling_rate: f64,
    pub targeted_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Every `(e, i)` evaluation, ordered by `e` then `i`.
    pub per_class: Vec<FoolingResult>,
}

impl SweepResult {
    pub fn row(&self, coefficient: f32) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.coefficient == coefficient)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("coefficient,fooling_rate,targeted_rate\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6}\n",
                r.coefficient, r.fooling_rate, r.targeted_rate
            ));
        }
        out
    }
}

/// Per-image outcomes of a sweep, for the optional detailed log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FoolingLog {
    pub entries: Vec<(f32, usize, ImageOutcome)>,
}

impl FoolingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_index,class_i,e,label_clean,label_perturbed\n");
        for (e, class, o) in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                o.image_index, class, e, o.label_clean, o.label_perturbed
            ));
        }
        out
    }
}

fn check_coefficients(coefficients: &[f32]) -> Result<()> {
    if coefficients.is_empty() {
        return Err(Error::Config("coefficient list is empty".into()));
    }
    if let Some(&e) = coefficients.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(Error::InvalidCoefficient(e));
    }
    if coefficients.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("coefficients must be strictly increasing".into()));
    }
    Ok(())
}

/// Aggregate fooling rates for each coefficient, pooled over every class and
/// every eligible image. A class with no eligible image contributes nothing;
/// an empty pool is an error.
pub fn sweep(
    d: &Classifier,
    images: &LabeledDataset,
    bank: &VisualizationBank,
    coefficients: &[f32],
) -> Result<SweepResult> {
    sweep_logged(d, images, bank, coefficients, false).map(|(s, _)| s)
}

/// [`sweep`], optionally also returning every per-image outcome.
pub fn sweep_logged(
    d: &Classifier,
    images: &LabeledDataset,
    bank: &VisualizationBank,
    coefficients: &[f32],
    keep_log: bool,
) -> Result<(SweepResult, Option<FoolingLog>)> {
    check_frozen(d)?;
    check_coefficients(coefficients)?;
    bank.require(d.classes())?;
    let clean = CleanPredictions::compute(d, images)?;
    let jobs: Vec<(f32, usize)> = coefficients
        .iter()
        .flat_map(|&e| (0..d.classes()).map(move |i| (e, i)))
        .collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(e, i)| {
            let mut log = keep_log.then(Vec::new);
            let v = bank.get(i).expect("bank checked");
            evaluate_with(d, images, &clean, v, i, e, log.as_mut()).map(|r| (r, log))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(coefficients.len());
    for (k, &coefficient) in coefficients.iter().enumerate() {
        let chunk = &outcomes[k * d.classes()..(k + 1) * d.classes()];
        let (n, fooled, targeted) = chunk.iter().fold((0, 0, 0), |acc, (r, _)| {
            (acc.0 + r.evaluated, acc.1 + r.fooled, acc.2 + r.targeted)
        });
        if n == 0 {
            return Err(Error::EmptyEvaluation);
        }
        rows.push(SweepRow {
            coefficient,
            fooling_rate: fooled as f64 / n as f64,
            targeted_rate: targeted as f64 / n as f64,
        });
    }
    let log = keep_log.then(|| FoolingLog {
        entries: outcomes
            .iter()
            .flat_map(|(r, log)| {
                log.iter()
                    .flatten()
                    .map(move |o| (r.coefficient, r.class, *o))
            })
            .collect(),
    });
    let per_class = outcomes.into_iter().map(|(r, _)| r).collect();
    Ok((SweepResult { rows, per_class }, log))
}

pub fn emit_sweep_csv(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, result.to_csv()).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a file written by [`emit_sweep_csv`].
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("coefficient,fooling_rate,targeted_rate") {
        return Err(Error::Format("missing sweep CSV header".into()));
    }
    lines
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad sweep row `{line}`"));
            if fields.len() != 3 {
                return Err(bad());
            }
            Ok(SweepRow {
                coefficient: fields[0].parse().map_err(|_| bad())?,
                fooling_rate: fields[1].parse().map_err(|_| bad())?,
                targeted_rate: fields[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. `NaN` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::{ClassifierConfig, LayerSpec};
    use crate::io::Split;

    #[test]
    fn perturb_examples() {
        let img = Tensor::from_vec(vec![100.0, 250.0]);
        let out = perturb(&img, &Tensor::from_vec(vec![0.5, 0.5]), 10.0, 255.0).unwrap();
        assert_eq!(out.data()[0], 105.0);
        let out = perturb(&img, &Tensor::from_vec(vec![1.0, 1.0]), 35.0, 255.0).unwrap();
        assert_eq!(out.data()[1], 255.0);
        let v = Tensor::from_vec(vec![0.3, -0.9]);
        assert_eq!(perturb(&img, &v, 0.0, 255.0).unwrap(), img);
        assert!(matches!(
            perturb(&img, &v, -1.0, 255.0),
            Err(Error::InvalidCoefficient(_))
        ));
        assert!(matches!(
            perturb(&img, &Tensor::from_vec(vec![0.0]), 1.0, 255.0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn unit_perturbation_uses_pixel_units() {
        let img = Tensor::from_vec(vec![100.0 / 255.0, 0.0]);
        let v = Tensor::from_vec(vec![0.5, -1.0]);
        let out = perturb_unit(&img, &v, 10.0).unwrap();
        assert!((out.data()[0] * 255.0 - 105.0).abs() < 1e-4);
        assert_eq!(out.data()[1], 0.0);
    }

    #[test]
    fn bank_rejects_out_of_range_and_missing() {
        assert!(VisualizationBank::new(vec![Tensor::from_vec(vec![1.5])]).is_err());
        let bank = VisualizationBank::new(vec![Tensor::from_vec(vec![-1.0, 1.0])]).unwrap();
        assert!(matches!(bank.require(2), Err(Error::IncompleteBank(1))));
        assert!(bank.require(1).is_ok());
        let noise = VisualizationBank::random_noise(3, &[1, 4, 4], 7).unwrap();
        assert_eq!(noise.classes(), 3);
        assert_ne!(noise.get(0), noise.get(1));
    }

    fn fixture() -> (Classifier, LabeledDataset) {
        let config = ClassifierConfig {
            input: [1, 6, 6],
            features: vec![LayerSpec::conv(3, 3), LayerSpec::Relu],
            dense: vec![3],
            classes: 3,
        };
        let d = Classifier::build(config, 2).unwrap().frozen();
        let images: Vec<Tensor> = (0..30)
            .map(|s| Tensor::random_uniform(&[1, 6, 6], s, 0.0, 1.0).unwrap())
            .collect();
        let labels = (0..30).map(|i| i % 3).collect();
        let data = LabeledDataset::new(images, labels, 3, Split::Test).unwrap();
        (d, data)
    }

    #[test]
    fn evaluation_invariants() {
        let (d, data) = fixture();
        let v = Tensor::random_uniform(&[1, 6, 6], 99, -1.0, 1.0).unwrap();
        let clean = CleanPredictions::compute(&d, &data).unwrap();
        for class in 0..3 {
            let zero = evaluate_fooling(&d, &data, &v, class, 0.0).unwrap();
            assert_eq!((zero.fooled, zero.targeted), (0, 0));
            let eligible = clean.labels().iter().filter(|&&l| l != class).count();
            assert_eq!(zero.evaluated, eligible);
            for e in [8.0, 64.0, 255.0] {
                let r = evaluate_fooling(&d, &data, &v, class, e).unwrap();
                assert!(r.targeted <= r.fooled && r.fooled <= r.evaluated);
            }
        }
    }

    #[test]
    fn empty_eligible_set_is_an_error() {
        let (d, data) = fixture();
        let clean = CleanPredictions::compute(&d, &data).unwrap();
        let only = clean.labels()[0];
        let idx: Vec<usize> = (0..data.len()).filter(|&i| clean.labels()[i] == only).collect();
        let subset = LabeledDataset::new(
            idx.iter().map(|&i| data.images()[i].clone()).collect(),
            idx.iter().map(|&i| data.labels()[i]).collect(),
            3,
            Split::Test,
        )
        .unwrap();
        let v = Tensor::zeros(&[1, 6, 6]).unwrap();
        assert!(matches!(
            evaluate_fooling(&d, &subset, &v, only, 1.0),
            Err(Error::EmptyEvaluation)
        ));
    }

    #[test]
    fn sweep_is_deterministic_and_checks_inputs() {
        let (d, data) = fixture();
        let bank = VisualizationBank::random_noise(3, &[1, 6, 6], 1).unwrap();
        let coeffs = [0.0, 16.0, 128.0];
        let a = sweep(&d, &data, &bank, &coeffs).unwrap();
        let b = sweep(&d, &data, &bank, &coeffs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows[0].fooling_rate, 0.0);
        assert_eq!(a.per_class.len(), 9);
        for r in &a.rows {
            assert!((0.0..=1.0).contains(&r.fooling_rate));
            assert!(r.targeted_rate <= r.fooling_rate);
        }
        let short = VisualizationBank::random_noise(2, &[1, 6, 6], 1).unwrap();
        assert!(matches!(
            sweep(&d, &data, &short, &coeffs),
            Err(Error::IncompleteBank(2))
        ));
        assert!(sweep(&d, &data, &bank, &[4.0, 2.0]).is_err());
        assert!(sweep(&d, &data, &bank, &[]).is_err());

        let (logged, log) = sweep_logged(&d, &data, &bank, &coeffs, true).unwrap();
        assert_eq!(logged, a);
        let log = log.unwrap();
        let total: usize = a.per_class.iter().map(|r| r.evaluated).sum();
        assert_eq!(log.entries.len(), total);
        assert!(log.to_csv().starts_with("image_index,class_i,e,label_clean,label_perturbed\n"));
    }

    #[test]
    fn unfrozen_classifier_is_refused() {
        let (d, data) = fixture();
        let mut d = d;
        d = Classifier::build(d.config().clone(), 2).unwrap();
        let bank = VisualizationBank::random_noise(3, &[1, 6, 6], 1).unwrap();
        assert!(matches!(
            sweep(&d, &data, &bank, &[1.0]),
            Err(Error::FrozenModelRequired)
        ));
    }

    #[test]
    fn csv_format_and_roundtrip() {
        let single = SweepResult {
            rows: vec![SweepRow {
                coefficient: 0.0,
                fooling_rate: 0.0,
                targeted_rate: 0.0,
            }],
            per_class: vec![],
        };
        assert_eq!(
            single.to_csv(),
            "coefficient,fooling_rate,targeted_rate\n0,0.000000,0.000000\n"
        );
        let rows = vec![
            SweepRow {
                coefficient: 1.0,
                fooling_rate: 0.125,
                targeted_rate: 0.0625,
            },
            SweepRow {
                coefficient: 2.5,
                fooling_rate: 0.5,
                targeted_rate: 0.25,
            },
        ];
        let s = SweepResult {
            rows: rows.clone(),
            per_class: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        emit_sweep_csv(&s, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(parse_sweep_csv(&text).unwrap(), rows);
    }

    #[test]
    fn spearman_reference_values() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &[2.0, 4.0, 6.0, 8.0, 10.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // d = (0, 0, 1, -1, 0): 1 - 6·2 / (5·24) = 0.9
        assert!((spearman(&x, &[1.0, 2.0, 4.0, 3.0, 5.0]) - 0.9).abs() < 1e-12);
        assert!(spearman(&x, &[1.0; 5]).is_nan());
    }
}
