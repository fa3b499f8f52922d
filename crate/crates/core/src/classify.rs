//! ROI malignancy classification: class-weighted logistic regression,
//! stratified k-fold cross-validation, and ROC analysis.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_FEATURES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Malignant
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiRecord {
    pub id: String,
    pub label: Label,
    pub ki_mean: f64,
    pub ki_max: f64,
    pub ki_std: f64,
}

impl RoiRecord {
    pub fn features(&self) -> [f64; N_FEATURES] {
        [self.ki_mean, self.ki_max, self.ki_std]
    }

    pub fn validate(&self) -> Result<()> {
        if self.features().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("ROI {} has a non-finite feature", self.id)));
        }
        Ok(())
    }
}

/// Per-class sample weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassWeights {
    pub benign: f64,
    pub malignant: f64,
}

impl ClassWeights {
    pub const UNIFORM: ClassWeights = ClassWeights {
        benign: 1.0,
        malignant: 1.0,
    };

    /// Inverse class frequency, scaled so each class carries half the total
    /// weight `N`.
    pub fn balanced(labels: &[Label]) -> Result<Self> {
        let (nb, nm) = class_counts(labels);
        if nb == 0 || nm == 0 {
            return Err(Error::config("class weights need both classes present"));
        }
        let n = labels.len() as f64;
        Ok(Self {
            benign: n / (2.0 * nb as f64),
            malignant: n / (2.0 * nm as f64),
        })
    }

    pub fn of(&self, label: Label) -> f64 {
        match label {
            Label::Benign => self.benign,
            Label::Malignant => self.malignant,
        }
    }
}

fn class_counts(labels: &[Label]) -> (usize, usize) {
    let nm = labels.iter().filter(|l| l.is_positive()).count();
    (labels.len() - nm, nm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    pub max_iters: usize,
    /// Step size as a multiple of the inverse Lipschitz bound of the gradient.
    pub step_scale: f64,
    /// L2 penalty on the standardized coefficients (bias unpenalized).
    pub l2: f64,
    pub grad_tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            step_scale: 1.0,
            l2: 1.0,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogisticModel {
    pub mean: [f64; N_FEATURES],
    pub scale: [f64; N_FEATURES],
    pub coef: [f64; N_FEATURES],
    pub bias: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LogisticModel {
    fn standardize(&self, x: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        std::array::from_fn(|j| (x[j] - self.mean[j]) / self.scale[j])
    }

    /// Log-odds of malignancy.
    pub fn decision(&self, x: &[f64; N_FEATURES]) -> f64 {
        let z = self.standardize(x);
        self.bias + (0..N_FEATURES).map(|j| self.coef[j] * z[j]).sum::<f64>()
    }

    pub fn probability(&self, x: &[f64; N_FEATURES]) -> f64 {
        crate::activation::sigmoid(self.decision(x))
    }

    pub fn predict(&self, x: &[f64; N_FEATURES]) -> Label {
        if self.decision(x) > 0.0 {
            Label::Malignant
        } else {
            Label::Benign
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Minimize `(1/N)·[Σ wᵢ·nllᵢ + ½·l2·|β|²]` by gradient descent on
/// standardized features.
pub fn logistic_fit(records: &[RoiRecord], weights: &ClassWeights, cfg: &LogisticConfig) -> Result<LogisticModel> {
    let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
    let (nb, nm) = class_counts(&labels);
    if nb == 0 || nm == 0 {
        return Err(Error::config("logistic fit needs both classes present"));
    }
    if !(cfg.l2 >= 0.0 && cfg.step_scale > 0.0 && cfg.grad_tol >= 0.0) {
        return Err(Error::config("invalid logistic regression settings"));
    }
    for r in records {
        r.validate()?;
    }
    let n = records.len() as f64;
    let raw: Vec<[f64; N_FEATURES]> = records.iter().map(|r| r.features()).collect();
    let mut mean = [0.0; N_FEATURES];
    let mut scale = [0.0; N_FEATURES];
    for j in 0..N_FEATURES {
        mean[j] = raw.iter().map(|x| x[j]).sum::<f64>() / n;
        let var = raw.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
        scale[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let z: Vec<[f64; N_FEATURES]> = raw.iter().map(|x| std::array::from_fn(|j| (x[j] - mean[j]) / scale[j])).collect();
    let w: Vec<f64> = labels.iter().map(|&l| weights.of(l)).collect();
    let y: Vec<f64> = labels.iter().map(|l| if l.is_positive() { 1.0 } else { 0.0 }).collect();

    let lipschitz = (0.25 * (0..z.len()).map(|i| w[i] * (1.0 + z[i].iter().map(|v| v * v).sum::<f64>())).sum::<f64>() + cfg.l2) / n;
    let step = cfg.step_scale / lipschitz;

    let mut coef = [0.0; N_FEATURES];
    let mut bias = 0.0;
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let mut g = [0.0; N_FEATURES + 1];
        for i in 0..z.len() {
            let s = bias + (0..N_FEATURES).map(|j| coef[j] * z[i][j]).sum::<f64>();
            let r = w[i] * (crate::activation::sigmoid(s) - y[i]);
            g[N_FEATURES] += r;
            for j in 0..N_FEATURES {
                g[j] += r * z[i][j];
            }
        }
        for j in 0..N_FEATURES {
            g[j] = (g[j] + cfg.l2 * coef[j]) / n;
        }
        g[N_FEATURES] /= n;
        grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if grad_norm <= cfg.grad_tol {
            break;
        }
        for j in 0..N_FEATURES {
            coef[j] -= step * g[j];
        }
        bias -= step * g[N_FEATURES];
        iterations += 1;
    }
    if !(bias.is_finite() && coef.iter().all(|c| c.is_finite())) {
        return Err(Error::Numeric("logistic regression diverged".into()));
    }
    Ok(LogisticModel {
        mean,
        scale,
        coef,
        bias,
        iterations,
        grad_norm,
    })
}

/// Weighted mean negative log-likelihood plus penalty, the objective
/// [`logistic_fit`] minimizes.
pub fn logistic_objective(model: &LogisticModel, records: &[RoiRecord], weights: &ClassWeights, l2: f64) -> f64 {
    let n = records.len() as f64;
    let nll: f64 = records
        .iter()
        .map(|r| {
            let s = model.decision(&r.features());
            let w = weights.of(r.label);
            w * if r.label.is_positive() { softplus(-s) } else { softplus(s) }
        })
        .sum();
    (nll + 0.5 * l2 * model.coef.iter().map(|c| c * c).sum::<f64>()) / n
}

/// Fold index in `0..k` for every record. Each class is shuffled and dealt
/// round-robin, continuing from where the previous class stopped, so every
/// fold's class count is the floor or ceiling of `n_class / k`.
pub fn stratified_kfold(labels: &[Label], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("k = {k}; stratified folds need k ≥ 2")));
    }
    if labels.len() < k {
        return Err(Error::Config(format!("{} records cannot fill {k} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for class in [Label::Benign, Label::Malignant] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocCurve {
    /// Points from (0,0) to (1,1), one per distinct threshold.
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

impl RocCurve {
    /// TPR at each `grid` FPR: the highest TPR reached at that FPR, linearly
    /// interpolated between distinct FPR values.
    pub fn tpr_at(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter()
            .map(|&x| {
                let hi = self.fpr.partition_point(|&f| f <= x);
                if hi == 0 {
                    return 0.0;
                }
                let (x0, y0) = (self.fpr[hi - 1], self.tpr[hi - 1]);
                match self.fpr.get(hi) {
                    Some(&x1) if x1 > x0 => y0 + (self.tpr[hi] - y0) * (x - x0) / (x1 - x0),
                    _ => y0,
                }
            })
            .collect()
    }
}

fn check_binary(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dim("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let (nb, nm) = class_counts(labels);
    if nb == 0 || nm == 0 {
        return Err(Error::Undefined("ROC needs both classes present".into()));
    }
    Ok((nb, nm))
}

/// ROC over all distinct thresholds with malignant as the positive class;
/// tied scores form one diagonal step, so the trapezoidal area equals the
/// Mann–Whitney statistic.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<RocCurve> {
    let (nb, nm) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]].is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        auc += (fp - fp0) as f64 * (tp + tp0) as f64;
        fpr.push(fp as f64 / nb as f64);
        tpr.push(tp as f64 / nm as f64);
    }
    Ok(RocCurve {
        fpr,
        tpr,
        auc: auc / (2.0 * nb as f64 * nm as f64),
    })
}

/// `P(score_malignant > score_benign) + ½·P(tie)` by direct pair counting.
pub fn mann_whitney_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (nb, nm) = check_binary(scores, labels)?;
    let mut u = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i].is_positive() {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j].is_positive() {
                continue;
            }
            u += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(u / (nb as f64 * nm as f64))
}

pub const ROC_GRID_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
    /// Population standard deviation over folds.
    pub std_auc: f64,
    /// Vertically averaged ROC on a uniform FPR grid.
    pub mean_roc: Vec<(f64, f64)>,
}

/// Cross-validated AUC per method. Every method shares one fold assignment
/// drawn from the labels, and each training split gets balanced weights.
pub fn evaluate_motion_methods(
    methods: &[(String, Vec<RoiRecord>)],
    k: usize,
    seed: u64,
    cfg: &LogisticConfig,
) -> Result<Vec<MethodSummary>> {
    let Some((_, first)) = methods.first() else {
        return Err(Error::config("no methods to evaluate"));
    };
    for (name, recs) in methods {
        if recs.len() != first.len() || recs.iter().zip(first).any(|(a, b)| a.id != b.id || a.label != b.label) {
            return Err(Error::Consistency(format!("ROI ids or labels of method {name} differ from {}", methods[0].0)));
        }
    }
    let labels: Vec<Label> = first.iter().map(|r| r.label).collect();
    let folds = stratified_kfold(&labels, k, seed)?;
    let grid: Vec<f64> = (0..ROC_GRID_POINTS).map(|i| i as f64 / (ROC_GRID_POINTS - 1) as f64).collect();
    let mut out = Vec::with_capacity(methods.len());
    for (name, recs) in methods {
        let mut fold_aucs = Vec::with_capacity(k);
        let mut tpr_sum = vec![0.0; grid.len()];
        for fold in 0..k {
            let train: Vec<RoiRecord> = recs.iter().zip(&folds).filter(|(_, &f)| f != fold).map(|(r, _)| r.clone()).collect();
            let test: Vec<&RoiRecord> = recs.iter().zip(&folds).filter(|(_, &f)| f == fold).map(|(r, _)| r).collect();
            let train_labels: Vec<Label> = train.iter().map(|r| r.label).collect();
            let model = logistic_fit(&train, &ClassWeights::balanced(&train_labels)?, cfg)?;
            let scores: Vec<f64> = test.iter().map(|r| model.decision(&r.features())).collect();
            let test_labels: Vec<Label> = test.iter().map(|r| r.label).collect();
            let roc = roc_auc(&scores, &test_labels)
                .map_err(|e| Error::Undefined(format!("method {name}, fold {fold}: {e}")))?;
            for (acc, t) in tpr_sum.iter_mut().zip(roc.tpr_at(&grid)) {
                *acc += t;
            }
            fold_aucs.push(roc.auc);
        }
        let mean_auc = fold_aucs.iter().sum::<f64>() / k as f64;
        let std_auc = (fold_aucs.iter().map(|a| (a - mean_auc).powi(2)).sum::<f64>() / k as f64).sqrt();
        let mut mean_roc: Vec<(f64, f64)> = grid.iter().zip(&tpr_sum).map(|(&x, &t)| (x, t / k as f64)).collect();
        mean_roc[0].1 = 0.0;
        mean_roc[ROC_GRID_POINTS - 1].1 = 1.0;
        out.push(MethodSummary {
            method: name.clone(),
            fold_aucs,
            mean_auc,
            std_auc,
            mean_roc,
        });
    }
    Ok(out)
}

/// One-sided sign test: probability of at least `successes` out of `trials`
/// under a fair coin.
pub fn sign_test_p(successes: usize, trials: usize) -> f64 {
    let n = trials as u32;
    let mut total = 0.0;
    let mut c = 1.0f64;
    for i in 0..=n {
        if i > 0 {
            c *= (n - i + 1) as f64 / i as f64;
        }
        if i as usize >= successes {
            total += c;
        }
    }
    total / 2f64.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn rec(id: usize, label: Label, f: [f64; 3]) -> RoiRecord {
        RoiRecord {
            id: format!("roi{id}"),
            label,
            ki_mean: f[0],
            ki_max: f[1],
            ki_std: f[2],
        }
    }

    fn labels_of(nb: usize, nm: usize) -> Vec<Label> {
        let mut v = vec![Label::Benign; nb];
        v.extend(vec![Label::Malignant; nm]);
        v
    }

    #[test]
    fn auc_hand_cases() {
        use Label::*;
        let roc = roc_auc(&[0.9, 0.8, 0.3, 0.2], &[Malignant, Malignant, Benign, Malignant]).unwrap();
        assert!((roc.auc - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(roc_auc(&[3.0, 2.0, 1.0], &[Malignant, Benign, Benign]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[1.0, 2.0, 3.0], &[Malignant, Benign, Benign]).unwrap().auc, 0.0);
        assert_eq!(roc_auc(&[1.0, 1.0], &[Malignant, Benign]).unwrap().auc, 0.5);
        assert!(matches!(roc_auc(&[1.0, 2.0], &[Benign, Benign]), Err(Error::Undefined(_))));
    }

    proptest! {
        #[test]
        fn auc_equals_mann_whitney(seed in 0u64..10_000, n in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<Label> = (0..n).map(|_| if rng.random_bool(0.4) { Label::Malignant } else { Label::Benign }).collect();
            labels[0] = Label::Benign;
            labels[1] = Label::Malignant;
            // coarse scores so that ties occur
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) * 0.5).collect();
            let roc = roc_auc(&scores, &labels).unwrap();
            prop_assert!((roc.auc - mann_whitney_auc(&scores, &labels).unwrap()).abs() <= 1e-12);
            prop_assert!(roc.fpr.windows(2).all(|w| w[1] >= w[0]) && roc.tpr.windows(2).all(|w| w[1] >= w[0]));
            prop_assert_eq!((roc.fpr[0], roc.tpr[0]), (0.0, 0.0));
            prop_assert_eq!((*roc.fpr.last().unwrap(), *roc.tpr.last().unwrap()), (1.0, 1.0));
            // strictly monotone transform
            let t: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&t, &labels).unwrap().auc, roc.auc);
        }

        #[test]
        fn folds_partition_and_balance(nb in 0usize..30, nm in 0usize..60, k in 2usize..7, seed in 0u64..100) {
            prop_assume!(nb + nm >= k);
            let labels = labels_of(nb, nm);
            let folds = stratified_kfold(&labels, k, seed).unwrap();
            prop_assert_eq!(folds.len(), labels.len());
            for f in 0..k {
                let b = (0..labels.len()).filter(|&i| folds[i] == f && labels[i] == Label::Benign).count();
                let m = (0..labels.len()).filter(|&i| folds[i] == f && labels[i] == Label::Malignant).count();
                prop_assert!((b as f64 - nb as f64 / k as f64).abs() < 1.0);
                prop_assert!((m as f64 - nm as f64 / k as f64).abs() < 1.0);
            }
        }
    }

    #[test]
    fn fold_examples() {
        let labels = labels_of(5, 5);
        let folds = stratified_kfold(&labels, 5, 3).unwrap();
        for f in 0..5 {
            assert_eq!((0..5).filter(|&i| folds[i] == f).count(), 1);
            assert_eq!((5..10).filter(|&i| folds[i] == f).count(), 1);
        }
        let labels = labels_of(8, 49);
        let folds = stratified_kfold(&labels, 5, 11).unwrap();
        for f in 0..5 {
            let b = (0..8).filter(|&i| folds[i] == f).count();
            assert!(b == 1 || b == 2);
        }
        assert_eq!(folds, stratified_kfold(&labels, 5, 11).unwrap());
        assert_ne!(folds, stratified_kfold(&labels, 5, 12).unwrap());
        assert!(matches!(stratified_kfold(&labels, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn balanced_weight_ratio() {
        let w = ClassWeights::balanced(&labels_of(8, 49)).unwrap();
        assert!((w.benign / w.malignant - 49.0 / 8.0).abs() < 1e-12);
        assert!((8.0 * w.benign - 49.0 * w.malignant).abs() < 1e-12);
        assert!(ClassWeights::balanced(&labels_of(0, 3)).is_err());
    }

    #[test]
    fn separable_data_is_fit_perfectly() {
        let recs: Vec<RoiRecord> = (0..20)
            .map(|i| {
                let x = i as f64;
                rec(i, if i < 10 { Label::Benign } else { Label::Malignant }, [x, 1.0, 0.0])
            })
            .collect();
        let m = logistic_fit(&recs, &ClassWeights::UNIFORM, &LogisticConfig::default()).unwrap();
        assert!(recs.iter().all(|r| m.predict(&r.features()) == r.label));
        assert!(logistic_fit(&recs[..10], &ClassWeights::UNIFORM, &LogisticConfig::default()).is_err());
    }

    #[test]
    fn converged_fit_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let recs: Vec<RoiRecord> = (0..57)
            .map(|i| {
                let l = if i < 8 { Label::Benign } else { Label::Malignant };
                let shift = if l.is_positive() { 0.7 } else { 0.0 };
                rec(i, l, std::array::from_fn(|_| nrm.sample(&mut rng) + shift))
            })
            .collect();
        let w = ClassWeights::balanced(&recs.iter().map(|r| r.label).collect::<Vec<_>>()).unwrap();
        let cfg = LogisticConfig::default();
        let m = logistic_fit(&recs, &w, &cfg).unwrap();
        assert!(m.grad_norm <= cfg.grad_tol, "{}", m.grad_norm);
        // any perturbation raises the objective
        let f0 = logistic_objective(&m, &recs, &w, cfg.l2);
        for j in 0..3 {
            for d in [-1e-3, 1e-3] {
                let mut p = m.clone();
                p.coef[j] += d;
                assert!(logistic_objective(&p, &recs, &w, cfg.l2) > f0);
            }
        }
    }

    #[test]
    fn affine_rescaling_keeps_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let recs: Vec<RoiRecord> = (0..30)
            .map(|i| rec(i, if i % 3 == 0 { Label::Benign } else { Label::Malignant }, std::array::from_fn(|_| rng.random_range(0.0..1.0))))
            .collect();
        let scaled: Vec<RoiRecord> = recs
            .iter()
            .map(|r| RoiRecord { ki_mean: 3.0 * r.ki_mean + 1.0, ki_max: 0.01 * r.ki_max - 5.0, ki_std: 40.0 * r.ki_std, ..r.clone() })
            .collect();
        let w = ClassWeights::balanced(&recs.iter().map(|r| r.label).collect::<Vec<_>>()).unwrap();
        let a = logistic_fit(&recs, &w, &LogisticConfig::default()).unwrap();
        let b = logistic_fit(&scaled, &w, &LogisticConfig::default()).unwrap();
        for (r, s) in recs.iter().zip(&scaled) {
            assert_eq!(a.predict(&r.features()), b.predict(&s.features()));
            assert!((a.decision(&r.features()) - b.decision(&s.features())).abs() < 1e-9);
        }
    }

    #[test]
    fn uninformative_features_give_chance_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut aucs = Vec::new();
        for trial in 0..20 {
            let recs: Vec<RoiRecord> = (0..100)
                .map(|i| rec(i, if i % 2 == 0 { Label::Benign } else { Label::Malignant }, std::array::from_fn(|_| rng.random_range(0.0..1.0))))
                .collect();
            let s = evaluate_motion_methods(&[("m".into(), recs)], 5, trial, &LogisticConfig::default()).unwrap();
            aucs.push(s[0].mean_auc);
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!((mean - 0.5).abs() < 0.1, "{mean}");
    }

    #[test]
    fn identical_methods_identical_auc_and_mismatch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let recs: Vec<RoiRecord> = (0..40)
            .map(|i| {
                let l = if i % 4 == 0 { Label::Benign } else { Label::Malignant };
                rec(i, l, std::array::from_fn(|_| rng.random_range(0.0..1.0) + if l.is_positive() { 0.3 } else { 0.0 }))
            })
            .collect();
        let s = evaluate_motion_methods(&[("a".into(), recs.clone()), ("b".into(), recs.clone())], 5, 1, &LogisticConfig::default()).unwrap();
        assert_eq!(s[0].fold_aucs, s[1].fold_aucs);
        assert_eq!(s[0].mean_roc.len(), ROC_GRID_POINTS);
        assert!(s[0].mean_roc.windows(2).all(|w| w[1].1 >= w[0].1));
        let mut other = recs.clone();
        other[3].id = "x".into();
        assert!(matches!(
            evaluate_motion_methods(&[("a".into(), recs), ("b".into(), other)], 5, 1, &LogisticConfig::default()),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p(5, 5) - 1.0 / 32.0).abs() < 1e-15);
        assert_eq!(sign_test_p(0, 5), 1.0);
        assert!((sign_test_p(4, 5) - 6.0 / 32.0).abs() < 1e-15);
    }
}
