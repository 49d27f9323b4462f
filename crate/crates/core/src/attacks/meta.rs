//! Binary metaclassifiers mapping scaled prediction vectors to a
//! membership score in [0, 1].

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ScaledVector;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRow {
    pub features: ScaledVector,
    pub member: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDataset {
    pub rows: Vec<MetaRow>,
    /// Absent for datasets pooling several challenge points.
    pub challenge_id: Option<u64>,
    /// Number of shadow models the rows came from.
    pub shadow_count: usize,
}

impl MetaDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let n_in = self.rows.iter().filter(|r| r.member).count();
        (n_in, self.rows.len() - n_in)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaKind {
    Mlp,
    Logistic,
    LinearSvm,
    Knn,
}

/// Neighbor count for knn metaclassifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KRule {
    /// `floor(sqrt(rows))`.
    SqrtN,
    /// Number of shadow models contributing rows.
    NShadow,
    Fixed(usize),
}

impl KRule {
    pub fn resolve(self, rows: usize, shadow_count: usize) -> usize {
        match self {
            KRule::SqrtN => ((rows as f64).sqrt().floor() as usize).max(1),
            KRule::NShadow => shadow_count.max(1),
            KRule::Fixed(k) => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaArch {
    pub kind: MetaKind,
    /// Only used by knn.
    pub k_rule: KRule,
    pub hidden: usize,
    pub epochs: usize,
    /// Rows per gradient step; `None` steps on the whole dataset.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MetaArch {
    fn default() -> Self {
        Self {
            kind: MetaKind::Mlp,
            k_rule: KRule::SqrtN,
            hidden: 32,
            epochs: 200,
            batch_size: None,
            learning_rate: 0.05,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl MetaArch {
    pub fn knn(k_rule: KRule) -> Self {
        Self {
            kind: MetaKind::Knn,
            k_rule,
            ..Self::default()
        }
    }

    pub fn of_kind(kind: MetaKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_rule == KRule::Fixed(0) {
            return Err(Error::Config("knn needs k >= 1".into()));
        }
        if self.kind != MetaKind::Knn {
            if self.batch_size == Some(0) {
                return Err(Error::Config("meta batch_size must be positive".into()));
            }
            if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
                return Err(Error::Config("meta learning_rate must be positive".into()));
            }
            if self.kind == MetaKind::Mlp && self.hidden == 0 {
                return Err(Error::Config("meta hidden width must be positive".into()));
            }
        }
        Ok(())
    }

    /// Short label used in reports, e.g. `knn_sqrt_n`.
    pub fn label(&self) -> String {
        match self.kind {
            MetaKind::Mlp => "mlp".into(),
            MetaKind::Logistic => "logistic".into(),
            MetaKind::LinearSvm => "linear_svm".into(),
            MetaKind::Knn => match self.k_rule {
                KRule::SqrtN => "knn_sqrt_n".into(),
                KRule::NShadow => "knn_n_shadow".into(),
                KRule::Fixed(k) => format!("knn_{k}"),
            },
        }
    }
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[MetaRow]) -> Self {
        let d = rows[0].features.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.features.values()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.features.values()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let inv_std = var
            .into_iter()
            .map(|v| if v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, inv_std }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetaModel {
    Mlp {
        standardizer: Standardizer,
        hidden: usize,
        /// Row-major `[hidden x inputs]`.
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
    Logistic {
        standardizer: Standardizer,
        w: Vec<f64>,
        b: f64,
    },
    LinearSvm {
        standardizer: Standardizer,
        w: Vec<f64>,
        b: f64,
    },
    Knn {
        features: Vec<Vec<f64>>,
        labels: Vec<bool>,
        k: usize,
    },
    Constant(f64),
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::InputShape {
            expected,
            actual: x.len(),
        });
    }
    Ok(())
}

impl MetaModel {
    /// Membership score in [0, 1].
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        match self {
            MetaModel::Mlp {
                standardizer,
                hidden,
                w1,
                b1,
                w2,
                b2,
            } => {
                check_dim(standardizer.mean.len(), x)?;
                let x = standardizer.apply(x);
                let d = x.len();
                let mut z = *b2;
                for h in 0..*hidden {
                    let a = b1[h] + dot(&w1[h * d..(h + 1) * d], &x);
                    if a > 0.0 {
                        z += w2[h] * a;
                    }
                }
                Ok(sigmoid(z))
            }
            MetaModel::Logistic { standardizer, w, b } | MetaModel::LinearSvm { standardizer, w, b } => {
                check_dim(w.len(), x)?;
                Ok(sigmoid(dot(w, &standardizer.apply(x)) + b))
            }
            MetaModel::Knn { features, labels, k } => {
                check_dim(features[0].len(), x)?;
                let mut d: Vec<(f64, usize)> =
                    features.iter().enumerate().map(|(i, f)| (sq_dist(f, x), i)).collect();
                let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if *k < d.len() {
                    d.select_nth_unstable_by(*k - 1, by_dist);
                }
                let hits = d[..*k].iter().filter(|(_, i)| labels[*i]).count();
                Ok(hits as f64 / *k as f64)
            }
            MetaModel::Constant(c) => Ok(*c),
        }
    }

    pub fn scaled_score(&self, x: &ScaledVector) -> Result<f64> {
        self.score(x.values())
    }
}

fn unpack(data: &MetaDataset) -> (Vec<Vec<f64>>, Vec<bool>) {
    data.rows
        .iter()
        .map(|r| (r.features.0.clone(), r.member))
        .unzip()
}

/// Seeded minibatch SGD on a linear score `w.x + b`; `loss_grad` maps the
/// margin and label to d(loss)/d(margin).
fn train_linear(
    xs: &[Vec<f64>],
    ys: &[bool],
    arch: &MetaArch,
    loss_grad: impl Fn(f64, bool) -> f64,
) -> (Vec<f64>, f64) {
    let d = xs[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let batch = arch.batch_size.map_or(xs.len(), |b| b.min(xs.len()));
    let mut gw = vec![0.0; d];
    for epoch in 0..arch.epochs {
        order.shuffle(&mut rng(derive_seed(arch.seed, "meta-shuffle", epoch as u64)));
        for chunk in order.chunks(batch) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for &i in chunk {
                let g = loss_grad(dot(&w, &xs[i]) + b, ys[i]);
                for (acc, v) in gw.iter_mut().zip(&xs[i]) {
                    *acc += g * v;
                }
                gb += g;
            }
            let scale = arch.learning_rate / chunk.len() as f64;
            for (wj, g) in w.iter_mut().zip(&gw) {
                *wj -= scale * g + arch.learning_rate * arch.weight_decay * *wj;
            }
            b -= scale * gb;
        }
    }
    (w, b)
}

fn train_mlp(xs: &[Vec<f64>], ys: &[bool], arch: &MetaArch, standardizer: Standardizer) -> MetaModel {
    let d = xs[0].len();
    let h = arch.hidden;
    let mut r = rng(derive_seed(arch.seed, "meta-init", 0));
    let s1 = (2.0 / d as f64).sqrt();
    let s2 = (2.0 / h as f64).sqrt();
    let mut w1: Vec<f64> = (0..h * d)
        .map(|_| s1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
        .collect();
    let mut b1 = vec![0.0; h];
    let mut w2: Vec<f64> = (0..h).map(|_| s2 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)).collect();
    let mut b2 = 0.0;

    let mut order: Vec<usize> = (0..xs.len()).collect();
    let batch = arch.batch_size.map_or(xs.len(), |b| b.min(xs.len()));
    let (mut gw1, mut gb1, mut gw2) = (vec![0.0; h * d], vec![0.0; h], vec![0.0; h]);
    let mut act = vec![0.0; h];
    for epoch in 0..arch.epochs {
        order.shuffle(&mut rng(derive_seed(arch.seed, "meta-shuffle", epoch as u64)));
        for chunk in order.chunks(batch) {
            gw1.iter_mut().for_each(|g| *g = 0.0);
            gb1.iter_mut().for_each(|g| *g = 0.0);
            gw2.iter_mut().for_each(|g| *g = 0.0);
            let mut gb2 = 0.0;
            for &i in chunk {
                let x = &xs[i];
                let mut z = b2;
                for j in 0..h {
                    let a = (b1[j] + dot(&w1[j * d..(j + 1) * d], x)).max(0.0);
                    act[j] = a;
                    z += w2[j] * a;
                }
                let g = sigmoid(z) - if ys[i] { 1.0 } else { 0.0 };
                gb2 += g;
                for j in 0..h {
                    if act[j] > 0.0 {
                        gw2[j] += g * act[j];
                        let gh = g * w2[j];
                        gb1[j] += gh;
                        for (acc, v) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *acc += gh * v;
                        }
                    }
                }
            }
            let lr = arch.learning_rate;
            let scale = lr / chunk.len() as f64;
            let decay = lr * arch.weight_decay;
            for (w, g) in w1.iter_mut().zip(&gw1) {
                *w -= scale * g + decay * *w;
            }
            for (b, g) in b1.iter_mut().zip(&gb1) {
                *b -= scale * g;
            }
            for (w, g) in w2.iter_mut().zip(&gw2) {
                *w -= scale * g + decay * *w;
            }
            b2 -= scale * gb2;
        }
    }
    MetaModel::Mlp {
        standardizer,
        hidden: h,
        w1,
        b1,
        w2,
        b2,
    }
}

pub fn train_metaclassifier(data: &MetaDataset, arch: &MetaArch) -> Result<MetaModel> {
    arch.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData("metaclassifier dataset"));
    }
    let dim = data.rows[0].features.len();
    if let Some(r) = data.rows.iter().find(|r| r.features.len() != dim) {
        return Err(Error::InputShape {
            expected: dim,
            actual: r.features.len(),
        });
    }
    let (n_in, n_out) = data.label_counts();
    if arch.kind == MetaKind::Knn {
        let k = arch.k_rule.resolve(data.len(), data.shadow_count);
        if k > data.len() {
            return Err(Error::MetaTraining(format!(
                "knn needs at least {k} rows, got {}",
                data.len()
            )));
        }
        let (features, labels) = unpack(data);
        return Ok(MetaModel::Knn { features, labels, k });
    }
    if n_in == 0 || n_out == 0 {
        return Err(Error::MetaTraining(format!(
            "both labels required ({n_in} IN, {n_out} OUT)"
        )));
    }
    if n_in != n_out {
        log::debug!(
            "meta dataset {:?}: imbalance {n_in} IN / {n_out} OUT",
            data.challenge_id
        );
    }
    let standardizer = Standardizer::fit(&data.rows);
    let (raw, ys) = unpack(data);
    let xs: Vec<Vec<f64>> = raw.iter().map(|x| standardizer.apply(x)).collect();
    Ok(match arch.kind {
        MetaKind::Mlp => train_mlp(&xs, &ys, arch, standardizer),
        MetaKind::Logistic => {
            let (w, b) = train_linear(&xs, &ys, arch, |z, y| sigmoid(z) - if y { 1.0 } else { 0.0 });
            MetaModel::Logistic { standardizer, w, b }
        }
        MetaKind::LinearSvm => {
            let (w, b) = train_linear(&xs, &ys, arch, |z, y| {
                let t = if y { 1.0 } else { -1.0 };
                if t * z < 1.0 {
                    -t
                } else {
                    0.0
                }
            });
            MetaModel::LinearSvm { standardizer, w, b }
        }
        MetaKind::Knn => unreachable!(),
    })
}
