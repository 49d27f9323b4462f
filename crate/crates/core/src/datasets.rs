//! Synthetic pretraining and downstream tasks.
//!
//! The pretraining distribution is a Gaussian mixture whose fine classes are
//! grouped into superclasses. Downstream tasks form a similarity ladder:
//! `coarse` relabels the same mixture by superclass, `disjoint` draws fresh
//! classes in the same feature space, and `dissimilar` draws fresh classes
//! in a rotated space with anisotropic noise.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_seed2, mix64, rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub id: u64,
    pub x: Vec<f64>,
    pub y: usize,
}

impl Point {
    pub fn new(id: u64, x: Vec<f64>, y: usize) -> Self {
        Self { id, x, y }
    }
}

/// Labeled points with unique ids and a declared class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    class_count: usize,
    points: Vec<Point>,
}

impl Dataset {
    pub fn new(class_count: usize, points: Vec<Point>) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::ClassCount);
        }
        let dim = points.first().map_or(0, |p| p.x.len());
        let mut seen = HashSet::with_capacity(points.len());
        for p in &points {
            if p.y >= class_count {
                return Err(Error::Label {
                    label: p.y,
                    classes: class_count,
                });
            }
            if p.x.len() != dim {
                return Err(Error::InputShape {
                    expected: dim,
                    actual: p.x.len(),
                });
            }
            if !seen.insert(p.id) {
                return Err(Error::Spec(format!("duplicate point id {}", p.id)));
            }
        }
        Ok(Self {
            class_count,
            points,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.x.len())
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.points.iter().map(|p| p.id)
    }

    /// Points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            class_count: self.class_count,
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
        }
    }

    /// Relabels every point through `map` (old label -> new label).
    pub fn relabel(&self, map: &[usize], class_count: usize) -> Result<Self> {
        let points = self
            .points
            .iter()
            .map(|p| {
                let y = *map.get(p.y).ok_or(Error::Label {
                    label: p.y,
                    classes: map.len(),
                })?;
                Ok(Point::new(p.id, p.x.clone(), y))
            })
            .collect::<Result<_>>()?;
        Self::new(class_count, points)
    }

    /// Writes `id,y,x_0..x_{d-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string(), "y".to_string()];
        header.extend((0..self.feature_dim()).map(|i| format!("x_{i}")));
        w.write_record(&header)?;
        for p in &self.points {
            let mut rec = vec![p.id.to_string(), p.y.to_string()];
            rec.extend(p.x.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a CSV written by [`Dataset::write_csv`]. Without an explicit
    /// class count, one more than the largest label is assumed.
    pub fn read_csv(path: &Path, class_count: Option<usize>) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let mut points = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(Error::Parse(format!("short dataset row in {}", path.display())));
            }
            let id = parse(&rec[0])?;
            let y = parse(&rec[1])?;
            let x = rec.iter().skip(2).map(parse).collect::<Result<Vec<f64>>>()?;
            points.push(Point::new(id, x, y));
        }
        let classes = class_count.unwrap_or_else(|| points.iter().map(|p| p.y + 1).max().unwrap_or(1));
        Self::new(classes, points)
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("cannot parse {s:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Pretrain,
    Coarse,
    Disjoint,
    Dissimilar,
}

impl TaskKind {
    /// Default class count of a derived task; `None` for tasks whose count
    /// follows from the pretraining spec.
    pub fn default_classes(self) -> Option<usize> {
        match self {
            TaskKind::Disjoint => Some(10),
            TaskKind::Dissimilar => Some(8),
            TaskKind::Pretrain | TaskKind::Coarse => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Noise {
    /// `class_cov_scale^2 * I`.
    Isotropic,
    /// `R^T diag(s)^2 R`; `rotation` is row-major `d x d`.
    Anisotropic {
        rotation: Vec<Vec<f64>>,
        axis_scales: Vec<f64>,
    },
}

/// Parameters of the pretraining mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecParams {
    pub feature_dim: usize,
    pub fine_classes: usize,
    pub coarse_classes: usize,
    /// Radius of the sphere carrying the superclass centers.
    pub separation: f64,
    /// Typical distance of a fine-class mean from its superclass center.
    pub fine_spread: f64,
    /// Per-coordinate noise standard deviation.
    pub cov_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SpecParams {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            fine_classes: 20,
            coarse_classes: 5,
            separation: 2.0,
            fine_spread: 0.5,
            cov_scale: 1.0,
            seed: 0,
        }
    }
}

/// Gaussian mixture with one component per class mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub kind: TaskKind,
    pub feature_dim: usize,
    /// One mean per mixture component; components are drawn uniformly.
    pub class_means: Vec<Vec<f64>>,
    /// Label emitted by each component.
    pub component_labels: Vec<usize>,
    pub class_count: usize,
    /// Fine -> coarse table of the pretraining mixture.
    pub superclass_map: Vec<usize>,
    pub coarse_class_count: usize,
    pub class_cov_scale: f64,
    pub noise: Noise,
    pub separation: f64,
    pub fine_spread: f64,
    pub seed: u64,
}

fn gaussian_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn sphere_point(rng: &mut Rng, d: usize, radius: f64) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|a| a * radius / norm).collect();
        }
    }
}

fn perturbed(rng: &mut Rng, center: &[f64], spread: f64) -> Vec<f64> {
    let d = center.len();
    let scale = spread / (d as f64).sqrt();
    center
        .iter()
        .zip(gaussian_vec(rng, d))
        .map(|(c, z)| c + scale * z)
        .collect()
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Spec(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

fn check_distinct(means: &[Vec<f64>]) -> Result<()> {
    for (i, a) in means.iter().enumerate() {
        for b in &means[i + 1..] {
            if a == b {
                return Err(Error::Spec("class means are not pairwise distinct".into()));
            }
        }
    }
    Ok(())
}

/// Pretraining mixture: superclass centers on a sphere of radius
/// `separation`, fine means perturbed around them, fine class `i` belonging
/// to superclass `i mod coarse_classes`.
pub fn make_pretrain_spec(params: &SpecParams) -> Result<DistributionSpec> {
    let SpecParams {
        feature_dim: d,
        fine_classes,
        coarse_classes,
        separation,
        fine_spread,
        cov_scale,
        seed,
    } = *params;
    if d == 0 || fine_classes == 0 || coarse_classes == 0 {
        return Err(Error::Spec("dimensions and class counts must be positive".into()));
    }
    if fine_classes % coarse_classes != 0 {
        return Err(Error::Spec(format!(
            "{fine_classes} fine classes do not split evenly into {coarse_classes} superclasses"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) || !(fine_spread >= 0.0) {
        return Err(Error::Spec("separation and fine_spread must be nonnegative".into()));
    }
    check_positive("cov_scale", cov_scale)?;

    let mut r = rng(derive_seed(seed, "pretrain-spec", 0));
    let centers: Vec<Vec<f64>> = (0..coarse_classes)
        .map(|_| sphere_point(&mut r, d, separation))
        .collect();
    let superclass_map: Vec<usize> = (0..fine_classes).map(|i| i % coarse_classes).collect();
    let class_means: Vec<Vec<f64>> = superclass_map
        .iter()
        .map(|&c| perturbed(&mut r, &centers[c], fine_spread))
        .collect();
    check_distinct(&class_means)?;

    Ok(DistributionSpec {
        kind: TaskKind::Pretrain,
        feature_dim: d,
        class_means,
        component_labels: (0..fine_classes).collect(),
        class_count: fine_classes,
        superclass_map,
        coarse_class_count: coarse_classes,
        class_cov_scale: cov_scale,
        noise: Noise::Isotropic,
        separation,
        fine_spread,
        seed,
    })
}

/// Downstream task with the default class count for `kind`.
pub fn derive_task(spec: &DistributionSpec, kind: TaskKind, seed: u64) -> Result<DistributionSpec> {
    derive_task_with(spec, kind, kind.default_classes(), seed)
}

/// Downstream task of the given kind. `classes` overrides the class count
/// of disjoint and dissimilar tasks.
pub fn derive_task_with(
    spec: &DistributionSpec,
    kind: TaskKind,
    classes: Option<usize>,
    seed: u64,
) -> Result<DistributionSpec> {
    let d = spec.feature_dim;
    let mut r = rng(derive_seed(seed, "derive-task", kind as u64));
    let fresh_classes = || -> Result<usize> {
        match classes.or(kind.default_classes()) {
            Some(0) | None => Err(Error::Spec(format!("{kind:?} task needs a positive class count"))),
            Some(k) => Ok(k),
        }
    };
    let derived = match kind {
        TaskKind::Pretrain => return Err(Error::Spec("cannot derive a pretraining task".into())),
        TaskKind::Coarse => DistributionSpec {
            kind,
            component_labels: spec
                .component_labels
                .iter()
                .map(|&fine| spec.superclass_map[fine])
                .collect(),
            class_count: spec.coarse_class_count,
            seed,
            ..spec.clone()
        },
        TaskKind::Disjoint => {
            let k = fresh_classes()?;
            let class_means: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let c = sphere_point(&mut r, d, spec.separation);
                    perturbed(&mut r, &c, spec.fine_spread)
                })
                .collect();
            check_distinct(&class_means)?;
            DistributionSpec {
                kind,
                feature_dim: d,
                class_means,
                component_labels: (0..k).collect(),
                class_count: k,
                superclass_map: (0..k).collect(),
                coarse_class_count: k,
                class_cov_scale: spec.class_cov_scale,
                noise: Noise::Isotropic,
                separation: spec.separation,
                fine_spread: spec.fine_spread,
                seed,
            }
        }
        TaskKind::Dissimilar => {
            let k = fresh_classes()?;
            let rotation = random_rotation(&mut r, d);
            let class_means: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let c = sphere_point(&mut r, d, spec.separation);
                    mat_vec(&rotation, &perturbed(&mut r, &c, spec.fine_spread))
                })
                .collect();
            check_distinct(&class_means)?;
            let axis_scales = (0..d)
                .map(|_| spec.class_cov_scale * r.random_range(-std::f64::consts::LN_2..std::f64::consts::LN_2).exp())
                .collect();
            DistributionSpec {
                kind,
                feature_dim: d,
                class_means,
                component_labels: (0..k).collect(),
                class_count: k,
                superclass_map: (0..k).collect(),
                coarse_class_count: k,
                class_cov_scale: spec.class_cov_scale,
                noise: Noise::Anisotropic {
                    rotation,
                    axis_scales,
                },
                separation: spec.separation,
                fine_spread: spec.fine_spread,
                seed,
            }
        }
    };
    Ok(derived)
}

/// Orthonormal matrix from Gram-Schmidt on a Gaussian matrix.
fn random_rotation(r: &mut Rng, d: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v = gaussian_vec(r, d);
        for q in &rows {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

impl DistributionSpec {
    pub fn fine_class_count(&self) -> usize {
        self.class_means.len()
    }

    /// Draws point `index` of the stream keyed by `seed`.
    pub fn draw(&self, seed: u64, index: u64) -> Point {
        let mut r = rng(derive_seed(seed, "point", index));
        let component = r.random_range(0..self.class_means.len());
        let z = gaussian_vec(&mut r, self.feature_dim);
        let offset = match &self.noise {
            Noise::Isotropic => z.into_iter().map(|v| v * self.class_cov_scale).collect(),
            Noise::Anisotropic {
                rotation,
                axis_scales,
            } => {
                let scaled: Vec<f64> = z.iter().zip(axis_scales).map(|(v, s)| v * s).collect();
                // R^T maps axis coordinates back to feature space.
                (0..self.feature_dim)
                    .map(|i| rotation.iter().zip(&scaled).map(|(row, s)| row[i] * s).sum())
                    .collect::<Vec<f64>>()
            }
        };
        let x = self.class_means[component]
            .iter()
            .zip(offset)
            .map(|(m, o)| m + o)
            .collect();
        Point::new(
            derive_seed(seed, "id", index),
            x,
            self.component_labels[component],
        )
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `pool_size` i.i.d. draws from `spec`.
pub fn sample_population(spec: &DistributionSpec, pool_size: usize, seed: u64) -> Result<Dataset> {
    sample_excluding(spec, pool_size, seed, &HashSet::new())
}

/// `n` i.i.d. draws, skipping any draw whose id is in `exclude`.
pub fn sample_excluding(
    spec: &DistributionSpec,
    n: usize,
    seed: u64,
    exclude: &HashSet<u64>,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Spec("sample size must be positive".into()));
    }
    let mut points = Vec::with_capacity(n);
    let mut index = 0u64;
    while points.len() < n {
        let p = spec.draw(seed, index);
        index += 1;
        if !exclude.contains(&p.id) {
            points.push(p);
        }
    }
    Dataset::new(spec.class_count, points)
}

fn hash_features(x: &[f64]) -> u64 {
    x.iter()
        .fold(0x51_7CC1_B727_220Au64, |h, v| mix64(h ^ v.to_bits()))
}

/// Keyed augmentation of a feature vector: with probability one half a
/// coordinate-pair swap (the analog of a horizontal flip), then Gaussian
/// jitter of scale `strength`. Index 0 is the identity.
pub fn augment(x: &[f64], aug_index: usize, strength: f64, master_seed: u64) -> Vec<f64> {
    let mut out = x.to_vec();
    if aug_index == 0 {
        return out;
    }
    let mut r = rng(derive_seed2(
        master_seed,
        "augment",
        hash_features(x),
        aug_index as u64,
    ));
    let d = out.len();
    if d >= 2 && r.random_bool(0.5) {
        let i = r.random_range(0..d);
        let mut j = r.random_range(0..d - 1);
        if j >= i {
            j += 1;
        }
        out.swap(i, j);
    }
    if strength > 0.0 {
        for v in &mut out {
            let z: f64 = StandardNormal.sample(&mut r);
            *v += strength * z;
        }
    }
    out
}

/// Challenge points drawn from the population pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengeSet {
    pub points: Vec<Point>,
}

impl ChallengeSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.points.iter().map(|p| p.id).collect()
    }
}

/// Uniform sample of `count` pool points without replacement, kept in pool
/// order.
pub fn designate_challenges(pool: &Dataset, count: usize, seed: u64) -> Result<ChallengeSet> {
    if count > pool.len() {
        return Err(Error::Size {
            requested: count,
            available: pool.len(),
        });
    }
    let mut r = rng(derive_seed(seed, "challenges", 0));
    let mut picked = rand::seq::index::sample(&mut r, pool.len(), count).into_vec();
    picked.sort_unstable();
    Ok(ChallengeSet {
        points: picked.into_iter().map(|i| pool.points()[i].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> SpecParams {
        SpecParams {
            feature_dim: 8,
            fine_classes: 20,
            coarse_classes: 5,
            separation: 4.0,
            fine_spread: 1.0,
            cov_scale: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn superclass_grouping_rule() {
        let spec = make_pretrain_spec(&small_params()).unwrap();
        for (i, &c) in spec.superclass_map.iter().enumerate() {
            assert_eq!(c, i % 5);
        }
        assert_eq!(spec.fine_class_count(), 20);
    }

    #[test]
    fn uneven_superclasses_rejected() {
        let mut p = small_params();
        p.coarse_classes = 3;
        assert!(matches!(make_pretrain_spec(&p), Err(Error::Spec(_))));
    }

    #[test]
    fn zero_separation_centers_coincide() {
        let mut p = small_params();
        p.separation = 0.0;
        p.fine_spread = 0.0;
        // All means collapse onto the origin, which violates distinctness.
        assert!(make_pretrain_spec(&p).is_err());

        p.fine_spread = 1.0;
        let spec = make_pretrain_spec(&p).unwrap();
        // Superclass center is the origin: members of a superclass scatter
        // around zero only through the fine perturbation.
        let mean_norm: f64 = spec
            .class_means
            .iter()
            .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / 20.0;
        assert!(mean_norm < 3.0);
    }

    #[test]
    fn spec_is_deterministic() {
        assert_eq!(
            make_pretrain_spec(&small_params()).unwrap(),
            make_pretrain_spec(&small_params()).unwrap()
        );
    }

    #[test]
    fn empty_pool_rejected() {
        let spec = make_pretrain_spec(&small_params()).unwrap();
        assert!(sample_population(&spec, 0, 1).is_err());
    }

    #[test]
    fn class_frequencies_and_means() {
        let spec = make_pretrain_spec(&small_params()).unwrap();
        let n = 50_000;
        let data = sample_population(&spec, n, 3).unwrap();
        let k = spec.class_count;
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; spec.feature_dim]; k];
        for p in data.points() {
            counts[p.y] += 1;
            for (s, v) in sums[p.y].iter_mut().zip(&p.x) {
                *s += v;
            }
        }
        for c in 0..k {
            let freq = counts[c] as f64 / n as f64;
            assert!((freq - 1.0 / k as f64).abs() < 0.02, "class {c} frequency {freq}");
            // 3 sigma on the norm of the mean error, which covers all
            // coordinates jointly instead of 160 separate 3-sigma checks.
            let sigma = spec.class_cov_scale / (counts[c] as f64).sqrt();
            let err2: f64 = sums[c]
                .iter()
                .zip(&spec.class_means[c])
                .map(|(s, m)| (s / counts[c] as f64 - m).powi(2))
                .sum();
            let d = spec.feature_dim as f64;
            assert!(err2.sqrt() < sigma * (d.sqrt() + 3.0), "class {c} mean error {}", err2.sqrt());
            for (s, m) in sums[c].iter().zip(&spec.class_means[c]) {
                assert!((s / counts[c] as f64 - m).abs() < 4.5 * sigma);
            }
        }
    }

    #[test]
    fn coarse_relabel_commutes_with_sampling() {
        let spec = make_pretrain_spec(&small_params()).unwrap();
        let coarse = derive_task(&spec, TaskKind::Coarse, 11).unwrap();
        let fine = sample_population(&spec, 300, 5).unwrap();
        let relabeled = fine.relabel(&spec.superclass_map, spec.coarse_class_count).unwrap();
        let direct = sample_population(&coarse, 300, 5).unwrap();
        assert_eq!(relabeled, direct);
        let p7 = fine.points().iter().find(|p| p.y == 7).unwrap();
        let same = direct.points().iter().find(|p| p.id == p7.id).unwrap();
        assert_eq!(same.y, spec.superclass_map[7]);
        assert_eq!(spec.superclass_map[7], 2);
    }

    #[test]
    fn exclusion_skips_ids() {
        let spec = make_pretrain_spec(&small_params()).unwrap();
        let pop = sample_population(&spec, 100, 5).unwrap();
        let exclude: HashSet<u64> = pop.ids().collect();
        let coarse = derive_task(&spec, TaskKind::Coarse, 1).unwrap();
        let ft = sample_excluding(&coarse, 100, 5, &exclude).unwrap();
        // Same seed would otherwise reproduce the population verbatim.
        assert!(ft.ids().all(|id| !exclude.contains(&id)));
        assert_eq!(ft.len(), 100);
    }

    #[test]
    fn disjoint_means_are_new() {
        let spec = make_pretrain_spec(&small_params()).unwrap();
        let dj = derive_task(&spec, TaskKind::Disjoint, 2).unwrap();
        assert_eq!(dj.class_count, 10);
        assert_eq!(dj.feature_dim, spec.feature_dim);
        let min_dist = dj
            .class_means
            .iter()
            .flat_map(|a| spec.class_means.iter().map(move |b| (a, b)))
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(min_dist > 1e-6);
    }

    #[test]
    fn dissimilar_rotation_is_orthonormal() {
        let spec = make_pretrain_spec(&small_params()).unwrap();
        let ds = derive_task(&spec, TaskKind::Dissimilar, 2).unwrap();
        assert_eq!(ds.class_count, 8);
        let Noise::Anisotropic { rotation, axis_scales } = &ds.noise else {
            panic!("dissimilar task must be anisotropic");
        };
        assert_eq!(axis_scales.len(), ds.feature_dim);
        let d = ds.feature_dim;
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| rotation[k][i] * rotation[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pretrain_kind_cannot_be_derived() {
        let spec = make_pretrain_spec(&small_params()).unwrap();
        assert!(derive_task(&spec, TaskKind::Pretrain, 0).is_err());
    }

    #[test]
    fn augmentation_contract() {
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        assert_eq!(augment(&x, 0, 0.5, 9), x);
        assert_eq!(augment(&x, 3, 0.5, 9), augment(&x, 3, 0.5, 9));
        assert_ne!(augment(&x, 3, 0.5, 9), augment(&x, 4, 0.5, 9));
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut swapped = 0;
        for j in 1..41 {
            let a = augment(&x, j, 0.0, 9);
            swapped += usize::from(a != x);
            assert!((norm(&a) - norm(&x)).abs() < 1e-12);
            let mut sa = a.clone();
            let mut sx = x.clone();
            sa.sort_by(f64::total_cmp);
            sx.sort_by(f64::total_cmp);
            assert_eq!(sa, sx);
        }
        // About half the views swap; 40 fair coins land in 8..=32 with
        // probability above 0.9999.
        assert!((8..=32).contains(&swapped), "{swapped} of 40 swapped");
    }

    #[test]
    fn challenge_designation() {
        let spec = make_pretrain_spec(&small_params()).unwrap();
        let pool = sample_population(&spec, 50_000, 1).unwrap();
        let all = designate_challenges(&pool.select(&(0..100).collect::<Vec<_>>()), 100, 4).unwrap();
        assert_eq!(all.len(), 100);
        assert!(designate_challenges(&pool, 0, 4).unwrap().is_empty());
        let a = designate_challenges(&pool, 1000, 1).unwrap();
        let b = designate_challenges(&pool, 1000, 2).unwrap();
        assert_ne!(a.ids(), b.ids());
        let ids: HashSet<u64> = pool.ids().collect();
        assert!(a.ids().iter().all(|id| ids.contains(id)));
        assert!(matches!(
            designate_challenges(&pool, 50_001, 1),
            Err(Error::Size { .. })
        ));
    }

    #[test]
    fn population_ids_unique_and_stable() {
        let spec = make_pretrain_spec(&small_params()).unwrap();
        let a = sample_population(&spec, 2000, 8).unwrap();
        let b = sample_population(&spec, 2000, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ids().collect::<HashSet<_>>().len(), 2000);
    }

    #[test]
    fn csv_round_trip() {
        let spec = make_pretrain_spec(&small_params()).unwrap();
        let data = sample_population(&spec, 25, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        data.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path, Some(20)).unwrap();
        assert_eq!(back, data);
    }
}
