//! Episode-based evaluation, description ablations, pre-training subsets
//! and 2-D projection export.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, RelationId, RelationType};
use crate::encoder::RelationRepresentation;
use crate::episodic::{apply_prompt_dropout, compute_prototypes, predict, sample_episode, FewShotDataset};
use crate::error::{check_probability, LpdError, Result};
use crate::model::RelationModel;
use crate::rng::{derive_seed, seeded, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub n_episodes: usize,
    pub alpha_test: f64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_way: 5,
            k_shot: 1,
            q_query: 1,
            n_episodes: 2000,
            alpha_test: 0.0,
            seed: 0,
        }
    }
}

/// Counts of (gold relation, predicted relation) over all queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub relations: Vec<RelationId>,
    /// `counts[gold][predicted]`, indexed like `relations`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    fn new(relations: Vec<RelationId>) -> Self {
        let n = relations.len();
        ConfusionMatrix {
            relations,
            counts: vec![vec![0; n]; n],
        }
    }

    fn index(&self, id: RelationId) -> usize {
        self.relations.binary_search(&id).expect("relation in matrix")
    }

    /// The pair of distinct relations mistaken for each other most often,
    /// counting both directions. Ties go to the lowest indices.
    pub fn most_confused_pair(&self) -> Option<(RelationId, RelationId)> {
        let n = self.relations.len();
        let mut best: Option<(u64, usize, usize)> = None;
        for i in 0..n {
            for j in i + 1..n {
                let c = self.counts[i][j] + self.counts[j][i];
                if best.is_none_or(|(b, _, _)| c > b) {
                    best = Some((c, i, j));
                }
            }
        }
        best.map(|(_, i, j)| (self.relations[i], self.relations[j]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_episodes: usize,
    pub accuracy: f64,
    /// Sample standard deviation of accuracy across `seeds`; 0 for one seed.
    pub std_over_seeds: f64,
    pub seeds: Vec<u64>,
    pub alpha_test: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    /// Mean and spread of several runs of the same settings.
    pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports.first().ok_or_else(|| LpdError::invalid("nothing to aggregate"))?;
        let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        let mut confusion = first.confusion.clone();
        for r in &reports[1..] {
            if r.confusion.relations != confusion.relations {
                return Err(LpdError::invalid("reports cover different relations"));
            }
            for (row, other) in confusion.counts.iter_mut().zip(&r.confusion.counts) {
                for (c, o) in row.iter_mut().zip(other) {
                    *c += o;
                }
            }
        }
        Ok(EvalReport {
            accuracy: mean,
            std_over_seeds: std,
            seeds: reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
            confusion,
            ..first.clone()
        })
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{}-way {}-shot  alpha_test={:.2}  episodes={}  accuracy={:.4} +/- {:.4}  seeds={:?}",
            self.n_way, self.k_shot, self.alpha_test, self.n_episodes, self.accuracy, self.std_over_seeds, self.seeds
        )
    }
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Representations of every dataset instance with and without its prompt.
pub struct RepresentationCache {
    pub with_prompt: Vec<RelationRepresentation>,
    pub without_prompt: Vec<RelationRepresentation>,
}

impl RepresentationCache {
    pub fn build(model: &RelationModel, dataset: &FewShotDataset) -> Result<Self> {
        let mut with_prompt = Vec::with_capacity(dataset.len());
        let mut without_prompt = Vec::with_capacity(dataset.len());
        for inst in dataset.instances() {
            let desc = dataset.description(inst.relation_id);
            with_prompt.push(model.represent(inst, Some(desc))?);
            without_prompt.push(model.represent(inst, None)?);
        }
        Ok(RepresentationCache {
            with_prompt,
            without_prompt,
        })
    }

    /// Prompt-free representations only; `with_prompt` mirrors them.
    pub fn prompt_free(model: &RelationModel, dataset: &FewShotDataset) -> Result<Self> {
        let reps = dataset
            .instances()
            .iter()
            .map(|inst| model.represent(inst, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(RepresentationCache {
            with_prompt: reps.clone(),
            without_prompt: reps,
        })
    }
}

pub fn check_leakage(model: &RelationModel, dataset: &FewShotDataset) -> Result<()> {
    let overlap: Vec<RelationId> = dataset
        .relation_ids()
        .into_iter()
        .filter(|id| model.seen_relations.contains(id))
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(LpdError::Leakage(overlap))
    }
}

/// Accuracy of prototype classification over sampled episodes. Support
/// instances keep their prompt with probability `1 - alpha_test`; queries
/// never get one. Each episode draws from its own RNG stream.
pub fn evaluate(model: &RelationModel, dataset: &FewShotDataset, settings: &EvalSettings) -> Result<EvalReport> {
    check_leakage(model, dataset)?;
    let cache = RepresentationCache::build(model, dataset)?;
    evaluate_cached(&cache, dataset, settings)
}

/// Baseline path: every instance is encoded without a prompt, whatever the
/// dropout setting.
pub fn evaluate_prompt_free(
    model: &RelationModel,
    dataset: &FewShotDataset,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    check_leakage(model, dataset)?;
    let cache = RepresentationCache::prompt_free(model, dataset)?;
    evaluate_cached(&cache, dataset, settings)
}

pub fn evaluate_cached(
    cache: &RepresentationCache,
    dataset: &FewShotDataset,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    check_probability("alpha_test", settings.alpha_test)?;
    if settings.n_episodes == 0 {
        return Err(LpdError::invalid("n_episodes must be positive"));
    }
    let mut confusion = ConfusionMatrix::new(dataset.relation_ids());
    let mut correct = 0u64;
    let mut total = 0u64;
    for e in 0..settings.n_episodes {
        let mut rng = stream(settings.seed, e as u64);
        let ep = sample_episode(dataset, settings.n_way, settings.k_shot, settings.q_query, &mut rng)?;
        let mut support = Vec::with_capacity(ep.n_way());
        for row in &ep.support {
            let mut reps = Vec::with_capacity(row.len());
            for &i in row {
                let kept = apply_prompt_dropout("", settings.alpha_test, &mut rng)?.is_some();
                reps.push(if kept { &cache.with_prompt[i] } else { &cache.without_prompt[i] }.clone());
            }
            support.push(reps);
        }
        let protos = compute_prototypes(&support)?;
        for &(i, gold) in &ep.query {
            let pred = predict(&cache.without_prompt[i], &protos)?;
            correct += u64::from(pred == gold);
            total += 1;
            let (g, p) = (
                confusion.index(ep.relation_ids[gold]),
                confusion.index(ep.relation_ids[pred]),
            );
            confusion.counts[g][p] += 1;
        }
    }
    Ok(EvalReport {
        n_way: settings.n_way,
        k_shot: settings.k_shot,
        n_episodes: settings.n_episodes,
        accuracy: correct as f64 / total as f64,
        std_over_seeds: 0.0,
        seeds: vec![settings.seed],
        alpha_test: settings.alpha_test,
        confusion,
    })
}

/// Runs `run(alpha)` for each alpha and collects `(alpha, accuracy)`.
pub fn sweep_alpha<F>(alphas: &[f64], mut run: F) -> Result<Vec<(f64, f64)>>
where
    F: FnMut(f64) -> Result<f64>,
{
    alphas
        .iter()
        .map(|&a| {
            check_probability("alpha", a)?;
            Ok((a, run(a)?))
        })
        .collect()
}

/// Deletes `ceil(fraction * len)` randomly chosen tokens from each
/// description, always keeping at least one token. The deleted subset
/// depends only on `seed` and the relation id.
pub fn corrupt_descriptions(relations: &[RelationType], fraction: f64, seed: u64) -> Result<Vec<RelationType>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(LpdError::invalid(format!("fraction must be in (0, 1), got {fraction}")));
    }
    let base = derive_seed(seed, "corrupt-descriptions");
    Ok(relations
        .iter()
        .map(|r| {
            let tokens = r.description_tokens();
            let len = tokens.len();
            let delete = ((fraction * len as f64).ceil() as usize).min(len.saturating_sub(1));
            let mut rng = stream(base, u64::from(r.id.0));
            let drop: BTreeSet<usize> = (0..len)
                .collect::<Vec<_>>()
                .choose_multiple(&mut rng, delete)
                .copied()
                .collect();
            let kept: Vec<&str> = tokens
                .iter()
                .enumerate()
                .filter(|(i, _)| !drop.contains(i))
                .map(|(_, t)| *t)
                .collect();
            RelationType {
                description: kept.join(" "),
                ..r.clone()
            }
        })
        .collect())
}

/// Reassigns descriptions by a random permutation with no fixed points.
pub fn shuffle_descriptions(relations: &[RelationType], seed: u64) -> Result<Vec<RelationType>> {
    let n = relations.len();
    if n < 2 {
        return Err(LpdError::invalid("shuffling descriptions needs at least 2 relations"));
    }
    let mut rng = seeded(derive_seed(seed, "shuffle-descriptions"));
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            break;
        }
    }
    Ok(relations
        .iter()
        .zip(&perm)
        .map(|(r, &p)| RelationType {
            description: relations[p].description.clone(),
            ..r.clone()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    ByClass,
    ByInstance,
}

/// Keeps `percent` of the instances of every relation (`ByInstance`) or
/// `percent` of the relations with all their instances (`ByClass`).
/// Order of the surviving instances is preserved.
pub fn subset_pretrain(corpus: &[Instance], mode: SubsetMode, percent: f64, seed: u64) -> Result<Vec<Instance>> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(LpdError::invalid(format!("percent must be in (0, 100], got {percent}")));
    }
    let mut groups: BTreeMap<RelationId, Vec<usize>> = BTreeMap::new();
    for (i, inst) in corpus.iter().enumerate() {
        groups.entry(inst.relation_id).or_default().push(i);
    }
    let frac = percent / 100.0;
    let mut keep = vec![false; corpus.len()];
    match mode {
        SubsetMode::ByInstance => {
            let base = derive_seed(seed, "subset-by-instance");
            for (id, members) in &groups {
                let n = ((frac * members.len() as f64).round() as usize).max(1);
                let mut rng = stream(base, u64::from(id.0));
                for &i in members.choose_multiple(&mut rng, n) {
                    keep[i] = true;
                }
            }
        }
        SubsetMode::ByClass => {
            let ids: Vec<RelationId> = groups.keys().copied().collect();
            let n = (frac * ids.len() as f64).round() as usize;
            let mut rng = seeded(derive_seed(seed, "subset-by-class"));
            for id in ids.choose_multiple(&mut rng, n) {
                for &i in &groups[id] {
                    keep[i] = true;
                }
            }
        }
    }
    let out: Vec<Instance> = corpus
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(inst, _)| inst.clone())
        .collect();
    if out.is_empty() {
        return Err(LpdError::invalid("subset is empty"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVector {
    pub label: String,
    pub role: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<(String, String, f64, f64)>,
    /// True when fewer than two directions carry variance; the missing
    /// axis is filled with zeros.
    pub degenerate: bool,
}

impl Projection {
    /// `(distance between the two class centroids, mean distance of points
    /// to their own centroid)` for the points labelled `a` and `b`,
    /// optionally restricted to one role.
    pub fn separation(&self, a: &str, b: &str, role: Option<&str>) -> Option<(f64, f64)> {
        let centroid = |label: &str| {
            let pts: Vec<(f64, f64)> = self
                .points
                .iter()
                .filter(|p| p.0 == label && role.is_none_or(|r| p.1 == r))
                .map(|p| (p.2, p.3))
                .collect();
            if pts.is_empty() {
                return None;
            }
            let n = pts.len() as f64;
            let c = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
            let spread = pts.iter().map(|p| ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt()).sum::<f64>();
            Some((c, spread, pts.len()))
        };
        let (ca, sa, na) = centroid(a)?;
        let (cb, sb, nb) = centroid(b)?;
        let between = ((ca.0 - cb.0).powi(2) + (ca.1 - cb.1).powi(2)).sqrt();
        Some((between, (sa + sb) / (na + nb) as f64))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "label,role,x,y")?;
        for (label, role, x, y) in &self.points {
            writeln!(w, "{label},{role},{x:.6},{y:.6}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Principal-component projection to two dimensions. Component signs are
/// fixed so that each axis's largest-magnitude loading is positive.
pub fn project(vectors: &[LabeledVector]) -> Result<Projection> {
    let labels: BTreeSet<&str> = vectors.iter().map(|v| v.label.as_str()).collect();
    if labels.len() < 2 {
        return Err(LpdError::invalid("projection needs at least 2 labels"));
    }
    let d = vectors[0].values.len();
    if d == 0 || vectors.iter().any(|v| v.values.len() != d) {
        return Err(LpdError::Shape("projection vectors must share a positive dimension".into()));
    }
    let n = vectors.len();
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i].values[j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let trace: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let tol = 1e-12 * trace.max(1e-300);
    let mut axes: Vec<Option<Vec<f64>>> = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        if eig.eigenvalues[k] > tol {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let pivot = v.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
            if pivot < 0.0 {
                v.iter_mut().for_each(|c| *c = -*c);
            }
            axes.push(Some(v));
        } else {
            axes.push(None);
        }
    }
    axes.resize(2, None);
    let degenerate = axes.iter().any(Option::is_none);
    let coord = |i: usize, axis: &Option<Vec<f64>>| {
        axis.as_ref()
            .map_or(0.0, |v| centered.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
    };
    let points = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| (v.label.clone(), v.role.clone(), coord(i, &axes[0]), coord(i, &axes[1])))
        .collect();
    Ok(Projection { points, degenerate })
}

pub fn export_projection(vectors: &[LabeledVector], out_path: &Path) -> Result<Projection> {
    let projection = project(vectors)?;
    if projection.degenerate {
        log::warn!("projection has fewer than two informative axes; missing axis set to zero");
    }
    projection.write_csv(out_path)?;
    Ok(projection)
}
