//! Non-IID client partitioning and initial labelled/unlabelled pools.
//!
//! Each class is split across clients by a proportion vector drawn from a
//! symmetric Dirichlet, with largest-remainder rounding so class totals are
//! preserved exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Sample ids and their labels before any client split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    sample_ids: Vec<usize>,
    labels: Vec<usize>,
    classes: usize,
}

impl DatasetIndex {
    pub fn new(sample_ids: Vec<usize>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if sample_ids.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} ids but {} labels",
                sample_ids.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {y} out of range for {classes} classes")));
        }
        let mut sorted = sample_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("sample ids are not unique".into()));
        }
        Ok(Self {
            sample_ids,
            labels,
            classes,
        })
    }

    /// Ids `0..labels.len()`.
    pub fn from_labels(labels: Vec<usize>, classes: usize) -> Result<Self> {
        Self::new((0..labels.len()).collect(), labels, classes)
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    /// Class frequencies of the whole index.
    pub fn prior(&self) -> Vec<f64> {
        let counts = class_histogram(&self.sample_ids, self.classes, |i| self.labels[i]);
        let total = self.len().max(1) as f64;
        counts.counts().iter().map(|&n| n as f64 / total).collect()
    }
}

/// Per-class counts of a labelled pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    counts: Vec<u64>,
}

impl ClassHistogram {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![0; classes],
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    /// `N_k`, the labelled pool size.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, class: usize) {
        self.counts[class] += 1;
    }
}

/// Histogram of `ids` where `label_of` maps a sample id to its class.
pub fn class_histogram(ids: &[usize], classes: usize, label_of: impl Fn(usize) -> usize) -> ClassHistogram {
    let mut hist = ClassHistogram::zeros(classes);
    for &id in ids {
        hist.add(label_of(id));
    }
    hist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub alpha: f64,
    pub prior: Vec<f64>,
    pub client_indices: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    /// Checks that the client lists are pairwise disjoint and cover `data` exactly.
    pub fn validate(&self, data: &DatasetIndex) -> Result<()> {
        let mut all: Vec<usize> = self.client_indices.iter().flatten().copied().collect();
        all.sort_unstable();
        let mut expect = data.sample_ids().to_vec();
        expect.sort_unstable();
        if all != expect {
            return Err(Error::Protocol(
                "partition is not a disjoint, exhaustive split of the dataset".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Draws from a symmetric Dirichlet(`alpha`) of dimension `k`.
///
/// Gamma variates are formed in log space (`ln G(a) = ln G(a+1) + ln(U)/a`), which keeps
/// the draw well defined for very small `alpha` where direct Gamma samples underflow.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    crate::nn::softmax(&logs)
}

/// Splits `total` items by `proportions`, flooring then handing out the remainder to
/// the largest fractional parts (lower index wins ties).
pub fn largest_remainder(total: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub fn dirichlet_partition(data: &DatasetIndex, clients: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    if clients == 0 {
        return Err(Error::Input("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Input(format!("Dirichlet concentration must be > 0, got {alpha}")));
    }
    if clients > data.len() {
        return Err(Error::Input(format!(
            "{clients} clients for a dataset of {} samples",
            data.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.classes()];
    for (&id, &y) in data.sample_ids().iter().zip(data.labels()) {
        by_class[y].push(id);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Input(format!("class {c} has no samples")));
    }

    let mut client_indices = vec![Vec::new(); clients];
    for (c, ids) in by_class.iter_mut().enumerate() {
        let mut rng = stream(seed, Purpose::Partition, &[c as u64]);
        let proportions = sample_dirichlet(alpha, clients, &mut rng);
        let allotment = largest_remainder(ids.len(), &proportions);
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let mut start = 0;
        for (k, n) in allotment.into_iter().enumerate() {
            client_indices[k].extend_from_slice(&ids[start..start + n]);
            start += n;
        }
    }
    for list in &mut client_indices {
        list.sort_unstable();
    }
    let plan = PartitionPlan {
        alpha,
        prior: data.prior(),
        client_indices,
    };
    plan.validate(data)?;
    Ok(plan)
}

/// Rounds half up (`round(0.5) == 1`).
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Chooses `round(fraction * |ids|)` labelled ids uniformly without replacement.
/// Both returned lists are sorted.
pub fn initial_label_split(ids: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if ids.is_empty() {
        return Err(Error::Input("cannot split an empty client pool".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Input(format!("labelled fraction must be in (0, 1), got {fraction}")));
    }
    let take = round_half_up(fraction * ids.len() as f64).min(ids.len());
    let mut shuffled = ids.to_vec();
    shuffled.sort_unstable();
    shuffled.shuffle(&mut stream(seed, Purpose::LabelSplit, &[]));
    let mut labelled = shuffled[..take].to_vec();
    let mut unlabelled = shuffled[take..].to_vec();
    labelled.sort_unstable();
    unlabelled.sort_unstable();
    Ok((labelled, unlabelled))
}

/// Total-variation distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(classes: usize, per_class: usize) -> DatasetIndex {
        let labels = (0..classes * per_class).map(|i| i % classes).collect();
        DatasetIndex::from_labels(labels, classes).unwrap()
    }

    fn client_distribution(data: &DatasetIndex, ids: &[usize]) -> Vec<f64> {
        let h = class_histogram(ids, data.classes(), |i| data.labels()[i]);
        let n = h.total().max(1) as f64;
        h.counts().iter().map(|&c| c as f64 / n).collect()
    }

    #[test]
    fn single_client_gets_everything() {
        let data = balanced(3, 10);
        let plan = dirichlet_partition(&data, 1, 0.3, 4).unwrap();
        assert_eq!(plan.client_indices[0], (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_more_clients_than_samples() {
        let data = balanced(2, 2);
        assert!(matches!(dirichlet_partition(&data, 5, 1.0, 0), Err(Error::Input(_))));
        assert!(dirichlet_partition(&data, 2, 0.0, 0).is_err());
    }

    #[test]
    fn partition_is_exact_and_deterministic() {
        let data = balanced(10, 57);
        for seed in 0..10 {
            let a = dirichlet_partition(&data, 7, 0.1, seed).unwrap();
            a.validate(&data).unwrap();
            assert_eq!(a, dirichlet_partition(&data, 7, 0.1, seed).unwrap());
        }
    }

    #[test]
    fn largest_remainder_preserves_totals() {
        assert_eq!(largest_remainder(10, &[0.25, 0.25, 0.5]), vec![3, 2, 5]);
        assert_eq!(largest_remainder(7, &[1.0 / 3.0; 3]), vec![3, 2, 2]);
        assert_eq!(largest_remainder(0, &[0.5, 0.5]), vec![0, 0]);
    }

    #[test]
    fn huge_alpha_tracks_prior() {
        let data = balanced(10, 200);
        for seed in 0..20 {
            let plan = dirichlet_partition(&data, 10, 1e6, seed).unwrap();
            for ids in &plan.client_indices {
                assert!(total_variation(&client_distribution(&data, ids), &plan.prior) < 0.05);
            }
        }
    }

    #[test]
    fn tiny_alpha_concentrates_clients() {
        let data = balanced(10, 200);
        let mut dominant = Vec::new();
        for seed in 0..20 {
            let plan = dirichlet_partition(&data, 10, 0.01, seed).unwrap();
            for ids in plan.client_indices.iter().filter(|ids| !ids.is_empty()) {
                let mut q = client_distribution(&data, ids);
                q.sort_by(|a, b| b.total_cmp(a));
                let mut mass = 0.0;
                let needed = q.iter().take_while(|&&p| {
                    let before = mass;
                    mass += p;
                    before < 0.9
                });
                dominant.push(needed.count());
            }
        }
        dominant.sort_unstable();
        assert!(dominant[dominant.len() / 2] <= 2, "{dominant:?}");
    }

    #[test]
    fn dirichlet_draws_are_distributions() {
        let mut rng = stream(1, Purpose::Partition, &[]);
        for &alpha in &[1e-3, 0.1, 1.0, 1e6] {
            let p = sample_dirichlet(alpha, 10, &mut rng);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn label_split_examples() {
        let ids: Vec<usize> = (1000..1500).collect();
        let (l, u) = initial_label_split(&ids, 0.1, 3).unwrap();
        assert_eq!((l.len(), u.len()), (50, 450));
        assert!(l.iter().all(|id| !u.contains(id)));
        assert_eq!((l.clone(), u.clone()), initial_label_split(&ids, 0.1, 3).unwrap());

        let (l, u) = initial_label_split(&[9], 0.5, 0).unwrap();
        assert_eq!((l, u), (vec![9], vec![]));

        assert!(initial_label_split(&[], 0.1, 0).is_err());
        assert!(initial_label_split(&ids, 1.0, 0).is_err());
    }

    #[test]
    fn histogram_examples() {
        let labels = [0, 0, 1];
        assert_eq!(class_histogram(&[], 3, |i| labels[i]).counts(), &[0, 0, 0]);
        let h = class_histogram(&[0, 1, 2], 3, |i| labels[i]);
        assert_eq!(h.counts(), &[2, 1, 0]);
        assert_eq!(h.total(), 3);
    }

    #[test]
    fn plan_json_round_trip() {
        let data = balanced(3, 5);
        let plan = dirichlet_partition(&data, 2, 1.0, 9).unwrap();
        assert_eq!(PartitionPlan::from_json(&plan.to_json().unwrap()).unwrap(), plan);
    }
}
