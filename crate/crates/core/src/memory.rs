//! Herding replay memory: per task, the exemplars closest to their class
//! center in the task autoencoder's latent space.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;

use crate::adapters::Sample;
use crate::backbone::TokenSequence;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::router::{ae_input, TaskAutoencoder};

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayItem {
    pub tokens: TokenSequence,
    pub label: usize,
    pub latent: Vec<f32>,
}

impl ReplayItem {
    /// Stored payload size: token floats, latent floats and the label.
    pub fn byte_size(&self) -> usize {
        (self.tokens.tensor().len() + self.latent.len()) * std::mem::size_of::<f32>() + std::mem::size_of::<u32>()
    }
}

/// Exemplars of one task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskMemory {
    pub items: Vec<ReplayItem>,
    pub budget: usize,
    pub classes: Vec<usize>,
}

impl TaskMemory {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn byte_size(&self) -> usize {
        self.items.iter().map(ReplayItem::byte_size).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayMemory {
    tasks: BTreeMap<usize, TaskMemory>,
}

impl ReplayMemory {
    pub fn new() -> Self {
        ReplayMemory::default()
    }

    pub fn insert(&mut self, task: usize, mem: TaskMemory) {
        self.tasks.insert(task, mem);
    }

    pub fn get(&self, task: usize) -> Option<&TaskMemory> {
        self.tasks.get(&task)
    }

    pub fn tasks(&self) -> impl Iterator<Item = (usize, &TaskMemory)> {
        self.tasks.iter().map(|(&t, m)| (t, m))
    }

    pub fn byte_size(&self) -> usize {
        self.tasks.values().map(TaskMemory::byte_size).sum()
    }
}

/// Mean of latent codes.
pub fn mean_latent(latents: &[&[f32]]) -> Result<Vec<f32>> {
    let first = latents
        .first()
        .ok_or_else(|| Error::Memory("class center of an empty class".into()))?;
    let mut acc = vec![0.0f64; first.len()];
    for l in latents {
        if l.len() != acc.len() {
            return Err(Error::shape("class center", &[acc.len()], &[l.len()]));
        }
        acc.iter_mut().zip(l.iter()).for_each(|(a, &v)| *a += v as f64);
    }
    let n = latents.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

pub fn latent_code(ae: &TaskAutoencoder, tokens: &TokenSequence) -> Result<Vec<f32>> {
    ae.encode(&ae_input(tokens)?)
}

pub fn class_center(ae: &TaskAutoencoder, tokens: &[&TokenSequence]) -> Result<Vec<f32>> {
    let latents: Vec<Vec<f32>> = tokens.iter().map(|t| latent_code(ae, t)).collect::<Result<_>>()?;
    let refs: Vec<&[f32]> = latents.iter().map(Vec::as_slice).collect();
    mean_latent(&refs)
}

fn euclidean(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Per-class quotas: `M / U` each, the remainder going to the lowest classes.
pub fn quotas(budget: usize, classes: usize) -> Result<Vec<usize>> {
    if classes == 0 || budget < classes {
        return Err(Error::Memory(format!(
            "replay budget {budget} must cover at least one exemplar for each of {classes} classes"
        )));
    }
    let (q, rem) = (budget / classes, budget % classes);
    Ok((0..classes).map(|i| q + usize::from(i < rem)).collect())
}

/// Dataset indices chosen by herding, grouped by class in `classes` order
/// and ranked by distance within each class. Ties go to the lower index.
pub fn herd_indices(latents: &[Vec<f32>], labels: &[usize], classes: &[usize], budget: usize) -> Result<Vec<usize>> {
    if latents.len() != labels.len() {
        return Err(Error::shape("herding", &[latents.len()], &[labels.len()]));
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let quota = quotas(budget, sorted.len())?;
    let mut out = Vec::with_capacity(budget);
    for (&class, &q) in sorted.iter().zip(&quota) {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            warn!("class {class} has no samples; replay memory will hold fewer than {budget} items");
            continue;
        }
        if members.len() < q {
            warn!("class {class} has {} samples for a quota of {q}", members.len());
        }
        let refs: Vec<&[f32]> = members.iter().map(|&i| latents[i].as_slice()).collect();
        let center = mean_latent(&refs)?;
        let mut ranked: Vec<(f32, usize)> = members.iter().map(|&i| (euclidean(&latents[i], &center), i)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(ranked.into_iter().take(q).map(|(_, i)| i));
    }
    Ok(out)
}

/// Builds the replay memory of one task from its training data.
pub fn herd_select(ae: &TaskAutoencoder, data: &[Sample], classes: &[usize], budget: usize) -> Result<TaskMemory> {
    let latents: Vec<Vec<f32>> = data.iter().map(|s| latent_code(ae, &s.tokens)).collect::<Result<_>>()?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let idx = herd_indices(&latents, &labels, classes, budget)?;
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    Ok(TaskMemory {
        items: idx
            .into_iter()
            .map(|i| ReplayItem {
                tokens: data[i].tokens.clone(),
                label: data[i].label,
                latent: latents[i].clone(),
            })
            .collect(),
        budget,
        classes: sorted,
    })
}

/// One epoch's worth of replay batches: a seeded shuffle of `0..len` cut
/// into chunks of `batch_size`.
pub fn replay_batches(len: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Memory("replay from an empty memory".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;

    #[test]
    fn center_examples() {
        assert_eq!(mean_latent(&[&[3.0, -1.0]]).unwrap(), vec![3.0, -1.0]);
        assert_eq!(mean_latent(&[&[1.0], &[2.0]]).unwrap(), vec![1.5]);
        assert!(mean_latent(&[]).is_err());
    }

    #[test]
    fn quota_remainder_goes_low() {
        assert_eq!(quotas(7, 3).unwrap(), vec![3, 2, 2]);
        assert_eq!(quotas(64, 2).unwrap(), vec![32, 32]);
        assert!(quotas(1, 2).is_err());
    }

    #[test]
    fn hand_ranked_class() {
        let latents = vec![vec![0.0], vec![1.0], vec![5.0]];
        let idx = herd_indices(&latents, &[4, 4, 4], &[4], 2).unwrap();
        assert_eq!(idx, vec![1, 0]);
    }

    #[test]
    fn whole_class_when_quota_exceeds_size() {
        let latents = vec![vec![0.0], vec![1.0], vec![9.0], vec![2.0]];
        let mut idx = herd_indices(&latents, &[0, 0, 1, 1], &[0, 1], 8).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn missing_class_contributes_nothing() {
        let latents = vec![vec![0.0], vec![1.0]];
        let idx = herd_indices(&latents, &[0, 0], &[0, 1], 4).unwrap();
        assert_eq!(idx.len(), 2);
    }

    #[test]
    fn replay_batches_partition_and_replay() {
        let a = replay_batches(10, 3, &mut rng(4)).unwrap();
        let b = replay_batches(10, 3, &mut rng(4)).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(replay_batches(4, 16, &mut rng(1)).unwrap().len(), 1);
        assert!(replay_batches(0, 4, &mut rng(1)).is_err());
    }
}
