//! Task streams: disjoint class splits and pixel permutations.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rng, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    /// Global class ids, ascending.
    pub classes: Vec<usize>,
    /// Pixel permutation: output pixel `i` takes input pixel `perm[i]`.
    pub permutation: Option<Vec<usize>>,
}

/// Seeded partition of `classes` into `n_tasks` equal, disjoint subsets.
pub fn make_splits(classes: &[usize], n_tasks: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if n_tasks == 0 || classes.is_empty() || !classes.len().is_multiple_of(n_tasks) {
        return Err(Error::Config(format!(
            "{} classes cannot be split into {n_tasks} equal tasks",
            classes.len()
        )));
    }
    let mut shuffled = classes.to_vec();
    shuffled.shuffle(&mut rng(seed));
    let per = classes.len() / n_tasks;
    Ok(shuffled
        .chunks(per)
        .enumerate()
        .map(|(id, c)| {
            let mut classes = c.to_vec();
            classes.sort_unstable();
            TaskSpec {
                id,
                classes,
                permutation: None,
            }
        })
        .collect())
}

/// `n_tasks` seeded pixel permutations over a shared label set. With
/// `identity_first`, task 0 leaves images unchanged.
pub fn make_permutations(
    classes: &[usize],
    pixels: usize,
    n_tasks: usize,
    seed: u64,
    identity_first: bool,
) -> Result<Vec<TaskSpec>> {
    if n_tasks == 0 {
        return Err(Error::Config("at least one permutation task is required".into()));
    }
    let mut r = rng(seed);
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    Ok((0..n_tasks)
        .map(|id| {
            let mut perm: Vec<usize> = (0..pixels).collect();
            if !(identity_first && id == 0) {
                perm.shuffle(&mut r);
            }
            TaskSpec {
                id,
                classes: sorted.clone(),
                permutation: Some(perm),
            }
        })
        .collect())
}

pub fn permute(image: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let channels = image.shape().last().copied().unwrap_or(1);
    let pixels = image.len() / channels.max(1);
    if perm.len() != pixels {
        return Err(Error::shape("permute", &[pixels], &[perm.len()]));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(image.len());
    for &p in perm {
        out.extend_from_slice(&src[p * channels..(p + 1) * channels]);
    }
    Tensor::new(image.shape(), out)
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_classes_five_tasks() {
        let tasks = make_splits(&(0..10).collect::<Vec<_>>(), 5, 3).unwrap();
        assert_eq!(tasks.len(), 5);
        assert!(tasks.iter().all(|t| t.classes.len() == 2));
        let one = make_splits(&[4, 1, 2], 1, 0).unwrap();
        assert_eq!(one[0].classes, vec![1, 2, 4]);
        assert!(make_splits(&[0, 1, 2], 2, 0).is_err());
    }

    #[test]
    fn permutations_round_trip() {
        let img = Tensor::new(&[2, 3, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let tasks = make_permutations(&[0, 1], 6, 3, 9, true).unwrap();
        let id = tasks[0].permutation.as_ref().unwrap();
        assert_eq!(permute(&img, id).unwrap(), img);
        let p = tasks[1].permutation.as_ref().unwrap();
        let back = permute(&permute(&img, p).unwrap(), &invert(p)).unwrap();
        assert_eq!(back, img);
        assert_eq!(make_permutations(&[0, 1], 6, 3, 9, true).unwrap(), tasks);
    }
}
