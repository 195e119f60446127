use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{free_sorted, score, AllocError, AllocationRequest, Assignment, GaParams};
use crate::domain::NodeRecord;

/// One individual: `k` distinct indices into the free list, kept sorted.
#[derive(Debug, Clone, PartialEq)]
struct Genome {
    genes: Vec<usize>,
    fitness: f64,
}

struct Problem<'a> {
    perf: &'a [u32],
    k: usize,
    min_perf: u32,
}

impl Problem<'_> {
    fn genome(&self, mut genes: Vec<usize>) -> Genome {
        genes.sort_unstable();
        let fitness = score(genes.iter().map(|&i| self.perf[i]), self.min_perf);
        Genome { genes, fitness }
    }

    fn random<R: Rng>(&self, rng: &mut R) -> Genome {
        self.genome(index::sample(rng, self.perf.len(), self.k).into_vec())
    }

    /// Best block whose weakest member is each node in turn. Fitness reduces to
    /// 2·min + the middle members, so the strongest `k − 1` nodes at or above
    /// the anchor are the right companions.
    fn anchor_sweep(&self) -> Genome {
        let mut by_perf: Vec<usize> = (0..self.perf.len()).collect();
        by_perf.sort_by(|&a, &b| self.perf[b].cmp(&self.perf[a]).then(a.cmp(&b)));
        let mut best: Option<Genome> = None;
        for (pos, &anchor) in by_perf.iter().enumerate() {
            if pos + 1 < self.k {
                continue;
            }
            let mut genes: Vec<usize> = by_perf[..pos]
                .iter()
                .copied()
                .filter(|&i| self.perf[i] >= self.perf[anchor])
                .take(self.k - 1)
                .collect();
            if genes.len() + 1 < self.k {
                continue;
            }
            genes.push(anchor);
            let g = self.genome(genes);
            if best.as_ref().is_none_or(|b| better(&g, b)) {
                best = Some(g);
            }
        }
        best.unwrap_or_else(|| self.genome((0..self.k).collect()))
    }

    fn top_k(&self) -> Genome {
        let mut by_perf: Vec<usize> = (0..self.perf.len()).collect();
        by_perf.sort_by(|&a, &b| self.perf[b].cmp(&self.perf[a]).then(a.cmp(&b)));
        by_perf.truncate(self.k);
        self.genome(by_perf)
    }

    /// Keeps genes both parents share, fills the rest from either parent.
    fn crossover<R: Rng>(&self, a: &Genome, b: &Genome, rng: &mut R) -> Genome {
        let sa: BTreeSet<usize> = a.genes.iter().copied().collect();
        let sb: BTreeSet<usize> = b.genes.iter().copied().collect();
        let mut child: Vec<usize> = sa.intersection(&sb).copied().collect();
        let mut pool: Vec<usize> = sa.symmetric_difference(&sb).copied().collect();
        while child.len() < self.k && !pool.is_empty() {
            child.push(pool.swap_remove(rng.random_range(0..pool.len())));
        }
        self.genome(child)
    }

    /// Swaps each gene for an unused node with probability `rate`.
    fn mutate<R: Rng>(&self, g: &mut Genome, rate: f64, rng: &mut R) {
        let n = self.perf.len();
        if n == self.k {
            return;
        }
        let mut changed = false;
        for slot in 0..g.genes.len() {
            if rng.random::<f64>() < rate {
                let replacement = loop {
                    let c = rng.random_range(0..n);
                    if !g.genes.contains(&c) {
                        break c;
                    }
                };
                g.genes[slot] = replacement;
                changed = true;
            }
        }
        if changed {
            *g = self.genome(std::mem::take(&mut g.genes));
        }
    }
}

/// Higher fitness wins; equal fitness goes to the smaller index list, which
/// is the smaller id list since the free list is sorted by id.
fn better(a: &Genome, b: &Genome) -> bool {
    match a.fitness.partial_cmp(&b.fitness) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Equal) => a.genes < b.genes,
        _ => false,
    }
}

fn tournament<'a, R: Rng>(pop: &'a [Genome], rng: &mut R) -> &'a Genome {
    let mut pick = &pop[rng.random_range(0..pop.len())];
    for _ in 0..2 {
        let other = &pop[rng.random_range(0..pop.len())];
        if better(other, pick) {
            pick = other;
        }
    }
    pick
}

/// Genetic search for a good block. Deterministic for a fixed `rng_seed`.
///
/// The initial population always contains the anchor-sweep and top-k greedy
/// blocks, and the best individual survives every generation, so the result
/// is never worse than those seeds.
pub fn allocate_ga(
    request: &AllocationRequest,
    inventory: &[NodeRecord],
    params: &GaParams,
) -> Result<Assignment, AllocError> {
    params.validate()?;
    let free = free_sorted(inventory, request)?;
    let perf: Vec<u32> = free.iter().map(|n| n.spec.perf_score).collect();
    let problem = Problem {
        perf: &perf,
        k: request.node_count,
        min_perf: request.min_perf_score,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);

    let mut population = vec![problem.anchor_sweep(), problem.top_k()];
    while population.len() < params.population {
        population.push(problem.random(&mut rng));
    }
    let mut best = population.iter().fold(population[0].clone(), |b, g| {
        if better(g, &b) {
            g.clone()
        } else {
            b
        }
    });

    for _ in 0..params.generations {
        let mut next = Vec::with_capacity(params.population);
        next.push(best.clone());
        while next.len() < params.population {
            let a = tournament(&population, &mut rng);
            let b = tournament(&population, &mut rng);
            let mut child = if rng.random::<f64>() < params.crossover_rate {
                problem.crossover(a, b, &mut rng)
            } else {
                a.clone()
            };
            problem.mutate(&mut child, params.mutation_rate, &mut rng);
            if better(&child, &best) {
                best = child.clone();
            }
            next.push(child);
        }
        population = next;
    }

    Ok(Assignment {
        node_ids: best
            .genes
            .iter()
            .map(|&i| free[i].node_id.clone())
            .collect(),
        fitness: best.fitness,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::allocator::testutil::node;
    use crate::allocator::{allocate_exhaustive, fitness};

    fn mixed_inventory() -> Vec<NodeRecord> {
        [3, 40, 12, 12, 25, 3, 40, 25, 7, 12]
            .iter()
            .enumerate()
            .map(|(i, &p)| node(&format!("n{i:02}"), p))
            .collect()
    }

    #[test]
    fn only_feasible_pair_is_returned() {
        let inv = [node("x", 4), node("y", 9)];
        let a = allocate_ga(&AllocationRequest::new(2), &inv, &GaParams::default()).unwrap();
        assert_eq!(
            a.node_ids,
            vec!["x".into(), "y".into()] as Vec<crate::domain::NodeId>
        );
        assert_eq!(a.fitness, 8.0);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let inv = mixed_inventory();
        let params = GaParams {
            rng_seed: 7,
            ..GaParams::default()
        };
        let a = allocate_ga(&AllocationRequest::new(3), &inv, &params).unwrap();
        let b = allocate_ga(&AllocationRequest::new(3), &inv, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matches_oracle_on_mixed_tiers() {
        let inv = mixed_inventory();
        let req = AllocationRequest::new(3);
        let ga = allocate_ga(&req, &inv, &GaParams::default()).unwrap();
        let oracle = allocate_exhaustive(&req, &inv).unwrap();
        assert_eq!(ga.fitness, oracle.fitness);
    }

    #[test]
    fn reported_fitness_matches_nodes() {
        let inv = mixed_inventory();
        let req = AllocationRequest {
            node_count: 4,
            min_perf_score: 10,
        };
        let a = allocate_ga(&req, &inv, &GaParams::default()).unwrap();
        let chosen: Vec<NodeRecord> = inv
            .iter()
            .filter(|n| a.node_ids.contains(&n.node_id))
            .cloned()
            .collect();
        assert_eq!(fitness(&chosen, &req).unwrap(), a.fitness);
        let distinct: BTreeSet<_> = a.node_ids.iter().collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn insufficient_nodes() {
        let inv = mixed_inventory();
        assert!(matches!(
            allocate_ga(&AllocationRequest::new(11), &inv, &GaParams::default()),
            Err(AllocError::InsufficientFreeNodes {
                requested: 11,
                free: 10
            })
        ));
    }

    #[test]
    fn pure_search_without_seeds_still_improves() {
        // Crossover and mutation alone must never lose the elite.
        let inv = mixed_inventory();
        let perf: Vec<u32> = inv.iter().map(|n| n.spec.perf_score).collect();
        let p = Problem {
            perf: &perf,
            k: 3,
            min_perf: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = p.random(&mut rng);
        let b = p.random(&mut rng);
        let c = p.crossover(&a, &b, &mut rng);
        assert_eq!(c.genes.len(), 3);
        let mut m = c.clone();
        p.mutate(&mut m, 0.99, &mut rng);
        assert_eq!(m.genes.iter().collect::<BTreeSet<_>>().len(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn never_below_oracle(perfs in prop::collection::vec(prop::sample::select(vec![3u32, 12, 25, 40]), 1..=12),
                              k in 1usize..=4, min_perf in prop::sample::select(vec![0u32, 10, 30]), seed in any::<u64>()) {
            prop_assume!(k <= perfs.len());
            let inv: Vec<_> = perfs.iter().enumerate().map(|(i, &p)| node(&format!("n{i:02}"), p)).collect();
            let req = AllocationRequest { node_count: k, min_perf_score: min_perf };
            let params = GaParams { rng_seed: seed, ..GaParams::default() };
            let ga = allocate_ga(&req, &inv, &params).unwrap();
            let oracle = allocate_exhaustive(&req, &inv).unwrap();
            prop_assert_eq!(ga.fitness, oracle.fitness);
        }
    }
}
