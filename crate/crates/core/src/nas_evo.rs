//! Evolutionary search over per-layer group genotypes. Mutation relaxes
//! one layer to a maximal subgroup, so every child starts out computing
//! exactly its parent's function.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Optimizer, Tensor};
use crate::data::Dataset;
use crate::groups::PointGroup;
use crate::model::{build, check_genotype, BackboneSpec, Mode, ModelError, Network};
use crate::seeds::{sub_seed, sub_seed2};
use crate::train::{evaluate, steps_for, train_steps, TrainConfig, TrainError};

pub use crate::model::build_prior_baseline;

/// Samples in the probe batch used to measure function preservation.
const PROBE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fitness {
    pub accuracy: f64,
    pub params: usize,
}

#[derive(Clone, Debug)]
pub struct Individual {
    pub genotype: Vec<PointGroup>,
    pub network: Network,
    pub fitness: Option<Fitness>,
    pub lineage: u64,
    pub parent: Option<u64>,
    /// Generations survived.
    pub age: usize,
    /// Max-abs logit change caused by the mutation that created it.
    pub birth_residual: f64,
}

#[derive(Clone, Debug)]
pub struct Population {
    pub individuals: Vec<Individual>,
    pub generation: usize,
    pub parent_size: usize,
}

/// All `(layer, maximal subgroup)` relaxations that keep the genotype
/// non-increasing.
pub fn relaxation_moves(genotype: &[PointGroup]) -> Vec<(usize, PointGroup)> {
    let mut moves = Vec::new();
    for (l, &g) in genotype.iter().enumerate() {
        for h in g.maximal_subgroups() {
            if genotype.get(l + 1).is_none_or(|&next| next.is_subgroup_of(h)) {
                moves.push((l, h));
            }
        }
    }
    moves
}

/// One child per valid single-layer relaxation; ids drawn from `next_id`.
pub fn mutate_children(
    parent: &Individual,
    next_id: &mut u64,
    probe: Option<&Tensor>,
) -> Result<Vec<Individual>, ModelError> {
    let before = probe.map(|x| parent.network.logits(x)).transpose()?;
    let mut children = Vec::new();
    for (l, h) in relaxation_moves(&parent.genotype) {
        let network = parent.network.relax_layer(l, h)?;
        let genotype = network.genotype().expect("relaxed static network");
        let birth_residual = match (&before, probe) {
            (Some(b), Some(x)) => network.logits(x)?.max_abs_diff(b),
            _ => 0.0,
        };
        children.push(Individual {
            genotype,
            network,
            fitness: None,
            lineage: *next_id,
            parent: Some(parent.lineage),
            age: 0,
            birth_residual,
        });
        *next_id += 1;
    }
    Ok(children)
}

/// Indices (ascending) of points not strictly dominated by any other.
pub fn pareto_front(points: &[(f64, usize)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    // sweep by params ↑ then accuracy ↓ keeping the running best accuracy
    order.sort_by(|&a, &b| {
        points[a]
            .1
            .cmp(&points[b].1)
            .then(points[b].0.total_cmp(&points[a].0))
    });
    let mut front = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        // group identical parameter counts: only their top accuracy can survive
        let p = points[order[i]].1;
        let top = points[order[i]].0;
        let mut j = i;
        while j < order.len() && points[order[j]].1 == p {
            if points[order[j]].0 == top && top > best {
                front.push(order[j]);
            }
            j += 1;
        }
        best = best.max(top);
        i = j;
    }
    front.sort_unstable();
    front
}

/// Parent selection: the Pareto front, truncated or filled by accuracy to
/// `k`; ties broken by fewer params, then lower lineage id. Entries are
/// `(accuracy, params, lineage)`.
pub fn select(points: &[(f64, usize, u64)], k: usize) -> Vec<usize> {
    let key = |a: &usize, b: &usize| {
        let (pa, pb) = (points[*a], points[*b]);
        pb.0.total_cmp(&pa.0).then(pa.1.cmp(&pb.1)).then(pa.2.cmp(&pb.2))
    };
    let pairs: Vec<(f64, usize)> = points.iter().map(|p| (p.0, p.1)).collect();
    let mut front = pareto_front(&pairs);
    front.sort_by(key);
    if front.len() >= k {
        front.truncate(k);
        return front;
    }
    let mut rest: Vec<usize> = (0..points.len()).filter(|i| !front.contains(i)).collect();
    rest.sort_by(key);
    front.extend(rest.into_iter().take(k - front.len()));
    front
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvoConfig {
    pub generations: usize,
    pub parent_size: usize,
    pub epochs_per_generation: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub initial_group: PointGroup,
    pub seed: u64,
    /// Uniform random parents instead of Pareto selection.
    #[serde(default)]
    pub random_select: bool,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "recal")]
    pub bn_recalibration: usize,
}

fn one() -> usize {
    1
}
fn recal() -> usize {
    1024
}

impl Default for EvoConfig {
    fn default() -> Self {
        EvoConfig {
            generations: 50,
            parent_size: 5,
            epochs_per_generation: 0.5,
            batch_size: 64,
            optimizer: Optimizer::sgd(0.1),
            initial_group: PointGroup::D4,
            seed: 0,
            random_select: false,
            workers: 1,
            bn_recalibration: recal(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub generation: usize,
    pub lineage: u64,
    pub parent: Option<u64>,
    pub genotype: Vec<PointGroup>,
    pub params: usize,
    pub val_acc: f64,
    pub selected: bool,
    pub birth_residual: f64,
}

pub struct EvoResult {
    pub population: Population,
    pub history: Vec<HistoryRow>,
    /// Individuals dropped after diverging, as human-readable notes.
    pub events: Vec<String>,
    pub steps_per_generation: usize,
}

impl EvoResult {
    pub fn max_birth_residual(&self) -> f64 {
        self.history.iter().map(|r| r.birth_residual).fold(0.0, f64::max)
    }
}

/// Maps `f` over `items` on `workers` threads; output order matches input.
pub fn parallel_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    if workers <= 1 || n <= 1 {
        return items.into_iter().map(f).collect();
    }
    let slots: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let out: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let item = slots[i].lock().unwrap().take().unwrap();
                let r = f(item);
                *out[i].lock().unwrap() = Some(r);
            });
        }
    });
    out.into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

/// The all-`initial_group` individual the search starts from.
pub fn initial_individual(spec: &BackboneSpec, cfg: &EvoConfig) -> Result<Individual, ModelError> {
    let mut s = spec.clone();
    s.mode = Mode::Static(vec![cfg.initial_group; spec.n_conv_layers]);
    let network = build(&s, sub_seed(cfg.seed, "init", 0))?;
    Ok(Individual {
        genotype: network.genotype().expect("static"),
        network,
        fitness: None,
        lineage: 0,
        parent: None,
        age: 0,
        birth_residual: 0.0,
    })
}

/// Training config used for individual `lineage` in `generation`.
pub fn member_train_config(cfg: &EvoConfig, lineage: u64, generation: usize) -> TrainConfig {
    TrainConfig {
        batch_size: cfg.batch_size,
        optimizer: cfg.optimizer,
        epochs: cfg.epochs_per_generation,
        seed: sub_seed2(cfg.seed, "order", lineage, generation as u64),
        bn_recalibration: cfg.bn_recalibration,
    }
}

/// Runs the search: expand (parents + children) → partially train every
/// member → evaluate on `val` → select.
pub fn equinas_e(
    spec: &BackboneSpec,
    cfg: &EvoConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<EvoResult, TrainError> {
    let mut parents = vec![initial_individual(spec, cfg)?];
    let mut next_id = 1u64;
    let mut history = Vec::new();
    let mut events = Vec::new();
    let steps = steps_for(cfg.epochs_per_generation, train.len(), cfg.batch_size);
    let probe_idx: Vec<usize> = (0..PROBE.min(val.len())).collect();
    let probe = (!probe_idx.is_empty()).then(|| val.batch(&probe_idx).0);
    for generation in 0..cfg.generations {
        let mut members = Vec::new();
        for p in &parents {
            let children = mutate_children(p, &mut next_id, probe.as_ref())?;
            members.push(p.clone());
            members.extend(children);
        }
        for m in &members {
            check_genotype(&m.genotype)?;
        }
        let trained = parallel_map(members, cfg.workers, |mut m| {
            let tc = member_train_config(cfg, m.lineage, generation);
            let r = train_steps(&mut m.network, train, &tc, steps)
                .and_then(|_| evaluate(&m.network, val));
            (m, r)
        });
        let mut survivors = Vec::new();
        for (mut m, r) in trained {
            match r {
                Ok(ev) => {
                    m.fitness = Some(Fitness {
                        accuracy: ev.accuracy,
                        params: m.network.param_count(),
                    });
                    survivors.push(m);
                }
                Err(TrainError::DivergedLoss { step, detail }) => events.push(format!(
                    "generation {generation}: lineage {} dropped at step {step}: {detail}",
                    m.lineage
                )),
                Err(e) => return Err(e),
            }
        }
        if survivors.is_empty() {
            return Err(TrainError::DivergedLoss {
                step: 0,
                detail: format!("every member diverged in generation {generation}"),
            });
        }
        let chosen = if cfg.random_select {
            let mut idx: Vec<usize> = (0..survivors.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "select", generation as u64));
            idx.shuffle(&mut rng);
            idx.truncate(cfg.parent_size);
            idx
        } else {
            let pts: Vec<(f64, usize, u64)> = survivors
                .iter()
                .map(|m| {
                    let f = m.fitness.expect("evaluated");
                    (f.accuracy, f.params, m.lineage)
                })
                .collect();
            select(&pts, cfg.parent_size)
        };
        for (i, m) in survivors.iter().enumerate() {
            let f = m.fitness.expect("evaluated");
            history.push(HistoryRow {
                generation,
                lineage: m.lineage,
                parent: m.parent,
                genotype: m.genotype.clone(),
                params: f.params,
                val_acc: f.accuracy,
                selected: chosen.contains(&i),
                birth_residual: if m.age == 0 { m.birth_residual } else { 0.0 },
            });
        }
        let mut slots: Vec<Option<Individual>> = survivors.into_iter().map(Some).collect();
        parents = chosen
            .iter()
            .map(|&i| {
                let mut m = slots[i].take().expect("selected once");
                m.age += 1;
                m
            })
            .collect();
    }
    Ok(EvoResult {
        population: Population {
            individuals: parents,
            generation: cfg.generations,
            parent_size: cfg.parent_size,
        },
        history,
        events,
        steps_per_generation: steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dominates(a: (f64, usize), b: (f64, usize)) -> bool {
        a.0 >= b.0 && a.1 <= b.1 && (a.0 > b.0 || a.1 < b.1)
    }

    fn brute_front(points: &[(f64, usize)]) -> Vec<usize> {
        (0..points.len())
            .filter(|&i| !(0..points.len()).any(|j| dominates(points[j], points[i])))
            .collect()
    }

    fn brute_select(points: &[(f64, usize, u64)], k: usize) -> Vec<usize> {
        let pairs: Vec<(f64, usize)> = points.iter().map(|p| (p.0, p.1)).collect();
        let front = brute_front(&pairs);
        let better = |a: usize, b: usize| {
            let (pa, pb) = (points[a], points[b]);
            pa.0 > pb.0 || (pa.0 == pb.0 && (pa.1 < pb.1 || (pa.1 == pb.1 && pa.2 < pb.2)))
        };
        // selection sort by the tie-break order
        let rank = |mut v: Vec<usize>| {
            let mut out = Vec::new();
            while !v.is_empty() {
                let best = (0..v.len()).fold(0, |b, i| if better(v[i], v[b]) { i } else { b });
                out.push(v.remove(best));
            }
            out
        };
        let mut chosen = rank(front.clone());
        chosen.truncate(k);
        let rest: Vec<usize> = (0..points.len()).filter(|i| !front.contains(i)).collect();
        for i in rank(rest) {
            if chosen.len() < k {
                chosen.push(i);
            }
        }
        chosen
    }

    #[test]
    fn front_examples() {
        assert_eq!(pareto_front(&[(0.90, 100), (0.80, 50), (0.85, 120)]), vec![0, 1]);
        assert_eq!(pareto_front(&[(0.5, 10); 4]), vec![0, 1, 2, 3]);
        assert!(pareto_front(&[]).is_empty());
    }

    #[test]
    fn select_examples() {
        let three = [(0.1, 3, 0), (0.2, 2, 1), (0.3, 1, 2)];
        assert_eq!(select(&three, 5).len(), 3);
        let five: Vec<(f64, usize, u64)> = (0..5).map(|i| (0.5 + i as f64 / 10.0, 10 + i, i as u64)).collect();
        let mut s = select(&five, 5);
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
    }

    proptest! {
        #[test]
        fn front_and_select_match_brute_force(
            raw in prop::collection::vec((0u8..20, 1usize..30), 1..64),
            k in 1usize..8,
        ) {
            // coarse values force plenty of ties
            let pts: Vec<(f64, usize)> = raw.iter().map(|&(a, p)| (a as f64 / 20.0, p)).collect();
            prop_assert_eq!(pareto_front(&pts), brute_front(&pts));
            let full: Vec<(f64, usize, u64)> = pts.iter().enumerate().map(|(i, p)| (p.0, p.1, (i * 7 % 13) as u64 + 100 * i as u64)).collect();
            prop_assert_eq!(select(&full, k), brute_select(&full, k));
        }
    }

    fn enumerate_moves(g: &[PointGroup]) -> Vec<(usize, PointGroup)> {
        // oracle: every single-layer change to a maximal proper subgroup
        // (no group strictly between) that leaves the genotype valid
        let mut out = Vec::new();
        for l in 0..g.len() {
            for h in PointGroup::ALL {
                let proper = h.is_subgroup_of(g[l]) && h != g[l];
                let maximal = !PointGroup::ALL.iter().any(|&m| {
                    m != h && m != g[l] && h.is_subgroup_of(m) && m.is_subgroup_of(g[l])
                });
                let mut child = g.to_vec();
                child[l] = h;
                if proper && maximal && check_genotype(&child).is_ok() {
                    out.push((l, h));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn moves_match_lattice_enumeration() {
        use PointGroup::*;
        assert!(relaxation_moves(&[C1, C1]).is_empty());
        assert_eq!(relaxation_moves(&[D4, D4, D4]).len(), 2);
        for g in [vec![D4, D4, D4], vec![D4, C4, C2], vec![D4, D2, D1], vec![D2, C2, C1], vec![C4, C4, C1]] {
            let mut m = relaxation_moves(&g);
            m.sort();
            assert_eq!(m, enumerate_moves(&g), "{g:?}");
        }
    }

    fn toy_spec() -> BackboneSpec {
        BackboneSpec {
            n_conv_layers: 3,
            base_expanded_width: 8,
            widen_after: None,
            pool_after: vec![1, 2],
            kernel_size: 3,
            in_channels: 1,
            n_classes: 10,
            head_hidden_width: 8,
            mode: Mode::Static(vec![PointGroup::D4; 3]),
        }
    }

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset::new(
            Tensor::uniform(&[n, 1, 12, 12], -1.0, 1.0, &mut rng),
            (0..n).map(|i| i % 10).collect(),
            10,
        )
        .unwrap()
    }

    #[test]
    fn children_are_function_identical_and_never_smaller() {
        let cfg = EvoConfig::default();
        let mut ind = initial_individual(&toy_spec(), &cfg).unwrap();
        ind.network = ind.network.relax_layer(2, PointGroup::C4).unwrap();
        ind.genotype = ind.network.genotype().unwrap();
        let probe = toy_data(4, 1).images();
        let mut next = 1;
        let kids = mutate_children(&ind, &mut next, Some(&probe)).unwrap();
        assert_eq!(kids.len(), 2);
        for k in &kids {
            assert!(k.birth_residual < 1e-9);
            assert!(k.network.param_count() > ind.network.param_count());
        }
    }

    #[test]
    fn one_generation_loop_contract() {
        let cfg = EvoConfig {
            generations: 1,
            epochs_per_generation: 0.5,
            batch_size: 8,
            workers: 2,
            ..EvoConfig::default()
        };
        let (tr, va) = (toy_data(32, 2), toy_data(20, 3));
        let r = equinas_e(&toy_spec(), &cfg, &tr, &va).unwrap();
        assert_eq!(r.history.len(), 3);
        assert_eq!(r.population.individuals.len(), 3);
        assert!(r.history.iter().all(|h| check_genotype(&h.genotype).is_ok()));
        let single = equinas_e(&toy_spec(), &EvoConfig { workers: 1, ..cfg.clone() }, &tr, &va).unwrap();
        assert_eq!(r.history, single.history);
        let random = equinas_e(&toy_spec(), &EvoConfig { random_select: true, parent_size: 1, ..cfg }, &tr, &va).unwrap();
        assert_eq!(random.population.individuals.len(), 1);
    }
}
