//! Synthetic event worlds: a latent Markov chain with a known transition
//! matrix, several surface paraphrases per latent type, and multiple-choice
//! datasets whose evaluation events can be swapped for paraphrases the
//! event graph has never seen.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, EventChain, McInstance};
use crate::graph::{build_graph, AdjMatrix, EventGraph};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorld {
    pub n_latent: usize,
    pub n_variants: usize,
    pub concentration: f64,
    pub seed: u64,
    /// Row-stochastic `n_latent x n_latent` transition matrix.
    pub t_true: Tensor,
    /// `variants[i][v]` is paraphrase `v` of latent type `i`.
    pub variants: Vec<Vec<Event>>,
}

/// Surface form of paraphrase `v` of latent `i`: the predicate and object
/// identify the latent, the subject marks the paraphrase.
fn variant_event(i: usize, v: usize) -> Event {
    Event::new(format!("s{v}"), format!("p{i}"), format!("o{i}"), "").expect("valid synthetic event")
}

pub fn gen_world(n_latent: usize, n_variants: usize, concentration: f64, seed: u64) -> Result<SynthWorld> {
    if n_latent < 5 {
        return Err(Error::config(format!("n_latent must be at least 5, got {n_latent}")));
    }
    if n_variants == 0 {
        return Err(Error::config("n_variants must be at least 1"));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::config(format!("concentration must be positive, got {concentration}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::config(e.to_string()))?;
    let mut t_true = Tensor::zeros(n_latent, n_latent);
    for i in 0..n_latent {
        loop {
            let draws: Vec<f64> = (0..n_latent).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if total > 0.0 && total.is_finite() {
                for (j, x) in draws.into_iter().enumerate() {
                    t_true.set(i, j, x / total);
                }
                break;
            }
        }
    }
    let variants = (0..n_latent)
        .map(|i| (0..n_variants).map(|v| variant_event(i, v)).collect())
        .collect();
    Ok(SynthWorld {
        n_latent,
        n_variants,
        concentration,
        seed,
        t_true,
        variants,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantPolicy {
    TrainVariantOnly,
    AnyVariant,
}

fn sample_row(row: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

impl SynthWorld {
    /// Latent walk of `length` steps from a uniform start.
    pub fn sample_latents(&self, length: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut walk = Vec::with_capacity(length);
        if length == 0 {
            return walk;
        }
        walk.push(rng.random_range(0..self.n_latent));
        while walk.len() < length {
            let last = *walk.last().expect("non-empty");
            walk.push(sample_row(self.t_true.row(last), rng));
        }
        walk
    }

    fn surface(&self, latent: usize, policy: VariantPolicy, rng: &mut impl Rng) -> Event {
        let v = match policy {
            VariantPolicy::TrainVariantOnly => 0,
            VariantPolicy::AnyVariant => rng.random_range(0..self.n_variants),
        };
        self.variants[latent][v].clone()
    }

    /// Latent id of a surface form, if it is one of this world's paraphrases.
    pub fn latent_of(&self, e: &Event) -> Option<usize> {
        let p = e.predicate().strip_prefix('p')?.parse::<usize>().ok()?;
        self.variants
            .get(p)
            .filter(|vs| vs.contains(e))
            .map(|_| p)
    }

    /// Row-normalized `T_true` restricted to a latent sequence.
    pub fn true_adjacency(&self, latents: &[usize]) -> AdjMatrix {
        let n = latents.len();
        let mut values = Tensor::from_fn(n, n, |i, j| self.t_true.get(latents[i], latents[j]));
        for i in 0..n {
            let row = values.row_mut(i);
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                row.fill(1.0 / n as f64);
            }
        }
        AdjMatrix::unmasked(values)
    }

    pub fn to_json(&self) -> String {
        let d = WorldDescriptor {
            n_latent: self.n_latent,
            n_variants: self.n_variants,
            concentration: self.concentration,
            seed: self.seed,
            t_true: (0..self.n_latent).map(|i| self.t_true.row(i).to_vec()).collect(),
            variants: self
                .variants
                .iter()
                .map(|vs| vs.iter().map(Event::to_record).collect())
                .collect(),
        };
        serde_json::to_string_pretty(&d).expect("descriptor serializes")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Reads a descriptor; the world is regenerated from its recorded
    /// parameters so transition values are bit-exact.
    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let d: WorldDescriptor =
            serde_json::from_str(&text).map_err(|e| Error::CorruptSnapshot(e.to_string()))?;
        gen_world(d.n_latent, d.n_variants, d.concentration, d.seed)
    }
}

#[derive(Serialize, Deserialize)]
struct WorldDescriptor {
    n_latent: usize,
    n_variants: usize,
    concentration: f64,
    seed: u64,
    t_true: Vec<Vec<f64>>,
    variants: Vec<Vec<String>>,
}

/// One chain of `length` events.
pub fn sample_chain(world: &SynthWorld, length: usize, policy: VariantPolicy, seed: u64) -> Result<EventChain> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents = world.sample_latents(length, &mut rng);
    EventChain::new(latents.into_iter().map(|l| world.surface(l, policy, &mut rng)).collect())
}

/// A multiple-choice instance with the latent type of every event.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthInstance {
    pub inst: McInstance,
    pub context_latents: Vec<usize>,
    pub candidate_latents: Vec<usize>,
}

impl SynthInstance {
    /// Latents of the `t + 1` sequence ending in `candidate`.
    pub fn latents(&self, candidate: usize) -> Vec<usize> {
        let mut l = self.context_latents.clone();
        l.push(self.candidate_latents[candidate]);
        l
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub t: usize,
    pub k: usize,
    pub uncovered_fraction: f64,
    pub hard_distractors: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 5000,
            n_eval: 1000,
            t: 4,
            k: 5,
            uncovered_fraction: 0.0,
            hard_distractors: false,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self, world: &SynthWorld) -> Result<()> {
        if self.k < 2 || self.t < 2 {
            return Err(Error::config(format!("need k >= 2 and t >= 2, got k={} t={}", self.k, self.t)));
        }
        if !(0.0..=1.0).contains(&self.uncovered_fraction) {
            return Err(Error::config("uncovered_fraction must lie in [0, 1]"));
        }
        if self.uncovered_fraction > 0.0 && world.n_variants < 2 {
            return Err(Error::config("uncovered events need at least 2 variants per latent"));
        }
        if self.k - 1 > world.n_latent / 2 {
            return Err(Error::config(format!(
                "{} distractors cannot come from half of {} latents",
                self.k - 1,
                world.n_latent
            )));
        }
        Ok(())
    }
}

pub struct Dataset {
    pub train: Vec<SynthInstance>,
    pub eval: Vec<SynthInstance>,
    pub train_chains: Vec<EventChain>,
    pub graph: EventGraph,
}

/// Distractor latents for a walk ending in `last` with true successor
/// `gold`: drawn from the lowest-probability half of the row (the middle
/// half when `hard`), keeping only those strictly below the gold
/// probability. `None` when too few qualify.
fn pick_distractors(
    world: &SynthWorld,
    last: usize,
    gold: usize,
    count: usize,
    hard: bool,
    rng: &mut impl Rng,
) -> Option<Vec<usize>> {
    let row = world.t_true.row(last);
    let mut order: Vec<usize> = (0..world.n_latent).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let n = world.n_latent;
    let pool = if hard { &order[n / 4..n / 4 + n / 2] } else { &order[..n / 2] };
    let mut pool: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&j| j != gold && row[j] < row[gold])
        .collect();
    if pool.len() < count {
        return None;
    }
    pool.shuffle(rng);
    pool.truncate(count);
    Some(pool)
}

fn make_instances(
    world: &SynthWorld,
    cfg: &DatasetConfig,
    n: usize,
    uncovered_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SynthInstance>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let walk = world.sample_latents(cfg.t + 1, rng);
        let (last, gold) = (walk[cfg.t - 1], walk[cfg.t]);
        let Some(distractors) = pick_distractors(world, last, gold, cfg.k - 1, cfg.hard_distractors, rng)
        else {
            continue;
        };
        let mut cands = vec![gold];
        cands.extend(distractors);
        cands.shuffle(rng);
        let gold_idx = cands.iter().position(|&c| c == gold).expect("gold present");
        let mut surface = |l: usize| {
            if uncovered_fraction > 0.0 && rng.random::<f64>() < uncovered_fraction {
                world.variants[l][rng.random_range(1..world.n_variants)].clone()
            } else {
                world.variants[l][0].clone()
            }
        };
        let context: Vec<Event> = walk[..cfg.t].iter().map(|&l| surface(l)).collect();
        let candidates: Vec<Event> = cands.iter().map(|&l| surface(l)).collect();
        out.push(SynthInstance {
            inst: McInstance::new(context, candidates, gold_idx)?,
            context_latents: walk[..cfg.t].to_vec(),
            candidate_latents: cands,
        });
    }
    Ok(out)
}

/// Evaluation instances whose events are each replaced by a random
/// non-canonical paraphrase with probability `uncovered_fraction`.
pub fn make_eval_set(
    world: &SynthWorld,
    cfg: &DatasetConfig,
    n: usize,
    uncovered_fraction: f64,
    seed: u64,
) -> Result<Vec<SynthInstance>> {
    let cfg = DatasetConfig {
        uncovered_fraction,
        ..cfg.clone()
    };
    cfg.validate(world)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    make_instances(world, &cfg, n, uncovered_fraction, &mut rng)
}

/// Training instances in canonical surface forms, the event graph counted
/// from their gold chains, and an evaluation set at the configured
/// uncovered fraction.
pub fn make_dataset(world: &SynthWorld, cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    cfg.validate(world)?;
    if cfg.n_train == 0 {
        return Err(Error::config("n_train must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let train = make_instances(world, cfg, cfg.n_train, 0.0, &mut rng)?;
    let train_chains = train
        .iter()
        .map(|s| EventChain::new(s.inst.sequence(s.inst.gold())))
        .collect::<Result<Vec<_>>>()?;
    let graph = build_graph(&train_chains)?;
    let eval = make_eval_set(world, cfg, cfg.n_eval, cfg.uncovered_fraction, seed)?;
    Ok(Dataset {
        train,
        eval,
        train_chains,
        graph,
    })
}
