//! Skip-gram with negative sampling over port sequences.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU32, Ordering};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EmbeddingError, EmbeddingTable, TrainedOn};
use crate::window::PortSequence;

/// Sequences longer than this contribute a random subset of this many
/// centre positions per epoch.
const MAX_CENTRES_PER_SEQUENCE: usize = 1000;
const MIN_LR_FRACTION: f32 = 1e-4;
const UNIGRAM_POWER: f64 = 0.75;
const UNIGRAM_TABLE_SIZE: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub context_window: usize,
    pub negative_samples: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub min_count: u64,
    /// Frequent-token downsampling threshold; 0 keeps every token.
    pub subsample: f64,
    pub seed: u64,
    /// 1 = deterministic; more workers share parameters without locking.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 32,
            context_window: 5,
            negative_samples: 5,
            epochs: 5,
            learning_rate: 0.025,
            min_count: 5,
            subsample: 1e-3,
            seed: 1,
            workers: 1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), EmbeddingError> {
        if self.dim < 2 {
            return Err(EmbeddingError::BadConfig("dim must be at least 2"));
        }
        if self.context_window == 0 || self.negative_samples == 0 || self.epochs == 0 {
            return Err(EmbeddingError::BadConfig(
                "context_window, negative_samples and epochs must be positive",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EmbeddingError::BadConfig("learning_rate must be positive"));
        }
        if !(self.subsample >= 0.0 && self.subsample.is_finite()) {
            return Err(EmbeddingError::BadConfig("subsample must be non-negative"));
        }
        if self.min_count == 0 || self.workers == 0 {
            return Err(EmbeddingError::BadConfig("min_count and workers must be positive"));
        }
        Ok(())
    }

    fn digest(&self) -> String {
        let s = serde_json::to_string(self).expect("config serialises");
        format!("{:016x}", fnv1a(s.as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn corpus_fingerprint(corpus: &[PortSequence]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for s in corpus {
        for p in &s.ports {
            for b in p.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

struct Vocab {
    ports: Vec<u16>,
    index: HashMap<u16, u32>,
    rare: u32,
    counts: Vec<u64>,
}

impl Vocab {
    fn build(corpus: &[PortSequence], min_count: u64) -> Self {
        let mut raw: BTreeMap<u16, u64> = BTreeMap::new();
        for s in corpus {
            for p in &s.ports {
                *raw.entry(*p).or_default() += 1;
            }
        }
        let ports: Vec<u16> = raw
            .iter()
            .filter(|(_, c)| **c >= min_count)
            .map(|(p, _)| *p)
            .collect();
        let index: HashMap<u16, u32> = ports.iter().enumerate().map(|(i, p)| (*p, i as u32)).collect();
        let rare = ports.len() as u32;
        let mut counts = vec![0u64; ports.len() + 1];
        for (p, c) in &raw {
            let id = index.get(p).copied().unwrap_or(rare);
            counts[id as usize] += c;
        }
        Vocab {
            ports,
            index,
            rare,
            counts,
        }
    }

    fn id(&self, port: u16) -> u32 {
        self.index.get(&port).copied().unwrap_or(self.rare)
    }
}

/// Unigram^0.75 lookup table for negative draws.
struct NegativeSampler {
    table: Vec<u32>,
}

impl NegativeSampler {
    fn new(counts: &[u64]) -> Self {
        let weights: Vec<f64> = counts.iter().map(|c| (*c as f64).powf(UNIGRAM_POWER)).collect();
        let total: f64 = weights.iter().sum();
        let mut table = Vec::with_capacity(UNIGRAM_TABLE_SIZE);
        let mut acc = 0.0;
        for (id, w) in weights.iter().enumerate() {
            acc += w;
            let upto = ((acc / total) * UNIGRAM_TABLE_SIZE as f64).round() as usize;
            while table.len() < upto.min(UNIGRAM_TABLE_SIZE) {
                table.push(id as u32);
            }
        }
        let last = weights.iter().rposition(|w| *w > 0.0).unwrap_or(0) as u32;
        table.resize(UNIGRAM_TABLE_SIZE, last);
        NegativeSampler { table }
    }

    #[inline]
    fn draw<R: Rng>(&self, rng: &mut R) -> u32 {
        self.table[rng.gen_range(0..self.table.len())]
    }
}

/// Probability of keeping each token id when downsampling frequent ones.
fn keep_probabilities(counts: &[u64], threshold: f64) -> Vec<f32> {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|c| {
            if threshold == 0.0 || *c == 0 {
                return 1.0;
            }
            let f = *c as f64 / total as f64;
            (((f / threshold).sqrt() + 1.0) * threshold / f).min(1.0) as f32
        })
        .collect()
}

/// f32 parameters that several workers may update without locks.
struct SharedParams {
    data: Vec<AtomicU32>,
}

impl SharedParams {
    fn new(values: impl IntoIterator<Item = f32>) -> Self {
        SharedParams {
            data: values.into_iter().map(|v| AtomicU32::new(v.to_bits())).collect(),
        }
    }

    #[inline]
    fn get(&self, i: usize) -> f32 {
        f32::from_bits(self.data[i].load(Ordering::Relaxed))
    }

    #[inline]
    fn set(&self, i: usize, v: f32) {
        self.data[i].store(v.to_bits(), Ordering::Relaxed);
    }

    fn row(&self, r: usize, dim: usize) -> Vec<f32> {
        (0..dim).map(|j| self.get(r * dim + j)).collect()
    }
}

struct Model<'a> {
    config: &'a TrainConfig,
    input: SharedParams,
    output: SharedParams,
    sampler: NegativeSampler,
    keep: Vec<f32>,
    total_steps: f64,
}

impl Model<'_> {
    #[inline]
    fn sigmoid(x: f32) -> f32 {
        if x > 20.0 {
            1.0
        } else if x < -20.0 {
            0.0
        } else {
            1.0 / (1.0 + (-x).exp())
        }
    }

    /// One positive pair plus negatives; updates both parameter matrices.
    fn update_pair<R: Rng>(&self, centre: u32, context: u32, lr: f32, rng: &mut R, grad: &mut [f32], input_row: &mut [f32]) {
        let dim = self.config.dim;
        let ib = centre as usize * dim;
        for j in 0..dim {
            input_row[j] = self.input.get(ib + j);
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for n in 0..=self.config.negative_samples {
            let (target, label) = if n == 0 {
                (context, 1.0)
            } else {
                let t = self.sampler.draw(rng);
                if t == context {
                    continue;
                }
                (t, 0.0)
            };
            let ob = target as usize * dim;
            let mut f = 0.0f32;
            for j in 0..dim {
                f += input_row[j] * self.output.get(ob + j);
            }
            let g = (label - Self::sigmoid(f)) * lr;
            for j in 0..dim {
                let o = self.output.get(ob + j);
                grad[j] += g * o;
                self.output.set(ob + j, o + g * input_row[j]);
            }
        }
        for j in 0..dim {
            self.input.set(ib + j, self.input.get(ib + j) + grad[j]);
        }
    }

    fn run_shard(&self, shard: &[Vec<u32>], worker: usize, steps_before: f64) {
        let cfg = self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9 * (worker as u64 + 1)));
        let mut grad = vec![0.0f32; cfg.dim];
        let mut row = vec![0.0f32; cfg.dim];
        let mut steps = steps_before;
        let mut centres: Vec<usize> = Vec::new();
        let mut kept: Vec<u32> = Vec::new();
        for _epoch in 0..cfg.epochs {
            for full in shard {
                kept.clear();
                kept.extend(full.iter().copied().filter(|t| {
                    let p = self.keep[*t as usize];
                    p >= 1.0 || rng.gen::<f32>() < p
                }));
                let sentence = &kept;
                let len = sentence.len();
                if len < 2 {
                    continue;
                }
                centres.clear();
                if len > MAX_CENTRES_PER_SEQUENCE {
                    centres.extend((0..MAX_CENTRES_PER_SEQUENCE).map(|_| rng.gen_range(0..len)));
                } else {
                    centres.extend(0..len);
                }
                let progress = (steps / self.total_steps) as f32;
                let lr = cfg.learning_rate * (1.0 - progress).max(MIN_LR_FRACTION);
                for &i in &centres {
                    let reduce = rng.gen_range(0..cfg.context_window);
                    let span = cfg.context_window - reduce;
                    let lo = i.saturating_sub(span);
                    let hi = (i + span).min(len - 1);
                    for j in lo..=hi {
                        if j != i {
                            self.update_pair(sentence[i], sentence[j], lr, &mut rng, &mut grad, &mut row);
                        }
                    }
                }
                steps += centres.len() as f64;
            }
        }
    }
}

/// Learn one vector per port meeting `min_count`, plus a shared vector for
/// all rarer ports.
///
/// With `workers == 1` the output depends only on the corpus and config.
pub fn train(corpus: &[PortSequence], config: &TrainConfig) -> Result<EmbeddingTable, EmbeddingError> {
    config.validate()?;
    if corpus.iter().all(|s| s.ports.is_empty()) {
        return Err(EmbeddingError::EmptyCorpus);
    }
    let vocab = Vocab::build(corpus, config.min_count);
    let distinct_raw = {
        let mut seen = std::collections::HashSet::new();
        corpus.iter().flat_map(|s| &s.ports).for_each(|p| {
            seen.insert(*p);
        });
        seen.len()
    };
    let live_tokens = vocab.counts.iter().filter(|c| **c > 0).count();
    if distinct_raw < 2 || live_tokens < 2 {
        return Err(EmbeddingError::NoContext);
    }

    let sentences: Vec<Vec<u32>> = corpus
        .iter()
        .filter(|s| s.ports.len() > 1)
        .map(|s| s.ports.iter().map(|p| vocab.id(*p)).collect())
        .collect();

    let n_tokens = vocab.ports.len() + 1;
    let dim = config.dim;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let input = SharedParams::new((0..n_tokens * dim).map(|_| (init_rng.gen::<f32>() - 0.5) / dim as f32));
    let output = SharedParams::new(std::iter::repeat_n(0.0f32, n_tokens * dim));

    let keep = keep_probabilities(&vocab.counts, config.subsample);
    let steps_per_epoch: f64 = sentences
        .iter()
        .map(|s| {
            let expected: f64 = s.iter().map(|t| keep[*t as usize] as f64).sum();
            expected.min(MAX_CENTRES_PER_SEQUENCE as f64)
        })
        .sum();
    let workers = config.workers.min(sentences.len().max(1));
    let model = Model {
        config,
        input,
        output,
        sampler: NegativeSampler::new(&vocab.counts),
        keep,
        // each worker decays over its own shard
        total_steps: (steps_per_epoch * config.epochs as f64 / workers as f64).max(1.0),
    };

    if workers == 1 {
        model.run_shard(&sentences, 0, 0.0);
    } else {
        let chunk = sentences.len().div_ceil(workers);
        thread::scope(|scope| {
            for (w, shard) in sentences.chunks(chunk).enumerate() {
                let model = &model;
                scope.spawn(move || model.run_shard(shard, w, 0.0));
            }
        });
    }

    let entries: BTreeMap<u16, Vec<f32>> = vocab
        .ports
        .iter()
        .enumerate()
        .map(|(i, p)| (*p, model.input.row(i, dim)))
        .collect();
    let rare = model.input.row(vocab.rare as usize, dim);
    let table = EmbeddingTable::new(dim, entries, Some(rare))?;
    Ok(table.with_provenance(TrainedOn {
        corpus: corpus_fingerprint(corpus),
        config: config.digest(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::window::SequenceKey;
    use std::net::Ipv4Addr;

    fn seqs(list: &[&[u16]]) -> Vec<PortSequence> {
        list.iter()
            .enumerate()
            .map(|(i, p)| PortSequence {
                key: SequenceKey::src(Ipv4Addr::from(i as u32)),
                window_index: 0,
                ports: p.to_vec(),
                truncated: false,
            })
            .collect()
    }

    fn small() -> TrainConfig {
        TrainConfig {
            dim: 8,
            epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(train(&[], &small()), Err(EmbeddingError::EmptyCorpus)));
        assert!(matches!(train(&seqs(&[&[]]), &small()), Err(EmbeddingError::EmptyCorpus)));
    }

    #[test]
    fn single_port_rejected() {
        let corpus = seqs(&[&[80, 80, 80], &[80, 80]]);
        assert!(matches!(train(&corpus, &small()), Err(EmbeddingError::NoContext)));
    }

    #[test]
    fn bad_config_rejected() {
        let corpus = seqs(&[&[80, 81]]);
        let cfg = TrainConfig { dim: 1, ..small() };
        assert!(matches!(train(&corpus, &cfg), Err(EmbeddingError::BadConfig(_))));
    }

    #[test]
    fn rare_ports_share_one_vector() {
        let mut list: Vec<&[u16]> = vec![&[80, 8080, 80, 8080]; 20];
        list.push(&[80, 40000]);
        let table = train(&seqs(&list), &small()).unwrap();
        assert!(table.contains(80) && table.contains(8080));
        assert!(!table.contains(40000));
        assert_eq!(table.lookup(40000).unwrap(), table.rare_vector().unwrap());
        assert_eq!(table.len(), 3);
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let base: [&[u16]; 3] = [&[23, 23, 2323], &[445, 445, 445], &[80, 8080, 8000]];
        let list: Vec<&[u16]> = base.repeat(30);
        let corpus = seqs(&list);
        let a = train(&corpus, &small()).unwrap();
        let b = train(&corpus, &small()).unwrap();
        assert_eq!(a, b);
        let c = train(&corpus, &TrainConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.trained_on().unwrap().corpus, c.trained_on().unwrap().corpus);
        assert_ne!(a.trained_on().unwrap().config, c.trained_on().unwrap().config);
    }

    #[test]
    fn multi_worker_training_produces_finite_table() {
        let base: [&[u16]; 3] = [&[23, 23, 2323], &[445, 445, 445], &[80, 8080, 8000]];
        let list: Vec<&[u16]> = base.repeat(40);
        let cfg = TrainConfig { workers: 3, ..small() };
        let t = train(&seqs(&list), &cfg).unwrap();
        assert_eq!(t.len(), 7);
    }

    #[test]
    fn long_sequences_are_subsampled() {
        let long: Vec<u16> = (0..5000).map(|i| if i % 2 == 0 { 80 } else { 443 }).collect();
        let corpus = vec![PortSequence {
            key: SequenceKey::src(Ipv4Addr::new(192, 0, 2, 1)),
            window_index: 0,
            ports: long,
            truncated: false,
        }];
        let t = train(&corpus, &small()).unwrap();
        assert_eq!(t.nearest_ports(80, 1).unwrap()[0].0, 443);
    }

    #[test]
    fn repeated_pair_is_nearest_neighbour() {
        let list: Vec<&[u16]> = vec![&[80, 8080]; 10_000];
        let table = train(&seqs(&list), &TrainConfig::default()).unwrap();
        let n = table.nearest_ports(80, 1).unwrap();
        assert_eq!(n[0].0, 8080);
    }
}
