//! Seeded synthetic workloads shared by the benchmarks.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serval_core::{DenseIndex, DenseVector, Qrels, RunList, ScoredDoc, Similarity, SparseIndex, SparseVector};

pub fn doc_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("doc{i:06}")).collect()
}

pub fn dense_vectors(rng: &mut StdRng, n: usize, dim: usize) -> Vec<DenseVector> {
    (0..n)
        .map(|_| DenseVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

pub fn dense_index(n: usize, dim: usize, seed: u64) -> (DenseIndex, Vec<DenseVector>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let index = DenseIndex::build(doc_ids(n), &dense_vectors(&mut rng, n, dim), Similarity::Cosine).unwrap();
    (index, dense_vectors(&mut rng, 16, dim))
}

/// Zipf-like term draws, as produced by learned sparse encoders.
pub fn sparse_vector(rng: &mut StdRng, vocab: usize, terms: usize) -> SparseVector {
    SparseVector::from_weights((0..terms).map(|_| {
        let u: f64 = rng.random_range(0.0..1.0);
        let t = ((vocab as f64).powf(u) as usize).min(vocab - 1);
        (format!("t{t}"), rng.random_range(0.05..3.0))
    }))
}

pub fn sparse_index(n: usize, vocab: usize, seed: u64) -> (SparseIndex, Vec<SparseVector>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let docs: Vec<SparseVector> = (0..n).map(|_| sparse_vector(&mut rng, vocab, 120)).collect();
    let queries = (0..16).map(|_| sparse_vector(&mut rng, vocab, 20)).collect();
    (SparseIndex::build(doc_ids(n), &docs).unwrap(), queries)
}

/// `queries` rankings of depth `depth` over `pool` docs, with graded judgments.
pub fn run_and_qrels(queries: usize, depth: usize, pool: usize, seed: u64) -> (Vec<RunList>, Qrels) {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(queries);
    let mut qrels = Qrels::new();
    for q in 0..queries {
        let qid = format!("q{q}");
        let ranking = (0..depth)
            .map(|_| ScoredDoc::new(format!("doc{:06}", rng.random_range(0..pool)), rng.random_range(0.0..1.0)))
            .collect::<Vec<_>>();
        let mut seen = std::collections::HashSet::new();
        let ranking = ranking.into_iter().filter(|d| seen.insert(d.doc_id.clone())).collect();
        runs.push(RunList::new(qid.clone(), ranking).unwrap());
        for _ in 0..rng.random_range(1..6) {
            qrels.insert(qid.clone(), format!("doc{:06}", rng.random_range(0..pool)), rng.random_range(1..=3));
        }
    }
    (runs, qrels)
}
