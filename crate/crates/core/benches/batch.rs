//! Sequential vs data-parallel gradient computation for one training batch
//! and for scoring a candidate pool. Results are bit-identical; only wall
//! time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rrank::data::{gen_counting_nli, standard_vocab, CandidateSet, NliOptions};
use rrank::model::{init_model, ModelConfig, ModelParams};
use rrank::objectives::ObjectiveConfig;
use rrank::ordering::{Orderer, PreferencePair, Strategy};
use rrank::par::{self, Exec};
use rrank::scoring::{score_candidates, LambdaTable};
use rrank::train::batch_gradients;

fn setup(n: usize) -> (ModelParams<f32>, Vec<CandidateSet>, Vec<Vec<PreferencePair>>) {
    let v = standard_vocab();
    let sets = gen_counting_nli(n, NliOptions { noise: 0.3, verbose: false }, 1, &v);
    let mut mc = ModelConfig::new(v.len(), 1);
    mc.context_len = 64;
    let params = init_model(&mc).unwrap();
    let orderer = Orderer::with_defaults(Strategy::FoSimilarity, &v);
    let pairs = sets.iter().map(|s| orderer.pairs(s).unwrap()).collect();
    (params, sets, pairs)
}

fn modes() -> Vec<(&'static str, Exec)> {
    let mut m = vec![("sequential", Exec::Sequential)];
    if cfg!(feature = "parallel") {
        m.push(("parallel", Exec::Parallel));
    }
    m
}

fn bench_batch(c: &mut Criterion) {
    let (params, sets, pairs) = setup(16);
    let batch: Vec<(&CandidateSet, &[PreferencePair])> = sets.iter().zip(&pairs).map(|(s, p)| (s, p.as_slice())).collect();
    let obj = ObjectiveConfig::default();
    let lambdas = LambdaTable::default();
    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::new(name, batch.len()), &exec, |b, &exec| {
            b.iter(|| batch_gradients(&params, &batch, &obj, &lambdas, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let (params, sets, _) = setup(64);
    let lambdas = LambdaTable::default();
    let mut g = c.benchmark_group("score_pools");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::new(name, sets.len()), &exec, |b, &exec| {
            b.iter(|| par::map(exec, &sets, |s| score_candidates(&params, s, &lambdas).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_batch, bench_scoring);
criterion_main!(benches);
