//! Benchmarks for the hot paths: matching, metrics, rewards, the GRPO
//! objective, environment replay and review writes.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use videor4_core::corpus::Corpus;
use videor4_core::env::{run_trajectory, FeatureVector, PooledEncoder, DEFAULT_MAX_CALLS};
use videor4_core::evidence::{match_question, EvidenceRecord, MatcherConfig};
use videor4_core::grpo::toy::build_tasks;
use videor4_core::grpo::{
    group_advantages, grpo_objective, Group, GrpoConfig, Policy, ToySoftmaxPolicy,
};
use videor4_core::metrics::{anls_score, DEFAULT_TAU};
use videor4_core::qc::{Decision, QcService};
use videor4_core::reward::{diversity_reward, total_reward, RewardConfig};
use videor4_core::synthetic::{planted_corpus, PlantedSpec};
use videor4_core::trajectory::{
    fill_placeholders, render_trajectory, StubCaptioner, TemplateId, Trajectory,
};

pub fn corpus(videos: usize, frames: usize) -> Corpus {
    planted_corpus(&[PlantedSpec {
        videos,
        frames,
        seed: 1,
        ..PlantedSpec::default()
    }])
    .expect("planted corpus")
}

/// Evidence and filled locate-and-read trajectories for every question.
pub fn trajectories(corpus: &Corpus) -> (Vec<EvidenceRecord>, Vec<Trajectory>) {
    let cfg = MatcherConfig::default();
    corpus
        .instances()
        .iter()
        .map(|q| {
            let ev = match_question(q, corpus, &cfg).expect("match");
            let raw = render_trajectory(&ev, q, TemplateId::LocateRead).expect("render");
            let video = corpus.video_of(q).expect("video");
            let t = fill_placeholders(&raw, q, video, &StubCaptioner).expect("fill");
            (ev, t)
        })
        .unzip()
}

fn bench_matcher(c: &mut Criterion) {
    let cfg = MatcherConfig::default();
    let mut g = c.benchmark_group("match_corpus");
    for frames in [4, 16] {
        let corpus = corpus(20, frames);
        g.bench_with_input(BenchmarkId::from_parameter(frames), &corpus, |b, corpus| {
            b.iter(|| {
                for q in corpus.instances() {
                    black_box(match_question(q, corpus, &cfg).unwrap());
                }
            })
        });
    }
    g.finish();
}

fn bench_anls(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let word = |rng: &mut ChaCha8Rng, n: usize| -> String {
        (0..n)
            .map(|_| char::from(b'a' + rng.random_range(0..26u8)))
            .collect()
    };
    let pairs: Vec<(String, Vec<String>)> = (0..200)
        .map(|_| {
            (
                word(&mut rng, 24),
                vec![word(&mut rng, 24), word(&mut rng, 12)],
            )
        })
        .collect();
    c.bench_function("anls_200_pairs", |b| {
        b.iter(|| {
            for (p, golds) in &pairs {
                black_box(anls_score(p, golds, DEFAULT_TAU).unwrap());
            }
        })
    });
}

fn bench_rewards(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let regions: Vec<FeatureVector> = (0..16)
        .map(|_| FeatureVector::new((0..64).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    c.bench_function("diversity_16x64", |b| {
        b.iter(|| black_box(diversity_reward(&regions).unwrap()))
    });

    let corpus = corpus(1, 8);
    let (_, ts) = trajectories(&corpus);
    let q = &corpus.instances()[0];
    let video = corpus.video_of(q).unwrap();
    let encoder = PooledEncoder::default();
    let cfg = RewardConfig::default();
    c.bench_function("replay_and_score_group_of_8", |b| {
        b.iter(|| {
            let eps: Vec<_> = (0..8)
                .map(|_| run_trajectory(&ts[0], video, &encoder, DEFAULT_MAX_CALLS).unwrap())
                .collect();
            black_box(total_reward(&eps, &q.answers, &cfg).unwrap())
        })
    });
}

fn bench_grpo(c: &mut Criterion) {
    let cfg = GrpoConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rewards: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..2.0)).collect();
    c.bench_function("group_advantages_g8", |b| {
        b.iter(|| black_box(group_advantages(&rewards, &cfg).unwrap()))
    });

    let corpus = corpus(4, 4);
    let tasks = build_tasks(&corpus, 2, 4, 4).unwrap();
    let theta: Vec<f64> = (0..12).map(|_| rng.random_range(-0.5..0.5)).collect();
    let policy = ToySoftmaxPolicy::new(theta).unwrap();
    let old = ToySoftmaxPolicy::default();
    let groups: Vec<_> = tasks
        .iter()
        .map(|task| {
            let episodes: Vec<_> = (0..8).map(|_| old.sample(task, &mut rng)).collect();
            Group {
                context: task,
                episodes,
                advantages: group_advantages(&rewards, &cfg).unwrap(),
            }
        })
        .collect();
    c.bench_function("grpo_objective_4_groups", |b| {
        b.iter(|| black_box(grpo_objective(&groups, &policy, &old, &old, &cfg).unwrap()))
    });
}

fn bench_review(c: &mut Criterion) {
    let corpus = Arc::new(corpus(50, 4));
    let (evidence, ts) = trajectories(&corpus);
    c.bench_function("qc_50_accepts_in_memory", |b| {
        b.iter_batched(
            || QcService::open(corpus.clone(), evidence.clone(), ts.clone(), None).unwrap(),
            |svc| {
                for t in &ts {
                    black_box(
                        svc.record_decision(&t.id, Decision::Accept, "bench", 1)
                            .unwrap(),
                    );
                }
            },
            criterion::BatchSize::LargeInput,
        )
    });
}

pub fn benchmarks(c: &mut Criterion) {
    bench_matcher(c);
    bench_anls(c);
    bench_rewards(c);
    bench_grpo(c);
    bench_review(c);
}
