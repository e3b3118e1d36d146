#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use videor4_core::corpus::Corpus;
use videor4_core::evidence::{match_question, EvidenceRecord, MatcherConfig};
use videor4_core::synthetic::{planted_corpus, PlantedSpec};
use videor4_core::trajectory::{
    fill_placeholders, render_trajectory, StubCaptioner, TemplateId, Trajectory,
};

/// Planted corpus of `n` matchable videos with one filled locate-and-read
/// trajectory per question.
pub fn review_fixture(n: usize) -> (Arc<Corpus>, Vec<EvidenceRecord>, Vec<Trajectory>) {
    let corpus = planted_corpus(&[PlantedSpec {
        videos: n,
        seed: 17,
        ..PlantedSpec::default()
    }])
    .unwrap();
    let cfg = MatcherConfig::default();
    let mut evidence = Vec::new();
    let mut trajectories = Vec::new();
    for q in corpus.instances() {
        let ev = match_question(q, &corpus, &cfg).unwrap();
        let raw = render_trajectory(&ev, q, TemplateId::LocateRead).unwrap();
        trajectories
            .push(fill_placeholders(&raw, q, corpus.video_of(q).unwrap(), &StubCaptioner).unwrap());
        evidence.push(ev);
    }
    (Arc::new(corpus), evidence, trajectories)
}

pub fn video_r4(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_video-r4"))
        .current_dir(dir)
        .args(args)
        .env_remove("VIDEOR4_PATHS__OUT")
        .env_remove("VIDEOR4_PATHS__CORPUS")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
