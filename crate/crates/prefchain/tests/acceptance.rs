//! Acceptance suite. Each criterion prints one PASS or FAIL line; the
//! process exits non-zero when any criterion fails.
//!
//! Oracles here are written independently of the library: path scores come
//! from explicit walk enumeration, metric values from closed forms, and
//! mobility outputs from committed golden files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use prefchain::commands::{cmd_simulate, Providers};
use prefchain::config::RunConfig;
use prefchain_core::calibration::{calibrate, CalibrationSource, FixedLlm, GenerationParams, IdentityLlm};
use prefchain_core::embedding::HashEmbedder;
use prefchain_core::graph::{Attributes, BehaviorGraph, EdgeKind, GraphBuildConfig, NodeId, NodeKind};
use prefchain_core::metrics::{evaluate_populations, joint_from_samples, kld, kld_cells, mae, EvaluationReport};
use prefchain_core::pipeline::{
    simulate_population, ChainConfig, ChoicePredictor, MarginalPredictor, PreferenceChain, UniformPredictor,
};
use prefchain_core::preference::{prior_distribution, raw_score, PreferenceDistribution};
use prefchain_core::retrieval::{extract_subgraph, top_k_similar, BehavioralSubgraph, QueryAgent, SubgraphParams};
use prefchain_core::rng::substream;
use prefchain_core::schema::{Attribute, ChoiceCategorySet, Desire, Output, TripRecord, TRIP_PURPOSES};
use prefchain_core::synth::{generate_synthetic, split_reference_validation, SyntheticSpec};
use rand::Rng;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

// ---------------------------------------------------------------- 1

/// Random subgraph: one agent, 1-4 persons, 1-4 desires, 1-3 intentions of
/// the mode set, at most 12 nodes, random typed edges with weights in [0, 1].
fn random_graph(rng: &mut impl Rng) -> (BehaviorGraph, NodeId) {
    let mut g = BehaviorGraph::with_default_choice_sets();
    let agent = g.add_node(NodeKind::Agent, "agent", Attributes::new()).unwrap();
    let persons: Vec<NodeId> = (0..rng.random_range(1..=4))
        .map(|i| g.add_node(NodeKind::Person, format!("p{i}"), Attributes::new()).unwrap())
        .collect();
    let desires: Vec<NodeId> = (0..rng.random_range(1..=4))
        .map(|i| g.add_node(NodeKind::Desire, format!("d{i}"), Attributes::new()).unwrap())
        .collect();
    let modes = Output::PrimaryMode.categories();
    let intentions: Vec<NodeId> = (0..rng.random_range(1..=3))
        .map(|i| {
            let mut a = Attributes::new();
            a.insert("choice_set".into(), "primary_mode".into());
            g.add_node(NodeKind::Intention, modes[i], a).unwrap()
        })
        .collect();
    let w = |rng: &mut dyn rand::RngCore| {
        // exact zeros and ones exercise degenerate and pass-through paths
        match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random::<f64>(),
        }
    };
    let edge = |g: &mut BehaviorGraph, s: NodeId, t: NodeId, k: EdgeKind, rng: &mut dyn rand::RngCore| {
        if rng.random_bool(0.6) {
            let weight = w(rng);
            g.add_edge(s, t, k, weight).unwrap();
        }
    };
    for &p in &persons {
        edge(&mut g, agent, p, EdgeKind::SimilarTo, rng);
        for &q in &persons {
            if p != q {
                edge(&mut g, p, q, EdgeKind::RelativeOf, rng);
            }
        }
        for &d in &desires {
            edge(&mut g, p, d, EdgeKind::WantTo, rng);
        }
    }
    for &d in &desires {
        edge(&mut g, agent, d, EdgeKind::WantTo, rng);
        for &i in &intentions {
            edge(&mut g, d, i, EdgeKind::ChooseTo, rng);
            // occasional parallel edge
            edge(&mut g, d, i, EdgeKind::ChooseTo, rng);
        }
    }
    (g, agent)
}

/// Sum over every edge sequence from `start` to each node that visits no
/// node twice and uses at most `k` edges, built by extending all walks one
/// edge at a time.
fn brute_force_scores(g: &BehaviorGraph, start: NodeId, k: usize) -> BTreeMap<NodeId, f64> {
    let mut frontier: Vec<(Vec<NodeId>, f64)> = vec![(vec![start], 1.0)];
    let mut scores = BTreeMap::new();
    for _ in 0..k {
        let mut next = Vec::new();
        for (nodes, weight) in &frontier {
            let last = *nodes.last().unwrap();
            for e in g.edges().iter().filter(|e| e.source == last) {
                if nodes.contains(&e.target) {
                    continue;
                }
                let mut extended = nodes.clone();
                extended.push(e.target);
                let w = weight * e.weight;
                *scores.entry(e.target).or_insert(0.0) += w;
                next.push((extended, w));
            }
        }
        frontier = next;
    }
    scores
}

fn oracle_prior(g: &BehaviorGraph, agent: NodeId, k: usize, set: &ChoiceCategorySet) -> Vec<f64> {
    let scores = brute_force_scores(g, agent, k);
    let raw: Vec<f64> = set
        .options()
        .iter()
        .map(|opt| {
            g.nodes()
                .iter()
                .find(|n| n.kind == NodeKind::Intention && &n.label == opt)
                .and_then(|n| scores.get(&n.id).copied())
                .unwrap_or(0.0)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / set.len() as f64; set.len()]
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let set = Output::PrimaryMode.choice_set();
    let mut rng = substream(2024, "acceptance-graphs", 0);
    let mut worst = 0.0f64;
    let mut degenerate = 0;
    for i in 0..500 {
        let (g, agent) = random_graph(&mut rng);
        assert!(g.node_count() <= 12);
        let k = 2 + i % 3;
        let expected = oracle_prior(&g, agent, k, &set);
        let sub = BehavioralSubgraph::from_graph(g, agent).unwrap();
        let got = prior_distribution(&sub, &set, k, 0.0);
        degenerate += usize::from(got.is_degenerate());
        for (a, b) in got.probabilities().iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-9 && elapsed < Duration::from_secs(30),
        format!("500 graphs, K in {{2,3,4}}, max |diff| {worst:.2e}, {degenerate} degenerate, {elapsed:.2?}"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut g = BehaviorGraph::with_default_choice_sets();
    let agent = g.add_node(NodeKind::Agent, "agent", Attributes::new()).unwrap();
    let p1 = g.add_node(NodeKind::Person, "p1", Attributes::new()).unwrap();
    let p2 = g.add_node(NodeKind::Person, "p2", Attributes::new()).unwrap();
    let d = g.add_node(NodeKind::Desire, "d", Attributes::new()).unwrap();
    let i = g.add_node(NodeKind::Intention, "walking", Attributes::new()).unwrap();
    g.add_edge(agent, p1, EdgeKind::SimilarTo, 1.0).unwrap();
    g.add_edge(p1, p2, EdgeKind::RelativeOf, 0.9).unwrap();
    g.add_edge(p2, d, EdgeKind::WantTo, 0.8).unwrap();
    g.add_edge(d, i, EdgeKind::ChooseTo, 0.5).unwrap();
    let sub = BehavioralSubgraph::from_graph(g, agent).unwrap();
    let score = raw_score(&sub, i, 4).unwrap();
    let set = Output::PrimaryMode.choice_set();
    let p = prior_distribution(&sub, &set, 4, 0.0).probability("walking").unwrap();
    let expected = 1.0 * 0.9 * 0.8 * 0.5;
    outcome(
        (score - 0.36).abs() <= 1e-12 && (score - expected).abs() <= 1e-12 && (p - 1.0).abs() <= 1e-12,
        format!("raw score {score}, P(walking) {p}"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut rng = substream(7, "acceptance-joints", 0);
    let set = Output::PrimaryMode.choice_set();
    let groups = Attribute::AgeGroup.categories();
    let random_joint = |rng: &mut dyn rand::RngCore| {
        let n = rng.random_range(1..400);
        let samples: Vec<(&str, &str)> = (0..n)
            .map(|_| {
                let g = groups[rng.random_range(0..groups.len())];
                let c = Output::PrimaryMode.categories()[rng.random_range(0..set.len())];
                (g, c)
            })
            .collect();
        joint_from_samples(samples, groups, &set).unwrap()
    };
    let mut worst_self = 0.0f64;
    let mut min_kld = f64::INFINITY;
    for _ in 0..100 {
        let p = random_joint(&mut rng);
        let q = random_joint(&mut rng);
        worst_self = worst_self.max(kld(&p, &p, 1e-9).unwrap()).max(mae(&p, &p).unwrap());
        min_kld = min_kld.min(kld(&p, &q, 1e-9).unwrap());
    }
    let hand = kld_cells(&[0.5, 0.5], &[0.9, 0.1], 1e-9).unwrap();
    let closed_form = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
    outcome(
        worst_self <= 1e-9 && min_kld >= 0.0 && (hand - 0.5108).abs() <= 1e-3 && (hand - closed_form).abs() <= 1e-6,
        format!("max self-divergence {worst_self:.1e}, min KLD {min_kld:.4}, KLD((.5,.5),(.9,.1)) = {hand:.4}"),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let records = generate_synthetic(&SyntheticSpec::strong_default(120, 31)).unwrap();
    let graph = BehaviorGraph::build_from_records(&records, &GraphBuildConfig::default()).unwrap();
    let embedder = HashEmbedder::default();
    let config = ChainConfig::default();
    let chain =
        PreferenceChain::new(&graph, &embedder, &IdentityLlm, GenerationParams::default(), config.clone()).unwrap();
    let queries = generate_synthetic(&SyntheticSpec::strong_default(100, 32)).unwrap();
    let mut rng = substream(33, "acceptance-queries", 0);
    let mut mismatches = 0;
    for q in &queries {
        let desire =
            Desire::new(TRIP_PURPOSES[rng.random_range(0..TRIP_PURPOSES.len())], rng.random_range(0..24)).unwrap();
        let agent = QueryAgent::new(q.profile, desire);
        let persons = top_k_similar(&graph, &agent, config.k, &embedder).unwrap();
        let params = SubgraphParams { depth: config.depth, tau: config.tau };
        let sub = extract_subgraph(&graph, &agent, &persons, &params, &embedder).unwrap();
        let prediction = chain.predict(&agent, &Output::ALL).unwrap();
        for (o, predicted) in Output::ALL.iter().zip(&prediction.outputs) {
            let prior = prior_distribution(&sub, &o.choice_set(), config.max_path_edges, config.epsilon);
            let bits = |d: &PreferenceDistribution| d.probabilities().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
            if bits(&prior) != bits(&predicted.calibration.posterior) {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("100 query agents, {mismatches} posterior/prior mismatches"))
}

// ---------------------------------------------------------------- 5 and 6

fn split(seed: u64, n_ref: usize, n_val: usize) -> (Vec<TripRecord>, Vec<TripRecord>) {
    let all = generate_synthetic(&SyntheticSpec::strong_default(n_ref + n_val, seed)).unwrap();
    split_reference_validation(&all, n_ref, n_val, seed).unwrap()
}

fn chain_report(reference: &[TripRecord], validation: &[TripRecord], seed: u64) -> (EvaluationReport, Vec<TripRecord>) {
    let graph = BehaviorGraph::build_from_records(reference, &GraphBuildConfig::default()).unwrap();
    let embedder = HashEmbedder::default();
    let config = ChainConfig { k: 5, max_path_edges: 4, epsilon: 0.0, ..ChainConfig::default() };
    let chain = PreferenceChain::new(&graph, &embedder, &IdentityLlm, GenerationParams::default(), config).unwrap();
    let simulated = simulate_population(&chain, validation, &Output::ALL, seed).unwrap();
    (evaluate_populations(validation, &simulated, &Output::ALL, 1e-9).unwrap(), simulated)
}

fn baseline_report(p: &dyn ChoicePredictor, validation: &[TripRecord], seed: u64) -> EvaluationReport {
    let simulated = simulate_population(p, validation, &Output::ALL, seed).unwrap();
    evaluate_populations(validation, &simulated, &Output::ALL, 1e-9).unwrap()
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in 1..=10u64 {
        let (reference, validation) = split(seed, 50, 10_000);
        let (chain, _) = chain_report(&reference, &validation, seed);
        let uniform = baseline_report(&UniformPredictor, &validation, seed);
        let marginal = baseline_report(&MarginalPredictor::from_records(&reference), &validation, seed);
        let beaten = chain.entries.iter().all(|e| {
            let u = uniform.entry(&e.dimension, &e.output).unwrap().kld;
            let m = marginal.entry(&e.dimension, &e.output).unwrap().kld;
            e.kld < u && e.kld < m
        });
        wins += usize::from(beaten);
        notes.push(format!(
            "seed {seed}: chain {:.3} uniform {:.3} marginal {:.3}{}",
            chain.mean_kld,
            uniform.mean_kld,
            marginal.mean_kld,
            if beaten { "" } else { " (lost a dimension)" }
        ));
    }
    let elapsed = start.elapsed();
    for n in &notes {
        println!("      {n}");
    }
    outcome(
        wins >= 9 && elapsed < Duration::from_secs(300),
        format!("chain beats both baselines on every dimension in {wins}/10 seeds, {elapsed:.2?}"),
    )
}

fn criterion_6() -> Outcome {
    let mean_at = |n: usize| {
        let total: f64 = (1..=5u64)
            .map(|seed| {
                let (reference, validation) = split(100 + seed, n, 1000);
                chain_report(&reference, &validation, seed).0.mean_kld
            })
            .sum();
        total / 5.0
    };
    let (k10, k50) = (mean_at(10), mean_at(50));
    outcome(k50 <= k10, format!("mean KLD n=10 {k10:.4}, n=50 {k50:.4}"))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let golden = fixtures().join("golden");
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::load(&golden.join("run.toml")).unwrap();
    config.paths.out = dir.path().to_path_buf();
    let providers = Providers::mock(config.embedding.dimension).unwrap();
    let first = cmd_simulate(&config, &providers).unwrap();
    let same = |name: &str| std::fs::read(dir.path().join(name)).unwrap() == std::fs::read(golden.join(name)).unwrap();
    let golden_match = same("edges.csv") && same("pois.csv");
    let path_edges: usize = first.day.trips.iter().map(|t| t.edges.len()).sum();
    let conserved = first.day.tally.total_traversals() == path_edges as u64;
    let rerun = cmd_simulate(&config, &providers).unwrap();
    outcome(
        golden_match && conserved && rerun.day == first.day,
        format!(
            "golden tally {}, {} traversals over {} path edges",
            if golden_match { "matches" } else { "DIFFERS" },
            first.day.tally.total_traversals(),
            path_edges
        ),
    )
}

// ---------------------------------------------------------------- 8

#[derive(serde::Deserialize)]
struct Cases {
    case: Vec<Case>,
}

#[derive(serde::Deserialize)]
struct Case {
    args: Vec<String>,
    exit: i32,
}

fn criterion_8() -> Outcome {
    // empty subgraph: a graph without persons, and an answer that cannot be
    // parsed, so the flagged uniform prior must survive calibration
    let empty = BehaviorGraph::with_default_choice_sets();
    let embedder = HashEmbedder::default();
    let unparseable = FixedLlm("no idea".into());
    let chain =
        PreferenceChain::new(&empty, &embedder, &unparseable, GenerationParams::default(), ChainConfig::default())
            .unwrap();
    let profile = generate_synthetic(&SyntheticSpec::strong_default(1, 0)).unwrap()[0].profile;
    let agent = QueryAgent::new(profile, Desire::new("work", 8).unwrap());
    let prediction = chain.predict(&agent, &Output::ALL).unwrap();
    let uniform_flagged = prediction.outputs.iter().all(|o| {
        let n = o.prior.probabilities().len() as f64;
        o.prior.is_degenerate()
            && o.prior.probabilities().iter().all(|p| (p - 1.0 / n).abs() < 1e-15)
            && o.calibration.source == CalibrationSource::DegenerateUniform
            && o.calibration.posterior == o.prior
    });

    // garbage answer over a real prior
    let set = Output::PrimaryMode.choice_set();
    let prior = PreferenceDistribution::from_scores(set, &[0.1, 0.2, 0.0, 0.0, 0.7, 0.0, 0.0], 0.0);
    let garbage = FixedLlm("I think the person will probably drive, maybe.".into());
    let result = calibrate(&agent, &prior, "", &garbage, &GenerationParams::default());
    let fallback = result.source == CalibrationSource::FallbackPrior && result.posterior == prior;

    // error corpus through the binary
    let errors = fixtures().join("errors");
    let cases: Cases = toml::from_str(&std::fs::read_to_string(errors.join("cases.toml")).unwrap()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    for case in &cases.case {
        let status = Command::new(env!("CARGO_BIN_EXE_prefchain"))
            .current_dir(&errors)
            .args(&case.args)
            .arg("--out")
            .arg(out.path())
            .output()
            .unwrap()
            .status;
        if status.code() != Some(case.exit) {
            failures.push(format!("{:?} exited {:?}, expected {}", case.args, status.code(), case.exit));
        }
    }
    for f in &failures {
        println!("      {f}");
    }
    outcome(
        uniform_flagged && fallback && failures.is_empty(),
        format!(
            "empty graph uniform+flag {uniform_flagged}, garbage answer falls back {fallback}, {}/{} corpus cases exit as specified",
            cases.case.len() - failures.len(),
            cases.case.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("path-scoring oracle equivalence", criterion_1),
        ("four-edge chain score", criterion_2),
        ("metric identities", criterion_3),
        ("identity-calibration regression", criterion_4),
        ("synthetic recovery", criterion_5),
        ("reference-size trend", criterion_6),
        ("mobility determinism and conservation", criterion_7),
        ("degenerate handling", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!result.pass);
        println!("{} [{}] {name}: {}", if result.pass { "PASS" } else { "FAIL" }, i + 1, result.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
