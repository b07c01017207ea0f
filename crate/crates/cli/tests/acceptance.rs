//! Acceptance suite: one test per criterion, each printing a pass line with
//! its pinned tolerances. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines; a failed criterion fails its test.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use si_agent_cli::compare::{build_comparison, classify_input};
use si_agent_cli::report::{learning_curve_csv, read_run_log, tradeoff_csv};
use si_agent_core::eval::metrics::{bleu, exact_match, pass_at_k, rouge_l};
use si_agent_core::eval::readability::readability_stats;
use si_agent_core::instructor::{
    evolve_step, readability_filter, refine_llm, tournament_select_index, EvolutionConfig,
    EvolveCtx, HistoryEntry, InstructorError, InstructorLlm, MetaPromptConfig,
};
use si_agent_core::{
    build_meta_prompt, detect_plateau, load_dataset, run_optimization, should_terminate,
    CandidateIds, Dataset, FeedbackSignal, Origin, ProviderSet, RunConfig, RunOptions, ScoreVector,
    ScriptedProvider, SiCandidate, StopReason, Strategy, TaskInstance, TaskType, UsageMeter,
    Weights,
};

fn workspace_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn fixtures_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}

fn em_task(references: &[&str], pattern: Option<&str>) -> TaskInstance {
    let mut metadata = std::collections::BTreeMap::new();
    if let Some(p) = pattern {
        metadata.insert("answer_pattern".to_string(), serde_json::json!(p));
    }
    TaskInstance {
        id: "t".into(),
        input: "q".into(),
        references: references.iter().map(|s| s.to_string()).collect(),
        task_type: TaskType::Reasoning,
        metadata,
    }
}

#[test]
fn acceptance_1_metric_oracles() {
    let start = Instant::now();

    let stats = readability_stats("The cat sat on the mat.").unwrap();
    assert!((stats.fre - 116.145).abs() < 1e-6, "FRE {}", stats.fre);
    assert!(
        (stats.fk_grade - (-1.45)).abs() < 1e-6,
        "FKGL {}",
        stats.fk_grade
    );

    let bleu_value = bleu("the cat", &["the cat sat".to_string()]).unwrap();
    assert!((bleu_value - 0.6065).abs() < 1e-4, "BLEU {bleu_value}");

    let rouge_value = rouge_l("the cat", "the cat sat").unwrap();
    assert!((rouge_value - 0.8).abs() < 1e-9, "ROUGE-L {rouge_value}");

    assert_eq!(exact_match("42", &em_task(&["42"], None)).unwrap(), 1);
    assert_eq!(exact_match("43", &em_task(&["42"], None)).unwrap(), 0);
    assert_eq!(
        exact_match("Answer: 42", &em_task(&["42"], Some(r"Answer:\s*(\S+)"))).unwrap(),
        1
    );

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!(
        "criterion 1 (metric oracles, FRE/FKGL 1e-6, BLEU 1e-4, ROUGE 1e-9): PASS in {elapsed:?}"
    );
}

fn brute_force_pass_at_k(n: u64, c: u64, k: u64) -> f64 {
    // all C(n,k) index subsets; samples 0..c are the correct ones
    let mut total = 0u64;
    let mut hits = 0u64;
    for mask in 0u32..(1u32 << n) {
        if u64::from(mask.count_ones()) != k {
            continue;
        }
        total += 1;
        if (0..n).any(|i| i < c && mask & (1 << i) != 0) {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

#[test]
fn acceptance_2_pass_at_k_equivalence() {
    let start = Instant::now();
    for n in 1..=8u64 {
        for c in 0..=n {
            for k in 1..=n {
                let closed = pass_at_k(n, c, k).unwrap();
                let brute = brute_force_pass_at_k(n, c, k);
                assert!(
                    (closed - brute).abs() < 1e-12,
                    "n={n} c={c} k={k}: {closed} vs {brute}"
                );
            }
            for k in 1..n {
                assert!(pass_at_k(n, c, k + 1).unwrap() >= pass_at_k(n, c, k).unwrap());
            }
        }
        for k in 1..=n {
            for c in 0..n {
                assert!(pass_at_k(n, c + 1, k).unwrap() >= pass_at_k(n, c, k).unwrap());
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!("criterion 2 (pass@k == brute force for n<=8, 1e-12): PASS in {elapsed:?}");
}

fn synthetic_dataset() -> Dataset {
    load_dataset(workspace_path("configs/synthetic_tasks.jsonl")).unwrap()
}

fn synthetic_config() -> RunConfig {
    RunConfig {
        strategy: Strategy::Evolutionary,
        weights: Weights::new(0.7, 0.3).unwrap(),
        max_iterations: 30,
        minibatch_size: 8,
        val_every: 5,
        seed: 42,
        task_description: "Answer each arithmetic question.".to_string(),
        ..Default::default()
    }
}

#[test]
fn acceptance_3_synthetic_convergence() {
    let start = Instant::now();
    let dataset = synthetic_dataset();
    assert_eq!(dataset.train.len(), 8);
    assert_eq!(dataset.val.len(), 4);

    let dir = tempfile::tempdir().unwrap();
    let result = run_optimization(
        &synthetic_config(),
        &dataset,
        &ProviderSet::default(),
        RunOptions::new(dir.path()),
    )
    .unwrap();

    // no network I/O: the synthetic follower makes no provider calls
    assert_eq!(result.state.usage.call_count, 0);

    let best = result.state.best.as_ref().unwrap();
    assert_eq!(best.feedback.scores.performance, Some(1.0));
    let fre = readability_stats(&result.best.text).unwrap().fre;
    assert!(fre >= 50.0, "final SI FRE {fre}");
    assert!(result.state.iteration <= 30);

    let records = read_run_log(dir.path()).unwrap();
    let converged_at = records
        .iter()
        .find(|r| r.feedback.iter().any(|f| f.scores.performance == Some(1.0)))
        .map(|r| r.iteration)
        .expect("converged");
    assert_eq!(converged_at, 7, "pinned convergence iteration for seed 42");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "criterion 3 (synthetic convergence: perf 1.0, FRE {fre:.1} >= 50, iter {converged_at} <= 30): PASS in {elapsed:?}"
    );
}

#[test]
fn acceptance_4_determinism_and_resume() {
    let config = synthetic_config();
    let dataset = synthetic_dataset();

    let run = |dir: &Path, cfg: &RunConfig, resume: bool| {
        run_optimization(
            cfg,
            &dataset,
            &ProviderSet::default(),
            RunOptions {
                out_dir: dir.to_path_buf(),
                resume,
                progress: None,
            },
        )
        .unwrap();
        std::fs::read(dir.join("run.jsonl")).unwrap()
    };

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let log_a = run(dir_a.path(), &config, false);
    let log_b = run(dir_b.path(), &config, false);
    assert_eq!(log_a, log_b, "identical runs must be byte-identical");

    let mut twenty = config.clone();
    twenty.max_iterations = 20;
    let full_dir = tempfile::tempdir().unwrap();
    let full_log = run(full_dir.path(), &twenty, false);

    let mut ten = twenty.clone();
    ten.max_iterations = 10;
    let split_dir = tempfile::tempdir().unwrap();
    run(split_dir.path(), &ten, false);
    let resumed_log = run(split_dir.path(), &twenty, true);
    assert_eq!(full_log, resumed_log, "resume must reproduce the log");

    println!("criterion 4 (byte-identical logs; checkpoint-resume at 10 of 20): PASS");
}

fn history_entry(id: &str, text: &str, scalar: f64, iteration: u32) -> HistoryEntry {
    HistoryEntry {
        candidate: SiCandidate::new(id, text, None, Origin::SeedTemplate, iteration).unwrap(),
        feedback: FeedbackSignal {
            scalar,
            scores: ScoreVector {
                performance: Some(scalar),
                ..Default::default()
            },
            critique_tags: vec![],
            critique_text: None,
            preference: None,
        },
        iteration,
    }
}

#[test]
fn acceptance_5_meta_prompt_contract() {
    let history: Vec<HistoryEntry> = (0..12)
        .map(|i| history_entry(&format!("c{i}"), &format!("Text {i}"), i as f64 / 12.0, i))
        .collect();
    let cfg = MetaPromptConfig {
        task_description: "task".to_string(),
        top_k: 10,
        ..Default::default()
    };

    let prompt = build_meta_prompt(&history, &cfg, &[]);
    assert_eq!(prompt.matches("Instruction: ").count(), 10);
    // scores rendered worst to best
    let scores: Vec<usize> = (2..12)
        .map(|i| {
            prompt
                .find(&format!("Instruction: Text {i}\n"))
                .unwrap_or_else(|| panic!("entry {i} missing"))
        })
        .collect();
    for pair in scores.windows(2) {
        assert!(pair[0] < pair[1], "ascending order violated");
    }

    // scripted refinement round-trips through the markers
    let provider = ScriptedProvider::from_queue(["prefix <INS>Refined instruction.</INS> suffix"]);
    let llm = InstructorLlm::new(&provider, "m");
    let mut ids = CandidateIds::starting_at(50);
    let feedback = history[11].feedback.clone();
    let (candidate, _) = refine_llm(&history, &feedback, &cfg, &[], &llm, &mut ids, 12).unwrap();
    assert_eq!(candidate.text, "Refined instruction.");
    assert_eq!(candidate.parent_id.as_deref(), Some("c11"));

    // marker-missing errors after exactly one retry
    let provider = ScriptedProvider::from_queue(["junk", "junk again"]);
    let llm = InstructorLlm::new(&provider, "m");
    let mut ids = CandidateIds::default();
    let err = refine_llm(&history, &feedback, &cfg, &[], &llm, &mut ids, 12).unwrap_err();
    assert!(matches!(err, InstructorError::MarkerMissing));
    assert_eq!(provider.calls_made(), 2, "one initial call plus one retry");

    println!("criterion 5 (meta-prompt: 10 ascending blocks, marker round-trip, 1 retry): PASS");
}

#[test]
fn acceptance_6_tournament_and_evolution_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // full-size tournament returns the argmax on 1000 random populations
    for _ in 0..1000 {
        let size = rng.gen_range(1..=12usize);
        let fitness: Vec<f64> = (0..size).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut trng = ChaCha8Rng::seed_from_u64(rng.gen());
        let winner = tournament_select_index(size, &fitness, size, &mut trng, false).unwrap();
        let argmax = fitness
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(winner, argmax);
    }

    // evolve_step preserves population size and elitism on 200 generations
    for generation in 0..200 {
        let size = rng.gen_range(2..=10usize);
        let elite_count = rng.gen_range(0..size.min(3));
        let population: Vec<SiCandidate> = (0..size)
            .map(|i| {
                SiCandidate::new(
                    format!("g{generation}-c{i}"),
                    format!("Do the task with care, version {i}."),
                    None,
                    Origin::SeedTemplate,
                    0,
                )
                .unwrap()
            })
            .collect();
        let feedbacks: Vec<FeedbackSignal> = (0..size)
            .map(|_| {
                let scalar = rng.gen_range(0.0..1.0);
                FeedbackSignal {
                    scalar,
                    scores: ScoreVector {
                        performance: Some(scalar),
                        ..Default::default()
                    },
                    critique_tags: vec![],
                    critique_text: None,
                    preference: None,
                }
            })
            .collect();
        let cfg = EvolutionConfig {
            population_size: size,
            elite_count,
            tournament_size: rng.gen_range(1..=size),
            ..Default::default()
        };
        let mut ids = CandidateIds::starting_at(1000 * generation as u64);
        let mut usage = UsageMeter::default();
        let mut ctx_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut ctx = EvolveCtx {
            llm: None,
            rng: &mut ctx_rng,
            ids: &mut ids,
            iteration: 1,
            usage: &mut usage,
            filter_enabled: true,
        };
        let next = evolve_step(&population, &feedbacks, &cfg, &mut ctx).unwrap();
        assert_eq!(next.len(), size);
        // elites appear verbatim, best first
        let mut order: Vec<usize> = (0..size).collect();
        order.sort_by(|&a, &b| {
            feedbacks[b]
                .scalar
                .total_cmp(&feedbacks[a].scalar)
                .then(a.cmp(&b))
        });
        for (slot, &idx) in order[..elite_count].iter().enumerate() {
            assert_eq!(next[slot], population[idx]);
        }
        for child in &next {
            assert!(!child.text.trim().is_empty());
        }
    }

    // readability filter drops a dense candidate, falls back when all fail
    let dense = SiCandidate::new(
        "dense",
        "Comprehensively operationalize multidimensional organizational heuristics, \
         systematically orchestrating infrastructural considerations notwithstanding \
         extraordinarily complicated institutional interdependencies.",
        None,
        Origin::SeedTemplate,
        0,
    )
    .unwrap();
    assert!(readability_stats(&dense.text).unwrap().fre < 50.0);
    let simple =
        SiCandidate::new("simple", "Keep it short.", None, Origin::SeedTemplate, 0).unwrap();
    let outcome = readability_filter(vec![simple.clone(), dense.clone()], 50.0);
    assert!(!outcome.fallback);
    assert_eq!(outcome.kept.len(), 1);
    assert_eq!(outcome.kept[0].id, "simple");
    let outcome = readability_filter(vec![dense.clone()], 50.0);
    assert!(outcome.fallback);
    assert_eq!(outcome.kept.len(), 1);

    println!(
        "criterion 6 (tournament argmax x1000, evolve size+elitism x200, filter+fallback): PASS"
    );
}

#[test]
fn acceptance_7_plateau_and_termination() {
    // documented truth table
    assert!(detect_plateau(
        &[0.50, 0.51, 0.52, 0.52, 0.52, 0.52],
        3,
        0.01
    ));
    assert!(!detect_plateau(&[0.50, 0.51, 0.53], 2, 0.01));
    assert!(!detect_plateau(&[0.50, 0.51], 5, 0.01));

    // priority order on crafted states
    use si_agent_core::opt_loop::{BestEntry, RunState, ValPoint};
    let candidate = SiCandidate::new("c", "Do it.", None, Origin::SeedTemplate, 0).unwrap();
    let entry = BestEntry {
        candidate: candidate.clone(),
        feedback: FeedbackSignal {
            scalar: 0.95,
            scores: ScoreVector {
                performance: Some(0.95),
                ..Default::default()
            },
            critique_tags: vec![],
            critique_text: None,
            preference: None,
        },
    };
    let mut state = RunState {
        iteration: 30,
        history: vec![],
        population: vec![candidate],
        best: Some(entry),
        val_history: (0..6)
            .map(|i| ValPoint {
                iteration: i,
                scalar: 0.95,
            })
            .collect(),
        val_best: None,
        usage: UsageMeter {
            prompt_tokens: 10_001,
            completion_tokens: 0,
            call_count: 1,
            wall_ms: 0,
        },
        rng_seed: 42,
        next_candidate_id: 1,
        pending_usage: UsageMeter::default(),
    };
    // everything fires at once: target wins
    let config = RunConfig {
        target_scalar: Some(0.9),
        token_budget: Some(10_000),
        plateau_window: 3,
        max_iterations: 30,
        ..Default::default()
    };
    assert_eq!(
        should_terminate(&state, &config).reason,
        StopReason::TargetReached
    );
    // drop the target: budget wins
    let config = RunConfig {
        token_budget: Some(10_000),
        plateau_window: 3,
        max_iterations: 30,
        ..Default::default()
    };
    assert_eq!(
        should_terminate(&state, &config).reason,
        StopReason::BudgetExhausted
    );
    // drop the budget: plateau wins over max_iterations
    let config = RunConfig {
        plateau_window: 3,
        max_iterations: 30,
        ..Default::default()
    };
    assert_eq!(
        should_terminate(&state, &config).reason,
        StopReason::Plateau
    );
    // fresh validation history: max_iterations fires
    state.val_history = vec![ValPoint {
        iteration: 0,
        scalar: 0.5,
    }];
    assert_eq!(
        should_terminate(&state, &config).reason,
        StopReason::MaxIterations
    );
    // nothing fires
    state.iteration = 3;
    let decision = should_terminate(&state, &config);
    assert!(!decision.stop);
    assert_eq!(decision.reason, StopReason::None);

    println!("criterion 7 (plateau truth table; termination priority order): PASS");
}

#[test]
fn acceptance_8_reporting_fidelity() {
    // compare ingests the reference baseline row
    let baselines = workspace_path("configs/baselines_gsm8k.json");
    let inputs = vec![
        (baselines.clone(), classify_input(&baselines).unwrap()),
        (
            fixtures_path("run_fixture"),
            classify_input(&fixtures_path("run_fixture")).unwrap(),
        ),
    ];
    let output = build_comparison(&inputs, 1000, 42).unwrap();
    assert!(
        output.markdown.contains("**82.1**"),
        "best performance not marked:\n{}",
        output.markdown
    );
    assert!(output.markdown.contains("79.5"));
    assert!(output.markdown.contains("67.4"));
    let readability_line = output
        .markdown
        .lines()
        .find(|l| l.contains("SI Readability (FRE)"))
        .unwrap();
    assert!(readability_line.contains("67.4"));

    // report CSVs are byte-identical to the committed goldens
    let records = read_run_log(&fixtures_path("run_fixture")).unwrap();
    let learning = learning_curve_csv(&records);
    let tradeoff = tradeoff_csv(&records);
    let golden_learning =
        std::fs::read_to_string(fixtures_path("golden/learning_curve.csv")).unwrap();
    let golden_tradeoff = std::fs::read_to_string(fixtures_path("golden/tradeoff.csv")).unwrap();
    assert_eq!(learning, golden_learning);
    assert_eq!(tradeoff, golden_tradeoff);
    assert!(tradeoff.contains("si-000003,0.795,67.4\n"));

    println!(
        "criterion 8 (compare marks 82.1 best, renders 79.5/67.4; golden CSVs byte-exact): PASS"
    );
}

#[test]
fn acceptance_9_ablation_hook() {
    let dataset = synthetic_dataset();

    // weights (1.0, 0.0), filter disabled: dense candidates survive
    let mut unfiltered = synthetic_config();
    unfiltered.weights = Weights::new(1.0, 0.0).unwrap();
    unfiltered.readability_filter = false;
    let dir = tempfile::tempdir().unwrap();
    run_optimization(
        &unfiltered,
        &dataset,
        &ProviderSet::default(),
        RunOptions::new(dir.path()),
    )
    .unwrap();
    let records = read_run_log(dir.path()).unwrap();
    let survivor = records
        .iter()
        .skip(1)
        .flat_map(|r| &r.candidates)
        .find(|c| {
            readability_stats(&c.text)
                .map(|s| s.fre < 50.0)
                .unwrap_or(false)
        });
    assert!(
        survivor.is_some(),
        "filter off must admit FRE < 50 candidates in generations >= 1"
    );

    // weights (0.7, 0.3), filter enabled: the final best stays readable
    let dir = tempfile::tempdir().unwrap();
    let result = run_optimization(
        &synthetic_config(),
        &dataset,
        &ProviderSet::default(),
        RunOptions::new(dir.path()),
    )
    .unwrap();
    let fre = readability_stats(&result.best.text).unwrap().fre;
    assert!(fre >= 50.0, "filtered best FRE {fre}");

    println!(
        "criterion 9 (ablation: filter off admits FRE<50 survivors; filtered best FRE >= 50): PASS"
    );
}
