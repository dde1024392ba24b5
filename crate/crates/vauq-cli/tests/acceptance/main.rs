//! Acceptance suite. Each test is one criterion, runs at its stated
//! tolerance, and prints one pass/fail line (run with `-- --nocapture` to
//! see the lines for passing criteria).

mod oracle;

use std::collections::HashMap;
use std::process::Command;
use std::time::Instant;

use oracle::{pairwise_auroc, OracleAttention, OracleToy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vauq::backend::{Backend, Decoding, MaskKind, MaskSpec, ToyBackend, ToyConfig};
use vauq::baselines;
use vauq::eval::{auroc, timing_report, EvalRecord, Split};
use vauq::pipeline::{score_dataset, ScoringConfig};
use vauq::report::ScoreName;
use vauq::saliency::{aggregate_attention, evidence_attention_ratio, top_k_mask, SaliencyMap};
use vauq::scores::{
    image_information_score, mean_entropy, vauq_score, vauq_score_expanded, BlankMode,
    ConditionEntropies, VauqParams,
};
use vauq::synthetic::{generate_population, population_backend, PopulationKind, PopulationSpec};

fn pass(criterion: u32, name: &str, detail: String) {
    println!("acceptance {criterion:02} {name}: PASS ({detail})");
}

fn oracle_of(cfg: &ToyConfig) -> OracleToy {
    OracleToy {
        vocab_size: cfg.vocab_size,
        evidence: cfg.evidence.clone(),
        answer_img: cfg.answer_img,
        answer_prior: cfg.answer_prior,
        beta_img: cfg.beta_img,
        beta_prior: cfg.beta_prior,
    }
}

/// Criterion 1: mean entropy, blank/core image-information, perplexity and
/// the combined score match the brute-force oracle within 1e-9 absolute on
/// at least 200 randomized toy configurations, in under a minute.
#[test]
fn criterion_01_oracle_equivalence() {
    const TOL: f64 = 1e-9;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_250_101);
    let mut max_err = 0.0f64;
    let trials = 250;
    for trial in 0..trials {
        let rows = rng.gen_range(2..=5);
        let cols = rng.gen_range(2..=5);
        let n = rows * cols;
        let mut all: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            all.swap(i, j);
        }
        let mut evidence = all[..rng.gen_range(1..=n / 2)].to_vec();
        evidence.sort_unstable();
        let vocab = rng.gen_range(4..=32);
        let n_layers = rng.gen_range(4..=8);
        let band_start = rng.gen_range(0..n_layers - 1);
        let band_end = rng.gen_range(band_start..n_layers);
        let cfg = ToyConfig {
            vocab_size: vocab,
            grid: (rows, cols),
            n_layers,
            n_heads: rng.gen_range(1..=4),
            hidden_dim: 4,
            grounded_band: (band_start, band_end),
            rho: 0.9,
            visual_frac: 0.6,
            answer_len: rng.gen_range(1..=5),
            evidence: evidence.clone(),
            focus: None,
            answer_img: rng.gen_range(0..vocab) as u32,
            answer_prior: rng.gen_range(0..vocab) as u32,
            beta_img: rng.gen_range(0.0..6.0),
            beta_prior: rng.gen_range(0.0..6.0),
            attn_jitter: 0.0,
            hidden_layers: None,
        };
        let oracle = oracle_of(&cfg);
        let k_percent = rng.gen_range(0..=10) * 10;
        let alpha = rng.gen_range(0.0..5.0);

        let mut backend = ToyBackend::new(cfg.clone()).unwrap();
        let full = backend.generate("", "q", &Decoding::Greedy, 16).unwrap();
        assert_eq!(full.tokens[0], oracle.greedy_token(), "trial {trial}");

        let h_full = mean_entropy(&full.steps).unwrap();
        let h_blank = mean_entropy(
            &backend
                .rescore("", "q", &full.tokens, &MaskSpec::blank(n))
                .unwrap()
                .steps,
        )
        .unwrap();
        let map = aggregate_attention(&full, cfg.grounded_band).unwrap();
        let mask = top_k_mask(&map, k_percent).unwrap();
        let oracle_mask = OracleAttention {
            n_tokens: n,
            focus: evidence.clone(),
            rho: cfg.rho,
            visual_frac: cfg.visual_frac,
            n_heads: cfg.n_heads,
            n_generated: full.tokens.len(),
            band_layers: band_end - band_start + 1,
        }
        .top_k_indices(k_percent);
        assert_eq!(mask.indices, oracle_mask, "trial {trial}: mask selection");
        let h_core = if mask.kind == MaskKind::None {
            h_full
        } else {
            mean_entropy(
                &backend.rescore("", "q", &full.tokens, &mask).unwrap().steps,
            )
            .unwrap()
        };

        let ce = ConditionEntropies::new(h_full)
            .with_blank(h_blank, BlankMode::Knockout)
            .with_masked(MaskKind::Core, h_core);
        let g_core = oracle.g_under(&mask.indices);
        let params = VauqParams {
            alpha,
            k_percent,
            layer_band: cfg.grounded_band,
        };

        let checks = [
            (h_full, oracle.entropy(1.0)),
            (
                image_information_score(&ce, MaskKind::Blank).unwrap(),
                oracle.entropy(0.0) - oracle.entropy(1.0),
            ),
            (
                image_information_score(&ce, MaskKind::Core).unwrap(),
                oracle.entropy(g_core) - oracle.entropy(1.0),
            ),
            (
                baselines::perplexity(&full.steps).unwrap(),
                oracle.perplexity(&full.tokens, 1.0),
            ),
            (
                vauq_score(&ce, &params).unwrap(),
                oracle.entropy(1.0) - alpha * (oracle.entropy(g_core) - oracle.entropy(1.0)),
            ),
        ];
        for (i, (got, want)) in checks.iter().enumerate() {
            let err = (got - want).abs();
            max_err = max_err.max(err);
            assert!(err <= TOL, "trial {trial} check {i}: |{got} - {want}| = {err}");
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "took {elapsed:.1}s, budget is 60s");
    pass(
        1,
        "oracle equivalence",
        format!("{trials} configs, max abs err {max_err:.2e}, {elapsed:.1}s"),
    );
}

/// Criterion 2: the two algebraic forms of the combined score agree within
/// 1e-12 on 10^4 random (h_full, h_masked, alpha) triples.
#[test]
fn criterion_02_combined_score_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut max_err = 0.0f64;
    for _ in 0..10_000 {
        let ce = ConditionEntropies::new(rng.gen_range(0.0..15.0))
            .with_masked(MaskKind::Core, rng.gen_range(0.0..15.0));
        let params = VauqParams {
            alpha: rng.gen_range(0.0..5.0),
            k_percent: 60,
            layer_band: (0, 0),
        };
        let a = vauq_score(&ce, &params).unwrap();
        let b = vauq_score_expanded(&ce, &params).unwrap();
        let err = (a - b).abs();
        max_err = max_err.max(err);
        assert!(err <= 1e-12, "|{a} - {b}| = {err}");
    }
    pass(
        2,
        "combined-score algebra",
        format!("10000 triples, max abs err {max_err:.2e}"),
    );
}

fn values_by_sample(
    results: &[vauq::pipeline::SampleScores],
    score: ScoreName,
) -> HashMap<String, f64> {
    results
        .iter()
        .flat_map(|s| &s.rows)
        .filter(|r| r.score_name == score)
        .map(|r| (r.sample_id.clone(), r.value))
        .collect()
}

fn split_auroc(
    records: &[EvalRecord],
    values: &HashMap<String, f64>,
    split: Option<Split>,
) -> f64 {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in records {
        if split.is_some_and(|s| r.split != s) {
            continue;
        }
        let (Some(&v), Some(l)) = (values.get(&r.sample_id), r.label.as_positive()) else {
            continue;
        };
        scores.push(v);
        labels.push(l);
    }
    auroc(&scores, &labels).unwrap()
}

/// Criterion 3: on the mixed factual/counterfactual population, entropy
/// drops by at least 15 AUROC points from the factual to the counterfactual
/// split, the core image-information score beats entropy by at least 10
/// points on the counterfactual split, and the combined score gives up at
/// most 2 points against the better single component overall. Means over 3
/// seeds, under 2 minutes.
#[test]
fn criterion_03_complementarity_on_the_mixed_population() {
    let started = Instant::now();
    let backend = ToyBackend::new(population_backend()).unwrap();
    let scores = [ScoreName::Entropy, ScoreName::IsCore, ScoreName::Vauq];
    let mut ent_factual = 0.0;
    let mut ent_cf = 0.0;
    let mut is_cf = 0.0;
    let mut ent_all = 0.0;
    let mut is_all = 0.0;
    let mut vauq_all = 0.0;
    let seeds = [101u64, 102, 103];
    for &seed in &seeds {
        let records = generate_population(&PopulationSpec::new(
            PopulationKind::Mixed,
            200,
            seed,
            "accept3",
        ))
        .unwrap();
        let cfg = ScoringConfig {
            seed,
            ..ScoringConfig::default()
        };
        let results = score_dataset(&backend, None, &cfg, &records, &scores, 4).unwrap();
        let entropy = values_by_sample(&results, ScoreName::Entropy);
        let is_core = values_by_sample(&results, ScoreName::IsCore);
        let vauq_values = values_by_sample(&results, ScoreName::Vauq);
        ent_factual += split_auroc(&records, &entropy, Some(Split::Factual));
        ent_cf += split_auroc(&records, &entropy, Some(Split::Counterfactual));
        is_cf += split_auroc(&records, &is_core, Some(Split::Counterfactual));
        ent_all += split_auroc(&records, &entropy, None);
        is_all += split_auroc(&records, &is_core, None);
        vauq_all += split_auroc(&records, &vauq_values, None);
    }
    let n = seeds.len() as f64;
    let (ent_factual, ent_cf, is_cf) = (ent_factual / n, ent_cf / n, is_cf / n);
    let (ent_all, is_all, vauq_all) = (ent_all / n, is_all / n, vauq_all / n);

    assert!(
        ent_factual - ent_cf >= 0.15,
        "entropy factual {ent_factual:.3} vs counterfactual {ent_cf:.3}: gap below 15 points"
    );
    assert!(
        is_cf - ent_cf >= 0.10,
        "is_core counterfactual {is_cf:.3} vs entropy {ent_cf:.3}: gap below 10 points"
    );
    assert!(
        vauq_all >= ent_all.max(is_all) - 0.02,
        "combined {vauq_all:.3} vs entropy {ent_all:.3} / is_core {is_all:.3}"
    );
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "took {elapsed:.1}s, budget is 120s");
    pass(
        3,
        "entropy/IS complementarity",
        format!(
            "entropy factual {ent_factual:.3} cf {ent_cf:.3}, is cf {is_cf:.3}, combined {vauq_all:.3}, {elapsed:.1}s"
        ),
    );
}

/// Criterion 4: masking-variant ordering. Ground-truth masking is at least
/// as good as core masking, which is at least as good as random masking,
/// within a 1-point noise band over 3 seeds.
#[test]
fn criterion_04_masking_variant_ordering() {
    let backend = ToyBackend::new(population_backend()).unwrap();
    let scores = [ScoreName::Vauq, ScoreName::VauqGt, ScoreName::VauqRand];
    let mut gt = 0.0;
    let mut core = 0.0;
    let mut rand_v = 0.0;
    let seeds = [201u64, 202, 203];
    for &seed in &seeds {
        let records = generate_population(&PopulationSpec::new(
            PopulationKind::Mixed,
            160,
            seed,
            "accept4",
        ))
        .unwrap();
        let cfg = ScoringConfig {
            seed,
            ..ScoringConfig::default()
        };
        let results = score_dataset(&backend, None, &cfg, &records, &scores, 4).unwrap();
        gt += split_auroc(&records, &values_by_sample(&results, ScoreName::VauqGt), None);
        core += split_auroc(&records, &values_by_sample(&results, ScoreName::Vauq), None);
        rand_v += split_auroc(&records, &values_by_sample(&results, ScoreName::VauqRand), None);
    }
    let n = seeds.len() as f64;
    let (gt, core, rand_v) = (gt / n, core / n, rand_v / n);
    assert!(gt >= core - 0.01, "ground-truth {gt:.3} vs core {core:.3}");
    assert!(core >= rand_v - 0.01, "core {core:.3} vs random {rand_v:.3}");
    pass(
        4,
        "masking-variant ordering",
        format!("gt {gt:.3} >= core {core:.3} >= random {rand_v:.3}"),
    );
}

/// Criterion 5: evidence-region attention diagnostics. Inside/outside mean
/// weight ratio is at least 5 over the grounded band and at most 1.2 over a
/// uniform band.
#[test]
fn criterion_05_evidence_attention_ratio() {
    let cfg = population_backend();
    let mut backend = ToyBackend::new(cfg.clone()).unwrap();
    let image_ref = "toy:ev=0,0,0.5,0.5";
    let layout = backend.layout(image_ref).unwrap().with_evidence(vec![
        vauq::backend::BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap(),
    ]);
    let trace = backend.generate(image_ref, "q", &Decoding::Greedy, 16).unwrap();

    let grounded = aggregate_attention(&trace, cfg.grounded_band).unwrap();
    let (inside, outside) = evidence_attention_ratio(&grounded, &layout).unwrap();
    let grounded_ratio = inside / outside;
    assert!(grounded_ratio >= 5.0, "grounded-band ratio {grounded_ratio:.2}");

    let uniform = aggregate_attention(&trace, (0, cfg.grounded_band.0 - 1)).unwrap();
    let (inside_u, outside_u) = evidence_attention_ratio(&uniform, &layout).unwrap();
    let uniform_ratio = inside_u / outside_u;
    assert!(uniform_ratio <= 1.2, "uniform-band ratio {uniform_ratio:.3}");
    pass(
        5,
        "evidence attention ratio",
        format!("grounded {grounded_ratio:.1}, uniform {uniform_ratio:.3}"),
    );
}

/// Criterion 6: saliency laws. Cardinality law over the full K/N grid,
/// selection invariance under positive scaling, and the tie rule on crafted
/// equal weights.
#[test]
fn criterion_06_saliency_laws() {
    let map_of = |weights: Vec<f64>| SaliencyMap {
        weights,
        layer_band: (0, 0),
        n_generated: 1,
    };
    let mut checks = 0usize;
    for n in 1usize..=64 {
        for k in (0u32..=100).step_by(10) {
            let weights: Vec<f64> = (0..n).map(|i| ((i * 31 + 7) % 97) as f64).collect();
            let mask = top_k_mask(&map_of(weights), k).unwrap();
            assert_eq!(mask.cardinality(), (k as usize * n) / 100, "N={n} K={k}");
            checks += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for _ in 0..200 {
        let n = rng.gen_range(2..64);
        let weights: Vec<f64> = (0..n)
            .map(|i| (rng.gen_range(0u32..1_000_000) as f64) * 64.0 + i as f64)
            .collect();
        let k = rng.gen_range(0..=100);
        let base = top_k_mask(&map_of(weights.clone()), k).unwrap();
        let c = 1.7f64.powi(rng.gen_range(-12..12));
        let scaled: Vec<f64> = weights.iter().map(|w| w * c).collect();
        let after = top_k_mask(&map_of(scaled), k).unwrap();
        assert_eq!(base.indices, after.indices, "scaling by {c} changed the selection");
        checks += 1;
    }
    let tied = top_k_mask(&map_of(vec![0.5; 8]), 50).unwrap();
    assert_eq!(tied.indices, vec![0, 1, 2, 3]);
    let tied = top_k_mask(&map_of(vec![0.2, 0.9, 0.9, 0.9, 0.1]), 40).unwrap();
    assert_eq!(tied.indices, vec![1, 2]);
    checks += 2;
    pass(6, "saliency laws", format!("{checks} checks"));
}

/// Criterion 7: rank-based AUROC matches the O(n^2) half-credit pairwise
/// oracle within 1e-12 on 100 random score/label sets of size <= 200.
#[test]
fn criterion_07_auroc_against_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut max_err = 0.0f64;
    for trial in 0..100 {
        let n = rng.gen_range(4..=200);
        let quantize = rng.gen_bool(0.5); // force plenty of ties half the time
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = rng.gen_range(-5.0..5.0);
                if quantize {
                    (s * 2.0).round() / 2.0
                } else {
                    s
                }
            })
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let fast = auroc(&scores, &labels).unwrap();
        let slow = pairwise_auroc(&scores, &labels);
        let err = (fast - slow).abs();
        max_err = max_err.max(err);
        assert!(err <= 1e-12, "trial {trial}: |{fast} - {slow}| = {err}");
    }
    pass(
        7,
        "AUROC correctness",
        format!("100 sets, max abs err {max_err:.2e}"),
    );
}

/// Criterion 8: efficiency accounting. The combined score costs one
/// generation plus at most two teacher-forced passes; dispersion baselines
/// cost exactly K generations; measured wall time orders the same way.
#[test]
fn criterion_08_efficiency_accounting() {
    let backend = ToyBackend::new(population_backend()).unwrap();
    let records = generate_population(&PopulationSpec::new(
        PopulationKind::Mixed,
        40,
        51,
        "accept8",
    ))
    .unwrap();
    let cfg = ScoringConfig::default();
    let rows = timing_report(
        &backend,
        &cfg,
        &records,
        &[ScoreName::Vauq, ScoreName::SemanticEntropy, ScoreName::EigenScore],
    )
    .unwrap();
    let by_name: HashMap<ScoreName, &vauq::eval::TimingRow> =
        rows.iter().map(|r| (r.score, r)).collect();
    let vauq_row = by_name[&ScoreName::Vauq];
    assert_eq!(vauq_row.generate_passes_per_sample, 1.0);
    assert!(
        vauq_row.rescore_passes_per_sample >= 1.0 && vauq_row.rescore_passes_per_sample <= 2.0,
        "core-only scoring takes 1 rescore, plus 1 if blank is requested"
    );
    for dispersion in [ScoreName::SemanticEntropy, ScoreName::EigenScore] {
        let row = by_name[&dispersion];
        assert_eq!(row.generate_passes_per_sample, cfg.sample_k as f64);
        assert_eq!(row.rescore_passes_per_sample, 0.0);
        assert!(
            vauq_row.mean_seconds < row.mean_seconds,
            "{dispersion}: {} vs {}",
            vauq_row.mean_seconds,
            row.mean_seconds
        );
    }

    // blank on top of core adds exactly one more teacher-forced pass
    let mut worker = backend.fork();
    let before = worker.pass_counts();
    let _ = vauq::pipeline::score_record(
        worker.as_mut(),
        None,
        &cfg,
        &records[0],
        &[ScoreName::Vauq, ScoreName::IsBlank],
    );
    let delta = worker.pass_counts().since(before);
    assert_eq!(delta.generate, 1);
    assert_eq!(delta.rescore, 2);

    pass(
        8,
        "efficiency accounting",
        format!(
            "combined {:.1}ms/sample vs dispersion {:.1}ms/sample",
            by_name[&ScoreName::Vauq].mean_seconds * 1e3,
            by_name[&ScoreName::SemanticEntropy].mean_seconds * 1e3
        ),
    );
}

/// Criterion 9: baseline formula spot checks at their stated tolerances.
#[test]
fn criterion_09_baseline_spot_checks() {
    use std::collections::BTreeMap;
    use vauq::backend::{
        AttentionTensor, Condition, GenerationTrace, HiddenStates, LayerHidden, StepStats,
    };

    // chain of embeddings on a quarter turn of a unit vector
    let mut layers = BTreeMap::new();
    layers.insert(
        0,
        LayerHidden {
            generated: vec![1.0, 0.0],
            visual: vec![],
        },
    );
    layers.insert(
        1,
        LayerHidden {
            generated: vec![0.0, 1.0],
            visual: vec![],
        },
    );
    let trace = GenerationTrace {
        tokens: vec![0],
        steps: vec![StepStats {
            entropy: 0.0,
            logprob_realized: 0.0,
        }],
        hidden: HiddenStates { dim: 2, layers },
        attention: AttentionTensor::zeros(1, 1, 1, 1),
        condition: Condition::Full,
        wall_time: 0.0,
    };
    let coe = baselines::chain_of_embeddings(&trace).unwrap();
    let coe_expected = 2.0f64.sqrt() - std::f64::consts::FRAC_PI_2;
    assert!((coe - coe_expected).abs() <= 1e-9, "{coe} vs {coe_expected}");

    // eigenscore floor on identical embeddings
    let k = 3;
    let d = 4;
    let set = baselines::SampleSet {
        texts: vec!["x".into(); k],
        embeddings: vec![vec![0.7, -0.2, 1.1, 0.4]; k],
        probs: None,
    };
    let eig = baselines::eigenscore(&set, 1e-3).unwrap();
    let eig_expected = (d as f64 / k as f64) * (1e-3f64).ln();
    assert!((eig - eig_expected).abs() <= 1e-9, "{eig} vs {eig_expected}");

    // semantic entropy of a {2, 1} cluster split
    let set = baselines::SampleSet {
        texts: vec!["a cat".into(), "A cat.".into(), "a dog".into()],
        embeddings: vec![vec![0.0]; 3],
        probs: None,
    };
    let se = baselines::semantic_entropy(&set, &baselines::NormalizedMatch).unwrap();
    assert!((se - 0.6365).abs() <= 1e-4, "{se}");

    pass(
        9,
        "baseline spot checks",
        format!("coe {coe:.6}, eigen {eig:.4}, semantic entropy {se:.4}"),
    );
}

/// Criterion 10: running `score` twice with one fixed run configuration
/// produces byte-identical report files.
#[test]
fn criterion_10_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_vauq");
    let data = dir.path().join("data.jsonl");
    let status = Command::new(bin)
        .args([
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--samples",
            "12",
            "--seed",
            "10",
            "--name",
            "accept10",
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "backend": {"kind": "toy"},
            "dataset": data,
            "output_dir": dir.path().join("out"),
            "scores": ["entropy", "perplexity", "is_core", "is_blank", "vauq", "verbalized", "svar", "semantic_entropy", "eigenscore", "contextual_lens", "chain_of_embeddings"],
            "seeds": [1],
            "jobs": 2
        })
        .to_string(),
    )
    .unwrap();

    let report_files = [
        "scores.jsonl",
        "summary.csv",
        "masks.jsonl",
        "manifest.jsonl",
        "run_config.json",
    ];
    let run = || {
        let status = Command::new(bin)
            .args(["score", "--config", config.to_str().unwrap()])
            .status()
            .unwrap();
        assert!(status.success());
        report_files
            .iter()
            .map(|f| std::fs::read(dir.path().join("out").join(f)).unwrap())
            .collect::<Vec<_>>()
    };
    let first = run();
    let second = run();
    let mut bytes = 0usize;
    for ((f, a), b) in report_files.iter().zip(&first).zip(&second) {
        assert_eq!(a, b, "{f} differs between identical runs");
        bytes += a.len();
    }
    pass(
        10,
        "run determinism",
        format!("{} report files, {bytes} bytes compared", report_files.len()),
    );
}
