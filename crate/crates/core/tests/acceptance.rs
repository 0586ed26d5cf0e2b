//! Acceptance criteria. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use vpr_sue::evaluation::{auc_pr, pr_curve};
use vpr_sue::model::{validate_map, Descriptor, DescriptorSet, Neighbor, Pose, PoseSet, RankedMatches};
use vpr_sue::pipeline::{
    self, score_dataset, synthesize, Dataset, GvChannelSpec, MethodSpec, RunManifest, SweepGrid, SynthSpec,
    RUN_MANIFEST_FILE, TIMING_FILE,
};
use vpr_sue::synthgen::{
    generate_world, oracle_pr, oracle_weighted_moments, ConfidenceChannel, QuerySpatialMode, WorldConfig,
};
use vpr_sue::uncertainty::sue_score;
use vpr_sue::{build_index, Execution, SueConfig, Weighting};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

/// `k` neighbours whose poses lie within `spread` meters of a random centre
/// up to `offset` meters from the origin.
fn matches(rng: &mut ChaCha8Rng, k: usize, dim: usize, offset: f64, spread: f64) -> RankedMatches {
    let centre: Vec<f64> = (0..dim)
        .map(|_| {
            if offset > 0.0 {
                rng.random_range(-offset..offset)
            } else {
                0.0
            }
        })
        .collect();
    let mut distances: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.5)).collect();
    distances.sort_by(f64::total_cmp);
    RankedMatches {
        query_id: "q".into(),
        neighbors: distances
            .into_iter()
            .enumerate()
            .map(|(i, distance)| Neighbor {
                reference_id: format!("r{i}"),
                distance,
                pose: Pose::new(
                    format!("r{i}"),
                    centre.iter().map(|c| c + rng.random_range(-spread..spread)).collect(),
                ),
            })
            .collect(),
    }
}

fn with_poses(m: &RankedMatches, f: impl Fn(&[f64]) -> Vec<f64>) -> RankedMatches {
    let mut out = m.clone();
    for n in &mut out.neighbors {
        n.pose.coords = f(&n.pose.coords);
    }
    out
}

fn trace(m: &RankedMatches, cfg: &SueConfig) -> f64 {
    sue_score(m, cfg).expect("non-empty matches").trace
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

const SPREAD_M: f64 = 10.0;

fn moments_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(1..=10);
        let dim = rng.random_range(2..=3);
        let alpha = [0.0, 1.0, 50.0, 350.0, 1000.0][rng.random_range(0..5)];
        let cfg = SueConfig {
            alpha,
            k,
            weighting: Weighting::Exponential,
        };
        let offset = if rng.random_bool(0.5) { 0.0 } else { 1000.0 };
        let m = matches(&mut rng, k, dim, offset, SPREAD_M);
        let got = sue_score(&m, &cfg).expect("non-empty matches");

        let d_min = m.neighbors.iter().map(|n| n.distance).fold(f64::INFINITY, f64::min);
        let raw: Vec<f64> = m
            .neighbors
            .iter()
            .map(|n| (-alpha * (n.distance - d_min)).exp())
            .collect();
        let points: Vec<Vec<f64>> = m.neighbors.iter().map(|n| n.pose.coords.clone()).collect();
        let (mean, cov) = oracle_weighted_moments(&points, &raw).expect("positive weights");
        let oracle_trace: f64 = (0..dim).map(|a| cov[a][a]).sum();

        for (a, row) in cov.iter().enumerate() {
            worst = worst.max((got.mean[a] - mean[a]).abs());
            for (b, v) in row.iter().enumerate() {
                worst = worst.max((got.covariance[(a, b)] - v).abs());
            }
        }
        worst = worst.max((got.trace - oracle_trace).abs());
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst <= 1e-12 && within(Duration::from_secs(5), elapsed),
        format!("max abs error {worst:.3e}, {elapsed:.2?}"),
    )
}

fn retrieval_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    let mut queries_checked = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=500);
        let dim = rng.random_range(1..=128);
        let integer_grid = rng.random_bool(0.3);
        let value = |rng: &mut ChaCha8Rng| {
            if integer_grid {
                rng.random_range(-2..=2) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        };
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let descriptors: Vec<Descriptor> = ids
            .iter()
            .map(|i| Descriptor::new(format!("r{i:04}"), (0..dim).map(|_| value(&mut rng)).collect()))
            .collect();
        let poses: Vec<Pose> = ids
            .iter()
            .map(|i| Pose::new(format!("r{i:04}"), vec![*i as f64, 0.0]))
            .collect();
        let map = validate_map(
            DescriptorSet::new(descriptors.clone()).unwrap(),
            PoseSet::new(poses).unwrap(),
        )
        .unwrap();
        let index = build_index(&map);

        for qi in 0..3 {
            let query = Descriptor::new(format!("q{qi}"), (0..dim).map(|_| value(&mut rng)).collect());
            let k = rng.random_range(1..=n.min(50));
            let got = index.query_knn(&query, k).expect("valid query");

            let mut all: Vec<(f64, &str)> = descriptors
                .iter()
                .map(|d| {
                    let sq: f64 = d.values.iter().zip(&query.values).map(|(a, b)| (a - b) * (a - b)).sum();
                    (sq.sqrt(), d.id.as_str())
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
            let expected: Vec<(f64, &str)> = all.into_iter().take(k).collect();
            let actual: Vec<(f64, &str)> = got
                .neighbors
                .iter()
                .map(|n| (n.distance, n.reference_id.as_str()))
                .collect();
            if expected != actual {
                mismatches += 1;
            }
            queries_checked += 1;
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        mismatches == 0 && within(Duration::from_secs(30), elapsed),
        format!("{mismatches}/{queries_checked} mismatching queries, {elapsed:.2?}"),
    )
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    let levels = rng.random_range(1..=n.max(2));
    let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / 7.0 - 3.0).collect();
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    labels[rng.random_range(0..n)] = true;
    (scores, labels)
}

fn pr_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut mismatches = 0;
    let mut imperfect = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=200);
        let (scores, labels) = random_scores(&mut rng, n);
        let got = pr_curve(&scores, &labels).unwrap();
        let oracle = oracle_pr(&scores, &labels).unwrap();
        if got != oracle || auc_pr(&got) != oracle.auc {
            mismatches += 1;
        }

        let positives = rng.random_range(1..=n);
        let separated: Vec<f64> = (0..n)
            .map(|i| {
                if i < positives {
                    rng.random_range(0.0..1.0)
                } else {
                    rng.random_range(2.0..3.0)
                }
            })
            .collect();
        let truth: Vec<bool> = (0..n).map(|i| i < positives).collect();
        if auc_pr(&pr_curve(&separated, &truth).unwrap()) != 1.0 {
            imperfect += 1;
        }
    }
    Outcome::new(
        mismatches == 0 && imperfect == 0,
        format!("{mismatches}/500 curve mismatches, {imperfect}/500 perfect separators below 1.0"),
    )
}

fn invariance_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cfg = SueConfig::default();
    let (mut rigid, mut scale, mut shift, mut limit) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut auc_failures = 0;
    for _ in 0..100 {
        let dim = rng.random_range(2..=3);
        let m = matches(&mut rng, 10, dim, 0.0, 100.0);
        let base = trace(&m, &cfg);

        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let t: Vec<f64> = (0..dim).map(|_| rng.random_range(-1e3..1e3)).collect();
        let (s, c) = theta.sin_cos();
        let moved = with_poses(&m, |p| {
            let mut q = p.to_vec();
            q[0] = c * p[0] - s * p[1] + t[0];
            q[1] = s * p[0] + c * p[1] + t[1];
            if dim == 3 {
                q[2] = p[2] + t[2];
            }
            q
        });
        rigid = rigid.max(rel_err(base, trace(&moved, &cfg)));

        let factor: f64 = rng.random_range(0.1..10.0);
        let scaled = with_poses(&m, |p| p.iter().map(|x| x * factor).collect());
        scale = scale.max(rel_err(base * factor * factor, trace(&scaled, &cfg)));

        let delta: f64 = rng.random_range(0.0..5.0);
        let mut shifted = m.clone();
        for n in &mut shifted.neighbors {
            n.distance += delta;
        }
        shift = shift.max(rel_err(base, trace(&shifted, &cfg)));

        let near_zero = SueConfig { alpha: 1e-12, ..cfg };
        limit = limit.max(rel_err(trace(&m, &SueConfig::uniform(10)), trace(&m, &near_zero)));

        let n = rng.random_range(1..=200);
        let (scores, labels) = random_scores(&mut rng, n);
        let before = auc_pr(&pr_curve(&scores, &labels).unwrap());
        for f in [|x: f64| x.exp(), |x: f64| x * x * x + x, |x: f64| 4.0 * x] {
            let mapped: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            if auc_pr(&pr_curve(&mapped, &labels).unwrap()) != before {
                auc_failures += 1;
            }
        }
    }
    let pass = rigid <= 1e-9 && scale <= 1e-9 && shift <= 1e-9 && limit <= 1e-6 && auc_failures == 0;
    Outcome::new(
        pass,
        format!(
            "rigid {rigid:.2e}, scale {scale:.2e}, shift {shift:.2e}, alpha limit {limit:.2e}, monotone AUC failures {auc_failures}"
        ),
    )
}

/// 30 places: six aliased triples and twelve singletons, with 4 to 20
/// references per place.
fn aliased_world(seed: u64) -> WorldConfig {
    let mut groups: Vec<Vec<usize>> = (0..6).map(|g| (g * 3..g * 3 + 3).collect()).collect();
    groups.extend((18..30).map(|p| vec![p]));
    WorldConfig {
        refs_per_place: (0..30).map(|p| [4, 6, 8, 12, 20][p % 5]).collect(),
        aliasing_groups: groups,
        ..WorldConfig::simple(seed, 30, 1, 2000)
    }
}

/// 28 places: eight aliased pairs with 50 and 1 references and twelve
/// singletons with 20. Aliased places differ by a small descriptor offset.
fn skewed_world(seed: u64, mode: QuerySpatialMode) -> WorldConfig {
    let mut groups: Vec<Vec<usize>> = (0..8).map(|g| vec![2 * g, 2 * g + 1]).collect();
    groups.extend((16..28).map(|p| vec![p]));
    WorldConfig {
        refs_per_place: (0..28)
            .map(|p| {
                if p >= 16 {
                    20
                } else if p % 2 == 0 {
                    50
                } else {
                    1
                }
            })
            .collect(),
        aliasing_groups: groups,
        place_offset_sigma: 0.0075,
        query_spatial_mode: mode,
        ..WorldConfig::simple(seed, 28, 1, 2000)
    }
}

fn aucs(cfg: &WorldConfig, methods: &[MethodSpec]) -> Vec<f64> {
    let world = generate_world(cfg).expect("valid world");
    let run = score_dataset(&Dataset::from_world(&world), methods, 25.0, Execution::Parallel).expect("scored run");
    methods
        .iter()
        .map(|m| run.auc(&m.label()).expect("method scored"))
        .collect()
}

fn exponential_vs_uniform() -> Outcome {
    let start = Instant::now();
    let methods = [
        MethodSpec::sue(SueConfig::default()),
        MethodSpec::sue(SueConfig {
            weighting: Weighting::Uniform,
            ..SueConfig::default()
        })
        .named("sue_uniform"),
    ];
    let a = aucs(&aliased_world(1), &methods);
    let elapsed = start.elapsed();
    Outcome::new(
        a[0] > a[1] && within(Duration::from_secs(60), elapsed),
        format!("exponential {:.4} vs uniform {:.4}, {elapsed:.2?}", a[0], a[1]),
    )
}

fn baseline_ordering() -> Outcome {
    let methods = [
        MethodSpec::sue(SueConfig::default()),
        MethodSpec::L2 { name: None },
        MethodSpec::Pa { name: None },
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in [1, 2, 3] {
        let a = aucs(&aliased_world(seed), &methods);
        pass &= a[0] > a[1] && a[0] > a[2];
        detail.push(format!("seed {seed}: sue {:.4} l2 {:.4} pa {:.4}", a[0], a[1], a[2]));
    }
    Outcome::new(pass, detail.join("; "))
}

fn density_compensation() -> Outcome {
    let methods = [
        MethodSpec::sue(SueConfig::default()),
        MethodSpec::SueDc {
            name: None,
            config: SueConfig::default(),
            density_k: 1,
        },
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in [1, 2, 3] {
        let skew = aucs(&skewed_world(seed, QuerySpatialMode::Uniform), &methods);
        let matched = aucs(&skewed_world(seed, QuerySpatialMode::MatchReferenceDensity), &methods);
        pass &= skew[1] > skew[0] && matched[0] >= matched[1];
        detail.push(format!(
            "seed {seed}: uniform queries dc {} > sue {}, matched sue {} >= dc {}",
            skew[1], skew[0], matched[0], matched[1]
        ));
    }
    Outcome::new(pass, detail.join("; "))
}

fn gv_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        world: aliased_world(seed),
        gv_channel: Some(GvChannelSpec {
            channel: ConfidenceChannel {
                mean_correct: 120.0,
                mean_incorrect: 40.0,
                sigma: 35.0,
                seed: seed + 100,
            },
            threshold_m: 25.0,
        }),
    }
}

fn synth_manifest(spec: &SynthSpec, dir: &Path) -> RunManifest {
    synthesize(spec, dir).expect("world written");
    RunManifest::load(dir.join(RUN_MANIFEST_FILE)).expect("manifest loads")
}

fn correlation(x: &[f64], y: &[bool]) -> f64 {
    let n = x.len() as f64;
    let y: Vec<f64> = y.iter().map(|&b| b as u8 as f64).collect();
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn fusion() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let train = synth_manifest(&gv_spec(11), &tmp.path().join("train"));
    let test = synth_manifest(&gv_spec(12), &tmp.path().join("test"));
    let a = pipeline::fuse(&train, &test, Execution::Parallel).expect("fusion runs");
    let b = pipeline::fuse(&train, &test, Execution::Sequential).expect("fusion runs");

    let confidence: Vec<f64> = a.test_features.iter().map(|x| x[1]).collect();
    let corr = correlation(&confidence, &a.test_correct);
    let acc = |name: &str| {
        a.accuracy
            .iter()
            .find(|r| r.combination == name)
            .expect("row present")
            .accuracy
    };
    let (sue, gv, fused) = (acc("sue"), acc("gv"), acc("sue+gv"));
    let deterministic = a.accuracy == b.accuracy && a.model.to_json() == b.model.to_json();
    Outcome::new(
        corr >= 0.5 && fused >= sue.max(gv) - 0.01 && deterministic,
        format!("corr {corr:.3}, sue {sue:.4}, gv {gv:.4}, fused {fused:.4}, deterministic {deterministic}"),
    )
}

fn sweep_plateau() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let manifest = synth_manifest(&gv_spec(21), tmp.path());
    let grid = SweepGrid::default();
    let report = pipeline::sweep(&manifest, &grid, Execution::Parallel).expect("sweep runs");
    let complete = report.rows.len() == grid.k_values.len() + grid.alpha_values.len();
    match report.plateau {
        Some(p) => Outcome::new(
            complete && p.pass,
            format!(
                "K=10 {:.4} vs K=1 {:.4}, {} grid rows",
                p.auc_k10,
                p.auc_k1,
                report.rows.len()
            ),
        ),
        None => Outcome::new(false, "plateau check missing"),
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != TIMING_FILE)
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn end_to_end_determinism() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let spec = gv_spec(31);
    let mut manifest = synth_manifest(&spec, &root.join("data"));
    synthesize(&spec, &root.join("data_again")).unwrap();
    manifest.methods.extend([
        MethodSpec::Random { name: None, seed: 5 },
        MethodSpec::sue(SueConfig::uniform(10)).named("sue_uniform"),
        MethodSpec::SueDc {
            name: None,
            config: SueConfig::default(),
            density_k: 1,
        },
    ]);

    let mut outputs = Vec::new();
    for (i, exec) in [Execution::Parallel, Execution::Parallel, Execution::Sequential]
        .into_iter()
        .enumerate()
    {
        let out = root.join(format!("run{i}"));
        let report = pipeline::evaluate(&manifest, exec).expect("evaluate runs");
        pipeline::write_report(&report, &out).unwrap();
        let fused = pipeline::fuse(&manifest, &manifest, exec).expect("fuse runs");
        pipeline::write_fuse_report(&fused, &out.join("fuse")).unwrap();
        let sweep = pipeline::sweep(&manifest, &SweepGrid::default(), exec).expect("sweep runs");
        pipeline::write_sweep_report(&sweep, &out.join("sweep")).unwrap();
        outputs.push([
            dir_bytes(&out),
            dir_bytes(&out.join("fuse")),
            dir_bytes(&out.join("sweep")),
        ]);
    }
    let data_same = dir_bytes(&root.join("data")) == dir_bytes(&root.join("data_again"));
    let runs_same = outputs.windows(2).all(|w| w[0] == w[1]);
    let files: usize = outputs[0].iter().map(Vec::len).sum();
    Outcome::new(
        data_same && runs_same,
        format!("synth identical {data_same}, 3 runs identical {runs_same} over {files} files"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence, moments", moments_oracle),
        ("oracle equivalence, retrieval", retrieval_oracle),
        ("oracle equivalence, PR", pr_oracle),
        ("invariance suite", invariance_suite),
        ("exponential vs uniform weighting", exponential_vs_uniform),
        ("baseline ordering", baseline_ordering),
        ("density compensation", density_compensation),
        ("fusion", fusion),
        ("sweep plateau", sweep_plateau),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = check();
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{status} {name}: {}", outcome.detail);
        failed += usize::from(!outcome.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
