//! Release gate: end-to-end checks of the distillation framework, from
//! gradient correctness through the multi-seed synthetic benchmark. Each
//! test prints one PASS line on success.

use std::sync::LazyLock;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use graphkd::bench::{results_csv, run_benchmark, BenchReport};
use graphkd::checks::run_checks;
use graphkd::config::{Ablation, DatasetConfig, DatasetSource, ModelConfig, RunConfig};
use graphkd::data::{prepare, PreparedData};
use graphkd::distill::{
    at_loss, fitnet_loss, gcrd_similarity, gsp_loss, kd_loss, lsp_loss, DistillSpec, GspMetric,
    HeadKind, ProjectionHead,
};
use graphkd::gnn::{Arch, GraphStructure, ModelSpec, Task};
use graphkd::graph::{SplitMode, SplitSpec};
use graphkd::kernels::Kernel;
use graphkd::rng::{stream_rng, substream_rng, Stream};
use graphkd::simrep::{cka, mantel_global, mantel_local, EmbeddingSet};
use graphkd::tape::{Mat, Tape};
use graphkd::train::{distill, train_supervised, OptimSpec, TrainParams};

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

fn four_kernels() -> [Kernel; 4] {
    [
        Kernel::Linear,
        Kernel::Polynomial { c: 1.0, deg: 2 },
        Kernel::Rbf { sigma: 1.0 },
        Kernel::Cosine,
    ]
}

// ---- shared desk-scale benchmark (criteria 4, 6, 8) ----

fn bench_config() -> RunConfig {
    RunConfig {
        dataset: DatasetConfig {
            source: DatasetSource::Sbm {
                blocks: 5,
                nodes_per_block: 120,
                p_in: 0.06,
                p_out: 0.005,
                d_in: 16,
                noise: 1.0,
                seed: 42,
            },
            split: SplitSpec {
                train: 0.6,
                valid: 0.2,
                test: 0.2,
                seed: 42,
                mode: SplitMode::Random,
            },
        },
        teacher: ModelConfig {
            spec: ModelSpec {
                arch: Arch::Gcn,
                num_layers: 3,
                hidden: 256,
                classes: 5,
                task: Task::Node,
                pool: None,
                dropout: 0.0,
                seed: 0,
            },
            checkpoint: None,
        },
        student: ModelConfig {
            spec: ModelSpec {
                arch: Arch::Gcn,
                num_layers: 2,
                hidden: 16,
                classes: 5,
                task: Task::Node,
                pool: None,
                dropout: 0.0,
                seed: 0,
            },
            checkpoint: None,
        },
        distill: DistillSpec::default(),
        optim: OptimSpec {
            lr: 1e-2,
            ..Default::default()
        },
        teacher_optim: Some(OptimSpec {
            lr: 1e-3,
            ..Default::default()
        }),
        train: TrainParams {
            epochs: 300,
            patience: 50,
            batch_size: 32,
        },
        seeds: (0..10).collect(),
        methods: ["supervised", "kd", "fitnet", "at", "lsp", "gsp", "gcrd", "kd+gcrd"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        ablation: Ablation::None,
    }
}

fn bench_data(cfg: &RunConfig) -> PreparedData {
    let graphs = graphkd::config::load_dataset(&cfg.dataset, None).unwrap();
    prepare(graphs, &cfg.dataset.split).unwrap()
}

static BENCH: LazyLock<(BenchReport, String)> = LazyLock::new(|| {
    let cfg = bench_config();
    let data = bench_data(&cfg);
    let start = Instant::now();
    let report = run_benchmark(&cfg, &data).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    eprintln!("benchmark wall time: {elapsed:.1}s");
    assert!(elapsed < 1800.0, "benchmark exceeded 30 minutes: {elapsed:.0}s");
    let csv = results_csv(&report.cells);
    (report, csv)
});

fn test_mean(report: &BenchReport, method: &str) -> f64 {
    let vals: Vec<f64> = report
        .cells
        .iter()
        .filter(|c| c.method == method && c.split == "test")
        .map(|c| c.value)
        .collect();
    assert!(!vals.is_empty(), "no test cells for {method}");
    vals.iter().sum::<f64>() / vals.len() as f64
}

// ---- criterion 1: gradient suite ----

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let results = run_checks(None, 0).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let count = |prefix: &str| results.iter().filter(|r| r.name.starts_with(prefix)).count();
    assert!(count("kd") >= 1);
    assert!(count("fitnet") >= 3);
    assert!(count("at") >= 1);
    assert!(count("lsp") >= 4, "lsp over at least 4 kernels");
    assert!(count("gsp") >= 8, "gsp over at least 4 kernels x 2 metrics");
    assert!(count("crd") >= 3);
    assert_eq!(count("gcrd"), 9, "gcrd over 3 heads x 3 contrast levels");
    assert_eq!(count("layer/"), 4, "gcn, gin, sage, mlp layers");

    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
        .unwrap();
    for r in &results {
        assert!(r.pass(), "{} max rel err {}", r.name, r.max_rel_err);
    }
    assert!(elapsed < 120.0, "gradient suite took {elapsed:.1}s");
    println!(
        "PASS criterion 1: {} gradient checks x 10 instances, worst {} at {:.2e}, {:.1}s",
        results.len(),
        worst.name,
        worst.max_rel_err,
        elapsed
    );
}

// ---- criterion 2: zero at alignment ----

#[test]
fn criterion_2_zero_at_alignment() {
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let mut rng = substream_rng(7, Stream::GradCheck, i);
        let n = rng.gen_range(4..12);
        let d = rng.gen_range(2..6);
        let f = rand_mat(&mut rng, n, d);
        let z = rand_mat(&mut rng, n, 3);
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (0..n).filter(move |&v| v != u).map(move |v| (u, v)))
            .collect();
        let gs = GraphStructure::from_edges(n, &edges, &vec![0; n], 1);

        let tape = Tape::new();
        let fv = tape.constant(f.clone());
        let zv = tape.constant(z.clone());

        let shared = ProjectionHead::init(HeadKind::Mlp, d, d, &mut rng);
        let bound = shared.bind(&tape, false);
        let losses = [
            tape.scalar(lsp_loss(&tape, fv, fv, &edges, Kernel::Rbf { sigma: 1.0 }, false)),
            tape.scalar(
                gsp_loss(&tape, fv, fv, Kernel::Rbf { sigma: 1.0 }, GspMetric::Mse, 512, &mut rng).unwrap(),
            ),
            tape.scalar(fitnet_loss(&tape, fv, fv, &bound, &bound, &gs, true)),
            tape.scalar(at_loss(&tape, fv, fv)),
            tape.scalar(kd_loss(&tape, zv, &z, 4.0).unwrap()),
        ];
        for (k, l) in losses.iter().enumerate() {
            assert!(l.abs() <= 1e-12, "instance {i} loss {k} at alignment: {l}");
            worst = worst.max(l.abs());
        }
    }
    println!("PASS criterion 2: lsp/gsp/fitnet/at/kd all 0 at alignment over 100 instances (worst {worst:.1e})");
}

// ---- criterion 3: oracle equivalence ----

fn naive_gsp_mse(f_s: &Mat, f_t: &Mat, kernel: Kernel) -> f64 {
    let n = f_s.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let ks = kernel.apply(f_s.row(i).as_slice().unwrap(), f_s.row(j).as_slice().unwrap());
            let kt = kernel.apply(f_t.row(i).as_slice().unwrap(), f_t.row(j).as_slice().unwrap());
            sum += (ks - kt) * (ks - kt);
        }
    }
    sum / (n * n) as f64
}

fn naive_lsp(f_s: &Mat, f_t: &Mat, edges: &[(usize, usize)], kernel: Kernel) -> f64 {
    let n = f_s.nrows();
    let softmax = |vals: &[f64]| {
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect::<Vec<f64>>()
    };
    let mut total = 0.0;
    let mut active = 0usize;
    for u in 0..n {
        let nbrs: Vec<usize> = edges.iter().filter(|&&(s, _)| s == u).map(|&(_, d)| d).collect();
        if nbrs.len() < 2 {
            continue;
        }
        active += 1;
        let ks: Vec<f64> = nbrs
            .iter()
            .map(|&v| kernel.apply(f_s.row(u).as_slice().unwrap(), f_s.row(v).as_slice().unwrap()))
            .collect();
        let kt: Vec<f64> = nbrs
            .iter()
            .map(|&v| kernel.apply(f_t.row(u).as_slice().unwrap(), f_t.row(v).as_slice().unwrap()))
            .collect();
        let ps = softmax(&ks);
        let pt = softmax(&kt);
        total += ps
            .iter()
            .zip(&pt)
            .map(|(a, b)| a * (a.ln() - b.ln()))
            .sum::<f64>();
    }
    total / active as f64
}

#[test]
fn criterion_3_oracle_equivalence() {
    let mut worst: f64 = 0.0;
    for &n in &[3usize, 17, 50] {
        for kernel in four_kernels() {
            let mut rng = substream_rng(11, Stream::GradCheck, n as u64);
            let f_s = rand_mat(&mut rng, n, 6);
            let f_t = rand_mat(&mut rng, n, 6);
            let tape = Tape::new();
            let got = tape.scalar(
                gsp_loss(
                    &tape,
                    tape.constant(f_s.clone()),
                    tape.constant(f_t.clone()),
                    kernel,
                    GspMetric::Mse,
                    512,
                    &mut rng,
                )
                .unwrap(),
            );
            let want = naive_gsp_mse(&f_s, &f_t, kernel);
            let diff = (got - want).abs();
            assert!(diff <= 1e-10, "gsp n={n} {kernel:?}: {got} vs {want}");
            worst = worst.max(diff);
        }
    }

    let n = 30;
    let mut rng = stream_rng(13, Stream::GradCheck);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v && rng.gen::<f64>() < 0.15 {
                edges.push((u, v));
            }
        }
    }
    for kernel in four_kernels() {
        let f_s = rand_mat(&mut rng, n, 5);
        let f_t = rand_mat(&mut rng, n, 5);
        let tape = Tape::new();
        let got = tape.scalar(lsp_loss(
            &tape,
            tape.constant(f_s.clone()),
            tape.constant(f_t.clone()),
            &edges,
            kernel,
            false,
        ));
        let want = naive_lsp(&f_s, &f_t, &edges, kernel);
        let diff = (got - want).abs();
        assert!(diff <= 1e-10, "lsp {kernel:?}: {got} vs {want}");
        worst = worst.max(diff);
    }
    println!("PASS criterion 3: gsp (n in 3/17/50) and lsp (n=30) match naive oracles (worst diff {worst:.1e})");
}

// ---- criterion 4: G-CRD retrieval ----

#[test]
fn criterion_4_gcrd_retrieval() {
    // aligned features with identity heads: exact diagonal argmax
    for i in 0..100 {
        let mut rng = substream_rng(17, Stream::GradCheck, i);
        let n = rng.gen_range(4..16);
        let d = rng.gen_range(2..6);
        let f = rand_mat(&mut rng, n, d);
        let head = ProjectionHead::init(HeadKind::Identity, d, d, &mut rng);
        let gs = GraphStructure::from_edges(n, &[], &vec![0; n], 1);
        let tape = Tape::new();
        let fv = tape.constant(f);
        let bound = head.bind(&tape, false);
        let sims = tape.value(gcrd_similarity(&tape, fv, fv, &bound, &bound, &gs, false));
        for r in 0..n {
            let argmax = sims
                .row(r)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, r, "instance {i} row {r}");
        }
    }

    // trained heads after distillation on the SBM benchmark dataset
    let cfg = bench_config();
    let data = bench_data(&cfg);
    let (teacher, _) = train_supervised(cfg.teacher.spec.clone(), &data, cfg.teacher_optim(), &cfg.train, 0).unwrap();
    // full weight on the contrastive term so the alignment, not the task
    // metric, drives this run
    let dspec = DistillSpec {
        method: "gcrd".parse().unwrap(),
        beta: 1.0,
        ..Default::default()
    };
    let tp = TrainParams {
        epochs: 300,
        patience: 299,
        batch_size: 32,
    };
    let out = distill(&teacher, cfg.student.spec.clone(), &dspec, &data, &cfg.optim, &tp, 0).unwrap();
    let (head_s, head_t) = (out.head_s.unwrap(), out.head_t.unwrap());

    let PreparedData::Node { batch, structure, split } = &data else {
        panic!("benchmark data is node level")
    };
    let (f_t, _) = graphkd::train::teacher_forward(&teacher, batch, structure);
    let (f_s, _) = graphkd::train::teacher_forward(&out.model, batch, structure);
    let idx = &split.valid;
    let n = idx.len();

    let take = |f: &Mat| {
        let mut sub = Mat::zeros((n, f.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            sub.row_mut(k).assign(&f.row(i));
        }
        sub
    };
    let tape = Tape::new();
    let sub_gs = GraphStructure::from_edges(n, &[], &vec![0; n], 1);
    let sims = tape.value(gcrd_similarity(
        &tape,
        tape.constant(take(&f_s)),
        tape.constant(take(&f_t)),
        &head_s.bind(&tape, false),
        &head_t.bind(&tape, false),
        &sub_gs,
        false,
    ));
    let hits = (0..n)
        .filter(|&r| {
            sims.row(r)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
                == r
        })
        .count();
    let acc = hits as f64 / n as f64;
    let chance = 1.0 / n as f64;
    assert!(
        acc >= 10.0 * chance,
        "retrieval accuracy {acc:.3} below 10x chance ({:.3})",
        10.0 * chance
    );
    println!(
        "PASS criterion 4: diagonal argmax on 100 aligned instances; trained retrieval {acc:.3} vs chance {chance:.4} ({}x)",
        (acc / chance).round()
    );
}

// ---- criterion 5: similarity identities ----

/// Orthonormal basis of a random matrix via Gram-Schmidt.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Mat {
    let mut q = rand_mat(rng, d, d);
    for j in 0..d {
        for k in 0..j {
            let dot = (0..d).map(|i| q[[i, j]] * q[[i, k]]).sum::<f64>();
            for i in 0..d {
                q[[i, j]] -= dot * q[[i, k]];
            }
        }
        let norm = (0..d).map(|i| q[[i, j]] * q[[i, j]]).sum::<f64>().sqrt();
        for i in 0..d {
            q[[i, j]] /= norm;
        }
    }
    q
}

#[test]
fn criterion_5_similarity_identities() {
    let mut rng = stream_rng(23, Stream::GradCheck);
    let n = 40;
    let d = 8;
    let f = rand_mat(&mut rng, n, d);
    let ids: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let e = EmbeddingSet::new(f.clone(), ids.clone(), "a").unwrap();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v && rng.gen::<f64>() < 0.1 {
                edges.push((u, v));
            }
        }
    }
    assert!((cka(&e, &e).unwrap() - 1.0).abs() <= 1e-10);
    assert!((mantel_global(&e, &e).unwrap() - 1.0).abs() <= 1e-10);
    assert!((mantel_local(&e, &e, &edges).unwrap() - 1.0).abs() <= 1e-10);

    // cka is invariant to orthogonal transforms and positive isotropic scale
    let q = random_orthogonal(&mut rng, d);
    let g = rand_mat(&mut rng, n, d);
    let e_g = EmbeddingSet::new(g.clone(), ids.clone(), "b").unwrap();
    let transformed: Array2<f64> = g.dot(&q) * 2.5;
    let e_t = EmbeddingSet::new(transformed, ids, "c").unwrap();
    let base = cka(&e, &e_g).unwrap();
    let inv = cka(&e, &e_t).unwrap();
    assert!((base - inv).abs() <= 1e-10, "cka not invariant: {base} vs {inv}");
    println!("PASS criterion 5: cka/mantel self-similarity 1.0 and cka orthogonal+scale invariance within 1e-10");
}

// ---- criterion 6: desk-scale benchmark ----

#[test]
fn criterion_6_desk_scale_benchmark() {
    let (report, _) = &*BENCH;
    for e in &report.errors {
        panic!("benchmark sub-run failed: {e}");
    }
    let teacher = test_mean(report, "teacher");
    let supervised = test_mean(report, "supervised");
    let kd_gcrd = test_mean(report, "kd+gcrd");

    println!("{}", report.summary);
    assert!(
        teacher - supervised >= 0.02,
        "teacher-student gap {:.2} points below 2",
        (teacher - supervised) * 100.0
    );
    assert!(
        kd_gcrd >= supervised,
        "kd+gcrd {:.4} below supervised {:.4}",
        kd_gcrd,
        supervised
    );
    for m in ["supervised", "kd", "fitnet", "at", "lsp", "gsp", "gcrd", "kd+gcrd"] {
        assert!(report.summary.contains(m), "summary table missing {m}");
    }
    println!(
        "PASS criterion 6: teacher {:.1} vs supervised {:.1} (gap {:.1} pts), kd+gcrd {:.1}; full method table above",
        teacher * 100.0,
        supervised * 100.0,
        (teacher - supervised) * 100.0,
        kd_gcrd * 100.0
    );
}

// ---- criterion 7: ablation grids ----

#[test]
fn criterion_7_ablation_grids() {
    let mut cfg = bench_config();
    // structural check only: shrink the instance so both grids run quickly
    cfg.dataset.source = DatasetSource::Sbm {
        blocks: 2,
        nodes_per_block: 40,
        p_in: 0.15,
        p_out: 0.02,
        d_in: 8,
        noise: 0.5,
        seed: 3,
    };
    cfg.dataset.split.seed = 3;
    cfg.teacher.spec = ModelSpec {
        hidden: 32,
        num_layers: 2,
        classes: 2,
        ..cfg.teacher.spec
    };
    cfg.student.spec.classes = 2;
    cfg.train = TrainParams {
        epochs: 30,
        patience: 29,
        batch_size: 32,
    };
    cfg.seeds = vec![0];
    let data = bench_data(&cfg);

    cfg.ablation = Ablation::Contrast;
    let contrast = run_benchmark(&cfg, &data).unwrap();
    for label in ["gcrd/node/mlp", "gcrd/node-samplewise/identity", "gcrd/global/gcn", "crd/node/mlp"] {
        assert!(
            contrast.summary.contains(label) || contrast.errors.iter().any(|e| e.contains(label)),
            "contrast grid missing {label}"
        );
    }
    println!("{}", contrast.summary);

    cfg.ablation = Ablation::Kernel;
    let kernel = run_benchmark(&cfg, &data).unwrap();
    for label in ["gsp/linear/mse", "gsp/poly/kl", "gsp/rbf/mse", "gsp/cosine/kl"] {
        assert!(kernel.summary.contains(label), "kernel grid missing {label}");
    }
    println!("{}", kernel.summary);
    println!("PASS criterion 7: contrast-level x loss x head grid and kernel x metric grid both emit tables");
}

// ---- criterion 8: determinism ----

#[test]
fn criterion_8_determinism() {
    let (_, first_csv) = &*BENCH;
    let cfg = bench_config();
    let data = bench_data(&cfg);
    let second = run_benchmark(&cfg, &data).unwrap();
    let second_csv = results_csv(&second.cells);
    assert_eq!(*first_csv, second_csv, "benchmark CSV differs between identical runs");
    println!("PASS criterion 8: repeated benchmark runs produce bit-identical CSV ({} rows)", second.cells.len());
}
