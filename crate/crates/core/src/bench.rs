//! Multi-seed benchmark harness: per-seed teacher training and one distilled
//! student per method, aggregated into a CSV and a rendered summary table.

use crate::config::{Ablation, RunConfig};
use crate::data::PreparedData;
use crate::distill::{Aux, ContrastLevel, DistillSpec, HeadKind, Method};
use crate::error::Result;
use crate::gnn::{load_checkpoint, Model, Task};
use crate::kernels::Kernel;
use crate::train::{distill, evaluate, train_supervised, SplitSel};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCell {
    pub method: String,
    pub seed: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
    pub errors: Vec<String>,
    pub summary: String,
}

pub fn metric_name(data: &PreparedData) -> &'static str {
    match data.task() {
        Task::Node => "accuracy",
        Task::Graph => {
            if data.classes() == 2 {
                "rocauc"
            } else {
                "accuracy"
            }
        }
    }
}

pub fn results_csv(cells: &[BenchCell]) -> String {
    let mut out = String::from("method,seed,split,metric,value\n");
    for c in cells {
        out.push_str(&format!("{},{},{},{},{:.6}\n", c.method, c.seed, c.split, c.metric, c.value));
    }
    out
}

/// The list of (label, spec) students to train per seed, expanding the
/// configured ablation grid if any.
pub fn expand_methods(cfg: &RunConfig) -> Result<Vec<(String, DistillSpec)>> {
    let base = &cfg.distill;
    let mut out = Vec::new();
    match cfg.ablation {
        Ablation::None => {
            for m in &cfg.methods {
                let method: Method = m.parse()?;
                out.push((m.clone(), DistillSpec { method, ..base.clone() }));
            }
        }
        Ablation::Contrast => {
            let heads = [HeadKind::Identity, HeadKind::Mlp, HeadKind::Gcn];
            let levels = [ContrastLevel::Node, ContrastLevel::NodeSamplewise, ContrastLevel::Global];
            for level in levels {
                for head in heads {
                    let label = format!("gcrd/{}/{}", level_name(level), head_name(head));
                    out.push((
                        label,
                        DistillSpec {
                            method: Method { kd: false, aux: Some(Aux::Gcrd) },
                            head,
                            contrast_level: level,
                            ..base.clone()
                        },
                    ));
                }
            }
            // the sample-level baseline has no contrast-level axis
            for head in heads {
                let label = format!("crd/node/{}", head_name(head));
                out.push((
                    label,
                    DistillSpec {
                        method: Method { kd: false, aux: Some(Aux::Crd) },
                        head,
                        contrast_level: ContrastLevel::Node,
                        ..base.clone()
                    },
                ));
            }
        }
        Ablation::Kernel => {
            let kernels = [
                ("linear", Kernel::Linear),
                ("poly", Kernel::Polynomial { c: 1.0, deg: 2 }),
                ("rbf", Kernel::Rbf { sigma: 1.0 }),
                ("cosine", Kernel::Cosine),
            ];
            let metrics = [
                ("mse", crate::distill::GspMetric::Mse),
                ("kl", crate::distill::GspMetric::Kl),
            ];
            for (kname, kernel) in kernels {
                for (mname, metric) in metrics {
                    out.push((
                        format!("gsp/{kname}/{mname}"),
                        DistillSpec {
                            method: Method { kd: false, aux: Some(Aux::Gsp) },
                            kernel,
                            gsp_metric: metric,
                            ..base.clone()
                        },
                    ));
                }
            }
        }
    }
    Ok(out)
}

fn level_name(l: ContrastLevel) -> &'static str {
    match l {
        ContrastLevel::Node => "node",
        ContrastLevel::NodeSamplewise => "node-samplewise",
        ContrastLevel::Global => "global",
    }
}

fn head_name(h: HeadKind) -> &'static str {
    match h {
        HeadKind::Identity => "identity",
        HeadKind::Mlp => "mlp",
        HeadKind::Gcn => "gcn",
    }
}

fn seed_run(
    cfg: &RunConfig,
    data: &PreparedData,
    variants: &[(String, DistillSpec)],
    preloaded_teacher: Option<&Model>,
    seed: u64,
    metric: &str,
) -> (Vec<BenchCell>, Vec<String>) {
    let mut cells = Vec::new();
    let mut errors = Vec::new();
    let record = |cells: &mut Vec<BenchCell>, errors: &mut Vec<String>, method: &str, model: &Model| {
        for (split, sel) in [("valid", SplitSel::Valid), ("test", SplitSel::Test)] {
            match evaluate(model, data, sel) {
                Ok(v) => cells.push(BenchCell {
                    method: method.to_string(),
                    seed,
                    split: split.to_string(),
                    metric: metric.to_string(),
                    value: v,
                }),
                Err(e) => errors.push(format!("{method} seed {seed} {split}: {e}")),
            }
        }
    };
    let teacher = match preloaded_teacher {
        Some(t) => t.clone(),
        None => match train_supervised(cfg.teacher.spec.clone(), data, cfg.teacher_optim(), &cfg.train, seed) {
            Ok((t, _)) => t,
            Err(e) => {
                errors.push(format!("teacher seed {seed}: {e}"));
                return (cells, errors);
            }
        },
    };
    record(&mut cells, &mut errors, "teacher", &teacher);
    for (label, dspec) in variants {
        match distill(&teacher, cfg.student.spec.clone(), dspec, data, &cfg.optim, &cfg.train, seed) {
            Ok(out) => record(&mut cells, &mut errors, label, &out.model),
            Err(e) => errors.push(format!("{label} seed {seed}: {e}")),
        }
    }
    (cells, errors)
}

/// Run the full benchmark described by the config. Seeds fan out across
/// threads when the `parallel` feature is enabled; output order is by seed
/// regardless.
pub fn run_benchmark(cfg: &RunConfig, data: &PreparedData) -> Result<BenchReport> {
    cfg.validate()?;
    let variants = expand_methods(cfg)?;
    let metric = metric_name(data);
    let teacher = match &cfg.teacher.checkpoint {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };

    let per_seed: Vec<(Vec<BenchCell>, Vec<String>)> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            cfg.seeds
                .par_iter()
                .map(|&s| seed_run(cfg, data, &variants, teacher.as_ref(), s, metric))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            cfg.seeds
                .iter()
                .map(|&s| seed_run(cfg, data, &variants, teacher.as_ref(), s, metric))
                .collect()
        }
    };

    let mut report = BenchReport::default();
    for (cells, errors) in per_seed {
        report.cells.extend(cells);
        report.errors.extend(errors);
    }
    report.summary = summary_table(&report.cells, metric);
    Ok(report)
}

/// Mean +/- std of the test metric per method, in percentage points, with
/// up/down markers against the kd baseline.
pub fn summary_table(cells: &[BenchCell], metric: &str) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method.as_str()) {
            methods.push(&c.method);
        }
    }
    let stats = |m: &str| -> Option<(f64, f64)> {
        let vals: Vec<f64> = cells
            .iter()
            .filter(|c| c.method == m && c.split == "test")
            .map(|c| c.value * 100.0)
            .collect();
        if vals.is_empty() {
            return None;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some((mean, std))
    };
    let kd_mean = stats("kd").map(|(m, _)| m);
    let width = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:width$}  test {metric} (%)\n", "method");
    for m in methods {
        let Some((mean, std)) = stats(m) else { continue };
        let marker = match kd_mean {
            Some(kd) if m != "kd" && m != "teacher" => {
                if mean > kd {
                    " \u{2191}"
                } else if mean < kd {
                    " \u{2193}"
                } else {
                    ""
                }
            }
            _ => "",
        };
        out.push_str(&format!("{m:width$}  {mean:5.2} \u{b1} {std:.2}{marker}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::data::prepare;

    fn small_cfg(extra: &[&str]) -> (RunConfig, PreparedData) {
        let base = r#"
seeds = [0]
methods = ["supervised"]

[dataset]
kind = "sbm"
blocks = 2
nodes_per_block = 30
p_in = 0.25
p_out = 0.02
d_in = 4
noise = 0.3
seed = 11

[dataset.split]
train = 0.6
valid = 0.2
test = 0.2
seed = 11
mode = "random"

[teacher]
arch = "GCN"
num_layers = 2
hidden = 32
classes = 2
task = "node"

[student]
arch = "GCN"
num_layers = 2
hidden = 8
classes = 2
task = "node"

[optim]
kind = "adam"
lr = 0.01

[train]
epochs = 30
patience = 29
batch_size = 32
"#;
        let ovs: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
        let cfg = parse_config(base, &ovs).unwrap();
        let graphs = crate::config::load_dataset(&cfg.dataset, None).unwrap();
        let data = prepare(graphs, &cfg.dataset.split).unwrap();
        (cfg, data)
    }

    #[test]
    fn single_method_single_seed_table() {
        let (cfg, data) = small_cfg(&[]);
        let report = run_benchmark(&cfg, &data).unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        // teacher + supervised, valid + test each
        assert_eq!(report.cells.len(), 4);
        assert!(report.summary.contains("supervised"));
        assert!(report.summary.contains("teacher"));
    }

    #[test]
    fn csv_is_deterministic() {
        let (cfg, data) = small_cfg(&["seeds=[0, 1]", "methods=[\"supervised\", \"kd\"]"]);
        let a = results_csv(&run_benchmark(&cfg, &data).unwrap().cells);
        let b = results_csv(&run_benchmark(&cfg, &data).unwrap().cells);
        assert_eq!(a, b);
        assert!(a.starts_with("method,seed,split,metric,value\n"));
    }

    #[test]
    fn contrast_grid_has_twelve_cells() {
        let (cfg, _) = small_cfg(&["ablation=\"contrast\""]);
        let variants = expand_methods(&cfg).unwrap();
        assert_eq!(variants.len(), 12);
        assert!(variants.iter().any(|(l, _)| l == "gcrd/node-samplewise/gcn"));
        assert!(variants.iter().any(|(l, _)| l == "crd/node/identity"));
    }

    #[test]
    fn kernel_grid_has_eight_cells() {
        let (cfg, _) = small_cfg(&["ablation=\"kernel\""]);
        let variants = expand_methods(&cfg).unwrap();
        assert_eq!(variants.len(), 8);
        assert!(variants.iter().any(|(l, _)| l == "gsp/cosine/kl"));
    }

    #[test]
    fn per_cell_errors_are_not_fatal() {
        // identity head with mismatched widths fails per-cell, the rest of
        // the table still renders
        let (cfg, data) = small_cfg(&[
            "methods=[\"supervised\", \"gcrd\"]",
            "distill.head=\"identity\"",
        ]);
        let report = run_benchmark(&cfg, &data).unwrap();
        assert_eq!(report.errors.len(), 1);
        assert!(report.errors[0].contains("gcrd"));
        assert!(report.summary.contains("supervised"));
    }

    #[test]
    fn self_distillation_tracks_teacher() {
        // teacher spec == student spec, pure logit matching at tau 1:
        // the student should land within a couple of points of the teacher
        let (cfg, data) = small_cfg(&[
            "seeds=[0, 1, 2, 3, 4]",
            "methods=[\"kd\"]",
            "student.hidden=32",
            "distill.alpha=1.0",
            "distill.tau1=1.0",
            "train.epochs=120",
            "train.patience=119",
        ]);
        let report = run_benchmark(&cfg, &data).unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        let mean = |m: &str| {
            let v: Vec<f64> = report
                .cells
                .iter()
                .filter(|c| c.method == m && c.split == "test")
                .map(|c| c.value)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let gap = (mean("teacher") - mean("kd")).abs();
        assert!(gap <= 0.02, "self-distillation gap {gap}");
    }
}
