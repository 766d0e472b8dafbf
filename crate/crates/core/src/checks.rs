//! Registry of gradient checks: every distillation loss and every layer type
//! on small randomized instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::distill::{
    at_loss, combined_loss, crd_loss, fitnet_loss, gcrd_loss, gsp_loss, kd_loss, lsp_loss, Aux,
    ContrastLevel, DistillSpec, GspMetric, HeadKind, Method, ProjectionHead,
};
use crate::error::{Error, Result};
use crate::gnn::{gcn_layer, gin_layer, sage_layer, GraphStructure};
use crate::gradcheck::grad_check;
use crate::kernels::Kernel;
use crate::rng::{stream_rng, substream_rng, Stream};
use crate::tape::{Mat, Tape, Var};

pub const GRADCHECK_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < GRADCHECK_TOL
    }
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

const N: usize = 8;
const D_S: usize = 4;
const D_T: usize = 5;

fn test_structure() -> GraphStructure {
    let edges = [
        (0, 1),
        (1, 0),
        (1, 2),
        (2, 1),
        (2, 3),
        (3, 2),
        (0, 2),
        (2, 0),
        (4, 5),
        (5, 4),
        (5, 6),
        (6, 5),
        (6, 7),
        (7, 6),
        (4, 7),
        (7, 4),
        (3, 4),
        (4, 3),
    ];
    // two clusters of four, bridged, split over two graphs
    GraphStructure::from_edges(N, &edges, &[0, 0, 0, 0, 1, 1, 1, 1], 2)
}

fn kernels() -> Vec<(&'static str, Kernel)> {
    vec![
        ("euclidean", Kernel::Euclidean),
        ("linear", Kernel::Linear),
        ("poly", Kernel::Polynomial { c: 1.0, deg: 2 }),
        ("rbf", Kernel::Rbf { sigma: 1.0 }),
        ("cosine", Kernel::Cosine),
    ]
}

fn heads() -> Vec<(&'static str, HeadKind)> {
    vec![
        ("identity", HeadKind::Identity),
        ("mlp", HeadKind::Mlp),
        ("gcn", HeadKind::Gcn),
    ]
}

/// One named check: parameters plus a deterministic scalar function of them.
struct Check {
    name: String,
    params: Vec<Mat>,
    f: Box<dyn Fn(&Tape, &[Var]) -> Var>,
}

fn loss_checks(seed: u64, instance: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut item = instance * 10_000;
    let mut next_rng = || {
        item += 1;
        substream_rng(seed, Stream::GradCheck, item)
    };

    {
        let mut rng = next_rng();
        let z_t = rand_mat(&mut rng, N, 3);
        checks.push(Check {
            name: "kd".into(),
            params: vec![rand_mat(&mut rng, N, 3)],
            f: Box::new(move |tape, p| kd_loss(tape, p[0], &z_t, 4.0).unwrap()),
        });
    }

    for (hname, hkind) in heads() {
        let mut rng = next_rng();
        // identity heads need matching widths on both sides
        let dt = if hkind == HeadKind::Identity { D_S } else { D_T };
        let head_s = ProjectionHead::init(hkind, D_S, D_S, &mut rng);
        let head_t = ProjectionHead::init(hkind, dt, D_S, &mut rng);
        let mut params = vec![rand_mat(&mut rng, N, D_S), rand_mat(&mut rng, N, dt)];
        let ns = head_s.params.len();
        let nt = head_t.params.len();
        params.extend(head_s.params.iter().map(|(_, m)| m.clone()));
        params.extend(head_t.params.iter().map(|(_, m)| m.clone()));
        checks.push(Check {
            name: format!("fitnet/{hname}"),
            params,
            f: Box::new(move |tape, p| {
                let bs = head_s.bind_vars(&p[2..2 + ns]);
                let bt = head_t.bind_vars(&p[2 + ns..2 + ns + nt]);
                fitnet_loss(tape, p[0], p[1], &bs, &bt, &test_structure(), true)
            }),
        });
    }

    {
        let mut rng = next_rng();
        checks.push(Check {
            name: "at".into(),
            params: vec![rand_mat(&mut rng, N, D_S), rand_mat(&mut rng, N, D_T)],
            f: Box::new(|tape, p| at_loss(tape, p[0], p[1])),
        });
    }

    for (kname, kernel) in kernels() {
        let mut rng = next_rng();
        let gs = test_structure();
        let edges: Vec<(usize, usize)> = gs.srcs.iter().copied().zip(gs.dsts.iter().copied()).collect();
        checks.push(Check {
            name: format!("lsp/{kname}"),
            params: vec![rand_mat(&mut rng, N, D_S), rand_mat(&mut rng, N, D_T)],
            f: Box::new(move |tape, p| lsp_loss(tape, p[0], p[1], &edges, kernel, false)),
        });
    }

    for (kname, kernel) in kernels() {
        for (mname, metric) in [("mse", GspMetric::Mse), ("kl", GspMetric::Kl)] {
            let mut rng = next_rng();
            checks.push(Check {
                name: format!("gsp/{kname}/{mname}"),
                params: vec![rand_mat(&mut rng, N, D_S), rand_mat(&mut rng, N, D_T)],
                f: Box::new(move |tape, p| {
                    // cap above n: the subsample path is never hit, keeping
                    // the function deterministic across evaluations
                    let mut srng = stream_rng(0, Stream::Subsample);
                    gsp_loss(tape, p[0], p[1], kernel, metric, 512, &mut srng).unwrap()
                }),
            });
        }
    }

    for (hname, hkind) in heads() {
        for (lname, level) in [
            ("node", ContrastLevel::Node),
            ("node-samplewise", ContrastLevel::NodeSamplewise),
            ("global", ContrastLevel::Global),
        ] {
            let mut rng = next_rng();
            let dt = if hkind == HeadKind::Identity { D_S } else { D_T };
            let head_s = ProjectionHead::init(hkind, D_S, D_S, &mut rng);
            let head_t = ProjectionHead::init(hkind, dt, D_S, &mut rng);
            let mut params = vec![rand_mat(&mut rng, N, D_S), rand_mat(&mut rng, N, dt)];
            let ns = head_s.params.len();
            let nt = head_t.params.len();
            params.extend(head_s.params.iter().map(|(_, m)| m.clone()));
            params.extend(head_t.params.iter().map(|(_, m)| m.clone()));
            checks.push(Check {
                name: format!("gcrd/{lname}/{hname}"),
                params,
                f: Box::new(move |tape, p| {
                    let bs = head_s.bind_vars(&p[2..2 + ns]);
                    let bt = head_t.bind_vars(&p[2 + ns..2 + ns + nt]);
                    gcrd_loss(tape, p[0], p[1], &bs, &bt, 0.5, &test_structure(), level, true).unwrap()
                }),
            });
        }
    }

    for (hname, hkind) in heads() {
        let mut rng = next_rng();
        let dt = if hkind == HeadKind::Identity { D_S } else { D_T };
        let head_s = ProjectionHead::init(hkind, D_S, D_S, &mut rng);
        let head_t = ProjectionHead::init(hkind, dt, D_S, &mut rng);
        let mut params = vec![rand_mat(&mut rng, N, D_S), rand_mat(&mut rng, N, dt)];
        let ns = head_s.params.len();
        let nt = head_t.params.len();
        params.extend(head_s.params.iter().map(|(_, m)| m.clone()));
        params.extend(head_t.params.iter().map(|(_, m)| m.clone()));
        checks.push(Check {
            name: format!("crd/{hname}"),
            params,
            f: Box::new(move |tape, p| {
                let bs = head_s.bind_vars(&p[2..2 + ns]);
                let bt = head_t.bind_vars(&p[2 + ns..2 + ns + nt]);
                crd_loss(tape, p[0], p[1], &bs, &bt, 0.5, &test_structure(), true).unwrap()
            }),
        });
    }

    {
        // combined loss wiring: all three terms live
        let mut rng = next_rng();
        let z_t = rand_mat(&mut rng, N, 3);
        let f_t = rand_mat(&mut rng, N, D_S);
        checks.push(Check {
            name: "combined".into(),
            params: vec![rand_mat(&mut rng, N, 3), rand_mat(&mut rng, N, D_S)],
            f: Box::new(move |tape, p| {
                let spec = DistillSpec {
                    method: Method { kd: true, aux: Some(Aux::At) },
                    ..Default::default()
                };
                let sup = tape.reduce_mean(tape.elementwise_mul(p[0], p[0]));
                let kd = kd_loss(tape, p[0], &z_t, spec.tau1).unwrap();
                let aux = at_loss(tape, p[1], tape.constant(f_t.clone()));
                combined_loss(tape, &spec, sup, Some(kd), Some(aux))
            }),
        });
    }

    checks
}

fn layer_checks(seed: u64, instance: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    let gs = test_structure();
    let base = instance * 10_000;

    {
        let mut rng = substream_rng(seed, Stream::GradCheck, base + 1001);
        let gsc = gs.clone();
        checks.push(Check {
            name: "layer/gcn".into(),
            params: vec![
                rand_mat(&mut rng, N, D_S),
                rand_mat(&mut rng, D_S, 3),
                rand_mat(&mut rng, 1, 3),
            ],
            f: Box::new(move |tape, p| {
                let h = tape.relu(gcn_layer(tape, p[0], &gsc, p[1], Some(p[2])));
                tape.reduce_mean(tape.elementwise_mul(h, h))
            }),
        });
    }

    {
        let mut rng = substream_rng(seed, Stream::GradCheck, base + 1002);
        let gsc = gs.clone();
        checks.push(Check {
            name: "layer/gin".into(),
            params: vec![
                rand_mat(&mut rng, N, D_S),
                rand_mat(&mut rng, D_S, 6),
                rand_mat(&mut rng, 1, 6),
                rand_mat(&mut rng, 6, 3),
                rand_mat(&mut rng, 1, 3),
                rand_mat(&mut rng, 1, 1),
            ],
            f: Box::new(move |tape, p| {
                let h = tape.relu(gin_layer(tape, p[0], &gsc, p[1], p[2], p[3], p[4], p[5]));
                tape.reduce_mean(tape.elementwise_mul(h, h))
            }),
        });
    }

    {
        let mut rng = substream_rng(seed, Stream::GradCheck, base + 1003);
        let gsc = gs.clone();
        checks.push(Check {
            name: "layer/sage".into(),
            params: vec![
                rand_mat(&mut rng, N, D_S),
                rand_mat(&mut rng, 2 * D_S, 3),
                rand_mat(&mut rng, 1, 3),
            ],
            f: Box::new(move |tape, p| {
                let h = tape.relu(sage_layer(tape, p[0], &gsc, p[1], Some(p[2])));
                tape.reduce_mean(tape.elementwise_mul(h, h))
            }),
        });
    }

    {
        let mut rng = substream_rng(seed, Stream::GradCheck, base + 1004);
        checks.push(Check {
            name: "layer/mlp".into(),
            params: vec![
                rand_mat(&mut rng, N, D_S),
                rand_mat(&mut rng, D_S, 3),
                rand_mat(&mut rng, 1, 3),
            ],
            f: Box::new(move |tape, p| {
                let h = tape.relu(tape.add_row_bias(tape.matmul(p[0], p[1]), p[2]));
                tape.reduce_mean(tape.elementwise_mul(h, h))
            }),
        });
    }

    checks
}

/// Random instances checked per registered item.
pub const INSTANCES: u64 = 10;

/// Run all checks whose name starts with `filter` (all checks when `None`),
/// on [`INSTANCES`] random instances each, reporting the worst relative
/// error per item. Errors when the filter matches nothing.
pub fn run_checks(filter: Option<&str>, seed: u64) -> Result<Vec<CheckResult>> {
    let mut results: Vec<CheckResult> = Vec::new();
    for instance in 0..INSTANCES {
        let mut checks = loss_checks(seed, instance);
        checks.extend(layer_checks(seed, instance));
        let selected: Vec<Check> = checks
            .into_iter()
            .filter(|c| filter.map_or(true, |f| c.name.starts_with(f)))
            .collect();
        if selected.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no gradient check matches '{}'",
                filter.unwrap_or("")
            )));
        }
        for c in selected {
            let report = grad_check(|t, p| (c.f)(t, p), &c.params, EPS);
            let err = if report.non_finite { f64::INFINITY } else { report.max_rel_err };
            match results.iter_mut().find(|r| r.name == c.name) {
                Some(r) => r.max_rel_err = r.max_rel_err.max(err),
                None => results.push(CheckResult {
                    name: c.name,
                    max_rel_err: err,
                }),
            }
        }
    }
    Ok(results)
}
