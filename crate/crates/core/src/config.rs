//! Run configuration: a TOML file plus `key.path=value` overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distill::{DistillSpec, Method};
use crate::error::{Error, Result};
use crate::gnn::ModelSpec;
use crate::graph::{load_manifest, Graph, SplitSpec};
use crate::synth::{synth_molgraphs, synth_sbm};
use crate::train::{OptimSpec, TrainParams};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Sbm {
        blocks: usize,
        nodes_per_block: usize,
        p_in: f64,
        p_out: f64,
        d_in: usize,
        noise: f64,
        seed: u64,
    },
    Mol {
        count: usize,
        min_nodes: usize,
        max_nodes: usize,
        classes: usize,
        seed: u64,
    },
    Manifest { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DatasetSource,
    pub split: SplitSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub spec: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    /// Contrast level x loss form x projection head grid.
    Contrast,
    /// Kernel x metric grid for GSP.
    Kernel,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    #[serde(default)]
    pub distill: DistillSpec,
    #[serde(default)]
    pub optim: OptimSpec,
    /// Optimizer for teacher pre-training; falls back to `optim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_optim: Option<OptimSpec>,
    pub train: TrainParams,
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default)]
    pub ablation: Ablation,
}

fn default_methods() -> Vec<String> {
    vec!["supervised".into(), "kd".into()]
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.spec.validate()?;
        self.student.spec.validate()?;
        self.distill.validate()?;
        self.optim.validate()?;
        if let Some(t) = &self.teacher_optim {
            t.validate()?;
        }
        self.train.validate()?;
        self.dataset.split.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        for m in &self.methods {
            Method::from_str(m)?;
        }
        Ok(())
    }

    pub fn teacher_optim(&self) -> &OptimSpec {
        self.teacher_optim.as_ref().unwrap_or(&self.optim)
    }
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, overrides)
}

/// Apply one `dotted.key=value` override to a parsed TOML tree. The value is
/// parsed as TOML when possible and treated as a bare string otherwise.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not of the form key=value")))?;
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{path}' crosses a non-table value")))?;
        if i == parts.len() - 1 {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(toml::Table::new()));
    }
    unreachable!()
}

/// Materialize the configured dataset. Manifest paths are resolved relative
/// to `base` when given.
pub fn load_dataset(cfg: &DatasetConfig, base: Option<&Path>) -> Result<Vec<Graph>> {
    match &cfg.source {
        DatasetSource::Sbm {
            blocks,
            nodes_per_block,
            p_in,
            p_out,
            d_in,
            noise,
            seed,
        } => Ok(vec![synth_sbm(*blocks, *nodes_per_block, *p_in, *p_out, *d_in, *noise, *seed)?]),
        DatasetSource::Mol {
            count,
            min_nodes,
            max_nodes,
            classes,
            seed,
        } => synth_molgraphs(*count, *min_nodes, *max_nodes, *classes, *seed),
        DatasetSource::Manifest { path } => {
            let resolved = match base {
                Some(b) if path.is_relative() => b.join(path),
                _ => path.clone(),
            };
            load_manifest(&resolved)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::Arch;

    const SAMPLE: &str = r#"
seeds = [0, 1]
methods = ["supervised", "kd", "kd+gcrd"]

[dataset]
kind = "sbm"
blocks = 2
nodes_per_block = 40
p_in = 0.2
p_out = 0.01
d_in = 8
noise = 0.5
seed = 7

[dataset.split]
train = 0.6
valid = 0.2
test = 0.2
seed = 7
mode = "random"

[teacher]
arch = "GCN"
num_layers = 3
hidden = 64
classes = 2
task = "node"

[student]
arch = "GCN"
num_layers = 2
hidden = 8
classes = 2
task = "node"

[distill]
method = "kd+gcrd"
alpha = 0.9
beta = 0.1
tau1 = 4.0
tau2 = 0.075
kernel = { kind = "rbf", sigma = 1.0 }
gsp_metric = "mse"
gsp_cap = 512
head = "mlp"
contrast_level = "node"

[optim]
kind = "adam"
lr = 0.01

[train]
epochs = 50
patience = 10
batch_size = 32
"#;

    #[test]
    fn sample_config_parses() {
        let cfg = parse_config(SAMPLE, &[]).unwrap();
        assert_eq!(cfg.teacher.spec.arch, Arch::Gcn);
        assert_eq!(cfg.seeds, vec![0, 1]);
        assert_eq!(cfg.methods.len(), 3);
        assert_eq!(cfg.distill.method, "kd+gcrd".parse().unwrap());
        let graphs = load_dataset(&cfg.dataset, None).unwrap();
        assert_eq!(graphs.len(), 1);
        assert_eq!(graphs[0].n, 80);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let ovs = vec![
            "train.epochs=80".to_string(),
            "student.hidden=16".to_string(),
            "distill.method=gsp".to_string(),
            "distill.kernel={ kind = \"cosine\" }".to_string(),
        ];
        let cfg = parse_config(SAMPLE, &ovs).unwrap();
        assert_eq!(cfg.train.epochs, 80);
        assert_eq!(cfg.student.spec.hidden, 16);
        assert_eq!(cfg.distill.method, "gsp".parse().unwrap());
        assert_eq!(cfg.distill.kernel, crate::kernels::Kernel::Cosine);
    }

    #[test]
    fn invalid_patience_rejected() {
        let err = parse_config(SAMPLE, &["train.patience=50".to_string()]).unwrap_err();
        assert!(err.to_string().contains("patience"));
    }

    #[test]
    fn unknown_method_rejected() {
        assert!(parse_config(SAMPLE, &["methods=[\"nope\"]".to_string()]).is_err());
    }

    #[test]
    fn bad_override_syntax_rejected() {
        assert!(parse_config(SAMPLE, &["train.epochs".to_string()]).is_err());
    }
}
