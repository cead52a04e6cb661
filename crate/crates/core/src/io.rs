//! Run configuration, checkpoints and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::densities::{Gmm, UnnormalizedDensity};
use crate::error::{FlowError, Result};
use crate::flow::{LinearForm, VerletFlow};
use crate::importance::{EstimateConfig, WeightReport};
use crate::integrators::Method;
use crate::training::{TrainConfig, TrainReport};

pub const CHECKPOINT_MAGIC: &str = "verletflow-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_steps")]
    pub steps: usize,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub hutchinson_probes: usize,
    #[serde(default = "default_chunk")]
    pub chunk: usize,
}

fn default_eval_steps() -> usize {
    100
}
fn default_method() -> Method {
    Method::TaylorVerlet
}
fn default_samples() -> usize {
    100_000
}
fn one() -> usize {
    1
}
fn default_chunk() -> usize {
    1000
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: default_eval_steps(),
            method: default_method(),
            samples: default_samples(),
            seed: 0,
            hutchinson_probes: 1,
            chunk: default_chunk(),
        }
    }
}

impl EvalConfig {
    pub fn estimate(&self, workers: usize) -> EstimateConfig {
        EstimateConfig {
            steps: self.steps,
            method: self.method,
            hutchinson_probes: self.hutchinson_probes,
            seed: self.seed,
            chunk: self.chunk,
            workers,
        }
    }
}

/// Everything a run needs; read from and written to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub dq: usize,
    pub dp: usize,
    pub order: usize,
    #[serde(default)]
    pub k1_form: LinearForm,
    pub target: UnnormalizedDensity,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for Config {
    /// Order-1 flow on 2+2 dims targeting the trimodal mixture with
    /// `log Z = log 2`.
    fn default() -> Self {
        Self {
            dq: 2,
            dp: 2,
            order: 1,
            k1_form: LinearForm::Diagonal,
            target: UnnormalizedDensity::new(Gmm::trimodal(), 2f64.ln()),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.dq == 0 || self.dp == 0 {
            return Err(FlowError::Config("dq and dp must be positive".into()));
        }
        self.target.base.validate()?;
        if self.target.base.dim() != self.dq {
            return Err(FlowError::Config(format!(
                "target dimension {} differs from dq = {}",
                self.target.base.dim(),
                self.dq
            )));
        }
        if !self.target.log_z.is_finite() {
            return Err(FlowError::Config("target log_z must be finite".into()));
        }
        self.train.validate()?;
        if self.eval.steps == 0 || self.eval.samples < 2 || self.eval.chunk == 0 || self.eval.hutchinson_probes == 0 {
            return Err(FlowError::Config(
                "eval needs positive steps, chunk and probes and at least two samples".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| FlowError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| FlowError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Text checkpoint: a `key=value` header, a blank line, then one parameter
/// per line with 17 significant digits.
pub fn checkpoint_to_string(flow: &VerletFlow) -> String {
    let (dq, dp) = flow.dims();
    let hidden: Vec<String> = flow.hidden().iter().map(usize::to_string).collect();
    let form = match flow.linear_form() {
        LinearForm::Diagonal => "diagonal",
        LinearForm::Dense => "dense",
    };
    let params = flow.params();
    let mut out = String::with_capacity(24 * params.len() + 128);
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(out, "order={}", flow.order());
    let _ = writeln!(out, "dq={dq}");
    let _ = writeln!(out, "dp={dp}");
    let _ = writeln!(out, "hidden={}", hidden.join(","));
    let _ = writeln!(out, "k1_form={form}");
    let _ = writeln!(out, "params={}", params.len());
    out.push('\n');
    for v in params {
        let _ = writeln!(out, "{v:.16e}");
    }
    out
}

pub fn checkpoint_from_str(text: &str) -> Result<VerletFlow> {
    let bad = |msg: String| FlowError::Checkpoint(msg);
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad(format!("first line must be `{CHECKPOINT_MAGIC}`")));
    }
    let mut header = std::collections::BTreeMap::new();
    for line in lines.by_ref() {
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("header line `{line}` is not key=value")))?;
        header.insert(k.trim(), v.trim());
    }
    let get = |k: &str| header.get(k).copied().ok_or_else(|| bad(format!("missing header `{k}`")));
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| bad(format!("header `{k}` is not an integer")))
    };
    let hidden = get("hidden")?
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| bad("header `hidden` is not a list of integers".into()))?;
    let linear = match get("k1_form")? {
        "diagonal" => LinearForm::Diagonal,
        "dense" => LinearForm::Dense,
        other => return Err(bad(format!("unknown k1_form `{other}`"))),
    };
    let mut flow = VerletFlow::zeros(num("dq")?, num("dp")?, num("order")?, &hidden, linear)
        .map_err(|e| bad(e.to_string()))?;
    let params = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| bad(format!("bad parameter: {e}")))?;
    if let Ok(n) = num("params") {
        if n != params.len() {
            return Err(bad(format!("header says {n} parameters, found {}", params.len())));
        }
    }
    flow.set_params(&params).map_err(|e| bad(e.to_string()))?;
    Ok(flow)
}

pub fn save_checkpoint(flow: &VerletFlow, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_string(flow))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<VerletFlow> {
    let text = fs::read_to_string(path)
        .map_err(|e| FlowError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    checkpoint_from_str(&text)
}

pub const LOGZ_CSV_HEADER: &str = "method,seed,m,logZ,sd,wall_ms,invalid_count";

/// Log Z curve rows; `timings = false` writes `wall_ms` as 0 so the file
/// depends on the seed alone.
pub fn logz_csv(reports: &[WeightReport], timings: bool) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{LOGZ_CSV_HEADER}");
    for r in reports {
        for c in &r.curve {
            let ms = if timings { c.wall_ms } else { 0.0 };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3},{}",
                r.method, r.seed, c.m, c.log_z, c.sd, ms, r.invalid_count
            );
        }
    }
    out
}

pub fn train_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,nll\n");
    for (i, v) in report.epoch_nll.iter().enumerate() {
        let _ = writeln!(out, "{},{v}", i + 1);
    }
    out
}

pub fn weights_csv(reports: &[WeightReport]) -> String {
    let mut out = String::from("method,seed,index,log_weight\n");
    for r in reports {
        for (i, w) in r.log_weights.iter().enumerate() {
            let _ = writeln!(out, "{},{},{i},{w}", r.method, r.seed);
        }
    }
    out
}

/// One row per sample: q columns, p columns, model log-density.
pub fn samples_csv(q: &ndarray::Array2<f64>, p: &ndarray::Array2<f64>, logp: &ndarray::Array1<f64>) -> String {
    let mut out = String::new();
    let names: Vec<String> = (0..q.ncols())
        .map(|i| format!("q{i}"))
        .chain((0..p.ncols()).map(|i| format!("p{i}")))
        .chain(std::iter::once("logp".to_string()))
        .collect();
    let _ = writeln!(out, "{}", names.join(","));
    for r in 0..q.nrows() {
        let row: Vec<String> = q
            .row(r)
            .iter()
            .chain(p.row(r).iter())
            .chain(std::iter::once(&logp[r]))
            .map(f64::to_string)
            .collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}
