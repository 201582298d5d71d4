//! Component ablation and the `W1` x `W2` initialisation sweep.
//!
//! Every row is trained for `cfg.seeds` seeds; seed `k` shifts both the
//! model seed and the dataset seed by `k`, identically for all rows, so rows
//! are compared on the same data.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelFlags};
use crate::data::{generate_split, Split};
use crate::error::{io_err, Result};
use crate::train::{evaluate_samples, fit, PredictionSource, Trained};

/// Flag rows in table order: none, CFM, WU-Net, WU-Net + CFM, SAWF + CFM,
/// SAWF, all three.
pub const ABLATION_ROWS: [(bool, bool, bool); 7] = [
    (false, false, false),
    (false, false, true),
    (true, false, false),
    (true, false, true),
    (false, true, true),
    (false, true, false),
    (true, true, true),
];

pub const SWEEP_W2: [f64; 2] = [1.0, 0.5];
pub const SWEEP_W1: [f64; 5] = [1.0, 0.75, 0.5, 0.25, 0.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub wunet: bool,
    pub sawf: bool,
    pub cfm: bool,
    /// Interaction core used where the CFM is off: `attention` or `add`.
    pub fallback: String,
    pub w1: f64,
    pub w2: f64,
    pub params: usize,
    pub config_hash: String,
    pub map50_per_seed: Vec<f64>,
    pub map_per_seed: Vec<f64>,
    pub map50: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub kind: String,
    pub base_config_hash: String,
    pub seeds: usize,
    pub rows: Vec<Row>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains and evaluates one configuration over `cfg.seeds` seeds.
pub fn run_row(cfg: &ExperimentConfig) -> Result<Row> {
    let (mut m50, mut m) = (Vec::new(), Vec::new());
    let mut params = 0;
    for k in 0..cfg.seeds as u64 {
        let mut c = cfg.clone();
        c.seed = cfg.seed + k;
        c.data.seed = cfg.data.seed + k;
        let train = generate_split(&c.data, Split::Train)?;
        let val = generate_split(&c.data, Split::Val)?;
        let mut t = Trained::init(&c)?;
        params = t.num_params();
        fit(&mut t, &train, |_| {})?;
        let r = evaluate_samples(&t, &val, "val", PredictionSource::Model)?;
        log::info!("{} seed {k}: mAP@0.5 {:.4}", c.flags.code(), r.map50);
        m50.push(r.map50);
        m.push(r.map);
    }
    Ok(Row {
        wunet: cfg.flags.wunet,
        sawf: cfg.flags.sawf,
        cfm: cfg.flags.cfm,
        fallback: if cfg.flags.attention_core { "attention" } else { "add" }.into(),
        w1: cfg.w1,
        w2: cfg.w2,
        params,
        config_hash: cfg.hash(),
        map50: mean(&m50),
        map: mean(&m),
        map50_per_seed: m50,
        map_per_seed: m,
    })
}

/// Row configurations of the ablation. SAWF without the CFM always uses the
/// attention core; the other rows keep the base config's fallback.
pub fn ablation_configs(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    ABLATION_ROWS
        .iter()
        .map(|&(wunet, sawf, cfm)| {
            let mut c = base.clone();
            c.flags = ModelFlags {
                wunet,
                sawf,
                cfm,
                attention_core: base.flags.attention_core || (sawf && !cfm),
            };
            c
        })
        .collect()
}

pub fn sweep_configs(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for &w2 in &SWEEP_W2 {
        for &w1 in &SWEEP_W1 {
            let mut c = base.clone();
            c.w1 = w1;
            c.w2 = w2;
            out.push(c);
        }
    }
    out
}

fn run_table(kind: &str, base: &ExperimentConfig, configs: Vec<ExperimentConfig>) -> Result<Table> {
    let rows = configs.iter().map(run_row).collect::<Result<Vec<_>>>()?;
    Ok(Table {
        kind: kind.into(),
        base_config_hash: base.hash(),
        seeds: base.seeds,
        rows,
    })
}

pub fn ablate(base: &ExperimentConfig) -> Result<Table> {
    run_table("ablation", base, ablation_configs(base))
}

/// The sweep needs SAWF; the base config's other flags are kept.
pub fn sweep_w(base: &ExperimentConfig) -> Result<Table> {
    let mut b = base.clone();
    b.flags.sawf = true;
    b.flags.validate()?;
    run_table("w-sweep", &b, sweep_configs(&b))
}

fn tick(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        " "
    }
}

impl Table {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "<!-- config {} ; {} seed(s) per row -->", self.base_config_hash, self.seeds);
        if self.kind == "w-sweep" {
            s.push_str("| W2 | W1 | mAP@0.5 | mAP | config |\n|---|---|---|---|---|\n");
            for r in &self.rows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.1} | {:.1} | {} |",
                    r.w2,
                    r.w1,
                    100.0 * r.map50,
                    100.0 * r.map,
                    r.config_hash
                );
            }
        } else {
            s.push_str("| WU-Net | SAWF | CFM | mAP@0.5 | mAP | Param. | config |\n|---|---|---|---|---|---|---|\n");
            for r in &self.rows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {:.1} | {:.1} | {} | {} |",
                    tick(r.wunet),
                    tick(r.sawf),
                    tick(r.cfm),
                    100.0 * r.map50,
                    100.0 * r.map,
                    r.params,
                    r.config_hash
                );
            }
        }
        s
    }

    /// Writes `{stem}.md` and `{stem}.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let md = dir.join(format!("{stem}.md"));
        fs::write(&md, self.to_markdown()).map_err(io_err(&md))?;
        let js = dir.join(format!("{stem}.json"));
        fs::write(&js, serde_json::to_string_pretty(self)?).map_err(io_err(&js))
    }
}
