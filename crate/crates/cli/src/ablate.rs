use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::Result;
use icm_core::metrics::MetricsReport;
use icm_core::synthgen::Dataset;
use icm_core::trainer::{evaluate, finish_training, scene_tuned_model, train_model, Ablation, TrainConfig, TrainingData};
use serde::Serialize;

use crate::config::RunConfig;
use crate::score_videos;

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub ablation: Ablation,
    pub dataset_hash: String,
    pub mean_gate_entropy: f64,
    pub mean_gate: [f64; 4],
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub dataset_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// Per ablation, the mean of each metric over seeds; metrics that are
    /// not applicable in some seed are averaged over the others.
    pub means: BTreeMap<String, BTreeMap<String, f64>>,
}

const COLUMNS: [&str; 11] = [
    "acc", "f2", "fnr", "map@0.1", "map@0.2", "map@0.3", "map_avg", "sem_r", "sem_c", "sen_a", "gate_entropy",
];

fn values(row: &AblationRow) -> [Option<f64>; 11] {
    let r = &row.report;
    [
        Some(r.acc),
        Some(r.f2),
        r.fnr,
        Some(r.map_01),
        Some(r.map_02),
        Some(r.map_03),
        Some(r.map_avg),
        r.sem_r,
        r.sem_c,
        r.sen_a,
        Some(row.mean_gate_entropy),
    ]
}

impl AblationTable {
    pub fn mean(&self, ablation: Ablation, metric: &str) -> Option<f64> {
        self.means.get(ablation.name())?.get(metric).copied()
    }

    pub fn markdown(&self) -> String {
        let mut s = format!("| ablation | {} |\n|---|{}\n", COLUMNS.join(" | "), "---|".repeat(COLUMNS.len()));
        for a in Ablation::ALL {
            let Some(m) = self.means.get(a.name()) else { continue };
            let cells: Vec<String> = COLUMNS
                .iter()
                .map(|c| m.get(*c).map_or("n/a".to_string(), |v| format!("{v:.4}")))
                .collect();
            let _ = writeln!(s, "| {} | {} |", a.name(), cells.join(" | "));
        }
        s
    }
}

/// Trains and scores every ablation for `cfg.ablate.seeds` consecutive seeds
/// starting at `cfg.train.seed`. The three ablations that keep stage 1 share
/// one scene-tuned model per seed.
pub fn run_ablation(cfg: &RunConfig, ds: &Dataset, mut on_row: impl FnMut(&AblationRow)) -> Result<AblationTable> {
    let td = TrainingData::from_dataset(ds);
    let mode = ds.config().mode;
    let ss = ds.config().segment_seconds;
    let seeds: Vec<u64> = (0..cfg.ablate.seeds).map(|i| cfg.train.seed + i).collect();
    let mut rows = Vec::new();
    for &seed in &seeds {
        let with = |ablation| TrainConfig {
            seed,
            ablation,
            ..cfg.train.clone()
        };
        let (shared, _) = scene_tuned_model(&cfg.model, &td, &with(Ablation::Full))?;
        for ablation in Ablation::ALL {
            let tc = with(ablation);
            let (model, _) = if ablation.switches().scene_tuning {
                finish_training(shared.clone(), &td, &tc)?
            } else {
                train_model(&cfg.model, &td, &tc)?
            };
            let summary = evaluate(&model, &ds.test)?;
            let row = AblationRow {
                seed,
                ablation,
                dataset_hash: ds.hash.clone(),
                mean_gate_entropy: summary.mean_gate_entropy,
                mean_gate: summary.mean_gate,
                report: score_videos(&model, mode, ss, &ds.test)?,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    let mut means = BTreeMap::new();
    for a in Ablation::ALL {
        let mine: Vec<[Option<f64>; 11]> = rows.iter().filter(|r| r.ablation == a).map(values).collect();
        let mut m = BTreeMap::new();
        for (i, c) in COLUMNS.iter().enumerate() {
            let present: Vec<f64> = mine.iter().filter_map(|v| v[i]).collect();
            if !present.is_empty() {
                m.insert(c.to_string(), present.iter().sum::<f64>() / present.len() as f64);
            }
        }
        means.insert(a.name().to_string(), m);
    }
    Ok(AblationTable {
        dataset_hash: ds.hash.clone(),
        seeds,
        rows,
        means,
    })
}
