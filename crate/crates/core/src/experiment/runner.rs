//! Training-and-evaluation runs, the scheme pilot and the ablation sweeps.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use super::checkpoint::save_checkpoint;
use super::config::ExperimentConfig;
use super::record::{RunRecord, TaskResult};
use super::report::{emit_table, Format};
use crate::bench::{
    dataset_hash, evaluate_policy, generate_dataset, generate_eval_episodes, train_policy,
    CorruptionMode, Split, TaskVariant,
};
use crate::error::{Error, Result};
use crate::fusion::FusionSchemeId;
use crate::policy::{Arch, Policy};

pub struct RunOutput {
    pub record: RunRecord,
    pub policy: Policy,
}

/// Evaluate `policy` on every default task variant under `cfg`'s corruption.
pub fn evaluate_tasks(policy: &Policy, cfg: &ExperimentConfig) -> Result<Vec<TaskResult>> {
    TaskVariant::defaults()
        .iter()
        .map(|v| {
            let episodes = generate_eval_episodes(cfg.seed, v, cfg.eval_episodes)?;
            let metrics = evaluate_policy(policy, &episodes, cfg.corruption, cfg.seed)?;
            Ok(TaskResult {
                task: v.name.clone(),
                metrics,
            })
        })
        .collect()
}

/// Train from scratch and evaluate. Fully determined by `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig, label: &str) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let data = generate_dataset(cfg.seed, cfg.dataset_size, Split::Train)?;
    let out = train_policy(&cfg.policy_config(), &data, &cfg.train, cfg.seed)?;
    let tasks = evaluate_tasks(&out.policy, cfg)?;
    let record = RunRecord {
        label: label.to_string(),
        group: cfg.arch.to_string(),
        config: cfg.clone(),
        dataset_hash: dataset_hash(&data),
        tasks,
        loss_curve: out.loss_curve,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        record,
        policy: out.policy,
    })
}

/// The base model plus every fusion scheme, all else taken from `base`.
pub fn pilot_configs(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    FusionSchemeId::ALL
        .iter()
        .map(|&scheme| ExperimentConfig {
            scheme,
            ..base.clone()
        })
        .collect()
}

/// Pilot configs may differ only in `scheme`.
pub fn check_protocol(configs: &[ExperimentConfig]) -> Result<()> {
    let first = configs
        .first()
        .ok_or(Error::EmptySequence("pilot configs"))?;
    let norm = |c: &ExperimentConfig| ExperimentConfig {
        scheme: FusionSchemeId::None,
        ..c.clone()
    };
    let reference = norm(first);
    for (i, c) in configs.iter().enumerate() {
        if norm(c) != reference {
            let (a, b) = (reference.to_text(), norm(c).to_text());
            let diff: Vec<&str> = b.lines().filter(|l| !a.lines().any(|m| m == *l)).collect();
            return Err(Error::Protocol(format!(
                "pilot config {i} differs from config 0 outside `scheme`: {}",
                diff.join("; ")
            )));
        }
    }
    Ok(())
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))
}

/// Train and evaluate every config with `jobs` workers; output order follows input order.
pub fn run_pilot(configs: &[ExperimentConfig], jobs: usize) -> Result<Vec<RunOutput>> {
    check_protocol(configs)?;
    pool(jobs)?.install(|| {
        configs
            .par_iter()
            .map(|c| run_experiment(c, c.scheme.display_name()))
            .collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    FrozenVsTrainable,
    Corruption,
    SparseDepth,
}

impl AblationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::FrozenVsTrainable => "frozen_vs_trainable",
            AblationKind::Corruption => "corruption",
            AblationKind::SparseDepth => "sparse_depth",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen_vs_trainable" => Ok(AblationKind::FrozenVsTrainable),
            "corruption" => Ok(AblationKind::Corruption),
            "sparse_depth" => Ok(AblationKind::SparseDepth),
            _ => Err(Error::Config(format!(
                "unknown ablation `{s}` (valid: frozen_vs_trainable, corruption, sparse_depth)"
            ))),
        }
    }
}

/// Sweep one ablation axis holding everything else in `base` fixed.
///
/// The corruption sweep trains once and evaluates three times. The sparse
/// depth sweep always uses layer-wise gated fusion.
pub fn run_ablation(
    kind: AblationKind,
    base: &ExperimentConfig,
    jobs: usize,
) -> Result<Vec<RunOutput>> {
    base.validate()?;
    match kind {
        AblationKind::FrozenVsTrainable => {
            let cfgs: Vec<(ExperimentConfig, &str)> = [(true, "Frozen"), (false, "Trainable")]
                .into_iter()
                .map(|(f, l)| {
                    (
                        ExperimentConfig {
                            freeze_geo: f,
                            ..base.clone()
                        },
                        l,
                    )
                })
                .collect();
            pool(jobs)?.install(|| cfgs.par_iter().map(|(c, l)| run_experiment(c, l)).collect())
        }
        AblationKind::Corruption => {
            let clean = ExperimentConfig {
                corruption: CorruptionMode::None,
                ..base.clone()
            };
            let trained = run_experiment(&clean, "none")?;
            let modes = [
                CorruptionMode::None,
                CorruptionMode::Zeros,
                CorruptionMode::Gaussian { sigma: 1.0 },
            ];
            modes
                .iter()
                .map(|&m| {
                    let cfg = ExperimentConfig {
                        corruption: m,
                        ..clean.clone()
                    };
                    let mut record = trained.record.clone();
                    if m != CorruptionMode::None {
                        record.tasks = evaluate_tasks(&trained.policy, &cfg)?;
                    }
                    record.label = m.to_string();
                    record.config = cfg;
                    Ok(RunOutput {
                        record,
                        policy: trained.policy.clone(),
                    })
                })
                .collect()
        }
        AblationKind::SparseDepth => {
            let cfgs: Vec<ExperimentConfig> = (0..=3)
                .map(|k| ExperimentConfig {
                    arch: Arch::Pi,
                    scheme: FusionSchemeId::GatedFusion,
                    sparse_k: k,
                    ..base.clone()
                })
                .collect();
            pool(jobs)?.install(|| {
                cfgs.par_iter()
                    .map(|c| run_experiment(c, &format!("k={}", c.sparse_k)))
                    .collect()
            })
        }
    }
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect()
}

/// Per-run audit trail: config snapshot, record, checkpoint and loss curve.
pub fn write_run_dir(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), out.record.config.to_text())?;
    fs::write(dir.join("record.json"), out.record.to_json()?)?;
    save_checkpoint(&out.policy, &dir.join("checkpoint.bin"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.record.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    fs::write(dir.join("loss.csv"), csv)?;
    Ok(())
}

/// Write every run under `out_dir/NN-label/` plus the report files.
pub fn write_outputs(out_dir: &Path, outputs: &[RunOutput], format: Format) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    for (i, o) in outputs.iter().enumerate() {
        write_run_dir(
            &out_dir.join(format!("{i:02}-{}", slug(&o.record.label))),
            o,
        )?;
    }
    let records: Vec<RunRecord> = outputs.iter().map(|o| o.record.clone()).collect();
    write_report(out_dir, &records, format)
}

/// Records of every run directory under `out_dir`, in directory-name order.
pub fn read_records(out_dir: &Path) -> Result<Vec<RunRecord>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("record.json").is_file())
        .collect();
    dirs.sort();
    dirs.iter()
        .map(|d| RunRecord::from_json(&fs::read_to_string(d.join("record.json"))?))
        .collect()
}

/// One column per run, one row per step; shorter curves leave blanks.
pub fn loss_curves_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("step");
    for r in records {
        s.push(',');
        s.push_str(&r.label.replace(',', ";"));
    }
    s.push('\n');
    let n = records
        .iter()
        .map(|r| r.loss_curve.len())
        .max()
        .unwrap_or(0);
    for i in 0..n {
        s.push_str(&i.to_string());
        for r in records {
            s.push(',');
            if let Some(v) = r.loss_curve.get(i) {
                s.push_str(&v.to_string());
            }
        }
        s.push('\n');
    }
    s
}

/// Writes `report.{md,csv}` and `loss_curves.csv`; returns the report path.
pub fn write_report(out_dir: &Path, records: &[RunRecord], format: Format) -> Result<PathBuf> {
    let path = out_dir.join(format!("report.{}", format.extension()));
    fs::write(&path, emit_table(records, format)?)?;
    fs::write(out_dir.join("loss_curves.csv"), loss_curves_csv(records))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_rejects_divergent_fields() {
        let base = ExperimentConfig::default();
        let mut cfgs = pilot_configs(&base);
        assert_eq!(cfgs.len(), 10);
        check_protocol(&cfgs).unwrap();
        cfgs[3].train.steps += 1;
        match check_protocol(&cfgs) {
            Err(Error::Protocol(m)) => assert!(m.contains("steps"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ablation_kinds_parse() {
        for k in ["frozen_vs_trainable", "corruption", "sparse_depth"] {
            assert_eq!(k.parse::<AblationKind>().unwrap().as_str(), k);
        }
        assert!("depth".parse::<AblationKind>().is_err());
    }
}
