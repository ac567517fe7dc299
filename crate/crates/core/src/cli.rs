//! Command implementations behind the `pfsr` binary: `prep`, `train`,
//! `eval`, and `gradcheck`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{self, InteractionDataset};
use crate::error::{Error, Result};
use crate::eval::{self, EvalMode};
use crate::fed::{self, MetricRow, TrainContext, TrainOptions};
use crate::gradcheck::{self, GradcheckSettings, GRADCHECK_TOLERANCE};
use crate::model::{Model, ModelConfig};
use crate::params;

/// Resolve the dataset per the configured precedence: processed cache,
/// raw TSV, then the synthetic generator.
pub fn load_or_build_dataset(cfg: &RunConfig) -> Result<InteractionDataset> {
    if let Some(cache) = &cfg.data_cache {
        if cache.exists() {
            return data::load_cache(cache);
        }
    }
    build_source_dataset(cfg)
}

/// Build the dataset from the raw source (TSV or synthetic), ignoring any
/// cache.
fn build_source_dataset(cfg: &RunConfig) -> Result<InteractionDataset> {
    if let Some(tsv) = &cfg.data_tsv {
        if !tsv.exists() {
            return Err(Error::Config(format!(
                "input file {} does not exist",
                tsv.display()
            )));
        }
        let (events, warnings) = data::load_interactions(tsv)?;
        for w in &warnings {
            eprintln!("warning: {}:{}: {}", tsv.display(), w.line, w.message);
        }
        data::build_dataset(events, cfg.k_core, cfg.max_seq_len)
    } else {
        data::make_synthetic(&data::SyntheticConfig {
            num_users: cfg.synth_users,
            num_items: cfg.synth_items,
            num_clients: cfg.synth_clients,
            len_min: cfg.synth_len_min,
            len_max: cfg.synth_len_max,
            seed: cfg.seed,
        })
    }
}

fn default_cache_path(cfg: &RunConfig) -> PathBuf {
    cfg.data_cache
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("dataset.bin"))
}

/// Build the processed dataset, write the cache, print corpus statistics.
pub fn cmd_prep(cfg: &RunConfig) -> Result<()> {
    let dataset = build_source_dataset(cfg)?;
    let cache = default_cache_path(cfg);
    data::save_cache(&cache, &dataset)?;
    let partition = data::partition_clients(&dataset, cfg.clients, cfg.partition, cfg.seed)?;
    println!("users: {}", dataset.num_users);
    println!("items: {}", dataset.num_items);
    println!("interactions: {}", dataset.num_interactions());
    let sizes: Vec<String> = partition.iter().map(|g| g.len().to_string()).collect();
    println!("client user counts: {}", sizes.join(","));
    println!("cache: {}", cache.display());
    Ok(())
}

fn fmt_metric_row(row: &MetricRow) -> String {
    let r = &row.report;
    format!(
        "{},{},{},{},{},{},{},{}\n",
        row.round,
        row.scope,
        row.mode,
        r.hr_at(5).unwrap_or(f64::NAN),
        r.hr_at(10).unwrap_or(f64::NAN),
        r.ndcg_at(5).unwrap_or(f64::NAN),
        r.ndcg_at(10).unwrap_or(f64::NAN),
        r.users
    )
}

const METRICS_HEADER: &str = "round,scope,mode,HR@5,HR@10,NDCG@5,NDCG@10,users\n";

fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    for row in rows {
        out.push_str(&fmt_metric_row(row));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Run federated training and emit the round log, metric CSVs, checkpoints,
/// and the effective config echo under the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dataset = load_or_build_dataset(cfg)?;
    let split = data::leave_one_out_split(&dataset)?;
    let partition = data::partition_clients(&dataset, cfg.clients, cfg.partition, cfg.seed)?;
    let model = Model::new(cfg.model_config(dataset.num_items))?;

    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.echo())?;

    let fed_cfg = cfg.fed_config();
    let vrm_cfg = cfg.vrm_config();
    let loss_cfg = cfg.loss_config();
    let ctx = TrainContext {
        model: &model,
        split: &split,
        fed: &fed_cfg,
        vrm: &vrm_cfg,
        loss: &loss_cfg,
    };
    let opts = TrainOptions {
        eval_interval: cfg.eval_interval,
        checkpoint_interval: cfg.checkpoint_interval,
        checkpoint_dir: Some(cfg.out_dir.join("checkpoints")),
    };
    let output = fed::run_training(&ctx, partition, cfg.seed, &opts)?;

    let mut round_log = String::from("round,client_id,train_loss,frac_p1,samples\n");
    for report in &output.rounds {
        for c in &report.clients {
            if let Some(err) = &c.error {
                eprintln!(
                    "warning: round {} client {} skipped: {err}",
                    report.round, c.client_id
                );
            }
            round_log.push_str(&format!(
                "{},{},{},{},{}\n",
                report.round, c.client_id, c.train_loss, c.frac_p1, c.samples
            ));
        }
    }
    fs::write(cfg.out_dir.join("round_log.csv"), round_log)?;

    if cfg.dump_masks {
        let mut masks = String::from("round,client,group,frac_retained\n");
        for report in &output.rounds {
            for c in &report.clients {
                for (group, frac) in &c.group_retention {
                    masks.push_str(&format!(
                        "{},{},{},{}\n",
                        report.round, c.client_id, group, frac
                    ));
                }
            }
        }
        fs::write(cfg.out_dir.join("masks.csv"), masks)?;
    }

    write_metrics_csv(&cfg.out_dir.join("metrics.csv"), &output.metrics)?;

    for row in output
        .metrics
        .iter()
        .filter(|r| r.round == output.server.round)
    {
        println!(
            "round {} {} {}: HR@10 {:.4} NDCG@10 {:.4} over {} users",
            row.round,
            row.scope,
            row.mode,
            row.report.hr_at(10).unwrap_or(f64::NAN),
            row.report.ndcg_at(10).unwrap_or(f64::NAN),
            row.report.users
        );
    }
    Ok(())
}

/// Evaluate a saved checkpoint globally over all users.
pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let checkpoint_path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("eval requires the checkpoint key".into()))?;
    if !checkpoint_path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            checkpoint_path.display()
        )));
    }
    let dataset = load_or_build_dataset(cfg)?;
    let split = data::leave_one_out_split(&dataset)?;
    let params = params::load_checkpoint(checkpoint_path)?;
    let model = Model::new(cfg.model_config(dataset.num_items))?;
    if params.layout().as_ref() != model.layout().as_ref() {
        return Err(Error::Config(format!(
            "checkpoint {} does not match the configured model",
            checkpoint_path.display()
        )));
    }
    let users: Vec<u32> = dataset.user_ids().collect();
    let mut rows = Vec::new();
    for mode in [EvalMode::Validation, EvalMode::Test] {
        let report = eval::evaluate(&model, &params, &split, &users, mode)?;
        println!(
            "{mode}: HR@5 {:.4} HR@10 {:.4} NDCG@5 {:.4} NDCG@10 {:.4} over {} users",
            report.hr_at(5).unwrap_or(f64::NAN),
            report.hr_at(10).unwrap_or(f64::NAN),
            report.ndcg_at(5).unwrap_or(f64::NAN),
            report.ndcg_at(10).unwrap_or(f64::NAN),
            report.users
        );
        rows.push(MetricRow {
            round: 0,
            scope: fed::Scope::Global,
            mode,
            report,
        });
    }
    fs::create_dir_all(&cfg.out_dir)?;
    write_metrics_csv(&cfg.out_dir.join("eval_metrics.csv"), &rows)?;
    Ok(())
}

/// Finite-difference check over every parameter group of a small model plus
/// the regularizer; nonzero exit when any group exceeds the tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let settings = GradcheckSettings {
        model: ModelConfig {
            embed_dim: cfg.gradcheck_embed_dim,
            state_size: cfg.gradcheck_state_size,
            conv_kernel: cfg.gradcheck_conv_kernel,
            expansion: cfg.gradcheck_expansion,
            num_blocks: cfg.num_blocks,
            dropout: 0.0,
            max_seq_len: cfg.gradcheck_seq_len.max(3),
            vocab_size: cfg.gradcheck_vocab,
        },
        seq_len: cfg.gradcheck_seq_len,
        seed: cfg.seed,
        corrupt: cfg.gradcheck_corrupt,
    };
    let report = gradcheck::run_gradcheck(&settings)?;
    let mut out = std::io::stdout().lock();
    for group in &report.groups {
        writeln!(
            out,
            "group {} max_rel_err {:.3e}",
            group.group, group.max_rel_err
        )?;
    }
    if report.passed() {
        writeln!(
            out,
            "gradcheck: PASS (worst {:.3e} < {GRADCHECK_TOLERANCE:e})",
            report.worst()
        )?;
        Ok(())
    } else {
        let offenders: Vec<String> = report
            .offenders()
            .iter()
            .map(|g| format!("{} ({:.3e})", g.group, g.max_rel_err))
            .collect();
        Err(Error::Numeric(format!(
            "gradient check failed for: {}",
            offenders.join(", ")
        )))
    }
}

/// Exit code classification: config and usage problems are 2, runtime
/// failures 1.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}
