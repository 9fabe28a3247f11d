use std::fmt::Write as _;
use std::path::Path;

use absa_core::autodiff::primitive_checks;
use absa_core::finetune::{
    all_at_once_plan, chain_thaw_plan, gradual_unfreeze_plan, stlr, StopRule, UnfreezeStrategy,
};
use absa_core::model::encoder_gradient_check;
use absa_core::synth::write_demo_files;

use crate::error::{CliError, CliResult};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// CSV `check,max_relative_error,seeds`, one row per primitive and
/// optionally one for the full tiny encoder. Any row at or above the
/// tolerance makes the command fail with the numerical exit code, after the
/// report has been printed.
pub fn gradcheck(base_seed: u64, seeds: u64, eps: f64, encoder: bool) -> CliResult<(String, bool)> {
    if seeds == 0 {
        return Err(CliError::config("--seeds must be positive"));
    }
    let mut worst: Vec<(String, f64)> = Vec::new();
    for s in base_seed..base_seed + seeds {
        let results = primitive_checks(s).map_err(CliError::internal)?;
        for (name, err) in results {
            match worst.iter_mut().find(|(n, _)| n == name) {
                Some(slot) => slot.1 = slot.1.max(err),
                None => worst.push((name.to_string(), err)),
            }
        }
    }
    if encoder {
        let mut e = 0.0f64;
        for s in base_seed..base_seed + seeds {
            let r = encoder_gradient_check(s, eps, GRADCHECK_TOLERANCE)?;
            e = e.max(r.max_relative_error);
        }
        worst.push(("encoder".into(), e));
    }
    let mut out = String::from("check,max_relative_error,seeds\n");
    for (name, err) in &worst {
        writeln!(out, "{name},{err:e},{seeds}").expect("string write");
    }
    let ok = worst.iter().all(|(_, e)| *e < GRADCHECK_TOLERANCE);
    Ok((out, ok))
}

pub fn schedule_dump(total: usize, cut_frac: f64, ratio: f64, lr_max: f64) -> CliResult<String> {
    let mut out = String::from("t,lr\n");
    for t in 0..=total {
        let lr = stlr(t, total, cut_frac, ratio, lr_max)?;
        writeln!(out, "{t},{lr}").expect("string write");
    }
    Ok(out)
}

/// Group names as a model with `n` groups would report them.
fn group_names(n: usize) -> Vec<String> {
    let mut names = vec!["embedding".to_string()];
    names.extend((0..n.saturating_sub(2)).map(|i| format!("lstm_{i}")));
    names.push("head".into());
    names
}

pub fn plan_dump(
    strategy: &UnfreezeStrategy,
    groups: usize,
    epochs: usize,
    patience: usize,
    min_delta: f64,
) -> CliResult<String> {
    if groups < 2 {
        return Err(CliError::config(
            "a model has at least two groups (embedding and head)",
        ));
    }
    let converge = StopRule::Converge {
        patience,
        min_delta,
        max_epochs: epochs,
    };
    let plan = match strategy {
        UnfreezeStrategy::Gradual => gradual_unfreeze_plan(groups, epochs)?,
        UnfreezeStrategy::ChainThawFull => chain_thaw_plan(groups, None, converge)?,
        UnfreezeStrategy::ChainThawPartial { k } => chain_thaw_plan(groups, Some(*k), converge)?,
        UnfreezeStrategy::AllAtOnce => all_at_once_plan(groups, StopRule::FixedEpochs { epochs })?,
    };
    Ok(plan.describe(&group_names(groups)))
}

/// Demo configs written next to the synthetic data. Paths are relative to
/// the config file, so the directory can be moved as a whole. Dropout is off:
/// the demo model is far too small to need it.
const DEMO_CONFIGS: &[(&str, &str)] = &[
    (
        "pretrain.toml",
        r#"out_dir = "runs/pretrain"

[data]
train = "general.txt"

[encoder]
embed_dim = 16
hidden_dim = 32
num_layers = 2
weight_drop_p = 0.0
embed_drop_p = 0.0
variational_drop_p = 0.0

[train]
epochs = 8
batch_size = 8
bptt = 16
lr_max = 0.02
"#,
    ),
    (
        "finetune_lm.toml",
        r#"out_dir = "runs/lm_finetune"
input_checkpoint = "runs/pretrain/checkpoint.ckpt"

[data]
train = "vic.jsonl"

[encoder]
weight_drop_p = 0.0
embed_drop_p = 0.0
variational_drop_p = 0.0

[train]
epochs = 4
batch_size = 8
bptt = 16
lr_max = 0.01
"#,
    ),
    (
        "aux_aspect_l1.toml",
        r#"out_dir = "runs/aspect_l1"
input_checkpoint = "runs/lm_finetune/checkpoint.ckpt"

[data]
train = "fiqa_train.jsonl"
valid = "fiqa_valid.jsonl"
hierarchy = "hierarchy.json"
target = "aspect_l1"

[encoder]
weight_drop_p = 0.0
embed_drop_p = 0.0
variational_drop_p = 0.0

[train]
epochs = 12
batch_size = 8
lr_max = 0.01
unfreeze = { strategy = "all_at_once" }
"#,
    ),
    (
        "classifier.toml",
        r#"out_dir = "runs/aspect_l2"
input_checkpoint = "runs/aspect_l1/checkpoint.ckpt"

[data]
train = "fiqa_train.jsonl"
valid = "fiqa_valid.jsonl"
hierarchy = "hierarchy.json"
target = "aspect_l2"

[encoder]
weight_drop_p = 0.0
embed_drop_p = 0.0
variational_drop_p = 0.0

[train]
epochs = 40
batch_size = 8
lr_max = 0.01
unfreeze = { strategy = "all_at_once" }
"#,
    ),
    (
        "regressor.toml",
        r#"out_dir = "runs/sentiment"
input_checkpoint = "runs/lm_finetune/checkpoint.ckpt"

[data]
train = "fiqa_train.jsonl"
valid = "fiqa_valid.jsonl"
hierarchy = "hierarchy.json"

[encoder]
weight_drop_p = 0.0
embed_drop_p = 0.0
variational_drop_p = 0.0

[train]
epochs = 20
batch_size = 8
lr_max = 0.01
unfreeze = { strategy = "all_at_once" }
"#,
    ),
    (
        "curve.toml",
        r#"out_dir = "runs/curve"
input_checkpoint = "runs/lm_finetune/checkpoint.ckpt"

[data]
train = "fiqa_train.jsonl"
valid = "fiqa_valid.jsonl"
hierarchy = "hierarchy.json"
target = "aspect_l2"

[encoder]
weight_drop_p = 0.0
embed_drop_p = 0.0
variational_drop_p = 0.0

[train]
epochs = 40
batch_size = 8
lr_max = 0.01
unfreeze = { strategy = "all_at_once" }

[curve]
kind = "target_classify"
fractions = [0.25, 0.5, 1.0]
seeds = [1, 2, 3]
"#,
    ),
];

pub fn synth(dir: &Path, seed: u64, n_fiqa: usize) -> CliResult<Vec<String>> {
    write_demo_files(dir, seed, n_fiqa)?;
    let mut written = vec![
        "general.txt".to_string(),
        "vic.jsonl".into(),
        "hierarchy.json".into(),
        "fiqa_train.jsonl".into(),
        "fiqa_valid.jsonl".into(),
    ];
    for (name, body) in DEMO_CONFIGS {
        let path = dir.join(name);
        std::fs::write(&path, format!("seed = {seed}\n{body}")).map_err(|e| {
            CliError::internal(anyhow::Error::new(e).context(format!("writing {}", path.display())))
        })?;
        written.push(name.to_string());
    }
    Ok(written)
}
