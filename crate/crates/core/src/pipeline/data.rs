use std::collections::BTreeMap;

use super::{require, write_json, Layout};
use crate::config::RunConfig;
use crate::corpus::{
    clean_item, extract_features, generate_synthetic, read_items, read_raw_items, stratified_split,
    train_complexity_classifier, train_tokenizer, write_items, write_rejections, QAItem, RejectReason, Stage,
    WhitespaceCount,
};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::report::Table;

fn synthetic_corpus(cfg: &RunConfig) -> Vec<QAItem> {
    Stage::ALL.iter().flat_map(|&s| generate_synthetic(s, cfg.data.items_per_tier, cfg.data.seed)).collect()
}

/// Writes the synthetic four-tier corpus, with generator tiers, as raw JSONL.
pub fn gen_data(cfg: &RunConfig) -> Result<String> {
    let layout = Layout::new(cfg);
    let items = synthetic_corpus(cfg);
    write_items(&layout.raw(), &items)?;
    Ok(format!("wrote {} items to {}", items.len(), layout.raw().display()))
}

/// Normalizes the raw corpus (or `data.input`) and logs rejections.
pub fn clean(cfg: &RunConfig) -> Result<String> {
    let layout = Layout::new(cfg);
    let input = cfg.data.input.clone().unwrap_or_else(|| layout.raw());
    require(&input, "gen-data")?;
    let (raw, mut rejected) = read_raw_items(&input)?;
    let mut kept = Vec::with_capacity(raw.len());
    for item in &raw {
        match clean_item(item, &WhitespaceCount, cfg.data.max_tokens) {
            Ok(q) => kept.push(q),
            Err(reason) => rejected.push((item.id.clone(), reason)),
        }
    }
    write_items(&layout.clean(), &kept)?;
    write_rejections(&layout.rejections(), &rejected)?;
    Ok(format!("kept {} items, rejected {}", kept.len(), rejected.len()))
}

/// Assigns every cleaned item a stage with the complexity classifier. The
/// classifier learns from items that already carry a tier, or from a fresh
/// synthetic corpus when fewer than two tiers are present.
pub fn label(cfg: &RunConfig) -> Result<String> {
    let layout = Layout::new(cfg);
    require(&layout.clean(), "clean")?;
    let items = read_items(&layout.clean())?;
    if items.is_empty() {
        return Err(Error::invalid("no items to label"));
    }
    let tiered: Vec<_> = items.iter().filter_map(|i| i.stage.map(|s| (extract_features(i), s))).collect();
    let distinct = tiered.iter().map(|(_, s)| *s).collect::<std::collections::BTreeSet<_>>().len();
    let training = if distinct >= 2 {
        tiered
    } else {
        synthetic_corpus(cfg).iter().map(|i| (extract_features(i), i.stage.expect("generator sets tiers"))).collect()
    };
    let model = train_complexity_classifier(&training)?;

    let mut counts: BTreeMap<Stage, [usize; 3]> = BTreeMap::new();
    let labeled: Vec<QAItem> = items
        .into_iter()
        .map(|mut item| {
            let predicted = model.predict(&extract_features(&item));
            let c = counts.entry(predicted).or_default();
            c[0] += 1;
            if let Some(gold) = item.stage {
                c[1] += 1;
                c[2] += usize::from(gold == predicted);
            }
            item.stage = Some(predicted);
            item
        })
        .collect();
    write_items(&layout.labeled(), &labeled)?;
    write_json(&layout.classifier(), &model)?;

    let mut table = Table::new(&["stage", "items", "with_tier", "tier_agrees"]);
    for s in Stage::ALL {
        let c = counts.get(&s).copied().unwrap_or_default();
        table.push(&[s.name().to_string(), c[0].to_string(), c[1].to_string(), c[2].to_string()])?;
    }
    table.write(&layout.data().join("label_report.csv"))?;
    Ok(format!("labeled {} items", labeled.len()))
}

/// Trains the tokenizer, drops items that do not fit the context, and splits
/// each stage 90/10.
pub fn split(cfg: &RunConfig) -> Result<String> {
    let layout = Layout::new(cfg);
    require(&layout.labeled(), "label")?;
    let items = read_items(&layout.labeled())?;
    let texts: Vec<String> = items.iter().map(|i| format!("{}\n{}", i.question, i.completion())).collect();
    let tokenizer = train_tokenizer(&texts, cfg.model.vocab_size)?;

    let mut fitting = Vec::with_capacity(items.len());
    let mut dropped = Vec::new();
    for item in items {
        if tokenizer.encode_example(&item, cfg.model.max_seq_len).is_ok() {
            fitting.push(item);
        } else {
            dropped.push((item.id, RejectReason::TooLong));
        }
    }
    let split = stratified_split(&fitting, cfg.data.val_frac, cfg.data.seed)?;
    write_json(&layout.split(), &split)?;
    write_atomic(&layout.tokenizer(), tokenizer.to_json().as_bytes())?;
    write_rejections(&layout.data().join("split_rejections.csv"), &dropped)?;

    let mut table = Table::new(&["stage", "train", "val"]);
    for s in Stage::ALL {
        let st = split.stage(s);
        table.push(&[s.name().to_string(), st.train.len().to_string(), st.val.len().to_string()])?;
    }
    table.write(&layout.data().join("split_report.csv"))?;
    Ok(format!("split {} items ({} too long), vocabulary {}", fitting.len(), dropped.len(), tokenizer.vocab_size()))
}
