//! Directory layout: `catalog.jsonl`, `interactions.jsonl`, `contexts.jsonl`
//! and `featurespec.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Catalog, Context, DataError, Dataset, Interaction, Item, Schema, UserId, UserSequence};

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const CONTEXTS_FILE: &str = "contexts.jsonl";
pub const FEATURESPEC_FILE: &str = "featurespec.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextRow {
    user: UserId,
    market: u32,
    device: u32,
    premise: u32,
    language: u32,
    country: u32,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(|e| DataError::Invalid(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = path.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned());
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            file: file.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}

/// Writes the four dataset files into `dir`, creating it if needed.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(CATALOG_FILE), dataset.catalog.items())?;
    let mut log: Vec<&Interaction> = dataset.sequences.iter().flat_map(|s| &s.interactions).collect();
    log.sort_by_key(|i| (i.timestamp, i.user));
    write_jsonl(&dir.join(INTERACTIONS_FILE), log)?;
    write_jsonl(
        &dir.join(CONTEXTS_FILE),
        dataset.sequences.iter().map(|s| ContextRow {
            user: s.user,
            market: s.context.market,
            device: s.context.device,
            premise: s.context.premise,
            language: s.context.language,
            country: s.context.country,
        }),
    )?;
    let spec = serde_json::to_string_pretty(&dataset.schema).map_err(|e| DataError::Invalid(e.to_string()))?;
    fs::write(dir.join(FEATURESPEC_FILE), spec + "\n")?;
    Ok(())
}

/// Reads a dataset directory. The horizon is one past the latest day in the log.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let spec_text = fs::read_to_string(dir.join(FEATURESPEC_FILE))?;
    let schema: Schema = serde_json::from_str(&spec_text).map_err(|e| DataError::Parse {
        file: FEATURESPEC_FILE.into(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    schema.validate_names()?;

    let items: Vec<Item> = read_jsonl(&dir.join(CATALOG_FILE))?;
    for item in &items {
        if let Some(name) = item.features.keys().find(|n| schema.vocab_of(n).is_none()) {
            return Err(DataError::Schema(format!("unknown feature `{name}` on item {}", item.id)));
        }
    }
    let catalog = Catalog::new(items)?;

    let contexts: Vec<ContextRow> = read_jsonl(&dir.join(CONTEXTS_FILE))?;
    let mut by_user: BTreeMap<UserId, UserSequence> = BTreeMap::new();
    for c in contexts {
        let seq = UserSequence {
            user: c.user,
            context: Context {
                market: c.market,
                device: c.device,
                premise: c.premise,
                language: c.language,
                country: c.country,
            },
            interactions: Vec::new(),
        };
        if by_user.insert(c.user, seq).is_some() {
            return Err(DataError::Invalid(format!("duplicate context for user {}", c.user)));
        }
    }

    let log: Vec<Interaction> = read_jsonl(&dir.join(INTERACTIONS_FILE))?;
    let mut horizon = 0;
    for it in log {
        horizon = horizon.max(it.day + 1);
        by_user
            .get_mut(&it.user)
            .ok_or_else(|| DataError::Invalid(format!("interaction for user {} without context", it.user)))?
            .interactions
            .push(it);
    }
    for seq in by_user.values_mut() {
        seq.interactions.sort_by_key(|i| i.timestamp);
    }

    let dataset = Dataset {
        schema,
        catalog,
        sequences: by_user.into_values().collect(),
        horizon_days: horizon,
    };
    dataset.validate()?;
    Ok(dataset)
}
