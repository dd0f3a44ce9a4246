//! Checkpoint files: JSON lines, one header followed by one line per
//! parameter.
//!
//! ```text
//! {"format":"mtfm-checkpoint","version":1,"precision":"f32","adam_steps":2000,"model":{...},"schema":{...}}
//! {"name":"tok.hist0.emb0","owner":null,"shape":[400,16],"values":[...]}
//! ```
//!
//! Values are written with shortest round-trip formatting, so loading a
//! checkpoint at the precision it was saved with reproduces every parameter
//! bit for bit. Optimizer moments are not stored; `adam_steps` is recorded
//! for reference only.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSchema;
use crate::engine::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::ScenarioId;

pub const FORMAT: &str = "mtfm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    precision: String,
    adam_steps: u64,
    model: ModelConfig,
    schema: DatasetSchema,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry<T> {
    name: String,
    owner: Option<ScenarioId>,
    shape: [usize; 2],
    values: Vec<T>,
}

pub fn save<T: Real, W: Write>(model: &Model<T>, mut out: W) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        precision: T::NAME.into(),
        adam_steps: model.store.adam_steps(),
        model: model.cfg.clone(),
        schema: model.schema.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (_, p) in model.store.iter() {
        let entry = Entry { name: p.name.clone(), owner: p.owner, shape: p.value.shape(), values: p.value.data().to_vec() };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a checkpoint saved at precision `T`; a precision mismatch is an error.
pub fn load<T: Real, R: Read>(input: R) -> Result<Model<T>> {
    let mut lines = BufReader::new(input).lines();
    let parse_err = |line: usize, msg: String| Error::Parse { line, msg };
    let first = lines.next().ok_or_else(|| parse_err(1, "empty checkpoint".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(parse_err(1, format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    if header.precision != T::NAME {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameters, {} requested",
            header.precision,
            T::NAME
        )));
    }
    let mut store = ParamStore::<T>::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: Entry<T> = serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
        let value = Tensor::from_vec(entry.shape[0], entry.shape[1], entry.values)
            .map_err(|e| parse_err(i + 2, e.to_string()))?;
        store.register(entry.name, entry.owner, value)?;
    }
    Model::from_store(header.model, header.schema, store)
}

pub fn save_file<T: Real>(model: &Model<T>, path: &std::path::Path) -> Result<()> {
    save(model, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_file<T: Real>(path: &std::path::Path) -> Result<Model<T>> {
    load(std::fs::File::open(path)?)
}

/// Precision recorded in a checkpoint header.
pub fn peek_precision(path: &std::path::Path) -> Result<String> {
    let mut first = String::new();
    BufReader::new(std::fs::File::open(path)?).read_line(&mut first)?;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    Ok(header.precision)
}
