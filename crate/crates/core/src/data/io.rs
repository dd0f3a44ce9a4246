//! Line-delimited dataset files.
//!
//! Line 1 is a header object `{"format":"mtfm-dataset","version":1,"schema":{...}}`.
//! Every following line is one `UserSample` object with keys `user_id`,
//! `hist`, `rt` and `exposures`. Sequences are `{"seq_id":..,"events":[{"f":[ids],"t":ts}]}`;
//! exposures are `{"s":scenario,"u":[..],"c":[..],"i":[..],"t":ts,"y":{"task":0|1}}`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::schema::{Dataset, DatasetSchema, UserSample};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "mtfm-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    schema: DatasetSchema,
}

pub fn serialize_dataset(d: &Dataset) -> Result<String> {
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        schema: d.schema.clone(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for s in &d.samples {
        writeln!(out, "{}", serde_json::to_string(s)?).expect("writing to a String");
    }
    Ok(out)
}

pub fn deserialize_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
    let header: Header =
        serde_json::from_str(first).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported format {} v{}", header.format, header.version),
        });
    }
    header.schema.validate().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    let mut samples = Vec::new();
    for (line, text) in lines {
        if text.is_empty() {
            continue;
        }
        let s: UserSample =
            serde_json::from_str(text).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        s.validate(&header.schema, true).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        samples.push(s);
    }
    Ok(Dataset { schema: header.schema, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generator::{generate_dataset, GeneratorConfig};

    fn small() -> Dataset {
        generate_dataset(&GeneratorConfig { n_users: 4, ..Default::default() }, 11).unwrap()
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let d = Dataset { samples: vec![], ..small() };
        let text = serialize_dataset(&d).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(deserialize_dataset(&text).unwrap(), d);
    }

    #[test]
    fn truncated_final_line_reports_its_number() {
        let text = serialize_dataset(&small()).unwrap();
        let cut = &text[..text.trim_end().len() - 7];
        match deserialize_dataset(cut) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn funnel_violation_is_rejected_on_ingestion() {
        let mut d = small();
        let e = &mut d.samples[0].exposures[0];
        e.labels.insert("ctr".into(), 0);
        e.labels.insert("ctcvr".into(), 1);
        let text = serialize_dataset(&d).unwrap();
        assert!(matches!(deserialize_dataset(&text), Err(Error::Parse { line: 2, .. })));
    }
}
