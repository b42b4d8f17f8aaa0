//! Trace and report documents. Output is pretty JSON with a fixed field order
//! and no timestamps, so identical inputs give identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attributes::AttributeImportance;
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, TraceMetrics};
use crate::search::{EditTrace, SearchConfig};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDocument {
    pub schema_version: u32,
    pub trace: EditTrace,
    pub config: SearchConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<TraceMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<AttributeImportance>>,
}

impl TraceDocument {
    pub fn new(trace: EditTrace, config: SearchConfig) -> Self {
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            trace,
            config,
            metrics: None,
            attributes: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace document serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let json_err = |source| Error::Json {
            path: origin.to_path_buf(),
            source,
        };
        let value: serde_json::Value = serde_json::from_str(text).map_err(json_err)?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(TRACE_SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::SchemaVersion {
                    found: u32::try_from(v).unwrap_or(u32::MAX),
                    supported: TRACE_SCHEMA_VERSION,
                })
            }
            None => return Err(Error::Invalid(format!("`{}` lacks schema_version", origin.display()))),
        }
        serde_json::from_value(value).map_err(json_err)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_trace(doc: &TraceDocument, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &doc.to_json())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<TraceDocument> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TraceDocument::from_json(&text, path)
}

pub fn save_report(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &crate::metrics::render_report(report))
}
