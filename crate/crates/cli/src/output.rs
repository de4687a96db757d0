//! CSV files: one `#` metadata line, one header line, data rows, LF endings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Shortest round-trip scientific notation.
pub fn num(x: f64) -> String {
    format!("{x:e}")
}

fn list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";")
}

/// Everything needed to regenerate a file. The thread count is not recorded:
/// output is identical for any thread count.
pub fn metadata_line(cfg: &ExperimentConfig, extra: &[(&str, String)]) -> String {
    let p = &cfg.params;
    let mut line = format!(
        "# cirsim {} command={} preset={} alpha={} mu={} sigma={} x0={} theta={}",
        env!("CARGO_PKG_VERSION"),
        cfg.command.name(),
        cfg.preset,
        p.alpha(),
        p.mu(),
        p.sigma(),
        p.x0(),
        list(&cfg.theta_list),
    );
    for (k, v) in extra {
        let _ = write!(line, " {k}={v}");
    }
    line
}

pub fn ladder_meta(cfg: &ExperimentConfig) -> (&'static str, String) {
    ("dt_ladder", list(&cfg.dt_ladder))
}

#[derive(Debug, Clone)]
pub struct CsvTable {
    pub metadata: String,
    pub header: &'static str,
    pub rows: Vec<String>,
    pub footer: Option<String>,
}

impl CsvTable {
    pub fn new(metadata: String, header: &'static str) -> Self {
        Self {
            metadata,
            header,
            rows: Vec::new(),
            footer: None,
        }
    }

    pub fn push(&mut self, fields: &[String]) {
        self.rows.push(fields.join(","));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.metadata);
        out.push('\n');
        out.push_str(self.header);
        out.push('\n');
        for r in &self.rows {
            out.push_str(r);
            out.push('\n');
        }
        if let Some(f) = &self.footer {
            out.push_str(f);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<PathBuf, CliError> {
        write_file(dir, name, &self.render())
    }
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}
