use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

/// Run description written next to the outputs as `<command>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub version: String,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    /// Output files, relative to the output directory.
    pub outputs: Vec<String>,
}

/// Output directory that writes every file atomically and records it.
pub struct OutputDir {
    dir: PathBuf,
    manifest: RunManifest,
    clock: Instant,
}

impl OutputDir {
    pub fn create(dir: &Path, command: &str, config: Value, seed: Option<u64>) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                config,
                seed,
                version: treemix::VERSION.into(),
                timings: BTreeMap::new(),
                outputs: Vec::new(),
            },
            clock: Instant::now(),
        })
    }

    pub fn manifest_name(&self) -> String {
        format!("{}.manifest.json", self.manifest.command)
    }

    /// Records the time since the previous mark under `phase`.
    pub fn mark(&mut self, phase: &str) {
        let elapsed = self.clock.elapsed().as_secs_f64();
        log::info!("{phase}: {elapsed:.3} s");
        self.manifest.timings.insert(phase.into(), elapsed);
        self.clock = Instant::now();
    }

    /// Writes `name` through a temporary file in the same directory.
    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut dyn Write) -> Result<()>,
    {
        let path = self.dir.join(name);
        let tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        {
            let mut w = BufWriter::new(tmp.as_file());
            f(&mut w)?;
            w.flush()?;
        }
        tmp.persist(&path).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.push(name.into());
        Ok(path)
    }

    /// Pretty JSON with a `manifest` field pointing back at the run manifest.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<Value> {
        let mut v = serde_json::to_value(value)?;
        if let Value::Object(map) = &mut v {
            map.insert("manifest".into(), Value::String(self.manifest_name()));
        }
        let text = serde_json::to_string_pretty(&v)?;
        self.write_with(name, |w| {
            writeln!(w, "{text}")?;
            Ok(())
        })?;
        Ok(v)
    }

    pub fn finish(mut self) -> Result<()> {
        let name = self.manifest_name();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        self.write_with(&name, |w| {
            writeln!(w, "{text}")?;
            Ok(())
        })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn files_and_manifest_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path(), "build", serde_json::json!({"k": 1}), None).unwrap();
        out.write_with("a.csv", |w| {
            writeln!(w, "x")?;
            Ok(())
        })
        .unwrap();
        let v = out.write_json("b.json", &serde_json::json!({"y": 2})).unwrap();
        assert_eq!(v["manifest"], "build.manifest.json");
        out.mark("all");
        out.finish().unwrap();
        let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("build.manifest.json")).unwrap()).unwrap();
        assert_eq!(m["outputs"], serde_json::json!(["a.csv", "b.json"]));
        assert_eq!(m["command"], "build");
        assert_eq!(fs::read_to_string(dir.path().join("a.csv")).unwrap(), "x\n");
        // Only the three outputs, no stray temporaries.
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 3);
    }
}
