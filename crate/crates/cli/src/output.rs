use std::fs;
use std::path::{Path, PathBuf};

use saliency::Image;
use serde::Serialize;
use serde_json::{json, Value};

use crate::CliError;

/// Collects written files, relative to the output directory, in write order.
pub struct Writer {
    dir: PathBuf,
    written: Vec<String>,
}

impl Writer {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Writer {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn image(&mut self, name: &str, image: &Image) -> Result<(), CliError> {
        saliency::write_image(image, self.dir.join(name))?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Raw little-endian `f32` values plus a JSON sidecar describing them.
    pub fn raw(&mut self, stem: &str, values: &[f64], shape: &[usize], meta: Value) -> Result<(), CliError> {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for &v in values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let data = format!("{stem}.f32");
        fs::write(self.dir.join(&data), bytes)?;
        let mut sidecar = json!({ "data": data, "dtype": "f32", "shape": shape });
        if let (Value::Object(dst), Value::Object(src)) = (&mut sidecar, meta) {
            dst.extend(src);
        }
        self.json(&format!("{stem}.json"), &sidecar)?;
        self.written.push(data);
        Ok(())
    }

    pub fn json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        fs::write(self.dir.join(name), text)?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Writes `run.json` listing the configuration and every file written so far.
    pub fn finish(mut self, mut manifest: Value) -> Result<(), CliError> {
        let outputs = std::mem::take(&mut self.written);
        if let Value::Object(map) = &mut manifest {
            map.insert("outputs".into(), json!(outputs));
        }
        self.json("run.json", &manifest)
    }
}

pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}
