#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cloudfcn::raster::{write_raster, BandId, Raster};
use cloudfcn::synthetic::SyntheticScene;
use tempfile::TempDir;

pub const QA_SECTION: &str = r#"
[qa]
cloud = [{ bit = 4, set = true }]
snow = [{ bit = 9, set = true }, { bit = 10, set = true }]
"#;

/// Small network and patches so training runs in seconds.
pub const TINY: &str = r#"
[network]
input_size = 32
base_channels = 2
channel_cap = 8

[patch]
native = 32
"#;

pub struct Workspace {
    pub dir: TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("scenes")).unwrap();
        Self { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn scene_dir(&self, id: &str) -> PathBuf {
        self.path().join("scenes").join(id)
    }

    pub fn work(&self) -> PathBuf {
        self.path().join("work")
    }

    pub fn add_scene(&self, id: &str, s: &SyntheticScene) {
        let dir = self.scene_dir(id);
        fs::create_dir_all(&dir).unwrap();
        for b in &s.bands {
            write_raster(b, dir.join(format!("{}.csr", b.band()))).unwrap();
        }
        let qa = Raster::new(s.qa.width(), s.qa.height(), s.qa.words().to_vec(), BandId::Qa).unwrap();
        write_raster(&qa, dir.join("QA.csr")).unwrap();
    }

    /// Writes `config.toml` with the given seed, the standard QA bits and
    /// `extra` sections.
    pub fn config(&self, seed: u64, extra: &str) -> PathBuf {
        let text = format!("seed = {seed}\n\n[paths]\nscenes = \"scenes\"\nwork = \"work\"\n{QA_SECTION}{extra}");
        let path = self.path().join("config.toml");
        fs::write(&path, text).unwrap();
        path
    }

    pub fn run(&self, cmd: &str, extra_args: &[&str]) -> Output {
        let config = self.path().join("config.toml");
        let out = Command::new(env!("CARGO_BIN_EXE_cloudfcn"))
            .arg(cmd)
            .arg("--config")
            .arg(&config)
            .args(extra_args)
            .output()
            .unwrap();
        out
    }

    pub fn run_ok(&self, cmd: &str, extra_args: &[&str]) -> Output {
        let out = self.run(cmd, extra_args);
        assert_eq!(out.status.code(), Some(0), "{cmd} failed: {}", String::from_utf8_lossy(&out.stderr));
        out
    }

    pub fn read(&self, rel: &str) -> Vec<u8> {
        fs::read(self.work().join(rel)).unwrap_or_else(|e| panic!("reading {rel}: {e}"))
    }

    pub fn read_text(&self, rel: &str) -> String {
        String::from_utf8(self.read(rel)).unwrap()
    }
}
