#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use bdirank::config::PipelineConfig;

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

pub fn demo_dir() -> PathBuf {
    data_dir().join("demo")
}

pub fn golden_dir() -> PathBuf {
    data_dir().join("golden")
}

/// The demo config with its output redirected to `out` and the given worker count.
pub fn demo_config(out: &Path, workers: usize) -> PipelineConfig {
    let path = demo_dir().join("demo.toml");
    let text = fs::read_to_string(&path).unwrap();
    let mut cfg = PipelineConfig::parse(&text, "demo.toml").unwrap();
    cfg.resolve(&demo_dir());
    cfg.paths.output_dir = out.to_path_buf();
    cfg.run.workers = workers;
    cfg.validate().unwrap();
    cfg
}

/// Writes the first `n` `<DOC>` blocks of the demo corpus to `dest`.
pub fn demo_corpus_prefix(dest: &Path, n: usize) {
    let text = fs::read_to_string(demo_dir().join("corpus.trec")).unwrap();
    let blocks: Vec<&str> = text.split_inclusive("</DOC>\n").take(n).collect();
    assert_eq!(blocks.len(), n);
    fs::write(dest, blocks.concat()).unwrap();
}
