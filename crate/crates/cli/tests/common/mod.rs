#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NUM_CLASSES: usize = 5;
pub const EMBED_DIM: usize = 16;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub annotations: PathBuf,
    pub embeddings: PathBuf,
    pub errors: PathBuf,
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

/// Synthetic COCO set with `images` images of 320x240, 1 to 6 boxes each,
/// random unit embeddings and an ordered detection-error stream.
pub fn synthetic(images: usize, seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut imgs = Vec::new();
    let mut anns = Vec::new();
    let mut emb = String::new();
    let mut ann_id = 100u64;
    for i in 0..images as u64 {
        let image_id = i + 1;
        imgs.push(format!(r#"{{"id": {image_id}, "width": 320, "height": 240, "file_name": "{image_id}.png"}}"#));
        for _ in 0..rng.random_range(1..=6) {
            // skew towards low class ids so frequency tiers differ
            let cat = (rng.random::<f64>().powi(2) * NUM_CLASSES as f64) as u64 + 1;
            let w = rng.random_range(4.0..150.0f64).round();
            let h = rng.random_range(4.0..120.0f64).round();
            let x = rng.random_range(0.0..320.0 - w).round();
            let y = rng.random_range(0.0..240.0 - h).round();
            anns.push(format!(
                r#"{{"id": {ann_id}, "image_id": {image_id}, "category_id": {cat}, "bbox": [{x}, {y}, {w}, {h}]}}"#
            ));
            let v: Vec<String> = (0..EMBED_DIM).map(|_| format!("{}", rng.random_range(-1.0..1.0f64))).collect();
            writeln!(emb, r#"{{"instance_id": {ann_id}, "embedding": [{}]}}"#, v.join(", ")).unwrap();
            ann_id += 1;
        }
    }
    let cats: Vec<String> = (1..=NUM_CLASSES)
        .map(|c| format!(r#"{{"id": {c}, "name": "class{c}"}}"#))
        .collect();
    let coco = format!(
        "{{\"images\": [{}], \"annotations\": [{}], \"categories\": [{}]}}",
        imgs.join(",\n"),
        anns.join(",\n"),
        cats.join(",\n")
    );
    let mut errors = String::new();
    for step in 0..200u64 {
        writeln!(
            errors,
            r#"{{"class_id": {}, "size_bin": {}, "pos_bin": {}, "loss": {}, "step": {}}}"#,
            rng.random_range(0..NUM_CLASSES),
            rng.random_range(0..3),
            rng.random_range(0..3),
            rng.random_range(0.0..2.0f64),
            step / 2
        )
        .unwrap();
    }
    let annotations = dir.path().join("annotations.json");
    let embeddings = dir.path().join("embeddings.jsonl");
    let err_path = dir.path().join("errors.jsonl");
    std::fs::write(&annotations, coco).unwrap();
    std::fs::write(&embeddings, emb).unwrap();
    std::fs::write(&err_path, errors).unwrap();
    Fixture {
        dir,
        annotations,
        embeddings,
        errors: err_path,
    }
}

pub fn run(args: &[&str]) -> i32 {
    let mut full = vec!["debias"];
    full.extend_from_slice(args);
    debias_cli::main_with_args(full)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// sha256 of every file under `dir`, keyed by relative path.
pub fn tree_digests(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, debias_core::digest::sha256_hex(&std::fs::read(&p).unwrap())));
            }
        }
    }
    out.sort();
    out
}
