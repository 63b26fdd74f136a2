//! The thinned posterior draw archive and its on-disk format: a directory
//! with `meta.json`, one little-endian `f64` array per parameter block
//! (row-major, draw-major), and `trees.jsonl` with one JSON line per draw.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::ensemble::SweepStats;
use crate::error::{Error, Result};
use crate::tree::{FlatTree, SoftTree};
use crate::util::RowMatrix;

/// Run metadata echoed into `meta.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoreMeta {
    pub seed: u64,
    pub stream_id: u64,
    pub burnin: usize,
    pub samples: usize,
    pub thin: usize,
    pub total_iterations: usize,
    pub n_rows: usize,
    pub region_ids: Vec<String>,
    pub confounder_names: Vec<String>,
    pub exposure_names: Vec<String>,
    pub config: RunConfig,
    pub block_sequence: Vec<String>,
    pub sweep_stats: SweepStats,
}

/// In-memory posterior archive.
#[derive(Debug, Clone)]
pub struct PosteriorStore {
    pub meta: StoreMeta,
    pub beta: RowMatrix,
    pub nu: RowMatrix,
    pub tau2: Vec<f64>,
    pub rho: Vec<f64>,
    pub xi: Vec<f64>,
    pub split_probs: RowMatrix,
    pub trees: Vec<Vec<FlatTree>>,
}

impl PosteriorStore {
    pub fn draw_count(&self) -> usize {
        self.tau2.len()
    }

    /// Decodes the tree ensemble of one draw.
    pub fn decode_trees(&self, draw: usize) -> Result<Vec<SoftTree>> {
        self.trees[draw].iter().map(SoftTree::from_flat).collect()
    }

    /// Decodes every draw's ensemble.
    pub fn decode_all_trees(&self) -> Result<Vec<Vec<SoftTree>>> {
        (0..self.draw_count()).map(|m| self.decode_trees(m)).collect()
    }

    pub fn persist(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = serde_json::to_vec_pretty(&self.meta)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        std::fs::write(dir.join("meta.json"), meta)?;
        write_f64_array(&dir.join("beta.bin"), row_major(&self.beta))?;
        write_f64_array(&dir.join("nu.bin"), row_major(&self.nu))?;
        write_f64_array(&dir.join("tau2.bin"), &self.tau2)?;
        write_f64_array(&dir.join("rho.bin"), &self.rho)?;
        write_f64_array(&dir.join("xi.bin"), &self.xi)?;
        write_f64_array(&dir.join("split_probs.bin"), row_major(&self.split_probs))?;

        let mut trees = BufWriter::new(File::create(dir.join("trees.jsonl"))?);
        for draw in &self.trees {
            let line =
                serde_json::to_string(draw).map_err(|e| Error::Io(std::io::Error::other(e)))?;
            trees.write_all(line.as_bytes())?;
            trees.write_all(b"\n")?;
        }
        trees.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_text = std::fs::read_to_string(dir.join("meta.json"))
            .map_err(|e| Error::Data(format!("cannot read meta.json: {e}")))?;
        let meta: StoreMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::Data(format!("bad meta.json: {e}")))?;
        let m = meta.samples;
        let p = meta.confounder_names.len();
        let i = meta.region_ids.len();
        let q = meta.exposure_names.len();

        let beta = read_matrix(&dir.join("beta.bin"), m, p)?;
        let nu = read_matrix(&dir.join("nu.bin"), m, i)?;
        let tau2 = read_f64_array(&dir.join("tau2.bin"), m)?;
        let rho = read_f64_array(&dir.join("rho.bin"), m)?;
        let xi = read_f64_array(&dir.join("xi.bin"), m)?;
        let split_probs = read_matrix(&dir.join("split_probs.bin"), m, q)?;

        let trees_file = BufReader::new(
            File::open(dir.join("trees.jsonl"))
                .map_err(|e| Error::Data(format!("cannot open trees.jsonl: {e}")))?,
        );
        let mut trees = Vec::with_capacity(m);
        for line in trees_file.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let draw: Vec<FlatTree> = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("bad trees.jsonl line: {e}")))?;
            trees.push(draw);
        }
        if trees.len() != m {
            return Err(Error::Data(format!(
                "trees.jsonl holds {} draws, meta says {m}",
                trees.len()
            )));
        }
        Ok(Self {
            meta,
            beta,
            nu,
            tau2,
            rho,
            xi,
            split_probs,
            trees,
        })
    }
}

fn row_major(m: &RowMatrix) -> &[f64] {
    m.as_slice()
}

fn write_f64_array(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f64_array(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() != expect * 8 {
        return Err(Error::Data(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expect * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<RowMatrix> {
    let flat = read_f64_array(path, rows * cols)?;
    let mut m = RowMatrix::zeros(rows, cols);
    for r in 0..rows {
        m.row_mut(r).copy_from_slice(&flat[r * cols..(r + 1) * cols]);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::tree::FlatNode;

    fn toy_store() -> PosteriorStore {
        let meta = StoreMeta {
            seed: 9,
            stream_id: 0,
            burnin: 2,
            samples: 2,
            thin: 1,
            total_iterations: 4,
            n_rows: 3,
            region_ids: vec!["A".into(), "B".into()],
            confounder_names: vec!["x1".into()],
            exposure_names: vec!["z1".into(), "z2".into()],
            config: RunConfig::default(),
            block_sequence: vec!["pg".into(), "beta".into()],
            sweep_stats: SweepStats::default(),
        };
        PosteriorStore {
            meta,
            beta: RowMatrix::from_rows(&[vec![0.1], vec![0.2]]),
            nu: RowMatrix::from_rows(&[vec![0.5, -0.5], vec![0.25, -0.25]]),
            tau2: vec![1.0, 1.1],
            rho: vec![0.5, 0.9],
            xi: vec![1.0, 1.05],
            split_probs: RowMatrix::from_rows(&[vec![0.5, 0.5], vec![0.4, 0.6]]),
            trees: vec![
                vec![FlatTree {
                    bandwidth: 0.1,
                    nodes: vec![
                        FlatNode(0, 1, 0.3, 0.0),
                        FlatNode(1, 0, 0.0, -0.2),
                        FlatNode(1, 0, 0.0, 0.4),
                    ],
                }],
                vec![FlatTree {
                    bandwidth: 0.2,
                    nodes: vec![FlatNode(1, 0, 0.0, 0.7)],
                }],
            ],
        }
    }

    #[test]
    fn persist_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = toy_store();
        store.persist(dir.path()).unwrap();
        let loaded = PosteriorStore::load(dir.path()).unwrap();
        assert_eq!(store.meta, loaded.meta);
        assert_eq!(store.beta, loaded.beta);
        assert_eq!(store.nu, loaded.nu);
        assert_eq!(store.tau2, loaded.tau2);
        assert_eq!(store.trees, loaded.trees);
        let trees = loaded.decode_trees(0).unwrap();
        assert_eq!(trees[0].leaf_count(), 2);
    }

    #[test]
    fn reperisted_bytes_are_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let store = toy_store();
        store.persist(dir1.path()).unwrap();
        PosteriorStore::load(dir1.path())
            .unwrap()
            .persist(dir2.path())
            .unwrap();
        for name in [
            "meta.json",
            "beta.bin",
            "nu.bin",
            "tau2.bin",
            "rho.bin",
            "xi.bin",
            "split_probs.bin",
            "trees.jsonl",
        ] {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn truncated_array_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = toy_store();
        store.persist(dir.path()).unwrap();
        let path = dir.path().join("xi.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..8]).unwrap();
        assert!(PosteriorStore::load(dir.path()).is_err());
    }
}
