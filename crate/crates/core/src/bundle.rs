//! Single-file model bundles.
//!
//! Layout: the 8-byte magic `PWKRIG01`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then a flat little-endian `f64` payload.
//! The header lists every payload array with its name, shape and offset.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::HyperParams;
use crate::model::{Factorization, FitTimings, Partitioned, PatchworkModel, RegionCross, RegionData};
use crate::partition::{BoundarySet, SpatialTree};
use crate::points::Points;
use crate::sparse_linalg::{BlockCholesky, EnvelopeCholesky, Permutation, SparseCholesky, SymSparse};

const MAGIC: &[u8; 8] = b"PWKRIG01";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct RegionHeader {
    id: usize,
    indices: Vec<usize>,
    columns: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SparseHeader {
    permutation: Vec<usize>,
    first: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    mean_offset: f64,
    hyperparams: HyperParams,
    tree: SpatialTree,
    boundaries: BoundarySet,
    regions: Vec<RegionHeader>,
    jitter: f64,
    logdet_data: f64,
    logdet_schur: f64,
    quadratic: f64,
    timings: FitTimings,
    schur_pattern: Vec<(usize, usize)>,
    schur: Option<SparseHeader>,
    delta: Option<SparseHeader>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Default)]
struct Payload {
    data: Vec<f64>,
    arrays: Vec<ArrayEntry>,
}

impl Payload {
    fn push<I: IntoIterator<Item = f64>>(&mut self, name: String, rows: usize, cols: usize, values: I) {
        let offset = self.data.len();
        self.data.extend(values);
        debug_assert_eq!(self.data.len() - offset, rows * cols);
        self.arrays.push(ArrayEntry { name, rows, cols, offset });
    }

    fn push_matrix(&mut self, name: String, m: &DMatrix<f64>) {
        // row-major
        self.push(name, m.nrows(), m.ncols(), (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()));
    }
}

struct Arrays<'a> {
    data: &'a [f64],
    table: &'a [ArrayEntry],
}

impl Arrays<'_> {
    fn get(&self, name: &str) -> Result<(&[f64], usize, usize)> {
        let e = self
            .table
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Bundle(format!("missing array `{name}`")))?;
        let end = e.offset + e.rows * e.cols;
        if end > self.data.len() {
            return Err(Error::Bundle(format!("array `{name}` runs past the payload")));
        }
        Ok((&self.data[e.offset..end], e.rows, e.cols))
    }

    fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let (v, r, c) = self.get(name)?;
        Ok(DMatrix::from_row_slice(r, c, v))
    }

    fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.0.to_vec())
    }
}

fn sparse_header(f: &SparseCholesky) -> SparseHeader {
    SparseHeader {
        permutation: f.permutation().forward().to_vec(),
        first: f.envelope().first().to_vec(),
    }
}

fn sparse_from(h: SparseHeader, values: &[f64]) -> Result<SparseCholesky> {
    SparseCholesky::from_parts(Permutation::new(h.permutation)?, EnvelopeCholesky::from_parts(h.first, values)?)
}

impl PatchworkModel {
    /// Writes the model as a bundle. Identical models give identical bytes.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let fact = &self.fact;
        let mut payload = Payload::default();
        let mut regions = Vec::new();
        for r in &self.part.regions {
            let k = r.id;
            let m = r.inputs.len();
            payload.push(format!("inputs/{k}"), m, r.inputs.dim(), r.inputs.as_flat().iter().copied());
            payload.push(format!("responses/{k}"), m, 1, r.responses.iter().copied());
            let l = fact.blocks.block(k).l_dirty();
            payload.push(format!("chol/{k}"), m * (m + 1) / 2, 1, (0..m).flat_map(|i| (0..=i).map(move |j| l[(i, j)])));
            payload.push_matrix(format!("cross/{k}"), &fact.cross[k].block);
            payload.push_matrix(format!("whitened/{k}"), &fact.whitened[k]);
            payload.push(format!("alpha/{k}"), m, 1, fact.alpha[k].iter().copied());
            regions.push(RegionHeader {
                id: k,
                indices: r.indices.clone(),
                columns: fact.cross[k].columns.clone(),
            });
        }
        payload.push("gamma".into(), fact.gamma.len(), 1, fact.gamma.iter().copied());
        payload.push("eta".into(), self.eta.len(), 1, self.eta.iter().copied());
        let schur_entries: Vec<(usize, usize, f64)> = fact.schur_matrix.iter().collect();
        payload.push("schur_values".into(), schur_entries.len(), 1, schur_entries.iter().map(|e| e.2));
        if let Some(s) = &fact.schur {
            payload.push("schur_factor".into(), s.envelope().stored(), 1, s.envelope().flat_values());
        }
        if let Some(d) = &self.delta_chol {
            payload.push("delta_factor".into(), d.envelope().stored(), 1, d.envelope().flat_values());
        }

        let header = Header {
            version: FORMAT_VERSION,
            mean_offset: self.part.mean_offset,
            hyperparams: self.hyper.clone(),
            tree: self.part.tree.clone(),
            boundaries: self.part.boundaries.clone(),
            regions,
            jitter: fact.jitter,
            logdet_data: fact.logdet_data,
            logdet_schur: fact.logdet_schur,
            quadratic: fact.quadratic,
            timings: FitTimings::default(),
            schur_pattern: schur_entries.iter().map(|e| (e.0, e.1)).collect(),
            schur: fact.schur.as_ref().map(sparse_header),
            delta: self.delta_chol.as_ref().map(sparse_header),
            arrays: payload.arrays,
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        let mut bytes = Vec::with_capacity(payload.data.len() * 8);
        for v in &payload.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
        out.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Bundle("not a model bundle (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| Error::Bundle("header too large".into()))?;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Bundle(format!("unsupported bundle version {}", header.version)));
        }
        let mut raw = Vec::new();
        input.read_to_end(&mut raw)?;
        if raw.len() % 8 != 0 {
            return Err(Error::Bundle("payload is not a whole number of float64 values".into()));
        }
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let arrays = Arrays {
            data: &data,
            table: &header.arrays,
        };

        let dim = header.tree.dim();
        let mut regions = Vec::new();
        let mut factors = Vec::new();
        let mut cross = Vec::new();
        let mut whitened = Vec::new();
        let mut alpha = Vec::new();
        for (pos, r) in header.regions.into_iter().enumerate() {
            let k = r.id;
            if k != pos {
                return Err(Error::Bundle("regions are out of order".into()));
            }
            let inputs = Points::new(dim, arrays.vector(&format!("inputs/{k}"))?)?;
            let m = inputs.len();
            let packed = arrays.vector(&format!("chol/{k}"))?;
            if packed.len() != m * (m + 1) / 2 {
                return Err(Error::Bundle(format!("factor of region {k} has the wrong size")));
            }
            let mut l = DMatrix::zeros(m, m);
            let mut at = 0;
            for i in 0..m {
                for j in 0..=i {
                    l[(i, j)] = packed[at];
                    at += 1;
                }
            }
            factors.push(Cholesky::pack_dirty(l));
            cross.push(RegionCross {
                columns: r.columns,
                block: arrays.matrix(&format!("cross/{k}"))?,
            });
            whitened.push(arrays.matrix(&format!("whitened/{k}"))?);
            alpha.push(DVector::from_vec(arrays.vector(&format!("alpha/{k}"))?));
            regions.push(RegionData {
                id: k,
                indices: r.indices,
                inputs,
                responses: arrays.vector(&format!("responses/{k}"))?,
            });
        }
        let part = Partitioned::with_regions(header.tree, header.boundaries, regions, header.mean_offset)?;
        header.hyperparams.validate(part.n_regions())?;

        let schur_values = arrays.vector("schur_values")?;
        if schur_values.len() != header.schur_pattern.len() {
            return Err(Error::Bundle("Schur pattern and values differ in length".into()));
        }
        let schur_matrix = SymSparse::from_triplets(
            part.n_delta(),
            header.schur_pattern.iter().zip(&schur_values).map(|(&(i, j), &v)| (i, j, v)),
        )?;
        let schur = header.schur.map(|h| sparse_from(h, &arrays.vector("schur_factor")?)).transpose()?;
        let delta_chol = header.delta.map(|h| sparse_from(h, &arrays.vector("delta_factor")?)).transpose()?;

        let fact = Factorization {
            blocks: BlockCholesky::from_factors(factors),
            cross,
            whitened,
            schur_matrix,
            schur,
            jitter: header.jitter,
            alpha,
            gamma: arrays.vector("gamma")?,
            logdet_data: header.logdet_data,
            logdet_schur: header.logdet_schur,
            quadratic: header.quadratic,
        };
        Ok(PatchworkModel {
            part,
            hyper: header.hyperparams,
            fact,
            delta_chol,
            eta: arrays.vector("eta")?,
            timings: header.timings,
        })
    }

    pub fn save_to_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.save(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load_from_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::load(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sha2::{Digest, Sha256};

    fn fitted(seed: u64) -> PatchworkModel {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Points::new(2, (0..240).map(|_| rng.random_range(0.0..5.0)).collect()).unwrap();
        let y: Vec<f64> = x.rows().map(|r| r[0].sin() + r[1].cos()).collect();
        let hyper = HyperParams::Shared(KernelSpec::exponential(1.0, 1.0, 0.1).unwrap());
        PatchworkModel::fit(&x, &y, 4, 3, &hyper, seed).unwrap()
    }

    fn bytes(m: &PatchworkModel) -> Vec<u8> {
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let model = fitted(1);
        let buf = bytes(&model);
        let loaded = PatchworkModel::load(buf.as_slice()).unwrap();
        for p in [[0.3, 0.3], [2.5, 2.5], [4.9, 1.0]] {
            let k = model.tree().route(&p).unwrap();
            assert_eq!(model.predict(&p).unwrap(), loaded.predict(&p).unwrap());
            assert_eq!(model.predict_in_region_direct(&p, k).unwrap(), loaded.predict_in_region_direct(&p, k).unwrap());
        }
        assert_eq!(bytes(&loaded), buf);
    }

    #[test]
    fn refits_hash_identically() {
        let a = Sha256::digest(bytes(&fitted(5)));
        let b = Sha256::digest(bytes(&fitted(5)));
        let c = Sha256::digest(bytes(&fitted(6)));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(PatchworkModel::load(&b"NOTABUNDLE......"[..]), Err(Error::Bundle(_))));
        let mut buf = bytes(&fitted(1));
        buf.truncate(buf.len() - 4);
        assert!(PatchworkModel::load(buf.as_slice()).is_err());
    }

    #[test]
    fn path_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pwk");
        let model = fitted(2);
        model.save_to_path(&path).unwrap();
        let loaded = PatchworkModel::load_from_path(&path).unwrap();
        assert_eq!(loaded.predict(&[1.0, 1.0]).unwrap(), model.predict(&[1.0, 1.0]).unwrap());
    }
}
