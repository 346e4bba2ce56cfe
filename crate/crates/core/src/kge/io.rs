use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EmbeddingTable, NormKind};
use crate::error::{Error, Result};
use crate::graph::Fkg;
use crate::numeric::Tensor;

const MAGIC: &[u8; 8] = b"KGEMB\0\0\x01";

/// A table together with the external keys of its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct KgeArtifact {
    pub table: EmbeddingTable,
    pub entity_keys: Vec<String>,
    pub relation_names: Vec<String>,
}

impl KgeArtifact {
    pub fn from_fkg(table: EmbeddingTable, fkg: &Fkg) -> Self {
        Self {
            table,
            entity_keys: fkg.entities().iter().map(|e| e.key.clone()).collect(),
            relation_names: fkg.relations().to_vec(),
        }
    }

    /// Company rows looked up by key, in company-index order.
    pub fn company_embeddings(&self, fkg: &Fkg) -> Result<Tensor> {
        let index: std::collections::HashMap<&str, usize> = self
            .entity_keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.as_str(), i))
            .collect();
        let mut out = Tensor::zeros(fkg.company_count(), self.table.dim());
        for (i, c) in fkg.companies().iter().enumerate() {
            let key = &fkg.entity(c.entity).key;
            let row = *index
                .get(key.as_str())
                .ok_or_else(|| Error::Reference(format!("no embedding for `{key}`")))?;
            out.row_mut(i).copy_from_slice(self.table.entities.row(row));
        }
        Ok(out)
    }
}

/// Writes the binary table and its TSV key index.
pub fn save_embeddings(artifact: &KgeArtifact, table_path: &Path, index_path: &Path) -> Result<()> {
    let t = &artifact.table;
    let mut w = BufWriter::new(File::create(table_path)?);
    w.write_all(MAGIC)?;
    for v in [t.dim(), t.entities.rows(), t.relations.rows()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    let norm: u64 = match t.norm {
        NormKind::L1 => 1,
        NormKind::L2 => 2,
    };
    w.write_all(&norm.to_le_bytes())?;
    for x in t.entities.data().iter().chain(t.relations.data()) {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(index_path)?);
    writeln!(w, "section\tkey\trow")?;
    for (i, k) in artifact.entity_keys.iter().enumerate() {
        writeln!(w, "entity\t{k}\t{i}")?;
    }
    for (i, k) in artifact.relation_names.iter().enumerate() {
        writeln!(w, "relation\t{k}\t{i}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load_embeddings(table_path: &Path, index_path: &Path) -> Result<KgeArtifact> {
    let bad = |message: String| Error::Parse {
        path: table_path.to_path_buf(),
        line: 0,
        message,
    };
    let mut r = BufReader::new(File::open(table_path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not an embedding table".into()));
    }
    let dim = read_u64(&mut r)? as usize;
    let n_ent = read_u64(&mut r)? as usize;
    let n_rel = read_u64(&mut r)? as usize;
    let norm = match read_u64(&mut r)? {
        1 => NormKind::L1,
        2 => NormKind::L2,
        other => return Err(bad(format!("unknown norm code {other}"))),
    };
    let mut read_matrix = |rows: usize| -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows * dim);
        let mut b = [0u8; 8];
        for _ in 0..rows * dim {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        Tensor::new(rows, dim, data)
    };
    let entities = read_matrix(n_ent)?;
    let relations = read_matrix(n_rel)?;
    let table = EmbeddingTable {
        norm,
        entities,
        relations,
    };

    let mut entity_keys = vec![String::new(); n_ent];
    let mut relation_names = vec![String::new(); n_rel];
    let reader = BufReader::new(File::open(index_path)?);
    for (no, line) in reader.lines().enumerate().skip(1) {
        let line = line?;
        let parse_err = |message: String| Error::Parse {
            path: index_path.to_path_buf(),
            line: no + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [section, key, row] = fields[..] else {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        };
        let row: usize = row.parse().map_err(|_| parse_err(format!("bad row `{row}`")))?;
        let slot = match section {
            "entity" => entity_keys.get_mut(row),
            "relation" => relation_names.get_mut(row),
            other => return Err(parse_err(format!("unknown section `{other}`"))),
        }
        .ok_or_else(|| parse_err(format!("row {row} outside the table")))?;
        *slot = key.to_string();
    }
    Ok(KgeArtifact {
        table,
        entity_keys,
        relation_names,
    })
}
