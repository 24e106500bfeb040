//! Action-value functions: an exact tabular map over encoded histories, or a
//! small MLP. Both share the checkpoint format documented in
//! `docs/formats.md` (versioned binary, little-endian scalars).

use super::mlp::MlpNet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("unknown variant tag {0}")]
    Variant(u8),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Which function approximator a learner uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QVariant {
    Tabular,
    Mlp { hidden: Vec<usize> },
}

/// Action-value function over encoded action-observation windows.
///
/// Tabular lookups of unseen keys return the zero vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QFunction {
    Tabular {
        num_actions: usize,
        table: BTreeMap<Vec<u8>, Vec<f64>>,
    },
    Mlp(MlpNet),
}

impl QFunction {
    pub fn new_tabular(num_actions: usize) -> Self {
        QFunction::Tabular {
            num_actions,
            table: BTreeMap::new(),
        }
    }

    pub fn new_mlp(input_size: usize, hidden: &[usize], num_actions: usize, seed: u64) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input_size);
        sizes.extend_from_slice(hidden);
        sizes.push(num_actions);
        QFunction::Mlp(MlpNet::init(sizes, seed))
    }

    pub fn num_actions(&self) -> usize {
        match self {
            QFunction::Tabular { num_actions, .. } => *num_actions,
            QFunction::Mlp(net) => net.output_size(),
        }
    }

    /// Q-values for every action at an encoded state.
    pub fn values(&self, encoded: &[u8]) -> Vec<f64> {
        match self {
            QFunction::Tabular { num_actions, table } => table
                .get(encoded)
                .cloned()
                .unwrap_or_else(|| vec![0.0; *num_actions]),
            QFunction::Mlp(net) => {
                let input: Vec<f64> = encoded.iter().map(|&b| b as f64).collect();
                net.forward(&input)
            }
        }
    }

    /// Stored values for a key, if the tabular variant has seen it.
    pub fn lookup_seen(&self, encoded: &[u8]) -> Option<&Vec<f64>> {
        match self {
            QFunction::Tabular { table, .. } => table.get(encoded),
            QFunction::Mlp(_) => None,
        }
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self, QFunction::Tabular { .. })
    }

    pub fn table_len(&self) -> usize {
        match self {
            QFunction::Tabular { table, .. } => table.len(),
            QFunction::Mlp(_) => 0,
        }
    }

    /// Applies `delta` to one tabular entry, creating it on first touch.
    pub fn tabular_update(&mut self, encoded: &[u8], action: usize, delta: f64) {
        match self {
            QFunction::Tabular { num_actions, table } => {
                let row = table
                    .entry(encoded.to_vec())
                    .or_insert_with(|| vec![0.0; *num_actions]);
                row[action] += delta;
            }
            QFunction::Mlp(_) => panic!("tabular update on an MLP"),
        }
    }

    pub fn write_payload<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        match self {
            QFunction::Tabular { num_actions, table } => {
                w.write_all(&[1u8])?;
                w.write_all(&(*num_actions as u16).to_le_bytes())?;
                w.write_all(&(table.len() as u32).to_le_bytes())?;
                for (key, row) in table {
                    w.write_all(&(key.len() as u32).to_le_bytes())?;
                    w.write_all(key)?;
                    for &v in row {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            QFunction::Mlp(net) => {
                w.write_all(&[2u8])?;
                w.write_all(&(net.layer_sizes.len() as u16).to_le_bytes())?;
                for &s in &net.layer_sizes {
                    w.write_all(&(s as u32).to_le_bytes())?;
                }
                for layer in 0..net.num_layers() {
                    for &v in &net.weights[layer] {
                        w.write_all(&v.to_le_bytes())?;
                    }
                    for &v in &net.biases[layer] {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_payload<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        match tag[0] {
            1 => {
                let mut b2 = [0u8; 2];
                r.read_exact(&mut b2)?;
                let num_actions = u16::from_le_bytes(b2) as usize;
                let mut b4 = [0u8; 4];
                r.read_exact(&mut b4)?;
                let entries = u32::from_le_bytes(b4) as usize;
                let mut table = BTreeMap::new();
                for _ in 0..entries {
                    r.read_exact(&mut b4)?;
                    let key_len = u32::from_le_bytes(b4) as usize;
                    if key_len > 1 << 24 {
                        return Err(CheckpointError::Malformed(format!(
                            "key length {key_len}"
                        )));
                    }
                    let mut key = vec![0u8; key_len];
                    r.read_exact(&mut key)?;
                    let mut row = Vec::with_capacity(num_actions);
                    let mut b8 = [0u8; 8];
                    for _ in 0..num_actions {
                        r.read_exact(&mut b8)?;
                        row.push(f64::from_le_bytes(b8));
                    }
                    table.insert(key, row);
                }
                Ok(QFunction::Tabular { num_actions, table })
            }
            2 => {
                let mut b2 = [0u8; 2];
                r.read_exact(&mut b2)?;
                let num_sizes = u16::from_le_bytes(b2) as usize;
                if !(2..=16).contains(&num_sizes) {
                    return Err(CheckpointError::Malformed(format!(
                        "{num_sizes} layer sizes"
                    )));
                }
                let mut layer_sizes = Vec::with_capacity(num_sizes);
                let mut b4 = [0u8; 4];
                for _ in 0..num_sizes {
                    r.read_exact(&mut b4)?;
                    layer_sizes.push(u32::from_le_bytes(b4) as usize);
                }
                let mut weights = Vec::new();
                let mut biases = Vec::new();
                let mut b8 = [0u8; 8];
                for pair in layer_sizes.windows(2) {
                    let mut w = Vec::with_capacity(pair[0] * pair[1]);
                    for _ in 0..pair[0] * pair[1] {
                        r.read_exact(&mut b8)?;
                        w.push(f64::from_le_bytes(b8));
                    }
                    let mut b = Vec::with_capacity(pair[1]);
                    for _ in 0..pair[1] {
                        r.read_exact(&mut b8)?;
                        b.push(f64::from_le_bytes(b8));
                    }
                    weights.push(w);
                    biases.push(b);
                }
                Ok(QFunction::Mlp(MlpNet {
                    layer_sizes,
                    weights,
                    biases,
                }))
            }
            t => Err(CheckpointError::Variant(t)),
        }
    }
}

const MAGIC: &[u8; 4] = b"KLRC";
const VERSION: u16 = 1;

/// A policy checkpoint: the Q-function plus the greedy/exploration config it
/// was trained with. This is also the payload format stored on the model
/// server.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub q: QFunction,
    pub epsilon: f64,
    pub config_digest: [u8; 32],
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&self.epsilon.to_le_bytes());
        self.q.write_payload(&mut out).expect("vec write");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut config_digest = [0u8; 32];
        r.read_exact(&mut config_digest)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let epsilon = f64::from_le_bytes(b8);
        let q = QFunction::read_payload(&mut r)?;
        Ok(Self {
            q,
            epsilon,
            config_digest,
        })
    }

    /// JSON export for inspection.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Export<'a> {
            epsilon: f64,
            config_digest: String,
            q: &'a QFunction,
        }
        serde_json::to_string_pretty(&Export {
            epsilon: self.epsilon,
            config_digest: hex(&self.config_digest),
            q: &self.q,
        })
        .expect("checkpoint serializes")
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unseen_tabular_key_is_zero() {
        let q = QFunction::new_tabular(4);
        assert_eq!(q.values(&[1, 2, 3]), vec![0.0; 4]);
        assert!(q.lookup_seen(&[1, 2, 3]).is_none());
    }

    #[test]
    fn tabular_update_and_lookup() {
        let mut q = QFunction::new_tabular(3);
        q.tabular_update(&[7], 1, 0.5);
        q.tabular_update(&[7], 1, 0.25);
        assert_eq!(q.values(&[7]), vec![0.0, 0.75, 0.0]);
    }

    #[test]
    fn checkpoint_round_trip_tabular() {
        let mut q = QFunction::new_tabular(2);
        q.tabular_update(&[1, 2], 0, 1.5);
        q.tabular_update(&[3], 1, -0.25);
        let ck = Checkpoint {
            q,
            epsilon: 0.05,
            config_digest: [7u8; 32],
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck, back);
        assert_eq!(bytes, back.to_bytes(), "serialization is canonical");
    }

    #[test]
    fn checkpoint_round_trip_mlp() {
        let q = QFunction::new_mlp(6, &[8], 3, 42);
        let ck = Checkpoint {
            q,
            epsilon: 0.0,
            config_digest: [0u8; 32],
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(ck, back);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = Checkpoint {
            q: QFunction::new_tabular(1),
            epsilon: 0.0,
            config_digest: [0u8; 32],
        }
        .to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadMagic)
        ));
    }
}
