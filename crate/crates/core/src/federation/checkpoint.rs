use std::path::Path;

use super::client::ClientState;
use super::server::ServerState;
use super::{FederationError, Result};
use crate::tensor::{read_tensors, write_tensors, ParamSet, Tensor};

const CONCEPTS_KEY: &str = "vc.concepts";
const UPSILON_PREFIX: &str = "vc.upsilon.";

/// Contents of a `round_<r>.ckpt` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub concepts: Option<Tensor>,
    /// `(client id, υ)` in ascending id order.
    pub upsilon: Vec<(usize, Vec<f64>)>,
}

/// Writes the global model, and for concept strategies the concept matrix
/// and every client's weights, to `<dir>/round_<r>.ckpt`.
pub fn write_checkpoint(
    dir: &Path,
    server: &ServerState,
    clients: &[ClientState],
    with_concepts: bool,
) -> Result<std::path::PathBuf> {
    let path = dir.join(format!("round_{}.ckpt", server.round));
    let mut entries: Vec<(String, Tensor)> = server
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    if with_concepts {
        entries.push((CONCEPTS_KEY.to_string(), server.bank.concepts().clone()));
        for c in clients {
            entries.push((
                format!("{UPSILON_PREFIX}{}", c.id),
                Tensor::row(c.preference.upsilon().to_vec())?,
            ));
        }
    }
    let mut buf = Vec::new();
    write_tensors(&mut buf, entries.iter().map(|(n, t)| (n.as_str(), t)))?;
    std::fs::write(&path, buf)?;
    Ok(path)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut params = ParamSet::new();
    let mut concepts = None;
    let mut upsilon = Vec::new();
    for (name, t) in read_tensors(bytes)? {
        if name == CONCEPTS_KEY {
            concepts = Some(t);
        } else if let Some(id) = name.strip_prefix(UPSILON_PREFIX) {
            let id = id
                .parse()
                .map_err(|_| FederationError::Checkpoint(format!("bad client id in `{name}`")))?;
            upsilon.push((id, t.into_data()));
        } else {
            params.insert(name, t);
        }
    }
    upsilon.sort_by_key(|(id, _)| *id);
    Ok(Checkpoint {
        params,
        concepts,
        upsilon,
    })
}
