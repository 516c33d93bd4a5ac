use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tensors, write_tensors, Graph, NamedTensor, Tensor, Var};

/// An ordered, named list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new(entries: Vec<NamedTensor>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every parameter on the graph, in order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.leaf(t.clone(), trainable)).collect()
    }

    /// Collects gradients for previously bound parameters.
    pub fn grads(&self, g: &Graph, vars: &[Var]) -> Result<Vec<Tensor>> {
        vars.iter()
            .zip(&self.entries)
            .map(|(v, (name, _))| {
                g.grad(*v)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("no gradient for parameter {name}")))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        write_tensors(BufWriter::new(f), &self.entries).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact {
                    path: path.to_path_buf(),
                    what: "model weights".into(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        Ok(Self::new(read_tensors(BufReader::new(f))?))
    }

    /// Checks that `other` has the same names and shapes, in order.
    pub fn expect_layout(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Format {
                kind: "weights",
                detail: format!("expected {} tensors, found {}", self.entries.len(), other.entries.len()),
            });
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Format {
                    kind: "weights",
                    detail: format!("expected {na} {:?}, found {nb} {:?}", ta.shape(), tb.shape()),
                });
            }
        }
        Ok(())
    }
}
