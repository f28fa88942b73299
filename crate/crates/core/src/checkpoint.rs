//! Binary checkpoints of classifiers and RBM stacks.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "DBNCKPT\0"
//! version    u32
//! kind       u8       1 = classifier, 2 = RBM stack
//! seed       u64
//! epochs     u64      epochs completed
//! hidden_p   f64      dropout used in training (0 for RBM stacks)
//! input_p    f64
//! n_layers   u32
//! sizes      u64 × (n_layers + 1)
//! n_tensors  u32
//! tensors:   rank u8, dims u64 × rank, values f64 × Π dims, checksum u64
//! ```
//!
//! A classifier stores `weights, bias` per layer; an RBM stack stores
//! `weights, visible_bias, hidden_bias` per machine.

use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{checksum, Matrix};
use crate::net::{Layer, ModelWeights};
use crate::rbm::Rbm;

pub const MAGIC: &[u8; 8] = b"DBNCKPT\0";
pub const VERSION: u32 = 1;

const KIND_CLASSIFIER: u8 = 1;
const KIND_RBM_STACK: u8 = 2;

/// How a checkpoint's parameters came about.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    pub epochs: u64,
    pub hidden_dropout_p: f64,
    pub input_dropout_p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Params {
    Classifier(ModelWeights),
    RbmStack(Vec<Rbm>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub provenance: Provenance,
    pub params: Params,
}

impl Checkpoint {
    pub fn classifier(model: ModelWeights, provenance: Provenance) -> Self {
        Checkpoint {
            provenance,
            params: Params::Classifier(model),
        }
    }

    pub fn rbm_stack(rbms: Vec<Rbm>, provenance: Provenance) -> Self {
        Checkpoint {
            provenance,
            params: Params::RbmStack(rbms),
        }
    }

    /// Unit counts from input to output.
    pub fn layer_sizes(&self) -> Vec<usize> {
        match &self.params {
            Params::Classifier(m) => m.layer_sizes(),
            Params::RbmStack(rbms) => {
                let mut sizes: Vec<usize> = rbms.iter().map(Rbm::n_visible).collect();
                sizes.extend(rbms.last().map(Rbm::n_hidden));
                sizes
            }
        }
    }

    pub fn into_classifier(self) -> Result<(ModelWeights, Provenance)> {
        match self.params {
            Params::Classifier(m) => Ok((m, self.provenance)),
            Params::RbmStack(_) => Err(Error::Format("checkpoint holds an RBM stack, not a classifier".into())),
        }
    }

    pub fn into_rbm_stack(self) -> Result<(Vec<Rbm>, Provenance)> {
        match self.params {
            Params::RbmStack(r) => Ok((r, self.provenance)),
            Params::Classifier(_) => Err(Error::Format("checkpoint holds a classifier, not an RBM stack".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let sizes = self.layer_sizes();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.params {
            Params::Classifier(_) => KIND_CLASSIFIER,
            Params::RbmStack(_) => KIND_RBM_STACK,
        });
        let p = &self.provenance;
        out.extend_from_slice(&p.seed.to_le_bytes());
        out.extend_from_slice(&p.epochs.to_le_bytes());
        out.extend_from_slice(&p.hidden_dropout_p.to_le_bytes());
        out.extend_from_slice(&p.input_dropout_p.to_le_bytes());
        out.extend_from_slice(&(sizes.len().saturating_sub(1) as u32).to_le_bytes());
        for s in &sizes {
            out.extend_from_slice(&(*s as u64).to_le_bytes());
        }
        let mut tensors: Vec<(Vec<usize>, &[f64])> = Vec::new();
        match &self.params {
            Params::Classifier(m) => {
                for l in m.layers() {
                    tensors.push((vec![l.weights.rows(), l.weights.cols()], l.weights.as_slice()));
                    tensors.push((vec![l.bias.len()], &l.bias));
                }
            }
            Params::RbmStack(rbms) => {
                for r in rbms {
                    tensors.push((vec![r.weights.rows(), r.weights.cols()], r.weights.as_slice()));
                    tensors.push((vec![r.visible_bias.len()], &r.visible_bias));
                    tensors.push((vec![r.hidden_bias.len()], &r.hidden_bias));
                }
            }
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (dims, values) in tensors {
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&checksum(values).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = r.take(1, "kind")?[0];
        let provenance = Provenance {
            seed: r.u64("seed")?,
            epochs: r.u64("epochs")?,
            hidden_dropout_p: r.f64("hidden_p")?,
            input_dropout_p: r.f64("input_p")?,
        };
        let n_layers = r.u32("layer count")? as usize;
        let sizes = (0..=n_layers).map(|_| r.usize("layer size")).collect::<Result<Vec<_>>>()?;
        let n_tensors = r.u32("tensor count")? as usize;
        let per_layer = match kind {
            KIND_CLASSIFIER => 2,
            KIND_RBM_STACK => 3,
            k => return Err(Error::Format(format!("unknown checkpoint kind {k}"))),
        };
        if n_tensors != per_layer * n_layers {
            return Err(Error::Format(format!("{n_layers} layers need {} tensors, header says {n_tensors}", per_layer * n_layers)));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for t in 0..n_tensors {
            tensors.push(r.tensor(t)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
        }

        let mut it = tensors.into_iter();
        let mut next = |expected: &[usize], what: &str| -> Result<Vec<f64>> {
            let (dims, values) = it.next().expect("tensor count checked");
            if dims != expected {
                return Err(Error::Format(format!("{what}: dims {dims:?}, layer sizes imply {expected:?}")));
            }
            Ok(values)
        };
        let params = match kind {
            KIND_CLASSIFIER => {
                let mut layers = Vec::with_capacity(n_layers);
                for l in 0..n_layers {
                    let (i, o) = (sizes[l], sizes[l + 1]);
                    let w = Matrix::from_vec(i, o, next(&[i, o], "weights")?)?;
                    let b = next(&[o], "bias")?;
                    layers.push(Layer::new(w, b)?);
                }
                Params::Classifier(ModelWeights::new(layers)?)
            }
            _ => {
                let mut rbms = Vec::with_capacity(n_layers);
                for l in 0..n_layers {
                    let (v, h) = (sizes[l], sizes[l + 1]);
                    let w = Matrix::from_vec(v, h, next(&[v, h], "weights")?)?;
                    let vb = next(&[v], "visible bias")?;
                    let hb = next(&[h], "hidden bias")?;
                    rbms.push(Rbm::from_parameters(w, vb, hb)?);
                }
                Params::RbmStack(rbms)
            }
        };
        Ok(Checkpoint { provenance, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            e => e,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            what,
            expected: self.pos.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &'static str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} does not fit in memory")))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn tensor(&mut self, index: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let rank = self.take(1, "tensor rank")?[0] as usize;
        let dims = (0..rank).map(|_| self.usize("tensor dims")).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {index} dims {dims:?} overflow")))?;
        let raw = self.take(count.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?, "tensor values")?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let stored = self.u64("tensor checksum")?;
        if stored != checksum(&values) {
            return Err(Error::Format(format!("tensor {index} fails its checksum")));
        }
        Ok((dims, values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;

    fn provenance() -> Provenance {
        Provenance {
            seed: 42,
            epochs: 30,
            hidden_dropout_p: 0.5,
            input_dropout_p: 0.2,
        }
    }

    #[test]
    fn classifier_round_trips_bitwise() {
        let mut m = ModelWeights::init(&[7, 5, 3], &mut Rng::new(1)).unwrap();
        m.layers_mut()[0].bias[2] = -0.0;
        m.layers_mut()[1].bias[0] = f64::MIN_POSITIVE / 4.0;
        let c = Checkpoint::classifier(m, provenance());
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let (m2, p) = back.into_classifier().unwrap();
        assert_eq!(p, provenance());
        assert_eq!(m2.layers()[0].bias[2].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rbm_stack_round_trips() {
        let mut rng = Rng::new(2);
        let stack = vec![Rbm::new(6, 4, &mut rng), Rbm::new(4, 3, &mut rng)];
        let c = Checkpoint::rbm_stack(stack.clone(), Provenance { epochs: 0, ..Default::default() });
        assert_eq!(c.layer_sizes(), vec![6, 4, 3]);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        let (rbms, _) = back.clone().into_rbm_stack().unwrap();
        for (a, b) in rbms.iter().zip(&stack) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.visible_bias, b.visible_bias);
            assert_eq!(a.hidden_bias, b.hidden_bias);
        }
        assert!(matches!(back.into_classifier(), Err(Error::Format(_))));
    }

    #[test]
    fn corruption_is_detected() {
        let m = ModelWeights::init(&[4, 3], &mut Rng::new(3)).unwrap();
        let bytes = Checkpoint::classifier(m, provenance()).to_bytes();

        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 20] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Format(_))));

        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format(_))));

        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Format(_))));

        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(Checkpoint::from_bytes(&trailing), Err(Error::Format(_))));
    }
}
