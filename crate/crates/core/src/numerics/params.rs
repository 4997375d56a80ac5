use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{NumericsError, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub(crate) store: u64,
    pub(crate) index: usize,
}

impl ParamId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Named, owned collection of trainable tensors.
///
/// Every independently constructed store carries a process-unique tag; a
/// [`ParamId`] minted by one store is rejected by any other, which is how
/// per-agent parameter isolation is enforced at runtime. Clones keep the
/// tag, so layer handles stay valid on a copied model.
#[derive(Clone, Debug)]
pub struct ParamStore {
    tag: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            tag: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId {
            store: self.tag,
            index: self.tensors.len() - 1,
        }
    }

    /// Adds a tensor initialised from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(rows, cols, bound, rng))
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.tag && id.index < self.tensors.len()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        assert!(self.owns(id), "parameter id from a foreign store");
        &self.tensors[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        assert!(self.owns(id), "parameter id from a foreign store");
        &mut self.tensors[id.index]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(move |index| ParamId {
            store: self.tag,
            index,
        })
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.index]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies every tensor into `checkpoint` under `prefix/name`.
    pub fn export(&self, prefix: &str, checkpoint: &mut Checkpoint) {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            checkpoint.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Overwrites every tensor from `checkpoint`; names and shapes must match.
    pub fn import(&mut self, prefix: &str, checkpoint: &Checkpoint) -> Result<(), NumericsError> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}/{name}");
            let src = checkpoint
                .get(&key)
                .ok_or_else(|| NumericsError::Checkpoint(format!("missing tensor {key}")))?;
            if src.shape() != t.shape() {
                return Err(NumericsError::Checkpoint(format!(
                    "shape mismatch for {key}: {:?} vs {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &str = "iplan-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered map from canonical parameter names to tensors.
///
/// Text format, one tensor per line after a two-line header:
///
/// ```text
/// iplan-checkpoint 1
/// <count>
/// <name>\t<dim>,<dim>\t<hex f64 bits> <hex f64 bits> ...
/// ```
///
/// Values are written as the 16-digit hex of their IEEE-754 bit pattern,
/// so a save/load round trip is bit-exact.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) {
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = tensor;
        } else {
            self.entries.push((name, tensor));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(w, "{}", self.entries.len())?;
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            write!(w, "{name}\t{}\t", dims.join(","))?;
            for (i, v) in t.data().iter().enumerate() {
                if i > 0 {
                    w.write_all(b" ")?;
                }
                write!(w, "{:016x}", v.to_bits())?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, NumericsError> {
        let bad = |m: String| NumericsError::Checkpoint(m);
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| bad("empty checkpoint".into()))?
            .map_err(|e| bad(e.to_string()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("not an iplan checkpoint".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing checkpoint version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(NumericsError::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count: usize = lines
            .next()
            .ok_or_else(|| bad("missing tensor count".into()))?
            .map_err(|e| bad(e.to_string()))?
            .trim()
            .parse()
            .map_err(|_| bad("bad tensor count".into()))?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| bad("truncated checkpoint".into()))?
                .map_err(|e| bad(e.to_string()))?;
            let mut fields = line.splitn(3, '\t');
            let name = fields.next().unwrap_or_default().to_string();
            let dims = fields.next().ok_or_else(|| bad(format!("{name}: no shape")))?;
            let values = fields.next().unwrap_or_default();
            let shape: Vec<usize> = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.parse().map_err(|_| bad(format!("{name}: bad dim {d}"))))
                    .collect::<Result<_, _>>()?
            };
            let data: Vec<f64> = values
                .split_whitespace()
                .map(|h| {
                    u64::from_str_radix(h, 16)
                        .map(f64::from_bits)
                        .map_err(|_| bad(format!("{name}: bad value {h}")))
                })
                .collect::<Result<_, _>>()?;
            ck.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn foreign_ids_are_rejected() {
        let mut a = ParamStore::new();
        let b = ParamStore::new();
        let id = a.add("w", Tensor::zeros(1, 1));
        assert!(a.owns(id));
        assert!(!b.owns(id));
        let c = a.clone();
        assert!(c.owns(id));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let text = "iplan-checkpoint 7\n0\n";
        assert!(matches!(
            Checkpoint::read_from(text.as_bytes()),
            Err(NumericsError::CheckpointVersion { found: 7, .. })
        ));
    }

    #[test]
    fn import_checks_shapes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.add_uniform("w", 2, 3, 3, &mut rng);
        let mut ck = Checkpoint::new();
        ck.insert("m/w".into(), Tensor::zeros(3, 2));
        assert!(s.import("m", &ck).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f64>(), 1..40),
            cols in 1usize..5,
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let data = values[..rows * cols].to_vec();
            let mut ck = Checkpoint::new();
            ck.insert("agent0/ppo/actor/w".into(), Tensor::matrix(rows, cols, data.clone()));
            ck.insert("agent0/scalar".into(), Tensor::new(vec![], vec![data[0]]).unwrap());
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(buf.as_slice()).unwrap();
            let t = back.get("agent0/ppo/actor/w").unwrap();
            prop_assert_eq!(t.shape(), &[rows, cols][..]);
            for (a, b) in t.data().iter().zip(&data) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.get("agent0/scalar").unwrap().shape().len(), 0);
        }
    }
}
