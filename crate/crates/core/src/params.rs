//! Flat model parameters with named, contiguous layer groups, plus the
//! binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"PFSR";
const CHECKPOINT_VERSION: u32 = 1;

/// One named contiguous span of a [`ParameterVector`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered layer groups covering `[0, total_len)` exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMap {
    groups: Vec<LayerGroup>,
    total_len: usize,
}

impl LayerMap {
    /// Build from `(name, len)` pairs; offsets follow declaration order.
    pub fn new(spec: impl IntoIterator<Item = (String, usize)>) -> Self {
        let mut groups = Vec::new();
        let mut offset = 0;
        for (name, len) in spec {
            groups.push(LayerGroup { name, offset, len });
            offset += len;
        }
        LayerMap {
            groups,
            total_len: offset,
        }
    }

    pub fn groups(&self) -> &[LayerGroup] {
        &self.groups
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn group(&self, name: &str) -> Option<&LayerGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Flat 64-bit parameter vector sharing a [`LayerMap`] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Arc<LayerMap>,
}

impl ParameterVector {
    pub fn new(layout: Arc<LayerMap>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::Dimension(format!(
                "parameter vector has {} values, layout expects {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(ParameterVector { values, layout })
    }

    pub fn zeros(layout: Arc<LayerMap>) -> Self {
        let values = vec![0.0; layout.total_len()];
        ParameterVector { values, layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Arc<LayerMap> {
        &self.layout
    }

    /// True when both vectors share one layout (pointer or structural equality).
    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn group_slice(&self, group: &LayerGroup) -> &[f64] {
        &self.values[group.offset..group.offset + group.len]
    }

    pub fn group_slice_mut(&mut self, group: &LayerGroup) -> &mut [f64] {
        &mut self.values[group.offset..group.offset + group.len]
    }
}

/// Write a checkpoint: magic, version, d_theta, the layer map, then the
/// values as little-endian 64-bit floats.
pub fn save_checkpoint(path: &Path, params: &ParameterVector) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + params.len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    let groups = params.layout().groups();
    buf.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for g in groups {
        buf.extend_from_slice(&(g.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(g.name.as_bytes());
        buf.extend_from_slice(&(g.offset as u64).to_le_bytes());
        buf.extend_from_slice(&(g.len as u64).to_le_bytes());
    }
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterVector> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };

    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad checkpoint magic",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let d_theta = cur.u64()? as usize;
    let num_groups = cur.u32()? as usize;
    let mut spec = Vec::with_capacity(num_groups);
    let mut expected_offset = 0usize;
    for _ in 0..num_groups {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Format(format!("{}: group name not UTF-8", path.display())))?;
        let offset = cur.u64()? as usize;
        let len = cur.u64()? as usize;
        if offset != expected_offset {
            return Err(Error::Format(format!(
                "{}: group {name} at offset {offset}, expected {expected_offset}",
                path.display()
            )));
        }
        expected_offset += len;
        spec.push((name, len));
    }
    if expected_offset != d_theta {
        return Err(Error::Format(format!(
            "{}: groups cover {expected_offset} of {d_theta} parameters",
            path.display()
        )));
    }
    let mut values = Vec::with_capacity(d_theta);
    for _ in 0..d_theta {
        let raw = cur.take(8)?;
        values.push(f64::from_le_bytes(raw.try_into().expect("8 bytes")));
    }
    ParameterVector::new(Arc::new(LayerMap::new(spec)), values)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
