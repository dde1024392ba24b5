//! On-disk trace cache.
//!
//! One file per (sample, condition), holding a [`GenerationTrace`] in a
//! self-describing binary record: magic, schema version, token ids, step
//! stats as 64-bit floats, attention as 32-bit floats in
//! `[layer][head][query][key]` order, hidden states per exported layer.
//! Keys hash (backend id, decoding config, prompt, image_ref, mask indices).

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::backend::{
    AttentionTensor, Condition, GenerationTrace, HiddenStates, LayerHidden, MaskKind, MaskSpec,
    StepStats,
};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VQTR";
const VERSION: u32 = 1;

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// File-backed cache for generation and rescore traces, plus small text
/// replies (verbalized-confidence queries). Reads are shared; writes go
/// through a temp file and an atomic rename, so concurrent writers of the
/// same key are benign.
#[derive(Debug, Clone)]
pub struct TraceCache {
    dir: PathBuf,
}

impl TraceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Cache key over (backend id, decoding config, prompt, image_ref, mask
    /// indices). Fields are length-prefixed before hashing so no two field
    /// combinations collide.
    pub fn key(
        backend_id: &str,
        decoding_token: &str,
        prompt: &str,
        image_ref: &str,
        mask: Option<&MaskSpec>,
    ) -> String {
        let mut hasher = Sha256::new();
        for field in [backend_id, decoding_token, prompt, image_ref] {
            hasher.update((field.len() as u64).to_le_bytes());
            hasher.update(field.as_bytes());
        }
        match mask {
            None => hasher.update((u64::MAX).to_le_bytes()),
            Some(m) => {
                hasher.update((m.indices.len() as u64).to_le_bytes());
                for &i in &m.indices {
                    hasher.update((i as u64).to_le_bytes());
                }
            }
        }
        hex::encode(&hasher.finalize()[..16])
    }

    fn path_for(&self, key: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{key}.{ext}"))
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let tmp = self.dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_trace(&self, key: &str) -> Result<Option<GenerationTrace>> {
        let path = self.path_for(key, "trace");
        match std::fs::read(&path) {
            Ok(bytes) => decode_trace(&bytes).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn store_trace(&self, key: &str, trace: &GenerationTrace) -> Result<()> {
        self.write_atomic(&self.path_for(key, "trace"), &encode_trace(trace))
    }

    pub fn load_text(&self, key: &str) -> Result<Option<String>> {
        let path = self.path_for(key, "txt");
        match std::fs::read_to_string(&path) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn store_text(&self, key: &str, text: &str) -> Result<()> {
        self.write_atomic(&self.path_for(key, "txt"), text.as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Binary codec
// ---------------------------------------------------------------------------

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_mask(out: &mut Vec<u8>, mask: &MaskSpec) {
    out.push(match mask.kind {
        MaskKind::Core => 0,
        MaskKind::Random => 1,
        MaskKind::GroundTruth => 2,
        MaskKind::Blank => 3,
        MaskKind::None => 4,
    });
    push_u64(out, mask.n_tokens as u64);
    push_u64(out, mask.indices.len() as u64);
    for &i in &mask.indices {
        push_u64(out, i as u64);
    }
}

/// Serializes a trace to the versioned binary record. Identical traces
/// encode to identical bytes.
pub fn encode_trace(trace: &GenerationTrace) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    match &trace.condition {
        Condition::Full => out.push(0),
        Condition::Blank => out.push(1),
        Condition::Masked(mask) => {
            out.push(2);
            push_mask(&mut out, mask);
        }
    }
    push_u64(&mut out, trace.tokens.len() as u64);
    for &t in &trace.tokens {
        push_u32(&mut out, t);
    }
    for s in &trace.steps {
        push_f64(&mut out, s.entropy);
        push_f64(&mut out, s.logprob_realized);
    }
    push_f64(&mut out, trace.wall_time);

    let att = &trace.attention;
    push_u64(&mut out, att.n_layers() as u64);
    push_u64(&mut out, att.n_heads() as u64);
    push_u64(&mut out, att.n_queries() as u64);
    push_u64(&mut out, att.n_keys() as u64);
    for &v in att.as_flat() {
        push_f32(&mut out, v);
    }

    push_u64(&mut out, trace.hidden.dim as u64);
    push_u64(&mut out, trace.hidden.layers.len() as u64);
    for (&layer, lh) in &trace.hidden.layers {
        push_u64(&mut out, layer as u64);
        push_u64(&mut out, lh.generated.len() as u64);
        for &v in &lh.generated {
            push_f32(&mut out, v);
        }
        push_u64(&mut out, lh.visual.len() as u64);
        for &v in &lh.visual {
            push_f32(&mut out, v);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CacheFormat("record truncated".into()))?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Length check before allocating, so corrupt records cannot ask for
    /// absurd buffers.
    fn count(&mut self, elem_bytes: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        let need = n
            .checked_mul(elem_bytes)
            .ok_or_else(|| Error::CacheFormat("count overflow".into()))?;
        if self.pos + need > self.buf.len() {
            return Err(Error::CacheFormat(format!(
                "record claims {n} elements but only {} bytes remain",
                self.buf.len() - self.pos
            )));
        }
        Ok(n)
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.f32()?);
        }
        Ok(v)
    }
}

fn read_mask(r: &mut Reader<'_>) -> Result<MaskSpec> {
    let kind = match r.u8()? {
        0 => MaskKind::Core,
        1 => MaskKind::Random,
        2 => MaskKind::GroundTruth,
        3 => MaskKind::Blank,
        4 => MaskKind::None,
        other => return Err(Error::CacheFormat(format!("unknown mask kind tag {other}"))),
    };
    let n_tokens = r.u64()? as usize;
    let count = r.count(8)?;
    let mut indices = Vec::with_capacity(count);
    for _ in 0..count {
        indices.push(r.u64()? as usize);
    }
    MaskSpec::new(kind, indices, n_tokens)
}

/// Decodes a binary trace record, validating magic, version and counts.
pub fn decode_trace(bytes: &[u8]) -> Result<GenerationTrace> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CacheFormat("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CacheFormat(format!(
            "unsupported schema version {version}, expected {VERSION}"
        )));
    }
    let condition = match r.u8()? {
        0 => Condition::Full,
        1 => Condition::Blank,
        2 => Condition::Masked(read_mask(&mut r)?),
        other => {
            return Err(Error::CacheFormat(format!(
                "unknown condition tag {other}"
            )))
        }
    };
    let m = r.count(4)?;
    let mut tokens = Vec::with_capacity(m);
    for _ in 0..m {
        tokens.push(r.u32()?);
    }
    let mut steps = Vec::with_capacity(m);
    for _ in 0..m {
        steps.push(StepStats {
            entropy: r.f64()?,
            logprob_realized: r.f64()?,
        });
    }
    let wall_time = r.f64()?;

    let n_layers = r.u64()? as usize;
    let n_heads = r.u64()? as usize;
    let n_queries = r.u64()? as usize;
    let n_keys = r.u64()? as usize;
    let total = n_layers
        .checked_mul(n_heads)
        .and_then(|v| v.checked_mul(n_queries))
        .and_then(|v| v.checked_mul(n_keys))
        .ok_or_else(|| Error::CacheFormat("attention shape overflow".into()))?;
    if r.pos + total * 4 > bytes.len() {
        return Err(Error::CacheFormat("attention data truncated".into()));
    }
    let attention =
        AttentionTensor::from_flat(n_layers, n_heads, n_queries, n_keys, r.f32_vec(total)?)
            .map_err(|e| Error::CacheFormat(e.to_string()))?;
    if n_queries != m {
        return Err(Error::CacheFormat(format!(
            "attention has {n_queries} query rows for {m} tokens"
        )));
    }

    let dim = r.u64()? as usize;
    let layer_count = r.u64()? as usize;
    let mut layers = std::collections::BTreeMap::new();
    for _ in 0..layer_count {
        let layer = r.u64()? as usize;
        let gen_len = r.count(4)?;
        let generated = r.f32_vec(gen_len)?;
        let vis_len = r.count(4)?;
        let visual = r.f32_vec(vis_len)?;
        layers.insert(layer, LayerHidden { generated, visual });
    }
    if r.pos != bytes.len() {
        return Err(Error::CacheFormat(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(GenerationTrace {
        tokens,
        steps,
        hidden: HiddenStates { dim, layers },
        attention,
        condition,
        wall_time,
    })
}
