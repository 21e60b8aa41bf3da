//! Length-prefixed frames carrying a JSON header plus binary sections.
//!
//! ```text
//! frame = u32 body_len | body
//! body  = u32 json_len | json | binary
//! ```
//!
//! Payload fields in the JSON refer to `{offset, length}` ranges of
//! `binary`. Scores in responses travel as an `N x 2` f64 payload so they
//! arrive bit for bit.

use std::io::{self, Read, Write};

use mixlm_core::engine::{CostReport, EngineMode};
use mixlm_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServeError};
use crate::payload::{decode_payload, encode_payload};

pub const MAX_FRAME: usize = 256 << 20;

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> Result<()> {
    if body.len() > MAX_FRAME {
        return Err(ServeError::Protocol(format!("frame of {} bytes exceeds limit", body.len())));
    }
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `None` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(ServeError::Protocol(format!("frame length {len} exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)
        .map_err(|e| ServeError::Protocol(format!("truncated frame: {e}")))?;
    Ok(Some(body))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ItemRef {
    Cached(String),
    Payload(Tensor<f64>),
    Text(Vec<u32>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    /// Engine mode; the service default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<EngineMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub query_tokens: Vec<u32>,
    pub items: Vec<ItemRef>,
    pub flags: Flags,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ItemResult {
    Score { p_yes: f64, p_no: f64 },
    Error(String),
}

impl ItemResult {
    pub fn p_yes(&self) -> Option<f64> {
        match self {
            ItemResult::Score { p_yes, .. } => Some(*p_yes),
            ItemResult::Error(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResponse {
    pub request_id: u64,
    pub worker: usize,
    pub mode: EngineMode,
    pub results: Vec<ItemResult>,
    /// Counters of the engine call; `None` when no item resolved.
    pub report: Option<CostReport>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum WireItem {
    Cached(String),
    Payload(Section),
    Text(Vec<u32>),
}

#[derive(Serialize, Deserialize)]
struct WireRequest {
    query_tokens: Vec<u32>,
    items: Vec<WireItem>,
    #[serde(default)]
    flags: Flags,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum WireResult {
    /// Row of the score payload.
    Row(usize),
    Error(String),
}

#[derive(Serialize, Deserialize)]
struct WireResponse {
    request_id: u64,
    worker: usize,
    mode: EngineMode,
    results: Vec<WireResult>,
    report: Option<CostReport>,
    scores: Option<Section>,
}

#[derive(Serialize, Deserialize)]
struct WireError {
    error: String,
}

fn assemble(json: &[u8], binary: &[u8]) -> Vec<u8> {
    let mut body = Vec::with_capacity(4 + json.len() + binary.len());
    body.extend_from_slice(&(json.len() as u32).to_le_bytes());
    body.extend_from_slice(json);
    body.extend_from_slice(binary);
    body
}

fn split(body: &[u8]) -> Result<(&[u8], &[u8])> {
    if body.len() < 4 {
        return Err(ServeError::Protocol("body shorter than its header".into()));
    }
    let n = u32::from_le_bytes(body[..4].try_into().expect("4")) as usize;
    let json = body
        .get(4..4 + n)
        .ok_or_else(|| ServeError::Protocol("json section truncated".into()))?;
    Ok((json, &body[4 + n..]))
}

fn section(binary: &[u8], s: Section) -> Result<&[u8]> {
    s.offset
        .checked_add(s.length)
        .and_then(|end| binary.get(s.offset..end))
        .ok_or_else(|| ServeError::Protocol(format!("section {s:?} outside {} binary bytes", binary.len())))
}

fn push_section(binary: &mut Vec<u8>, bytes: &[u8]) -> Section {
    let s = Section {
        offset: binary.len(),
        length: bytes.len(),
    };
    binary.extend_from_slice(bytes);
    s
}

fn json_err(e: serde_json::Error) -> ServeError {
    ServeError::Protocol(format!("json: {e}"))
}

pub fn encode_request(req: &ScoreRequest) -> Result<Vec<u8>> {
    let mut binary = Vec::new();
    let items = req
        .items
        .iter()
        .map(|it| {
            Ok(match it {
                ItemRef::Cached(id) => WireItem::Cached(id.clone()),
                ItemRef::Text(t) => WireItem::Text(t.clone()),
                ItemRef::Payload(t) => WireItem::Payload(push_section(&mut binary, &encode_payload(t)?)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let wire = WireRequest {
        query_tokens: req.query_tokens.clone(),
        items,
        flags: req.flags,
    };
    Ok(assemble(&serde_json::to_vec(&wire).map_err(json_err)?, &binary))
}

pub fn decode_request(body: &[u8]) -> Result<ScoreRequest> {
    let (json, binary) = split(body)?;
    let wire: WireRequest = serde_json::from_slice(json).map_err(json_err)?;
    let items = wire
        .items
        .into_iter()
        .map(|it| {
            Ok(match it {
                WireItem::Cached(id) => ItemRef::Cached(id),
                WireItem::Text(t) => ItemRef::Text(t),
                WireItem::Payload(s) => ItemRef::Payload(decode_payload(section(binary, s)?)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreRequest {
        query_tokens: wire.query_tokens,
        items,
        flags: wire.flags,
    })
}

pub fn encode_response(resp: &ScoreResponse) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    let results = resp
        .results
        .iter()
        .map(|r| match r {
            ItemResult::Score { p_yes, p_no } => {
                rows.extend_from_slice(&[*p_yes, *p_no]);
                WireResult::Row(rows.len() / 2 - 1)
            }
            ItemResult::Error(m) => WireResult::Error(m.clone()),
        })
        .collect();
    let mut binary = Vec::new();
    let scores = if rows.is_empty() {
        None
    } else {
        let n = rows.len() / 2;
        Some(push_section(&mut binary, &encode_payload(&Tensor::new(vec![n, 2], rows)?)?))
    };
    let wire = WireResponse {
        request_id: resp.request_id,
        worker: resp.worker,
        mode: resp.mode,
        results,
        report: resp.report,
        scores,
    };
    Ok(assemble(&serde_json::to_vec(&wire).map_err(json_err)?, &binary))
}

pub fn encode_error(message: &str) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&WireError {
        error: message.to_string(),
    })
    .map_err(json_err)?;
    Ok(assemble(&json, &[]))
}

/// Decodes a response frame; a connection-level error frame becomes
/// [`ServeError::Service`].
pub fn decode_response(body: &[u8]) -> Result<ScoreResponse> {
    let (json, binary) = split(body)?;
    if let Ok(e) = serde_json::from_slice::<WireError>(json) {
        return Err(ServeError::Service(e.error));
    }
    let wire: WireResponse = serde_json::from_slice(json).map_err(json_err)?;
    let scores = match wire.scores {
        Some(s) => Some(decode_payload::<f64>(section(binary, s)?)?),
        None => None,
    };
    let results = wire
        .results
        .into_iter()
        .map(|r| match r {
            WireResult::Error(m) => Ok(ItemResult::Error(m)),
            WireResult::Row(i) => {
                let t = scores
                    .as_ref()
                    .filter(|t| i < t.rows())
                    .ok_or_else(|| ServeError::Protocol(format!("score row {i} missing")))?;
                Ok(ItemResult::Score {
                    p_yes: t.row(i)[0],
                    p_no: t.row(i)[1],
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreResponse {
        request_id: wire.request_id,
        worker: wire.worker,
        mode: wire.mode,
        results,
        report: wire.report,
    })
}
