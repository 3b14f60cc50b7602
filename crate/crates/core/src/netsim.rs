//! Simulated vehicle/infrastructure network: the wire codec, the four
//! communication policies, per-frame bandwidth ledgers and latency.
//!
//! Handshake for learned selection: the vehicle broadcasts its query and
//! pose, every infrastructure replies with its raw matching score, the
//! vehicle normalizes the scores, requests the feature map of the argmax,
//! and the chosen infrastructure sends it.
//!
//! Counted bandwidth includes only query values and feature-map values.
//! Headers, poses, scores and requests are carried in the gross column.

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::attention::{fuse_inference, normalize_scores_with_ids, refine_feature, select_infrastructure, AttentionError, AttentionState, ScoreSet};
use crate::geometry::Pose;
use crate::pillars::{PillarEncoder, PillarError};
use crate::rng::{derive_seed, SeededRng};
use crate::scenegen::SceneFrame;
use crate::tensor::PseudoImage;

pub const MAGIC: [u8; 4] = *b"CP3D";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Sender id of the vehicle; infrastructure `i` sends as `i + 1`.
pub const VEHICLE_ID: u16 = 0;

pub const KB: f64 = 1024.0;
pub const MB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    QueryBroadcast = 1,
    ScoreReply = 2,
    FeatureRequest = 3,
    FeaturePayload = 4,
}

impl MessageKind {
    pub const ALL: [MessageKind; 4] =
        [MessageKind::QueryBroadcast, MessageKind::ScoreReply, MessageKind::FeatureRequest, MessageKind::FeaturePayload];

    pub fn from_u8(b: u8) -> Option<Self> {
        match b {
            1 => Some(Self::QueryBroadcast),
            2 => Some(Self::ScoreReply),
            3 => Some(Self::FeatureRequest),
            4 => Some(Self::FeaturePayload),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::QueryBroadcast => "QueryBroadcast",
            Self::ScoreReply => "ScoreReply",
            Self::FeatureRequest => "FeatureRequest",
            Self::FeaturePayload => "FeaturePayload",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    QueryBroadcast { query: Vec<f32>, pose: [f32; 4] },
    ScoreReply { score: f32 },
    FeatureRequest,
    FeaturePayload { channels: u32, height: u32, width: u32, data: Vec<f32> },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::QueryBroadcast { .. } => MessageKind::QueryBroadcast,
            Payload::ScoreReply { .. } => MessageKind::ScoreReply,
            Payload::FeatureRequest => MessageKind::FeatureRequest,
            Payload::FeaturePayload { .. } => MessageKind::FeaturePayload,
        }
    }

    /// Encoded payload size in bytes.
    pub fn len(&self) -> usize {
        match self {
            Payload::QueryBroadcast { query, .. } => 4 * query.len() + 16,
            Payload::ScoreReply { .. } => 4,
            Payload::FeatureRequest => 0,
            Payload::FeaturePayload { data, .. } => 12 + 4 * data.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes that count toward the bandwidth figure.
    pub fn counted_len(&self) -> usize {
        match self {
            Payload::QueryBroadcast { query, .. } => 4 * query.len(),
            Payload::FeaturePayload { data, .. } => 4 * data.len(),
            _ => 0,
        }
    }

    pub fn feature(image: &PseudoImage) -> Self {
        let (c, h, w) = image.dims();
        Payload::FeaturePayload {
            channels: c as u32,
            height: h as u32,
            width: w as u32,
            data: image.data.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolMessage {
    pub frame: u32,
    pub sender: u16,
    pub payload: Payload,
}

impl ProtocolMessage {
    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("decode error at byte {offset}: {reason}")]
pub struct DecodeError {
    pub offset: usize,
    pub reason: DecodeReason,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeReason {
    Truncated { needed: usize, available: usize },
    BadMagic([u8; 4]),
    BadVersion(u8),
    UnknownKind(u8),
    BadPayloadLength { kind: MessageKind, len: usize },
    TrailingBytes(usize),
}

impl fmt::Display for DecodeReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Truncated { needed, available } => write!(f, "truncated: need {needed} bytes, have {available}"),
            Self::BadMagic(m) => write!(f, "bad magic {m:02x?}"),
            Self::BadVersion(v) => write!(f, "unsupported version {v}"),
            Self::UnknownKind(k) => write!(f, "unknown message kind {k}"),
            Self::BadPayloadLength { kind, len } => write!(f, "payload length {len} invalid for {}", kind.name()),
            Self::TrailingBytes(n) => write!(f, "{n} trailing bytes"),
        }
    }
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Little-endian wire form: 16-byte header then payload.
pub fn encode_message(m: &ProtocolMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(m.kind() as u8);
    out.extend_from_slice(&m.frame.to_le_bytes());
    out.extend_from_slice(&m.sender.to_le_bytes());
    out.extend_from_slice(&(m.payload.len() as u32).to_le_bytes());
    match &m.payload {
        Payload::QueryBroadcast { query, pose } => {
            put_f32s(&mut out, query);
            put_f32s(&mut out, pose);
        }
        Payload::ScoreReply { score } => out.extend_from_slice(&score.to_le_bytes()),
        Payload::FeatureRequest => {}
        Payload::FeaturePayload { channels, height, width, data } => {
            for d in [channels, height, width] {
                out.extend_from_slice(&d.to_le_bytes());
            }
            put_f32s(&mut out, data);
        }
    }
    out
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn f32s(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Decodes one message from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(ProtocolMessage, usize), DecodeError> {
    let fail = |offset, reason| Err(DecodeError { offset, reason });
    if bytes.len() < HEADER_LEN {
        let offset = bytes.len().min(4);
        if bytes[..offset] != MAGIC[..offset] {
            let mut m = [0u8; 4];
            m[..offset].copy_from_slice(&bytes[..offset]);
            return fail(0, DecodeReason::BadMagic(m));
        }
        return fail(bytes.len(), DecodeReason::Truncated { needed: HEADER_LEN, available: bytes.len() });
    }
    if bytes[..4] != MAGIC {
        return fail(0, DecodeReason::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
    }
    if bytes[4] != VERSION {
        return fail(4, DecodeReason::BadVersion(bytes[4]));
    }
    let kind = MessageKind::from_u8(bytes[5]).ok_or(DecodeError { offset: 5, reason: DecodeReason::UnknownKind(bytes[5]) })?;
    let frame = le_u32(&bytes[6..10]);
    let sender = u16::from_le_bytes([bytes[10], bytes[11]]);
    let len = le_u32(&bytes[12..16]) as usize;
    let total = HEADER_LEN.saturating_add(len);
    let bad_len = || Err(DecodeError { offset: 12, reason: DecodeReason::BadPayloadLength { kind, len } });
    match kind {
        MessageKind::QueryBroadcast if len < 16 || !len.is_multiple_of(4) => return bad_len(),
        MessageKind::ScoreReply if len != 4 => return bad_len(),
        MessageKind::FeatureRequest if len != 0 => return bad_len(),
        MessageKind::FeaturePayload if len < 12 || !len.is_multiple_of(4) => return bad_len(),
        _ => {}
    }
    if bytes.len() < total {
        return fail(bytes.len(), DecodeReason::Truncated { needed: total, available: bytes.len() });
    }
    let p = &bytes[HEADER_LEN..total];
    let payload = match kind {
        MessageKind::QueryBroadcast => {
            let n = (len - 16) / 4;
            let pose = f32s(&p[4 * n..]);
            Payload::QueryBroadcast { query: f32s(&p[..4 * n]), pose: [pose[0], pose[1], pose[2], pose[3]] }
        }
        MessageKind::ScoreReply => Payload::ScoreReply { score: f32::from_le_bytes([p[0], p[1], p[2], p[3]]) },
        MessageKind::FeatureRequest => Payload::FeatureRequest,
        MessageKind::FeaturePayload => {
            let (c, h, w) = (le_u32(&p[0..4]), le_u32(&p[4..8]), le_u32(&p[8..12]));
            let expected = u128::from(c) * u128::from(h) * u128::from(w) * 4 + 12;
            if expected != len as u128 {
                return Err(DecodeError { offset: HEADER_LEN, reason: DecodeReason::BadPayloadLength { kind, len } });
            }
            Payload::FeaturePayload { channels: c, height: h, width: w, data: f32s(&p[12..]) }
        }
    };
    Ok((ProtocolMessage { frame, sender, payload }, total))
}

/// Decodes exactly one message; trailing bytes are an error.
pub fn decode_message(bytes: &[u8]) -> Result<ProtocolMessage, DecodeError> {
    let (m, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(DecodeError { offset: used, reason: DecodeReason::TrailingBytes(bytes.len() - used) });
    }
    Ok(m)
}

/// Writes messages as `u32` little-endian length prefix plus encoding.
pub fn write_trace_log<W: Write>(mut w: W, messages: &[ProtocolMessage]) -> io::Result<()> {
    for m in messages {
        let bytes = encode_message(m);
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(&bytes)?;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("record {index}: {source}")]
    Decode { index: usize, source: DecodeError },
    #[error("record {index} truncated")]
    Truncated { index: usize },
}

pub fn read_trace_log<R: Read>(mut r: R) -> Result<Vec<ProtocolMessage>, TraceError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut out = Vec::new();
    let mut off = 0;
    while off < buf.len() {
        let index = out.len();
        if buf.len() - off < 4 {
            return Err(TraceError::Truncated { index });
        }
        let n = le_u32(&buf[off..off + 4]) as usize;
        off += 4;
        if buf.len() - off < n {
            return Err(TraceError::Truncated { index });
        }
        let m = decode_message(&buf[off..off + n]).map_err(|source| TraceError::Decode { index, source })?;
        out.push(m);
        off += n;
    }
    Ok(out)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid link: {0}")]
    Link(String),
    #[error("{links} links for {infrastructures} infrastructures")]
    LinkCount { links: usize, infrastructures: usize },
    #[error("unknown policy {0:?}; valid names: LocVehicle, RandSelect, CombAll, Learn2com")]
    UnknownPolicy(String),
    #[error("attention: {0}")]
    Attention(String),
    #[error("pillar encoding: {0}")]
    Pillar(String),
}

impl From<AttentionError> for NetError {
    fn from(e: AttentionError) -> Self {
        NetError::Attention(e.to_string())
    }
}

impl From<PillarError> for NetError {
    fn from(e: PillarError) -> Self {
        NetError::Pillar(e.to_string())
    }
}

/// One vehicle/infrastructure link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    /// Bytes per second.
    pub capacity: f64,
    /// Propagation delay in seconds.
    pub latency: f64,
    /// Per-message drop probability.
    pub loss: f64,
}

impl LinkModel {
    pub fn new(capacity: f64, latency: f64, loss: f64) -> Result<Self, NetError> {
        let l = Self { capacity, latency, loss };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.capacity > 0.0 && self.capacity.is_finite()) {
            return Err(NetError::Link(format!("capacity must be positive, got {}", self.capacity)));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(NetError::Link(format!("latency must be non-negative, got {}", self.latency)));
        }
        if !(0.0..=1.0).contains(&self.loss) {
            return Err(NetError::Link(format!("loss probability {} outside [0, 1]", self.loss)));
        }
        Ok(())
    }
}

impl Default for LinkModel {
    /// 100 MB/s, 2 ms, lossless.
    fn default() -> Self {
        Self { capacity: 100.0 * MB, latency: 0.002, loss: 0.0 }
    }
}

/// Handshake phase a message belongs to. Phases run one after another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Broadcast,
    Reply,
    Request,
    Transfer,
}

/// One transmitted message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerEntry {
    pub phase: Phase,
    pub kind: MessageKind,
    /// Infrastructure link, or `None` for a broadcast on every link.
    pub link: Option<usize>,
    pub counted: u64,
    pub gross: u64,
    pub delivered: bool,
}

/// Bytes exchanged in one frame.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BandwidthLedger {
    pub entries: Vec<LedgerEntry>,
}

impl BandwidthLedger {
    pub fn record(&mut self, phase: Phase, link: Option<usize>, m: &ProtocolMessage, delivered: bool) {
        self.entries.push(LedgerEntry {
            phase,
            kind: m.kind(),
            link,
            counted: m.payload.counted_len() as u64,
            gross: m.encoded_len() as u64,
            delivered,
        });
    }

    pub fn counted_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.counted).sum()
    }

    pub fn gross_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.gross).sum()
    }

    pub fn counted_by_kind(&self, kind: MessageKind) -> u64 {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.counted).sum()
    }

    pub fn counted_kb(&self) -> f64 {
        self.counted_bytes() as f64 / KB
    }

    pub fn counted_mb(&self) -> f64 {
        self.counted_bytes() as f64 / MB
    }

    /// Rows `frame,policy,kind,bytes,KB`, one per message kind present.
    pub fn csv_rows(&self, frame: u32, policy: &str) -> String {
        let mut s = String::new();
        for kind in MessageKind::ALL {
            if self.entries.iter().any(|e| e.kind == kind) {
                let b = self.counted_by_kind(kind);
                s.push_str(&format!("{frame},{policy},{},{b},{}\n", kind.name(), b as f64 / KB));
            }
        }
        s
    }
}

pub const LEDGER_CSV_HEADER: &str = "frame,policy,kind,bytes,KB\n";

/// Sum over phases of the slowest message in the phase, each message taking
/// propagation plus counted bytes over capacity. A broadcast takes the
/// slowest link.
pub fn frame_latency(ledger: &BandwidthLedger, links: &[LinkModel]) -> Result<f64, NetError> {
    for l in links {
        l.validate()?;
    }
    let cost = |e: &LedgerEntry, l: &LinkModel| l.latency + e.counted as f64 / l.capacity;
    let mut total = 0.0;
    for phase in [Phase::Broadcast, Phase::Reply, Phase::Request, Phase::Transfer] {
        let mut worst: Option<f64> = None;
        for e in ledger.entries.iter().filter(|e| e.phase == phase) {
            let t = match e.link {
                Some(i) => {
                    let l = links.get(i).ok_or(NetError::LinkCount { links: links.len(), infrastructures: i + 1 })?;
                    cost(e, l)
                }
                None => links.iter().map(|l| cost(e, l)).fold(0.0, f64::max),
            };
            worst = Some(worst.map_or(t, |w: f64| w.max(t)));
        }
        total += worst.unwrap_or(0.0);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    LocVehicle,
    RandSelect { seed: u64 },
    CombAll,
    Learn2com(Box<AttentionState>),
}

impl Policy {
    pub const NAMES: [&'static str; 4] = ["LocVehicle", "RandSelect", "CombAll", "Learn2com"];

    pub fn name(&self) -> &'static str {
        match self {
            Policy::LocVehicle => "LocVehicle",
            Policy::RandSelect { .. } => "RandSelect",
            Policy::CombAll => "CombAll",
            Policy::Learn2com(_) => "Learn2com",
        }
    }

    /// Canonical policy name for a case-insensitive spelling.
    pub fn canonical_name(s: &str) -> Result<&'static str, NetError> {
        Self::NAMES
            .iter()
            .find(|n| n.eq_ignore_ascii_case(s.trim()))
            .copied()
            .ok_or_else(|| NetError::UnknownPolicy(s.to_string()))
    }
}

/// Every agent's pseudo-image for one frame, all in the vehicle frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub frame: u32,
    pub vehicle_pose: Pose,
    pub vehicle: PseudoImage,
    pub infrastructures: Vec<PseudoImage>,
}

impl FrameFeatures {
    pub fn compute(frame: &SceneFrame, encoder: &PillarEncoder) -> Result<Self, NetError> {
        let seed = derive_seed(frame.seed, "pillars", 0);
        let vehicle = encoder.encode(&frame.vehicle.cloud, seed)?;
        let infrastructures = (0..frame.n_infrastructures())
            .map(|i| encoder.encode(&frame.infrastructure_cloud_in_vehicle_frame(i), derive_seed(seed, "infra", i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { frame: frame.id, vehicle_pose: frame.vehicle.pose, vehicle, infrastructures })
    }
}

/// Result of one frame under one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    /// `[local, shared]`, `2C` channels.
    pub fused: PseudoImage,
    /// Infrastructures whose feature maps reached the vehicle.
    pub participants: Vec<usize>,
    /// Raw and normalized scores under learned selection.
    pub scores: Option<ScoreSet>,
    pub ledger: BandwidthLedger,
    /// Messages in send order, when recording was requested.
    pub messages: Vec<ProtocolMessage>,
    pub warnings: Vec<String>,
}

impl FrameOutcome {
    /// The selected infrastructure for single-selection policies.
    pub fn selected(&self) -> Option<usize> {
        match self.participants.as_slice() {
            [one] => Some(*one),
            _ => None,
        }
    }

    /// Sensor indices (0 = vehicle, `i + 1` = infrastructure `i`) whose
    /// returns contribute to detection.
    pub fn sensors(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.participants.iter().map(|i| i + 1)).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep full message copies (including feature maps) in the outcome.
    pub record_messages: bool,
}

fn pose_f32(p: &Pose) -> [f32; 4] {
    [p.position[0] as f32, p.position[1] as f32, p.position[2] as f32, p.yaw as f32]
}

struct Session<'a> {
    frame: u32,
    links: &'a [LinkModel],
    rng: SeededRng,
    ledger: BandwidthLedger,
    messages: Vec<ProtocolMessage>,
    record: bool,
}

impl Session<'_> {
    fn delivered(&mut self, link: Option<usize>) -> bool {
        let loss = link.map_or(0.0, |i| self.links[i].loss);
        loss == 0.0 || self.rng.next_f64() >= loss
    }

    /// Sends `m`; returns whether it arrived.
    fn send(&mut self, phase: Phase, link: Option<usize>, m: ProtocolMessage) -> bool {
        let delivered = self.delivered(link);
        self.ledger.record(phase, link, &m, delivered);
        if self.record {
            self.messages.push(m);
        }
        delivered
    }

    /// Request and transfer exchange with infrastructure `i`.
    fn fetch(&mut self, i: usize, image: &PseudoImage) -> bool {
        let req = ProtocolMessage { frame: self.frame, sender: VEHICLE_ID, payload: Payload::FeatureRequest };
        if !self.send(Phase::Request, Some(i), req) {
            return false;
        }
        if self.record {
            let msg = ProtocolMessage { frame: self.frame, sender: i as u16 + 1, payload: Payload::feature(image) };
            return self.send(Phase::Transfer, Some(i), msg);
        }
        // ledger only, without copying the map into a message
        let counted = image.data.len() as u64 * 4;
        let delivered = self.delivered(Some(i));
        self.ledger.entries.push(LedgerEntry {
            phase: Phase::Transfer,
            kind: MessageKind::FeaturePayload,
            link: Some(i),
            counted,
            gross: (HEADER_LEN + 12) as u64 + counted,
            delivered,
        });
        delivered
    }
}

/// Executes `policy` on precomputed features.
pub fn run_policy(
    features: &FrameFeatures,
    policy: &Policy,
    links: &[LinkModel],
    options: RunOptions,
) -> Result<FrameOutcome, NetError> {
    let n = features.infrastructures.len();
    if links.len() != n {
        return Err(NetError::LinkCount { links: links.len(), infrastructures: n });
    }
    for l in links {
        l.validate()?;
    }
    let local = &features.vehicle;
    let zeros = || PseudoImage::zeros(local.channels(), local.height(), local.width());
    let mut s = Session {
        frame: features.frame,
        links,
        rng: SeededRng::new(derive_seed(u64::from(features.frame), "link-loss", 0)),
        ledger: BandwidthLedger::default(),
        messages: Vec::new(),
        record: options.record_messages,
    };
    let mut warnings = Vec::new();
    let mut participants = Vec::new();
    let mut scores = None;
    let shared = match policy {
        Policy::LocVehicle => zeros(),
        Policy::RandSelect { seed } => {
            if n == 0 {
                zeros()
            } else {
                let mut rng = SeededRng::new(derive_seed(*seed, "randselect", u64::from(features.frame)));
                let j = rng.index(n);
                if s.fetch(j, &features.infrastructures[j]) {
                    participants.push(j);
                    features.infrastructures[j].clone()
                } else {
                    zeros()
                }
            }
        }
        Policy::CombAll => {
            let mut acc = zeros();
            let mut got = Vec::new();
            for i in 0..n {
                if s.fetch(i, &features.infrastructures[i]) {
                    got.push(i);
                }
            }
            if !got.is_empty() {
                let w = 1.0 / got.len() as f32;
                for &i in &got {
                    acc.data.scaled_add(w, &features.infrastructures[i].data);
                }
            }
            participants = got;
            acc
        }
        Policy::Learn2com(state) => {
            if n == 0 {
                warnings.push(format!("frame {}: no infrastructures, falling back to local-only", features.frame));
                zeros()
            } else {
                let query = state.query(local)?;
                let q = ProtocolMessage {
                    frame: features.frame,
                    sender: VEHICLE_ID,
                    payload: Payload::QueryBroadcast {
                        query: query.0.iter().map(|&v| v as f32).collect(),
                        pose: pose_f32(&features.vehicle_pose),
                    },
                };
                let received_query = match &q.payload {
                    Payload::QueryBroadcast { query, .. } => crate::attention::QueryVector(query.iter().map(|&v| f64::from(v)).collect()),
                    _ => unreachable!(),
                };
                s.send(Phase::Broadcast, None, q);
                let mut raw = Vec::new();
                let mut ids = Vec::new();
                for i in 0..n {
                    let key = state.key(&features.infrastructures[i])?;
                    let t = crate::attention::matching_score(&received_query, &key, &state.matrix)?.value as f32;
                    let reply = ProtocolMessage { frame: features.frame, sender: i as u16 + 1, payload: Payload::ScoreReply { score: t } };
                    if s.send(Phase::Reply, Some(i), reply) {
                        raw.push(f64::from(t));
                        ids.push(i);
                    }
                }
                if ids.is_empty() {
                    warnings.push(format!("frame {}: no score replies arrived", features.frame));
                    zeros()
                } else {
                    let set = normalize_scores_with_ids(&raw, ids)?;
                    let j = select_infrastructure(&set)?;
                    let weight = set.weight_of(j).unwrap_or(0.0);
                    scores = Some(set);
                    if s.fetch(j, &features.infrastructures[j]) {
                        participants.push(j);
                        refine_feature(&features.infrastructures[j], weight)
                    } else {
                        zeros()
                    }
                }
            }
        }
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    let fused = fuse_inference(local, &shared)?;
    Ok(FrameOutcome { fused, participants, scores, ledger: s.ledger, messages: s.messages, warnings })
}

/// Encodes every agent's view of `frame` and runs `policy`.
pub fn run_frame(
    frame: &SceneFrame,
    encoder: &PillarEncoder,
    policy: &Policy,
    links: &[LinkModel],
    options: RunOptions,
) -> Result<FrameOutcome, NetError> {
    let f = FrameFeatures::compute(frame, encoder)?;
    run_policy(&f, policy, links, options)
}
