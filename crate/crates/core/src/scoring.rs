//! Branch input assembly, scorer backends and per-branch linear heads.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SCHEMA_VERSION;
use crate::recall::SegmentSet;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Hidden size of the reference encoder.
pub const DEFAULT_DIM: usize = 768;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Read,
    Observe,
    Recall,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Read, Branch::Observe, Branch::Recall];

    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Read => "read",
            Branch::Observe => "observe",
            Branch::Recall => "recall",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "read" | "r" => Ok(Branch::Read),
            "observe" | "o" => Ok(Branch::Observe),
            "recall" | "ll" => Ok(Branch::Recall),
            other => Err(Error::Config(format!("unknown branch {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchInput {
    pub branch: Branch,
    pub candidate_index: usize,
    pub segment_index: Option<usize>,
    pub text: String,
}

/// Joins the non-empty trimmed parts with single spaces.
fn join_parts(parts: &[&str]) -> String {
    let mut out = String::new();
    for p in parts.iter().map(|p| p.trim()).filter(|p| !p.is_empty()) {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(p);
    }
    out
}

/// `[CLS] subs q [SEP] a [SEP]`
pub fn assemble_read(subs: &str, question: &str, answer: &str, candidate_index: usize) -> BranchInput {
    BranchInput {
        branch: Branch::Read,
        candidate_index,
        segment_index: None,
        text: join_parts(&[CLS, subs, question, SEP, answer, SEP]),
    }
}

/// `[CLS] d q [SEP] a [SEP]`
pub fn assemble_observe(description: &str, question: &str, answer: &str, candidate_index: usize) -> BranchInput {
    BranchInput {
        branch: Branch::Observe,
        candidate_index,
        segment_index: None,
        text: join_parts(&[CLS, description, question, SEP, answer, SEP]),
    }
}

/// `[CLS] q [SEP] a k_j [SEP]`: the segment shares the answer block.
pub fn assemble_recall(
    question: &str,
    answer: &str,
    segment: &str,
    candidate_index: usize,
    segment_index: usize,
) -> BranchInput {
    BranchInput {
        branch: Branch::Recall,
        candidate_index,
        segment_index: Some(segment_index),
        text: join_parts(&[CLS, question, SEP, answer, segment, SEP]),
    }
}

/// `[CLS] q [SEP] a [SEP]`, the question-answer input of the QA-att fusion.
pub fn assemble_qa(question: &str, answer: &str) -> String {
    join_parts(&[CLS, question, SEP, answer, SEP])
}

pub fn read_inputs<S: AsRef<str>>(subs: &str, question: &str, candidates: &[S]) -> Vec<BranchInput> {
    candidates
        .iter()
        .enumerate()
        .map(|(c, a)| assemble_read(subs, question, a.as_ref(), c))
        .collect()
}

pub fn observe_inputs<S: AsRef<str>>(description: &str, question: &str, candidates: &[S]) -> Vec<BranchInput> {
    candidates
        .iter()
        .enumerate()
        .map(|(c, a)| assemble_observe(description, question, a.as_ref(), c))
        .collect()
}

/// One input per candidate and retained segment; padded segments get none.
pub fn recall_inputs<S: AsRef<str>>(question: &str, candidates: &[S], segments: &SegmentSet) -> Vec<BranchInput> {
    candidates
        .iter()
        .enumerate()
        .flat_map(|(c, a)| {
            segments
                .retained()
                .map(move |(j, seg)| assemble_recall(question, a.as_ref(), &seg.text, c, j))
        })
        .collect()
}

/// Text encoder producing the `[CLS]` representation of an input string.
///
/// Implementations must be deterministic per instance and safe to call
/// concurrently.
pub trait ScorerBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "at", "be", "by", "did", "do", "does", "for", "from", "he", "her", "his", "how", "in",
    "s", "is", "it", "its", "of", "on", "or", "she", "that", "the", "their", "they", "this", "to", "was", "were",
    "what", "when", "where", "which", "who", "whom", "why", "with",
];

/// Lowercase alphanumeric runs with markers and stopwords removed.
pub fn mock_tokens(text: &str) -> Vec<String> {
    text.replace(CLS, " ")
        .replace(SEP, " ")
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(t))
        .map(str::to_string)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic bag-of-words embedding.
///
/// * `v[0]`: repeated-token count `sum_t (n_t - 1)` over the whole input.
/// * `v[1]`: token count / 100.
/// * `v[2..]`: signed FNV-1a feature hashing of each token.
///
/// With [`LinearHead::reference`] the score equals `v[0]`, so for a fixed
/// context it grows by one for every answer token repeated from the context.
#[derive(Clone, Debug)]
pub struct MockBackend {
    dim: usize,
}

impl MockBackend {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("mock backend needs dim >= 2, got {dim}")));
        }
        Ok(MockBackend { dim })
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        MockBackend { dim: DEFAULT_DIM }
    }
}

impl ScorerBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = mock_tokens(text);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in &tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        let mut v = vec![0.0; self.dim];
        v[0] = counts.values().map(|n| (n - 1) as f64).sum();
        v[1] = tokens.len() as f64 / 100.0;
        let buckets = (self.dim - 2) as u64;
        if buckets > 0 {
            for t in &tokens {
                let h = fnv1a(t.as_bytes());
                let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                v[2 + (h % buckets) as usize] += sign;
            }
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HeadSidecar {
    schema_version: u32,
    dim: usize,
    branch: Option<Branch>,
    bias: f64,
}

/// `alpha = w . y + b`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearHead {
    pub fn new(weights: Vec<f64>, bias: f64) -> Self {
        LinearHead { weights, bias }
    }

    pub fn zeros(dim: usize) -> Self {
        LinearHead::new(vec![0.0; dim], 0.0)
    }

    /// Unit weight on the mock overlap feature.
    pub fn reference(dim: usize) -> Self {
        let mut h = LinearHead::zeros(dim);
        if let Some(w) = h.weights.first_mut() {
            *w = 1.0;
        }
        h
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn apply(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.weights.len() {
            return Err(Error::Dimension {
                expected: self.weights.len(),
                got: y.len(),
            });
        }
        Ok(dot(&self.weights, y) + self.bias)
    }

    pub fn sidecar_path(bin: &Path) -> PathBuf {
        bin.with_extension("json")
    }

    /// Weights as f64 little-endian; bias and shape in the JSON sidecar.
    pub fn write(&self, bin: impl AsRef<Path>, branch: Option<Branch>) -> Result<()> {
        let bin = bin.as_ref();
        let bytes: Vec<u8> = self.weights.iter().flat_map(|w| w.to_le_bytes()).collect();
        std::fs::write(bin, bytes).map_err(|e| Error::io(bin, e))?;
        let side = HeadSidecar {
            schema_version: SCHEMA_VERSION,
            dim: self.dim(),
            branch,
            bias: self.bias,
        };
        let path = Self::sidecar_path(bin);
        let json = serde_json::to_string_pretty(&side).map_err(|e| Error::InvalidInput(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(bin: impl AsRef<Path>) -> Result<(Self, Option<Branch>)> {
        let bin = bin.as_ref();
        let path = Self::sidecar_path(bin);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let side: HeadSidecar =
            serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        let bytes = std::fs::read(bin).map_err(|e| Error::io(bin, e))?;
        if bytes.len() != side.dim * 8 {
            return Err(Error::Dimension {
                expected: side.dim,
                got: bytes.len() / 8,
            });
        }
        let weights = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok((LinearHead::new(weights, side.bias), side.branch))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One head per branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchHeads {
    pub read: LinearHead,
    pub observe: LinearHead,
    pub recall: LinearHead,
}

impl BranchHeads {
    pub fn reference(dim: usize) -> Self {
        BranchHeads {
            read: LinearHead::reference(dim),
            observe: LinearHead::reference(dim),
            recall: LinearHead::reference(dim),
        }
    }

    pub fn get(&self, b: Branch) -> &LinearHead {
        match b {
            Branch::Read => &self.read,
            Branch::Observe => &self.observe,
            Branch::Recall => &self.recall,
        }
    }

    pub fn get_mut(&mut self, b: Branch) -> &mut LinearHead {
        match b {
            Branch::Read => &mut self.read,
            Branch::Observe => &mut self.observe,
            Branch::Recall => &mut self.recall,
        }
    }

    /// Loads `<dir>/{read,observe,recall}.bin`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let load = |b: Branch| -> Result<LinearHead> {
            let (head, tagged) = LinearHead::load(dir.join(format!("{b}.bin")))?;
            if tagged.is_some_and(|t| t != b) {
                return Err(Error::Config(format!("{b}.bin is tagged as another branch")));
            }
            Ok(head)
        };
        let heads = BranchHeads {
            read: load(Branch::Read)?,
            observe: load(Branch::Observe)?,
            recall: load(Branch::Recall)?,
        };
        heads.check_dim(heads.read.dim())?;
        Ok(heads)
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for b in Branch::ALL {
            self.get(b).write(dir.join(format!("{b}.bin")), Some(b))?;
        }
        Ok(())
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        for b in Branch::ALL {
            if self.get(b).dim() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: self.get(b).dim(),
                });
            }
        }
        Ok(())
    }
}

/// Embeds every input concurrently; results keep input order.
pub fn embed_inputs(backend: &dyn ScorerBackend, inputs: &[BranchInput]) -> Result<Vec<Vec<f64>>> {
    inputs
        .par_iter()
        .map(|input| {
            let y = backend.embed(&input.text).map_err(|e| Error::Backend {
                branch: input.branch,
                candidate: input.candidate_index,
                segment: input.segment_index,
                message: e.to_string(),
            })?;
            if y.len() != backend.dim() {
                return Err(Error::Backend {
                    branch: input.branch,
                    candidate: input.candidate_index,
                    segment: input.segment_index,
                    message: format!("embedding has dimension {}, expected {}", y.len(), backend.dim()),
                });
            }
            Ok(y)
        })
        .collect()
}

/// `w . embed(text) + b` per input, in input order.
pub fn score_branch(backend: &dyn ScorerBackend, head: &LinearHead, inputs: &[BranchInput]) -> Result<Vec<f64>> {
    if head.dim() != backend.dim() {
        return Err(Error::Dimension {
            expected: backend.dim(),
            got: head.dim(),
        });
    }
    embed_inputs(backend, inputs)?.iter().map(|y| head.apply(y)).collect()
}

/// Groups recall scores into an `N_ca x N_s_MAX` matrix (`None` = padded).
pub fn recall_matrix(
    inputs: &[BranchInput],
    scores: &[f64],
    n_candidates: usize,
    max_segments: usize,
) -> Vec<Vec<Option<f64>>> {
    let mut m = vec![vec![None; max_segments]; n_candidates];
    for (input, &s) in inputs.iter().zip(scores) {
        if let Some(j) = input.segment_index {
            m[input.candidate_index][j] = Some(s);
        }
    }
    m
}

/// Max over non-padded entries; `None` when every entry is padded.
pub fn max_over_segments(row: &[Option<f64>]) -> Option<f64> {
    row.iter().flatten().copied().reduce(f64::max)
}

/// Index of the best non-padded segment; ties keep the earlier one.
pub fn argmax_segment(row: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, s) in row.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
    }
    best.map(|(j, _)| j)
}

/// Per-candidate branch scores; a `None` branch is disabled or masked.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchScores {
    pub read: Option<Vec<f64>>,
    pub observe: Option<Vec<f64>>,
    pub recall: Option<Vec<f64>>,
    pub recall_per_segment: Option<Vec<Vec<Option<f64>>>>,
}

impl BranchScores {
    pub fn from_triple(read: Vec<f64>, observe: Vec<f64>, recall: Vec<f64>) -> Self {
        BranchScores {
            read: Some(read),
            observe: Some(observe),
            recall: Some(recall),
            recall_per_segment: None,
        }
    }

    /// Sets both recall fields from a per-segment matrix.
    pub fn with_recall_segments(mut self, per_segment: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let recall = per_segment
            .iter()
            .enumerate()
            .map(|(c, row)| {
                max_over_segments(row)
                    .ok_or_else(|| Error::InvalidInput(format!("candidate {c} has no recall segment")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.recall = Some(recall);
        self.recall_per_segment = Some(per_segment);
        Ok(self)
    }

    pub fn get(&self, b: Branch) -> Option<&[f64]> {
        match b {
            Branch::Read => self.read.as_deref(),
            Branch::Observe => self.observe.as_deref(),
            Branch::Recall => self.recall.as_deref(),
        }
    }

    pub fn active(&self) -> impl Iterator<Item = (Branch, &[f64])> {
        Branch::ALL.into_iter().filter_map(|b| self.get(b).map(|s| (b, s)))
    }

    /// Candidate count shared by every active branch.
    pub fn n_candidates(&self) -> Result<usize> {
        let mut n = None;
        for (b, s) in self.active() {
            match n {
                None => n = Some(s.len()),
                Some(m) if m != s.len() => {
                    return Err(Error::InvalidInput(format!("{b} has {} scores, expected {m}", s.len())))
                }
                _ => {}
            }
        }
        n.filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidInput("no active branch scores".into()))
    }
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    texts: Option<&'a [String]>,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    id: u64,
    #[serde(default)]
    embedding: Option<Vec<f64>>,
    #[serde(default)]
    scores: Option<Vec<f64>>,
    #[serde(default)]
    error: Option<String>,
    #[serde(default)]
    truncated: bool,
}

/// Greeting sent by the service on connect.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: String,
    pub version: u32,
    pub dim: usize,
    pub model: String,
}

pub const PROTOCOL_NAME: &str = "roll-scorer";
pub const PROTOCOL_VERSION: u32 = 1;

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// Client for the newline-delimited JSON scorer protocol over TCP.
///
/// Requests on one connection are serialized; a small pool of connections
/// lets concurrent callers proceed in parallel.
pub struct RemoteBackend {
    addr: String,
    handshake: Handshake,
    name: String,
    pool: Mutex<Vec<Connection>>,
    next_id: AtomicU64,
    truncations: AtomicU64,
}

impl RemoteBackend {
    pub fn connect(addr: &str) -> Result<Self> {
        let (conn, handshake) = Self::open(addr)?;
        Ok(RemoteBackend {
            addr: addr.to_string(),
            name: format!("remote:{}", handshake.model),
            handshake,
            pool: Mutex::new(vec![conn]),
            next_id: AtomicU64::new(1),
            truncations: AtomicU64::new(0),
        })
    }

    fn open(addr: &str) -> Result<(Connection, Handshake)> {
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| Error::Protocol(format!("resolve {addr}: {e}")))?
            .next()
            .ok_or_else(|| Error::Protocol(format!("no address for {addr}")))?;
        let stream = TcpStream::connect(sock).map_err(|e| Error::Protocol(format!("connect {addr}: {e}")))?;
        let writer = stream.try_clone().map_err(|e| Error::Protocol(e.to_string()))?;
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::Protocol(format!("handshake: {e}")))?;
        let hs: Handshake =
            serde_json::from_str(line.trim()).map_err(|e| Error::Protocol(format!("handshake: {e}")))?;
        if hs.protocol != PROTOCOL_NAME || hs.version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!(
                "unsupported protocol {} v{}",
                hs.protocol, hs.version
            )));
        }
        if hs.dim == 0 {
            return Err(Error::Protocol("handshake advertises dim 0".into()));
        }
        Ok((Connection { reader, writer }, hs))
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    /// Responses flagged as truncated so far.
    pub fn truncations(&self) -> u64 {
        self.truncations.load(Ordering::Relaxed)
    }

    fn roundtrip(&self, text: Option<&str>, texts: Option<&[String]>) -> Result<WireResponse> {
        let conn = self.pool.lock().expect("pool poisoned").pop();
        let mut conn = match conn {
            Some(c) => c,
            None => {
                let (c, hs) = Self::open(&self.addr)?;
                if hs != self.handshake {
                    return Err(Error::Protocol("service changed between connections".into()));
                }
                c
            }
        };
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let mut req =
            serde_json::to_string(&WireRequest { id, text, texts }).map_err(|e| Error::Protocol(e.to_string()))?;
        req.push('\n');
        conn.writer
            .write_all(req.as_bytes())
            .map_err(|e| Error::Protocol(format!("send: {e}")))?;
        let mut line = String::new();
        let n = conn
            .reader
            .read_line(&mut line)
            .map_err(|e| Error::Protocol(format!("receive: {e}")))?;
        if n == 0 {
            return Err(Error::Protocol("connection closed".into()));
        }
        let resp: WireResponse =
            serde_json::from_str(line.trim()).map_err(|e| Error::Protocol(format!("bad response: {e}")))?;
        // A connection is only reused after a complete exchange.
        self.pool.lock().expect("pool poisoned").push(conn);
        if resp.id != id {
            return Err(Error::Protocol(format!("response id {} for request {id}", resp.id)));
        }
        if let Some(err) = resp.error {
            return Err(Error::Protocol(err));
        }
        if resp.truncated {
            self.truncations.fetch_add(1, Ordering::Relaxed);
        }
        Ok(resp)
    }

    /// Direct-score mode: one score per text.
    pub fn score_direct(&self, texts: &[String]) -> Result<Vec<f64>> {
        let resp = self.roundtrip(None, Some(texts))?;
        let scores = resp
            .scores
            .ok_or_else(|| Error::Protocol("response carries no scores".into()))?;
        if scores.len() != texts.len() {
            return Err(Error::Protocol(format!(
                "{} scores for {} texts",
                scores.len(),
                texts.len()
            )));
        }
        Ok(scores)
    }
}

impl ScorerBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.handshake.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let resp = self.roundtrip(Some(text), None)?;
        let y = resp
            .embedding
            .ok_or_else(|| Error::Protocol("response carries no embedding".into()))?;
        if y.len() != self.handshake.dim {
            return Err(Error::Dimension {
                expected: self.handshake.dim,
                got: y.len(),
            });
        }
        Ok(y)
    }
}

/// Builds a backend from `mock`, `mock:<dim>` or `remote:<host:port>`.
pub fn backend_from_spec(spec: &str) -> Result<Box<dyn ScorerBackend>> {
    if spec == "mock" {
        return Ok(Box::new(MockBackend::default()));
    }
    if let Some(dim) = spec.strip_prefix("mock:") {
        let dim = dim
            .parse()
            .map_err(|_| Error::Config(format!("bad mock dimension {dim:?}")))?;
        return Ok(Box::new(MockBackend::new(dim)?));
    }
    if let Some(addr) = spec.strip_prefix("remote:") {
        return Ok(Box::new(RemoteBackend::connect(addr)?));
    }
    Err(Error::Config(format!("unknown backend {spec:?}")))
}
