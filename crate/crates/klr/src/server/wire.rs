//! Framed socket protocol for the policy store.
//!
//! Every message is a length-prefixed frame: a 4-byte big-endian body length
//! followed by the body. Request bodies start with a 1-byte opcode
//! (`PUSH=1, FETCH=2, FETCH_SET=3, LIST=4, SNAPSHOT_RING=5`); response bodies
//! start with `opcode | 0x80` and a 1-byte status. Snapshot-bearing messages
//! carry the self-describing header `level_id: u32, version: u64,
//! checksum: u64` (all big-endian) followed by the raw payload. The exact
//! byte layout is documented in `docs/protocol.md`.

use super::{PartnerSetRule, PolicySnapshot, PolicyStore, ServerError};
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

pub const OP_PUSH: u8 = 1;
pub const OP_FETCH: u8 = 2;
pub const OP_FETCH_SET: u8 = 3;
pub const OP_LIST: u8 = 4;
pub const OP_SNAPSHOT_RING: u8 = 5;
pub const RESPONSE_FLAG: u8 = 0x80;

pub const STATUS_OK: u8 = 0;
pub const STATUS_NOT_READY: u8 = 1;
pub const STATUS_UNREGISTERED: u8 = 2;
pub const STATUS_EVICTED: u8 = 3;
pub const STATUS_CORRUPT: u8 = 4;
pub const STATUS_MALFORMED: u8 = 5;
pub const STATUS_UNKNOWN_OPCODE: u8 = 6;
pub const STATUS_RESERVED_LEVEL: u8 = 7;

/// Upper bound on a frame body; anything larger is treated as malformed.
pub const MAX_FRAME_LEN: usize = 256 << 20;

pub const RING_MODE_READ: u8 = 0;
pub const RING_MODE_ARCHIVE: u8 = 1;

fn status_to_error(status: u8, level: u32, version: u64) -> ServerError {
    match status {
        STATUS_NOT_READY => ServerError::NotReady { level, version },
        STATUS_UNREGISTERED => ServerError::Unregistered(level),
        STATUS_EVICTED => ServerError::Evicted { level, version },
        STATUS_CORRUPT => ServerError::Corrupt(level),
        STATUS_RESERVED_LEVEL => ServerError::ReservedLevel,
        other => ServerError::Wire(format!("server status {other}")),
    }
}

fn error_to_status(err: &ServerError) -> u8 {
    match err {
        ServerError::NotReady { .. } => STATUS_NOT_READY,
        ServerError::Unregistered(_) => STATUS_UNREGISTERED,
        ServerError::Evicted { .. } => STATUS_EVICTED,
        ServerError::Corrupt(_) => STATUS_CORRUPT,
        ServerError::ReservedLevel => STATUS_RESERVED_LEVEL,
        ServerError::Wire(_) => STATUS_MALFORMED,
    }
}

/// Reads one length-prefixed frame; `None` on clean end-of-stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len_bytes = [0u8; 4];
    match r.read_exact(&mut len_bytes) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len_bytes) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> io::Result<()> {
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn u8(&mut self) -> Option<u8> {
        let v = *self.data.get(self.pos)?;
        self.pos += 1;
        Some(v)
    }

    fn u32(&mut self) -> Option<u32> {
        let bytes = self.data.get(self.pos..self.pos + 4)?;
        self.pos += 4;
        Some(u32::from_be_bytes(bytes.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        let bytes = self.data.get(self.pos..self.pos + 8)?;
        self.pos += 8;
        Some(u64::from_be_bytes(bytes.try_into().unwrap()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.data[self.pos..];
        self.pos = self.data.len();
        out
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let bytes = self.data.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(bytes)
    }
}

fn put_header(out: &mut Vec<u8>, level: u32, version: u64, checksum: u64) {
    out.extend_from_slice(&level.to_be_bytes());
    out.extend_from_slice(&version.to_be_bytes());
    out.extend_from_slice(&checksum.to_be_bytes());
}

fn put_snapshot_entry(out: &mut Vec<u8>, snap: &PolicySnapshot) {
    put_header(out, snap.level_id, snap.version, snap.checksum);
    out.extend_from_slice(&(snap.payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&snap.payload);
}

fn parse_snapshot_entry(c: &mut Cursor) -> Option<PolicySnapshot> {
    let level_id = c.u32()?;
    let version = c.u64()?;
    let checksum = c.u64()?;
    let len = c.u32()? as usize;
    let payload = c.take(len)?.to_vec();
    Some(PolicySnapshot {
        level_id,
        version,
        payload,
        checksum,
    })
}

fn malformed(opcode: u8) -> Vec<u8> {
    vec![opcode | RESPONSE_FLAG, STATUS_MALFORMED]
}

/// Executes one request body against the store and produces the response
/// body. Pure with respect to the connection, so it is unit-testable and
/// shared by every connection thread.
pub fn handle_request(store: &PolicyStore, body: &[u8]) -> Vec<u8> {
    let mut c = Cursor::new(body);
    let opcode = match c.u8() {
        Some(op) => op,
        None => return vec![RESPONSE_FLAG, STATUS_MALFORMED],
    };
    match opcode {
        OP_PUSH => {
            let (Some(level), Some(_version), Some(checksum)) = (c.u32(), c.u64(), c.u64()) else {
                return malformed(opcode);
            };
            let payload = c.rest().to_vec();
            if super::fnv1a64(&payload) != checksum {
                log::warn!("push to level {level} rejected: checksum mismatch");
                return vec![opcode | RESPONSE_FLAG, STATUS_CORRUPT];
            }
            match store.push(level, payload) {
                Ok(version) => {
                    log::debug!("push level={level} version={version}");
                    let mut out = vec![opcode | RESPONSE_FLAG, STATUS_OK];
                    put_header(&mut out, level, version, checksum);
                    out
                }
                Err(e) => vec![opcode | RESPONSE_FLAG, error_to_status(&e)],
            }
        }
        OP_FETCH => {
            let (Some(level), Some(version), Some(_)) = (c.u32(), c.u64(), c.u64()) else {
                return malformed(opcode);
            };
            match store.fetch(level, version) {
                Ok(snap) => {
                    log::debug!("fetch level={level} version={}", snap.version);
                    let mut out = vec![opcode | RESPONSE_FLAG, STATUS_OK];
                    put_header(&mut out, snap.level_id, snap.version, snap.checksum);
                    out.extend_from_slice(&snap.payload);
                    out
                }
                Err(e) => vec![opcode | RESPONSE_FLAG, error_to_status(&e)],
            }
        }
        OP_FETCH_SET => {
            let (Some(level), Some(version), Some(_), Some(rule_byte)) =
                (c.u32(), c.u64(), c.u64(), c.u8())
            else {
                return malformed(opcode);
            };
            let Some(rule) = PartnerSetRule::from_u8(rule_byte) else {
                return malformed(opcode);
            };
            match store.fetch_partner_set(level, rule, version) {
                Ok(snaps) => {
                    log::debug!("fetch_set level={level} rule={rule_byte} n={}", snaps.len());
                    let mut out = vec![opcode | RESPONSE_FLAG, STATUS_OK];
                    out.extend_from_slice(&(snaps.len() as u32).to_be_bytes());
                    for snap in &snaps {
                        put_snapshot_entry(&mut out, snap);
                    }
                    out
                }
                Err(e) => vec![opcode | RESPONSE_FLAG, error_to_status(&e)],
            }
        }
        OP_LIST => {
            let listing = store.list();
            let mut out = vec![opcode | RESPONSE_FLAG, STATUS_OK];
            out.extend_from_slice(&(listing.len() as u32).to_be_bytes());
            for (level, version) in listing {
                out.extend_from_slice(&level.to_be_bytes());
                out.extend_from_slice(&version.to_be_bytes());
            }
            out
        }
        OP_SNAPSHOT_RING => {
            let (Some(level), Some(_), Some(_), Some(mode)) = (c.u32(), c.u64(), c.u64(), c.u8())
            else {
                return malformed(opcode);
            };
            match mode {
                RING_MODE_ARCHIVE => match store.archive(level) {
                    Ok(version) => {
                        log::debug!("archive level={level} version={version}");
                        let mut out = vec![opcode | RESPONSE_FLAG, STATUS_OK];
                        put_header(&mut out, level, version, 0);
                        out
                    }
                    Err(e) => vec![opcode | RESPONSE_FLAG, error_to_status(&e)],
                },
                RING_MODE_READ => match store.snapshot_ring(level) {
                    Ok(snaps) => {
                        let mut out = vec![opcode | RESPONSE_FLAG, STATUS_OK];
                        out.extend_from_slice(&(snaps.len() as u32).to_be_bytes());
                        for snap in &snaps {
                            put_snapshot_entry(&mut out, snap);
                        }
                        out
                    }
                    Err(e) => vec![opcode | RESPONSE_FLAG, error_to_status(&e)],
                },
                _ => malformed(opcode),
            }
        }
        _ => vec![opcode | RESPONSE_FLAG, STATUS_UNKNOWN_OPCODE],
    }
}

/// Background socket server over a shared store.
pub struct SocketServer {
    local_addr: std::net::SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl SocketServer {
    /// Binds and starts serving on a background thread.
    pub fn start(addr: impl ToSocketAddrs, store: Arc<PolicyStore>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&shutdown);
        let accept_thread = std::thread::spawn(move || {
            let mut workers = Vec::new();
            loop {
                if flag.load(Ordering::Relaxed) {
                    break;
                }
                match listener.accept() {
                    Ok((stream, peer)) => {
                        log::info!("connection from {peer}");
                        stream.set_nonblocking(false).ok();
                        let store = Arc::clone(&store);
                        let flag = Arc::clone(&flag);
                        workers.push(std::thread::spawn(move || {
                            serve_connection(stream, store, flag);
                        }));
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(2));
                    }
                    Err(e) => {
                        log::warn!("accept error: {e}");
                        break;
                    }
                }
            }
            for w in workers {
                w.join().ok();
            }
        });
        Ok(Self {
            local_addr,
            shutdown,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn local_addr(&self) -> std::net::SocketAddr {
        self.local_addr
    }

    pub fn shutdown(mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(t) = self.accept_thread.take() {
            t.join().ok();
        }
    }
}

impl Drop for SocketServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(t) = self.accept_thread.take() {
            t.join().ok();
        }
    }
}

fn serve_connection(mut stream: TcpStream, store: Arc<PolicyStore>, shutdown: Arc<AtomicBool>) {
    // A short read timeout lets the thread notice shutdown between requests.
    stream
        .set_read_timeout(Some(Duration::from_millis(200)))
        .ok();
    loop {
        if shutdown.load(Ordering::Relaxed) {
            break;
        }
        match read_frame(&mut stream) {
            Ok(Some(body)) => {
                let response = handle_request(&store, &body);
                if write_frame(&mut stream, &response).is_err() {
                    break;
                }
            }
            Ok(None) => break,
            Err(e)
                if e.kind() == io::ErrorKind::WouldBlock
                    || e.kind() == io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                // Oversized frame: report and keep the connection.
                if write_frame(&mut stream, &[RESPONSE_FLAG, STATUS_MALFORMED]).is_err() {
                    break;
                }
            }
            Err(_) => break,
        }
    }
}

/// Blocking client for the framed protocol.
pub struct SocketClient {
    stream: TcpStream,
}

impl SocketClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true).ok();
        Ok(Self { stream })
    }

    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>, ServerError> {
        write_frame(&mut self.stream, request)
            .map_err(|e| ServerError::Wire(format!("send: {e}")))?;
        loop {
            match read_frame(&mut self.stream) {
                Ok(Some(body)) => return Ok(body),
                Ok(None) => return Err(ServerError::Wire("connection closed".into())),
                Err(e)
                    if e.kind() == io::ErrorKind::WouldBlock
                        || e.kind() == io::ErrorKind::TimedOut =>
                {
                    continue;
                }
                Err(e) => return Err(ServerError::Wire(format!("recv: {e}"))),
            }
        }
    }

    fn expect_ok(
        &mut self,
        request: &[u8],
        opcode: u8,
        level: u32,
        version: u64,
    ) -> Result<Vec<u8>, ServerError> {
        let body = self.round_trip(request)?;
        let mut c = Cursor::new(&body);
        let resp_op = c
            .u8()
            .ok_or_else(|| ServerError::Wire("empty response".into()))?;
        if resp_op != opcode | RESPONSE_FLAG {
            return Err(ServerError::Wire(format!(
                "response opcode {resp_op:#x} for request {opcode:#x}"
            )));
        }
        let status = c
            .u8()
            .ok_or_else(|| ServerError::Wire("missing status".into()))?;
        if status != STATUS_OK {
            return Err(status_to_error(status, level, version));
        }
        Ok(body[2..].to_vec())
    }
}

impl super::ServerHandle for SocketClient {
    fn push(&mut self, level_id: u32, payload: Vec<u8>) -> Result<u64, ServerError> {
        let checksum = super::fnv1a64(&payload);
        let mut req = vec![OP_PUSH];
        put_header(&mut req, level_id, 0, checksum);
        req.extend_from_slice(&payload);
        let rest = self.expect_ok(&req, OP_PUSH, level_id, 0)?;
        let mut c = Cursor::new(&rest);
        let (_level, version) = (c.u32(), c.u64());
        version.ok_or_else(|| ServerError::Wire("short push response".into()))
    }

    fn fetch(&mut self, level_id: u32, version: u64) -> Result<PolicySnapshot, ServerError> {
        let mut req = vec![OP_FETCH];
        put_header(&mut req, level_id, version, 0);
        let rest = self.expect_ok(&req, OP_FETCH, level_id, version)?;
        let mut c = Cursor::new(&rest);
        let (Some(level), Some(version), Some(checksum)) = (c.u32(), c.u64(), c.u64()) else {
            return Err(ServerError::Wire("short fetch response".into()));
        };
        let snap = PolicySnapshot {
            level_id: level,
            version,
            payload: c.rest().to_vec(),
            checksum,
        };
        if !snap.verify() {
            return Err(ServerError::Corrupt(level));
        }
        Ok(snap)
    }

    fn fetch_partner_set(
        &mut self,
        level_id: u32,
        rule: PartnerSetRule,
        version: u64,
    ) -> Result<Vec<PolicySnapshot>, ServerError> {
        let mut req = vec![OP_FETCH_SET];
        put_header(&mut req, level_id, version, 0);
        req.push(rule.as_u8());
        let rest = self.expect_ok(&req, OP_FETCH_SET, level_id, version)?;
        let mut c = Cursor::new(&rest);
        let count = c
            .u32()
            .ok_or_else(|| ServerError::Wire("short set response".into()))?;
        let mut snaps = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let snap = parse_snapshot_entry(&mut c)
                .ok_or_else(|| ServerError::Wire("truncated snapshot entry".into()))?;
            if !snap.verify() {
                return Err(ServerError::Corrupt(snap.level_id));
            }
            snaps.push(snap);
        }
        Ok(snaps)
    }

    fn archive(&mut self, level_id: u32) -> Result<u64, ServerError> {
        let mut req = vec![OP_SNAPSHOT_RING];
        put_header(&mut req, level_id, 0, 0);
        req.push(RING_MODE_ARCHIVE);
        let rest = self.expect_ok(&req, OP_SNAPSHOT_RING, level_id, 0)?;
        let mut c = Cursor::new(&rest);
        let (_level, version) = (c.u32(), c.u64());
        version.ok_or_else(|| ServerError::Wire("short archive response".into()))
    }

    fn snapshot_ring(&mut self, level_id: u32) -> Result<Vec<PolicySnapshot>, ServerError> {
        let mut req = vec![OP_SNAPSHOT_RING];
        put_header(&mut req, level_id, 0, 0);
        req.push(RING_MODE_READ);
        let rest = self.expect_ok(&req, OP_SNAPSHOT_RING, level_id, 0)?;
        let mut c = Cursor::new(&rest);
        let count = c
            .u32()
            .ok_or_else(|| ServerError::Wire("short ring response".into()))?;
        let mut snaps = Vec::with_capacity(count as usize);
        for _ in 0..count {
            snaps.push(
                parse_snapshot_entry(&mut c)
                    .ok_or_else(|| ServerError::Wire("truncated ring entry".into()))?,
            );
        }
        Ok(snaps)
    }

    fn list(&mut self) -> Result<Vec<(u32, u64)>, ServerError> {
        let req = vec![OP_LIST];
        let rest = self.expect_ok(&req, OP_LIST, 0, 0)?;
        let mut c = Cursor::new(&rest);
        let count = c
            .u32()
            .ok_or_else(|| ServerError::Wire("short list response".into()))?;
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let (Some(level), Some(version)) = (c.u32(), c.u64()) else {
                return Err(ServerError::Wire("truncated list entry".into()));
            };
            out.push((level, version));
        }
        Ok(out)
    }
}
