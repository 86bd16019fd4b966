use std::io::{self, Read, Write};

use crate::federation::{ClientUpdate, RoundTask};
use crate::models::ModelWeights;
use crate::nn::optim::{OptimizerKind, OptimizerSpec};
use crate::tensor::Tensor;

use super::WireError;

pub const FRAME_MAGIC: [u8; 4] = *b"FLX1";
pub const WEIGHTS_FILE_MAGIC: [u8; 4] = *b"FLW1";
/// Magic, type byte and payload length.
pub const FRAME_HEADER_LEN: usize = 9;
/// Frames above this payload size are rejected before allocating.
pub const MAX_PAYLOAD: usize = 256 << 20;
/// The only dtype on the wire: little-endian IEEE-754 binary32.
pub const DTYPE_F32: u8 = 0;

const FLAG_AUGMENT: u8 = 1;
const FLAG_PERSIST_OPTIMIZER: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Ping = 0,
    Hello = 1,
    RoundStart = 2,
    RoundResult = 3,
    EvalReport = 4,
    Abort = 5,
    Shutdown = 6,
}

impl MessageKind {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Self::Ping,
            1 => Self::Hello,
            2 => Self::RoundStart,
            3 => Self::RoundResult,
            4 => Self::EvalReport,
            5 => Self::Abort,
            6 => Self::Shutdown,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Ping,
    /// Client -> server identification; the server echoes it to accept.
    Hello { client_id: usize },
    RoundStart(RoundTask),
    RoundResult(ClientUpdate),
    /// Server -> clients after each aggregated round.
    EvalReport { round: usize, metric: f64, loss: f64 },
    /// Either side gives up on `round` (0 during the handshake).
    Abort { round: usize, reason: String },
    Shutdown,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Ping => MessageKind::Ping,
            Message::Hello { .. } => MessageKind::Hello,
            Message::RoundStart(_) => MessageKind::RoundStart,
            Message::RoundResult(_) => MessageKind::RoundResult,
            Message::EvalReport { .. } => MessageKind::EvalReport,
            Message::Abort { .. } => MessageKind::Abort,
            Message::Shutdown => MessageKind::Shutdown,
        }
    }

    /// Round the message belongs to, if it names one.
    pub fn round(&self) -> Option<usize> {
        match self {
            Message::RoundStart(t) => Some(t.round),
            Message::RoundResult(u) => Some(u.round),
            Message::EvalReport { round, .. } | Message::Abort { round, .. } => Some(*round),
            _ => None,
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    fn count(&mut self, what: &str, v: usize) -> Result<(), WireError> {
        let v = u32::try_from(v).map_err(|_| WireError::TooLarge(format!("{what} {v} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }

    fn str(&mut self, s: &str) -> Result<(), WireError> {
        let len = u16::try_from(s.len()).map_err(|_| WireError::TooLarge(format!("string of {} bytes", s.len())))?;
        self.u16(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn crc(&mut self, from: usize) {
        let crc = crc32fast::hash(&self.buf[from..]);
        self.u32(crc);
    }

    /// Parameter count, then per tensor: name, dtype, rank, dims, values.
    fn weights(&mut self, w: &ModelWeights) -> Result<(), WireError> {
        self.count("parameter count", w.tensors.len())?;
        for (name, t) in &w.tensors {
            self.str(name)?;
            self.u8(DTYPE_F32);
            let ndim = u8::try_from(t.rank()).map_err(|_| WireError::TooLarge(format!("rank {}", t.rank())))?;
            self.u8(ndim);
            for &d in t.shape() {
                self.count("dimension", d)?;
            }
            self.buf.reserve(t.len() * 4);
            for v in t.data() {
                self.buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(WireError::Truncated { needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn usize(&mut self) -> Result<usize, WireError> {
        Ok(self.u32()? as usize)
    }

    fn str(&mut self) -> Result<String, WireError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WireError::Malformed("string is not UTF-8".into()))
    }

    /// Verifies the trailing CRC32 over everything before it and narrows the
    /// reader to that body, so corrupt lengths never drive parsing.
    fn strip_crc(&mut self) -> Result<(), WireError> {
        let split = self.buf.len().checked_sub(4).ok_or(WireError::Truncated {
            needed: 4,
            available: self.buf.len(),
        })?;
        let (body, tail) = self.buf.split_at(split);
        let expected = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if expected != actual {
            return Err(WireError::Crc { expected, actual });
        }
        self.buf = body;
        Ok(())
    }

    fn weights(&mut self, architecture: String) -> Result<ModelWeights, WireError> {
        let count = self.usize()?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = self.str()?;
            let dtype = self.u8()?;
            if dtype != DTYPE_F32 {
                return Err(WireError::Malformed(format!("parameter `{name}` has unknown dtype {dtype}")));
            }
            let ndim = self.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.usize()?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| WireError::Malformed(format!("parameter `{name}` shape {shape:?} overflows")))?;
            let data = self
                .take(len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| WireError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(ModelWeights { architecture, tensors })
    }

    fn finish(&self) -> Result<(), WireError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(WireError::Malformed(format!("{extra} unexpected trailing bytes"))),
        }
    }
}

fn encode_payload(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut w = Writer { buf: Vec::new() };
    match msg {
        Message::Ping | Message::Shutdown => {}
        Message::Hello { client_id } => w.count("client id", *client_id)?,
        Message::RoundStart(t) => {
            w.count("round", t.round)?;
            w.count("local epochs", t.local_epochs)?;
            w.count("batch size", t.batch_size)?;
            w.u8(t.optimizer.kind.code());
            w.f64(t.optimizer.lr);
            w.f64(t.optimizer.weight_decay);
            w.u64(t.seed);
            let mut flags = 0;
            if t.augment {
                flags |= FLAG_AUGMENT;
            }
            if t.persist_optimizer_state {
                flags |= FLAG_PERSIST_OPTIMIZER;
            }
            w.u8(flags);
            w.str(&t.weights.architecture)?;
            w.weights(&t.weights)?;
            w.crc(0);
        }
        Message::RoundResult(u) => {
            w.count("client id", u.client_id)?;
            w.count("round", u.round)?;
            w.count("sample count", u.num_samples)?;
            w.f64(u.train_loss);
            w.str(&u.weights.architecture)?;
            w.weights(&u.weights)?;
            w.crc(0);
        }
        Message::EvalReport { round, metric, loss } => {
            w.count("round", *round)?;
            w.f64(*metric);
            w.f64(*loss);
        }
        Message::Abort { round, reason } => {
            w.count("round", *round)?;
            w.str(reason)?;
        }
    }
    Ok(w.buf)
}

fn decode_payload(kind: MessageKind, payload: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader { buf: payload, pos: 0 };
    let msg = match kind {
        MessageKind::Ping => Message::Ping,
        MessageKind::Shutdown => Message::Shutdown,
        MessageKind::Hello => Message::Hello { client_id: r.usize()? },
        MessageKind::RoundStart => {
            r.strip_crc()?;
            let round = r.usize()?;
            let local_epochs = r.usize()?;
            let batch_size = r.usize()?;
            let code = r.u8()?;
            let kind = OptimizerKind::from_code(code)
                .ok_or_else(|| WireError::Malformed(format!("unknown optimizer code {code}")))?;
            let lr = r.f64()?;
            let weight_decay = r.f64()?;
            let seed = r.u64()?;
            let flags = r.u8()?;
            if flags & !(FLAG_AUGMENT | FLAG_PERSIST_OPTIMIZER) != 0 {
                return Err(WireError::Malformed(format!("unknown flags {flags:#04x}")));
            }
            let architecture = r.str()?;
            let weights = r.weights(architecture)?;
            Message::RoundStart(RoundTask {
                round,
                local_epochs,
                batch_size,
                optimizer: OptimizerSpec { kind, lr, weight_decay },
                seed,
                augment: flags & FLAG_AUGMENT != 0,
                persist_optimizer_state: flags & FLAG_PERSIST_OPTIMIZER != 0,
                weights,
            })
        }
        MessageKind::RoundResult => {
            r.strip_crc()?;
            let client_id = r.usize()?;
            let round = r.usize()?;
            let num_samples = r.usize()?;
            let train_loss = r.f64()?;
            let architecture = r.str()?;
            let weights = r.weights(architecture)?;
            Message::RoundResult(ClientUpdate {
                client_id,
                round,
                weights,
                num_samples,
                train_loss,
            })
        }
        MessageKind::EvalReport => Message::EvalReport {
            round: r.usize()?,
            metric: r.f64()?,
            loss: r.f64()?,
        },
        MessageKind::Abort => Message::Abort {
            round: r.usize()?,
            reason: r.str()?,
        },
    };
    r.finish()?;
    Ok(msg)
}

/// One complete frame: magic, type, LE payload length, payload.
pub fn encode_message(msg: &Message) -> Result<Vec<u8>, WireError> {
    let payload = encode_payload(msg)?;
    if payload.len() > MAX_PAYLOAD {
        return Err(WireError::TooLarge(format!("payload of {} bytes", payload.len())));
    }
    let mut frame = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    frame.extend_from_slice(&FRAME_MAGIC);
    frame.push(msg.kind() as u8);
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

fn parse_header(header: &[u8; FRAME_HEADER_LEN]) -> Result<(MessageKind, usize), WireError> {
    let magic: [u8; 4] = header[..4].try_into().expect("4 bytes");
    if magic != FRAME_MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let kind = MessageKind::from_code(header[4]).ok_or(WireError::UnknownType(header[4]))?;
    let len = u32::from_le_bytes(header[5..].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(format!("declared payload of {len} bytes")));
    }
    Ok((kind, len))
}

/// Decodes exactly one frame; leftover bytes are an error.
pub fn decode_message(bytes: &[u8]) -> Result<Message, WireError> {
    let (msg, used) = decode_frame(bytes)?;
    if used != bytes.len() {
        return Err(WireError::Malformed(format!("{} bytes after the frame", bytes.len() - used)));
    }
    Ok(msg)
}

/// Decodes the frame at the start of `bytes`, returning it and its length.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, usize), WireError> {
    let header: &[u8; FRAME_HEADER_LEN] = bytes
        .get(..FRAME_HEADER_LEN)
        .ok_or(WireError::Truncated {
            needed: FRAME_HEADER_LEN,
            available: bytes.len(),
        })?
        .try_into()
        .expect("header length");
    let (kind, len) = parse_header(header)?;
    let payload = bytes.get(FRAME_HEADER_LEN..FRAME_HEADER_LEN + len).ok_or(WireError::Truncated {
        needed: len,
        available: bytes.len() - FRAME_HEADER_LEN,
    })?;
    Ok((decode_payload(kind, payload)?, FRAME_HEADER_LEN + len))
}

pub fn write_message(out: &mut impl Write, msg: &Message) -> Result<(), WireError> {
    out.write_all(&encode_message(msg)?)?;
    out.flush()?;
    Ok(())
}

/// Reads the next frame. `Ok(None)` on a clean end of stream before a frame
/// starts; a stream ending mid-frame is `Truncated`.
pub fn read_message(input: &mut impl Read) -> Result<Option<Message>, WireError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let got = read_full(input, &mut header)?;
    if got == 0 {
        return Ok(None);
    }
    if got < FRAME_HEADER_LEN {
        return Err(WireError::Truncated {
            needed: FRAME_HEADER_LEN,
            available: got,
        });
    }
    let (kind, len) = parse_header(&header)?;
    let mut payload = vec![0u8; len];
    let got = read_full(input, &mut payload)?;
    if got < len {
        return Err(WireError::Truncated { needed: len, available: got });
    }
    decode_payload(kind, &payload).map(Some)
}

fn read_full(input: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// `FLW1`, architecture name, weights block, CRC32 of everything before it.
pub fn encode_weights_file(weights: &ModelWeights) -> Result<Vec<u8>, WireError> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&WEIGHTS_FILE_MAGIC);
    w.str(&weights.architecture)?;
    w.weights(weights)?;
    w.crc(0);
    Ok(w.buf)
}

pub fn decode_weights_file(bytes: &[u8]) -> Result<ModelWeights, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.array::<4>()?;
    if magic != WEIGHTS_FILE_MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    r.strip_crc()?;
    let architecture = r.str()?;
    let weights = r.weights(architecture)?;
    r.finish()?;
    Ok(weights)
}
