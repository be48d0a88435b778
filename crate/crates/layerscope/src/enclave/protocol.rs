//! Host/worker wire protocol: length-prefixed binary frames.
//!
//! Frame layout: `[u32 LE payload length][u8 message type][payload]`.
//! All integers little-endian; floats as f64 LE bit patterns, so tensors
//! cross the boundary bit-exactly. Both ends count bytes moved, which is
//! what the per-batch boundary accounting reports.

use std::io::{BufReader, BufWriter, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MSG_FORWARD_ACT: u8 = 1;
pub const MSG_BACKWARD_GRAD: u8 = 2;
pub const MSG_LOSS: u8 = 3;
pub const MSG_STEP_DONE: u8 = 4;
pub const MSG_SHUTDOWN: u8 = 5;

/// u32 length prefix plus u8 type tag.
pub const FRAME_HEADER_BYTES: u64 = 5;

/// Refuse frames past this size; the largest legitimate payload is one
/// batch of cut activations, far below it.
const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Host -> worker: activations at the cut for one training batch.
    ForwardAct {
        epoch: u64,
        batch: u64,
        labels: Vec<u32>,
        act: Tensor,
    },
    /// Worker -> host: gradient of the loss w.r.t. the cut activations.
    BackwardGrad { grad: Tensor },
    /// Worker -> host: summed per-example loss and correct count.
    Loss { loss_sum: f64, correct: u64 },
    /// Worker -> host: ready / batch applied / shutting down cleanly.
    StepDone,
    /// Host -> worker: finish up and persist the secure parameters.
    Shutdown,
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::ForwardAct { .. } => MSG_FORWARD_ACT,
            Message::BackwardGrad { .. } => MSG_BACKWARD_GRAD,
            Message::Loss { .. } => MSG_LOSS,
            Message::StepDone => MSG_STEP_DONE,
            Message::Shutdown => MSG_SHUTDOWN,
        }
    }
}

/// Everything the worker needs to stand up its half of the stack; written
/// as JSON to a scratch file and passed as the worker's first argument.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkerInit {
    pub arch: String,
    pub input_shape: [usize; 3],
    pub cut_index: usize,
    pub budget_bytes: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub root_seed: u64,
}

/// On-wire size of a tensor: u32 ndim + u64 dims + f64 data.
pub fn encoded_tensor_bytes(t: &Tensor) -> u64 {
    4 + 8 * t.shape().len() as u64 + 8 * t.numel() as u64
}

pub fn encoded_payload_bytes(msg: &Message) -> u64 {
    match msg {
        Message::ForwardAct { labels, act, .. } => {
            8 + 8 + 4 + 4 * labels.len() as u64 + encoded_tensor_bytes(act)
        }
        Message::BackwardGrad { grad } => encoded_tensor_bytes(grad),
        Message::Loss { .. } => 8 + 8,
        Message::StepDone | Message::Shutdown => 0,
    }
}

/// Full frame size of a message including the header.
pub fn frame_bytes(msg: &Message) -> u64 {
    FRAME_HEADER_BYTES + encoded_payload_bytes(msg)
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Protocol(format!(
                "payload underrun: wanted {n} bytes at offset {}, payload is {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Tensor::from_vec(&shape, data)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Protocol(format!(
                "payload overrun: {} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut buf = Vec::with_capacity(encoded_payload_bytes(msg) as usize);
    match msg {
        Message::ForwardAct {
            epoch,
            batch,
            labels,
            act,
        } => {
            buf.extend_from_slice(&epoch.to_le_bytes());
            buf.extend_from_slice(&batch.to_le_bytes());
            buf.extend_from_slice(&(labels.len() as u32).to_le_bytes());
            for &l in labels {
                buf.extend_from_slice(&l.to_le_bytes());
            }
            put_tensor(&mut buf, act);
        }
        Message::BackwardGrad { grad } => put_tensor(&mut buf, grad),
        Message::Loss { loss_sum, correct } => {
            buf.extend_from_slice(&loss_sum.to_le_bytes());
            buf.extend_from_slice(&correct.to_le_bytes());
        }
        Message::StepDone | Message::Shutdown => {}
    }
    buf
}

fn decode_payload(kind: u8, payload: &[u8]) -> Result<Message> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let msg = match kind {
        MSG_FORWARD_ACT => {
            let epoch = c.u64()?;
            let batch = c.u64()?;
            let n = c.u32()? as usize;
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                labels.push(c.u32()?);
            }
            let act = c.tensor()?;
            Message::ForwardAct {
                epoch,
                batch,
                labels,
                act,
            }
        }
        MSG_BACKWARD_GRAD => Message::BackwardGrad { grad: c.tensor()? },
        MSG_LOSS => Message::Loss {
            loss_sum: c.f64()?,
            correct: c.u64()?,
        },
        MSG_STEP_DONE => Message::StepDone,
        MSG_SHUTDOWN => Message::Shutdown,
        other => return Err(Error::Protocol(format!("unknown message type {other}"))),
    };
    c.finish()?;
    Ok(msg)
}

/// A framed duplex channel over any reader/writer pair, with byte counters.
pub struct Framed<R: Read, W: Write> {
    reader: BufReader<R>,
    writer: BufWriter<W>,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

impl<R: Read, W: Write> Framed<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Framed {
            reader: BufReader::new(reader),
            writer: BufWriter::new(writer),
            bytes_read: 0,
            bytes_written: 0,
        }
    }

    /// Total bytes moved in both directions.
    pub fn bytes_total(&self) -> u64 {
        self.bytes_read + self.bytes_written
    }

    pub fn send(&mut self, msg: &Message) -> Result<()> {
        let payload = encode_payload(msg);
        if payload.len() as u64 > MAX_PAYLOAD as u64 {
            return Err(Error::Protocol(format!(
                "payload of {} bytes exceeds the frame limit",
                payload.len()
            )));
        }
        self.writer.write_all(&(payload.len() as u32).to_le_bytes())?;
        self.writer.write_all(&[msg.type_byte()])?;
        self.writer.write_all(&payload)?;
        self.writer.flush()?;
        self.bytes_written += FRAME_HEADER_BYTES + payload.len() as u64;
        Ok(())
    }

    /// Next message, or `None` on a clean end-of-stream between frames.
    pub fn recv_opt(&mut self) -> Result<Option<Message>> {
        let mut len_buf = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            let n = self.reader.read(&mut len_buf[got..])?;
            if n == 0 {
                if got == 0 {
                    return Ok(None);
                }
                return Err(Error::Protocol(
                    "stream ended inside a frame header".into(),
                ));
            }
            got += n;
        }
        let len = u32::from_le_bytes(len_buf);
        if len > MAX_PAYLOAD {
            return Err(Error::Protocol(format!(
                "declared payload of {len} bytes exceeds the frame limit"
            )));
        }
        let mut kind = [0u8; 1];
        self.reader
            .read_exact(&mut kind)
            .map_err(|_| Error::Protocol("stream ended before the message type".into()))?;
        let mut payload = vec![0u8; len as usize];
        self.reader
            .read_exact(&mut payload)
            .map_err(|_| Error::Protocol("stream ended inside a payload".into()))?;
        self.bytes_read += FRAME_HEADER_BYTES + len as u64;
        Ok(Some(decode_payload(kind[0], &payload)?))
    }

    /// Next message; end-of-stream is a protocol error.
    pub fn recv(&mut self) -> Result<Message> {
        self.recv_opt()?
            .ok_or_else(|| Error::Protocol("stream closed mid-conversation".into()))
    }
}
