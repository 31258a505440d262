//! Protocol messages and their binary encoding.
//!
//! A frame on the wire is a 4-byte big-endian body length followed by the
//! body: a 1-byte tag, the 8-byte big-endian run id, the 8-byte big-endian
//! iteration, then the payload as big-endian IEEE-754 doubles. Integer
//! payload fields (client ids, counts) are stored as doubles holding exact
//! integers. `docs/wire-format.md` lists every tag's payload layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    AuxUpdate = 1,
    ServerZGrad = 2,
    AuxBroadcast = 3,
    CrossGrad = 4,
    CrossGradSum = 5,
    SharedParamGrad = 6,
    Control = 7,
    ThetaSummary = 8,
    SigmaGrad = 9,
}

impl Tag {
    pub const ALL: [Tag; 9] = [
        Tag::AuxUpdate,
        Tag::ServerZGrad,
        Tag::AuxBroadcast,
        Tag::CrossGrad,
        Tag::CrossGradSum,
        Tag::SharedParamGrad,
        Tag::Control,
        Tag::ThetaSummary,
        Tag::SigmaGrad,
    ];

    fn from_byte(b: u8) -> Result<Tag> {
        Tag::ALL
            .into_iter()
            .find(|t| *t as u8 == b)
            .ok_or_else(|| Error::Protocol(format!("unknown message tag {b}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ControlKind {
    Start = 0,
    Stop = 1,
    Checkpoint = 2,
}

/// Message body. Vectors hold `samples` consecutive blocks of length `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Payload {
    /// Client → server: the client's current `z_j`.
    AuxUpdate { client: usize, z: Vec<f64> },
    /// Server → client: `∂L₀/∂z_j`.
    ServerZGrad { client: usize, grad: Vec<f64> },
    /// Server → client: every client's `z` plus the shared values
    /// `(b, σ)` per sample. `z` is ordered sample-major, then client.
    AuxBroadcast {
        num_clients: usize,
        samples: usize,
        block_len: usize,
        shared: Vec<f64>,
        z: Vec<f64>,
    },
    /// Client → server: `∂L_{0,from}/∂z_k` for each target `k ≠ from`, plus
    /// `(∂/∂b, ∂/∂σ)` of `L_{0,from}` per sample.
    CrossGrad {
        from: usize,
        samples: usize,
        block_len: usize,
        shared_grad: Vec<f64>,
        targets: Vec<(usize, Vec<f64>)>,
    },
    /// Server → client: `Σ_{k≠j} ∂L_{0,k}/∂z_j`; empty when `J = 1`.
    CrossGradSum { client: usize, sum: Vec<f64> },
    /// Client → server: gradient for the shared parameters.
    SharedParamGrad { from: usize, grad: Vec<f64> },
    Control { kind: ControlKind },
    /// Client → server (SOUL): the client's own-prior piece of the z-gradient.
    ThetaSummary { client: usize, values: Vec<f64> },
    /// Client → server (SOUL): the client's `∂/∂σ` contribution.
    SigmaGrad { client: usize, value: f64 },
}

impl Payload {
    pub fn tag(&self) -> Tag {
        match self {
            Payload::AuxUpdate { .. } => Tag::AuxUpdate,
            Payload::ServerZGrad { .. } => Tag::ServerZGrad,
            Payload::AuxBroadcast { .. } => Tag::AuxBroadcast,
            Payload::CrossGrad { .. } => Tag::CrossGrad,
            Payload::CrossGradSum { .. } => Tag::CrossGradSum,
            Payload::SharedParamGrad { .. } => Tag::SharedParamGrad,
            Payload::Control { .. } => Tag::Control,
            Payload::ThetaSummary { .. } => Tag::ThetaSummary,
            Payload::SigmaGrad { .. } => Tag::SigmaGrad,
        }
    }

    /// Flat payload array as sent on the wire.
    pub fn to_values(&self) -> Vec<f64> {
        let u = |v: usize| v as f64;
        let mut out = Vec::new();
        match self {
            Payload::AuxUpdate { client, z } => {
                out.push(u(*client));
                out.extend(z);
            }
            Payload::ServerZGrad { client, grad } => {
                out.push(u(*client));
                out.extend(grad);
            }
            Payload::AuxBroadcast {
                num_clients,
                samples,
                block_len,
                shared,
                z,
            } => {
                out.extend([u(*num_clients), u(*samples), u(*block_len), u(shared.len())]);
                out.extend(shared);
                out.extend(z);
            }
            Payload::CrossGrad {
                from,
                samples,
                block_len,
                shared_grad,
                targets,
            } => {
                out.extend([
                    u(*from),
                    u(*samples),
                    u(*block_len),
                    u(shared_grad.len()),
                    u(targets.len()),
                ]);
                out.extend(shared_grad);
                for (k, v) in targets {
                    out.push(u(*k));
                    out.extend(v);
                }
            }
            Payload::CrossGradSum { client, sum } => {
                out.push(u(*client));
                out.extend(sum);
            }
            Payload::SharedParamGrad { from, grad } => {
                out.push(u(*from));
                out.extend(grad);
            }
            Payload::Control { kind } => out.push(*kind as u8 as f64),
            Payload::ThetaSummary { client, values } => {
                out.push(u(*client));
                out.extend(values);
            }
            Payload::SigmaGrad { client, value } => out.extend([u(*client), *value]),
        }
        out
    }

    fn from_values(tag: Tag, v: &[f64]) -> Result<Payload> {
        let bad = |m: &str| Error::Protocol(format!("malformed {tag:?} payload: {m}"));
        let int = |x: f64| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 && x < 9.0e15 {
                Ok(x as usize)
            } else {
                Err(bad(&format!("expected a non-negative integer, got {x}")))
            }
        };
        let head = |k: usize| -> Result<&[f64]> {
            if v.len() < k {
                Err(bad("too short"))
            } else {
                Ok(&v[..k])
            }
        };
        Ok(match tag {
            Tag::AuxUpdate => Payload::AuxUpdate {
                client: int(head(1)?[0])?,
                z: v[1..].to_vec(),
            },
            Tag::ServerZGrad => Payload::ServerZGrad {
                client: int(head(1)?[0])?,
                grad: v[1..].to_vec(),
            },
            Tag::AuxBroadcast => {
                let h = head(4)?;
                let (num_clients, samples, block_len, ns) = (int(h[0])?, int(h[1])?, int(h[2])?, int(h[3])?);
                if v.len() != 4 + ns + num_clients * samples * block_len {
                    return Err(bad("length does not match header"));
                }
                Payload::AuxBroadcast {
                    num_clients,
                    samples,
                    block_len,
                    shared: v[4..4 + ns].to_vec(),
                    z: v[4 + ns..].to_vec(),
                }
            }
            Tag::CrossGrad => {
                let h = head(5)?;
                let (from, samples, block_len, ns, nt) = (int(h[0])?, int(h[1])?, int(h[2])?, int(h[3])?, int(h[4])?);
                let width = samples * block_len;
                if v.len() != 5 + ns + nt * (1 + width) {
                    return Err(bad("length does not match header"));
                }
                let mut at = 5 + ns;
                let mut targets = Vec::with_capacity(nt);
                for _ in 0..nt {
                    targets.push((int(v[at])?, v[at + 1..at + 1 + width].to_vec()));
                    at += 1 + width;
                }
                Payload::CrossGrad {
                    from,
                    samples,
                    block_len,
                    shared_grad: v[5..5 + ns].to_vec(),
                    targets,
                }
            }
            Tag::CrossGradSum => Payload::CrossGradSum {
                client: int(head(1)?[0])?,
                sum: v[1..].to_vec(),
            },
            Tag::SharedParamGrad => Payload::SharedParamGrad {
                from: int(head(1)?[0])?,
                grad: v[1..].to_vec(),
            },
            Tag::Control => {
                if v.len() != 1 {
                    return Err(bad("expected one value"));
                }
                let kind = match int(v[0])? {
                    0 => ControlKind::Start,
                    1 => ControlKind::Stop,
                    2 => ControlKind::Checkpoint,
                    k => return Err(bad(&format!("unknown control kind {k}"))),
                };
                Payload::Control { kind }
            }
            Tag::ThetaSummary => Payload::ThetaSummary {
                client: int(head(1)?[0])?,
                values: v[1..].to_vec(),
            },
            Tag::SigmaGrad => {
                if v.len() != 2 {
                    return Err(bad("expected two values"));
                }
                Payload::SigmaGrad {
                    client: int(v[0])?,
                    value: v[1],
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Message {
    pub run_id: u64,
    pub iteration: u64,
    pub payload: Payload,
}

/// Bytes in the fixed part of a body: tag, run id, iteration.
pub const BODY_HEADER: usize = 17;

impl Message {
    pub fn new(run_id: u64, iteration: u64, payload: Payload) -> Self {
        Self {
            run_id,
            iteration,
            payload,
        }
    }

    pub fn tag(&self) -> Tag {
        self.payload.tag()
    }

    /// Message body without the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let values = self.payload.to_values();
        let mut out = Vec::with_capacity(BODY_HEADER + 8 * values.len());
        out.push(self.tag() as u8);
        out.extend_from_slice(&self.run_id.to_be_bytes());
        out.extend_from_slice(&self.iteration.to_be_bytes());
        for v in values {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out
    }

    pub fn decode(body: &[u8]) -> Result<Message> {
        if body.len() < BODY_HEADER || (body.len() - BODY_HEADER) % 8 != 0 {
            return Err(Error::Protocol(format!("body of {} bytes is not a valid message", body.len())));
        }
        let tag = Tag::from_byte(body[0])?;
        let run_id = u64::from_be_bytes(body[1..9].try_into().unwrap());
        let iteration = u64::from_be_bytes(body[9..17].try_into().unwrap());
        let values: Vec<f64> = body[BODY_HEADER..]
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Message {
            run_id,
            iteration,
            payload: Payload::from_values(tag, &values)?,
        })
    }

    /// Length-prefixed frame.
    pub fn frame(&self) -> Vec<u8> {
        let body = self.encode();
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend(body);
        out
    }
}

/// One line of the message log.
#[derive(Debug, Serialize)]
pub struct LogRecord<'a> {
    pub from: usize,
    pub to: usize,
    pub tag: Tag,
    pub run_id: u64,
    pub iteration: u64,
    pub bytes: usize,
    pub payload: &'a [f64],
}
