//! Actor-to-actor delivery.
//!
//! Actors are numbered `0` (server) and `j + 1` (client `j`). An
//! [`Endpoint`] moves opaque message bodies with per-sender FIFO order; a
//! [`Link`] adds encoding, message counters and the optional JSON log.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::Path;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::message::{LogRecord, Message, Tag};
use crate::error::{Error, Result};
use crate::math::RngStream;

pub const SERVER: usize = 0;

pub fn client_actor(j: usize) -> usize {
    j + 1
}

/// Which transport a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TransportKind {
    #[default]
    InProcess,
    /// In-process, but each receive picks uniformly among the senders with
    /// pending messages, so arrival order across senders is scrambled.
    Shuffled { seed: u64 },
    /// Length-prefixed frames over TCP on the loopback interface.
    Socket,
}

pub trait Endpoint: Send {
    fn send(&mut self, to: usize, body: Vec<u8>) -> Result<()>;
    /// Next `(sender, body)`, waiting at most `timeout`.
    fn recv(&mut self, timeout: Duration) -> Result<(usize, Vec<u8>)>;
}

type Packet = (usize, Vec<u8>);

pub struct ChannelEndpoint {
    me: usize,
    peers: Vec<Sender<Packet>>,
    inbox: Receiver<Packet>,
}

impl Endpoint for ChannelEndpoint {
    fn send(&mut self, to: usize, body: Vec<u8>) -> Result<()> {
        let peer = self
            .peers
            .get(to)
            .ok_or_else(|| Error::Transport(format!("no actor {to}")))?;
        peer.send((self.me, body))
            .map_err(|_| Error::Transport(format!("actor {to} has hung up")))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Packet> {
        self.inbox.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Timeout(format!("a message to actor {}", self.me)),
            RecvTimeoutError::Disconnected => Error::Transport("all senders disconnected".into()),
        })
    }
}

fn channel_mesh(actors: usize) -> Vec<ChannelEndpoint> {
    let (txs, rxs): (Vec<_>, Vec<_>) = (0..actors).map(|_| channel::<Packet>()).unzip();
    rxs.into_iter()
        .enumerate()
        .map(|(me, inbox)| ChannelEndpoint {
            me,
            peers: txs.clone(),
            inbox,
        })
        .collect()
}

pub struct ShuffledEndpoint {
    inner: ChannelEndpoint,
    queues: BTreeMap<usize, VecDeque<Vec<u8>>>,
    rng: RngStream,
}

impl ShuffledEndpoint {
    fn drain(&mut self) {
        while let Ok((from, body)) = self.inner.inbox.try_recv() {
            self.queues.entry(from).or_default().push_back(body);
        }
    }
}

impl Endpoint for ShuffledEndpoint {
    fn send(&mut self, to: usize, body: Vec<u8>) -> Result<()> {
        // jitter so that senders interleave differently on every run
        let pause = self.rng.int_inclusive(0, 200) as u64;
        std::thread::sleep(Duration::from_micros(pause));
        self.inner.send(to, body)
    }

    fn recv(&mut self, timeout: Duration) -> Result<Packet> {
        self.drain();
        if self.queues.values().all(VecDeque::is_empty) {
            let (from, body) = self.inner.recv(timeout)?;
            self.queues.entry(from).or_default().push_back(body);
            std::thread::sleep(Duration::from_micros(300));
            self.drain();
        }
        let ready: Vec<usize> = self
            .queues
            .iter()
            .filter(|(_, q)| !q.is_empty())
            .map(|(k, _)| *k)
            .collect();
        let pick = ready[self.rng.int_inclusive(0, ready.len() as i64 - 1) as usize];
        let body = self.queues.get_mut(&pick).unwrap().pop_front().unwrap();
        Ok((pick, body))
    }
}

fn write_frame(stream: &mut TcpStream, body: &[u8]) -> std::io::Result<()> {
    let len = u32::try_from(body.len()).map_err(|_| std::io::Error::other("frame too large"))?;
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&len.to_be_bytes());
    buf.extend_from_slice(body);
    stream.write_all(&buf)
}

fn read_frame(stream: &mut TcpStream) -> std::io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len)?;
    let mut body = vec![0u8; u32::from_be_bytes(len) as usize];
    stream.read_exact(&mut body)?;
    Ok(body)
}

/// Star topology: the server holds one stream per client.
pub struct SocketEndpoint {
    me: usize,
    streams: BTreeMap<usize, TcpStream>,
    inbox: Receiver<Packet>,
}

impl SocketEndpoint {
    fn new(me: usize, streams: BTreeMap<usize, TcpStream>) -> Result<Self> {
        let (tx, inbox) = channel();
        for (&peer, s) in &streams {
            let mut reader = s.try_clone()?;
            let tx = tx.clone();
            std::thread::spawn(move || {
                while let Ok(body) = read_frame(&mut reader) {
                    if tx.send((peer, body)).is_err() {
                        break;
                    }
                }
            });
        }
        Ok(Self { me, streams, inbox })
    }
}

impl Endpoint for SocketEndpoint {
    fn send(&mut self, to: usize, body: Vec<u8>) -> Result<()> {
        let s = self
            .streams
            .get_mut(&to)
            .ok_or_else(|| Error::Transport(format!("actor {} has no connection to {to}", self.me)))?;
        write_frame(s, &body).map_err(|e| Error::Transport(format!("send to {to}: {e}")))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Packet> {
        self.inbox.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Timeout(format!("a message to actor {}", self.me)),
            RecvTimeoutError::Disconnected => Error::Transport("connection closed".into()),
        })
    }
}

impl Drop for SocketEndpoint {
    fn drop(&mut self) {
        for s in self.streams.values() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// Connects `clients` loopback clients to a server. Each client announces
/// itself by sending its actor id as a 4-byte big-endian integer.
fn socket_star(clients: usize) -> Result<Vec<SocketEndpoint>> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let mut client_streams = Vec::with_capacity(clients);
    let mut server_streams = BTreeMap::new();
    for j in 0..clients {
        let mut s = TcpStream::connect(addr)?;
        s.set_nodelay(true)?;
        s.write_all(&(client_actor(j) as u32).to_be_bytes())?;
        client_streams.push(s);
        let (mut accepted, _) = listener.accept()?;
        accepted.set_nodelay(true)?;
        let mut id = [0u8; 4];
        accepted.read_exact(&mut id)?;
        let id = u32::from_be_bytes(id) as usize;
        if id == SERVER || id > clients || server_streams.contains_key(&id) {
            return Err(Error::Transport(format!("unexpected client id {id} in handshake")));
        }
        server_streams.insert(id, accepted);
    }
    let mut out = vec![SocketEndpoint::new(SERVER, server_streams)?];
    for (j, s) in client_streams.into_iter().enumerate() {
        out.push(SocketEndpoint::new(client_actor(j), BTreeMap::from([(SERVER, s)]))?);
    }
    Ok(out)
}

/// Endpoints for the server and `clients` clients, indexed by actor id.
pub fn connect(kind: TransportKind, clients: usize) -> Result<Vec<Box<dyn Endpoint>>> {
    let actors = clients + 1;
    Ok(match kind {
        TransportKind::InProcess => channel_mesh(actors)
            .into_iter()
            .map(|e| Box::new(e) as Box<dyn Endpoint>)
            .collect(),
        TransportKind::Shuffled { seed } => channel_mesh(actors)
            .into_iter()
            .map(|inner| {
                let rng = RngStream::new(seed, inner.me as u64);
                Box::new(ShuffledEndpoint {
                    inner,
                    queues: BTreeMap::new(),
                    rng,
                }) as Box<dyn Endpoint>
            })
            .collect(),
        TransportKind::Socket => socket_star(clients)?
            .into_iter()
            .map(|e| Box::new(e) as Box<dyn Endpoint>)
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagCount {
    pub messages: u64,
    /// Frame bytes including the 4-byte length prefix.
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCounters {
    pub per_tag: BTreeMap<Tag, TagCount>,
}

impl MessageCounters {
    pub fn record(&mut self, tag: Tag, bytes: usize) {
        let c = self.per_tag.entry(tag).or_default();
        c.messages += 1;
        c.bytes += bytes as u64;
    }

    pub fn merge(&mut self, other: &MessageCounters) {
        for (tag, c) in &other.per_tag {
            let e = self.per_tag.entry(*tag).or_default();
            e.messages += c.messages;
            e.bytes += c.bytes;
        }
    }

    pub fn messages(&self, tag: Tag) -> u64 {
        self.per_tag.get(&tag).map_or(0, |c| c.messages)
    }

    pub fn total_messages(&self) -> u64 {
        self.per_tag.values().map(|c| c.messages).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.per_tag.values().map(|c| c.bytes).sum()
    }
}

/// Shared JSON-lines message log.
#[derive(Clone)]
pub struct MessageLog(Arc<Mutex<BufWriter<File>>>);

impl MessageLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self(Arc::new(Mutex::new(BufWriter::new(File::create(path)?)))))
    }

    fn write(&self, record: &LogRecord<'_>) -> Result<()> {
        let mut w = self.0.lock().map_err(|_| Error::Transport("message log poisoned".into()))?;
        serde_json::to_writer(&mut *w, record)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&self) -> Result<()> {
        let mut w = self.0.lock().map_err(|_| Error::Transport("message log poisoned".into()))?;
        w.flush()?;
        Ok(())
    }
}

/// Typed view of an endpoint with accounting.
pub struct Link {
    pub me: usize,
    endpoint: Box<dyn Endpoint>,
    pub counters: MessageCounters,
    log: Option<MessageLog>,
    timeout: Duration,
}

impl Link {
    pub fn new(me: usize, endpoint: Box<dyn Endpoint>, timeout: Duration, log: Option<MessageLog>) -> Self {
        Self {
            me,
            endpoint,
            counters: MessageCounters::default(),
            log,
            timeout,
        }
    }

    pub fn send(&mut self, to: usize, msg: &Message) -> Result<()> {
        let body = msg.encode();
        let bytes = body.len() + 4;
        if let Some(log) = &self.log {
            log.write(&LogRecord {
                from: self.me,
                to,
                tag: msg.tag(),
                run_id: msg.run_id,
                iteration: msg.iteration,
                bytes,
                payload: &msg.payload.to_values(),
            })?;
        }
        self.endpoint.send(to, body)?;
        self.counters.record(msg.tag(), bytes);
        Ok(())
    }

    pub fn recv(&mut self, deadline: Instant) -> Result<(usize, Message)> {
        let left = deadline.saturating_duration_since(Instant::now());
        let (from, body) = self.endpoint.recv(left)?;
        Ok((from, Message::decode(&body)?))
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }
}
