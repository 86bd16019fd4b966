use std::collections::{HashMap, HashSet};
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::data::Sample;
use crate::federation::{ClientDispatch, ClientUpdate, FedError, Federation, LocalTrainer, RoundRecord, RoundTask};

use super::wire::{encode_message, read_message, write_message, Message, MessageKind};
use super::WireError;

/// How long the server waits for a round's results, and for the handshake.
pub const DEFAULT_ROUND_TIMEOUT: Duration = Duration::from_secs(120);
const POLL_INTERVAL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// One frame seen by a server or client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    /// The peer's client id once known (the own id on the client side).
    pub client_id: Option<usize>,
    pub kind: MessageKind,
    pub round: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerOptions {
    pub num_clients: usize,
    pub round_timeout: Duration,
    pub handshake_timeout: Duration,
}

impl ServerOptions {
    pub fn new(num_clients: usize) -> Self {
        Self {
            num_clients,
            round_timeout: DEFAULT_ROUND_TIMEOUT,
            handshake_timeout: DEFAULT_ROUND_TIMEOUT,
        }
    }
}

enum Event {
    Frame(usize, Message),
    Closed(usize, Option<WireError>),
}

/// Server side of the TCP protocol. Reader threads push decoded frames into
/// one queue that the federation thread drains, so rounds stay sequential.
pub struct TcpDispatch {
    listener: TcpListener,
    options: ServerOptions,
    events: Receiver<Event>,
    sender: Sender<Event>,
    next_conn: usize,
    /// Write halves of all open connections.
    conns: HashMap<usize, TcpStream>,
    /// Connection of each registered client id.
    clients: Vec<Option<usize>>,
    transcript: Vec<TranscriptEntry>,
}

impl TcpDispatch {
    pub fn bind(addr: impl ToSocketAddrs, options: ServerOptions) -> Result<Self, FedError> {
        let listener = TcpListener::bind(addr).map_err(|e| FedError::Transport(format!("bind: {e}")))?;
        Self::from_listener(listener, options)
    }

    pub fn from_listener(listener: TcpListener, options: ServerOptions) -> Result<Self, FedError> {
        if options.num_clients == 0 {
            return Err(FedError::Config("num_clients must be >= 1".into()));
        }
        listener
            .set_nonblocking(true)
            .map_err(|e| FedError::Transport(format!("listener: {e}")))?;
        let (sender, events) = channel();
        Ok(Self {
            listener,
            options,
            events,
            sender,
            next_conn: 0,
            conns: HashMap::new(),
            clients: vec![None; options.num_clients],
            transcript: Vec::new(),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn connected(&self) -> Vec<usize> {
        (0..self.clients.len()).filter(|&c| self.clients[c].is_some()).collect()
    }

    /// Blocks until every client id has completed the handshake.
    pub fn wait_for_clients(&mut self) -> Result<(), FedError> {
        let all: Vec<usize> = (0..self.options.num_clients).collect();
        self.wait_for(&all, 0, self.options.handshake_timeout)
    }

    fn wait_for(&mut self, ids: &[usize], round: usize, timeout: Duration) -> Result<(), FedError> {
        let deadline = Instant::now() + timeout;
        loop {
            let missing: Vec<usize> = ids.iter().copied().filter(|&c| self.clients[c].is_none()).collect();
            if missing.is_empty() {
                return Ok(());
            }
            match self.poll(deadline)? {
                None => return Err(FedError::Timeout { round, missing }),
                Some(event) => {
                    if let Some((client, msg)) = self.handle(event) {
                        debug!("ignoring {:?} from client {client} before the round", msg.kind());
                    }
                }
            }
        }
    }

    fn accept_pending(&mut self) -> Result<(), FedError> {
        loop {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    let conn = self.next_conn;
                    self.next_conn += 1;
                    debug!("connection {conn} from {peer}");
                    let configure = stream
                        .set_nonblocking(false)
                        .and_then(|_| stream.set_nodelay(true))
                        .and_then(|_| stream.set_write_timeout(Some(self.options.round_timeout)))
                        .and_then(|_| stream.try_clone());
                    let mut reader = match configure {
                        Ok(r) => r,
                        Err(e) => {
                            warn!("dropping connection from {peer}: {e}");
                            continue;
                        }
                    };
                    let tx = self.sender.clone();
                    thread::spawn(move || loop {
                        let event = match read_message(&mut reader) {
                            Ok(Some(msg)) => Event::Frame(conn, msg),
                            Ok(None) => Event::Closed(conn, None),
                            Err(e) => Event::Closed(conn, Some(e)),
                        };
                        let last = matches!(event, Event::Closed(..));
                        if tx.send(event).is_err() || last {
                            break;
                        }
                    });
                    self.conns.insert(conn, stream);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(()),
                Err(e) => return Err(FedError::Transport(format!("accept: {e}"))),
            }
        }
    }

    /// Next queued event, accepting new connections while waiting. `None`
    /// once `deadline` passes.
    fn poll(&mut self, deadline: Instant) -> Result<Option<Event>, FedError> {
        loop {
            self.accept_pending()?;
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            match self.events.recv_timeout(POLL_INTERVAL.min(deadline - now)) {
                Ok(event) => return Ok(Some(event)),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => unreachable!("the dispatcher holds a sender"),
            }
        }
    }

    fn client_of(&self, conn: usize) -> Option<usize> {
        self.clients.iter().position(|&c| c == Some(conn))
    }

    /// Applies handshakes and disconnects; hands any other frame from a
    /// registered client back to the caller.
    fn handle(&mut self, event: Event) -> Option<(usize, Message)> {
        match event {
            Event::Closed(conn, err) => {
                let client = self.client_of(conn);
                match (&err, client) {
                    (Some(e), _) => warn!("connection {conn} (client {client:?}) failed: {e}"),
                    (None, _) => debug!("connection {conn} (client {client:?}) closed"),
                }
                if let Some(c) = client {
                    self.clients[c] = None;
                }
                self.conns.remove(&conn);
                None
            }
            Event::Frame(conn, msg) => {
                let client = self.client_of(conn);
                self.transcript.push(TranscriptEntry {
                    direction: Direction::Received,
                    client_id: client.or(match msg {
                        Message::Hello { client_id } => Some(client_id),
                        _ => None,
                    }),
                    kind: msg.kind(),
                    round: msg.round(),
                });
                match (msg, client) {
                    (Message::Hello { client_id }, None) => {
                        self.register(conn, client_id);
                        None
                    }
                    (msg, Some(c)) => Some((c, msg)),
                    (msg, None) => {
                        warn!("connection {conn} sent {:?} before Hello", msg.kind());
                        None
                    }
                }
            }
        }
    }

    fn register(&mut self, conn: usize, client_id: usize) {
        let reject = if client_id >= self.options.num_clients {
            Some(format!("client id {client_id} out of range 0..{}", self.options.num_clients))
        } else if self.clients[client_id].is_some() {
            Some(format!("duplicate client id {client_id}"))
        } else {
            None
        };
        if let Some(reason) = reject {
            warn!("rejecting connection {conn}: {reason}");
            let _ = self.send_conn(conn, None, &Message::Abort { round: 0, reason });
            if let Some(stream) = self.conns.remove(&conn) {
                let _ = stream.shutdown(Shutdown::Both);
            }
            return;
        }
        self.clients[client_id] = Some(conn);
        info!("client {client_id} joined");
        if let Err(e) = self.send_conn(conn, Some(client_id), &Message::Hello { client_id }) {
            warn!("client {client_id}: {e}");
        }
    }

    fn send_conn(&mut self, conn: usize, client: Option<usize>, msg: &Message) -> Result<(), WireError> {
        let bytes = encode_message(msg)?;
        self.send_bytes(conn, client, msg, &bytes)
    }

    fn send_bytes(&mut self, conn: usize, client: Option<usize>, msg: &Message, bytes: &[u8]) -> Result<(), WireError> {
        let stream = self
            .conns
            .get_mut(&conn)
            .ok_or_else(|| WireError::Io(io::Error::new(io::ErrorKind::NotConnected, "connection gone")))?;
        io::Write::write_all(stream, bytes)?;
        self.transcript.push(TranscriptEntry {
            direction: Direction::Sent,
            client_id: client,
            kind: msg.kind(),
            round: msg.round(),
        });
        Ok(())
    }

    fn send_client(&mut self, client: usize, msg: &Message, bytes: &[u8]) -> Result<(), WireError> {
        let conn = self.clients[client]
            .ok_or_else(|| WireError::Io(io::Error::new(io::ErrorKind::NotConnected, "client not connected")))?;
        self.send_bytes(conn, Some(client), msg, bytes)
    }

    fn abort(&mut self, clients: &[usize], round: usize, reason: &str) {
        let msg = Message::Abort {
            round,
            reason: reason.to_string(),
        };
        let Ok(bytes) = encode_message(&msg) else { return };
        for &c in clients {
            if let Err(e) = self.send_client(c, &msg, &bytes) {
                debug!("abort to client {c}: {e}");
            }
        }
    }

    fn collect(&mut self, selected: &[usize], task: &RoundTask) -> Result<Vec<ClientUpdate>, FedError> {
        let round = task.round;
        let msg = Message::RoundStart(task.clone());
        let bytes = encode_message(&msg)?;
        for &c in selected {
            self.send_client(c, &msg, &bytes).map_err(|e| FedError::ClientFailed {
                round,
                client_id: c,
                reason: e.to_string(),
            })?;
        }
        let mut pending: HashSet<usize> = selected.iter().copied().collect();
        let mut updates = Vec::with_capacity(selected.len());
        let deadline = Instant::now() + self.options.round_timeout;
        while !pending.is_empty() {
            let Some(event) = self.poll(deadline)? else {
                let mut missing: Vec<usize> = pending.into_iter().collect();
                missing.sort_unstable();
                return Err(FedError::Timeout { round, missing });
            };
            let closed = match &event {
                Event::Closed(conn, _) => self.client_of(*conn),
                Event::Frame(..) => None,
            };
            if let Some(c) = closed.filter(|c| pending.contains(c)) {
                self.handle(event);
                return Err(FedError::ClientFailed {
                    round,
                    client_id: c,
                    reason: "connection lost".into(),
                });
            }
            let Some((client, msg)) = self.handle(event) else { continue };
            match msg {
                Message::RoundResult(u) if u.round == round && pending.contains(&client) => {
                    if u.client_id != client {
                        return Err(FedError::ClientFailed {
                            round,
                            client_id: client,
                            reason: format!("sent an update labelled client {}", u.client_id),
                        });
                    }
                    pending.remove(&client);
                    updates.push(u);
                }
                Message::Abort { reason, .. } if pending.contains(&client) => {
                    return Err(FedError::ClientFailed {
                        round,
                        client_id: client,
                        reason: format!("aborted: {reason}"),
                    });
                }
                other => debug!("ignoring {:?} from client {client} in round {round}", other.kind()),
            }
        }
        Ok(updates)
    }
}

impl ClientDispatch for TcpDispatch {
    fn dispatch(&mut self, selected: &[usize], task: &RoundTask) -> Result<Vec<ClientUpdate>, FedError> {
        if let Some(&c) = selected.iter().find(|&&c| c >= self.options.num_clients) {
            return Err(FedError::Config(format!("no client {c}")));
        }
        self.wait_for(selected, task.round, self.options.handshake_timeout)?;
        let result = self.collect(selected, task);
        if let Err(e) = &result {
            self.abort(selected, task.round, &e.to_string());
        }
        result
    }

    fn report(&mut self, record: &RoundRecord) -> Result<(), FedError> {
        let msg = Message::EvalReport {
            round: record.round,
            metric: record.metric,
            loss: record.loss,
        };
        let bytes = encode_message(&msg)?;
        for c in self.connected() {
            if let Err(e) = self.send_client(c, &msg, &bytes) {
                warn!("report to client {c}: {e}");
            }
        }
        Ok(())
    }

    /// Sends Shutdown to every open connection and closes the write sides.
    fn finish(&mut self) -> Result<(), FedError> {
        let _ = self.accept_pending();
        while let Ok(event) = self.events.try_recv() {
            self.handle(event);
        }
        let msg = Message::Shutdown;
        let bytes = encode_message(&msg)?;
        let mut conns: Vec<usize> = self.conns.keys().copied().collect();
        conns.sort_unstable();
        for conn in conns {
            let client = self.client_of(conn);
            if let Err(e) = self.send_bytes(conn, client, &msg, &bytes) {
                debug!("shutdown to connection {conn}: {e}");
            }
            if let Some(stream) = self.conns.get(&conn) {
                let _ = stream.shutdown(Shutdown::Write);
            }
        }
        Ok(())
    }
}

/// Waits for all clients, then runs the federation's remaining rounds over
/// `dispatch`. Clients get Shutdown when it ends, also on failure.
pub fn serve(dispatch: &mut TcpDispatch, federation: &mut Federation, test: &[Sample]) -> Result<(), FedError> {
    if let Err(e) = dispatch.wait_for_clients() {
        let _ = dispatch.finish();
        return Err(e);
    }
    federation.run(dispatch, test)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_millis(200),
            max_backoff: Duration::from_secs(2),
        }
    }
}

impl RetryPolicy {
    /// Pause before attempt `n` (1-based; the first attempt has none).
    pub fn backoff(&self, n: u32) -> Duration {
        if n <= 1 {
            return Duration::ZERO;
        }
        let factor = 1u32.checked_shl(n - 2).unwrap_or(u32::MAX);
        self.initial_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientOptions {
    pub retry: RetryPolicy,
    /// Architecture this client is prepared to train; other tasks are refused.
    pub expected_architecture: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientSummary {
    pub rounds_trained: usize,
    /// `(round, metric, loss)` of every EvalReport received.
    pub reports: Vec<(usize, f64, f64)>,
    pub transcript: Vec<TranscriptEntry>,
}

struct ClientSession<'a> {
    id: usize,
    stream: TcpStream,
    summary: &'a mut ClientSummary,
}

impl ClientSession<'_> {
    fn send(&mut self, msg: &Message) -> Result<(), WireError> {
        write_message(&mut self.stream, msg)?;
        self.summary.transcript.push(TranscriptEntry {
            direction: Direction::Sent,
            client_id: Some(self.id),
            kind: msg.kind(),
            round: msg.round(),
        });
        Ok(())
    }

    fn recv(&mut self) -> Result<Option<Message>, WireError> {
        let msg = read_message(&mut self.stream)?;
        if let Some(m) = &msg {
            self.summary.transcript.push(TranscriptEntry {
                direction: Direction::Received,
                client_id: Some(self.id),
                kind: m.kind(),
                round: m.round(),
            });
        }
        Ok(msg)
    }
}

fn connect(addrs: &[SocketAddr], retry: &RetryPolicy) -> Result<TcpStream, FedError> {
    let mut last = None;
    for attempt in 1..=retry.attempts.max(1) {
        thread::sleep(retry.backoff(attempt));
        match TcpStream::connect(addrs) {
            Ok(s) => {
                s.set_nodelay(true).map_err(|e| FedError::Transport(e.to_string()))?;
                return Ok(s);
            }
            Err(e) => {
                warn!("connect attempt {attempt}/{} failed: {e}", retry.attempts);
                last = Some(e);
            }
        }
    }
    Err(FedError::Transport(format!(
        "could not connect after {} attempts: {}",
        retry.attempts,
        last.map_or_else(|| "no address".to_string(), |e| e.to_string())
    )))
}

/// Whether a read failure means the connection dropped (worth reconnecting)
/// rather than a protocol violation.
fn is_connection_loss(e: &WireError) -> bool {
    matches!(e, WireError::Io(_) | WireError::Truncated { .. })
}

/// Joins the server as `trainer`'s client id and serves rounds until
/// Shutdown. A dropped connection is retried per `options.retry`; a
/// refused task is answered with Abort and returned as an error.
pub fn client_run(
    addr: impl ToSocketAddrs,
    trainer: &mut LocalTrainer,
    options: &ClientOptions,
) -> Result<ClientSummary, FedError> {
    let addrs: Vec<SocketAddr> = addr
        .to_socket_addrs()
        .map_err(|e| FedError::Transport(format!("resolve: {e}")))?
        .collect();
    let id = trainer.client_id();
    let mut summary = ClientSummary::default();
    'connection: loop {
        let stream = connect(&addrs, &options.retry)?;
        let mut session = ClientSession {
            id,
            stream,
            summary: &mut summary,
        };
        if let Err(e) = session.send(&Message::Hello { client_id: id }) {
            warn!("client {id}: handshake send failed: {e}");
            continue 'connection;
        }
        loop {
            let msg = match session.recv() {
                Ok(Some(m)) => m,
                Ok(None) => {
                    warn!("client {id}: server closed the connection, reconnecting");
                    continue 'connection;
                }
                Err(e) if is_connection_loss(&e) => {
                    warn!("client {id}: {e}, reconnecting");
                    continue 'connection;
                }
                Err(e) => return Err(e.into()),
            };
            match msg {
                Message::Hello { client_id } if client_id == id => info!("client {id}: joined"),
                Message::Abort { round: 0, reason } => {
                    return Err(FedError::Transport(format!("server rejected client {id}: {reason}")));
                }
                Message::Abort { round, reason } => warn!("client {id}: server aborted round {round}: {reason}"),
                Message::EvalReport { round, metric, loss } => session.summary.reports.push((round, metric, loss)),
                Message::Shutdown => {
                    info!("client {id}: shutdown after {} rounds", session.summary.rounds_trained);
                    return Ok(summary);
                }
                Message::RoundStart(task) => {
                    let round = task.round;
                    let refused = options
                        .expected_architecture
                        .as_ref()
                        .filter(|a| **a != task.weights.architecture)
                        .map(|a| format!("expected architecture `{a}`, got `{}`", task.weights.architecture));
                    let outcome = match refused {
                        Some(reason) => Err(FedError::Config(reason)),
                        None => trainer.train(&task),
                    };
                    match outcome {
                        Ok(update) => {
                            if let Err(e) = session.send(&Message::RoundResult(update)) {
                                warn!("client {id}: sending round {round} result failed: {e}");
                                continue 'connection;
                            }
                            session.summary.rounds_trained += 1;
                        }
                        Err(e) => {
                            let _ = session.send(&Message::Abort {
                                round,
                                reason: e.to_string(),
                            });
                            return Err(FedError::ClientFailed {
                                round,
                                client_id: id,
                                reason: e.to_string(),
                            });
                        }
                    }
                }
                Message::Ping => session.send(&Message::Ping)?,
                other => debug!("client {id}: ignoring {:?}", other.kind()),
            }
        }
    }
}
