use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, SyncSender};

use super::frame::{encode_checked, read_frame, DEFAULT_MAX_PAYLOAD};
use super::{ProtocolMessage, TransportError};

/// One side of an ordered, reliable, blocking message link.
pub trait Endpoint: Send {
    fn send(&mut self, msg: ProtocolMessage) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<ProtocolMessage, TransportError>;
}

impl<E: Endpoint + ?Sized> Endpoint for Box<E> {
    fn send(&mut self, msg: ProtocolMessage) -> Result<(), TransportError> {
        (**self).send(msg)
    }

    fn recv(&mut self) -> Result<ProtocolMessage, TransportError> {
        (**self).recv()
    }
}

pub struct ChannelEndpoint {
    tx: SyncSender<ProtocolMessage>,
    rx: Receiver<ProtocolMessage>,
}

/// In-process pair with a bounded queue in each direction.
pub fn channel_pair(capacity: usize) -> (ChannelEndpoint, ChannelEndpoint) {
    let (a_tx, b_rx) = mpsc::sync_channel(capacity);
    let (b_tx, a_rx) = mpsc::sync_channel(capacity);
    (ChannelEndpoint { tx: a_tx, rx: a_rx }, ChannelEndpoint { tx: b_tx, rx: b_rx })
}

impl Endpoint for ChannelEndpoint {
    fn send(&mut self, msg: ProtocolMessage) -> Result<(), TransportError> {
        self.tx.send(msg).map_err(|_| TransportError::Disconnected)
    }

    fn recv(&mut self) -> Result<ProtocolMessage, TransportError> {
        self.rx.recv().map_err(|_| TransportError::Disconnected)
    }
}

/// Frames over a TCP connection.
pub struct StreamEndpoint {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    max_payload: usize,
}

impl StreamEndpoint {
    pub fn new(stream: TcpStream, max_payload: usize) -> Result<Self, TransportError> {
        stream.set_nodelay(true).map_err(TransportError::from_io)?;
        let read_half = stream.try_clone().map_err(TransportError::from_io)?;
        Ok(Self { reader: BufReader::new(read_half), writer: BufWriter::new(stream), max_payload })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr).map_err(TransportError::from_io)?;
        Self::new(stream, DEFAULT_MAX_PAYLOAD)
    }

    pub fn with_max_payload(mut self, max_payload: usize) -> Self {
        self.max_payload = max_payload;
        self
    }

    pub fn peer_addr(&self) -> Option<SocketAddr> {
        self.writer.get_ref().peer_addr().ok()
    }

    /// Closes both directions; the peer's next receive sees a disconnect.
    pub fn shutdown(self) {
        let _ = self.writer.get_ref().shutdown(std::net::Shutdown::Both);
    }
}

impl Endpoint for StreamEndpoint {
    fn send(&mut self, msg: ProtocolMessage) -> Result<(), TransportError> {
        let frame = encode_checked(&msg, self.max_payload)?;
        self.writer.write_all(&frame).map_err(TransportError::from_io)?;
        self.writer.flush().map_err(TransportError::from_io)
    }

    fn recv(&mut self) -> Result<ProtocolMessage, TransportError> {
        read_frame(&mut self.reader, self.max_payload)
    }
}

pub struct StreamListener {
    listener: TcpListener,
    max_payload: usize,
}

impl StreamListener {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(addr).map_err(TransportError::from_io)?;
        Ok(Self { listener, max_payload: DEFAULT_MAX_PAYLOAD })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        self.listener.local_addr().map_err(TransportError::from_io)
    }

    pub fn accept(&self) -> Result<StreamEndpoint, TransportError> {
        let (stream, _) = self.listener.accept().map_err(TransportError::from_io)?;
        StreamEndpoint::new(stream, self.max_payload)
    }
}

/// A connected loopback pair `(client side, server side)`.
pub fn stream_pair() -> Result<(StreamEndpoint, StreamEndpoint), TransportError> {
    let listener = StreamListener::bind("127.0.0.1:0")?;
    let client = StreamEndpoint::connect(listener.local_addr()?)?;
    let server = listener.accept()?;
    Ok((client, server))
}
