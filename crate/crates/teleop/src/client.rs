//! Headless client used by scripted drivers and tests.

use std::io;
use std::net::SocketAddr;

use bytes::Bytes;
use futures::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_util::codec::{Framed, LengthDelimitedCodec};

use crate::protocol::{codec, Frame, Inbound, Outbound, PROTOCOL_VERSION};

pub struct BotClient {
    framed: Framed<TcpStream, LengthDelimitedCodec>,
    hello: Outbound,
}

impl BotClient {
    /// Connects and checks the hello frame's protocol version.
    pub async fn connect(addr: SocketAddr) -> io::Result<Self> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let mut framed = Framed::new(stream, codec());
        let first = framed
            .next()
            .await
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "closed before hello"))??;
        let hello = Outbound::decode(&first).map_err(invalid)?;
        match hello {
            Outbound::Hello { protocol, .. } if protocol == PROTOCOL_VERSION => Ok(Self { framed, hello }),
            other => Err(invalid(format!("unexpected greeting {other:?}"))),
        }
    }

    pub fn hello(&self) -> &Outbound {
        &self.hello
    }

    pub async fn send(&mut self, msg: &Inbound) -> io::Result<()> {
        self.framed.send(msg.encode()).await
    }

    pub async fn command(&mut self, handwheel: f64, torque: f64, client_time_ms: f64) -> io::Result<()> {
        self.send(&Inbound::Command { handwheel, torque, client_time_ms }).await
    }

    /// Next message with its raw bytes, or `None` once the server hangs up.
    pub async fn recv_raw(&mut self) -> io::Result<Option<(Bytes, Outbound)>> {
        match self.framed.next().await {
            None => Ok(None),
            Some(bytes) => {
                let bytes = bytes?.freeze();
                let msg = Outbound::decode(&bytes).map_err(invalid)?;
                Ok(Some((bytes, msg)))
            }
        }
    }

    pub async fn recv(&mut self) -> io::Result<Outbound> {
        self.recv_raw()
            .await?
            .map(|(_, m)| m)
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "server closed"))
    }

    /// Skips non-frame messages until the next frame.
    pub async fn next_frame(&mut self) -> io::Result<Frame> {
        loop {
            if let Outbound::Frame(f) = self.recv().await? {
                return Ok(f);
            }
        }
    }
}

fn invalid(e: impl ToString) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e.to_string())
}
