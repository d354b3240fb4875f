//! Loopback TCP plumbing shared by inboxes and parameter subscriptions.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::codec::{read_frame, Envelope};

/// Consumer of decoded envelopes; returning `false` stops the reader.
pub(crate) type Sink = Arc<dyn Fn(Envelope) -> bool + Send + Sync>;

pub(crate) fn bind(base_port: u16) -> io::Result<TcpListener> {
    if base_port == 0 {
        return TcpListener::bind((Ipv4Addr::LOCALHOST, 0));
    }
    let mut last = None;
    for port in base_port..base_port.saturating_add(1024) {
        match TcpListener::bind((Ipv4Addr::LOCALHOST, port)) {
            Ok(l) => return Ok(l),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| io::Error::new(io::ErrorKind::AddrInUse, "no free port")))
}

/// Accepts connections until dropped; every connection gets a reader thread
/// feeding `sink`. The sink (and whatever it captures) is released once the
/// acceptor has stopped and every reader has hit end of stream.
pub(crate) struct Acceptor {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Acceptor {
    pub(crate) fn spawn(listener: TcpListener, sink: Sink) -> io::Result<Self> {
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = thread::Builder::new()
            .name(format!("accept-{}", addr.port()))
            .spawn(move || loop {
                // read the flag before polling so one full pass over the
                // backlog happens after a stop request
                let stopping = flag.load(Ordering::Acquire);
                match listener.accept() {
                    Ok((stream, _)) => {
                        if spawn_reader(stream, Arc::clone(&sink)).is_err() {
                            break;
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        if stopping {
                            break;
                        }
                        thread::sleep(Duration::from_millis(1));
                    }
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                    Err(_) => break,
                }
            })?;
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub(crate) fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for Acceptor {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn spawn_reader(stream: TcpStream, sink: Sink) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    thread::Builder::new()
        .name("tcp-reader".into())
        .spawn(move || {
            let mut r = BufReader::with_capacity(1 << 16, stream);
            while let Ok(Some(env)) = read_frame(&mut r) {
                if !sink(env) {
                    break;
                }
            }
        })?;
    Ok(())
}

/// Sending half of a TCP link: frames are queued to a writer thread that
/// owns the socket.
pub(crate) struct TcpLink {
    tx: Option<SyncSender<Vec<u8>>>,
    handle: Option<JoinHandle<io::Result<()>>>,
}

impl TcpLink {
    pub(crate) fn connect(addr: SocketAddr, depth: usize) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let (tx, rx) = sync_channel::<Vec<u8>>(depth.max(1));
        let handle = thread::Builder::new()
            .name(format!("tcp-writer-{}", addr.port()))
            .spawn(move || {
                let mut w = BufWriter::with_capacity(1 << 16, &stream);
                while let Ok(frame) = rx.recv() {
                    w.write_all(&frame)?;
                    while let Ok(more) = rx.try_recv() {
                        w.write_all(&more)?;
                    }
                    w.flush()?;
                }
                w.flush()?;
                drop(w);
                let _ = stream.shutdown(Shutdown::Write);
                Ok(())
            })?;
        Ok(Self {
            tx: Some(tx),
            handle: Some(handle),
        })
    }

    /// Queues a frame; blocks only while the link's queue is full.
    pub(crate) fn send(&self, frame: Vec<u8>) -> Result<(), ()> {
        match &self.tx {
            Some(tx) => tx.send(frame).map_err(|_| ()),
            None => Err(()),
        }
    }

    /// Closes the link and waits until every queued frame is written.
    pub(crate) fn close(&mut self) -> io::Result<()> {
        self.tx.take();
        match self.handle.take() {
            Some(h) => h
                .join()
                .unwrap_or_else(|_| Err(io::Error::other("writer panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for TcpLink {
    fn drop(&mut self) {
        // detach: the writer finishes flushing on its own once the queue
        // closes, without holding up the dropping thread
        self.tx.take();
    }
}
