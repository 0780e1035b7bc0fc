//! Frame consumers for the collector's writer thread.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use crate::elog::{write_config_preamble, ConfigPreamble, ElogError};

/// Destination for encoded elog blocks.
///
/// `write_frame` always receives one complete exec frame, so implementations
/// shared between several collectors can serialize at frame granularity.
pub trait FrameSink: Send {
    /// Called once by the collector before any frame.
    fn begin(&mut self, preamble: &ConfigPreamble) -> io::Result<()>;
    fn write_frame(&mut self, frame: &[u8]) -> io::Result<()>;
    /// Called once after the last frame.
    fn finish(&mut self) -> io::Result<()>;
}

impl<S: FrameSink + ?Sized> FrameSink for Box<S> {
    fn begin(&mut self, preamble: &ConfigPreamble) -> io::Result<()> {
        (**self).begin(preamble)
    }
    fn write_frame(&mut self, frame: &[u8]) -> io::Result<()> {
        (**self).write_frame(frame)
    }
    fn finish(&mut self) -> io::Result<()> {
        (**self).finish()
    }
}

fn into_io(e: ElogError) -> io::Error {
    match e {
        ElogError::Io(e) => e,
        other => io::Error::other(other),
    }
}

/// Exclusive writer: preamble on `begin`, frames appended, flushed on `finish`.
pub struct ElogWriter<W: Write + Send> {
    inner: W,
}

impl<W: Write + Send> ElogWriter<W> {
    pub fn new(inner: W) -> Self {
        ElogWriter { inner }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

impl ElogWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        Ok(ElogWriter::new(BufWriter::with_capacity(1 << 16, File::create(path)?)))
    }
}

impl<W: Write + Send> FrameSink for ElogWriter<W> {
    fn begin(&mut self, preamble: &ConfigPreamble) -> io::Result<()> {
        write_config_preamble(&mut self.inner, preamble).map(|_| ()).map_err(into_io)
    }
    fn write_frame(&mut self, frame: &[u8]) -> io::Result<()> {
        self.inner.write_all(frame)
    }
    fn finish(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// One output stream shared by several collectors (one per vCPU).
///
/// The preamble is written when the stream is created; handles obtained with
/// [`SharedElog::handle`] only append whole frames under a mutex.
pub struct SharedElog<W: Write + Send> {
    inner: Arc<Mutex<Option<W>>>,
}

impl<W: Write + Send> Clone for SharedElog<W> {
    fn clone(&self) -> Self {
        SharedElog { inner: Arc::clone(&self.inner) }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn closed() -> io::Error {
    io::Error::new(io::ErrorKind::BrokenPipe, "elog stream already closed")
}

impl<W: Write + Send> SharedElog<W> {
    pub fn new(mut inner: W, preamble: &ConfigPreamble) -> io::Result<Self> {
        write_config_preamble(&mut inner, preamble).map_err(into_io)?;
        Ok(SharedElog { inner: Arc::new(Mutex::new(Some(inner))) })
    }

    pub fn handle(&self) -> SharedHandle<W> {
        SharedHandle { inner: Arc::clone(&self.inner) }
    }

    /// Flushes and takes the underlying writer; later frame writes fail.
    pub fn close(&self) -> io::Result<Option<W>> {
        let mut guard = lock(&self.inner);
        if let Some(w) = guard.as_mut() {
            w.flush()?;
        }
        Ok(guard.take())
    }

    /// Runs `f` on the writer if the stream is still open.
    pub fn with_inner<T>(&self, f: impl FnOnce(&W) -> T) -> Option<T> {
        lock(&self.inner).as_ref().map(f)
    }
}

impl SharedElog<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, preamble: &ConfigPreamble) -> io::Result<Self> {
        SharedElog::new(BufWriter::with_capacity(1 << 16, File::create(path)?), preamble)
    }
}

pub struct SharedHandle<W: Write + Send> {
    inner: Arc<Mutex<Option<W>>>,
}

impl<W: Write + Send> FrameSink for SharedHandle<W> {
    fn begin(&mut self, _preamble: &ConfigPreamble) -> io::Result<()> {
        // written by SharedElog::new
        Ok(())
    }
    fn write_frame(&mut self, frame: &[u8]) -> io::Result<()> {
        lock(&self.inner).as_mut().ok_or_else(closed)?.write_all(frame)
    }
    fn finish(&mut self) -> io::Result<()> {
        match lock(&self.inner).as_mut() {
            Some(w) => w.flush(),
            None => Ok(()),
        }
    }
}

/// Byte buffer that can be handed to a sink and read back afterwards.
#[derive(Clone, Default)]
pub struct MemoryBuffer(Arc<Mutex<Vec<u8>>>);

impl MemoryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&self) -> Vec<u8> {
        lock(&self.0).clone()
    }

    pub fn len(&self) -> usize {
        lock(&self.0).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Write for MemoryBuffer {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        lock(&self.0).extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// In-memory sink; the captured bytes stay readable through the returned buffer.
pub fn memory_sink() -> (ElogWriter<MemoryBuffer>, MemoryBuffer) {
    let buf = MemoryBuffer::new();
    (ElogWriter::new(buf.clone()), buf)
}

/// Adds a fixed delay to every frame write, emulating a slow disk.
pub struct LatencySink<S> {
    inner: S,
    latency: Duration,
}

impl<S: FrameSink> LatencySink<S> {
    pub fn new(inner: S, latency: Duration) -> Self {
        LatencySink { inner, latency }
    }
}

impl<S: FrameSink> FrameSink for LatencySink<S> {
    fn begin(&mut self, preamble: &ConfigPreamble) -> io::Result<()> {
        self.inner.begin(preamble)
    }
    fn write_frame(&mut self, frame: &[u8]) -> io::Result<()> {
        if !self.latency.is_zero() {
            thread::sleep(self.latency);
        }
        self.inner.write_frame(frame)
    }
    fn finish(&mut self) -> io::Result<()> {
        self.inner.finish()
    }
}
