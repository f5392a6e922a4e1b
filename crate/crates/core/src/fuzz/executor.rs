//! Ways of running the target: in process, or behind a TCP connection
//! speaking the framed protocol.

use std::io::{self, BufReader, BufWriter};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::abi::{read_frame, write_frame, ExecutionConfig, ExecutionResult, FrameIoError, Message, WireError};
use crate::minivm::{execute, Program, VmLimits, DEFAULT_STEP_BUDGET};

/// Largest frame either side accepts.
pub const MAX_FRAME: usize = 256 << 20;

/// Failure to obtain a result at all, as opposed to a target that ran and
/// terminated badly.
#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection to {addr} failed: {source}")]
    Connect { addr: String, source: io::Error },
    #[error("i/o error talking to the executor: {0}")]
    Io(#[from] io::Error),
    #[error("malformed frame from the executor: {0}")]
    Wire(#[from] WireError),
    #[error("executor answered with a configuration frame")]
    UnexpectedConfig,
}

impl From<FrameIoError> for TransportError {
    fn from(e: FrameIoError) -> Self {
        match e {
            FrameIoError::Io(e) => TransportError::Io(e),
            FrameIoError::Wire(e) => TransportError::Wire(e),
        }
    }
}

pub trait Executor {
    fn execute(&mut self, config: &ExecutionConfig) -> Result<ExecutionResult, TransportError>;

    /// Step budget for local runs; remote clients enforce their own.
    fn set_step_budget(&mut self, _steps: u64) {}
}

#[derive(Debug, Clone)]
pub struct LocalExecutor {
    program: Arc<Program>,
    pub step_budget: u64,
}

impl LocalExecutor {
    pub fn new(program: Arc<Program>, step_budget: u64) -> Self {
        LocalExecutor { program, step_budget }
    }
}

impl Executor for LocalExecutor {
    fn execute(&mut self, config: &ExecutionConfig) -> Result<ExecutionResult, TransportError> {
        Ok(execute(&self.program, config, &VmLimits::for_config(config, self.step_budget)))
    }

    fn set_step_budget(&mut self, steps: u64) {
        self.step_budget = steps;
    }
}

/// Client side of the protocol: one request, one framed answer.
#[derive(Debug)]
pub struct RemoteExecutor {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl RemoteExecutor {
    pub fn connect(addr: impl ToSocketAddrs + std::fmt::Display, timeout: Duration) -> Result<Self, TransportError> {
        let name = addr.to_string();
        let fail = |source| TransportError::Connect { addr: name.clone(), source };
        let mut last = None;
        for a in addr.to_socket_addrs().map_err(fail)? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(s) => return Self::from_stream(s, timeout),
                Err(e) => last = Some(e),
            }
        }
        Err(fail(last.unwrap_or_else(|| io::Error::new(io::ErrorKind::NotFound, "no address"))))
    }

    pub fn from_stream(stream: TcpStream, timeout: Duration) -> Result<Self, TransportError> {
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(RemoteExecutor {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }
}

impl Executor for RemoteExecutor {
    fn execute(&mut self, config: &ExecutionConfig) -> Result<ExecutionResult, TransportError> {
        write_frame(&mut self.writer, &Message::Config(config.clone()))?;
        match read_frame(&mut self.reader, MAX_FRAME)? {
            Message::Result(r) => Ok(r),
            Message::Config(_) => Err(TransportError::UnexpectedConfig),
        }
    }
}

/// What a serving client accepts and how it runs the target.
#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    pub step_budget: u64,
    /// Configs carrying more input than this are refused by closing the
    /// connection.
    pub max_input_bytes: usize,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions {
            step_budget: DEFAULT_STEP_BUDGET,
            max_input_bytes: 1 << 20,
        }
    }
}

/// Answers configs on one connection until the peer hangs up.
pub fn serve_connection(program: &Program, stream: TcpStream, opts: ServeOptions) -> Result<(), TransportError> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let limit = opts.max_input_bytes + 64;
    loop {
        let msg = match read_frame(&mut reader, limit) {
            Ok(m) => m,
            Err(FrameIoError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        let Message::Config(cfg) = msg else {
            return Err(TransportError::Wire(WireError::Invalid("expected a configuration frame".into())));
        };
        if cfg.input.len() > opts.max_input_bytes {
            return Err(TransportError::Wire(WireError::TooLarge(cfg.input.len())));
        }
        let r = execute(program, &cfg, &VmLimits::for_config(&cfg, opts.step_budget));
        write_frame(&mut writer, &Message::Result(r))?;
    }
}

/// Serves every incoming connection on its own thread. With `max_conns`
/// set, returns after that many connections have finished.
pub fn serve(listener: TcpListener, program: Arc<Program>, opts: ServeOptions, max_conns: Option<usize>) -> io::Result<()> {
    let mut handles = Vec::new();
    for (i, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let p = Arc::clone(&program);
        handles.push(thread::spawn(move || {
            if let Err(e) = serve_connection(&p, stream, opts) {
                eprintln!("executor connection closed: {e}");
            }
        }));
        if max_conns.is_some_and(|m| i + 1 >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}
