use std::sync::mpsc;
use std::thread::{self, JoinHandle};

use super::{Command, Orchestrator, Reply, System, SystemError};

type ReadFn = Box<dyn FnOnce(&System) + Send>;

enum Request {
    Execute(Command, mpsc::Sender<Result<Reply, SystemError>>),
    Read(ReadFn),
    Compact(mpsc::Sender<Result<u64, SystemError>>),
}

/// Cloneable handle to an orchestrator running on its own thread. Commands
/// from every handle are applied one at a time in arrival order.
#[derive(Clone)]
pub struct SystemHandle {
    tx: mpsc::Sender<Request>,
}

impl SystemHandle {
    /// Moves the orchestrator onto a worker thread. The thread returns it once
    /// every handle has been dropped.
    pub fn spawn(mut orch: Orchestrator) -> (Self, JoinHandle<Orchestrator>) {
        let (tx, rx) = mpsc::channel::<Request>();
        let worker = thread::spawn(move || {
            for req in rx {
                match req {
                    Request::Execute(cmd, reply) => {
                        let _ = reply.send(orch.execute(&cmd));
                    }
                    Request::Read(f) => f(orch.system()),
                    Request::Compact(reply) => {
                        let _ = reply.send(orch.compact());
                    }
                }
            }
            orch
        });
        (Self { tx }, worker)
    }

    fn stopped() -> SystemError {
        SystemError::Invalid("orchestrator has stopped".into())
    }

    pub fn execute(&self, command: Command) -> Result<Reply, SystemError> {
        let (tx, rx) = mpsc::channel();
        self.tx.send(Request::Execute(command, tx)).map_err(|_| Self::stopped())?;
        rx.recv().map_err(|_| Self::stopped())?
    }

    /// Runs `f` against the current state between commands.
    pub fn read<R: Send + 'static>(&self, f: impl FnOnce(&System) -> R + Send + 'static) -> Result<R, SystemError> {
        let (tx, rx) = mpsc::channel();
        let job: ReadFn = Box::new(move |sys| {
            let _ = tx.send(f(sys));
        });
        self.tx.send(Request::Read(job)).map_err(|_| Self::stopped())?;
        rx.recv().map_err(|_| Self::stopped())
    }

    pub fn compact(&self) -> Result<u64, SystemError> {
        let (tx, rx) = mpsc::channel();
        self.tx.send(Request::Compact(tx)).map_err(|_| Self::stopped())?;
        rx.recv().map_err(|_| Self::stopped())?
    }
}
