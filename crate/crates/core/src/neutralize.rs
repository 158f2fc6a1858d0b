//! Signal transport plumbing: FFI to the checkpoint shim and the registry that
//! maps a process id to the thread currently running it.

use std::cell::RefCell;
use std::ffi::{c_int, c_void};
use std::sync::atomic::{AtomicU64, AtomicU8};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use crate::error::SmrError;

/// Signal used to neutralize a process.
pub const NEUTRALIZE_SIGNAL: c_int = libc::SIGUSR1;

#[repr(C)]
pub(crate) struct RawCtx {
    _opaque: [u8; 0],
}

extern "C" {
    fn smr_install_handler(signo: c_int) -> c_int;
    fn smr_ctx_new(announce: *const AtomicU64) -> *mut RawCtx;
    fn smr_ctx_free(ctx: *mut RawCtx);
    fn smr_run(ctx: *mut RawCtx, body: extern "C" fn(*mut c_void), arg: *mut c_void) -> c_int;
    fn smr_stall_masked(signo: c_int, nanos: u64, stop: *const AtomicU8);
}

static INSTALL: OnceLock<Result<(), String>> = OnceLock::new();

pub(crate) fn install_handler() -> Result<(), SmrError> {
    INSTALL
        .get_or_init(|| {
            if unsafe { smr_install_handler(NEUTRALIZE_SIGNAL) } != 0 {
                return Err(std::io::Error::last_os_error().to_string());
            }
            Ok(())
        })
        .clone()
        .map_err(SmrError::Signal)
}

/// Owned checkpoint for one process.
pub(crate) struct OwnedCtx(*mut RawCtx);

unsafe impl Send for OwnedCtx {}

impl OwnedCtx {
    pub(crate) fn new(announce: *const AtomicU64) -> Self {
        let p = unsafe { smr_ctx_new(announce) };
        assert!(!p.is_null(), "out of memory allocating a checkpoint");
        OwnedCtx(p)
    }

    pub(crate) fn handle(&self) -> SignalContext {
        SignalContext(self.0)
    }
}

impl Drop for OwnedCtx {
    fn drop(&mut self) {
        unsafe { smr_ctx_free(self.0) };
    }
}

/// Borrowed checkpoint passed to [`run_guarded`].
#[derive(Copy, Clone)]
pub struct SignalContext(*mut RawCtx);

/// Runs `f` under the checkpoint. Returns true if a neutralization abandoned it.
///
/// Frames inside `f` that a jump skips are never unwound, so they must not own
/// anything with a destructor.
pub fn run_guarded(ctx: SignalContext, f: &mut dyn FnMut()) -> bool {
    extern "C" fn trampoline(arg: *mut c_void) {
        let f = unsafe { &mut *(arg as *mut &mut dyn FnMut()) };
        f();
    }
    let mut f = f;
    let arg = &mut f as *mut &mut dyn FnMut() as *mut c_void;
    unsafe { smr_run(ctx.0, trampoline, arg) != 0 }
}

/// Sleeps with the neutralization signal blocked, as a descheduled process
/// would; a signal sent meanwhile is handled when the sleep ends.
pub fn stall_masked(duration: Duration, stop: &AtomicU8) {
    let nanos = u64::try_from(duration.as_nanos()).unwrap_or(u64::MAX);
    unsafe { smr_stall_masked(NEUTRALIZE_SIGNAL, nanos, stop) };
}

/// The thread currently running a process, if any.
#[derive(Default)]
pub(crate) struct ThreadSlot {
    thread: Mutex<Option<libc::pthread_t>>,
}

struct Bindings(Vec<Arc<ThreadSlot>>);

impl Drop for Bindings {
    fn drop(&mut self) {
        let me = unsafe { libc::pthread_self() };
        for slot in &self.0 {
            let mut t = slot.thread.lock().unwrap_or_else(|e| e.into_inner());
            if *t == Some(me) {
                *t = None;
            }
        }
    }
}

thread_local! {
    static BINDINGS: RefCell<Bindings> = const { RefCell::new(Bindings(Vec::new())) };
}

impl ThreadSlot {
    /// Records the calling thread as the one running this process. The binding
    /// is dropped automatically when the thread exits.
    pub(crate) fn bind_current(self: &Arc<Self>) -> libc::pthread_t {
        let me = unsafe { libc::pthread_self() };
        *self.thread.lock().unwrap_or_else(|e| e.into_inner()) = Some(me);
        BINDINGS.with(|b| {
            let mut b = b.borrow_mut();
            if !b.0.iter().any(|s| Arc::ptr_eq(s, self)) {
                b.0.push(self.clone());
            }
        });
        me
    }

    pub(crate) fn unbind(&self) {
        *self.thread.lock().unwrap_or_else(|e| e.into_inner()) = None;
    }

    /// Sends the neutralization signal to the bound thread.
    pub(crate) fn signal(&self) -> bool {
        let t = self.thread.lock().unwrap_or_else(|e| e.into_inner());
        match *t {
            // Holding the lock keeps the thread from exiting underneath us.
            Some(thread) => unsafe { libc::pthread_kill(thread, NEUTRALIZE_SIGNAL) == 0 },
            None => false,
        }
    }
}
