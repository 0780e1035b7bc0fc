//! QEMU TCG plugin recording executed translation blocks into an elog file.
//!
//! ```text
//! qemu-system-aarch64 ... -plugin libelogcov_plugin.so,out=run.elog,buffers=4,capacity=8192,merge=on
//! ```
//!
//! At install the plugin creates the output file, writes the preamble and
//! registers a translation callback and an exit callback. Each translated
//! block gets a [`TbDescriptor`] holding its guest address range, and an
//! execution callback carrying that descriptor. Executions are recorded by one
//! [`Collector`] per vCPU, created on the vCPU's first execution; all
//! collectors append whole frames to the shared output file. At exit every
//! collector is drained and the file is closed.
//!
//! Callbacks never unwind into QEMU: failures turn into dropped events.

pub mod abi;
mod args;

use std::ffi::{c_char, c_int, c_uint, c_void, CStr};
use std::fs::File;
use std::io::BufWriter;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::Instant;

use elogcov_core::collector::{Collector, CollectorConfig, CollectorStats};
use elogcov_core::elog::ConfigPreamble;
use elogcov_core::sink::SharedElog;

pub use abi::{HostApi, QEMU_PLUGIN_VERSION};
pub use args::{ArgsError, PluginArgs, DEFAULT_OUTPUT};

use abi::{qemu_info_t, qemu_plugin_id_t, qemu_plugin_tb, QEMU_PLUGIN_CB_NO_REGS};

/// Guest address range `[start, end)` of one translated block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TbDescriptor {
    pub start: u64,
    pub end: u64,
}

impl TbDescriptor {
    /// Range starting at `start` covering instructions of the given byte sizes.
    pub fn from_insn_sizes(start: u64, sizes: impl IntoIterator<Item = u64>) -> Option<TbDescriptor> {
        let len: u64 = sizes.into_iter().sum();
        let end = start.checked_add(len)?;
        (end > start).then_some(TbDescriptor { start, end })
    }
}

/// What the plugin did over one run, available after exit.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub out: PathBuf,
    pub units: Vec<(u16, CollectorStats)>,
    pub total: CollectorStats,
    pub dropped: u64,
    pub errors: Vec<String>,
}

struct Vcpu {
    collector: Collector,
    last_exec: Option<Instant>,
}

struct Plugin {
    args: PluginArgs,
    api: HostApi,
    preamble: ConfigPreamble,
    output: SharedElog<BufWriter<File>>,
    vcpus: RwLock<Vec<Option<Mutex<Vcpu>>>>,
    exited: AtomicBool,
    dropped: AtomicU64,
    errors: Mutex<Vec<String>>,
}

/// Userdata of an execution callback; never freed since QEMU does not
/// report when a translated block goes away.
struct ExecPayload {
    desc: TbDescriptor,
    plugin: Arc<Plugin>,
}

static PLUGIN: RwLock<Option<Arc<Plugin>>> = RwLock::new(None);
static HOST_OVERRIDE: Mutex<Option<HostApi>> = Mutex::new(None);
static LAST_SUMMARY: Mutex<Option<(RunSummary, Arc<Plugin>)>> = Mutex::new(None);

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// Makes the next install use `api` instead of the symbols exported by the
/// host process. For hosts that are not QEMU, such as test drivers.
#[doc(hidden)]
pub fn set_host_api(api: Option<HostApi>) {
    *lock(&HOST_OVERRIDE) = api;
}

/// Summary of the most recent run that reached its exit callback. `dropped`
/// also counts executions reported after the exit callback.
pub fn last_summary() -> Option<RunSummary> {
    lock(&LAST_SUMMARY)
        .as_ref()
        .map(|(summary, plugin)| RunSummary { dropped: plugin.dropped.load(Ordering::Relaxed), ..summary.clone() })
}

impl Plugin {
    fn collector_config(&self, vcpu: usize) -> CollectorConfig {
        CollectorConfig {
            n_buffers: self.args.buffers,
            capacity: self.args.capacity,
            merge_enabled: self.args.merge,
            timing_enabled: self.args.timing,
            unit_id: vcpu as u16,
        }
    }

    fn record(&self, vcpu: &Mutex<Vcpu>, desc: &TbDescriptor) {
        let mut v = lock(vcpu);
        let duration_ns = if self.args.timing {
            let now = Instant::now();
            let d = v.last_exec.map_or(0, |t| now.duration_since(t).as_nanos().min(u32::MAX as u128) as u32);
            v.last_exec = Some(now);
            d
        } else {
            0
        };
        if v.collector.record_tb_exec(desc.start, desc.end, duration_ns).is_err() {
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn on_tb_exec(&self, vcpu: usize, desc: &TbDescriptor) {
        if self.exited.load(Ordering::Acquire) {
            self.dropped.fetch_add(1, Ordering::Relaxed);
            return;
        }
        {
            let vcpus = self.vcpus.read().unwrap_or_else(|p| p.into_inner());
            if let Some(Some(v)) = vcpus.get(vcpu) {
                self.record(v, desc);
                return;
            }
        }
        let mut vcpus = self.vcpus.write().unwrap_or_else(|p| p.into_inner());
        if self.exited.load(Ordering::Acquire) || vcpu > usize::from(u16::MAX) {
            self.dropped.fetch_add(1, Ordering::Relaxed);
            return;
        }
        if vcpus.len() <= vcpu {
            vcpus.resize_with(vcpu + 1, || None);
        }
        if vcpus[vcpu].is_none() {
            let opts = elogcov_core::collector::CollectorOptions { preamble: Some(self.preamble), observer: None };
            match Collector::with_options(self.collector_config(vcpu), self.output.handle(), opts) {
                Ok(collector) => vcpus[vcpu] = Some(Mutex::new(Vcpu { collector, last_exec: None })),
                Err(e) => {
                    lock(&self.errors).push(format!("vcpu {vcpu}: {e}"));
                    self.dropped.fetch_add(1, Ordering::Relaxed);
                    return;
                }
            }
        }
        self.record(vcpus[vcpu].as_ref().expect("created above"), desc);
    }

    fn on_exit(&self) -> RunSummary {
        let mut summary = RunSummary { out: self.args.out.clone(), ..Default::default() };
        if self.exited.swap(true, Ordering::AcqRel) {
            return summary;
        }
        let mut vcpus = self.vcpus.write().unwrap_or_else(|p| p.into_inner());
        let mut errors = std::mem::take(&mut *lock(&self.errors));
        for (idx, slot) in vcpus.iter_mut().enumerate() {
            let Some(vcpu) = slot.take() else { continue };
            let mut vcpu = vcpu.into_inner().unwrap_or_else(|p| p.into_inner());
            let stats = match vcpu.collector.flush_on_exit() {
                Ok(stats) => stats,
                Err(e) => {
                    errors.push(format!("vcpu {idx}: {e}"));
                    e.stats
                }
            };
            summary.total.add(&stats);
            summary.units.push((idx as u16, stats));
        }
        drop(vcpus);
        if let Err(e) = self.output.close() {
            errors.push(format!("closing {}: {e}", self.args.out.display()));
        }
        summary.dropped = self.dropped.load(Ordering::Relaxed);
        summary.errors = errors;
        summary
    }

    fn on_tb_translate(self: &Arc<Self>, tb: *mut qemu_plugin_tb) {
        let api = &self.api;
        // SAFETY: `tb` is the handle QEMU passed to the translation callback.
        let desc = unsafe {
            let n = (api.tb_n_insns)(tb);
            let start = (api.tb_vaddr)(tb);
            TbDescriptor::from_insn_sizes(start, (0..n).map(|i| (api.insn_size)((api.tb_get_insn)(tb, i)) as u64))
        };
        let Some(desc) = desc else { return };
        let payload = Box::into_raw(Box::new(ExecPayload { desc, plugin: Arc::clone(self) }));
        // SAFETY: the payload stays valid for the rest of the process.
        unsafe { (api.register_vcpu_tb_exec_cb)(tb, vcpu_tb_exec, QEMU_PLUGIN_CB_NO_REGS, payload.cast()) };
    }
}

fn print_summary(s: &RunSummary) {
    for (unit, st) in &s.units {
        eprintln!(
            "elogcov: vcpu {unit}: {} events, {} merged, {} frames, {} congestion waits, {} bytes",
            st.events_recorded, st.entries_merged, st.frames_written, st.congestion_waits, st.bytes_written
        );
    }
    eprintln!(
        "elogcov: {}: {} events, {} entries stored, {} dropped",
        s.out.display(),
        s.total.events_recorded,
        s.total.entries_stored(),
        s.dropped
    );
    for e in &s.errors {
        eprintln!("elogcov: error: {e}");
    }
}

unsafe extern "C" fn vcpu_tb_exec(vcpu_index: c_uint, userdata: *mut c_void) {
    // SAFETY: userdata is the ExecPayload registered in on_tb_translate.
    let payload = &*(userdata as *const ExecPayload);
    let _ = catch_unwind(AssertUnwindSafe(|| payload.plugin.on_tb_exec(vcpu_index as usize, &payload.desc)));
}

unsafe extern "C" fn vcpu_tb_trans(_id: qemu_plugin_id_t, tb: *mut qemu_plugin_tb) {
    let _ = catch_unwind(AssertUnwindSafe(|| {
        let plugin = PLUGIN.read().unwrap_or_else(|p| p.into_inner()).clone();
        if let Some(plugin) = plugin {
            plugin.on_tb_translate(tb);
        }
    }));
}

unsafe extern "C" fn plugin_exit(_id: qemu_plugin_id_t, userdata: *mut c_void) {
    // SAFETY: userdata is the Arc handed out in install().
    let plugin = Arc::from_raw(userdata as *const Plugin);
    let _ = catch_unwind(AssertUnwindSafe(|| {
        let summary = plugin.on_exit();
        print_summary(&summary);
        *lock(&LAST_SUMMARY) = Some((summary, Arc::clone(&plugin)));
        let mut current = PLUGIN.write().unwrap_or_else(|p| p.into_inner());
        if current.as_ref().is_some_and(|p| Arc::ptr_eq(p, &plugin)) {
            *current = None;
        }
    }));
}

unsafe fn install(id: qemu_plugin_id_t, info: *const qemu_info_t, argc: c_int, argv: *const *const c_char) -> c_int {
    let raw_args: Vec<String> = (0..argc.max(0) as usize)
        .map(|i| *argv.add(i))
        .filter(|p| !p.is_null())
        .map(|p| CStr::from_ptr(p).to_string_lossy().into_owned())
        .collect();
    let args = match PluginArgs::parse(raw_args.iter().map(String::as_str)) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("elogcov: {e}");
            return -1;
        }
    };
    let Some(api) = (*lock(&HOST_OVERRIDE)).or_else(HostApi::resolve) else {
        eprintln!("elogcov: QEMU plugin API symbols not found in host process");
        return -1;
    };
    let target = info.as_ref().and_then(|i| i.target()).unwrap_or_else(|| "unknown".into());
    let cfg = CollectorConfig {
        n_buffers: args.buffers,
        capacity: args.capacity,
        merge_enabled: args.merge,
        timing_enabled: args.timing,
        unit_id: 0,
    };
    if let Err(e) = cfg.validate() {
        eprintln!("elogcov: {e}");
        return -1;
    }
    let preamble = ConfigPreamble::for_target(&target, cfg.info_flags());
    let output = match SharedElog::create(&args.out, &preamble) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("elogcov: cannot create {}: {e}", args.out.display());
            return -1;
        }
    };
    let plugin = Arc::new(Plugin {
        args,
        api,
        preamble,
        output,
        vcpus: RwLock::new(Vec::new()),
        exited: AtomicBool::new(false),
        dropped: AtomicU64::new(0),
        errors: Mutex::new(Vec::new()),
    });
    *PLUGIN.write().unwrap_or_else(|p| p.into_inner()) = Some(Arc::clone(&plugin));
    (api.register_vcpu_tb_trans_cb)(id, vcpu_tb_trans);
    (api.register_atexit_cb)(id, plugin_exit, Arc::into_raw(plugin) as *mut c_void);
    0
}

#[no_mangle]
pub static qemu_plugin_version: c_int = QEMU_PLUGIN_VERSION;

/// Plugin entry point called by QEMU when the plugin is loaded.
///
/// # Safety
/// `info` must be null or valid, and `argv` must hold `argc` pointers to
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn qemu_plugin_install(
    id: qemu_plugin_id_t,
    info: *const qemu_info_t,
    argc: c_int,
    argv: *mut *mut c_char,
) -> c_int {
    catch_unwind(AssertUnwindSafe(|| install(id, info, argc, argv as *const *const c_char))).unwrap_or(-1)
}
