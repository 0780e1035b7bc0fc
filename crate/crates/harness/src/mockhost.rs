//! A stand-in for QEMU that drives the plugin through its C entry points.
//!
//! The mock implements the host half of the plugin API (`qemu_plugin_*`
//! functions) over plain Rust structures and installs it with
//! [`elogcov_plugin::set_host_api`]. Only one mock host can exist at a time;
//! [`MockHost::install`] blocks until the previous one is dropped.

use std::collections::HashMap;
use std::ffi::{c_char, c_int, c_uint, c_void, CString};
use std::path::PathBuf;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Instant;

use elogcov_core::elog::decode_all;
use elogcov_plugin::abi::{
    qemu_info_system, qemu_info_t, qemu_info_version, qemu_plugin_id_t, qemu_plugin_insn, qemu_plugin_tb,
    qemu_plugin_udata_cb_t, qemu_plugin_vcpu_tb_trans_cb_t, qemu_plugin_vcpu_udata_cb_t,
};
use elogcov_plugin::{qemu_plugin_install, set_host_api, HostApi, PluginArgs, RunSummary, QEMU_PLUGIN_VERSION};

use crate::oracle::{counts_from_blocks, segments, Segment};
use crate::replay::ExperimentResult;
use crate::HarnessError;

struct MockInsn {
    vaddr: u64,
    size: usize,
}

struct MockTb {
    vaddr: u64,
    insns: Vec<MockInsn>,
    exec_cbs: Mutex<Vec<(qemu_plugin_vcpu_udata_cb_t, usize)>>,
}

#[derive(Default)]
struct Registry {
    trans_cb: Option<qemu_plugin_vcpu_tb_trans_cb_t>,
    atexit: Option<(qemu_plugin_udata_cb_t, usize)>,
}

static HOST_IN_USE: Mutex<bool> = Mutex::new(false);
static HOST_RELEASED: Condvar = Condvar::new();
static REGISTRY: Mutex<Registry> = Mutex::new(Registry { trans_cb: None, atexit: None });

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

unsafe extern "C" fn mock_register_vcpu_tb_trans_cb(_id: qemu_plugin_id_t, cb: qemu_plugin_vcpu_tb_trans_cb_t) {
    lock(&REGISTRY).trans_cb = Some(cb);
}

unsafe extern "C" fn mock_register_vcpu_tb_exec_cb(
    tb: *mut qemu_plugin_tb,
    cb: qemu_plugin_vcpu_udata_cb_t,
    _flags: c_int,
    userdata: *mut c_void,
) {
    let tb = &*(tb as *const MockTb);
    lock(&tb.exec_cbs).push((cb, userdata as usize));
}

unsafe extern "C" fn mock_register_atexit_cb(_id: qemu_plugin_id_t, cb: qemu_plugin_udata_cb_t, userdata: *mut c_void) {
    lock(&REGISTRY).atexit = Some((cb, userdata as usize));
}

unsafe extern "C" fn mock_tb_n_insns(tb: *const qemu_plugin_tb) -> usize {
    let tb = &*(tb as *const MockTb);
    tb.insns.len()
}

unsafe extern "C" fn mock_tb_vaddr(tb: *const qemu_plugin_tb) -> u64 {
    (*(tb as *const MockTb)).vaddr
}

unsafe extern "C" fn mock_tb_get_insn(tb: *const qemu_plugin_tb, idx: usize) -> *mut qemu_plugin_insn {
    let tb = &*(tb as *const MockTb);
    match tb.insns.get(idx) {
        Some(insn) => insn as *const MockInsn as *mut qemu_plugin_insn,
        None => std::ptr::null_mut(),
    }
}

unsafe extern "C" fn mock_insn_size(insn: *const qemu_plugin_insn) -> usize {
    (*(insn as *const MockInsn)).size
}

unsafe extern "C" fn mock_insn_vaddr(insn: *const qemu_plugin_insn) -> u64 {
    (*(insn as *const MockInsn)).vaddr
}

fn mock_api() -> HostApi {
    HostApi {
        register_vcpu_tb_trans_cb: mock_register_vcpu_tb_trans_cb,
        register_vcpu_tb_exec_cb: mock_register_vcpu_tb_exec_cb,
        register_atexit_cb: mock_register_atexit_cb,
        tb_n_insns: mock_tb_n_insns,
        tb_vaddr: mock_tb_vaddr,
        tb_get_insn: mock_tb_get_insn,
        insn_size: mock_insn_size,
        insn_vaddr: mock_insn_vaddr,
    }
}

/// A loaded plugin plus the translated blocks the host knows about.
///
/// `exec` only needs `&self`, so one host can be shared by several vCPU
/// threads.
pub struct MockHost {
    id: qemu_plugin_id_t,
    tbs: HashMap<u32, Box<MockTb>>,
    exited: bool,
}

impl MockHost {
    /// Loads the plugin with a comma-separated argument string, as given
    /// after the library path on the QEMU command line.
    pub fn install(args: &str, target: &str, vcpus: u32) -> Result<MockHost, HarnessError> {
        {
            let mut in_use = lock(&HOST_IN_USE);
            while *in_use {
                in_use = HOST_RELEASED.wait(in_use).unwrap_or_else(|p| p.into_inner());
            }
            *in_use = true;
        }
        let host = MockHost { id: 1, tbs: HashMap::new(), exited: false };
        *lock(&REGISTRY) = Registry::default();
        set_host_api(Some(mock_api()));

        let c_args: Vec<CString> = args
            .split(',')
            .filter(|a| !a.is_empty())
            .map(CString::new)
            .collect::<Result<_, _>>()
            .map_err(|e| HarnessError::InvalidParam(e.to_string()))?;
        let mut argv: Vec<*mut c_char> = c_args.iter().map(|a| a.as_ptr() as *mut c_char).collect();
        let target = CString::new(target).map_err(|e| HarnessError::InvalidParam(e.to_string()))?;
        let info = qemu_info_t {
            target_name: target.as_ptr(),
            version: qemu_info_version { min: QEMU_PLUGIN_VERSION, cur: QEMU_PLUGIN_VERSION },
            system_emulation: true,
            system: qemu_info_system { smp_vcpus: vcpus as c_int, max_vcpus: vcpus as c_int },
        };
        // SAFETY: info and argv outlive the call and argv holds argc valid C strings.
        let rc = unsafe { qemu_plugin_install(host.id, &info, argv.len() as c_int, argv.as_mut_ptr()) };
        set_host_api(None);
        if rc != 0 {
            return Err(HarnessError::Install(rc));
        }
        Ok(host)
    }

    /// Translates block `label` at `vaddr` made of instructions with the
    /// given byte sizes, replacing an earlier translation of the label.
    pub fn translate(&mut self, label: u32, vaddr: u64, insn_sizes: &[u64]) {
        let mut addr = vaddr;
        let insns = insn_sizes
            .iter()
            .map(|&size| {
                let insn = MockInsn { vaddr: addr, size: size as usize };
                addr = addr.wrapping_add(size);
                insn
            })
            .collect();
        let tb = Box::new(MockTb { vaddr, insns, exec_cbs: Mutex::new(Vec::new()) });
        let trans_cb = lock(&REGISTRY).trans_cb;
        if let Some(cb) = trans_cb {
            // SAFETY: the block outlives the call and is only read through the mock API.
            unsafe { cb(self.id, &*tb as *const MockTb as *mut qemu_plugin_tb) };
        }
        self.tbs.insert(label, tb);
    }

    /// Runs the execution callbacks of block `label` on `vcpu`. Returns
    /// false when the label was never translated.
    pub fn exec(&self, label: u32, vcpu: u32) -> bool {
        let Some(tb) = self.tbs.get(&label) else { return false };
        let cbs = lock(&tb.exec_cbs);
        for &(cb, userdata) in cbs.iter() {
            // SAFETY: cb and userdata were registered together by the plugin.
            unsafe { cb(vcpu as c_uint, userdata as *mut c_void) };
        }
        true
    }

    /// Calls the plugin's exit callback, once.
    pub fn exit(&mut self) {
        if std::mem::replace(&mut self.exited, true) {
            return;
        }
        let atexit = lock(&REGISTRY).atexit.take();
        if let Some((cb, userdata)) = atexit {
            // SAFETY: cb and userdata were registered together by the plugin.
            unsafe { cb(self.id, userdata as *mut c_void) };
        }
    }
}

impl Drop for MockHost {
    fn drop(&mut self) {
        self.exit();
        *lock(&REGISTRY) = Registry::default();
        *lock(&HOST_IN_USE) = false;
        HOST_RELEASED.notify_one();
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MockCall {
    Translate { tb: u32, vaddr: u64, insn_sizes: Vec<u64> },
    Exec { tb: u32, vcpu: u32 },
    Exit,
}

/// Checks that every exec follows a translation of its block, that nothing
/// but execs follows the exit, and that the script exits exactly once.
pub fn validate_script(script: &[MockCall]) -> Result<(), HarnessError> {
    let mut translated = std::collections::HashSet::new();
    let mut exited = false;
    for (i, call) in script.iter().enumerate() {
        match call {
            MockCall::Translate { tb, .. } if exited => {
                return Err(HarnessError::Script(format!("call {i}: translate of block {tb} after exit")))
            }
            MockCall::Translate { tb, .. } => {
                translated.insert(*tb);
            }
            MockCall::Exec { tb, .. } if !translated.contains(tb) => {
                return Err(HarnessError::Script(format!("call {i}: exec of block {tb} before its translation")))
            }
            MockCall::Exec { .. } => {}
            MockCall::Exit if exited => return Err(HarnessError::Script(format!("call {i}: second exit"))),
            MockCall::Exit => exited = true,
        }
    }
    if !exited {
        return Err(HarnessError::Script("script never exits".into()));
    }
    Ok(())
}

/// Per-address counts a script must produce: every exec before the exit
/// covers the current translation of its block once.
pub fn script_counts(script: &[MockCall]) -> Vec<Segment> {
    let mut ranges: HashMap<u32, (u64, u64)> = HashMap::new();
    let mut covered = Vec::new();
    for call in script {
        match call {
            MockCall::Translate { tb, vaddr, insn_sizes } => {
                let len: u64 = insn_sizes.iter().sum();
                ranges.insert(*tb, (*vaddr, vaddr + len));
            }
            MockCall::Exec { tb, .. } => covered.push(ranges[tb]),
            MockCall::Exit => break,
        }
    }
    segments(covered)
}

#[derive(Clone, Debug)]
pub struct MockRun {
    pub result: ExperimentResult,
    pub summary: RunSummary,
    pub expected: Vec<Segment>,
    pub observed: Vec<Segment>,
    pub output: PathBuf,
}

impl MockRun {
    pub fn matches_oracle(&self) -> bool {
        self.expected == self.observed
    }
}

/// Validates `script`, plays it against the plugin and decodes the file the
/// plugin wrote. `args` must name the output with `out=`.
pub fn mock_host_run(script: &[MockCall], args: &str) -> Result<MockRun, HarnessError> {
    validate_script(script)?;
    let parsed = PluginArgs::parse_str(args).map_err(|e| HarnessError::InvalidParam(e.to_string()))?;
    let vcpus = script.iter().filter_map(|c| if let MockCall::Exec { vcpu, .. } = c { Some(*vcpu + 1) } else { None });
    let t0 = Instant::now();
    let mut host = MockHost::install(args, "aarch64", vcpus.max().unwrap_or(1))?;
    for call in script {
        match call {
            MockCall::Translate { tb, vaddr, insn_sizes } => host.translate(*tb, *vaddr, insn_sizes),
            MockCall::Exec { tb, vcpu } => {
                host.exec(*tb, *vcpu);
            }
            MockCall::Exit => host.exit(),
        }
    }
    let wall = t0.elapsed();
    let summary = elogcov_plugin::last_summary();
    drop(host);
    let summary = summary.ok_or_else(|| HarnessError::Script("plugin never exited".into()))?;
    let bytes = std::fs::read(&parsed.out)?;
    let blocks = decode_all(&bytes)?;
    let result = ExperimentResult {
        n_buffers: parsed.buffers,
        capacity: parsed.capacity,
        merge: parsed.merge,
        latency_ns: 0,
        stats: summary.total,
        units: summary.units.clone(),
        file_bytes: bytes.len() as u64,
        wall_time_ns: wall.as_nanos() as u64,
    };
    Ok(MockRun {
        result,
        summary,
        expected: script_counts(script),
        observed: counts_from_blocks(&blocks),
        output: parsed.out,
    })
}
