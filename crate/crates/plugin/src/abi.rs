//! Hand-written declarations of the QEMU TCG plugin C API (`qemu-plugin.h`,
//! QEMU 8.1, plugin API version 1) used by this plugin.
//!
//! The host functions are reached through [`HostApi`], a table of function
//! pointers. Under QEMU the table is resolved from the running executable
//! with `dlsym`; a test host can install its own table with the same C
//! signatures.

#![allow(non_camel_case_types)]

use std::ffi::{c_char, c_int, c_uint, c_void, CStr};

/// `QEMU_PLUGIN_VERSION` of the targeted API.
pub const QEMU_PLUGIN_VERSION: c_int = 1;

pub type qemu_plugin_id_t = u64;

/// Opaque `struct qemu_plugin_tb`.
#[repr(C)]
pub struct qemu_plugin_tb {
    _private: [u8; 0],
}

/// Opaque `struct qemu_plugin_insn`.
#[repr(C)]
pub struct qemu_plugin_insn {
    _private: [u8; 0],
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct qemu_info_version {
    pub min: c_int,
    pub cur: c_int,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct qemu_info_system {
    pub smp_vcpus: c_int,
    pub max_vcpus: c_int,
}

/// `qemu_info_t`; the trailing union only has the `system` member.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct qemu_info_t {
    pub target_name: *const c_char,
    pub version: qemu_info_version,
    pub system_emulation: bool,
    pub system: qemu_info_system,
}

impl qemu_info_t {
    /// # Safety
    /// `target_name` must be null or a valid NUL-terminated string.
    pub unsafe fn target(&self) -> Option<String> {
        if self.target_name.is_null() {
            None
        } else {
            Some(CStr::from_ptr(self.target_name).to_string_lossy().into_owned())
        }
    }
}

/// `enum qemu_plugin_cb_flags`
pub const QEMU_PLUGIN_CB_NO_REGS: c_int = 0;

pub type qemu_plugin_vcpu_tb_trans_cb_t = unsafe extern "C" fn(id: qemu_plugin_id_t, tb: *mut qemu_plugin_tb);
pub type qemu_plugin_vcpu_udata_cb_t = unsafe extern "C" fn(vcpu_index: c_uint, userdata: *mut c_void);
pub type qemu_plugin_udata_cb_t = unsafe extern "C" fn(id: qemu_plugin_id_t, userdata: *mut c_void);

/// Host functions called by the plugin.
#[derive(Clone, Copy, Debug)]
pub struct HostApi {
    pub register_vcpu_tb_trans_cb: unsafe extern "C" fn(qemu_plugin_id_t, qemu_plugin_vcpu_tb_trans_cb_t),
    pub register_vcpu_tb_exec_cb:
        unsafe extern "C" fn(*mut qemu_plugin_tb, qemu_plugin_vcpu_udata_cb_t, c_int, *mut c_void),
    pub register_atexit_cb: unsafe extern "C" fn(qemu_plugin_id_t, qemu_plugin_udata_cb_t, *mut c_void),
    pub tb_n_insns: unsafe extern "C" fn(*const qemu_plugin_tb) -> usize,
    pub tb_vaddr: unsafe extern "C" fn(*const qemu_plugin_tb) -> u64,
    pub tb_get_insn: unsafe extern "C" fn(*const qemu_plugin_tb, usize) -> *mut qemu_plugin_insn,
    pub insn_size: unsafe extern "C" fn(*const qemu_plugin_insn) -> usize,
    pub insn_vaddr: unsafe extern "C" fn(*const qemu_plugin_insn) -> u64,
}

impl HostApi {
    /// Looks the API up among the symbols exported by the host executable.
    pub fn resolve() -> Option<HostApi> {
        /// `F` must be the function pointer type matching the symbol's C signature.
        unsafe fn sym<F: Copy>(name: &CStr) -> Option<F> {
            debug_assert_eq!(std::mem::size_of::<F>(), std::mem::size_of::<*mut c_void>());
            let p = libc::dlsym(libc::RTLD_DEFAULT, name.as_ptr());
            (!p.is_null()).then(|| std::mem::transmute_copy::<*mut c_void, F>(&p))
        }
        // SAFETY: each field type is the C signature declared in qemu-plugin.h.
        unsafe {
            Some(HostApi {
                register_vcpu_tb_trans_cb: sym(c"qemu_plugin_register_vcpu_tb_trans_cb")?,
                register_vcpu_tb_exec_cb: sym(c"qemu_plugin_register_vcpu_tb_exec_cb")?,
                register_atexit_cb: sym(c"qemu_plugin_register_atexit_cb")?,
                tb_n_insns: sym(c"qemu_plugin_tb_n_insns")?,
                tb_vaddr: sym(c"qemu_plugin_tb_vaddr")?,
                tb_get_insn: sym(c"qemu_plugin_tb_get_insn")?,
                insn_size: sym(c"qemu_plugin_insn_size")?,
                insn_vaddr: sym(c"qemu_plugin_insn_vaddr")?,
            })
        }
    }
}
