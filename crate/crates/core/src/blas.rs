//! OpenBLAS kernel selection.
//!
//! OpenBLAS chooses its kernels once, when the library is loaded, from CPU
//! detection or the `OPENBLAS_CORETYPE` variable. Detection does not know
//! some recent server CPUs and then falls back to a generic SSE3 kernel that
//! is several times slower, so binaries relaunch themselves once with an
//! explicit core type.

pub const CORETYPE_VAR: &str = "OPENBLAS_CORETYPE";

/// The fastest OpenBLAS core type the running CPU supports, if known.
pub fn preferred_coretype() -> Option<&'static str> {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") && is_x86_feature_detected!("avx512dq") && is_x86_feature_detected!("avx512vl") {
            return Some("SKYLAKEX");
        }
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            return Some("HASWELL");
        }
    }
    None
}

/// Replaces the current process with a copy of itself that has
/// `OPENBLAS_CORETYPE` set. Returns without effect when the variable is
/// already present, no core type is preferred, or the relaunch fails.
pub fn relaunch_with_coretype() {
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        if std::env::var_os(CORETYPE_VAR).is_some() {
            return;
        }
        let Some(core) = preferred_coretype() else { return };
        let Ok(exe) = std::env::current_exe() else { return };
        let _ = std::process::Command::new(exe).args(std::env::args_os().skip(1)).env(CORETYPE_VAR, core).exec();
    }
}
