//! Flush-to-zero control for the calling thread.
//!
//! Late in training, attention and FFN gradients produce subnormal `f32`
//! values. They carry no useful magnitude, yet every arithmetic op touching
//! them takes a slow microcode path, which made steps several times slower.

/// Switches the calling thread to flush-to-zero / denormals-are-zero.
/// A no-op on targets without such a mode.
#[cfg(target_arch = "x86_64")]
pub fn flush_denormals() {
    use std::arch::asm;
    // MXCSR bit 15 is FTZ, bit 6 is DAZ.
    let mut csr: u32 = 0;
    // SAFETY: stmxcsr/ldmxcsr only touch the SSE control register of this
    // thread and the 4-byte local they are pointed at.
    unsafe {
        asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack, preserves_flags));
        csr |= 0x8040;
        asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack, preserves_flags, readonly));
    }
}

#[cfg(target_arch = "aarch64")]
pub fn flush_denormals() {
    use std::arch::asm;
    // FPCR bit 24 is FZ.
    // SAFETY: reads and writes only this thread's floating-point control
    // register.
    unsafe {
        let mut fpcr: u64;
        asm!("mrs {}, fpcr", out(reg) fpcr, options(nomem, nostack, preserves_flags));
        fpcr |= 1 << 24;
        asm!("msr fpcr, {}", in(reg) fpcr, options(nomem, nostack, preserves_flags));
    }
}

#[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
pub fn flush_denormals() {}
