#![no_main]

use hylab_core::kernels::Kernel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(kernel) = Kernel::from_csv(text) {
            // A parsed kernel must evaluate anywhere without panicking.
            for r in [0.0, 0.5, kernel.tail_radius, kernel.tail_radius + 1.0] {
                let _ = kernel.value(r);
            }
        }
    }
});
