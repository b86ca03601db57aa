#![no_main]

use libfuzzer_sys::fuzz_target;

// The checkpoint parser must reject arbitrary bytes without panicking,
// over-allocating, or trusting any declared length.
fuzz_target!(|data: &[u8]| {
    let _ = refinet::training::parse_checkpoint(data);
});
