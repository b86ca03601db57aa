#![no_main]

use libfuzzer_sys::fuzz_target;

// Image ingestion: decode + crop + resize + normalize on untrusted bytes.
fuzz_target!(|data: &[u8]| {
    let _ = refinet::data::decode_image_bytes(data, 32);
});
