#![no_main]
// A parsed tensor must re-encode to the exact input bytes: the format
// has one canonical serialization.
use libfuzzer_sys::fuzz_target;
use mmvit::frontend::ntc::{encode_ntc, parse_ntc};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = parse_ntc(data) {
        assert_eq!(encode_ntc(&t), data, "ntc round trip must be bit-exact");
    }
});
