#![no_main]
use libfuzzer_sys::fuzz_target;
use mmvit::checkpoint::parse_checkpoint;

fuzz_target!(|data: &[u8]| {
    let _ = parse_checkpoint(data);
});
