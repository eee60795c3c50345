#![no_main]
// Hostile WAV bytes must produce FormatError, never a panic or OOM. A
// successful parse additionally round-trips through the resampler.
use libfuzzer_sys::fuzz_target;
use mmvit::frontend::wav::parse_wav;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = parse_wav(data) {
        let _ = w.resampled(16_000);
    }
});
