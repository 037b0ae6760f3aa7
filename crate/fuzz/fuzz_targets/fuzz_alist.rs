#![no_main]

use libfuzzer_sys::fuzz_target;
use uecct::gf2::CodeSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(h) = uecct::alist::parse_alist(text) {
        // Drive small parses through the full code pipeline too; the size cap
        // keeps the rank computation cheap per iteration.
        if h.rows() <= 64 && h.cols() <= 64 {
            let _ = CodeSpec::new("fuzz", h);
        }
    }
});
