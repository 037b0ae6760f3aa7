#![no_main]

use libfuzzer_sys::fuzz_target;
use uecct::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rc) = RunConfig::parse(text) {
        // A parsed config must survive a render/re-parse round trip.
        let rendered = rc.to_text();
        RunConfig::parse(&rendered).expect("rendered config must re-parse");
    }
});
