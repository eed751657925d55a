#![no_main]

use ccnn_core::kernels::DEFAULT_STEP_S;
use ccnn_core::shots::parse_shot_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = parse_shot_csv(data) {
        if let Ok(x) = table.to_channels(DEFAULT_STEP_S) {
            assert!(x.all_finite());
        }
    }
});
