#![no_main]

use ccnn_core::model::CcnnModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(model) = CcnnModel::from_json(text) {
        let again = CcnnModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(again, model);
    }
});
