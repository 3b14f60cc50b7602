use std::ffi::CString;

use coopdet_py::coopdet_module;
use pyo3::prelude::*;
use pyo3::types::PyDict;

/// Runs `python/smoke_test.py` as `__main__` against the module registered
/// in an embedded interpreter.
#[test]
fn python_smoke_script() {
    pyo3::append_to_inittab!(coopdet_module);
    let script = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/python/smoke_test.py")).unwrap();
    let code = CString::new(script).unwrap();
    Python::attach(|py| {
        let globals = PyDict::new(py);
        globals.set_item("__name__", "__main__").unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("smoke script failed");
        }
        py.import("sys").unwrap().getattr("stdout").unwrap().call_method0("flush").unwrap();
    });
}
