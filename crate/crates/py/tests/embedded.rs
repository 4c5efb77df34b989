// Runs the bindings inside an embedded interpreter, so `cargo test` covers them
// without building the extension module.
use std::ffi::CString;

use pyo3::prelude::*;

use nflows_py::nflows_module;

fn run(code: &str) {
    Python::attach(|py| {
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, None, None) {
            e.display(py);
            panic!("python code failed");
        }
    });
}

#[test]
fn bindings_work_from_python() {
    pyo3::append_to_inittab!(nflows_module);
    Python::initialize();
    run(r#"
import json, math
import nflows as nf

def gap(a, b):
    return max(abs(x - y) for r, s in zip(a, b) for x, y in zip(r, s))

xs = [[0.3, -1.2], [1.5, 0.4]]
for arch in ("resnet", "gru", "coupling", "linear"):
    f = nf.Flow(arch, 2, layers=2, hidden=[8], seed=3)
    assert gap(f.forward([0.0, 0.0], xs), xs) < 1e-12, arch
    assert gap(f.inverse([1.0, 2.0], f.forward([1.0, 2.0], xs)), xs) < 1e-6, arch

e = nf.matrix_exp([[0.0, 1.0], [-1.0, 0.0]])
assert abs(e[0][0] - math.cos(1)) < 1e-12 and abs(e[0][1] - math.sin(1)) < 1e-12

try:
    nf.Flow("nope", 2)
    raise AssertionError("bad architecture accepted")
except ValueError:
    pass

cfg = json.dumps({
    "kind": "trajectory",
    "dataset": {"type": "periodic", "signal": "sine", "n": 20, "m": 5},
    "model": {"type": "flow", "architecture": "coupling", "layers": 1, "hidden": [8]},
    "optimizer": {"epochs": 1, "batch_size": 10},
})
nf.validate_config(cfg)
metrics, model = nf.train(cfg)
metrics = json.loads(metrics)
assert model.kind == "flow"
assert model.evaluate("test") == metrics["metrics"]["test"]
again = nf.TrainedModel.from_json(model.to_json())
assert again.config_hash == model.config_hash
assert again.evaluate("test") == model.evaluate("test")
"#);
}
