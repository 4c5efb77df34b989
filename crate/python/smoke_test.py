"""Smoke test for the `nflows` Python extension.

Build the extension first:

    cargo build --release -p nflows-py --features extension-module

The script imports `nflows` from the path if it is installed, otherwise it
loads target/release/libnflows_py.so directly.
"""

import importlib.machinery
import importlib.util
import json
import math
import pathlib
import sys


def load():
    try:
        import nflows

        return nflows
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parent.parent
    for name in ("libnflows_py.so", "libnflows_py.dylib", "nflows_py.dll"):
        path = root / "target" / "release" / name
        if path.exists():
            loader = importlib.machinery.ExtensionFileLoader("nflows", str(path))
            spec = importlib.util.spec_from_loader("nflows", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("nflows extension not found; build it with cargo first")


def close(a, b, tol):
    return all(abs(x - y) <= tol for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def main():
    nf = load()
    print("nflows", nf.__version__)

    xs = [[0.3, -1.2], [1.5, 0.4], [-0.7, 2.0]]
    for arch in ("resnet", "gru", "coupling", "linear"):
        flow = nf.Flow(arch, 2, layers=2, hidden=[16, 16], seed=1)
        assert close(flow.forward([0.0] * 3, xs), xs, 1e-12), arch
        ys = flow.forward([0.5, 1.0, 2.0], xs)
        back = flow.inverse([0.5, 1.0, 2.0], ys)
        assert close(back, xs, 1e-6), arch
        print(f"{arch:<9} ok  {flow!r}")

    e = nf.matrix_exp([[0.0, 1.0], [-1.0, 0.0]])
    assert close(e, [[math.cos(1), math.sin(1)], [-math.sin(1), math.cos(1)]], 1e-12)
    assert nf.stiff_reference(0.0) == 0.0

    poisson = nf.tpp_ground_truth("poisson", 200, 50, 0)
    assert abs(poisson - 1.0) < 0.05, poisson

    config = {
        "kind": "trajectory",
        "dataset": {"type": "periodic", "signal": "sine", "n": 40, "m": 5},
        "model": {"type": "flow", "architecture": "coupling", "layers": 1, "hidden": [16]},
        "optimizer": {"epochs": 3},
    }
    text = json.dumps(config)
    h = nf.validate_config(text)
    rows, digest = nf.generate(text)
    # 40 trajectories plus two extrapolation splits of 8, 5 points each.
    assert rows == (40 + 16) * 5 and len(digest) == 64
    report, model = nf.train(text)
    report = json.loads(report)
    assert report["config_hash"] == h == model.config_hash
    test = model.evaluate("test")
    assert abs(test - report["metrics"]["test"]) < 1e-12
    again = nf.TrainedModel.from_json(model.to_json())
    assert again.evaluate("test") == test
    print(f"train ok  test mse {test:.4f}  epochs {len(report['rows']) - 1}")

    try:
        nf.validate_config(json.dumps({**config, "optimiser": {}}))
    except ValueError as err:
        print("bad config rejected:", err)
    else:
        raise AssertionError("unknown key accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
