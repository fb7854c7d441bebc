"""Smoke test for the qcnn extension module.

Build it first, e.g. `maturin develop -m crates/python/Cargo.toml`, or copy
`target/release/libqcnn.so` to `qcnn.so` somewhere on PYTHONPATH.
"""

import math
import os
import tempfile

import qcnn


def main():
    i = qcnn.Quaternion(0.0, 1.0, 0.0, 0.0)
    j = qcnn.Quaternion(0.0, 0.0, 1.0, 0.0)
    assert (i * j).to_tuple() == (0.0, 0.0, 0.0, 1.0)

    r = qcnn.Quaternion.from_axis_angle([0.0, 0.0, 1.0], math.pi / 2)
    v = r.rotate([1.0, 0.0, 0.0])
    assert abs(v[0]) < 1e-12 and abs(v[1] - 1.0) < 1e-12

    cycles = qcnn.generate_dataset(num_classes=4, cycles_per_class=3, seed=7)
    assert len(cycles) == 12 and len(cycles[0][1]) == 100
    assert cycles == qcnn.generate_dataset(num_classes=4, cycles_per_class=3, seed=7)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "data.qgc")
        qcnn.save_dataset(path, cycles, 4)
        k, back = qcnn.load_dataset(path)
        assert k == 4 and back == cycles

    model = qcnn.Model.preset("compact-qcnn", 4, seed=1)
    samples = [c[1] for c in cycles]
    logits = model.logits(samples)
    assert len(logits) == 12 and len(logits[0]) == 4
    assert model.rotation_invariance_error(samples, trials=5) < 1e-8
    top1, top5 = model.evaluate(cycles)
    assert 0.0 <= top1 <= top5 <= 1.0

    dev = qcnn.check_equivariance(trials=50)
    assert dev < 1e-10, dev

    try:
        qcnn.Model.preset("no-such-model", 4)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")

    print(f"qcnn smoke test ok: {model.param_count} parameters, max deviation {dev:.2e}")


if __name__ == "__main__":
    main()
