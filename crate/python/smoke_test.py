"""Smoke test for the act_py extension: a short end-to-end run."""

import math
import sys
import tempfile
from pathlib import Path

import act_py


def main() -> int:
    cfg = act_py.Config.from_text(
        "seed = 1\nn_source = 256\nn_test = 100\nepochs = 5\nbatch_size = 64\n"
    )
    assert cfg.seed == 1 and cfg.epochs == 5

    source, target, test = act_py.generate(cfg)
    assert len(source) == 256 and len(test) == 100 and source.dim == 20
    assert set(target.labels) <= set(range(target.num_classes))

    enc, trace = act_py.pretrain(cfg, source)
    assert [r["epoch"] for r in trace] == [1, 2, 3, 4, 5]
    assert all(math.isfinite(r["loss"]) for r in trace)

    z = enc.encode(test.points[:3])
    assert all(abs(math.hypot(*row) - 1.0) < 1e-9 for row in z)

    rows = act_py.evaluate(cfg, enc, target, test)
    assert {r["protocol"] for r in rows} == {"probe", "knn"}
    assert all(0.0 <= r["error"] <= 1.0 for r in rows)

    report, bound = act_py.diagnose(cfg, enc, source, target, test)
    assert report["alignment_bound_ok"]
    assert all(slack >= -1e-9 for (_, _, _, _, slack, _) in bound)

    v1 = source.points[:16]
    c = act_py.cross_correlation(enc, v1, v1)
    l_align, l_div = act_py.loss_decomposition(enc, v1, v1, 5.0)
    assert l_align == 0.0
    gap = sum((c[i][j] - (i == j)) ** 2 for i in range(8) for j in range(8))
    assert abs(l_div - 5.0 * gap) < 1e-9

    assert act_py.wasserstein1([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0
    theta, *_ = act_py.theta_certificate(
        1.0, 0.0, 0.0, 0.0, 0.5, 0.0, 1.0, 1.0, [[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]
    )
    assert theta == 1.0

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "enc.ckpt"
        enc.save(path)
        assert act_py.Encoder.load(path) == enc
        source.save(Path(d) / "s.actd")
        assert act_py.Dataset.load(Path(d) / "s.actd").points == source.points

    try:
        act_py.Config.from_text("epochs = 3\n")
    except act_py.ActError as e:
        assert "seed" in str(e)
    else:
        raise AssertionError("missing seed accepted")

    print("act_py smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
