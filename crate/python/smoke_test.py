"""Quick end-to-end check of the Python bindings.

Build first:  pip install --no-build-isolation ./crates/py
"""

import math
import tempfile
from pathlib import Path

import marf_py as m


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    hit = m.intersect([0, 0, -2], [0, 0, 1], [0, 0, 0], 0.5)
    assert hit["hit"] and close(hit["point"][2], -0.5), hit
    miss = m.intersect([1, 0, -2], [0, 0, 1], [0, 0, 0], 0.5)
    assert not miss["hit"] and close(miss["silhouette"], 0.5)

    q, moment, foot = m.canonical_ray([0, 1, -3], [0, 0, 2])
    assert close(q[2], 1.0) and close(foot[1], 1.0) and close(foot[2], 0.0)

    p, r, iou = m.classification_metrics([False, True, True, True, False], [False, False, True, True, True])
    assert close(p, 2 / 3) and close(r, 2 / 3) and close(iou, 0.5)
    assert m.chamfer([[0, 0, 0]], [[0, 0, 0]]) == 0.0

    assert close(m.lr_at(50, 0), 2.5e-4, 1e-12)
    weights = dict(m.loss_weights(0.0))
    assert weights["p"] == 2.0 and weights["mv"] == 0.0

    report = m.gradcheck(0, ["p", "mv"])
    assert report["passed"], report

    ds = m.Dataset.generate(["sphere:0.5"], views=4, resolution=16)
    assert ds.shapes == ["sphere:0.5"] and ds.views == 4

    overrides = '{"network": {"hidden_layers": 2, "width": 16, "n_atoms": 4},' \
        ' "train": {"epochs": 2, "hold_epochs": 1, "decay_epochs": 1, "warmup_steps": 2},' \
        ' "data": {"stride": 4}, "eval": {"viewpoints": 20, "ray_budget": 400, "samples": 100}}'
    t = m.Trainer("desk", overrides)
    first = t.train_epoch(ds)
    t.train_epoch(ds)
    assert t.is_done() and t.epoch == 2
    assert math.isfinite(first["total"])

    rows = t.trace([[0, 0, -2]], [[0, 0, 1]])
    assert len(rows) == 1

    scores = t.evaluate("sphere:0.5")
    assert 0.0 <= scores["iou"] <= 1.0

    ppm, stats = t.render("candidate_color", 12, 10)
    assert ppm.startswith(b"P6\n12 10\n255\n") and len(ppm) == len(b"P6\n12 10\n255\n") + 360
    assert stats["hit"] + stats["miss"] == 120

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "t.ckpt"
        t.save(path)
        back = m.Trainer.load(path)
        assert back.epoch == 2 and back.render("candidate_color", 12, 10)[0] == ppm
        data = Path(d) / "s.marfds"
        ds.write(data)
        assert m.Dataset.read(data).resolution == (16, 16)

    try:
        m.Dataset.generate(["blob:1"])
    except ValueError:
        pass
    else:
        raise AssertionError("bad shape accepted")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
