"""Smoke test for the ccop_py extension module.

Build and install first:

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml

then run `python python/smoke_test.py`.
"""

import math
import tempfile
from pathlib import Path

import ccop_py as cc


def close(a, b, tol=1e-6):
    return abs(a - b) <= tol


def main():
    # losses
    e = [[1.0 if i == j else 0.0 for i in range(4)] for j in range(4)]
    assert close(cc.info_nce(e[0], e[0], e[1:], tau=1.0), math.log(1 + 3 / math.e))
    assert close(cc.info_nce(e[0], e[0], e[1:], tau=0.2), math.log(1 + 3 * math.exp(-5)))
    boxes = [(0, 0, 10, 10), (20, 20, 10, 10)]
    assert close(cc.intra_image_loss(boxes, [e[0], e[0]], alpha=0.4), 0.6)
    g = cc.contrastive_grad(e[0], e[0], e[1:])
    assert len(g) == 4

    # geometry
    assert close(cc.iou((0, 0, 2, 2), (1, 0, 2, 2)), 1 / 3)
    assert cc.jitter_box((10, 10, 4, 4), (0.5, 0, 0, 0)) == (12, 10, 4, 4)
    merged = cc.merge_boxes([(0, 0, 10, 10), (1, 1, 10, 10), (40, 40, 5, 5)])
    assert len(merged) == 2

    # queue
    q = cc.MemoryQueue(2, 2)
    q.push([[1, 0], [0, 1], [-1, 0]])
    assert len(q) == 2 and q.negatives() == [[0, 1], [-1, 0]]

    # configuration
    cfg = cc.Config.acceptance().with_overrides(["train.iterations=2", "train.batch_size=4", "data.synthetic_count=8"])
    cfg.seed = 3
    assert "iterations = 2" in cfg.to_toml()

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        truth = cc.synth_scene_to(7, str(tmp / "scene.png"))
        assert len(truth) == 3
        props = cc.propose(str(tmp / "scene.png"), cc.Config.acceptance())
        assert props, "no proposals"

        # train two steps, then embed the ground-truth boxes
        done = cc.pretrain(cfg, str(tmp / "run"))
        assert done == 2
        model = cc.Model.load(str(tmp / "run"))
        assert model.iteration == 2
        vecs = model.embed(str(tmp / "scene.png"), [b for _, b in truth])
        assert len(vecs) == 3
        assert all(close(math.sqrt(sum(v * v for v in z)), 1.0) for z in vecs)

        recall = cc.knn_recall([e[0], e[0], e[1], e[1]], [0, 0, 1, 1], [1])
        assert recall == [1.0]

        assert cc.run_cli(["synth-demo", "--out", str(tmp / "demo"), "--count", "1"]) == 0
        assert cc.run_cli(["propose", "--bogus"]) == 1

    print("python smoke test passed")


if __name__ == "__main__":
    main()
