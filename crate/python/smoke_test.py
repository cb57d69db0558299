"""Exercises the cgh extension end to end. Run python/build.sh first."""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import cgh  # noqa: E402

TINY = """
schema_version = 1
dataset = "synthetic"
backbone = "resnet-tiny"
epochs = 2
batch_size = 8
bank_size = 32
embed_dim = 16
hidden_dim = 32
hyper_dim = 16

[data]
image_size = 16
synthetic_classes = 4
synthetic_train_per_class = 8
synthetic_val_per_class = 4
"""


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(b))


def check_math():
    assert close(cgh.cosine_similarity([1.0, 0.0], [1.0, 1.0]), 1 / math.sqrt(2))

    bank = cgh.MemoryBank.from_entries([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    p = cgh.similarity_distribution([1.0, 0.0], bank, 0.1)
    w = [math.exp(10), 1.0, math.exp(-10)]
    assert all(close(x, y / sum(w)) for x, y in zip(p, w))
    assert close(sum(p), 1.0)

    ce = cgh.cross_entropy([0.7, 0.2, 0.1], [0.5, 0.3, 0.2])
    assert close(ce, -(0.5 * math.log(0.7) + 0.3 * math.log(0.2) + 0.2 * math.log(0.1)))

    q = cgh.MemoryBank(8, 4, seed=1)
    qh = cgh.MemoryBank(8, 4, seed=2)
    z = [0.3, -0.1, 0.5, 0.2]
    out = cgh.cgh_loss(z, z, q, student_hyper=z, teacher_hyper=z, hyper_bank=qh, variant="cross")
    assert close(out["total"], out["l_gh"] + out["l_hg"])
    g = cgh.cgh_loss(z, z, q, variant="global")
    assert g["l_hg"] == 0.0
    try:
        cgh.cgh_loss(z, z, q, variant="cross")
    except ValueError:
        pass
    else:
        raise AssertionError("cross variant without hypercolumn inputs must fail")

    q.enqueue([[2.0, 0.0, 0.0, 0.0]])
    assert q.cursor == 1 and close(q.entries()[0][0], 1.0)

    t = cgh.ema_update([1.0, 2.0], [3.0, 4.0], 0.5)
    assert t == [2.0, 3.0]
    assert cgh.ema_update([1.0], [9.0], 1.0) == [1.0]

    assert close(cgh.cosine_lr(1.0, 0, 10, 0), 1.0)
    assert cgh.cosine_lr(1.0, 9, 10, 0) < 0.05

    r = cgh.knn_classify([[1, 0], [0, 1], [1, 0.1]], [0, 1, 0], [[0.9, 0.0]], [0], 2, ks=[1, 3])
    assert r["best_accuracy"] == 1.0


def check_training():
    cfg = cgh.TrainConfig(TINY, ["seed=7"])
    assert cfg.seed == 7 and cfg.context == "cross" and cfg.tau_h == 0.08
    assert cfg.with_overrides(["context=\"global\""]).context == "global"
    try:
        cgh.TrainConfig(TINY, ["bank_size=0"])
    except ValueError:
        pass
    else:
        raise AssertionError("invalid config must be rejected")

    tr = cgh.Trainer(cfg)
    assert tr.steps_per_epoch() == 4
    m = tr.train_step(list(range(8)))
    assert m["step"] == 1 and math.isfinite(m["L"])
    metrics = tr.run_epoch()
    assert len(metrics) == 4 and tr.epoch == 1
    acc = tr.knn(ks=[1, 5])
    assert 0.0 <= acc <= 1.0
    feats = tr.features("projected", "val")
    assert len(feats) == 16 and len(feats[0]) == 16
    assert all(close(sum(x * x for x in row), 1.0, 1e-4) for row in feats)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "state.ckpt")
        tr.save(path)
        back = cgh.Trainer.load(path)
        assert back.step == tr.step and back.teacher_digest() == tr.teacher_digest()
        run_dir, ckpt = cgh.pretrain(cfg, os.path.join(d, "runs"))
        assert os.path.isfile(ckpt) and os.path.isfile(os.path.join(run_dir, "metrics.jsonl"))


if __name__ == "__main__":
    check_math()
    check_training()
    print("cgh", cgh.__version__, "smoke test passed")
