"""Smoke test for the dropnet Python extension.

Build first:
    cargo build --release -p dropnet-python
    cp target/release/libdropnet_py.so python/dropnet_py.so
then run `python3 python/smoke_test.py`.
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import dropnet_py as dn


def check_placement():
    assert dn.placement(1) == []
    assert dn.placement(2) == ["embedding"]
    assert len(dn.placement(12)) == 5
    try:
        dn.placement(14)
    except ValueError:
        pass
    else:
        raise AssertionError("model 14 accepted")


def check_dropout():
    values = [1.0] * 20000
    out = dn.dropout(values, 0.3, train=True, seed=4)
    assert set(out) <= {0.0, 1.0}
    frac = out.count(0.0) / len(out)
    assert abs(frac - 0.3) < 0.02, frac
    assert dn.dropout([2.0, -1.0], 0.3, train=False) == [2.0 * 0.7, -1.0 * 0.7]


def check_adam():
    lr, eps = 0.001, 1e-8
    traj = dn.adam_trajectory(1.0, [1.0, 1.0, 1.0], lr)
    step = lr / (1.0 + eps)
    for t, x in enumerate(traj, start=1):
        assert abs(x - (1.0 - t * step)) < 1e-12


def check_gradcheck():
    report = dn.gradcheck(1)
    assert set(report) == {"eval", "train (frozen mask)"}
    worst = max(e for groups in report.values() for e in groups.values())
    assert worst < 1e-4, worst


def check_model():
    corpus = dn.synth(60, seed=2)
    vocab = {"<pad>": 0, "<unk>": 1}
    for p, h, _ in corpus:
        for w in dn.tokenize(p) + dn.tokenize(h):
            vocab.setdefault(w, len(vocab))
    data = [
        ([vocab[w] for w in dn.tokenize(p)], [vocab[w] for w in dn.tokenize(h)], y)
        for p, h, y in corpus
    ]
    model = dn.Model(len(vocab), embedding_dim=8, hidden_units=4, model_id=9, drop_rate=0.2)
    assert model.placement == "embedding,recurrent,inter_attention,mlp"
    probs = model.predict([data[0][0], data[1][0]], [data[0][1], data[1][1]])
    assert len(probs) == 2
    for row in probs:
        assert abs(sum(row) - 1.0) < 1e-12
    best, metrics = model.fit(data[:40], data[40:], epochs=3, batch_size=8, learning_rate=0.01)
    assert 1 <= best <= 3 and len(metrics) == 3
    acc, loss = model.evaluate(data[40:])
    assert 0.0 <= acc <= 1.0 and math.isfinite(loss)
    alpha_p, alpha_h = model.attention(data[0][0], data[0][1])
    assert abs(sum(alpha_p) - 1.0) < 1e-12 and abs(sum(alpha_h) - 1.0) < 1e-12


def main():
    for check in [check_placement, check_dropout, check_adam, check_gradcheck, check_model]:
        check()
        print(f"ok {check.__name__}")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
