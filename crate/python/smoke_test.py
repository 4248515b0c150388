#!/usr/bin/env python3
"""End-to-end exercise of the crosr_py extension module.

Loads the compiled module straight out of the cargo target directory, so
run `cargo build -p crosr-py` first. Every check is small enough to finish
in well under a minute; failures raise AssertionError with context.
"""

import importlib.util
import math
import random
import sys
import tempfile
from importlib.machinery import ExtensionFileLoader
from pathlib import Path


def load_module():
    root = Path(__file__).resolve().parent.parent
    candidates = [
        p
        for profile in ("release", "debug")
        for p in [root / "target" / profile / "libcrosr_py.so"]
        if p.exists()
    ]
    if not candidates:
        sys.exit("libcrosr_py.so not found; run `cargo build -p crosr-py` first")
    newest = max(candidates, key=lambda p: p.stat().st_mtime)
    loader = ExtensionFileLoader("crosr_py", str(newest))
    spec = importlib.util.spec_from_loader("crosr_py", loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    print(f"loaded {newest}")
    return module


CONFIG = """
[data]
classes = 4
train_per_class = 40
test_per_class = 25

[net]
variant = "dhrnet"
input = [1, 8, 8]
classes = 4
bottleneck = 8
hidden = 32
kernel = 3

[[net.stages]]
convs = 1
channels = 8
pool = true
lateral = true

[[net.stages]]
convs = 1
channels = 8
pool = true
lateral = true
"""


def check_weibull_fit(m):
    # Inverse-CDF sampling gives a known ground truth to recover.
    rng = random.Random(7)
    shape, scale = 2.0, 1.5
    draws = [scale * (-math.log(1.0 - rng.random())) ** (1.0 / shape) for _ in range(5000)]
    fs, fc = m.weibull_fit(draws, len(draws))
    assert abs(fs - shape) / shape < 0.1, f"shape {fs} vs {shape}"
    assert abs(fc - scale) / scale < 0.1, f"scale {fc} vs {scale}"
    # CDF sanity at the scale parameter: 1 - exp(-1).
    c = m.weibull_cdf(scale, fs, fc)
    assert abs(c - (1.0 - math.exp(-1.0))) < 0.05, c
    print(f"weibull_fit recovers shape {fs:.3f} scale {fc:.3f}")


def check_recalibration(m):
    rng = random.Random(11)
    for _ in range(200):
        n = rng.randrange(2, 9)
        y = [rng.uniform(0.0, 5.0) for _ in range(n)]
        w = [rng.random() for _ in range(n)]
        out = m.recalibrate(y, w)
        assert len(out) == n + 1
        # The unknown slot absorbs exactly what the known slots gave up.
        assert abs(sum(out) - sum(y)) < 1e-9, (y, w, out)
        probs = m.softmax(out)
        assert abs(sum(probs) - 1.0) < 1e-9
    assert m.rank_calibrator(1, 10) == 0.9
    assert m.rank_calibrator(5, 10) == 0.5
    assert m.rank_calibrator(25, 10) == 0.0
    print("recalibration conserves mass over 200 random draws")


def check_pipeline(m):
    train = m.Dataset.synthetic(4, 40, seed=1)
    test = m.Dataset.synthetic(4, 25, seed=2)
    assert len(train) == 160 and len(test) == 100
    px, shape = train.images()
    assert shape == [160, 1, 8, 8] and len(px) == 160 * 64
    assert set(train.labels()) == {0, 1, 2, 3}

    net = m.Network.build(CONFIG, seed=5)
    log = net.train(
        train,
        epochs=10,
        batch_size=16,
        learning_rate=0.05,
        dropout=0.1,
        seed=5,
        val=test,
    )
    assert log.splitlines()[0].startswith("epoch,"), log.splitlines()[0]
    acc = net.accuracy(test)
    assert acc >= 0.8, f"closed-set accuracy {acc}"
    print(f"trained network reaches closed-set accuracy {acc:.3f}")

    feats = net.features(test, "joint")
    assert len(feats) == 100 and len(feats[0]) > net.classes()
    assert len(net.features(test, "av")[0]) == net.classes()

    model = m.OpenSetModel.fit(net, train, mode="joint", tail_size=15, threshold=0.5)
    assert model.classes() == 4 and model.threshold() == 0.5

    noise = m.Dataset.uniform_noise(40, (1, 8, 8), seed=3)
    known_unknown = [row[4] for row in model.score(test)]
    noise_unknown = [row[4] for row in model.score(noise)]
    hits = sum(nu > ku for nu in noise_unknown for ku in known_unknown)
    frac = hits / (len(noise_unknown) * len(known_unknown))
    assert frac > 0.85, f"noise outranks known on unknown-probability only {frac:.3f}"
    print(f"noise outranks known inputs on unknown probability in {frac:.1%} of pairs")

    preds = model.predict(noise)
    rejected = sum(1 for label, _ in preds if label == -1)
    assert rejected >= len(preds) * 0.8, f"only {rejected}/{len(preds)} noise rejected"

    truth = test.labels() + [-1] * len(noise)
    decisions = [label for label, _ in model.predict(test)] + [label for label, _ in preds]
    f1 = m.macro_f1(decisions, truth, 4)
    assert f1 > 0.7, f"macro-F1 {f1}"
    print(f"open-set macro-F1 {f1:.3f} over knowns plus noise")

    mixed = train.superimpose(seed=9)
    assert set(mixed.labels()) == {-1} and len(mixed) == len(train)

    with tempfile.TemporaryDirectory() as d:
        net_path = Path(d) / "net.bin"
        model_path = Path(d) / "model.bin"
        net.save(net_path)
        model.save(model_path)
        assert m.Network.load(net_path).accuracy(test) == acc
        reloaded = m.OpenSetModel.load(model_path)
        assert reloaded.score(noise) == model.score(noise)
    print("save/load round trips reproduce scores exactly")


def check_errors(m):
    try:
        m.Network.build("[net]\nclasses = 1\n")
    except ValueError as e:
        assert str(e).startswith("config:") or str(e).startswith("config"), e
    else:
        raise AssertionError("1-class config was accepted")
    try:
        m.Dataset.from_idx("/no/such/images", "/no/such/labels")
    except IOError:
        pass
    else:
        raise AssertionError("missing IDX path was accepted")
    try:
        m.weibull_fit([1.0, 2.0, 3.0], 0)
    except ValueError:
        pass
    else:
        raise AssertionError("tail_size 0 was accepted")
    print("error paths raise the mapped exception types")


def main():
    m = load_module()
    check_weibull_fit(m)
    check_recalibration(m)
    check_pipeline(m)
    check_errors(m)
    print("smoke test passed")


if __name__ == "__main__":
    main()
