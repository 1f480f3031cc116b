"""Smoke test of the `fvit` extension module.

Build the module and put it on the path first, e.g.

    cargo build --release -p fvit-py
    cp target/release/libfvit.so python/fvit.so
    python python/smoke_test.py [model-stem]

The model checks run when a stem saved by `fvit train` is given.
"""

import json
import math
import sys

import fvit


def main() -> None:
    p = [0.6, 0.3, 0.1]
    assert fvit.renyi_divergence(p, p, 2.0) == 0.0
    bound = fvit.classification_bound(p, 2.0)
    assert abs(bound - (-math.log(0.9))) < 1e-9, bound
    assert fvit.topk_violation_bound([0.25] * 4, 2, 0.5, 2.0) == 0.0

    cert = json.loads(fvit.certify_faithful(0.2, [0.5, 0.3, 0.2], p, k=1, beta=1.0))
    assert cert["faithful"] is True
    assert cert["k0"] == 1
    assert not json.loads(fvit.certify_faithful(0.0, [0.5, 0.3, 0.2], p, k=1, beta=1.0))["faithful"]

    kwh, grams = fvit.energy(3600.0, 1000.0, 370.0)
    assert (kwh, grams) == (1.0, 370.0)

    try:
        fvit.renyi_divergence([0.5, 0.6], [0.5, 0.5], 2.0)
    except ValueError:
        pass
    else:
        raise AssertionError("off-simplex input accepted")

    if len(sys.argv) > 1:
        model = fvit.Model.load(sys.argv[1])
        n = model.image_size
        image = [0.0] * (n * n)
        for y in range(n // 4, 3 * n // 4):
            for x in range(n // 4, 3 * n // 4):
                image[y * n + x] = 1.0
        probs = model.predict(image)
        assert len(probs) == model.num_classes and abs(sum(probs) - 1.0) < 1e-9
        scores = model.explain(image, "transformer_attribution")
        assert scores and min(scores) >= 0.0
        print("model ok:", [round(v, 3) for v in probs])

    print("smoke test passed")


if __name__ == "__main__":
    main()
