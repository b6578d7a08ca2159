"""End-to-end smoke test of the ctxmatch Python bindings.

Build and install first:

    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/ctxmatch_py-*.whl
"""

import math
import random
import sys
import tempfile
from pathlib import Path

import ctxmatch_py as cm

WORLD = """
landmark_count = 300
train_frames = 40
eval_frames = 6
"""


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    if not cond:
        sys.exit(1)


def main():
    world = cm.World(WORLD, seed=3)
    m = world.map()
    check(m.num_landmarks > 0 and m.num_frames == 40, f"world generated: {m!r}")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        m.save(tmp / "map.ndjson")
        again = cm.Map.load(tmp / "map.ndjson")
        check(again.landmark_ids() == m.landmark_ids(), "map file round trip")

        vocab = cm.Vocabulary.train(m, k=8, seed=1)
        vocab.save(tmp / "vocab.txt")
        loaded = cm.Vocabulary.load(tmp / "vocab.txt")
        d = m.keypoints(0)[0][3]
        check(vocab.quantize(d) == loaded.quantize(d), "vocabulary round trip")

        regions = cm.RegionBank.generate(50, seed=2)
        check(len(regions) == 50 and all(a > 0 for a in regions.areas()), "region bank")

        model = cm.Model.train(m, regions, vocab, "rounds = 30\ncandidate_features = 30\nmining_period = 10\n")
        check(model.num_stumps == 30 and model.num_classes == m.num_landmarks + 1, "boosted model trained")

        queries = world.queries()
        truth = {i + 40: world.truth(i) for i in range(world.num_queries)}
        for kind in ["boost", "boost-inv", "hamming", "projected"]:
            rows = cm.match_frames(m, queries, kind, model=model)
            hits = sum(truth[f][k] == lm for f, k, lm, _ in rows)
            check(len(rows) > 0, f"{kind}: {len(rows)} matches, {hits} correct")

    rng = random.Random(0)
    pts = [(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(3, 6)) for _ in range(30)]
    img = [(x / z, y / z) for x, y, z in pts]
    res = cm.solve_pnp_ransac(pts, img, 1e-3)
    c = res["center"]
    check(res is not None and math.dist(c, (0, 0, 0)) < 1e-6, "PnP recovers the identity pose")


if __name__ == "__main__":
    main()
