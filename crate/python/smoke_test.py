"""Smoke test for the casgraph_py extension.

Build first:  cargo build --release -p casgraph-py --features extension-module
"""
import json
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    for profile in ("release", "debug"):
        so = os.path.join(ROOT, "target", profile, "libcasgraph_py.so")
        if os.path.exists(so):
            d = tempfile.mkdtemp()
            shutil.copy(so, os.path.join(d, "casgraph_py.so"))
            sys.path.insert(0, d)
            import casgraph_py
            return casgraph_py
    sys.exit("libcasgraph_py.so not found; build the casgraph-py crate first")


cg = load()

g = cg.CascadeGraph.parse("c1\ta\t0\t3\ta:0 a/b:0.5 a/c:2 a/b/d:30")
assert len(g) == 4 and g.id == "c1"
assert g.popularity(24.0) == 3
assert len(g.observe(1.0)) == 2
assert cg.CascadeGraph.parse(g.to_line()).to_line() == g.to_line()

graphs = cg.synthesize(50, seed=3)
assert len(graphs) == 50 and all(x.is_valid_tree() for x in graphs)
lam = cg.fit_rate(graphs)
assert lam > 0

big = max(graphs, key=len)
assert cg.aug_sim(big, 1.0, seed=7, lam=lam).is_valid_tree()
assert len(cg.aug_rwr(big, seed=7)) <= len(big)

feats = cg.node_features(big, 1.0, mode="wavelet")
assert len(feats) == len(big) and len(feats[0]) == 17

z = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]
loss = cg.nt_xent(z, 0.5)
expect = -math.log(math.exp(2) / (math.exp(2) + 2))
assert abs(loss - expect) < 1e-9, (loss, expect)
assert abs(cg.msle([math.log2(8)], [8.0])) < 1e-12

enc = cg.Encoder(embedding_dim=8, model_size=1, head="2-1", seed=0)
h = enc.encode(big, 1.0)
assert len(h) == 32
preds = enc.predict(graphs[:5], 1.0)
assert len(preds) == 5 and all(math.isfinite(p) for p in preds)

with tempfile.TemporaryDirectory() as d:
    path = os.path.join(d, "m.ckpt")
    enc.save(path)
    assert cg.Encoder.load(path).encode(big, 1.0) == h
    cfg = """
[data]
synthetic-count = 200
[model]
embedding-dim = 8
model-size = 1
[train]
pretrain-epochs = 1
finetune-epochs = 2
[run]
seeds = 1
"""
    summary = json.loads(cg.run_experiment(cfg, os.path.join(d, "run")))
    assert math.isfinite(summary["report"]["mean"])

print("python smoke test: ok")
