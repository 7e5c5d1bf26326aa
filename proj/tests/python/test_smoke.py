import json
import math

import pytest

import ctxsens


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


@pytest.fixture
def bundle(tmp_path):
    posts, ic, oc = [], [], []
    for i in range(60):
        pid = f"p{i:03d}"
        trigger = i % 3 == 0
        posts.append({"post_id": pid, "target_text": f"word{i % 7} filler{i % 5}" + (" calm" if trigger else ""),
                      "parent_text": None if i % 4 == 0 else "parent words"})
        oc_toxic = 3 if trigger else 0
        ic.append({"post_id": pid, "condition": "ic",
                   "judgments": [{"label": "non_toxic", "parent_helpful": trigger} for _ in range(4)]})
        oc.append({"post_id": pid, "condition": "oc",
                   "judgments": [{"label": "toxic" if r < oc_toxic else "non_toxic"} for r in range(4)]})
    write_jsonl(tmp_path / "posts.jsonl", posts)
    write_jsonl(tmp_path / "ic.jsonl", ic)
    write_jsonl(tmp_path / "oc.jsonl", oc)
    return ctxsens.load_bundle(tmp_path / "posts.jsonl", tmp_path / "ic.jsonl", tmp_path / "oc.jsonl")


def test_version():
    assert ctxsens.__version__ == "1.0.0"


def test_sensitivities(bundle):
    assert bundle.n_posts == 60
    recs = bundle.sensitivities()
    assert len(recs) == 60
    first = recs[0]
    assert first["delta"] == pytest.approx(0.75)
    assert first["sem_oc"] == pytest.approx(math.sqrt(0.75 * 0.25 / 3))
    assert first["is_sensitive"]
    assert not recs[1]["is_sensitive"]
    assert bundle.agreement("binary")["kappa"] == pytest.approx(1.0)


def test_metrics():
    s = [0.1, 0.4, 0.35, 0.8]
    y = [False, False, True, True]
    assert ctxsens.roc_auc(s, y) == pytest.approx(0.75)
    assert ctxsens.aupr(s, y) == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert ctxsens.mse([0.0, 1.0], [0.0, 0.0]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        ctxsens.roc_auc([0.1, 0.2], [True, True])


def test_train_predict_save(bundle, tmp_path):
    ex = bundle.examples()
    model = ctxsens.train("ridge", ex, seed=1, ridge_lambda=0.1)
    preds = model.predict([e["text"] for e in ex])
    assert len(preds) == len(ex)
    assert max(preds) <= 1.0 and min(preds) >= -1.0
    assert preds[0] > preds[1]
    model.save(tmp_path / "m.bin")
    again = ctxsens.load_model(tmp_path / "m.bin")
    assert again.family == "ridge"
    assert again.predict([ex[0]["text"]]) == [preds[0]]


def test_cross_validate(bundle):
    report = ctxsens.cross_validate(bundle.examples(), family="ridge", seed=2)
    assert len(report["folds"]) == 3
    assert report["summary"]["mse"]["mean"] >= 0.0


def test_bootstrap():
    a = [True] * 60 + [False] * 40
    b = [True] * 20 + [False] * 80
    r = ctxsens.paired_bootstrap(a, b, resample_size=50, seed=3)
    assert r["p_value"] < 0.01
    with pytest.raises(ValueError):
        ctxsens.paired_bootstrap([], b)


def test_augment(bundle):
    gold = bundle.examples()
    pool = [{"id": f"u{i}", "text": f"word{i % 7} calm" if i % 2 else f"filler{i % 5}"} for i in range(200)]
    curve = ctxsens.augment(gold, pool, k=10, cycles=2, repeats=2, seed=1)
    assert len(curve) == 3
    assert all(v >= 0.0 for v in curve)
