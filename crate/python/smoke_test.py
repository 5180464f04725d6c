"""Smoke test for the bdirank Python module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`
or `pip install crates/py`, then run `python python/smoke_test.py`.
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import bdirank

ROOT = Path(__file__).resolve().parent.parent
DEMO = ROOT / "crates" / "core" / "tests" / "data" / "demo"
GOLDEN = ROOT / "crates" / "core" / "tests" / "data" / "golden"


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    assert bdirank.tokenize("I can't SLEEP!") == ["i", "can", "t", "sleep"]

    emb = bdirank.HashEmbedder(dim=384, seed=42)
    v = emb.embed("sad")
    assert len(v) == 384
    assert close(math.sqrt(sum(x * x for x in v)), 1.0, 1e-5)
    assert emb.embed("sad sad") == v
    assert close(bdirank.cosine(v, v), 1.0, 1e-6)

    sentences = bdirank.read_trec(str(DEMO / "corpus.trec"))
    assert len(sentences) == 200

    texts, labels = bdirank.read_labeled_csv(str(DEMO / "labeled.csv"))
    assert len(texts) == 300 and sum(labels) == 150

    linear = bdirank.LinearModel.train(texts, labels, epochs=20, seed=42)
    assert linear.score("I feel worthless and hopeless") > linear.score("the bakery sells fresh bread")

    toy_texts = ["happy happy"] * 20 + ["hopeless hopeless"] * 20
    toy_labels = [False] * 20 + [True] * 20
    lstm, log = bdirank.LstmModel.train(
        toy_texts, toy_labels, toy_texts, toy_labels, epochs=5, hidden=8, embed_dim=8, learning_rate=0.5
    )
    assert len(log) == 5
    with tempfile.TemporaryDirectory() as tmp:
        path = str(Path(tmp) / "m.bdls")
        lstm.save(path)
        again = bdirank.LstmModel.load(path)
        assert close(again.score("hopeless"), lstm.score("hopeless"), 1e-6)

    assert close(bdirank.average_precision(["r1", "n", "r2"], ["r1", "r2"]), (1 + 2 / 3) / 2)
    assert close(bdirank.precision_at_k(["a"] * 1, ["a"], 10), 0.1)
    assert close(bdirank.ndcg_at_k(["n", "a"], ["a"]), 1 / math.log2(3))

    report = json.loads(
        bdirank.evaluate(
            str(GOLDEN / "run.txt"),
            [str(GOLDEN / f"qrels_a{i}.txt") for i in (1, 2, 3)],
            rule="majority",
        )
    )
    assert close(report["mean"]["ap"], (5 / 9 + 0.5) / 2)

    with tempfile.TemporaryDirectory() as tmp:
        config = Path(tmp) / "demo.toml"
        text = (DEMO / "demo.toml").read_text()
        for name in ("corpus.trec", "labeled.csv", "queries.tsv", "qrels_a1.txt", "qrels_a2.txt", "qrels_a3.txt"):
            text = text.replace(f'"{name}"', json.dumps(str(DEMO / name)))
        config.write_text(text)
        ledger = bdirank.run_pipeline(str(config))
        stages = [row[0] for row in ledger]
        assert stages == ["ingest", "stage1", "stage2", "embed", "rank", "eval"], stages
        for prev, cur in zip(ledger, ledger[1:]):
            assert cur[2] == prev[3]
        rerun = bdirank.run_pipeline(str(config))
        assert all(row[1] == "skipped (cached)" for row in rerun)
        out = Path(tmp) / "out"
        check = bdirank.embed_check(str(out / "sentences.bdem"))
        assert check["passed"] and check["count"] == ledger[3][3]
        rows = bdirank.rank_embeddings(str(out / "queries.bdem"), str(out / "sentences.bdem"))
        assert len(rows) == ledger[4][3]
        assert all(-1.0 <= r[3] <= 1.0 for r in rows)

    try:
        bdirank.HashEmbedder(dim=1)
    except ValueError:
        pass
    else:
        raise AssertionError("dim=1 accepted")

    print("python smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
