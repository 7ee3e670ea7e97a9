#!/usr/bin/env python3
"""Smoke test for the spoofsearch_py extension module.

Builds nothing itself: expects `cargo build -p spoofsearch-python` to have
produced target/debug/libspoofsearch_py.so, which is staged under a temp
directory with the import name Python expects.

Run from the repository root:

    cargo build -p spoofsearch-python
    python3 python/smoke_test.py
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def stage_module(tmp: Path) -> None:
    for profile in ("debug", "release"):
        built = REPO / "target" / profile / "libspoofsearch_py.so"
        if built.exists():
            shutil.copy2(built, tmp / "spoofsearch_py.so")
            sys.path.insert(0, str(tmp))
            return
    sys.exit("libspoofsearch_py.so not found; run `cargo build -p spoofsearch-python` first")


def main() -> None:
    with tempfile.TemporaryDirectory() as tmpdir:
        tmp = Path(tmpdir)
        stage_module(tmp)
        import spoofsearch_py as sp

        # feature file round trip and frame fixing
        t, f = 12, 8
        values = [math.sin(0.3 * i) for i in range(t * f)]
        feat = tmp / "x.fafd"
        sp.store_feature(feat, t, f, values)
        t2, f2, loaded = sp.load_feature(feat)
        assert (t2, f2) == (t, f)
        assert max(abs(a - b) for a, b in zip(values, loaded)) < 1e-6  # f32 payload
        t3, fixed = sp.fix_frames(t, f, loaded, 20)
        assert t3 == 20 and fixed[: t * f] == loaded  # cyclic padding repeats rows

        # EER: separated scores give exactly zero, symmetric overlap gives 0.5
        eer, _ = sp.compute_eer([1.0, 2.0, 3.0], [-1.0, -2.0, -3.0])
        assert eer == 0.0, eer
        eer, _ = sp.compute_eer([0.0, 1.0], [0.0, 1.0])
        assert abs(eer - 0.5) < 1e-12, eer

        # genotype text round trip from raw logits
        rows = 14 * 9
        normal = [((i * 37) % 11) / 11.0 for i in range(rows)]
        reduce = [((i * 17) % 7) / 7.0 for i in range(rows)]
        text = sp.derive_genotype(normal, reduce)
        assert sp.normalize_genotype(text) == text
        assert text.splitlines()[0].startswith("normal:")

        # gradient checks on a reduced instance count
        for name, max_err in sp.run_gradcheck(instances=1):
            assert max_err <= 1e-4, (name, max_err)

        # end-to-end micro pipeline: generate -> search -> retrain -> score
        corpus = tmp / "corpus"
        sp.gen_synthetic(corpus, 24, 16, 16, 7)
        genotype, history_csv = sp.run_search(
            corpus / "train.tsv",
            corpus / "val.tsv",
            epochs=1,
            batch_size=4,
            cells=2,
            channels=4,
            frames=16,
            seed=7,
        )
        assert history_csv.startswith("epoch,")
        model = tmp / "model.fadm"
        history = sp.retrain(
            genotype,
            corpus / "train.tsv",
            model,
            epochs=2,
            cells=2,
            channels=4,
            frames=16,
            seed=7,
        )
        assert len(history) == 2
        scored = sp.score_manifest(model, corpus / "eval.tsv")
        assert len(scored) == 24 and all(math.isfinite(s) for _, s, _ in scored)
        eer = sp.eval_eer(model, corpus / "eval.tsv")
        assert 0.0 <= eer <= 1.0
        single = sp.score_feature(model, corpus / "features" / "eval_0000.fafd")
        assert math.isfinite(single)

        assert sp.tape_smoke(64) > 0.0
        assert sp.GENERATOR_VERSION == 1

    print("smoke test ok")


if __name__ == "__main__":
    main()
