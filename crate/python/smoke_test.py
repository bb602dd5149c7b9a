"""Quick check of the Python bindings: synth -> featurize -> train -> evaluate."""

import pathlib
import sys
import tempfile

import adtext

FIXTURE = pathlib.Path(__file__).resolve().parent.parent / "crates/core/fixtures/nh3_vcr3.jsonl"
S4 = "<s>NH3</s>VCr3 (2 1 0)</s>[N Cr Cr bridge [Cr Cr Cr Cr V V V N] [Cr Cr Cr Cr V V V N]]</s>"


def main() -> int:
    (nh3,) = adtext.load_dataset(str(FIXTURE))
    assert nh3.featurize("S4") == S4, nh3.featurize("S4")
    assert nh3.miller_index == (2, 1, 0)

    systems = adtext.synth(n=120, seed=3)
    train = [s for s in systems if s.split == "train"]
    val = [s for s in systems if s.split != "train"]
    texts = lambda xs: [s.featurize("S4") for s in xs]
    labels = lambda xs: [s.energy_ev for s in xs]

    vocab = adtext.Vocabulary.build(texts(train))
    ids, mask = vocab.encode(S4, 64)
    assert len(ids) == len(mask) == 64

    model = adtext.Model(len(vocab), layers=2, heads=2, hidden=32, max_positions=96, seed=1)
    mae, epoch = model.fit(vocab, texts(train), labels(train), texts(val), labels(val),
                           lr=1e-3, epochs=4, batch_size=8)
    print(f"best validation MAE {mae:.3f} eV at epoch {epoch}")

    preds = model.predict(vocab, texts(val))
    report = adtext.evaluate([s.id for s in val], [s.split for s in val],
                             [s.adsorbate_smiles for s in val], [s.bulk_formula for s in val],
                             labels(val), preds)
    total = [row for row in report["mae"] if row["split"] == "total"][0]
    assert abs(total["mae"] - mae) < 1e-9, (total, mae)

    with tempfile.TemporaryDirectory() as tmp:
        model.save(f"{tmp}/ckpt", vocab)
        again = adtext.Model.load(f"{tmp}/ckpt")
        assert again.predict(vocab, texts(val)) == preds

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
