"""Smoke test for the Python bindings.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/mdm_scaffold_py-*.whl
"""
import json

import mdm_scaffold_py as m


def main():
    schema = m.Schema.person()
    train, heldout = m.make_split(50, 5, null_pad_fraction=0.2, seed=3)
    examples = [json.loads(e) for e in train + heldout]
    texts = [e["prompt"] for e in examples] + [e["gold_json"] for e in examples] + [m.DIRECTIVE]
    vocab = m.Vocabulary.build(texts)
    assert vocab.decode(vocab.encode(examples[0]["source_text"])) == examples[0]["source_text"]

    cells = schema.scaffold(vocab)
    assert sum(c is not None for c in cells) == schema.structural_overhead() == 39

    golds = [e["gold_json"] for e in examples]
    sources = [e["source_text"] for e in examples]
    assert m.structural_metrics(golds, schema) == (1.0, 1.0, 1.0)
    assert m.content_metrics(golds, golds, schema)[3] == 1.0
    assert m.hallucination_rate(golds, sources, schema) == 0.0
    assert abs(m.similarity("john smith", "jon smith") - 0.9) < 1e-9
    assert m.unmask_schedule(10, 4) == [3, 3, 2, 2]

    parsed = m.parse_output('{ "name" : "ada" , "age" : "x" }', schema)
    assert parsed.ok and parsed.fields["name"] == "ada" and parsed.extras == ["age"]

    model = m.Model.init(len(vocab), d_model=16, n_heads=2, n_layers=1, d_ff=32, max_len=256)
    for mode in ["baseline", "scaffold", "adaptive"]:
        g = model.generate(vocab, schema, examples[-1]["source_text"], mode=mode, steps=4, baseline_response_len=16)
        assert g.forward_passes == 4
        if mode != "baseline":
            assert m.parse_output(g.output_json, schema).ok, g.output_json
    print("python smoke test passed")


if __name__ == "__main__":
    main()
