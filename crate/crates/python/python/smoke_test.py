"""Exercises the imitparse_py extension end to end on a small synthetic corpus.

Build the module and put it on the path first, for example:

    cargo build --release -p imitparse-python --features extension-module
    cp target/release/libimitparse_py.so /tmp/imitparse_py.so
    PYTHONPATH=/tmp python3 crates/python/python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import imitparse_py as ip


def check_trees():
    t = ip.Tree.from_distances([3, 1, 2])
    assert str(t) == "(X w1 (X (X w2 w3) w4))", str(t)
    assert t.num_leaves == 4
    assert t.spans() == [(2, 3), (2, 4)], t.spans()
    assert ip.Tree.from_distances(t.distances()) == t
    assert t.composition_order() == [2, 2, 1]
    assert ip.Tree.parse("(S (NP the dog) (VP barked))").words() == ["the", "dog", "barked"]
    assert t.render().splitlines()[0] == "X"
    lb, rb = ip.Tree.baseline("lb", 4), ip.Tree.baseline("rb", 4)
    assert math.isclose(ip.unlabeled_f1(lb, rb, include_root=True), 1 / 3)
    assert ip.unlabeled_f1(rb, rb) == 1.0
    assert ip.bootstrap_p([0.5] * 10, [0.5] * 10, 1000, 3) == 1.0
    try:
        ip.Tree.parse("(X a b")
    except ValueError:
        pass
    else:
        raise AssertionError("unbalanced brackets were accepted")


def check_pipeline():
    sentences, gold, pairs = ip.generate(60, max_len=8, seed=4)
    assert len(sentences) == len(gold) == len(pairs) == 60
    small = [("prpn-epochs", "3"), ("sbs-epochs", "2"), ("refine-epochs", "1"), ("seed", "4")]
    teacher = ip.Prpn.train(sentences, small)
    assert math.isfinite(teacher.loss(sentences))
    d = teacher.distances(sentences[0])
    assert len(d) == len(sentences[0]) - 1
    prpn_trees = [teacher.parse(s) for s in sentences]
    f = ip.mean_f1(prpn_trees, gold)
    assert 0.0 <= f <= 1.0

    parser = ip.Parser.imitate(teacher, pairs, small)
    refined = parser.refine(pairs, seed=5, config=small)
    runs = [[p.parse(s) for s in sentences] for p in (parser, refined)]
    assert all(t.words() == s for t, s in zip(runs[0], sentences))
    assert 0.0 <= ip.agreement(runs) <= 1.0
    assert 0.0 <= ip.right_branching_agreement(runs[1]) <= 1.0

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "prpn.ckpt"
        teacher.save(path)
        again = ip.Prpn.load(path)
        assert again.distances(sentences[0]) == d
    print(f"prpn F {f:.3f}, sbs/refine agreement {ip.agreement(runs):.3f}")


if __name__ == "__main__":
    check_trees()
    check_pipeline()
    print("smoke test passed")
