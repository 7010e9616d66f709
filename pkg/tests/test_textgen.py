import numpy as np

from patchlm import textgen


def test_deterministic_by_seed():
    assert textgen.synthetic_text(5000, seed=3) == textgen.synthetic_text(5000, seed=3)
    assert textgen.synthetic_text(5000, seed=3) != textgen.synthetic_text(5000, seed=4)


def test_size_and_structure():
    t = textgen.synthetic_text(50_000, seed=0)
    assert len(t.encode()) == 50_000
    words = t.split()
    assert len(words) > 5000
    assert "\n" in t and "." in t
    # Zipf-ish: 'the' should be the most common token
    from collections import Counter

    common = Counter(w.strip(".,!?").lower() for w in words).most_common(3)
    assert common[0][0] == "the"


def test_documents_vary_in_size():
    docs = textgen.synthetic_documents(20, 400, seed=1)
    sizes = [len(d.encode()) for d in docs]
    assert min(sizes) >= 8 and len(set(sizes)) > 5
