import csv
import json

import numpy as np
import pytest

from idtransformer import netcore as nc

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_gradient(f, arrays, index, step=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = f(*arrays)
        x[i] = orig - step
        lo = f(*arrays)
        x[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad


def relative_errors(analytic, numeric, floor=1e-6):
    """Per-coordinate relative error.

    Where both gradients are below ``floor`` the error is measured against
    ``floor`` instead (so a 1e-3 tolerance means 1e-9 absolute there); this
    covers coordinates that are exactly zero analytically, e.g. key biases,
    whose central differences are pure roundoff of order 1e-10.
    """
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    return np.where(scale < floor, diff / floor, diff / np.where(scale < floor, 1.0, scale))


def gradient_check(build, arrays, step=1e-6):
    """Compare tape gradients of ``build(*tensors)`` with finite differences.

    Returns the worst relative error over every coordinate of every input.
    """
    tensors = [nc.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    nc.backward(out)

    def scalar(*arrs):
        with nc.no_grad():
            return float(build(*[nc.Tensor(a) for a in arrs]).value)

    worst = 0.0
    work = [a.copy() for a in arrays]
    for k, t in enumerate(tensors):
        numeric = numeric_gradient(scalar, work, k, step)
        worst = max(worst, float(relative_errors(t.grad, numeric).max()))
    return worst


WORDS = {
    0: ["apple", "banana", "cherry", "grape"],
    1: ["river", "ocean", "lake", "stream"],
    2: ["engine", "wheel", "piston", "gear"],
}
FILLER = ["the", "a", "of", "and", "to", "in", "is", "it", "that", "was", "for", "on", "with", "as"]


def synthetic_rows(n, seed=0, n_classes=3, min_len=6, max_len=14):
    rng = np.random.default_rng(seed)
    names = ["ALPHA", "BETA", "GAMMA"][:n_classes]
    rows = []
    for _ in range(n):
        label = int(rng.integers(n_classes))
        length = int(rng.integers(min_len, max_len + 1))
        words = list(rng.choice(FILLER, size=length))
        for _ in range(2):
            words.insert(int(rng.integers(len(words) + 1)), str(rng.choice(WORDS[label])))
        text = " ".join(words).capitalize() + "?"
        rows.append((names[label], text))
    return rows


def write_corpus(directory, n_train=300, n_test=90, seed=0, n_classes=3, **kw):
    """Write train/test CSVs plus a manifest; return the manifest path."""
    directory.mkdir(parents=True, exist_ok=True)
    for name, n, s in (("train.csv", n_train, seed), ("test.csv", n_test, seed + 1)):
        with open(directory / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "text"])
            w.writerows(synthetic_rows(n, s, n_classes, **kw))
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"name": "synthetic", "train": "train.csv", "test": "test.csv",
                                    "split_seed": 7}), encoding="utf-8")
    return manifest


@pytest.fixture
def corpus(tmp_path):
    return write_corpus(tmp_path / "corpus")


def head_matrices(d_s, d_v=64, d_k=64, d_e=512, seed=0):
    """Attention logits, attention weights and ``T = V D`` of one random head."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((d_s, d_e))
    bound = 1.0 / np.sqrt(d_e)
    wq, wk = rng.uniform(-bound, bound, (2, d_e, d_k))
    wv = rng.uniform(-bound, bound, (d_e, d_v))
    D = rng.uniform(-bound, bound, (d_v, d_e))
    logits = (x @ wq) @ (x @ wk).T / np.sqrt(d_k)
    return logits, nc.softmax_rows(logits), (x @ wv) @ D
