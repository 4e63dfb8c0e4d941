"""Independent reference computations used by the tests.

Each oracle recomputes a quantity by a different route than the package
(plain loops, string formatting, direct formulas) so that agreement is
evidence rather than tautology.
"""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np


# --------------------------------------------------------------------- features


def feature_row(can_id: int, dlc: int, payload: bytes, interval: float | None, cap: float) -> list[float]:
    """Build one 77-wide row from text binary expansions."""
    row = [float(ch) for ch in format(can_id, "011b")]
    row.append(dlc / 8)
    bits = "".join(format(b, "08b") for b in payload).ljust(64, "0")
    row.extend(float(ch) for ch in bits)
    row.append(1.0 if interval is None else min(max(interval, 0.0), cap) / cap)
    return row


def feature_matrix(frames, cap: float = 1.0) -> np.ndarray:
    last: dict[int, float] = {}
    rows = []
    for f in frames:
        prev = last.get(f.can_id)
        rows.append(feature_row(f.can_id, f.dlc, f.payload, None if prev is None else f.timestamp - prev, cap))
        last[f.can_id] = f.timestamp
    return np.array(rows)


# ---------------------------------------------------------------------- metrics


def brute_metrics(y_true, y_pred, n_classes: int = 4) -> tuple[float, float]:
    """Accuracy and macro-F1 by counting samples one at a time."""
    pairs = list(zip(map(int, y_true), map(int, y_pred)))
    correct = sum(1 for t, p in pairs if t == p)
    f1s = []
    for c in range(n_classes):
        tp = sum(1 for t, p in pairs if t == c and p == c)
        fp = sum(1 for t, p in pairs if t != c and p == c)
        fn = sum(1 for t, p in pairs if t == c and p != c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return correct / len(pairs), sum(f1s) / n_classes


def confusion_metrics(conf) -> tuple[float, float]:
    """Same metrics, expanding a confusion matrix back into sample pairs."""
    y_true, y_pred = [], []
    for t, row in enumerate(conf):
        for p, count in enumerate(row):
            y_true += [t] * int(count)
            y_pred += [p] * int(count)
    return brute_metrics(y_true, y_pred, len(conf))


def group_means(records, key) -> dict:
    sums: dict = defaultdict(float)
    counts: dict = defaultdict(int)
    for r in records:
        k = key(r)
        sums[k] += r.macro_f1
        counts[k] += 1
    return {k: sums[k] / counts[k] for k in sums}


# ----------------------------------------------------------------- network math


def dnn_logits(params: dict, x: np.ndarray) -> np.ndarray:
    """Explicit loops for Dense -> Relu -> Dense."""
    w0, b0, w1, b1 = params["0.weight"], params["0.bias"], params["2.weight"], params["2.bias"]
    out = np.zeros((x.shape[0], w1.shape[1]))
    for n in range(x.shape[0]):
        hidden = [max(0.0, sum(x[n, i] * w0[i, j] for i in range(w0.shape[0])) + b0[j]) for j in range(w0.shape[1])]
        for k in range(w1.shape[1]):
            out[n, k] = sum(hidden[j] * w1[j, k] for j in range(w1.shape[0])) + b1[k]
    return out


def cross_entropy(logits, labels) -> float:
    total = 0.0
    for row, y in zip(logits, labels):
        z = math.log(sum(math.exp(v) for v in row))
        total += z - row[int(y)]
    return total / len(labels)


def central_difference(f, x: np.ndarray, h: float = 1e-5, index=None) -> np.ndarray:
    """Central finite differences of scalar f at x (optionally only at ``index`` entries)."""
    grad = np.zeros_like(x)
    indices = np.ndindex(x.shape) if index is None else index
    for idx in indices:
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


# ---------------------------------------------------------------------- attacks


def max_abs_delta(a: np.ndarray, b: np.ndarray) -> float:
    """Max |a - b| by an explicit scan (independent of the package checker)."""
    worst = 0.0
    for ra, rb in zip(a.tolist(), b.tolist()):
        for u, v in zip(ra, rb):
            worst = max(worst, abs(u - v))
    return worst


def ball_projection(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.minimum(np.maximum(x_adv, x - eps), x + eps)


def scenario(target, surrogate) -> str:
    same = (target.architecture == surrogate.architecture, target.vehicle == surrogate.vehicle)
    return {2: "white_box", 1: "gray_box", 0: "black_box"}[sum(same)]


def gradient_check(network, x: np.ndarray, y: np.ndarray, h: float = 1e-5, max_entries: int | None = None, seed: int = 0):
    """Compare analytic gradients with central differences.

    Returns ``{"inputs": max_rel_err, "<param>": max_rel_err, ...}``. With
    ``max_entries`` set, larger parameter tensors are checked on a seeded
    random subset of that many entries.
    """
    from canadv import nnet

    _, grads = nnet.loss_and_gradients(network, x, y)
    out = {}
    x = np.array(x, dtype=np.float64)
    num = central_difference(lambda v: nnet.cross_entropy(network.logits(v), y), x, h)
    out["inputs"] = float(relative_error(grads.inputs, num).max())
    rng = np.random.default_rng(seed)
    for name, value in network.params.items():
        p = np.array(value)
        index = None
        if max_entries is not None and p.size > max_entries:
            flat = rng.choice(p.size, size=max_entries, replace=False)
            index = [np.unravel_index(i, p.shape) for i in flat]

        def loss_at(v, name=name):
            return nnet.cross_entropy(network.with_params({**network.params, name: v}).logits(x), y)

        num = central_difference(loss_at, p, h, index)
        picked = tuple(np.array(index).T) if index is not None else ...
        out[name] = float(relative_error(grads.params[name][picked], num[picked]).max())
    return out
