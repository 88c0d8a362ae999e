"""Expert-activation statistics, learning-curve areas and embedding export."""

from __future__ import annotations

import numpy as np

from .errors import ContractError

MODES = ("recovery", "rhythmic", "goal-tracking")


def check_simplex(alphas, tol: float = 1e-6):
    """Raise unless every row is a probability vector (entries in [0, 1], sum 1 +- tol)."""
    a = np.asarray(alphas, dtype=np.float64)
    if a.size == 0:
        return
    if np.any(a < 0) or np.any(a > 1) or np.any(np.abs(a.sum(-1) - 1.0) > tol):
        raise ContractError("gating weights off the simplex")


def activation_matrix(modes, alphas, mode_order=None):
    """Mean alpha per mode label -> (labels, matrix (n_modes, N), counts)."""
    alphas = np.asarray(alphas, dtype=np.float64)
    modes = list(modes)
    if len(modes) != len(alphas):
        raise ContractError(f"{len(modes)} mode labels for {len(alphas)} alpha rows")
    if any(m is None or m == "" for m in modes):
        raise ContractError("activation matrix needs a mode label on every logged step")
    if not modes:
        raise ContractError("activation matrix needs labeled logs")
    check_simplex(alphas)
    labels = [m for m in (mode_order or MODES) if m in set(modes)]
    labels += sorted(set(modes) - set(labels))
    m = np.asarray(modes)
    mat = np.stack([alphas[m == lab].mean(axis=0) for lab in labels])
    counts = [int(np.sum(m == lab)) for lab in labels]
    return labels, mat, counts


def top2_table(labels, matrix):
    """Rows of (mode, first expert, its alpha, second expert, its alpha)."""
    rows = []
    for lab, row in zip(labels, np.asarray(matrix)):
        order = np.argsort(-row, kind="stable")
        second = order[1] if len(order) > 1 else order[0]
        rows.append((lab, int(order[0]), float(row[order[0]]), int(second), float(row[second])))
    return rows


def strict_argmax(row, margin: float = 0.0):
    """Index of the unique maximum of ``row`` (ties beyond ``margin`` -> None)."""
    row = np.asarray(row)
    k = int(np.argmax(row))
    others = np.delete(row, k)
    return k if others.size == 0 or row[k] > others.max() + margin else None


def dominance(labels, matrix) -> dict:
    """Per-mode dominant expert plus the recovery-vs-rhythmic distinctness check."""
    dom = {lab: strict_argmax(row) for lab, row in zip(labels, matrix)}
    all_strict = all(v is not None for v in dom.values())
    rec, rhy = dom.get("recovery"), dom.get("rhythmic")
    distinct = rec is not None and rhy is not None and rec != rhy
    return {"dominant": dom, "all_strict": all_strict, "distinct": distinct}


def auc(curve) -> float:
    """Area under a learning curve per unit length (trapezoid rule over episodes)."""
    y = np.asarray(curve, dtype=np.float64)
    if y.size == 0:
        raise ContractError("empty learning curve")
    if y.size == 1:
        return float(y[0])
    trap = getattr(np, "trapezoid", None) or np.trapz
    return float(trap(y) / (y.size - 1))


def summarize(groups: dict) -> list[tuple]:
    """{key: [values over seeds]} -> rows (key, mean, std, n)."""
    rows = []
    for k, vals in groups.items():
        v = np.asarray(vals, dtype=np.float64)
        rows.append((k, float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0, int(v.size)))
    return rows


def embedding_rows(actions, alphas, modes):
    """Header and rows of (action dims | alpha dims | expert id | mode) for external t-SNE."""
    actions = np.asarray(actions, dtype=np.float64).reshape(len(modes), -1) if len(modes) else np.zeros((0, 0))
    alphas = np.asarray(alphas, dtype=np.float64).reshape(len(modes), -1) if len(modes) else np.zeros((0, 0))
    n_a = actions.shape[1] if len(modes) else 0
    n_e = alphas.shape[1] if len(modes) else 0
    header = [f"a{i}" for i in range(n_a)] + [f"alpha{i}" for i in range(n_e)] + ["expert", "mode"]
    if not len(modes):
        return ["expert", "mode"], []
    check_simplex(alphas)
    rows = [list(a) + list(al) + [int(np.argmax(al)), m] for a, al, m in zip(actions, alphas, modes)]
    return header, rows
