"""Class-score algebra.

Score vectors have ``C + 1`` slots with the background in the LAST slot.
Every function accepts a single vector or a stack of them along axis 0.
"""

from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12


class ZeroForegroundMass(ValueError):
    """Raised when a score vector puts all of its mass on the background."""


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def foreground(scores) -> np.ndarray:
    """Drop the background slot without renormalizing."""
    return np.asarray(scores, dtype=np.float64)[..., :-1]


def background(scores) -> np.ndarray:
    return np.asarray(scores, dtype=np.float64)[..., -1]


def amplify(scores) -> np.ndarray:
    """Remove the background slot and L1-normalize the foreground slots."""
    fg = foreground(scores)
    mass = fg.sum(axis=-1, keepdims=True)
    if np.any(mass <= 0.0):
        raise ZeroForegroundMass("score vector has no foreground mass")
    return fg / mass


def fg_argmax(scores) -> np.ndarray | int:
    out = np.argmax(foreground(scores), axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def kl_div(p, q, eps: float = PROB_FLOOR) -> np.ndarray | float:
    """``sum_c p_c ln(p_c / q_c)`` with both arguments floored at ``eps``.

    The floor is applied inside the log only; ``p_c = 0`` terms vanish.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    terms = p * (np.log(np.maximum(p, eps)) - np.log(np.maximum(q, eps)))
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_div_grad_logits(z_fg, q, eps: float = PROB_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """KL(softmax(z_fg) || q) and its gradient with respect to ``z_fg``.

    Row-wise over a stack ``(N, C)``. Used where the student distribution is
    a softmax over foreground logits (the background logit cancels out of an
    amplified softmax).
    """
    p = softmax(z_fg)
    q = np.asarray(q, dtype=np.float64)
    lp = np.log(np.maximum(p, eps))
    g = lp - np.log(np.maximum(q, eps)) + (p > eps)
    loss = (p * (lp - np.log(np.maximum(q, eps)))).sum(axis=-1)
    dz = p * (g - (p * g).sum(axis=-1, keepdims=True))
    return loss, dz
