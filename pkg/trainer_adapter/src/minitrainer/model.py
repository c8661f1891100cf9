"""A deliberately small trainable text model.

Multinomial logistic regression from hashed bag-of-words features of the
conditioning text to a vocabulary of known response strings.  Training is
full-batch gradient descent on the mean negative log-likelihood with a
backtracking step size: a step that would raise the loss is halved until it
does not, so the recorded per-epoch loss can never increase.

The point is not capability -- it is having a *real* optimiser with a real
loss curve behind the service contract, small enough to train in
milliseconds and deterministic enough to content-address.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass

_TOKEN_RE = re.compile(r"[a-z0-9]+")

#: Halvings tried before a step is abandoned for the epoch.
_MAX_BACKTRACKS = 40

#: Loss is allowed to "increase" by at most this much (float round-off).
_LOSS_SLACK = 1e-12


def _token_index(token: str, dim: int) -> int:
    # hash() is salted per interpreter run; sha256 keeps features stable
    # across processes so identical jobs produce identical checkpoints.
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") % dim


def featurize(text: str, dim: int) -> dict[int, float]:
    """L2-normalised hashed token counts, sparse over ``dim`` buckets."""
    counts: dict[int, float] = {}
    for token in _TOKEN_RE.findall(text.lower()):
        idx = _token_index(token, dim)
        counts[idx] = counts.get(idx, 0.0) + 1.0
    if counts:
        norm = math.sqrt(sum(v * v for v in counts.values()))
        for idx in counts:
            counts[idx] /= norm
    return counts


def _softmax(logits: list[float]) -> list[float]:
    top = max(logits)
    exps = [math.exp(z - top) for z in logits]
    total = sum(exps)
    return [e / total for e in exps]


@dataclass
class TinyLM:
    """Sparse softmax classifier over a fixed list of response strings.

    ``weights`` holds one sparse row (feature index -> weight) per class,
    parallel to ``classes`` and ``bias``.
    """

    dim: int
    classes: list[str]
    weights: list[dict[int, float]]
    bias: list[float]

    @classmethod
    def blank(cls, dim: int = 512, fallback: str = "I do not know yet.") -> "TinyLM":
        """An untrained model that answers everything with ``fallback``."""
        return cls(dim=dim, classes=[fallback], weights=[{}], bias=[0.0])

    def clone(self) -> "TinyLM":
        return TinyLM(
            dim=self.dim,
            classes=list(self.classes),
            weights=[dict(row) for row in self.weights],
            bias=list(self.bias),
        )

    def extended(self, responses: list[str]) -> "TinyLM":
        """A copy whose class list also covers ``responses``.

        New classes start at zero weight; existing rows are untouched, which
        is what makes a fine-tune of this model a warm start rather than a
        retrain.
        """
        out = self.clone()
        known = set(out.classes)
        for text in responses:
            if text not in known:
                known.add(text)
                out.classes.append(text)
                out.weights.append({})
                out.bias.append(0.0)
        return out

    def class_index(self) -> dict[str, int]:
        return {text: i for i, text in enumerate(self.classes)}

    def _logits(self, feats: dict[int, float]) -> list[float]:
        return [
            sum(row.get(i, 0.0) * v for i, v in feats.items()) + b
            for row, b in zip(self.weights, self.bias)
        ]

    def predict(self, text: str) -> str:
        """Most likely response for ``text`` (ties break to the lowest index)."""
        logits = self._logits(featurize(text, self.dim))
        best = max(range(len(logits)), key=lambda c: (logits[c], -c))
        return self.classes[best]

    def loss(self, examples: list[tuple[dict[int, float], int]]) -> float:
        """Mean negative log-likelihood over (features, label) pairs."""
        total = 0.0
        for feats, label in examples:
            probs = _softmax(self._logits(feats))
            total -= math.log(max(probs[label], 1e-300))
        return total / len(examples)

    def _gradient(
        self, examples: list[tuple[dict[int, float], int]]
    ) -> tuple[list[dict[int, float]], list[float]]:
        n = len(examples)
        grad_w: list[dict[int, float]] = [{} for _ in self.classes]
        grad_b = [0.0 for _ in self.classes]
        for feats, label in examples:
            probs = _softmax(self._logits(feats))
            for c, p in enumerate(probs):
                coef = (p - (1.0 if c == label else 0.0)) / n
                if coef == 0.0:
                    continue
                grad_b[c] += coef
                row = grad_w[c]
                for i, v in feats.items():
                    row[i] = row.get(i, 0.0) + coef * v
        return grad_w, grad_b

    def _stepped(
        self, grad_w: list[dict[int, float]], grad_b: list[float], step: float
    ) -> "TinyLM":
        out = self.clone()
        for c, row in enumerate(grad_w):
            target = out.weights[c]
            for i, g in row.items():
                target[i] = target.get(i, 0.0) - step * g
            out.bias[c] -= step * grad_b[c]
        return out

    def to_json_obj(self) -> dict:
        return {
            "dim": self.dim,
            "classes": self.classes,
            "weights": [{str(i): w for i, w in sorted(row.items())} for row in self.weights],
            "bias": self.bias,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "TinyLM":
        return cls(
            dim=int(obj["dim"]),
            classes=list(obj["classes"]),
            weights=[{int(i): float(w) for i, w in row.items()} for row in obj["weights"]],
            bias=[float(b) for b in obj["bias"]],
        )


def fine_tune(
    base: TinyLM,
    pairs: list[tuple[str, str]],
    epochs: int,
    learning_rate: float = 1.0,
) -> tuple[TinyLM, list[float]]:
    """Train a copy of ``base`` on (conditioning text, response) pairs.

    Returns the trained model and the loss curve: entry 0 is the loss before
    any update, then one entry per epoch.  The curve is non-increasing by
    construction -- each epoch's step is backtracked until it does not raise
    the loss, and a step that cannot be salvaged in ``_MAX_BACKTRACKS``
    halvings is skipped entirely.  ``base`` itself is never modified.
    """
    if not pairs:
        raise ValueError("cannot fine-tune on an empty dataset")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")

    model = base.extended([response for _, response in pairs])
    index = model.class_index()
    examples = [
        (featurize(text, model.dim), index[response]) for text, response in pairs
    ]

    curve = [model.loss(examples)]
    for _ in range(epochs):
        grad_w, grad_b = model._gradient(examples)
        step = learning_rate
        for _ in range(_MAX_BACKTRACKS):
            candidate = model._stepped(grad_w, grad_b, step)
            candidate_loss = candidate.loss(examples)
            if candidate_loss <= curve[-1] + _LOSS_SLACK:
                model = candidate
                curve.append(candidate_loss)
                break
            step /= 2.0
        else:
            curve.append(curve[-1])
    return model, curve
