"""Query/answer token streams, the FM/MASK attention gate, aligned positions,
masked motion-token sampling and the joint loss.

Roles group into three blocks: the query block, the generative answer block
(text and flow-matched action segments) and the masked-token block. The two
answer blocks both see the query and never each other, and both start their
positions at ``p0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .flow_policy import read_flat, write_flat

MODALITIES = ("vision", "text", "state", "action")
ROLES = ("query", "answer_text", "answer_fm", "answer_mask")
BLOCK_OF_ROLE = {"query": 0, "answer_text": 1, "answer_fm": 1, "answer_mask": 2}
MASK_ID = 0
DEFAULT_WEIGHTS = {"text": 1.0, "act": 1.0, "fm": 1.0, "mask": 0.1}


@dataclass(frozen=True)
class Segment:
    modality: str
    length: int
    role: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.length < 0:
            raise ValueError("segment length must be >= 0")
        if self.role == "answer_text" and self.modality != "text":
            raise ValueError("answer_text segments must be text")
        if self.role in ("answer_fm", "answer_mask") and self.modality != "action":
            raise ValueError(f"{self.role} segments must carry actions")


@dataclass
class TokenStream:
    """Serialized sample: per-position kinds plus the three block spans."""

    segments: list
    kinds: list  # per position: "content" or "begin"/"end" sentinel
    seg_of: np.ndarray  # per position: segment index
    spans: tuple  # (|S_Q|, |FM block|, |MASK block|)
    omega: dict = field(default_factory=dict)  # text / fm / mask -> sorted positions

    @property
    def N(self) -> int:
        return len(self.kinds)

    def to_json(self) -> dict:
        return {
            "segments": [vars(s) for s in self.segments],
            "kinds": self.kinds,
            "spans": list(self.spans),
            "omega": {k: [int(i) for i in v] for k, v in self.omega.items()},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def serialize_qa(segments: Sequence[Segment | Mapping]) -> TokenStream:
    """Lay segments out in order; non-text segments are bracketed by begin/end sentinels.

    Segments must come in block order: query, then text or flow answers,
    then masked-token answers.
    """
    segs = [s if isinstance(s, Segment) else Segment(**s) for s in segments]
    if not any(s.role == "query" for s in segs):
        raise ValueError("need at least one query segment")
    blocks = [BLOCK_OF_ROLE[s.role] for s in segs]
    for a, b in zip(blocks, blocks[1:]):
        if b < a:
            if a > 0 and b == 0:
                raise ValueError("answer segment precedes a query segment")
            raise ValueError("masked-token answers must follow the other answer segments")
    kinds, seg_of = [], []
    omega = {"text": [], "fm": [], "mask": []}
    span = [0, 0, 0]
    for k, s in enumerate(segs):
        bracket = s.modality != "text"
        body = ["begin"] * bracket + ["content"] * s.length + ["end"] * bracket
        start = len(kinds)
        kinds += body
        seg_of += [k] * len(body)
        span[BLOCK_OF_ROLE[s.role]] += len(body)
        content = [start + i for i, kind in enumerate(body) if kind == "content"]
        if s.role == "answer_text":
            omega["text"] += content
        elif s.role == "answer_fm":
            omega["fm"] += content
        elif s.role == "answer_mask":
            omega["mask"] += content
    return TokenStream(segs, kinds, np.asarray(seg_of, dtype=int), tuple(span),
                       {k: np.asarray(v, dtype=int) for k, v in omega.items()})


# ------------------------------------------------------------------- gating

BLOCK_GATE = np.array([[1, 0, 0], [1, 1, 0], [1, 0, 1]], dtype=bool)


def gate_matrix(spans: Sequence[int], base=None) -> np.ndarray:
    """Token-level visibility ``M[i, j]`` (query row ``i`` may attend key ``j``).

    The block gate ``[[1,0,0],[1,1,0],[1,0,1]]`` is expanded to tokens and
    AND-ed with ``base`` (default: causal).
    """
    lens = [int(n) for n in spans]
    if len(lens) != 3 or min(lens) < 0:
        raise ValueError("spans must be three non-negative lengths")
    N = sum(lens)
    block = np.repeat(np.arange(3), lens)
    G = BLOCK_GATE[block[:, None], block[None, :]]
    if base is None:
        base = np.tril(np.ones((N, N), dtype=bool))
    base = np.asarray(base, dtype=bool)
    if base.shape != (N, N):
        raise ValueError(f"base mask must be {N} x {N}")
    return G & base


def masked_attention(X, Wq, Wk, mask) -> np.ndarray:
    """Single-head attention weights; masked entries are exactly zero."""
    X = np.asarray(X, dtype=float)
    scores = (X @ Wq) @ (X @ Wk).T / math.sqrt(Wq.shape[1])
    mask = np.asarray(mask, dtype=bool)
    scores = np.where(mask, scores, -np.inf)
    m = np.max(scores, axis=1, keepdims=True, initial=-np.inf)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(scores - m), 0.0)
    z = e.sum(axis=1, keepdims=True)
    return np.divide(e, z, out=np.zeros_like(e), where=z > 0)


def assign_positions(spans: Sequence[int]) -> np.ndarray:
    """``j`` on the query block, ``p0 + r(j)`` on each answer block, ``p0 = |S_Q|``."""
    q, fm, mk = (int(n) for n in spans)
    if min(q, fm, mk) < 0:
        raise ValueError("spans must be non-negative")
    p0 = q  # max_{j in S_Q} (j + 1); 0 for an empty query
    return np.concatenate([np.arange(q), p0 + np.arange(fm), p0 + np.arange(mk)]).astype(int)


# ------------------------------------------------------------ masked tokens

def mask_count(T_z: int, rho: float) -> int:
    """Nearest integer to ``rho * T_z``, halves rounded down, at least 1."""
    if T_z < 1:
        raise ValueError("T_z must be >= 1")
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    return max(1, math.ceil(rho * T_z - 0.5))


def sample_mask(T_z: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted 0-based positions drawn uniformly without replacement."""
    return np.sort(rng.choice(T_z, size=mask_count(T_z, rho), replace=False))


def apply_mask(tokens, omega) -> np.ndarray:
    z = np.array(tokens, dtype=int, copy=True)
    z[np.asarray(omega, dtype=int)] = MASK_ID
    return z


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    return x - m - np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))


def masked_ce_loss(logits, targets, omega, codebook_size: int | None = None):
    """``-sum_{i in omega} log softmax(logits_i)[z_i]`` with 1-based targets.

    ``logits`` is ``T_z x |C|`` (rows outside ``omega`` are ignored) and
    ``targets`` holds one code per row. Returns ``(loss, grad)`` with ``grad``
    shaped like ``logits`` and zero off ``omega``.
    """
    L = np.asarray(logits, dtype=float)
    z = np.asarray(targets)
    if L.ndim != 2 or z.shape != (L.shape[0],):
        raise ValueError("need T_z x |C| logits and one target per row")
    if not np.all(np.isfinite(L)):
        raise ValueError("logits must be finite")
    C = L.shape[1] if codebook_size is None else int(codebook_size)
    om = np.asarray(omega, dtype=int)
    zt = z[om]
    if np.any(zt < 1) or np.any(zt > C) or np.any(zt != np.round(zt)):
        raise ValueError(f"targets must be codebook indices in [1, {C}]")
    zt = zt.astype(int) - 1
    lp = _log_softmax(L[om])
    loss = float(-np.sum(lp[np.arange(om.size), zt]))
    grad = np.zeros_like(L)
    g = np.exp(lp)
    g[np.arange(om.size), zt] -= 1.0
    np.add.at(grad, om, g)
    return loss, grad


def joint_loss(parts: Mapping[str, float], weights: Mapping[str, float] | Sequence[float] | None = None) -> float:
    """``w_text L_text + w_act (w_fm L_FM + w_mask L_MASK)``; absent parts count 0."""
    if not parts:
        raise ValueError("need at least one loss part")
    unknown = set(parts) - {"text", "fm", "mask"}
    if unknown:
        raise ValueError(f"unknown loss parts {sorted(unknown)}")
    if weights is None:
        w = dict(DEFAULT_WEIGHTS)
    elif isinstance(weights, Mapping):
        w = {**DEFAULT_WEIGHTS, **weights}
    else:
        w = dict(zip(("text", "act", "fm", "mask"), (float(x) for x in weights)))
    if any(v < 0 for v in w.values()):
        raise ValueError("loss weights must be >= 0")
    get = lambda k: float(parts.get(k, 0.0))
    return w["text"] * get("text") + w["act"] * (w["fm"] * get("fm") + w["mask"] * get("mask"))


# ---------------------------------------------------------------- codebook

def fit_codebook(vectors, size: int = 256, seed: int = 0, iters: int = 20) -> np.ndarray:
    """k-means centroids for motion tokens (codes are 1-based rows of the result)."""
    from scipy.cluster.vq import kmeans2

    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2 or X.shape[0] < size:
        raise ValueError("need at least `size` training vectors")
    centroids, _ = kmeans2(X, size, iter=iters, minit="++", seed=np.random.default_rng(seed))
    return centroids


def tokenize(codebook, vectors) -> np.ndarray:
    """Nearest-centroid codes in ``1..|C|``."""
    from scipy.cluster.vq import vq

    codes, _ = vq(np.asarray(vectors, dtype=float), np.asarray(codebook, dtype=float))
    return codes.astype(int) + 1


def save_codebook(path, codebook, seed: int | None = None) -> None:
    C = np.asarray(codebook, dtype=float)
    write_flat(path, {"kind": "codebook", "size": C.shape[0], "dim": C.shape[1], "seed": seed}, C.ravel())


def load_codebook(path) -> np.ndarray:
    header, flat = read_flat(path)
    return flat.reshape(header["size"], header["dim"])
