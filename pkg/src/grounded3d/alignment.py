"""Phrase/query alignment math on explicit matrices.

Shapes used throughout::

    S_mask  (points,  queries)   per-point mask logits
    S_text  (phrases, queries)   phrase-to-query logits (temperature-scaled)
    S_ref   (referents, queries) referent-to-query logits (temperature-scaled)
    gt      (points,  instances) binary ground-truth masks
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, log_expit

TEMPERATURE = 0.1
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
DICE_EPS = 1.0
LAMBDA_CLS = 1.0
REFERENT_IOU = 0.3
DECODE_TAU = 0.3
CLASP_QUERIES = 150
INSTRUCTION_QUERIES = 100

EMBEDDING_ROLES = ("P_mask", "Q_mask", "P_text", "Q_text", "R_text")
SIMILARITY_ROLES = ("S_mask", "S_text", "S_ref")
_PAIR_ROLE = {
    ("P_mask", "Q_mask"): "S_mask",
    ("P_text", "Q_text"): "S_text",
    ("R_text", "Q_text"): "S_ref",
}


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    role: str
    data: np.ndarray

    def __post_init__(self):
        if self.role not in EMBEDDING_ROLES:
            raise ValueError(f"unknown embedding role {self.role!r}")
        arr = np.array(self.data, dtype=float, ndmin=2)
        if arr.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{self.role} has non-finite entries")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    role: str
    data: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        if self.role not in SIMILARITY_ROLES:
            raise ValueError(f"unknown similarity role {self.role!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        object.__setattr__(self, "data", np.asarray(self.data, dtype=float))


def scaled_similarity(a, b, eta: float | None = None, role: str | None = None) -> SimilarityMatrix:
    """``a @ b.T / eta``. Role is inferred from embedding roles when both are tagged.

    Without an explicit ``eta``, S_text and S_ref use TEMPERATURE and S_mask is
    left unscaled, since mask logits go straight into sigmoid losses.
    """
    A = a.data if isinstance(a, EmbeddingMatrix) else np.asarray(a, dtype=float)
    B = b.data if isinstance(b, EmbeddingMatrix) else np.asarray(b, dtype=float)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"inner dimensions differ: {A.shape} vs {B.shape}")
    if role is None:
        if isinstance(a, EmbeddingMatrix) and isinstance(b, EmbeddingMatrix):
            role = _PAIR_ROLE.get((a.role, b.role))
            if role is None:
                raise ValueError(f"no similarity defined for {a.role} x {b.role}")
        else:
            role = "S_text"
    if eta is None:
        eta = 1.0 if role == "S_mask" else TEMPERATURE
    if not eta > 0:
        raise ValueError("temperature must be positive")
    return SimilarityMatrix(role, A @ B.T / eta, eta)


# -- matching ------------------------------------------------------------------

@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    unmatched_rows: tuple[int, ...]
    unmatched_cols: tuple[int, ...]
    cost: float

    def __post_init__(self):
        rows = [r for r, _ in self.pairs]
        cols = [c for _, c in self.pairs]
        if len(set(rows)) != len(rows) or len(set(cols)) != len(cols):
            raise ValueError("assignment is not injective")

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


def _hungarian_square(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian method on a square matrix.

    Returns (row->col, u, v) with u, v optimal dual potentials.
    """
    n = cost.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: 1-based row holding column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_cols = np.nonzero(used)[0]
            u[p[used_cols]] += delta
            v[used_cols] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic_refine(tight: np.ndarray, match: np.ndarray) -> np.ndarray:
    """Among perfect matchings of the tight-edge graph, return the one whose
    row->col sequence is lexicographically smallest."""
    n = len(match)
    match = match.copy()
    owner = np.empty(n, dtype=int)
    owner[match] = np.arange(n)
    adj = [np.nonzero(tight[i])[0] for i in range(n)]

    for i in range(n):
        for j in adj[i]:
            if j >= match[i]:
                break
            r = owner[j]
            if r < i:
                continue
            target = match[i]
            # alternating path: row r gives up j, finds another column, ... ending at `target`
            seen = np.zeros(n, dtype=bool)
            parent: dict[int, tuple[int, int]] = {}
            stack = [r]
            seen[r] = True
            found = False
            while stack and not found:
                row = stack.pop()
                for c in adj[row]:
                    if c == j:
                        continue
                    if c == target:
                        parent[-1] = (row, c)
                        found = True
                        break
                    nxt = owner[c]
                    if nxt > i and not seen[nxt]:
                        seen[nxt] = True
                        parent[nxt] = (row, c)
                        stack.append(nxt)
            if not found:
                continue
            # rotate along the path
            row, c = parent[-1]
            while True:
                match[row] = c
                owner[c] = row
                if row == r:
                    break
                row, c = parent[row]
            match[i] = j
            owner[j] = i
            break
    return match


def hungarian_match(cost) -> Assignment:
    """Minimum-cost assignment; ties go to the lowest row, then lowest column.

    Rectangular inputs are padded with zero-cost dummy rows/columns.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    n, m = C.shape
    if n == 0 or m == 0:
        return Assignment((), tuple(range(n)), tuple(range(m)), 0.0)
    N = max(n, m)
    sq = np.zeros((N, N))
    sq[:n, :m] = C
    match, u, v = _hungarian_square(sq)
    base_cost = float(sum(sq[i, match[i]] for i in range(N)))
    scale = max(1.0, float(np.abs(sq).max()))
    reduced = sq - u[:, None] - v[None, :]
    tight = reduced <= 1e-9 * scale * N
    refined = _lexicographic_refine(tight, match)
    if float(sum(sq[i, refined[i]] for i in range(N))) <= base_cost:
        match = refined
    pairs = tuple((i, int(match[i])) for i in range(n) if match[i] < m)
    matched_cols = {c for _, c in pairs}
    total = 0.0
    for r, c in pairs:
        total += C[r, c]
    return Assignment(
        pairs,
        tuple(i for i in range(n) if match[i] >= m),
        tuple(j for j in range(m) if j not in matched_cols),
        float(total),
    )


# -- losses --------------------------------------------------------------------

def _focal_terms(x: np.ndarray, gamma: float, alpha: float):
    p = expit(x)
    q = expit(-x)
    logp = log_expit(x)
    logq = log_expit(-x)
    pos = -alpha * q ** gamma * logp
    neg = -(1 - alpha) * p ** gamma * logq
    dpos = alpha * (gamma * p * q ** gamma * logp - q ** (gamma + 1))
    dneg = (1 - alpha) * (p ** (gamma + 1) - gamma * p ** gamma * q * logq)
    return pos, neg, dpos, dneg


def sigmoid_focal_loss_with_grad(logits, targets, gamma: float = FOCAL_GAMMA,
                                 alpha: float = FOCAL_ALPHA, ignore=None):
    x = np.asarray(logits, dtype=float)
    t = np.asarray(targets, dtype=float)
    if x.shape != t.shape:
        raise ValueError(f"logits {x.shape} and targets {t.shape} differ in shape")
    keep = np.ones(x.shape, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        return 0.0, np.zeros_like(x)
    pos, neg, dpos, dneg = _focal_terms(x, gamma, alpha)
    per = np.where(t > 0.5, pos, neg)
    grad = np.where(t > 0.5, dpos, dneg)
    per = np.where(keep, per, 0.0)
    grad = np.where(keep, grad, 0.0) / count
    return float(per.sum() / count), grad


def sigmoid_focal_loss(logits, targets, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA,
                       ignore=None) -> float:
    """Mean over non-ignored entries of ``-alpha_t (1 - p_t)^gamma log p_t``."""
    return sigmoid_focal_loss_with_grad(logits, targets, gamma, alpha, ignore)[0]


def dice_loss_with_grad(logits, target_masks, eps: float = DICE_EPS):
    x = np.atleast_2d(np.asarray(logits, dtype=float))
    t = np.atleast_2d(np.asarray(target_masks, dtype=float))
    if x.shape != t.shape:
        raise ValueError(f"logits {x.shape} and targets {t.shape} differ in shape")
    if x.shape[0] == 0:
        return 0.0, np.zeros_like(x)
    p = expit(x)
    num = 2.0 * (p * t).sum(axis=1) + eps
    den = p.sum(axis=1) + t.sum(axis=1) + eps
    loss = 1.0 - num / den
    dp = -(2.0 * t * den[:, None] - num[:, None]) / den[:, None] ** 2
    grad = dp * p * (1.0 - p) / x.shape[0]
    return float(loss.mean()), grad


def dice_loss(logits, target_masks, eps: float = DICE_EPS) -> float:
    """Mean over rows of ``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)``."""
    return dice_loss_with_grad(logits, target_masks, eps)[0]


def pairwise_mask_cost(S_mask, gt_masks, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA,
                       eps: float = DICE_EPS) -> np.ndarray:
    """(instances, queries) matrix of focal + dice between each gt mask and query mask."""
    x = np.asarray(S_mask, dtype=float)
    T = np.asarray(gt_masks, dtype=float)
    n_points = x.shape[0]
    pos, neg, _, _ = _focal_terms(x, gamma, alpha)
    focal = (T.T @ pos + (1.0 - T).T @ neg) / n_points
    p = expit(x)
    num = 2.0 * (T.T @ p) + eps
    den = T.sum(axis=0)[:, None] + p.sum(axis=0)[None, :] + eps
    return focal + (1.0 - num / den)


@dataclass(frozen=True, eq=False)
class CorrespondenceTargets:
    role: str  # T_text | T_ref
    targets: np.ndarray
    ignore: np.ndarray | None = None

    def __post_init__(self):
        if self.role not in ("T_text", "T_ref"):
            raise ValueError(f"unknown target role {self.role!r}")
        t = np.asarray(self.targets)
        if not np.all((t == 0) | (t == 1)):
            raise ValueError("targets must be binary")
        object.__setattr__(self, "targets", t.astype(float))
        ign = np.zeros(t.shape, dtype=bool) if self.ignore is None else np.asarray(self.ignore, dtype=bool)
        if ign.shape != t.shape:
            raise ValueError("ignore mask shape differs from targets")
        object.__setattr__(self, "ignore", ign)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.targets.shape


@dataclass(frozen=True)
class LossReport:
    total: float
    components: dict = field(default_factory=dict)
    lambda_cls: float = LAMBDA_CLS

    def to_json(self) -> dict:
        return {"total": self.total, "components": dict(self.components), "lambda_cls": self.lambda_cls}


def phrase_targets_to_queries(phrase_targets: CorrespondenceTargets, assignment: Assignment,
                              n_queries: int) -> CorrespondenceTargets:
    """Carry (phrases, instances) targets onto query columns through the matching.

    Unmatched queries are negatives for every phrase.
    """
    P = phrase_targets.shape[0]
    T = np.zeros((P, n_queries))
    ign = np.zeros((P, n_queries), dtype=bool)
    for inst, q in assignment.pairs:
        T[:, q] = phrase_targets.targets[:, inst]
        ign[:, q] = phrase_targets.ignore[:, inst]
    return CorrespondenceTargets(phrase_targets.role, T, ign)


def clasp_loss(
    S_mask,
    S_text,
    gt_masks,
    phrase_targets: CorrespondenceTargets,
    lambda_cls: float = LAMBDA_CLS,
    gamma: float = FOCAL_GAMMA,
    alpha: float = FOCAL_ALPHA,
    eps: float = DICE_EPS,
) -> LossReport:
    """Mask loss over Hungarian-matched (instance, query) pairs plus weighted phrase loss.

    ``phrase_targets`` is (phrases, instances); it is moved onto queries with the
    same matching that supervises the masks.
    """
    x = S_mask.data if isinstance(S_mask, SimilarityMatrix) else np.asarray(S_mask, dtype=float)
    s = S_text.data if isinstance(S_text, SimilarityMatrix) else np.asarray(S_text, dtype=float)
    gt = np.asarray(gt_masks, dtype=float)
    n_inst, n_q = gt.shape[1], x.shape[1]
    if n_inst > n_q:
        raise ValueError(f"{n_inst} ground-truth instances but only {n_q} queries")
    if gt.shape[0] != x.shape[0]:
        raise ValueError("S_mask and gt_masks disagree on the number of points")
    if phrase_targets.shape != (s.shape[0], n_inst):
        raise ValueError(f"phrase targets must be (phrases, instances) = {(s.shape[0], n_inst)}")
    assignment = hungarian_match(pairwise_mask_cost(x, gt, gamma, alpha, eps))
    inst_idx = [i for i, _ in assignment.pairs]
    q_idx = [q for _, q in assignment.pairs]
    if assignment.pairs:
        matched_logits = x[:, q_idx].T
        matched_gt = gt[:, inst_idx].T
        focal = sigmoid_focal_loss(matched_logits, matched_gt, gamma, alpha)
        dice = dice_loss(matched_logits, matched_gt, eps)
    else:
        focal = dice = 0.0
    t_text = phrase_targets_to_queries(phrase_targets, assignment, n_q)
    cls = sigmoid_focal_loss(s, t_text.targets, gamma, alpha, t_text.ignore)
    total = focal + dice + lambda_cls * cls
    return LossReport(total, {"mask_focal": focal, "mask_dice": dice, "cls": cls}, lambda_cls)


def referent_positive_targets(query_masks, gt_mask: Iterable[int], threshold: float = REFERENT_IOU) -> list[str]:
    """Per query: ``positive`` iff its mask IoU with the object strictly exceeds ``threshold``."""
    Q = np.asarray(query_masks, dtype=bool)
    g = np.zeros(Q.shape[0], dtype=bool)
    g[list(gt_mask)] = True
    inter = (Q & g[:, None]).sum(axis=0)
    union = (Q | g[:, None]).sum(axis=0)
    labels = []
    for a, b in zip(inter, union):
        # exact rational comparison so that 3/10 is not "above" 0.3
        positive = b > 0 and a * 1_000_000 > round(threshold * 1_000_000) * b
        labels.append("positive" if positive else "ignored")
    return labels


def referent_targets(query_masks, referent_objects: Sequence[Sequence[Iterable[int]]],
                     threshold: float = REFERENT_IOU) -> CorrespondenceTargets:
    """T_ref for referents that each cover one or more objects (point sets).

    A query is positive for a referent when it is positive for any of its
    objects; every other entry is ignored rather than treated as negative.
    """
    Q = np.asarray(query_masks, dtype=bool)
    T = np.zeros((len(referent_objects), Q.shape[1]))
    for k, objects in enumerate(referent_objects):
        for obj in objects:
            labels = referent_positive_targets(Q, obj, threshold)
            T[k] = np.maximum(T[k], [lab == "positive" for lab in labels])
    return CorrespondenceTargets("T_ref", T, T == 0)


def referent_loss(S_ref, T_ref: CorrespondenceTargets, gamma: float = FOCAL_GAMMA,
                  alpha: float = FOCAL_ALPHA) -> float:
    s = S_ref.data if isinstance(S_ref, SimilarityMatrix) else np.asarray(S_ref, dtype=float)
    return sigmoid_focal_loss(s, T_ref.targets, gamma, alpha, T_ref.ignore)


def llm_loss(lang_loss: float, S_ref, T_ref: CorrespondenceTargets) -> LossReport:
    """Language loss (computed elsewhere) plus the referent loss."""
    ref = referent_loss(S_ref, T_ref)
    return LossReport(float(lang_loss) + ref, {"lang": float(lang_loss), "ref": ref})


# -- decoding --------------------------------------------------------------------

def decode_phrase_masks(scores, S_mask, mode: str = "one_to_one", tau: float = DECODE_TAU) -> list[frozenset[int]]:
    """Point sets per phrase (or referent) from its query scores.

    one_to_one picks the argmax query; one_to_many takes every query with
    sigmoid score >= tau. A query contributes points with sigmoid(mask) > 0.5.
    """
    s = scores.data if isinstance(scores, SimilarityMatrix) else np.asarray(scores, dtype=float)
    m = S_mask.data if isinstance(S_mask, SimilarityMatrix) else np.asarray(S_mask, dtype=float)
    if s.shape[1] != m.shape[1]:
        raise ValueError("scores and S_mask disagree on the number of queries")
    query_points = m > 0.0  # sigmoid(x) > 0.5
    out = []
    for row in s:
        if mode == "one_to_one":
            chosen = [int(np.argmax(row))]
        elif mode == "one_to_many":
            chosen = [int(q) for q in np.nonzero(expit(row) >= tau)[0]]
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        pts: set[int] = set()
        for q in chosen:
            pts.update(int(i) for i in np.nonzero(query_points[:, q])[0])
        out.append(frozenset(pts))
    return out


# -- gradient verification -------------------------------------------------------

def similarity_focal_with_grad(A, B, targets, eta: float = TEMPERATURE, ignore=None):
    """Focal loss of ``A @ B.T / eta`` with gradients for A and B."""
    S = A @ B.T / eta
    value, g = sigmoid_focal_loss_with_grad(S, targets, ignore=ignore)
    return value, (g @ B / eta, g.T @ A / eta)


def grad_check(loss_fn: Callable, inputs: Sequence[np.ndarray], h: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``loss_fn(*inputs)`` returns ``(value, grad)`` for one input or
    ``(value, (grad_1, ..., grad_k))`` for several. The relative gap of an
    entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 0 < h <= 1e-3:
        raise ValueError("step must lie in (0, 1e-3]")
    inputs = [np.array(x, dtype=float) for x in inputs]
    _, grads = loss_fn(*inputs)
    if len(inputs) == 1 and not isinstance(grads, (tuple, list)):
        grads = (grads,)
    worst = 0.0
    for k, x in enumerate(inputs):
        analytic = np.asarray(grads[k], dtype=float)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            f_plus = loss_fn(*inputs)[0]
            x[idx] = orig - h
            f_minus = loss_fn(*inputs)[0]
            x[idx] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            a = analytic[idx]
            gap = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, gap)
    return worst


# -- matrix containers -------------------------------------------------------------

_MAGIC = b"G3DM"
_HEADER = struct.Struct("<4sB16sQQ")


def save_matrix(path: str | Path, data, role: str = "") -> None:
    """Binary container: magic, version, 16-byte role tag, rows, cols, then row-major float64."""
    arr = np.ascontiguousarray(np.asarray(data, dtype="<f8"))
    if arr.ndim != 2:
        raise ValueError("only 2-D matrices are stored")
    tag = role.encode("ascii")
    if len(tag) > 16:
        raise ValueError("role tag longer than 16 bytes")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, 1, tag.ljust(16, b"\0"), arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes(order="C"))


def load_matrix(path: str | Path) -> tuple[np.ndarray, str]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("file too short for a matrix header")
    magic, version, tag, rows, cols = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise ValueError("not a matrix container")
    body = raw[_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"expected {rows * cols * 8} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype="<f8").reshape(rows, cols).copy()
    return arr, tag.rstrip(b"\0").decode("ascii")


def matrix_to_json(data, role: str = "") -> str:
    return json.dumps({"role": role, "data": np.asarray(data, dtype=float).tolist()})


def matrix_from_json(text: str) -> tuple[np.ndarray, str]:
    d = json.loads(text)
    return np.array(d["data"], dtype=float, ndmin=2), d.get("role", "")
