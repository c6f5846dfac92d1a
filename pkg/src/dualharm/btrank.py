"""Bradley-Terry preference fitting: maximum-likelihood scores from pairwise
win counts under p(i beats j) = pi_i / (pi_i + pi_j).

Fitting uses minorization-maximization sweeps (Hunter's algorithm), which
increase the likelihood monotonically and need no step size. Scores are
reported on the log scale, shifted to mean zero -- the model is invariant to
a common shift, so the mean-zero representative makes results comparable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 10_000


class DegenerateTallyError(ValueError):
    """The MLE does not exist (some method never wins / never loses, or the
    comparison graph is not strongly connected)."""


@dataclass
class PairwiseTally:
    methods: list[str]
    wins: np.ndarray  # wins[i][j] = number of times method i beat method j

    def __post_init__(self):
        self.wins = np.asarray(self.wins)
        k = len(self.methods)
        if len(set(self.methods)) != k:
            raise ValueError("method names must be unique")
        if self.wins.shape != (k, k):
            raise ValueError(f"wins must be {k}x{k}, got {self.wins.shape}")
        if not np.issubdtype(self.wins.dtype, np.integer):
            if not np.all(self.wins == np.round(self.wins)):
                raise ValueError("win counts must be integers")
            self.wins = self.wins.astype(np.int64)
        if np.any(self.wins < 0):
            raise ValueError("win counts must be non-negative")
        if np.any(np.diag(self.wins) != 0):
            raise ValueError("diagonal (self-comparisons) must be zero")


@dataclass
class BTScores:
    methods: list[str]
    scores: np.ndarray  # log scale, mean zero

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.scores) != len(self.methods):
            raise ValueError("one score per method required")
        if len(self.scores) and abs(self.scores.sum()) > 1e-9 * max(1, len(self.scores)):
            raise ValueError("scores must be normalized to mean zero")

    def as_dict(self) -> dict[str, float]:
        return {m: float(s) for m, s in zip(self.methods, self.scores)}


def _check_fittable(tally: PairwiseTally) -> None:
    wins = tally.wins
    k = len(tally.methods)
    row = wins.sum(axis=1)
    col = wins.sum(axis=0)
    for i in range(k):
        if row[i] == 0:
            raise DegenerateTallyError(
                f"method {tally.methods[i]!r} never wins; its score diverges to -inf"
            )
        if col[i] == 0:
            raise DegenerateTallyError(
                f"method {tally.methods[i]!r} never loses; its score diverges to +inf"
            )

    # the win digraph must be strongly connected, otherwise one group beats
    # another without return comparisons and the score gap is unbounded
    adj = wins > 0

    def reachable(transpose: bool) -> set[int]:
        mat = adj.T if transpose else adj
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in np.nonzero(mat[u])[0]:
                if int(v) not in seen:
                    seen.add(int(v))
                    stack.append(int(v))
        return seen

    fwd, bwd = reachable(False), reachable(True)
    if len(fwd) != k or len(bwd) != k:
        missing = sorted(set(range(k)) - (fwd & bwd))
        name = tally.methods[missing[0]]
        raise DegenerateTallyError(
            f"comparison graph is not strongly connected; no win path through "
            f"method {name!r} (MLE diverges)"
        )


def log_likelihood(tally: PairwiseTally, log_scores: np.ndarray) -> float:
    pi = np.exp(log_scores)
    total = 0.0
    k = len(tally.methods)
    for i in range(k):
        for j in range(k):
            w = tally.wins[i, j]
            if w:
                total += w * (log_scores[i] - np.log(pi[i] + pi[j]))
    return float(total)


def fit(tally: PairwiseTally, max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL) -> BTScores:
    """Maximum-likelihood scores via MM sweeps.

    pi_i <- W_i / sum_j n_ij / (pi_i + pi_j), where W_i is method i's total
    wins and n_ij the number of i-vs-j comparisons; iterated until the
    largest log-score change falls below ``tol``. Raises
    :class:`DegenerateTallyError` when the MLE does not exist.
    """
    _check_fittable(tally)
    wins = tally.wins.astype(np.float64)
    k = len(tally.methods)
    totals = wins + wins.T  # n_ij
    w_row = wins.sum(axis=1)
    pi = np.ones(k, dtype=np.float64)
    prev_ll = log_likelihood(tally, np.log(pi))
    for _ in range(max_iter):
        # diagonal terms vanish because n_ii == 0 and pi > 0 throughout
        denom = (totals / (pi[:, None] + pi[None, :])).sum(axis=1)
        new_pi = w_row / denom
        new_pi /= np.exp(np.mean(np.log(new_pi)))
        delta = np.abs(np.log(new_pi) - np.log(pi)).max()
        pi = new_pi
        ll = log_likelihood(tally, np.log(pi))
        assert ll >= prev_ll - 1e-9 * (1.0 + abs(prev_ll)), "MM likelihood decreased"
        prev_ll = ll
        if delta < tol:
            break
    log_scores = np.log(pi)
    log_scores -= log_scores.mean()
    return BTScores(methods=list(tally.methods), scores=log_scores)


def rank(scores: BTScores) -> list[str]:
    """Method names ordered best-first; ties broken by name."""
    order = sorted(zip(scores.methods, scores.scores), key=lambda ms: (-ms[1], ms[0]))
    return [m for m, _ in order]


def sample_tally(
    methods: list[str], true_scores, comparisons: int, seed: int = 0
) -> PairwiseTally:
    """Simulate a preference study: ``comparisons`` pairwise outcomes drawn
    from ground-truth log scores, spread evenly over the method pairs."""
    true_scores = np.asarray(true_scores, dtype=np.float64)
    k = len(methods)
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    per_pair, extra = divmod(comparisons, len(pairs))
    rng = np.random.default_rng(seed)
    wins = np.zeros((k, k), dtype=np.int64)
    for idx, (i, j) in enumerate(pairs):
        n = per_pair + (1 if idx < extra else 0)
        p = 1.0 / (1.0 + np.exp(true_scores[j] - true_scores[i]))
        w = int(rng.binomial(n, p))
        wins[i, j] = w
        wins[j, i] = n - w
    return PairwiseTally(methods=list(methods), wins=wins)


# ---------------------------------------------------------------------------
# tally / scores I/O
# ---------------------------------------------------------------------------


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def load_tally(path) -> PairwiseTally:
    """Read a tally file.

    Matrix form: a header line of method names followed by a k x k count
    matrix. Long form: one ``winner loser count`` record per line. Lines
    starting with '#' are comments. The format is detected from the first
    data line (all-name tokens mean a matrix header).
    """
    lines = [
        ln.strip()
        for ln in Path(path).read_text().splitlines()
        if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not lines:
        raise ValueError(f"tally file {path} is empty")
    first = lines[0].replace(",", " ").split()
    if not any(_is_number(tok) for tok in first):
        methods = first
        k = len(methods)
        if len(lines) != k + 1:
            raise ValueError(f"matrix tally needs {k} rows after the header, got {len(lines) - 1}")
        rows = []
        for ln in lines[1:]:
            row = [int(tok) for tok in ln.replace(",", " ").split()]
            if len(row) != k:
                raise ValueError(f"matrix row {ln!r} does not have {k} entries")
            rows.append(row)
        return PairwiseTally(methods=methods, wins=np.array(rows, dtype=np.int64))

    counts: dict[tuple[str, str], int] = {}
    names: list[str] = []
    for ln in lines:
        parts = ln.replace(",", " ").split()
        if len(parts) != 3:
            raise ValueError(f"long-form line {ln!r} must be 'winner loser count'")
        winner, loser, num = parts[0], parts[1], parts[2]
        if winner == loser:
            raise ValueError(f"self-comparison in line {ln!r}")
        for name in (winner, loser):
            if name not in names:
                names.append(name)
        counts[(winner, loser)] = counts.get((winner, loser), 0) + int(num)
    wins = np.zeros((len(names), len(names)), dtype=np.int64)
    index = {m: i for i, m in enumerate(names)}
    for (winner, loser), num in counts.items():
        wins[index[winner], index[loser]] = num
    return PairwiseTally(methods=names, wins=wins)


def save_scores(scores: BTScores, path) -> None:
    rows = [
        {"rank": i + 1, "method": m, "score": float(scores.as_dict()[m])}
        for i, m in enumerate(rank(scores))
    ]
    Path(path).write_text("\n".join(json.dumps(r) for r in rows) + "\n")


def format_scores(scores: BTScores) -> str:
    ranked = rank(scores)
    width = max(len(m) for m in ranked)
    lines = [f"{i + 1:>2}  {m:<{width}}  {scores.as_dict()[m]: .4f}" for i, m in enumerate(ranked)]
    return "\n".join(lines)
