"""Evidence-based alignment: per-point evidence, belief masses, channel
reliability, the evidence loss, and a brute-force Dempster-Shafer oracle.

The differentiable chain (used in training) is the closed form:

    e_q   = act(max_q' <A_hat[q], T_hat[q']> / tau)        act in {exp, relu, softplus}
    b_q   = e_q / sum_k(e_k + 1)
    u     = Q / sum_k(e_k + 1)
    r     = sum_q b_q = 1 - u                              channel reliability

which is exactly the expected belief mass of a Dirichlet with
concentrations alpha = e + 1.  The combinatorial Dempster rule lives here
too, but only as an offline oracle (``MassFunction``/``dempster_combine``)
for verifying that closed form — it is never on the training path.

L_evi penalizes the squared gap between each channel's reliability and
the composed-to-target similarity, batch-averaged.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .geometry import prep_features

__all__ = [
    "channel_evidence",
    "belief_and_reliability",
    "loss_evi",
    "evidence_to_dirichlet",
    "DirichletSummary",
    "MassFunction",
    "TotalConflictError",
    "dempster_combine",
    "combine_iterated",
    "combine_brute_force",
    "oracle_selftest",
]


# ---------------------------------------------------------------------------
# differentiable chain (tape path)


def channel_evidence(anchor: Tensor, f_t: Tensor, cfg: RunConfig, diag: dict | None = None) -> Tensor:
    """Per-point evidence (Q, 1) that the anchor's points match the target.

    Rows of both matrices are L2-normalized before the dot products, so
    the activation argument is bounded by 1/tau regardless of feature
    scale; ``exp`` therefore cannot overflow.  ``max`` takes the
    lowest-index subgradient at ties.
    """
    ah = ad.rowwise_l2_normalize(anchor, eps=cfg.norm_eps, guarded=True, diag=diag)
    th = ad.rowwise_l2_normalize(f_t, eps=cfg.norm_eps, guarded=True, diag=diag)
    best, _ = ad.max_over_axis(ad.matmul(ah, ad.transpose(th)), axis=1)
    z = ad.scale(best, 1.0 / cfg.tau)
    if cfg.evi_activation == "exp":
        return ad.exp(z)
    if cfg.evi_activation == "relu":
        return ad.relu(z)
    return ad.softplus(z)


def belief_and_reliability(e: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Belief masses, vacuity, and reliability from evidence e >= 0.

    b_q = e_q / sum(e + 1), u = Q / sum(e + 1), r = sum_q b_q.  By
    construction sum(b) + u = 1, so r = 1 - u and r lies in [0, 1).
    """
    q = e.shape[0]
    if e.shape[1] != 1:
        raise ad.ShapeError(f"belief_and_reliability: evidence must be (Q, 1), got {e.shape}")
    denom = ad.add_scalar(ad.sum_all(e), float(q))
    b = ad.div(e, ad.repeat_row(denom, q))
    u = ad.div(ad.scalar(float(q)), denom)
    r = ad.sum_all(b)
    return b, u, r


def loss_evi(
    rel_r: list[Tensor | None],
    rel_m: list[Tensor | None],
    target_sims: list[Tensor],
    cfg: RunConfig,
) -> Tensor:
    """Mean over the batch of the active channels' squared reliability gaps.

    ``rel_*[i]`` may be None when that evidence stream is ablated
    (wo_evi_ref / wo_evi_mod); the corresponding term is simply absent.
    The stop-gradient switch detaches one side of the comparison.
    """
    b = len(target_sims)
    total: Tensor | None = None
    for i in range(b):
        s = target_sims[i]
        if cfg.evi_stop_grad == "similarity":
            s = ad.stop_gradient(s)
        for rel in (rel_r[i], rel_m[i]):
            if rel is None:
                continue
            if cfg.evi_stop_grad == "reliability":
                rel = ad.stop_gradient(rel)
            gap = ad.sub(rel, s)
            term = ad.mul(gap, gap)
            total = term if total is None else ad.add(total, term)
    if total is None:
        return ad.scalar(0.0)
    return ad.scale(total, 1.0 / b)


# ---------------------------------------------------------------------------
# Dirichlet view (numpy, for cross-checks and reporting)


@dataclass
class DirichletSummary:
    alpha: np.ndarray
    total_strength: float
    reliability: float


def evidence_to_dirichlet(e: np.ndarray) -> DirichletSummary:
    """Map evidence to Dirichlet concentrations: alpha = e + 1.

    ``reliability = 1 - Q / total_strength`` is an independent route to
    the same number ``belief_and_reliability`` produces by summing belief
    masses; tests pin the two routes together.
    """
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    if (e < 0).any():
        raise ValueError("evidence_to_dirichlet: evidence must be non-negative")
    alpha = e + 1.0
    total = float(alpha.sum())
    return DirichletSummary(alpha=alpha, total_strength=total, reliability=1.0 - len(e) / total)


# ---------------------------------------------------------------------------
# Dempster-Shafer oracle (offline only)


class TotalConflictError(ValueError):
    """Combination rejected: the sources are in total conflict (K = 1)."""


class MassFunction:
    """A belief mass assignment over the non-empty subsets of a small frame.

    Masses are stored sparsely as ``frozenset -> float`` over focal
    elements only.  Frames are tuples of hashables with at most a handful
    of elements — this is an oracle for unit tests, not a production
    fusion engine.
    """

    def __init__(self, frame, masses: dict[frozenset, float], tol: float = 1e-9):
        self.frame = frozenset(frame)
        if not self.frame:
            raise ValueError("MassFunction: frame must be non-empty")
        clean: dict[frozenset, float] = {}
        total = 0.0
        for subset, mass in masses.items():
            fs = frozenset(subset)
            if not fs:
                raise ValueError("MassFunction: the empty set cannot carry mass")
            if not fs <= self.frame:
                raise ValueError(f"MassFunction: focal element {set(fs)} outside frame {set(self.frame)}")
            if mass < -tol:
                raise ValueError(f"MassFunction: negative mass {mass} on {set(fs)}")
            if mass > 0.0:
                clean[fs] = clean.get(fs, 0.0) + float(mass)
            total += float(mass)
        if abs(total - 1.0) > tol:
            raise ValueError(f"MassFunction: masses sum to {total}, expected 1")
        self.masses = clean

    def __getitem__(self, subset) -> float:
        return self.masses.get(frozenset(subset), 0.0)

    def items(self):
        return self.masses.items()

    def __repr__(self) -> str:
        inner = ", ".join(f"{sorted(k)}: {v:.6f}" for k, v in sorted(self.masses.items(), key=lambda kv: sorted(kv[0])))
        return f"MassFunction({{{inner}}})"


def dempster_combine(m1: MassFunction, m2: MassFunction) -> tuple[MassFunction, float]:
    """Dempster's rule for two sources on a shared frame.

    m(A) = (1 / (1 - K)) * sum over B ∩ C = A of m1(B) m2(C), with
    K the mass of conflicting (empty-intersection) pairs.  Total conflict
    (K = 1) has no defined combination and raises.
    """
    if m1.frame != m2.frame:
        raise ValueError("dempster_combine: frames differ")
    combined: dict[frozenset, float] = {}
    conflict = 0.0
    for b, mb in m1.items():
        for c, mc in m2.items():
            inter = b & c
            w = mb * mc
            if inter:
                combined[inter] = combined.get(inter, 0.0) + w
            else:
                conflict += w
    if 1.0 - conflict <= 1e-12:
        raise TotalConflictError(f"total conflict between sources (K = {conflict})")
    norm = 1.0 - conflict
    return MassFunction(m1.frame, {k: v / norm for k, v in combined.items()}), conflict


def combine_iterated(sources: list[MassFunction]) -> MassFunction:
    """Left-to-right pairwise fusion of several sources."""
    if not sources:
        raise ValueError("combine_iterated: need at least one source")
    out = sources[0]
    for m in sources[1:]:
        out, _ = dempster_combine(out, m)
    return out


def combine_brute_force(sources: list[MassFunction]) -> tuple[MassFunction, float]:
    """One-shot combination: enumerate every tuple of focal elements.

    The independent oracle for ``combine_iterated`` — n-way products and a
    single normalization at the end, no pairwise shortcuts.
    """
    if not sources:
        raise ValueError("combine_brute_force: need at least one source")
    frame = sources[0].frame
    for m in sources:
        if m.frame != frame:
            raise ValueError("combine_brute_force: frames differ")
    combined: dict[frozenset, float] = {}
    conflict = 0.0
    for picks in itertools.product(*(list(m.items()) for m in sources)):
        inter = frame
        weight = 1.0
        for subset, mass in picks:
            inter = inter & subset
            weight *= mass
        if inter:
            combined[inter] = combined.get(inter, 0.0) + weight
        else:
            conflict += weight
    if 1.0 - conflict <= 1e-12:
        raise TotalConflictError(f"total conflict across sources (K = {conflict})")
    norm = 1.0 - conflict
    return MassFunction(frame, {k: v / norm for k, v in combined.items()}), conflict


def _random_mass(frame: frozenset, g: np.random.Generator) -> MassFunction:
    subsets = [frozenset(c) for r in range(1, len(frame) + 1) for c in itertools.combinations(sorted(frame), r)]
    count = int(g.integers(1, len(subsets) + 1))
    chosen = [subsets[i] for i in g.choice(len(subsets), size=count, replace=False)]
    weights = g.random(count) + 1e-3
    weights = weights / weights.sum()
    return MassFunction(frame, dict(zip(chosen, weights)))


def oracle_selftest(seed: int = 0, cases: int = 50) -> dict:
    """Randomized agreement suite between the two combination routes.

    Checks, per random case (frames of 2-4 elements, 2-5 sources):
    iterated == brute force on every focal element, commutativity of the
    pairwise rule, mass normalization, and a vacuous source acting as the
    neutral element.  Returns a report with the worst deviation observed.
    """
    g = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        size = int(g.integers(2, 5))
        frame = frozenset(f"s{i}" for i in range(size))
        n_sources = int(g.integers(2, 6))
        sources = [_random_mass(frame, g) for _ in range(n_sources)]
        try:
            iterated = combine_iterated(sources)
            oneshot, _ = combine_brute_force(sources)
        except TotalConflictError:
            continue
        keys = set(iterated.masses) | set(oneshot.masses)
        for k in keys:
            worst = max(worst, abs(iterated[k] - oneshot[k]))
        # commutativity of the pairwise rule
        ab, k_ab = dempster_combine(sources[0], sources[1])
        ba, k_ba = dempster_combine(sources[1], sources[0])
        worst = max(worst, abs(k_ab - k_ba))
        for k in set(ab.masses) | set(ba.masses):
            worst = max(worst, abs(ab[k] - ba[k]))
        # normalization
        worst = max(worst, abs(sum(iterated.masses.values()) - 1.0))
        # vacuous neutral element
        vac = MassFunction(frame, {frame: 1.0})
        with_vac, k_vac = dempster_combine(sources[0], vac)
        worst = max(worst, abs(k_vac))
        for k in set(with_vac.masses) | set(sources[0].masses):
            worst = max(worst, abs(with_vac[k] - sources[0][k]))
    # the two-source worked example: K = 0.46, m(A) = 0.42/0.54
    m1 = MassFunction(("A", "notA"), {frozenset({"A"}): 0.6, frozenset({"notA"}): 0.4})
    m2 = MassFunction(("A", "notA"), {frozenset({"A"}): 0.7, frozenset({"notA"}): 0.3})
    fused, conflict = dempster_combine(m1, m2)
    worst = max(worst, abs(conflict - 0.46))
    worst = max(worst, abs(fused[{"A"}] - 0.42 / 0.54))
    return {"cases": cases, "seed": seed, "max_deviation": worst, "passed": bool(worst < 1e-12)}
