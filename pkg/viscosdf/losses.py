"""Reconstruction losses on network jets and the viscosity decay schedule.

All discrete losses are arithmetic means over the batch, so loss weights do
not depend on batch size. The visco-Eikonal residual is

    r = |grad u| - 1 - eps * lap u

and reduces to the plain Eikonal residual at eps = 0.
"""

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import NonFiniteError
from .field_net import Jet2, JetAdjoint, JetBatch
from .models import LossWeights, ViscositySchedule

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossBreakdown:
    manifold: float
    nonmanifold: float
    eikonal_or_visco: float
    total: float
    epsilon_used: float


def _as_batch(jets: JetBatch | Sequence[Jet2]) -> JetBatch:
    batch = JetBatch.from_jets(jets)
    if len(batch) == 0:
        raise ValueError("loss of an empty batch is undefined")
    return batch


def visco_residual(jets: JetBatch | Sequence[Jet2], epsilon: float) -> np.ndarray:
    batch = _as_batch(jets)
    return batch.grad_norm() - 1.0 - epsilon * batch.laplacian


def manifold_loss(surface_jets: JetBatch | Sequence[Jet2]) -> float:
    return float(np.mean(np.abs(_as_batch(surface_jets).value)))


def nonmanifold_loss(offsurface_values, alpha_exp: float) -> float:
    values = np.asarray(offsurface_values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("loss of an empty batch is undefined")
    if alpha_exp <= 0:
        raise ValueError("alpha_exp must be positive")
    return float(np.mean(np.exp(-alpha_exp * np.abs(values))))


def eikonal_loss(jets: JetBatch | Sequence[Jet2], p: int) -> float:
    return viscoreg_loss(jets, 0.0, p)


def viscoreg_loss(jets: JetBatch | Sequence[Jet2], epsilon: float, p: int) -> float:
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    return float(np.mean(np.abs(visco_residual(jets, epsilon)) ** p))


def epsilon_at(schedule: ViscositySchedule, progress: float) -> float:
    """Viscosity at training progress in [0, 1]; 0 past the last breakpoint"""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    ts = np.array([t for t, _ in schedule.breakpoints])
    es = np.array([e for _, e in schedule.breakpoints])
    if schedule.interpolation == "linear":
        eps = float(np.interp(progress, ts, es, right=0.0))
    elif schedule.interpolation == "constant":
        eps = float(es[np.searchsorted(ts, progress, side="right") - 1])
    else:
        t_end = ts[-1]
        eps = float(es[0] * (1.0 - progress / t_end) ** 5) if progress < t_end else 0.0
    return max(eps, 0.0)


def total_loss(
    weights: LossWeights,
    parts: tuple[float, float, float],
    epsilon_used: float = 0.0,
) -> LossBreakdown:
    """Weighted sum of (manifold, nonmanifold, eikonal-or-visco) terms"""
    manifold, nonmanifold, eik = parts
    total = weights.alpha_m * manifold + weights.alpha_nm * nonmanifold + weights.alpha_e * eik
    return LossBreakdown(
        manifold=float(manifold),
        nonmanifold=float(nonmanifold),
        eikonal_or_visco=float(eik),
        total=float(total),
        epsilon_used=float(epsilon_used),
    )


@dataclass(frozen=True)
class LossSpec:
    """Combined reconstruction loss as a jet objective.

    The manifold term acts on the "surface" group; the nonmanifold and the
    (visco-)Eikonal terms act on the "domain" group. With `viscous` off, the
    plain Eikonal term is used whatever `epsilon` says.
    """

    weights: LossWeights
    epsilon: float = 0.0
    viscous: bool = True

    @property
    def effective_epsilon(self) -> float:
        return self.epsilon if self.viscous else 0.0

    def __call__(
        self, jets: Mapping[str, JetBatch]
    ) -> tuple[LossBreakdown, dict[str, JetAdjoint]]:
        w = self.weights
        eps = self.effective_epsilon
        surface, domain = jets["surface"], jets["domain"]
        ns, nd = len(surface), len(domain)
        if ns == 0 or nd == 0:
            raise ValueError("loss of an empty batch is undefined")

        u_s = surface.value
        manifold = float(np.mean(np.abs(u_s)))

        u_d = domain.value
        decay = np.exp(-w.alpha_exp * np.abs(u_d))
        nonmanifold = float(np.mean(decay))

        norm = domain.grad_norm()
        r = norm - 1.0 - eps * domain.laplacian
        visco = float(np.mean(np.abs(r) ** w.p))

        for term, value in (("manifold", manifold), ("nonmanifold", nonmanifold), ("visco", visco)):
            if not np.isfinite(value):
                raise NonFiniteError(term, epsilon=eps)

        breakdown = total_loss(w, (manifold, nonmanifold, visco), epsilon_used=eps)

        surface_adj = JetAdjoint.zeros(ns, surface.grad.shape[1])
        surface_adj.value = w.alpha_m * np.sign(u_s) / ns

        domain_adj = JetAdjoint.zeros(nd, domain.grad.shape[1])
        domain_adj.value = -w.alpha_nm * w.alpha_exp * np.sign(u_d) * decay / nd
        if w.p == 1:
            d_r = np.sign(r)
        else:
            d_r = 2.0 * r
        d_r = w.alpha_e * d_r / nd
        unit = np.divide(
            domain.grad, norm[:, None], out=np.zeros_like(domain.grad), where=norm[:, None] > 0
        )
        domain_adj.grad = d_r[:, None] * unit
        domain_adj.laplacian = -eps * d_r
        return breakdown, {"surface": surface_adj, "domain": domain_adj}
