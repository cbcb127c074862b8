"""Stage-2 search: masked RGE gradient steps with a periodic mask refresh."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import ObjectiveFunction, RngStream, Vector
from .estimators import MU_RGE, rge_estimate
from .pruning import PruneMask, build_mask, fisher_diag, magnitude_mask

ETA = 1e-3
PRUNE_INTERVAL = 200


@dataclass(frozen=True)
class ZoState:
    w: Vector
    step: int
    mask: PruneMask
    eta: float = ETA
    last_grad_norm: float = float("nan")


def zo_step(state: ZoState, obj: ObjectiveFunction, mu_rge: float = MU_RGE, q: int = 1,
            stream: Optional[RngStream] = None, *, literal_eq4: bool = False,
            directions=None) -> ZoState:
    """w <- w - eta * g with g the masked RGE estimate (2q queries).

    On an estimation failure the exception propagates and ``state`` is
    untouched (states are immutable).
    """
    mask = None if state.mask.n_active == state.w.size else state.mask
    est = rge_estimate(obj, state.w, mu_rge, q, stream, mask,
                       literal_eq4=literal_eq4, directions=directions)
    w_new = state.w - state.eta * est.grad
    if not literal_eq4 and mask is not None:
        # the estimate is exactly zero there already; keep the bits untouched too
        w_new = np.where(mask.active, w_new, state.w)
    return replace(state, w=w_new, step=state.step + 1,
                   last_grad_norm=float(np.linalg.norm(est.grad)))


def refresh_due(step: int, T_c: int, K: int) -> bool:
    return step == T_c or (step > T_c and (step - T_c) % K == 0)


def maybe_refresh_mask(state: ZoState, obj: ObjectiveFunction, config,
                       stream: Optional[RngStream] = None, *, T_c: int) -> ZoState:
    """Rebuild the mask at t = T_c and every K steps after.

    ``config`` supplies ``stage2_pruning`` ('zscore' | 'magnitude' | 'none'),
    ``K``, ``sparsity``, ``mu_cge``, ``fisher_batches`` and ``literal_eq5``.
    Only Z-pruning spends queries (fisher_batches * 2d).
    """
    if config.stage2_pruning == "none" or not refresh_due(state.step, T_c, config.K):
        return state
    if config.stage2_pruning == "magnitude":
        mask = magnitude_mask(state.w, config.sparsity, state.step)
    elif config.stage2_pruning == "zscore":
        batches = resolve_fisher_batches(config, obj)
        fisher, g = fisher_diag(obj, state.w, config.mu_cge, batches, stream, return_grads=True)
        mask = build_mask(state.w, fisher, config.sparsity, state.step,
                          literal_eq5=config.literal_eq5, grad_mean=g)
    else:
        raise ValueError(f"unknown pruning mode {config.stage2_pruning!r}")
    return replace(state, mask=mask)


def resolve_fisher_batches(config, obj: ObjectiveFunction) -> int:
    if config.fisher_batches is not None:
        return int(config.fisher_batches)
    return 4 if obj.stochastic else 1
