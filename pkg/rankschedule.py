#!/usr/bin/env python3
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.
#

"""
The rankschedule module provides dynamic rank allocation: the staged rank schedule, the global
rank budget, sensitivity-based triplet importance and pruning of SVD adapters to the budget.
"""

from typing import Dict
from typing import List
from typing import Mapping
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple
import csv
import dataclasses
import enum
import logging
import math

import numpy as np

from lora import SvdAdapter
from minimlm import SlotKey
import errors
import lora

logger = logging.getLogger(__name__)


class ScheduleVariant(enum.Enum):
    """How the cubic decay stage is evaluated."""
    # Numerator (t - t_init - t_final), exactly as the schedule formula is usually printed.
    AS_PRINTED = "as-printed"
    # Numerator (t - t_init): continuous at both ends of the decay stage.
    CONTINUOUS = "continuous"


@dataclasses.dataclass(frozen=True)
class RankSchedule:
    """Stage boundaries and ranks of the four-stage rank schedule."""
    r_full: int
    r_init: int
    r_target: int
    t_warm: int
    t_init: int
    t_final: int
    total_steps: int

    def __post_init__(self) -> None:
        if not 0 <= self.t_warm <= self.t_init <= self.total_steps - self.t_final <= self.total_steps:
            raise errors.ConfigError("schedule", "need 0 <= t_warm <= t_init <= total_steps - t_final <= total_steps")
        if not 1 <= self.r_target <= self.r_init <= self.r_full:
            raise errors.ConfigError("schedule", "need 1 <= r_target <= r_init <= r_full")

    @staticmethod
    def create(r_target: int, t_init: int, t_final: int, total_steps: int, t_warm: int = 0,
               r_init: Optional[int] = None, r_full: Optional[int] = None) -> "RankSchedule":
        """Builds a schedule with r_init = ceil(1.5 * r_target) and r_full = r_init unless given."""
        if r_init is None:
            r_init = lora.default_r_max(r_target)
        if r_full is None:
            r_full = r_init
        return RankSchedule(r_full=r_full, r_init=r_init, r_target=r_target, t_warm=t_warm, t_init=t_init,
                            t_final=t_final, total_steps=total_steps)

    def with_warmup(self, t_warm: int) -> "RankSchedule":
        """Gets a copy with a different warm-up boundary."""
        return dataclasses.replace(self, t_warm=t_warm)


def rank_at_step(t: int, schedule: RankSchedule,
                 variant: ScheduleVariant = ScheduleVariant.CONTINUOUS) -> float:
    """Gets the (real-valued) adapter rank at step t."""
    if t < 0 or t > schedule.total_steps:
        raise errors.RangeError("step %d outside [0, %d]" % (t, schedule.total_steps))
    decay_end = schedule.total_steps - schedule.t_final
    if t < schedule.t_warm:
        return float(schedule.r_full)
    if t < schedule.t_init:
        return float(schedule.r_init)
    if t < decay_end:
        span = decay_end - schedule.t_init
        if variant == ScheduleVariant.AS_PRINTED:
            progress = (t - schedule.t_init - schedule.t_final) / span
        else:
            progress = (t - schedule.t_init) / span
        return schedule.r_target + (schedule.r_init - schedule.r_target) * (1.0 - progress) ** 3
    return float(schedule.r_target)


def budget_at_step(t: int, schedule: RankSchedule, num_adapted_matrices: int,
                   variant: ScheduleVariant = ScheduleVariant.CONTINUOUS) -> int:
    """Gets the total number of active triplets allowed at step t (half-up rounding, clipped to the allocation)."""
    if num_adapted_matrices < 1:
        raise errors.RangeError("need at least one adapted matrix")
    budget = int(math.floor(rank_at_step(t, schedule, variant) * num_adapted_matrices + 0.5))
    return max(0, min(budget, schedule.r_init * num_adapted_matrices))


def sensitivity(w: float, grad: float) -> float:
    """Estimated loss change when w is pruned: |w * dL/dw|."""
    return abs(w * grad)


def triplet_importance(p_col: np.ndarray, lambda_i: float, q_row: np.ndarray, p_grad: np.ndarray,
                       lambda_grad: float, q_grad: np.ndarray) -> float:
    """Sensitivity of the singular value plus the mean sensitivities of its two singular vectors."""
    p_col = np.asarray(p_col, dtype=np.float64).ravel()
    q_row = np.asarray(q_row, dtype=np.float64).ravel()
    p_grad = np.asarray(p_grad, dtype=np.float64).ravel()
    q_grad = np.asarray(q_grad, dtype=np.float64).ravel()
    if p_col.shape != p_grad.shape or q_row.shape != q_grad.shape:
        raise errors.ShapeError("triplet_importance: vector and gradient lengths differ")
    score = sensitivity(lambda_i, lambda_grad)
    if p_col.size:
        score += float(np.abs(p_col * p_grad).mean())
    if q_row.size:
        score += float(np.abs(q_row * q_grad).mean())
    return score


class TripletScore(NamedTuple):
    """Importance of dimension dim of the adapter at (layer, matrix)."""
    layer: int
    matrix: str
    dim: int
    score: float


def score_triplets(adapters: Sequence[Tuple[SlotKey, SvdAdapter]],
                   grads: Mapping[str, np.ndarray]) -> List[TripletScore]:
    """Scores every triplet of every adapter from current weights and per-parameter gradients."""
    ret: List[TripletScore] = []
    for (layer, name), adapter in adapters:
        p_vectors = adapter.p_vectors.value.data
        lam = adapter.lam.value.data
        q_vectors = adapter.q_vectors.value.data
        p_grad = grads[adapter.p_vectors.name]
        lam_grad = grads[adapter.lam.name]
        q_grad = grads[adapter.q_vectors.name]
        for dim in range(adapter.r_max):
            score = triplet_importance(p_vectors[:, dim], float(lam[dim, 0]), q_vectors[dim, :],
                                       p_grad[:, dim], float(lam_grad[dim, 0]), q_grad[dim, :])
            ret.append(TripletScore(layer, name, dim, score))
    return ret


class SensitivitySmoother:
    """Exponential moving average of triplet scores; beta = 0 passes raw scores through."""
    def __init__(self, beta: float = 0.0) -> None:
        if not 0 <= beta < 1:
            raise errors.RangeError("EMA beta %g outside [0, 1)" % beta)
        self.beta = beta
        self.__averages: Dict[Tuple[int, str, int], float] = {}

    def smooth(self, scores: Sequence[TripletScore]) -> List[TripletScore]:
        """Folds scores into the running averages and returns the averaged scores."""
        if self.beta == 0:
            return list(scores)
        ret: List[TripletScore] = []
        for score in scores:
            key = (score.layer, score.matrix, score.dim)
            previous = self.__averages.get(key)
            average = score.score if previous is None else self.beta * previous + (1 - self.beta) * score.score
            self.__averages[key] = average
            ret.append(score._replace(score=average))
        return ret


class PruneEvent(NamedTuple):
    """One change of triplet state."""
    step: int
    layer: int
    matrix: str
    dim: int
    score: float
    action: str


def prune_to_budget(adapters: Sequence[Tuple[SlotKey, SvdAdapter]], scores: Sequence[TripletScore],
                    budget: int, step: int = 0) -> List[PruneEvent]:
    """
    Keeps the budget highest-scoring triplets across all adapters and zeroes the singular values of
    the rest. Ties keep addressing order (layer, matrix, dim). Returns the state changes.
    """
    total = sum(adapter.r_max for _key, adapter in adapters)
    if budget < 0 or budget > total:
        raise errors.RangeError("budget %d outside [0, %d]" % (budget, total))
    by_triplet = {(score.layer, score.matrix, score.dim): score.score for score in scores}
    order: List[Tuple[int, str, int]] = []
    for (layer, name), adapter in adapters:
        order += [(layer, name, dim) for dim in range(adapter.r_max)]
    missing = [triplet for triplet in order if triplet not in by_triplet]
    if missing:
        raise errors.InputError("no score for triplet %s" % (missing[0],))
    ranked = sorted(range(len(order)), key=lambda index: (-by_triplet[order[index]], index))
    kept = {order[index] for index in ranked[:budget]}

    events: List[PruneEvent] = []
    for (layer, name), adapter in adapters:
        mask = np.array([(layer, name, dim) in kept for dim in range(adapter.r_max)], dtype=bool)
        for dim in range(adapter.r_max):
            if adapter.active_mask[dim] and not mask[dim]:
                action = "prune"
            elif mask[dim] and not adapter.active_mask[dim]:
                action = "reactivate"
            else:
                continue
            events.append(PruneEvent(step, layer, name, dim, by_triplet[(layer, name, dim)], action))
        adapter.set_active(mask)
    if events:
        logger.debug("step %d: budget %d, %d triplet state changes", step, budget, len(events))
    return events


def active_triplets(adapters: Sequence[Tuple[SlotKey, SvdAdapter]]) -> int:
    """Gets the number of active triplets across adapters."""
    return sum(adapter.effective_rank for _key, adapter in adapters)


PRUNE_LOG_FIELDS = ["step", "layer", "matrix", "dim", "score", "action"]


def write_prune_log(events: Sequence[PruneEvent], path: str) -> None:
    """Writes prune events as CSV."""
    with open(path, "w", encoding="utf-8", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(PRUNE_LOG_FIELDS)
        for event in events:
            writer.writerow([event.step, event.layer, event.matrix, event.dim, repr(event.score), event.action])

# vim:set shiftwidth=4 softtabstop=4 expandtab:
