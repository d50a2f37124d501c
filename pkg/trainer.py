#!/usr/bin/env python3
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.
#

"""
The trainer module runs the five training regimes over masked-LM batches: full fine-tuning (FT),
vanilla LoRA, dynamic rank allocation (S1), high-rank warm-up (S2) and mixed-rank staging (S3).
"""

from typing import Callable
from typing import Dict
from typing import Iterable
from typing import List
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

from lora import AdapterTargets
from minimlm import MATRIX_NAMES
from minimlm import MaskedExample
from minimlm import TransformerModel
from minimlm import Vocab
from numcore import Matrix
from numcore import Parameter
from numcore import Tape
from rankschedule import PruneEvent
from rankschedule import RankSchedule
from rankschedule import ScheduleVariant
from rankschedule import SensitivitySmoother
from rankschedule import TripletScore
import errors
import lora
import minimlm
import numcore
import rankschedule

logger = logging.getLogger(__name__)


class Strategy(enum.Enum):
    """Training regime."""
    FT = "FT"
    LORA = "LoRA"
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"


class Stage(enum.Enum):
    """Stage of the four-stage rank schedule a step belongs to."""
    WARMUP = "warmup"
    RANK_INIT = "rank-init"
    RANK_DECAY = "rank-decay"
    FINAL = "final"


DYNAMIC_RANK = (Strategy.S1, Strategy.S3)
WITH_WARMUP = (Strategy.S2, Strategy.S3)


@dataclasses.dataclass
class TrainConfig:
    """Everything one training run needs besides the corpus and the model."""
    # pylint: disable=too-many-instance-attributes
    strategy: Strategy = Strategy.LORA
    schedule: Optional[RankSchedule] = None
    lr: float = 1e-2
    # Steps that train LoRA adapters; None reuses lr.
    lora_lr: Optional[float] = 1e-3
    batch_size: int = 8
    total_steps: int = 300
    mask_prob: float = 0.15
    seed: int = 0
    warmup_steps: int = 50
    lora_rank: int = 8
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1
    target_layers: Optional[Tuple[int, ...]] = None
    target_matrices: Tuple[str, ...] = MATRIX_NAMES
    schedule_variant: ScheduleVariant = ScheduleVariant.CONTINUOUS
    sensitivity_ema: float = 0.0
    orth_reg: float = 0.0
    lr_warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0

    def validate(self) -> None:
        """Checks that the fields the strategy needs are present and consistent."""
        if self.total_steps < 1:
            raise errors.ConfigError("train.total_steps", "must be at least 1")
        if self.batch_size < 1:
            raise errors.ConfigError("train.batch_size", "must be at least 1")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise errors.ConfigError("train.lr", "must be a finite non-negative number")
        if self.lora_lr is not None and (self.lora_lr < 0 or not math.isfinite(self.lora_lr)):
            raise errors.ConfigError("train.lora_lr", "must be a finite non-negative number")
        if not 0 < self.mask_prob <= 1:
            raise errors.ConfigError("train.mask_prob", "must be in (0, 1]")
        if self.strategy in DYNAMIC_RANK:
            if self.schedule is None:
                raise errors.ConfigError("schedule", "strategy %s needs a rank schedule" % self.strategy.value)
            if self.schedule.total_steps != self.total_steps:
                raise errors.ConfigError("schedule.total_steps", "differs from train.total_steps")
        if self.strategy in WITH_WARMUP:
            if not 0 <= self.warmup_steps <= self.total_steps:
                raise errors.ConfigError("train.warmup_steps", "must be in [0, total_steps]")
        if self.strategy == Strategy.S3:
            assert self.schedule is not None
            if self.warmup_steps > self.schedule.t_init:
                raise errors.ConfigError("train.warmup_steps", "must not exceed schedule.t_init")
        if self.strategy != Strategy.FT and self.lora_rank < 1:
            raise errors.ConfigError("train.lora_rank", "must be at least 1")
        if not 0 <= self.lora_dropout < 1:
            raise errors.ConfigError("train.lora_dropout", "must be in [0, 1)")
        if not 0 <= self.sensitivity_ema < 1:
            raise errors.ConfigError("train.sensitivity_ema", "must be in [0, 1)")

    def effective_schedule(self) -> RankSchedule:
        """Gets the rank schedule with the warm-up boundary this strategy implies."""
        assert self.schedule is not None
        if self.strategy == Strategy.S3:
            return self.schedule.with_warmup(self.warmup_steps)
        return self.schedule.with_warmup(0)

    def targets(self, model: TransformerModel) -> AdapterTargets:
        """Gets the adapter targets this config selects in model."""
        return AdapterTargets.for_layers(model, self.target_layers, self.target_matrices)


def stage_boundaries(cfg: TrainConfig) -> Dict[str, int]:
    """Gets the first step after the warmup, rank-init and rank-decay stages."""
    total = cfg.total_steps
    if cfg.strategy == Strategy.FT:
        warm_end = init_end = decay_end = total
    elif cfg.strategy == Strategy.LORA:
        warm_end = init_end = decay_end = 0
    elif cfg.strategy == Strategy.S2:
        warm_end = init_end = decay_end = cfg.warmup_steps
    else:
        schedule = cfg.effective_schedule()
        warm_end = schedule.t_warm
        init_end = schedule.t_init
        decay_end = total - schedule.t_final
    return {"warmup_end": warm_end, "rank_init_end": init_end, "rank_decay_end": decay_end, "total": total}


def stage_of_step(t: int, cfg: TrainConfig) -> Stage:
    """Maps a step to its stage; stage intervals are half-open."""
    if t < 0 or t >= cfg.total_steps:
        raise errors.RangeError("step %d outside [0, %d)" % (t, cfg.total_steps))
    bounds = stage_boundaries(cfg)
    if t < bounds["warmup_end"]:
        return Stage.WARMUP
    if t < bounds["rank_init_end"]:
        return Stage.RANK_INIT
    if t < bounds["rank_decay_end"]:
        return Stage.RANK_DECAY
    return Stage.FINAL


class Adam:
    """Adaptive moment estimation with bias correction, state keyed by parameter name."""
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.__state: Dict[str, Tuple[int, np.ndarray, np.ndarray]] = {}

    def step(self, params: Iterable[Parameter], grads: Dict[str, np.ndarray], lr: float) -> None:
        """Updates every parameter from its gradient."""
        for param in params:
            grad = grads[param.name]
            count, first, second = self.__state.get(
                param.name, (0, np.zeros(param.value.shape), np.zeros(param.value.shape)))
            count += 1
            first = self.beta1 * first + (1 - self.beta1) * grad
            second = self.beta2 * second + (1 - self.beta2) * grad * grad
            self.__state[param.name] = (count, first, second)
            first_hat = first / (1 - self.beta1 ** count)
            second_hat = second / (1 - self.beta2 ** count)
            param.assign(param.value.data - lr * first_hat / (np.sqrt(second_hat) + self.eps))


class StepRecord(NamedTuple):
    """One row of the training log."""
    step: int
    loss: float
    budget: int
    trainable: int
    stage: str


TRAIN_LOG_FIELDS = ["step", "loss", "budget", "trainable", "stage"]


class TrainLog:
    """Per-step loss, active adapter rank, trainable parameter count and stage label."""
    def __init__(self) -> None:
        self.records: List[StepRecord] = []
        self.prune_events: List[PruneEvent] = []

    def append(self, record: StepRecord) -> None:
        """Adds a step."""
        self.records.append(record)

    def losses(self) -> List[float]:
        """Gets the loss trace."""
        return [record.loss for record in self.records]

    def budgets(self) -> List[int]:
        """Gets the active-rank trace."""
        return [record.budget for record in self.records]

    def trainables(self) -> List[int]:
        """Gets the trainable-parameter trace."""
        return [record.trainable for record in self.records]

    def stages(self) -> List[str]:
        """Gets the stage trace."""
        return [record.stage for record in self.records]

    def write_csv(self, path: str) -> None:
        """Writes the log as CSV; floats are written with repr() so reruns are byte-identical."""
        with open(path, "w", encoding="utf-8", newline="") as stream:
            writer = csv.writer(stream, lineterminator="\n")
            writer.writerow(TRAIN_LOG_FIELDS)
            for record in self.records:
                writer.writerow([record.step, repr(record.loss), record.budget, record.trainable, record.stage])


def encode_corpus(corpus: Iterable[str], vocab: Vocab, max_len: int) -> List[List[int]]:
    """Encodes non-empty lines, truncated to max_len tokens."""
    encoded = [vocab.encode(line)[:max_len] for line in corpus]
    encoded = [ids for ids in encoded if ids]
    if not encoded:
        raise errors.InputError("training corpus has no tokens")
    return encoded


def mask_sentence(ids: Sequence[int], vocab: Vocab, mask_prob: float, rng: np.random.Generator) -> MaskedExample:
    """Picks positions with probability mask_prob (at least one), then 80/10/10 mask/random/keep."""
    positions = [position for position in range(len(ids)) if rng.random() < mask_prob]
    if not positions:
        positions = [int(rng.integers(len(ids)))]
    regular = vocab.regular_ids()
    inputs = list(ids)
    for position in positions:
        roll = rng.random()
        if roll < 0.8:
            inputs[position] = vocab.mask_id
        elif roll < 0.9 and regular:
            inputs[position] = regular[int(rng.integers(len(regular)))]
    return MaskedExample(inputs, positions, [ids[position] for position in positions])


def make_batch(encoded: Sequence[Sequence[int]], vocab: Vocab, cfg: TrainConfig, t: int) -> List[MaskedExample]:
    """Samples and masks the batch of step t."""
    rng = numcore.rng_stream(cfg.seed, "batch", t)
    picks = rng.integers(0, len(encoded), size=cfg.batch_size)
    return [mask_sentence(encoded[int(pick)], vocab, cfg.mask_prob, rng) for pick in picks]


def orthogonality_penalty(model: TransformerModel, tape: Tape) -> Matrix:
    """Sum over SVD adapters of ||P^T P - I||^2 + ||Q Q^T - I||^2."""
    total: Optional[Matrix] = None
    for _key, adapter in lora.svd_adapters(model):
        p_vectors = adapter.p_vectors.bind(tape)
        q_vectors = adapter.q_vectors.bind(tape)
        minus_eye = Matrix.wrap(-np.eye(adapter.r_max))
        for gram in (numcore.matmul(numcore.transpose(p_vectors), p_vectors),
                     numcore.matmul(q_vectors, numcore.transpose(q_vectors))):
            diff = numcore.add(gram, minus_eye)
            term = numcore.sum_all(numcore.mul(diff, diff))
            total = term if total is None else numcore.add(total, term)
    if total is None:
        return Matrix.zeros(1, 1)
    return total


class TrainState:
    """Mutable state carried across steps of one run."""
    # pylint: disable=too-few-public-methods
    def __init__(self, cfg: TrainConfig) -> None:
        self.optimizer = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.smoother = SensitivitySmoother(cfg.sensitivity_ema)
        self.last_scores: List[TripletScore] = []
        self.prune_events: List[PruneEvent] = []


def _check_trainability(model: TransformerModel, stage: Stage) -> None:
    base_trainable = [param.trainable for param in model.base_parameters()]
    if stage == Stage.WARMUP:
        if not all(base_trainable) or model.adapters():
            raise errors.StateError("warm-up steps train the whole base model without adapters")
    elif any(base_trainable) or not model.adapters():
        raise errors.StateError("%s steps train adapters only" % stage.value)


def learning_rate(cfg: TrainConfig, t: int) -> float:
    """Constant learning rate with an optional linear ramp; LoRA adapter steps use lora_lr when set."""
    ret = cfg.lr
    if cfg.lora_lr is not None and cfg.strategy not in DYNAMIC_RANK and stage_of_step(t, cfg) != Stage.WARMUP:
        ret = cfg.lora_lr
    if cfg.lr_warmup_steps and t < cfg.lr_warmup_steps:
        return ret * (t + 1) / cfg.lr_warmup_steps
    return ret


def active_rank(model: TransformerModel) -> int:
    """Gets the summed rank of all attached adapters."""
    ret = 0
    for _key, adapter in model.adapters():
        if isinstance(adapter, lora.SvdAdapter):
            ret += adapter.effective_rank
        else:
            assert isinstance(adapter, lora.LoraAdapter)
            ret += adapter.rank
    return ret


def train_step(model: TransformerModel, batch: Sequence[MaskedExample], cfg: TrainConfig, t: int,
               state: TrainState) -> StepRecord:
    """One optimizer update; dynamic-rank strategies prune to the step's budget after the update."""
    stage = stage_of_step(t, cfg)
    _check_trainability(model, stage)
    tape = Tape()
    try:
        loss = minimlm.mlm_loss(model, batch, tape, training=True, rng=numcore.rng_stream(cfg.seed, "dropout", t))
        if cfg.orth_reg > 0 and lora.svd_adapters(model):
            loss = numcore.add(loss, numcore.scale(orthogonality_penalty(model, tape), cfg.orth_reg))
    except errors.NumericError as error:
        raise errors.DivergenceError(t, str(error)) from error
    value = loss.item()
    if not math.isfinite(value):
        raise errors.DivergenceError(t, "loss is %r" % value)
    tape.backward(loss)
    params = model.trainable_parameters()
    grads = {param.name: tape.gradient(param) for param in params}
    try:
        state.optimizer.step(params, grads, learning_rate(cfg, t))
    except errors.NumericError as error:
        raise errors.DivergenceError(t, str(error)) from error

    svd = lora.svd_adapters(model)
    if cfg.strategy in DYNAMIC_RANK and svd:
        state.last_scores = state.smoother.smooth(rankschedule.score_triplets(svd, grads))
        if stage in (Stage.RANK_DECAY, Stage.FINAL):
            budget = rankschedule.budget_at_step(t, cfg.effective_schedule(), len(svd), cfg.schedule_variant)
            state.prune_events += rankschedule.prune_to_budget(svd, state.last_scores, budget, t)
    trainable, _total = lora.parameter_counts(model)
    logger.debug("step %d (%s): loss %.6f", t, stage.value, value)
    return StepRecord(t, value, active_rank(model), trainable, stage.value)


def _attach_adapters(model: TransformerModel, cfg: TrainConfig) -> None:
    targets = cfg.targets(model)
    if cfg.strategy in DYNAMIC_RANK:
        assert cfg.schedule is not None
        lora.attach_svd(model, targets, cfg.schedule.r_init, cfg.seed, cfg.lora_dropout)
    else:
        lora.attach_lora(model, targets, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, cfg.seed)


CheckpointFn = Callable[[int, TransformerModel], None]


def run_strategy(cfg: TrainConfig, corpus: Iterable[str], model: TransformerModel,
                 checkpoint_fn: Optional[CheckpointFn] = None) -> Tuple[TransformerModel, TrainLog]:
    """Trains model in place following cfg.strategy; returns the model and its log."""
    cfg.validate()
    if model.adapters():
        raise errors.StateError("run_strategy needs a model with empty adapter slots")
    encoded = encode_corpus(corpus, model.vocab, model.config.max_len)
    log = TrainLog()
    state = TrainState(cfg)
    model.set_base_trainable(True)
    previous: Optional[Stage] = None
    for t in range(cfg.total_steps):
        stage = stage_of_step(t, cfg)
        if stage != Stage.WARMUP and not model.adapters():
            # Warmed-up base weights become the frozen W_0; adapters start from their usual init.
            _attach_adapters(model, cfg)
            state.optimizer = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
        if stage != previous:
            logger.info("%s: step %d starts stage %s", cfg.strategy.value, t, stage.value)
            previous = stage
        batch = make_batch(encoded, model.vocab, cfg, t)
        log.append(train_step(model, batch, cfg, t, state))
        if checkpoint_fn is not None and cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
            checkpoint_fn(t + 1, model)

    svd = lora.svd_adapters(model)
    if cfg.strategy in DYNAMIC_RANK and svd and state.last_scores:
        budget = rankschedule.budget_at_step(cfg.total_steps, cfg.effective_schedule(), len(svd),
                                             cfg.schedule_variant)
        state.prune_events += rankschedule.prune_to_budget(svd, state.last_scores, budget, cfg.total_steps)
    log.prune_events = state.prune_events
    logger.info("%s: finished %d steps, final loss %.4f", cfg.strategy.value, cfg.total_steps, log.losses()[-1])
    return model, log

# vim:set shiftwidth=4 softtabstop=4 expandtab:
