#!/usr/bin/env python3
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.
#

"""The lora module provides low-rank adapters in two-matrix and SVD-triplet form."""

from fractions import Fraction
from typing import Any
from typing import Dict
from typing import Iterable
from typing import Iterator
from typing import List
from typing import Optional
from typing import Tuple
import json
import logging
import math

import numpy as np

from minimlm import Adapter
from minimlm import MATRIX_NAMES
from minimlm import SlotKey
from minimlm import TransformerModel
from numcore import Matrix
from numcore import Parameter
from numcore import Tape
import errors
import minimlm
import numcore

ADAPTER_FORMAT = "lora-adapters"
ADAPTER_VERSION = 1

logger = logging.getLogger(__name__)


def _dropout(x: Matrix, dropout_p: float, training: bool, rng: Optional[np.random.Generator]) -> Matrix:
    if not training or dropout_p == 0:
        return x
    if rng is None:
        raise errors.StateError("adapter dropout in training mode needs a random stream")
    keep = (rng.random(x.shape) >= dropout_p) / (1.0 - dropout_p)
    return numcore.mul(x, Matrix.wrap(keep))


def _check_dropout(dropout_p: float) -> None:
    if not 0 <= dropout_p < 1:
        raise errors.RangeError("dropout probability %g outside [0, 1)" % dropout_p)


class LoraAdapter(Adapter):
    """Update (alpha / r) * W_B . W_A with W_A Gaussian and W_B zero at construction."""
    kind = "lora"

    def __init__(self, d1: int, d2: int, rank: int, alpha: float, dropout_p: float,
                 rng: np.random.Generator, prefix: str = "") -> None:
        if rank < 1:
            raise errors.RangeError("LoRA rank must be at least 1, got %d" % rank)
        _check_dropout(dropout_p)
        self.rank = rank
        self.alpha = alpha
        self.dropout_p = dropout_p
        self.w_a = Parameter(prefix + "lora_A", rng.normal(0.0, 1.0 / rank, (rank, d2)))
        self.w_b = Parameter(prefix + "lora_B", np.zeros((d1, rank)))

    @property
    def scaling(self) -> float:
        """Gets the multiplier of the adapter path."""
        return self.alpha / self.rank

    def host_shape(self) -> Tuple[int, int]:
        return (self.w_b.value.rows, self.w_a.value.cols)

    def delta(self, x: Matrix, tape: Optional[Tape], training: bool,
              rng: Optional[np.random.Generator]) -> Matrix:
        if x.rows != self.w_a.value.cols:
            raise errors.ShapeError("LoRA input has %d rows, W_A expects %d" % (x.rows, self.w_a.value.cols))
        x = _dropout(x, self.dropout_p, training, rng)
        down = numcore.matmul(self.w_a.bind(tape), x)
        return numcore.scale(numcore.matmul(self.w_b.bind(tape), down), self.scaling)

    def parameters(self) -> List[Parameter]:
        return [self.w_a, self.w_b]

    def merged_delta(self) -> np.ndarray:
        return self.scaling * (self.w_b.value.data @ self.w_a.value.data)

    def trainable_count(self) -> int:
        return sum(param.numel for param in self.parameters() if param.trainable)


class SvdAdapter(Adapter):
    """Update P . diag(Lambda) . Q whose rank-1 triplets can be pruned by zeroing Lambda entries."""
    kind = "svd"

    def __init__(self, d1: int, d2: int, r_max: int, rng: np.random.Generator, dropout_p: float = 0.0,
                 prefix: str = "") -> None:
        if r_max < 1:
            raise errors.RangeError("SVD adapter needs at least one dimension, got %d" % r_max)
        _check_dropout(dropout_p)
        self.r_max = r_max
        self.dropout_p = dropout_p
        self.p_vectors = Parameter(prefix + "svd_P", rng.normal(0.0, 0.02, (d1, r_max)))
        self.lam = Parameter(prefix + "svd_lambda", np.zeros((r_max, 1)))
        self.q_vectors = Parameter(prefix + "svd_Q", rng.normal(0.0, 0.02, (r_max, d2)))
        self.active_mask = np.ones(r_max, dtype=bool)

    @property
    def effective_rank(self) -> int:
        """Gets the number of active triplets."""
        return int(self.active_mask.sum())

    def host_shape(self) -> Tuple[int, int]:
        return (self.p_vectors.value.rows, self.q_vectors.value.cols)

    def set_active(self, mask: np.ndarray) -> None:
        """Activates exactly the dimensions set in mask; inactive Lambda entries become 0."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.r_max,):
            raise errors.ShapeError("mask has %d entries, adapter has %d dimensions" % (mask.size, self.r_max))
        lam = np.array(self.lam.value.data)
        lam[~mask, 0] = 0.0
        self.lam.assign(lam)
        self.active_mask = mask.copy()

    def delta(self, x: Matrix, tape: Optional[Tape], training: bool,
              rng: Optional[np.random.Generator]) -> Matrix:
        if x.rows != self.q_vectors.value.cols:
            raise errors.ShapeError("SVD input has %d rows, Q expects %d" % (x.rows, self.q_vectors.value.cols))
        x = _dropout(x, self.dropout_p, training, rng)
        projected = numcore.mul(numcore.matmul(self.q_vectors.bind(tape), x), self.lam.bind(tape))
        return numcore.matmul(self.p_vectors.bind(tape), projected)

    def parameters(self) -> List[Parameter]:
        return [self.p_vectors, self.lam, self.q_vectors]

    def merged_delta(self) -> np.ndarray:
        lam = self.lam.value.data[:, 0] * self.active_mask
        return (self.p_vectors.value.data * lam) @ self.q_vectors.value.data

    def trainable_count(self) -> int:
        d1, d2 = self.host_shape()
        if not self.lam.trainable:
            return 0
        return self.effective_rank * (d1 + d2 + 1)


class AdapterTargets:
    """A duplicate-free set of (layer index, matrix name) pairs, iterated in addressing order."""
    def __init__(self, pairs: Iterable[SlotKey]) -> None:
        pairs = list(pairs)
        for _layer, name in pairs:
            if name not in MATRIX_NAMES:
                raise errors.TargetLookupError("unknown matrix name %r" % name)
        if len(set(pairs)) != len(pairs):
            raise errors.InputError("duplicate adapter targets")
        self.__pairs = sorted(pairs, key=lambda pair: (pair[0], MATRIX_NAMES.index(pair[1])))

    @staticmethod
    def for_layers(model: TransformerModel, layers: Optional[Iterable[int]] = None,
                   matrices: Iterable[str] = MATRIX_NAMES) -> "AdapterTargets":
        """Targets the given matrices of the given layers (all layers by default)."""
        if layers is None:
            layers = range(model.config.n_layers)
        matrices = list(matrices)
        return AdapterTargets([(layer, name) for layer in layers for name in matrices])

    def __iter__(self) -> Iterator[SlotKey]:
        return iter(self.__pairs)

    def __len__(self) -> int:
        return len(self.__pairs)

    def __contains__(self, pair: object) -> bool:
        return pair in self.__pairs


def _check_free(model: TransformerModel, targets: AdapterTargets) -> None:
    for layer, name in targets:
        model.weight(layer, name)
        if model.slots[(layer, name)] is not None:
            raise errors.StateError("adapter slot (%d, %s) is occupied" % (layer, name))


def _prefix(layer: int, name: str) -> str:
    return "layer%d.%s." % (layer, name)


def attach_lora(model: TransformerModel, targets: AdapterTargets, rank: int = 8, alpha: float = 32.0,
                dropout_p: float = 0.1, seed: int = 0) -> TransformerModel:
    """Freezes the base model and puts a zero-initialized LoRA adapter into every target slot."""
    _check_free(model, targets)
    model.set_base_trainable(False)
    for layer, name in targets:
        d1, d2 = model.weight(layer, name).value.shape
        rng = numcore.rng_stream(seed, "lora", layer, name)
        model.slots[(layer, name)] = LoraAdapter(d1, d2, rank, alpha, dropout_p, rng, _prefix(layer, name))
    logger.info("attached LoRA rank %d to %d matrices", rank, len(targets))
    return model


def default_r_max(r_target: int) -> int:
    """Gets the number of SVD dimensions allocated for a target rank."""
    return int(math.ceil(1.5 * r_target))


def attach_svd(model: TransformerModel, targets: AdapterTargets, r_max: int, seed: int = 0,
               dropout_p: float = 0.0) -> TransformerModel:
    """Freezes the base model and puts an SVD-triplet adapter with Lambda = 0 into every target slot."""
    _check_free(model, targets)
    model.set_base_trainable(False)
    for layer, name in targets:
        d1, d2 = model.weight(layer, name).value.shape
        rng = numcore.rng_stream(seed, "svd", layer, name)
        model.slots[(layer, name)] = SvdAdapter(d1, d2, r_max, rng, dropout_p, _prefix(layer, name))
    logger.info("attached SVD adapters with %d dimensions to %d matrices", r_max, len(targets))
    return model


def detach_adapters(model: TransformerModel) -> Dict[SlotKey, Adapter]:
    """Empties every slot; returns the removed adapters."""
    removed = dict(model.adapters())
    for key in removed:
        model.slots[key] = None
    return removed


def svd_adapters(model: TransformerModel) -> List[Tuple[SlotKey, SvdAdapter]]:
    """Gets the attached SVD adapters in addressing order."""
    return [(key, adapter) for key, adapter in model.adapters() if isinstance(adapter, SvdAdapter)]


def lora_forward(x: Matrix, w0: Matrix, adapter: Adapter, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Matrix:
    """h = W0.x + adapter update of x."""
    if w0.shape != adapter.host_shape():
        raise errors.ShapeError("W0 is %dx%d, adapter fits %dx%d" % (w0.shape + adapter.host_shape()))
    return numcore.add(numcore.matmul(w0, x), adapter.delta(x, None, training, rng))


def merge_adapter(w0: Matrix, adapter: Adapter) -> Matrix:
    """Gets W0 plus the dense adapter update."""
    if w0.shape != adapter.host_shape():
        raise errors.ShapeError("W0 is %dx%d, adapter fits %dx%d" % (w0.shape + adapter.host_shape()))
    return Matrix.wrap(w0.data + adapter.merged_delta())


def merge_into_model(model: TransformerModel) -> TransformerModel:
    """Folds every adapter into its base weight and empties the slots."""
    for (layer, name), adapter in detach_adapters(model).items():
        weight = model.weight(layer, name)
        weight.assign(merge_adapter(weight.value, adapter).data)
    return model


def parameter_counts(model: TransformerModel) -> Tuple[int, int]:
    """Gets (trainable, total) parameter counts; total includes every allocated adapter entry."""
    trainable = sum(param.numel for param in model.base_parameters() if param.trainable)
    total = sum(param.numel for param in model.base_parameters())
    for _key, adapter in model.adapters():
        trainable += adapter.trainable_count()
        total += sum(param.numel for param in adapter.parameters())
    return trainable, total


def trainable_fraction(model: TransformerModel) -> float:
    """Gets trainable / total parameters."""
    trainable, total = parameter_counts(model)
    return float(Fraction(trainable, total))


def save_adapters(model: TransformerModel, path: str) -> None:
    """Writes the attached adapters (base weights excluded)."""
    entries: List[Dict[str, Any]] = []
    for (layer, name), adapter in model.adapters():
        entry: Dict[str, Any] = {"layer": layer, "matrix": name, "kind": adapter.kind}
        if isinstance(adapter, LoraAdapter):
            entry.update({
                "rank": adapter.rank,
                "alpha": adapter.alpha,
                "dropout_p": adapter.dropout_p,
                "lora_A": minimlm.matrix_to_json(adapter.w_a.value.data),
                "lora_B": minimlm.matrix_to_json(adapter.w_b.value.data),
            })
        else:
            assert isinstance(adapter, SvdAdapter)
            entry.update({
                "r_max": adapter.r_max,
                "dropout_p": adapter.dropout_p,
                "active": [bool(flag) for flag in adapter.active_mask],
                "P": minimlm.matrix_to_json(adapter.p_vectors.value.data),
                "lambda": minimlm.matrix_to_json(adapter.lam.value.data),
                "Q": minimlm.matrix_to_json(adapter.q_vectors.value.data),
            })
        entries.append(entry)
    blob = {
        "format": ADAPTER_FORMAT,
        "version": ADAPTER_VERSION,
        "config_hash": minimlm.config_hash(model),
        "adapters": entries,
    }
    with open(path, "w", encoding="utf-8") as stream:
        json.dump(blob, stream)
        stream.write("\n")


def load_adapters(model: TransformerModel, path: str) -> TransformerModel:
    """Attaches the adapters of an adapter file onto a matching base model."""
    with open(path, "r", encoding="utf-8") as stream:
        blob = json.load(stream)
    if blob.get("format") != ADAPTER_FORMAT or blob.get("version") != ADAPTER_VERSION:
        raise errors.AdapterLoadError("%s: not a version %d adapter file" % (path, ADAPTER_VERSION))
    if blob["config_hash"] != minimlm.config_hash(model):
        raise errors.AdapterLoadError("%s: adapters were trained for a different base model" % path)
    targets = AdapterTargets((entry["layer"], entry["matrix"]) for entry in blob["adapters"])
    _check_free(model, targets)
    if len(targets):
        model.set_base_trainable(False)
    rng = numcore.rng_stream(0, "adapter-load")
    for entry in blob["adapters"]:
        layer, name = entry["layer"], entry["matrix"]
        d1, d2 = model.weight(layer, name).value.shape
        adapter: Adapter
        if entry["kind"] == LoraAdapter.kind:
            lora_adapter = LoraAdapter(d1, d2, entry["rank"], entry["alpha"], entry["dropout_p"], rng,
                                       _prefix(layer, name))
            lora_adapter.w_a.assign(minimlm.matrix_from_json(entry["lora_A"]))
            lora_adapter.w_b.assign(minimlm.matrix_from_json(entry["lora_B"]))
            adapter = lora_adapter
        elif entry["kind"] == SvdAdapter.kind:
            svd_adapter = SvdAdapter(d1, d2, entry["r_max"], rng, entry["dropout_p"], _prefix(layer, name))
            svd_adapter.p_vectors.assign(minimlm.matrix_from_json(entry["P"]))
            svd_adapter.q_vectors.assign(minimlm.matrix_from_json(entry["Q"]))
            svd_adapter.lam.assign(minimlm.matrix_from_json(entry["lambda"]))
            svd_adapter.set_active(np.array(entry["active"], dtype=bool))
            adapter = svd_adapter
        else:
            raise errors.AdapterLoadError("%s: unknown adapter kind %r" % (path, entry["kind"]))
        model.slots[(layer, name)] = adapter
    return model

# vim:set shiftwidth=4 softtabstop=4 expandtab:
