#!/usr/bin/env python3
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.
#

"""
The minimlm module provides a toy bidirectional transformer encoder with a masked-language-model
head. Its pseudo-log-likelihood is the second-pass score used to rescore N-best hypotheses.
"""

from typing import Any
from typing import Dict
from typing import Iterable
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple
import collections
import copy
import dataclasses
import hashlib
import json
import math

import numpy as np

from numcore import Matrix
from numcore import Parameter
from numcore import Tape
import errors
import numcore

PAD = "[PAD]"
MASK = "[MASK]"
UNK = "[UNK]"
RESERVED = (PAD, MASK, UNK)

# Adaptable weight matrices of one encoder layer, in addressing order.
MATRIX_NAMES = ("W_q", "W_k", "W_v", "W_o", "W_f1", "W_f2")

CHECKPOINT_FORMAT = "minimlm-checkpoint"
CHECKPOINT_VERSION = 1

SlotKey = Tuple[int, str]


def tokenize(sentence: str) -> List[str]:
    """Splits a sentence into whitespace-separated word tokens."""
    return sentence.split()


class Vocab:
    """Bijection between word tokens and ids, with reserved [PAD], [MASK] and [UNK] entries."""
    def __init__(self, tokens: Sequence[str]) -> None:
        self.__tokens = list(tokens)
        self.__ids = {token: index for index, token in enumerate(self.__tokens)}
        if len(self.__ids) != len(self.__tokens):
            raise errors.InputError("vocabulary tokens are not unique")
        for token in RESERVED:
            if token not in self.__ids:
                raise errors.InputError("vocabulary lacks reserved token %s" % token)
        self.pad_id = self.__ids[PAD]
        self.mask_id = self.__ids[MASK]
        self.unk_id = self.__ids[UNK]

    def __len__(self) -> int:
        return len(self.__tokens)

    def __contains__(self, token: object) -> bool:
        return token in self.__ids

    @property
    def tokens(self) -> List[str]:
        """Gets the tokens in id order."""
        return list(self.__tokens)

    def id_of(self, token: str) -> int:
        """Gets the id of a token, [UNK] for unknown ones."""
        return self.__ids.get(token, self.unk_id)

    def token_of(self, token_id: int) -> str:
        """Gets the token of an id."""
        return self.__tokens[token_id]

    def encode(self, sentence: str) -> List[int]:
        """Tokenizes and maps a sentence to ids."""
        return [self.id_of(token) for token in tokenize(sentence)]

    def regular_ids(self) -> List[int]:
        """Gets the ids of all non-reserved tokens."""
        return [index for index, token in enumerate(self.__tokens) if token not in RESERVED]

    def words(self) -> List[str]:
        """Gets all non-reserved tokens in id order."""
        return [token for token in self.__tokens if token not in RESERVED]


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocab:
    """Builds a word-level vocabulary: frequency descending, then lexicographic."""
    counts: "collections.Counter[str]" = collections.Counter()
    lines = 0
    for line in corpus:
        lines += 1
        counts.update(token for token in tokenize(line) if token not in RESERVED)
    if not lines or not counts:
        raise errors.InputError("cannot build a vocabulary from an empty corpus")
    kept = [token for token, count in counts.items() if count >= min_count]
    kept.sort(key=lambda token: (-counts[token], token))
    return Vocab(list(RESERVED) + kept)


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Shape of the toy encoder."""
    vocab_size: int
    d_model: int = 32
    d_ff: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        for field in dataclasses.fields(self):
            if field.name != "seed" and getattr(self, field.name) < 1:
                raise errors.ConfigError("model." + field.name, "must be at least 1")
        if self.d_model % self.n_heads:
            raise errors.ConfigError("model.n_heads", "d_model %d is not divisible by %d heads"
                                     % (self.d_model, self.n_heads))

    def to_dict(self) -> Dict[str, int]:
        """Gets the fields as a dict."""
        return dataclasses.asdict(self)


class Adapter:
    """Base class for a trainable low-rank update attached to one weight matrix."""
    kind = ""

    def delta(self, x: Matrix, tape: Optional[Tape], training: bool,
              rng: Optional[np.random.Generator]) -> Matrix:  # pragma: no cover
        """Gets the update applied to the columns of x."""
        # pylint: disable=no-self-use
        # pylint: disable=unused-argument
        ...

    def parameters(self) -> List[Parameter]:  # pragma: no cover
        """Gets the adapter parameters."""
        # pylint: disable=no-self-use
        ...

    def merged_delta(self) -> np.ndarray:  # pragma: no cover
        """Gets the dense d1 x d2 update this adapter adds to its base weight."""
        # pylint: disable=no-self-use
        ...

    def trainable_count(self) -> int:  # pragma: no cover
        """Gets the number of parameters currently being trained."""
        # pylint: disable=no-self-use
        ...

    def host_shape(self) -> Tuple[int, int]:  # pragma: no cover
        """Gets the (d1, d2) shape of the base weight this adapter fits."""
        # pylint: disable=no-self-use
        ...


class TransformerModel:
    """Post-layer-norm encoder; hidden states are d_model x seq_len (one column per token)."""
    def __init__(self, config: ModelConfig, vocab: Vocab) -> None:
        if len(vocab) != config.vocab_size:
            raise errors.ConfigError("model.vocab_size", "config says %d, vocabulary has %d"
                                     % (config.vocab_size, len(vocab)))
        self.config = config
        self.vocab = vocab
        self.params: Dict[str, Parameter] = {}
        self.slots: Dict[SlotKey, Optional[Adapter]] = {}
        rng = numcore.rng_stream(config.seed, "model-init")
        d_model, d_ff = config.d_model, config.d_ff

        self.__add("embed.token", rng.normal(0.0, 1.0, (config.vocab_size, d_model)))
        self.__add("embed.position", rng.normal(0.0, 1.0, (config.max_len, d_model)))
        self.__add_layer_norm("embed.ln", d_model)
        shapes = {
            "W_q": (d_model, d_model),
            "W_k": (d_model, d_model),
            "W_v": (d_model, d_model),
            "W_o": (d_model, d_model),
            "W_f1": (d_ff, d_model),
            "W_f2": (d_model, d_ff),
        }
        for layer in range(config.n_layers):
            for name in MATRIX_NAMES:
                rows, cols = shapes[name]
                self.__add("layer%d.%s" % (layer, name), rng.normal(0.0, 1.0 / math.sqrt(cols), (rows, cols)))
                self.slots[(layer, name)] = None
            self.__add_layer_norm("layer%d.ln_attn" % layer, d_model)
            self.__add_layer_norm("layer%d.ln_ff" % layer, d_model)
        self.__add("head.weight", rng.normal(0.0, 1.0 / math.sqrt(d_model), (config.vocab_size, d_model)))
        self.__add("head.bias", np.zeros((config.vocab_size, 1)))

    def __add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Parameter(name, data)

    def __add_layer_norm(self, prefix: str, size: int) -> None:
        self.__add(prefix + ".gain", np.ones((size, 1)))
        self.__add(prefix + ".bias", np.zeros((size, 1)))

    def weight(self, layer: int, name: str) -> Parameter:
        """Gets the base weight addressed by (layer, matrix name)."""
        if (layer, name) not in self.slots:
            raise errors.TargetLookupError("no matrix %s in layer %s" % (name, layer))
        return self.params["layer%d.%s" % (layer, name)]

    def slot_keys(self) -> List[SlotKey]:
        """Gets every (layer, matrix name) in addressing order."""
        return [(layer, name) for layer in range(self.config.n_layers) for name in MATRIX_NAMES]

    def adapters(self) -> List[Tuple[SlotKey, Adapter]]:
        """Gets the occupied slots in addressing order."""
        ret: List[Tuple[SlotKey, Adapter]] = []
        for key in self.slot_keys():
            adapter = self.slots[key]
            if adapter is not None:
                ret.append((key, adapter))
        return ret

    def base_parameters(self) -> List[Parameter]:
        """Gets the parameters of the base model."""
        return list(self.params.values())

    def adapter_parameters(self) -> List[Parameter]:
        """Gets the parameters of all attached adapters."""
        ret: List[Parameter] = []
        for _key, adapter in self.adapters():
            ret += adapter.parameters()
        return ret

    def trainable_parameters(self) -> List[Parameter]:
        """Gets every parameter an optimizer step updates."""
        return [param for param in self.base_parameters() + self.adapter_parameters() if param.trainable]

    def set_base_trainable(self, trainable: bool) -> None:
        """Freezes or unfreezes all base weights."""
        for param in self.params.values():
            param.trainable = trainable

    def project(self, layer: int, name: str, x: Matrix, tape: Optional[Tape], training: bool,
                rng: Optional[np.random.Generator]) -> Matrix:
        """Applies W_0 (plus the slot's adapter, if any) to the columns of x."""
        out = numcore.matmul(self.weight(layer, name).bind(tape), x)
        adapter = self.slots[(layer, name)]
        if adapter is not None:
            out = numcore.add(out, adapter.delta(x, tape, training, rng))
        return out

    def copy(self) -> "TransformerModel":
        """Gets an independent copy, adapters included."""
        return copy.deepcopy(self)

    def __layer_norm(self, prefix: str, x: Matrix, tape: Optional[Tape]) -> Matrix:
        return numcore.layer_norm_cols(x, self.params[prefix + ".gain"].bind(tape),
                                       self.params[prefix + ".bias"].bind(tape))

    def encode(self, tokens: Sequence[int], tape: Optional[Tape] = None, training: bool = False,
               rng: Optional[np.random.Generator] = None) -> Matrix:
        """Runs the encoder stack; returns d_model x len(tokens) hidden states."""
        if not tokens:
            raise errors.InputError("cannot encode an empty token sequence")
        if len(tokens) > self.config.max_len:
            raise errors.LengthError("%d tokens exceed max_len %d" % (len(tokens), self.config.max_len))
        head_dim = self.config.d_model // self.config.n_heads
        h = numcore.add(numcore.embed_cols(self.params["embed.token"].bind(tape), tokens),
                        numcore.embed_cols(self.params["embed.position"].bind(tape), range(len(tokens))))
        h = self.__layer_norm("embed.ln", h, tape)
        for layer in range(self.config.n_layers):
            query = self.project(layer, "W_q", h, tape, training, rng)
            key = self.project(layer, "W_k", h, tape, training, rng)
            value = self.project(layer, "W_v", h, tape, training, rng)
            heads = []
            for head in range(self.config.n_heads):
                start, stop = head * head_dim, (head + 1) * head_dim
                scores = numcore.matmul(numcore.transpose(numcore.slice_rows(query, start, stop)),
                                        numcore.slice_rows(key, start, stop))
                weights = numcore.softmax_rows(numcore.scale(scores, 1.0 / math.sqrt(head_dim)))
                heads.append(numcore.matmul(numcore.slice_rows(value, start, stop), numcore.transpose(weights)))
            attended = self.project(layer, "W_o", numcore.concat_rows(heads), tape, training, rng)
            h = self.__layer_norm("layer%d.ln_attn" % layer, numcore.add(h, attended), tape)
            hidden = numcore.gelu(self.project(layer, "W_f1", h, tape, training, rng))
            fed = self.project(layer, "W_f2", hidden, tape, training, rng)
            h = self.__layer_norm("layer%d.ln_ff" % layer, numcore.add(h, fed), tape)
        return h


def forward_mlm(model: TransformerModel, tokens: Sequence[int], masked_positions: Sequence[int],
                tape: Optional[Tape] = None, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Matrix:
    """
    Gets MLM logits (one row per masked position, vocab_size columns).

    tokens is the already corrupted input: the caller puts [MASK] (or a random / kept token) at the
    masked positions.
    """
    for position in masked_positions:
        if position < 0 or position >= len(tokens):
            raise errors.RangeError("masked position %d outside %d tokens" % (position, len(tokens)))
    hidden = model.encode(tokens, tape, training, rng)
    selected = numcore.take_cols(hidden, masked_positions)
    logits = numcore.add(numcore.matmul(model.params["head.weight"].bind(tape), selected),
                         model.params["head.bias"].bind(tape))
    return numcore.transpose(logits)


class MaskedExample(NamedTuple):
    """One corrupted sentence with its prediction targets."""
    input_ids: List[int]
    positions: List[int]
    targets: List[int]


def mlm_loss(model: TransformerModel, batch: Sequence[MaskedExample], tape: Optional[Tape] = None,
             training: bool = False, rng: Optional[np.random.Generator] = None) -> Matrix:
    """Mean over the batch of the per-sentence masked-token cross entropy, as a 1x1 matrix."""
    if not batch:
        raise errors.InputError("empty batch")
    total: Optional[Matrix] = None
    for example in batch:
        logits = forward_mlm(model, example.input_ids, example.positions, tape, training, rng)
        loss = numcore.cross_entropy(logits, example.targets)
        total = loss if total is None else numcore.add(total, loss)
    assert total is not None
    return numcore.scale(total, 1.0 / len(batch))


def pseudo_log_likelihood(model: TransformerModel, sentence: str) -> float:
    """Sums log P(w_t | sentence with position t masked) over all positions; higher is better."""
    ids = model.vocab.encode(sentence)
    if not ids:
        raise errors.InputError("sentence %r has no tokens" % sentence)
    total = 0.0
    for position, token_id in enumerate(ids):
        masked = list(ids)
        masked[position] = model.vocab.mask_id
        logits = forward_mlm(model, masked, [position])
        total += float(numcore.log_softmax_rows(logits).data[0, token_id])
    return total


def config_hash(model: TransformerModel) -> str:
    """Hashes the model config and vocabulary; adapters only load onto a model with the same hash."""
    payload = json.dumps({"config": model.config.to_dict(), "vocab": model.vocab.tokens},
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def matrix_to_json(data: np.ndarray) -> Dict[str, Any]:
    """Serializes an array as shape + flat row-major values; floats round-trip exactly."""
    return {"shape": [int(data.shape[0]), int(data.shape[1])], "data": [float(value) for value in data.ravel()]}


def matrix_from_json(blob: Dict[str, Any]) -> np.ndarray:
    """Inverse of matrix_to_json()."""
    rows, cols = blob["shape"]
    data = np.array(blob["data"], dtype=np.float64)
    if data.size != rows * cols:
        raise errors.InputError("array has %d values, shape says %dx%d" % (data.size, rows, cols))
    return data.reshape(rows, cols)


def save_model(model: TransformerModel, path: str) -> None:
    """Writes the base model (adapters excluded) as a JSON checkpoint."""
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "vocab": model.vocab.tokens,
        "params": {name: matrix_to_json(param.value.data) for name, param in model.params.items()},
    }
    with open(path, "w", encoding="utf-8") as stream:
        json.dump(blob, stream)
        stream.write("\n")


def load_model(path: str) -> TransformerModel:
    """Reads a checkpoint written by save_model()."""
    with open(path, "r", encoding="utf-8") as stream:
        blob = json.load(stream)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise errors.InputError("%s: not a version %d model checkpoint" % (path, CHECKPOINT_VERSION))
    model = TransformerModel(ModelConfig(**blob["config"]), Vocab(blob["vocab"]))
    if set(blob["params"]) != set(model.params):
        raise errors.InputError("%s: parameter names do not match the config" % path)
    for name, param in model.params.items():
        param.assign(matrix_from_json(blob["params"][name]))
    return model

# vim:set shiftwidth=4 softtabstop=4 expandtab:
