#!/usr/bin/env python3
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

"""The test_lora module covers the lora module."""

import json
import os
import tempfile
import unittest

import numpy as np

from lora import AdapterTargets
from lora import LoraAdapter
from lora import SvdAdapter
from minimlm import ModelConfig
from minimlm import TransformerModel
from numcore import Matrix
import errors
import lora
import minimlm
import numcore

CORPUS = ["you're right about the car", "your car is over there", "they're right there"]


def make_model(n_layers: int = 2) -> TransformerModel:
    """Builds a tiny model over CORPUS."""
    vocab = minimlm.build_vocab(CORPUS)
    config = ModelConfig(vocab_size=len(vocab), d_model=8, d_ff=12, n_layers=n_layers, n_heads=2, max_len=8)
    return TransformerModel(config, vocab)


def randomize(model: TransformerModel, seed: int = 3) -> None:
    """Gives every adapter parameter a non-trivial value."""
    rng = numcore.rng_stream(seed, "test", "randomize")
    for param in model.adapter_parameters():
        param.assign(rng.normal(0.0, 0.1, size=param.value.shape))


class TestLoraAdapter(unittest.TestCase):
    """Tests LoraAdapter."""
    def test_identity_at_init(self) -> None:
        """Tests that a fresh adapter leaves W0.x unchanged."""
        rng = numcore.rng_stream(0, "test", "identity")
        w0 = Matrix(rng.normal(size=(5, 4)))
        x = Matrix(rng.normal(size=(4, 3)))
        adapter = LoraAdapter(5, 4, 2, 16.0, 0.0, rng)
        self.assertEqual(lora.lora_forward(x, w0, adapter).tolist(), numcore.matmul(w0, x).tolist())

    def test_scalar(self) -> None:
        """Tests h = W0.x + (alpha / r) B.A.x on 1x1 values."""
        adapter = LoraAdapter(1, 1, 1, 1.0, 0.0, numcore.rng_stream(0, "test"))
        adapter.w_a.assign([[1.0]])
        adapter.w_b.assign([[2.0]])
        h = lora.lora_forward(Matrix([[1.0]]), Matrix([[5.0]]), adapter)
        self.assertEqual(h.tolist(), [[7.0]])

    def test_init_distribution(self) -> None:
        """Tests W_B = 0 and W_A ~ N(0, 1/r)."""
        adapter = LoraAdapter(4, 400, 4, 8.0, 0.0, numcore.rng_stream(0, "test", "init"))
        self.assertFalse(adapter.w_b.value.data.any())
        self.assertAlmostEqual(float(adapter.w_a.value.data.std()), 0.25, delta=0.02)
        self.assertEqual(adapter.scaling, 2.0)

    def test_merge(self) -> None:
        """Tests that the merged weight reproduces the adapter path."""
        rng = numcore.rng_stream(0, "test", "merge")
        w0 = Matrix(rng.normal(size=(6, 5)))
        x = Matrix(rng.normal(size=(5, 4)))
        adapter = LoraAdapter(6, 5, 3, 6.0, 0.0, rng)
        adapter.w_b.assign(rng.normal(size=(6, 3)))
        path = lora.lora_forward(x, w0, adapter).data
        merged = numcore.matmul(lora.merge_adapter(w0, adapter), x).data
        np.testing.assert_allclose(path, merged, rtol=0, atol=1e-10)

    def test_merge_random_cases(self) -> None:
        """Tests eval-mode adapter path against merged weights on many random shapes and values."""
        rng = numcore.rng_stream(0, "test", "merge-cases")
        for _ in range(1000):
            d1, d2, cols, rank = (int(value) for value in rng.integers(1, 7, size=4))
            adapter = LoraAdapter(d1, d2, rank, float(rng.uniform(0.5, 32.0)), 0.3, rng)
            adapter.w_b.assign(rng.normal(size=(d1, rank)))
            w0 = Matrix(rng.normal(size=(d1, d2)))
            x = Matrix(rng.normal(size=(d2, cols)))
            np.testing.assert_allclose(lora.lora_forward(x, w0, adapter).data,
                                       numcore.matmul(lora.merge_adapter(w0, adapter), x).data, rtol=0, atol=1e-10)

    def test_shape_mismatch(self) -> None:
        """Tests that an adapter must fit its weight."""
        adapter = LoraAdapter(3, 3, 1, 1.0, 0.0, numcore.rng_stream(0, "test"))
        with self.assertRaises(errors.ShapeError):
            lora.merge_adapter(Matrix(np.zeros((3, 4))), adapter)

    def test_bad_rank(self) -> None:
        """Tests that the rank must be positive."""
        with self.assertRaises(errors.RangeError):
            LoraAdapter(3, 3, 0, 1.0, 0.0, numcore.rng_stream(0, "test"))


class TestSvdAdapter(unittest.TestCase):
    """Tests SvdAdapter."""
    def test_zero_lambda(self) -> None:
        """Tests that Lambda starts at zero, so the update is zero."""
        adapter = SvdAdapter(4, 3, 5, numcore.rng_stream(0, "test"))
        self.assertFalse(adapter.merged_delta().any())
        self.assertEqual(adapter.effective_rank, 5)

    def test_all_pruned(self) -> None:
        """Tests that pruning every triplet gives W0."""
        rng = numcore.rng_stream(0, "test", "pruned")
        adapter = SvdAdapter(4, 3, 2, rng)
        adapter.lam.assign([[1.5], [-2.0]])
        adapter.set_active(np.zeros(2, dtype=bool))
        w0 = Matrix(rng.normal(size=(4, 3)))
        self.assertEqual(lora.merge_adapter(w0, adapter).tolist(), w0.tolist())
        self.assertEqual(adapter.trainable_count(), 0)

    def test_merge(self) -> None:
        """Tests P diag(Lambda) Q with one triplet masked; an active triplet counts d1 + d2 + 1 values."""
        rng = numcore.rng_stream(0, "test", "svd-merge")
        adapter = SvdAdapter(4, 3, 3, rng)
        adapter.lam.assign([[0.5], [2.0], [-1.0]])
        adapter.set_active(np.array([True, False, True]))
        p = adapter.p_vectors.value.data
        q = adapter.q_vectors.value.data
        expected = 0.5 * np.outer(p[:, 0], q[0]) - 1.0 * np.outer(p[:, 2], q[2])
        np.testing.assert_allclose(adapter.merged_delta(), expected, rtol=0, atol=1e-12)
        w0 = Matrix(rng.normal(size=(4, 3)))
        x = Matrix(rng.normal(size=(3, 2)))
        np.testing.assert_allclose(lora.lora_forward(x, w0, adapter).data,
                                   numcore.matmul(lora.merge_adapter(w0, adapter), x).data, rtol=0, atol=1e-10)
        self.assertEqual(adapter.trainable_count(), 2 * (4 + 3 + 1))

    def test_mask_shape(self) -> None:
        """Tests that the mask must cover every dimension."""
        adapter = SvdAdapter(4, 3, 3, numcore.rng_stream(0, "test"))
        with self.assertRaises(errors.ShapeError):
            adapter.set_active(np.ones(2, dtype=bool))


class TestAdapterTargets(unittest.TestCase):
    """Tests AdapterTargets."""
    def test_order(self) -> None:
        """Tests layer-major, then matrix-name addressing order."""
        targets = AdapterTargets([(1, "W_q"), (0, "W_f2"), (0, "W_q")])
        self.assertEqual(list(targets), [(0, "W_q"), (0, "W_f2"), (1, "W_q")])

    def test_unknown_name(self) -> None:
        """Tests that an unknown matrix name is a lookup error."""
        with self.assertRaises(LookupError):
            AdapterTargets([(0, "W_x")])

    def test_duplicate(self) -> None:
        """Tests that duplicates are rejected."""
        with self.assertRaises(errors.InputError):
            AdapterTargets([(0, "W_q"), (0, "W_q")])

    def test_missing_layer(self) -> None:
        """Tests that attaching to a layer the model lacks is a lookup error."""
        model = make_model(n_layers=1)
        with self.assertRaises(LookupError):
            lora.attach_lora(model, AdapterTargets([(3, "W_q")]))


class TestAttach(unittest.TestCase):
    """Tests attach_lora() and attach_svd()."""
    def test_identity_model(self) -> None:
        """Tests that attaching fresh adapters keeps the model output."""
        model = make_model()
        ids = model.vocab.encode("your car is over there")
        before = minimlm.forward_mlm(model, ids, [0, 2]).tolist()
        lora.attach_lora(model, AdapterTargets.for_layers(model))
        self.assertEqual(minimlm.forward_mlm(model, ids, [0, 2]).tolist(), before)
        other = make_model()
        lora.attach_svd(other, AdapterTargets.for_layers(other), r_max=3)
        self.assertEqual(minimlm.forward_mlm(other, ids, [0, 2]).tolist(), before)

    def test_freezes_base(self) -> None:
        """Tests that only adapter parameters stay trainable."""
        model = make_model()
        lora.attach_lora(model, AdapterTargets.for_layers(model, [1], ["W_q", "W_v"]), rank=2)
        names = [param.name for param in model.trainable_parameters()]
        self.assertEqual(names, ["layer1.W_q.lora_A", "layer1.W_q.lora_B", "layer1.W_v.lora_A", "layer1.W_v.lora_B"])

    def test_single_layer_count(self) -> None:
        """Tests the trainable share when only one layer is adapted."""
        model = make_model()
        total_base = sum(param.numel for param in model.base_parameters())
        lora.attach_lora(model, AdapterTargets.for_layers(model, [0]), rank=2)
        d_model, d_ff = 8, 12
        expected = 2 * (4 * (d_model + d_model) + (d_ff + d_model) + (d_model + d_ff))
        trainable, total = lora.parameter_counts(model)
        self.assertEqual(trainable, expected)
        self.assertEqual(total, total_base + expected)
        self.assertAlmostEqual(lora.trainable_fraction(model), expected / (total_base + expected), places=15)

    def test_occupied(self) -> None:
        """Tests that an occupied slot can't be attached to twice."""
        model = make_model()
        targets = AdapterTargets([(0, "W_q")])
        lora.attach_lora(model, targets)
        with self.assertRaises(errors.StateError):
            lora.attach_svd(model, targets, r_max=2)

    def test_merge_into_model(self) -> None:
        """Tests that folding adapters into the base keeps the output."""
        model = make_model()
        lora.attach_lora(model, AdapterTargets.for_layers(model), rank=2, dropout_p=0.0)
        randomize(model)
        ids = model.vocab.encode("they're right there")
        before = minimlm.forward_mlm(model, ids, [1]).data
        lora.merge_into_model(model)
        self.assertEqual(model.adapters(), [])
        np.testing.assert_allclose(minimlm.forward_mlm(model, ids, [1]).data, before, rtol=0, atol=1e-9)

    def test_detach(self) -> None:
        """Tests that removing trained adapters gives back the exact base output."""
        model = make_model()
        ids = model.vocab.encode("your car is over there")
        before = minimlm.forward_mlm(model, ids, [0, 3]).data.copy()
        lora.attach_lora(model, AdapterTargets.for_layers(model, [0]), rank=2)
        lora.attach_svd(model, AdapterTargets.for_layers(model, [1]), r_max=3)
        randomize(model)
        self.assertFalse(np.array_equal(minimlm.forward_mlm(model, ids, [0, 3]).data, before))
        removed = lora.detach_adapters(model)
        self.assertEqual(len(removed), 12)
        self.assertEqual(model.adapters(), [])
        self.assertTrue(np.array_equal(minimlm.forward_mlm(model, ids, [0, 3]).data, before))

    def test_default_r_max(self) -> None:
        """Tests ceil(1.5 r)."""
        self.assertEqual(lora.default_r_max(8), 12)
        self.assertEqual(lora.default_r_max(3), 5)


class TestAdapterFile(unittest.TestCase):
    """Tests save_adapters() and load_adapters()."""
    def test_round_trip(self) -> None:
        """Tests that a reloaded set of adapters gives the same outputs."""
        model = make_model()
        targets = AdapterTargets([(0, "W_q"), (1, "W_f1")])
        lora.attach_svd(model, AdapterTargets([(0, "W_v")]), r_max=3)
        lora.attach_lora(model, targets, rank=2)
        randomize(model)
        lora.svd_adapters(model)[0][1].set_active(np.array([True, False, True]))
        ids = model.vocab.encode("you're right about the car")
        expected = minimlm.forward_mlm(model, ids, [0, 4]).tolist()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "adapters.json")
            lora.save_adapters(model, path)
            loaded = lora.load_adapters(make_model(), path)
        self.assertEqual(minimlm.forward_mlm(loaded, ids, [0, 4]).tolist(), expected)
        self.assertEqual([key for key, _adapter in loaded.adapters()], [(0, "W_q"), (0, "W_v"), (1, "W_f1")])

    def test_hash_mismatch(self) -> None:
        """Tests that adapters don't load onto a different base model."""
        model = make_model()
        lora.attach_lora(model, AdapterTargets([(0, "W_q")]))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "adapters.json")
            lora.save_adapters(model, path)
            with self.assertRaises(errors.AdapterLoadError):
                lora.load_adapters(make_model(n_layers=1), path)

    def test_bad_kind(self) -> None:
        """Tests that an unknown adapter kind is rejected."""
        model = make_model()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "adapters.json")
            blob = {
                "format": lora.ADAPTER_FORMAT,
                "version": lora.ADAPTER_VERSION,
                "config_hash": minimlm.config_hash(model),
                "adapters": [{"layer": 0, "matrix": "W_q", "kind": "prefix"}],
            }
            with open(path, "w", encoding="utf-8") as stream:
                json.dump(blob, stream)
            with self.assertRaises(errors.AdapterLoadError):
                lora.load_adapters(model, path)


if __name__ == '__main__':
    unittest.main()
