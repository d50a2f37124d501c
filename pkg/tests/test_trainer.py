#!/usr/bin/env python3
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.

"""The test_trainer module covers the trainer module."""

from typing import List
from typing import Optional
import csv
import os
import tempfile
import unittest

import numpy as np

from minimlm import ModelConfig
from minimlm import TransformerModel
from rankschedule import RankSchedule
from trainer import Stage
from trainer import Strategy
from trainer import TrainConfig
import errors
import lora
import minimlm
import numcore
import rankschedule
import synth
import trainer

CORPUS = [
    "put the car over there",
    "put the book over there",
    "they're right about the car",
    "your book is over there",
]


def make_model(corpus: Optional[List[str]] = None, seed: int = 0) -> TransformerModel:
    """Builds a tiny model."""
    vocab = minimlm.build_vocab(corpus or CORPUS)
    config = ModelConfig(vocab_size=len(vocab), d_model=16, d_ff=16, n_layers=2, n_heads=2, max_len=8, seed=seed)
    return TransformerModel(config, vocab)


def make_config(strategy: Strategy, total_steps: int = 30, warmup_steps: int = 5, **kwargs: object) -> TrainConfig:
    """Builds a short config; dynamic-rank strategies get a matching schedule."""
    schedule = None
    if strategy in trainer.DYNAMIC_RANK:
        schedule = RankSchedule.create(r_target=2, t_init=10, t_final=5, total_steps=total_steps)
    cfg = TrainConfig(strategy=strategy, schedule=schedule, total_steps=total_steps, warmup_steps=warmup_steps,
                      batch_size=2, lora_rank=2, lora_alpha=4.0, lora_dropout=0.0)
    for key, value in kwargs.items():
        setattr(cfg, key, value)
    return cfg


def mean(values: list) -> float:
    """Gets the arithmetic mean."""
    return sum(values) / len(values)


class TestStages(unittest.TestCase):
    """Tests stage_of_step() and stage_boundaries()."""
    def test_s3(self) -> None:
        """Tests the four stages of mixed-rank staging."""
        cfg = make_config(Strategy.S3, total_steps=60, warmup_steps=10)
        cfg.schedule = RankSchedule.create(r_target=2, t_init=20, t_final=10, total_steps=60)
        self.assertEqual(trainer.stage_of_step(0, cfg), Stage.WARMUP)
        self.assertEqual(trainer.stage_of_step(9, cfg), Stage.WARMUP)
        self.assertEqual(trainer.stage_of_step(10, cfg), Stage.RANK_INIT)
        self.assertEqual(trainer.stage_of_step(20, cfg), Stage.RANK_DECAY)
        self.assertEqual(trainer.stage_of_step(49, cfg), Stage.RANK_DECAY)
        self.assertEqual(trainer.stage_of_step(50, cfg), Stage.FINAL)
        self.assertEqual(trainer.stage_of_step(59, cfg), Stage.FINAL)
        with self.assertRaises(errors.RangeError):
            trainer.stage_of_step(60, cfg)

    def test_plain_strategies(self) -> None:
        """Tests the stage labels of FT, LoRA and S2."""
        self.assertEqual(trainer.stage_of_step(29, make_config(Strategy.FT)), Stage.WARMUP)
        self.assertEqual(trainer.stage_of_step(0, make_config(Strategy.LORA)), Stage.FINAL)
        self.assertEqual(trainer.stage_of_step(4, make_config(Strategy.S2)), Stage.WARMUP)
        self.assertEqual(trainer.stage_of_step(5, make_config(Strategy.S2)), Stage.FINAL)
        self.assertEqual(trainer.stage_boundaries(make_config(Strategy.S1)),
                         {"warmup_end": 0, "rank_init_end": 10, "rank_decay_end": 25, "total": 30})


class TestValidate(unittest.TestCase):
    """Tests TrainConfig.validate()."""
    def test_missing_schedule(self) -> None:
        """Tests that S1 needs a schedule."""
        cfg = make_config(Strategy.LORA)
        cfg.strategy = Strategy.S1
        with self.assertRaises(errors.ConfigError) as context:
            cfg.validate()
        self.assertEqual(context.exception.field, "schedule")

    def test_warmup_after_decay(self) -> None:
        """Tests that the S3 warm-up must end before the rank decay."""
        cfg = make_config(Strategy.S3, warmup_steps=11)
        with self.assertRaises(errors.ConfigError) as context:
            cfg.validate()
        self.assertEqual(context.exception.field, "train.warmup_steps")

    def test_schedule_length(self) -> None:
        """Tests that the schedule must span the run."""
        cfg = make_config(Strategy.S1)
        cfg.total_steps = 40
        with self.assertRaises(errors.ConfigError) as context:
            cfg.validate()
        self.assertEqual(context.exception.field, "schedule.total_steps")


class TestAdam(unittest.TestCase):
    """Tests Adam."""
    def test_first_step(self) -> None:
        """Tests that the first bias-corrected step moves by lr against the gradient sign."""
        param = numcore.Parameter("w", [[1.0, -1.0]])
        trainer.Adam().step([param], {"w": np.array([[0.5, -2.0]])}, 0.1)
        np.testing.assert_allclose(param.value.data, [[0.9, -0.9]], rtol=0, atol=1e-6)


class TestLearningRate(unittest.TestCase):
    """Tests learning_rate()."""
    def test_adapter_steps(self) -> None:
        """Tests that only LoRA adapter steps use lora_lr."""
        cfg = make_config(Strategy.S2, lr=0.01, lora_lr=0.001)
        self.assertEqual(trainer.learning_rate(cfg, 0), 0.01)
        self.assertEqual(trainer.learning_rate(cfg, 5), 0.001)
        self.assertEqual(trainer.learning_rate(make_config(Strategy.S3, lr=0.01, lora_lr=0.001), 20), 0.01)
        self.assertEqual(trainer.learning_rate(make_config(Strategy.LORA, lr=0.01, lora_lr=None), 0), 0.01)

    def test_ramp(self) -> None:
        """Tests the linear ramp over the first steps."""
        cfg = make_config(Strategy.LORA, lora_lr=0.002, lr_warmup_steps=4)
        self.assertAlmostEqual(trainer.learning_rate(cfg, 0), 0.0005)
        self.assertEqual(trainer.learning_rate(cfg, 4), 0.002)

    def test_invalid(self) -> None:
        """Tests that a negative adapter learning rate is rejected."""
        with self.assertRaises(errors.ConfigError) as context:
            make_config(Strategy.LORA, lora_lr=-1.0).validate()
        self.assertEqual(context.exception.field, "train.lora_lr")


class TestMasking(unittest.TestCase):
    """Tests mask_sentence() and make_batch()."""
    def test_at_least_one(self) -> None:
        """Tests that at least one position is always masked."""
        vocab = minimlm.build_vocab(CORPUS)
        ids = vocab.encode("put the car")
        rng = numcore.rng_stream(0, "test", "mask")
        for _ in range(50):
            example = trainer.mask_sentence(ids, vocab, 0.01, rng)
            self.assertGreaterEqual(len(example.positions), 1)
            self.assertEqual(example.targets, [ids[position] for position in example.positions])

    def test_batch_deterministic(self) -> None:
        """Tests that the batch of a step depends only on the seed and the step."""
        vocab = minimlm.build_vocab(CORPUS)
        encoded = trainer.encode_corpus(CORPUS, vocab, 8)
        cfg = make_config(Strategy.LORA)
        self.assertEqual(trainer.make_batch(encoded, vocab, cfg, 3), trainer.make_batch(encoded, vocab, cfg, 3))
        self.assertEqual(len(trainer.make_batch(encoded, vocab, cfg, 3)), cfg.batch_size)

    def test_empty_corpus(self) -> None:
        """Tests that a corpus without tokens is rejected."""
        vocab = minimlm.build_vocab(CORPUS)
        with self.assertRaises(errors.InputError):
            trainer.encode_corpus(["", "  "], vocab, 8)


class TestRunStrategy(unittest.TestCase):
    """Tests run_strategy()."""
    def test_every_strategy_learns(self) -> None:
        """Tests that every strategy cuts the loss by at least 30% on the synthetic corpus."""
        corpus = synth.generate_corpus(200, 0)
        vocab = minimlm.build_vocab(corpus)
        schedule = RankSchedule.create(r_target=8, t_init=100, t_final=50, total_steps=300)
        for strategy in Strategy:
            cfg = TrainConfig(strategy=strategy, schedule=schedule)
            model = TransformerModel(ModelConfig(vocab_size=len(vocab)), vocab)
            _model, log = trainer.run_strategy(cfg, corpus, model)
            losses = log.losses()
            self.assertLessEqual(mean(losses[-10:]), 0.7 * mean(losses[:10]), strategy.value)
            if strategy == Strategy.FT:
                self.assertEqual(set(log.stages()), {"warmup"})
                self.assertEqual(set(log.budgets()), {0})

    def test_zero_lr(self) -> None:
        """Tests that lr = 0 leaves every parameter unchanged."""
        model = make_model()
        before = {name: np.array(param.value.data) for name, param in model.params.items()}
        cfg = make_config(Strategy.S3, lr=0.0)
        model, _log = trainer.run_strategy(cfg, CORPUS, model)
        for name, param in model.params.items():
            self.assertTrue(np.array_equal(param.value.data, before[name]), name)
        for _key, adapter in lora.svd_adapters(model):
            self.assertFalse(adapter.lam.value.data.any())

    def test_frozen_base(self) -> None:
        """Tests that LoRA training keeps the base weights bit-identical."""
        model = make_model()
        before = {name: np.array(param.value.data) for name, param in model.params.items()}
        model, log = trainer.run_strategy(make_config(Strategy.LORA), CORPUS, model)
        for name, param in model.params.items():
            self.assertTrue(np.array_equal(param.value.data, before[name]), name)
        self.assertTrue(any(param.value.data.any() for _key, adapter in model.adapters()
                            for param in adapter.parameters() if param.name.endswith("lora_B")))
        self.assertEqual(set(log.budgets()), {2 * 12})

    def test_s1_budget_trace(self) -> None:
        """Tests that S1 keeps exactly the scheduled number of triplets after every step."""
        cfg = make_config(Strategy.S1)
        model, log = trainer.run_strategy(cfg, CORPUS, make_model())
        schedule = cfg.effective_schedule()
        expected = [rankschedule.budget_at_step(t, schedule, 12) for t in range(cfg.total_steps)]
        self.assertEqual(log.budgets(), expected)
        self.assertEqual(expected[0], 3 * 12)
        self.assertEqual(expected[-1], 2 * 12)
        self.assertEqual(rankschedule.active_triplets(lora.svd_adapters(model)), 2 * 12)
        self.assertTrue(all(event.action in ("prune", "reactivate") for event in log.prune_events))
        self.assertTrue(log.prune_events)

    def test_s3_trace(self) -> None:
        """Tests that S3 starts with a full-model warm-up and never grows the rank afterwards."""
        cfg = make_config(Strategy.S3)
        model, log = trainer.run_strategy(cfg, CORPUS, make_model())
        self.assertEqual(log.stages()[:5], ["warmup"] * 5)
        self.assertEqual(log.budgets()[:5], [0] * 5)
        budgets = log.budgets()[5:]
        for before, after in zip(budgets, budgets[1:]):
            self.assertLessEqual(after, before)
        self.assertEqual(log.trainables()[0], sum(param.numel for param in model.base_parameters()))
        self.assertFalse(any(param.trainable for param in model.base_parameters()))

    def test_s2_without_warmup(self) -> None:
        """Tests that S2 with no warm-up steps is vanilla LoRA."""
        _model, lora_log = trainer.run_strategy(make_config(Strategy.LORA), CORPUS, make_model())
        _model, s2_log = trainer.run_strategy(make_config(Strategy.S2, warmup_steps=0), CORPUS, make_model())
        self.assertEqual(s2_log.records, lora_log.records)

    def test_s3_without_warmup(self) -> None:
        """Tests that S3 with no warm-up steps is S1."""
        _model, s1_log = trainer.run_strategy(make_config(Strategy.S1), CORPUS, make_model())
        _model, s3_log = trainer.run_strategy(make_config(Strategy.S3, warmup_steps=0), CORPUS, make_model())
        self.assertEqual(s3_log.records, s1_log.records)
        self.assertEqual(s3_log.prune_events, s1_log.prune_events)

    def test_rerun(self) -> None:
        """Tests that two runs with the same seed produce the same log and weights."""
        first, first_log = trainer.run_strategy(make_config(Strategy.S3, lora_dropout=0.1), CORPUS, make_model())
        second, second_log = trainer.run_strategy(make_config(Strategy.S3, lora_dropout=0.1), CORPUS, make_model())
        self.assertEqual(first_log.records, second_log.records)
        for (key, adapter), (_other_key, other) in zip(first.adapters(), second.adapters()):
            for param, other_param in zip(adapter.parameters(), other.parameters()):
                self.assertTrue(np.array_equal(param.value.data, other_param.value.data), key)

    def test_seed_changes_run(self) -> None:
        """Tests that a different seed gives a different loss trace."""
        _model, first = trainer.run_strategy(make_config(Strategy.LORA, seed=0), CORPUS, make_model())
        _model, second = trainer.run_strategy(make_config(Strategy.LORA, seed=1), CORPUS, make_model())
        self.assertNotEqual(first.losses(), second.losses())

    def test_divergence(self) -> None:
        """Tests that an overflowing run stops with the failing step."""
        cfg = make_config(Strategy.FT, lr=1e300)
        with self.assertRaises(errors.DivergenceError) as context:
            trainer.run_strategy(cfg, CORPUS, make_model())
        self.assertGreater(context.exception.step, 0)
        self.assertIn("diverged at step", str(context.exception))

    def test_occupied_model(self) -> None:
        """Tests that the model must come without adapters."""
        model = make_model()
        lora.attach_lora(model, lora.AdapterTargets([(0, "W_q")]))
        with self.assertRaises(errors.StateError):
            trainer.run_strategy(make_config(Strategy.LORA), CORPUS, model)

    def test_orthogonality(self) -> None:
        """Tests that the regularizer runs and stays finite."""
        cfg = make_config(Strategy.S1, orth_reg=0.1, sensitivity_ema=0.5, lr_warmup_steps=5)
        _model, log = trainer.run_strategy(cfg, CORPUS, make_model())
        self.assertEqual(len(log.records), cfg.total_steps)

    def test_checkpoints(self) -> None:
        """Tests that the checkpoint hook fires every checkpoint_every steps."""
        steps = []
        cfg = make_config(Strategy.LORA, total_steps=10, checkpoint_every=4)
        trainer.run_strategy(cfg, CORPUS, make_model(), lambda step, _model: steps.append(step))
        self.assertEqual(steps, [4, 8])


class TestTrainLog(unittest.TestCase):
    """Tests TrainLog."""
    def test_csv(self) -> None:
        """Tests the header and one row."""
        log = trainer.TrainLog()
        log.append(trainer.StepRecord(0, 1.25, 24, 480, "final"))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "train_log.csv")
            log.write_csv(path)
            with open(path, "r", encoding="utf-8") as stream:
                rows = list(csv.reader(stream))
        self.assertEqual(rows, [trainer.TRAIN_LOG_FIELDS, ["0", "1.25", "24", "480", "final"]])


if __name__ == '__main__':
    unittest.main()
