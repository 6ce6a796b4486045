#!/usr/bin/env python3

import os.path as op
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.append(str(Path(__file__).resolve().parents[1]))

from uailab.checkpoint import CheckpointError
from uailab.nn import DimensionError
from uailab.policy import ActionTriple, DemoRecord, HighLevelCommand, PolicyConfig, PolicyNet
from uailab.town import Route, Task, Town, benchmark_routes
from uailab.translator import (
    STYLE_DIM,
    StylePool,
    Translator,
    TranslatorConfig,
    decode,
    discriminator_accuracy,
    encode,
    fixed_style_code,
    oracle_translate,
    reconstruction_error,
    style_reconstruction_error,
    train_translator,
    translate_to_train,
)
from uailab.world import TRAINING_STYLES, StyleId, new_episode, render

OBS = 16


def small_config(**kwargs) -> TranslatorConfig:
    base = dict(obs_dim=OBS, content_dim=4, hidden=16, disc_hidden=16, iterations=150, batch_size=16, lr=3e-3)
    base.update(kwargs)
    return TranslatorConfig(**base)


def frame_sets(n: int = 120, seed: int = 0):
    """Frames on a 3-D manifold; the test domain is a darker, flatter copy."""
    rng = np.random.default_rng(seed)
    mix = rng.standard_normal((3, OBS))
    clean = 1 / (1 + np.exp(-rng.standard_normal((n, 3)) @ mix))
    return clean, 0.2 + 0.5 * clean[rng.permutation(n)]


def make_records(per_style: int = 12):
    rng = np.random.default_rng(1)
    out = []
    for style in TRAINING_STYLES:
        for _ in range(per_style):
            out.append(
                DemoRecord(
                    len(out),
                    rng.uniform(0, 1, OBS),
                    1.0,
                    HighLevelCommand.FOLLOW_LANE,
                    ActionTriple(0.5, 0.0, 0.0),
                    style.value,
                )
            )
    return out


class TestCodes(unittest.TestCase):

    def setUp(self):
        self.translator = Translator(small_config(), seed=0)
        self.train, self.test = frame_sets(8)

    def test_encode_decode_shapes(self):
        c, s = encode(self.translator.train, self.train[0])
        self.assertEqual(c.shape, (4,))
        self.assertEqual(s.shape, (STYLE_DIM,))
        c, s = encode(self.translator.test, self.test)
        self.assertEqual((c.shape, s.shape), ((8, 4), (8, STYLE_DIM)))
        out = decode(self.translator.train, c, s)
        self.assertEqual(out.shape, (8, OBS))
        self.assertTrue(np.all((out >= 0) & (out <= 1)))

    def test_translate_to_train(self):
        styles = list(np.random.default_rng(3).standard_normal((3, STYLE_DIM)))
        frames = translate_to_train(self.translator, self.test[0], styles)
        self.assertEqual(len(frames), 3)
        self.assertTrue(all(f.shape == (OBS,) for f in frames))
        self.assertFalse(np.allclose(frames[0], frames[1]))
        # same content and style give the same frame
        again = translate_to_train(self.translator, self.test[0], styles[:1])
        np.testing.assert_array_equal(again[0], frames[0])
        with self.assertRaises(ValueError):
            translate_to_train(self.translator, self.test[0], [])

    def test_dimension_errors(self):
        with self.assertRaises(DimensionError):
            encode(self.translator.train, np.zeros(OBS + 2))
        with self.assertRaises(DimensionError):
            decode(self.translator.train, np.zeros(5), np.zeros(STYLE_DIM))

    def test_parameter_layout(self):
        names = set(self.translator.params)
        for prefix in ("enc.train.", "dec.train.", "enc.test.", "dec.test.", "disc.train.", "disc.test."):
            self.assertTrue(any(n.startswith(prefix) for n in names), prefix)
        gen = set(self.translator.generator_names())
        disc = set(self.translator.discriminator_names())
        self.assertFalse(gen & disc)
        self.assertEqual(gen | disc, names)


class TestTraining(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.train, cls.test = frame_sets(120)
        cls.result = train_translator(cls.train, cls.test, small_config(seed=4))

    def test_curves(self):
        curves = self.result.curves
        self.assertEqual(len(curves.image), 150)
        self.assertEqual(len(list(curves.rows())), 150)
        self.assertLess(np.mean(curves.image[-20:]), np.mean(curves.image[:20]))

    def test_separate_optimizers(self):
        translator = Translator(small_config(iterations=1), seed=9)
        before = {n: translator.params[n].copy() for n in translator.discriminator_names()}
        result = train_translator(self.train, self.test, small_config(iterations=1, w_adversarial=0.0), translator)
        self.assertEqual(result.adam["gen"].step, 1)
        self.assertEqual(result.adam["disc"].step, 1)
        self.assertEqual(set(result.adam["gen"].m), set(translator.generator_names()))
        self.assertEqual(set(result.adam["disc"].m), set(translator.discriminator_names()))
        self.assertTrue(any(not np.array_equal(before[n], translator.params[n]) for n in before))

    def test_measurements(self):
        translator = self.result.translator
        rng = np.random.default_rng(0)
        err = reconstruction_error(translator.train, self.train[:20])
        self.assertGreaterEqual(err, 0.0)
        self.assertLess(err, reconstruction_error(Translator(small_config(), seed=4).train, self.train[:20]))
        self.assertGreaterEqual(style_reconstruction_error(translator, self.test, rng, n=20), 0.0)
        acc = discriminator_accuracy(translator, self.train[:30], self.test[:30], rng)
        self.assertGreaterEqual(acc, 0.0)
        self.assertLessEqual(acc, 1.0)

    def test_empty_batches(self):
        with self.assertRaises(ValueError):
            train_translator(np.zeros((0, OBS)), self.test, small_config())

    def test_checkpoint_round_trip(self):
        with tempfile.TemporaryDirectory() as root:
            path = op.join(root, "translator.ckpt")
            self.result.translator.save(path, {"iterations": 150}, self.result.adam)
            loaded, meta, adam = Translator.load(path)
            policy_path = op.join(root, "policy.ckpt")
            PolicyNet(PolicyConfig(obs_dim=OBS, trunk=(4,), branch_hidden=2)).save(policy_path)
            with self.assertRaises(CheckpointError):
                Translator.load(policy_path)
        self.assertEqual(meta["iterations"], 150)
        self.assertEqual(sorted(adam), ["disc", "gen"])
        self.assertEqual(adam["gen"].step, 150)
        for name in self.result.translator.params:
            np.testing.assert_array_equal(loaded.params[name], self.result.translator.params[name])
        np.testing.assert_array_equal(
            encode(loaded.test, self.test[:3])[0], encode(self.result.translator.test, self.test[:3])[0]
        )


class TestStylePool(unittest.TestCase):

    def setUp(self):
        self.records = make_records()

    def test_build_save_load(self):
        pool = StylePool.build(self.records, np.random.default_rng(0), per_style=10)
        self.assertEqual(pool.styles, [s.value for s in TRAINING_STYLES])
        self.assertEqual(len(pool), 30)
        by_id = {r.id: r for r in self.records}
        for style, ids in pool.ids.items():
            self.assertTrue(all(by_id[i].style == style for i in ids))

        with tempfile.TemporaryDirectory() as root:
            path = op.join(root, "style_pool.json")
            pool.save(path)
            loaded = StylePool.load(path, self.records)
            with self.assertRaises(ValueError):
                StylePool.load(path, self.records[:5])
        self.assertEqual(loaded.ids, pool.ids)
        for style in pool.styles:
            np.testing.assert_array_equal(loaded.frames[style], pool.frames[style])

    def test_too_few_frames(self):
        with self.assertRaises(ValueError):
            StylePool.build(self.records, np.random.default_rng(0), per_style=13)

    def test_codes(self):
        translator = Translator(small_config(), seed=1)
        pool = StylePool.build(self.records, np.random.default_rng(0), per_style=10).encode_with(translator)
        self.assertEqual(pool.codes["daytime"].shape, (10, STYLE_DIM))
        code = fixed_style_code(translator, pool, "clear-sunset")
        np.testing.assert_allclose(code, pool.codes["clear-sunset"].mean(axis=0))
        with self.assertRaises(ValueError):
            fixed_style_code(translator, pool, "daytime-hard-rain")


class TestOracle(unittest.TestCase):

    def test_oracle_translate(self):
        town = Town()
        route = Route(town, benchmark_routes(town, Task.STRAIGHT, 1)[0])
        state = new_episode(town, route, seed=3)
        for style in TRAINING_STYLES:
            np.testing.assert_array_equal(oracle_translate(state, style.value), render(state, style))
        with self.assertRaises(ValueError):
            oracle_translate(state, StyleId.DAYTIME_HARD_RAIN)
        with self.assertRaises(ValueError):
            oracle_translate(state, "fog")


if __name__ == "__main__":
    unittest.main()
