#!/usr/bin/env python3

import pickle
import sys
import unittest
from collections import Counter
from dataclasses import replace
from pathlib import Path
from unittest import mock

import numpy as np

sys.path.append(str(Path(__file__).resolve().parents[1]))

from uailab import deploy
from uailab.benchmark import BenchmarkSuite, Observation, run_suite
from uailab.deploy import (
    AgentFactory,
    CILAgent,
    DeployModels,
    SelectionTrace,
    Strategy,
    StrategyKind,
    UAILAgent,
    deploy_step,
    make_styles,
    select_action,
)
from uailab.expert import CollectConfig, ExpertAgent, collect_demos
from uailab.policy import (
    ActionTriple,
    DemoRecord,
    HighLevelCommand,
    PolicyConfig,
    PolicyNet,
    PolicyOutput,
    TrainConfig,
    UncertaintyTriple,
    train_policy,
)
from uailab.town import Route, Task, Town
from uailab.translator import STYLE_DIM, StylePool, Translator, TranslatorConfig
from uailab.world import OBS_DIM, TEST_STYLE, TRAINING_STYLES, StyleId, new_episode, render, step


def out(action, log_vars=None):
    return PolicyOutput(ActionTriple(*action), None if log_vars is None else UncertaintyTriple(*log_vars))


def make_models(seed: int = 0) -> DeployModels:
    rng = np.random.default_rng(seed)
    translator = Translator(TranslatorConfig(obs_dim=OBS_DIM, content_dim=4, hidden=8, disc_hidden=8), seed=seed)
    records = [
        DemoRecord(i, rng.uniform(0, 1, OBS_DIM), 0.0, HighLevelCommand.FOLLOW_LANE, ActionTriple(0.5, 0.0, 0.0), s.value)
        for i, s in enumerate(TRAINING_STYLES * 3)
    ]
    pool = StylePool.build(records, rng, per_style=2)
    return DeployModels(translator, pool.encode_with(translator))


def make_policy(heads: str = "separate") -> PolicyNet:
    return PolicyNet(PolicyConfig(obs_dim=OBS_DIM, trunk=(16,), branch_hidden=8, heads=heads), seed=0)


class TestStrategy(unittest.TestCase):

    def test_parse(self):
        s = Strategy.parse("stochastic-cross")
        self.assertEqual(s.kind, StrategyKind.STOCHASTIC_CROSS)
        self.assertEqual(s.candidates, 3)
        self.assertTrue(s.stochastic and s.needs_translator and s.needs_pool)

        s = Strategy.parse("stochastic-random:5")
        self.assertEqual((s.m, s.candidates), (5, 5))
        self.assertFalse(s.needs_pool)

        s = Strategy.parse("deterministic-single:daytime:learned")
        self.assertEqual((s.style, s.mode), ("daytime", "learned"))
        self.assertFalse(s.stochastic)
        self.assertTrue(s.needs_translator and s.needs_pool)

        s = Strategy.parse("deterministic-single")
        self.assertIsNone(s.style)
        self.assertEqual(s.mode, "oracle")
        self.assertFalse(s.needs_translator)
        self.assertFalse(Strategy.parse("direct").stochastic)

    def test_oracle_stochastic(self):
        self.assertEqual(Strategy.parse("stochastic-cross").mode, "learned")
        for text in ("stochastic-cross:oracle", "stochastic-random:4:oracle", "stochastic-single:daytime:oracle"):
            s = Strategy.parse(text)
            self.assertEqual(s.mode, "oracle", text)
            self.assertTrue(s.stochastic)
            self.assertFalse(s.needs_translator or s.needs_pool, text)

    def test_str_round_trip(self):
        for text in (
            "direct",
            "stochastic-cross",
            "stochastic-random:7",
            "stochastic-single:clear-sunset",
            "stochastic-single",
            "deterministic-single:daytime-after-rain:oracle",
            "stochastic-cross:oracle",
            "stochastic-random:2:oracle",
            "stochastic-single::oracle",
            "stochastic-single:daytime:learned",
        ):
            self.assertEqual(Strategy.parse(str(Strategy.parse(text))), Strategy.parse(text), text)

    def test_rejected(self):
        for text in (
            "fog",
            "direct:3",
            "stochastic-random:0",
            "stochastic-random:1:2",
            "stochastic-single:daytime-hard-rain",
            "stochastic-single:daytime:magic",
            "stochastic-cross:daytime",
            "stochastic-cross:oracle:3",
            "deterministic-single:daytime:magic",
        ):
            with self.assertRaises(ValueError, msg=text):
                Strategy.parse(text)


class TestSelection(unittest.TestCase):

    def test_per_dimension(self):
        a = out((0.1, 0.2, 0.3), (0.0, 5.0, 1.0))
        b = out((0.4, 0.5, 0.6), (1.0, -1.0, 1.0))
        action, trace = select_action([a, b])
        # the tie in the last dimension goes to the first candidate
        self.assertEqual(trace.chosen, [0, 1, 0])
        self.assertEqual(action, ActionTriple(0.1, 0.5, 0.3))
        self.assertEqual(trace.replay(), action)
        self.assertEqual(SelectionTrace.from_dict(trace.to_dict()), trace)

    def test_whole_candidate(self):
        a = out((0.1, 0.2, 0.3), (0.0, 5.0, 1.0))
        b = out((0.4, 0.5, 0.6), (1.0, -1.0, 1.0))
        action, trace = select_action([a, b], per_dimension=False)
        self.assertEqual(trace.chosen, [1, 1, 1])
        self.assertEqual(action, b.action)

    def test_random_candidates(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            acts = rng.uniform(0, 1, (4, 3))
            u = rng.standard_normal((4, 3))
            action, trace = select_action([out(a, v) for a, v in zip(acts, u)])
            for d in range(3):
                j = int(np.argmin(u[:, d]))
                self.assertEqual(trace.chosen[d], j)
                self.assertEqual(action[d], acts[j, d])

    def test_without_uncertainty(self):
        action, trace = select_action([out((0.3, 0.0, 0.0))])
        self.assertEqual(action, ActionTriple(0.3, 0.0, 0.0))
        self.assertIsNone(trace.log_vars)
        with self.assertRaises(ValueError):
            select_action([out((0.3, 0.0, 0.0)), out((0.2, 0.0, 0.0))])
        with self.assertRaises(ValueError):
            select_action([])


class TestStyles(unittest.TestCase):

    def setUp(self):
        self.models = make_models()
        self.rng = np.random.default_rng(1)

    def test_make_styles(self):
        codes = make_styles(Strategy.parse("stochastic-random:4"), None, self.rng)
        self.assertEqual(np.shape(codes), (4, STYLE_DIM))
        pool = self.models.pool
        cross = make_styles(Strategy.parse("stochastic-cross"), pool, self.rng)
        self.assertEqual(len(cross), 3)
        for code, style in zip(cross, TRAINING_STYLES):
            self.assertTrue(any(np.array_equal(code, c) for c in pool.codes[style.value]))
        single = make_styles(Strategy.parse("stochastic-single"), pool, self.rng, style="clear-sunset")
        self.assertTrue(any(np.array_equal(single[0], c) for c in pool.codes["clear-sunset"]))
        self.assertEqual(make_styles(Strategy.parse("direct"), pool, self.rng), [])

    def test_unencoded_pool(self):
        pool = StylePool(self.models.pool.ids, self.models.pool.frames)
        with self.assertRaises(ValueError):
            make_styles(Strategy.parse("stochastic-cross"), pool, self.rng)


class TestDeployStep(unittest.TestCase):

    def setUp(self):
        self.models = make_models()
        self.policy = make_policy()
        town = Town()
        self.state = new_episode(town, Route(town, [0, 1, 2]), seed=5)
        self.frame = render(self.state, TEST_STYLE)
        self.rng = np.random.default_rng(2)

    def step(self, text, **kwargs):
        return deploy_step(
            Strategy.parse(text), self.models, self.policy, self.frame, 2.0, HighLevelCommand.FOLLOW_LANE, self.rng, **kwargs
        )

    def test_forward_counts(self):
        counter = self.models.counter
        _, trace = self.step("stochastic-cross")
        self.assertEqual((counter.policy, counter.encode, counter.decode), (3, 1, 3))
        self.assertEqual(len(trace.actions), 3)
        self.assertEqual(trace.strategy, "stochastic-cross")
        counter.reset()
        self.step("stochastic-random:5")
        self.assertEqual((counter.policy, counter.encode, counter.decode), (5, 1, 5))
        counter.reset()
        action, trace = self.step("direct")
        self.assertEqual((counter.policy, counter.encode, counter.decode), (1, 0, 0))
        expected, _ = self.policy.forward_batch(self.frame[None, :], [2.0], [3])
        np.testing.assert_allclose(action, expected[0])

    def test_deterministic_single(self):
        with self.assertRaises(ValueError):
            self.step("deterministic-single:daytime:oracle")
        action, trace = self.step("deterministic-single:daytime:oracle", state=self.state)
        expected, _ = self.policy.forward_batch(render(self.state, StyleId.DAYTIME)[None, :], [2.0], [3])
        np.testing.assert_allclose(action, expected[0])

        self.models.counter.reset()
        self.step("deterministic-single:clear-sunset:learned")
        self.assertEqual((self.models.counter.encode, self.models.counter.decode), (1, 1))
        self.assertIn("clear-sunset", self.models.fixed_codes)

    def test_selection_applies(self):
        action, trace = self.step("stochastic-cross")
        self.assertEqual(trace.replay(), action)
        self.assertEqual(trace.chosen, np.argmin(np.array(trace.log_vars), axis=0).tolist())

    def test_stochastic_needs_translator(self):
        models = DeployModels(None, self.models.pool)
        with self.assertRaises(ValueError):
            deploy_step(
                Strategy.parse("stochastic-random:2"), models, self.policy, self.frame, 0.0, 3, self.rng
            )

    def test_excluded_candidates(self):
        good = out((0.5, 0.1, 0.0), (0.0, 0.0, 0.0))
        with mock.patch.object(deploy, "_forward", return_value=[None, good, None]):
            action, trace = self.step("stochastic-cross", step=7)
        self.assertEqual(trace.excluded, [0, 2])
        self.assertFalse(trace.fallback)
        self.assertEqual(action, good.action)
        self.assertEqual(trace.step, 7)
        self.assertEqual(trace.chosen, [1, 1, 1])
        self.assertEqual(trace.replay(), action)

    def test_chosen_indexes_generated_candidates(self):
        a = out((0.5, 0.1, 0.0), (0.0, 2.0, 0.0))
        b = out((0.6, -0.3, 0.2), (1.0, -1.0, -1.0))
        with mock.patch.object(deploy, "_forward", return_value=[None, a, b]):
            action, trace = self.step("stochastic-cross")
        self.assertEqual(trace.chosen, [1, 2, 2])
        self.assertEqual(action, ActionTriple(0.5, -0.3, 0.2))
        self.assertEqual(trace.replay(), action)
        self.assertIsNone(trace.actions[0])
        self.assertIsNone(trace.log_vars[0])
        self.assertEqual(trace.log_vars[2], [1.0, -1.0, -1.0])
        self.assertEqual(SelectionTrace.from_dict(trace.to_dict()), trace)

    def test_oracle_candidates(self):
        action, trace = self.step("stochastic-cross:oracle", state=self.state)
        frames = np.stack([render(self.state, s) for s in TRAINING_STYLES])
        actions, _ = self.policy.forward_batch(frames, [2.0] * 3, [3] * 3)
        np.testing.assert_allclose(trace.actions, actions)
        self.assertEqual((self.models.counter.encode, self.models.counter.decode), (0, 0))
        with self.assertRaises(ValueError):
            self.step("stochastic-random:4:oracle")
        _, trace = self.step("stochastic-random:4:oracle", state=self.state)
        self.assertEqual(len(trace.actions), 4)

    def test_fallback_to_raw_frame(self):
        with mock.patch.object(deploy, "_forward", return_value=[None, None, None]):
            with self.assertLogs("uailab", "WARNING"):
                action, trace = self.step("stochastic-cross")
        self.assertTrue(trace.fallback)
        expected, _ = self.policy.forward_batch(self.frame[None, :], [2.0], [3])
        np.testing.assert_allclose(action, expected[0])


class TestOracleAvoidsNoisyStyle(unittest.TestCase):
    """A policy trained with noisy steering labels in one training style
    should rarely take its steering from that style's candidate."""

    @classmethod
    def setUpClass(cls):
        config = CollectConfig(episodes=4, dynamic=False, max_time=20.0, min_segments=2, max_segments=3, balance=False)
        records, _ = collect_demos(Town(), config, seed=3)
        rng = np.random.default_rng(0)
        noisy = []
        for r in records:
            if r.style == StyleId.CLEAR_SUNSET.value:
                steer = float(np.clip(r.action.steer + rng.normal(0.0, 0.3), -1.0, 1.0))
                r = replace(r, action=r.action._replace(steer=steer))
            noisy.append(r)
        cls.policy = train_policy(
            noisy,
            TrainConfig(epochs=30, batch_size=32, lr=3e-3, seed=0),
            PolicyConfig(obs_dim=OBS_DIM, trunk=(32,), branch_hidden=16),
        ).net

    def test_argmin_avoids_noisy_candidate(self):
        suite = BenchmarkSuite.create(Town(), Task.STRAIGHT, TEST_STYLE, 1)
        state = new_episode(suite.town, suite.route(0), seed=4)
        strategy = Strategy.parse("stochastic-cross:oracle")
        noisy = [s.value for s in TRAINING_STYLES].index(StyleId.CLEAR_SUNSET.value)
        expert, models, rng = ExpertAgent(), DeployModels(), np.random.default_rng(0)
        picks = []
        for k in range(100):
            _, trace = deploy_step(
                strategy, models, self.policy, render(state, TEST_STYLE), state.speed,
                HighLevelCommand.FOLLOW_LANE, rng, state=state, step=k,
            )
            picks.append(trace.chosen[1])
            state = step(state, expert(Observation(None, state.speed, None, state)))
        self.assertGreaterEqual(sum(p != noisy for p in picks), 80, Counter(picks))


class TestAgents(unittest.TestCase):

    def setUp(self):
        self.models = make_models()
        self.uail = make_policy()
        self.cil = make_policy("none")
        town = Town()
        self.state = new_episode(town, Route(town, [0, 1, 2]), seed=5)
        self.obs = Observation(render(self.state, TEST_STYLE), 0.0, HighLevelCommand.FOLLOW_LANE, self.state)

    def test_agent_checks(self):
        with self.assertRaises(ValueError):
            UAILAgent(self.cil, Strategy.parse("direct"))
        with self.assertRaises(ValueError):
            CILAgent(self.uail, Strategy.parse("direct"))
        with self.assertRaises(ValueError):
            CILAgent(self.cil, Strategy.parse("stochastic-cross"), self.models)
        with self.assertRaises(ValueError):
            UAILAgent(self.uail, Strategy.parse("stochastic-cross"))
        self.assertEqual(CILAgent(self.cil, Strategy.parse("direct")).name, "cil")

    def test_trial_pins_style(self):
        agent = UAILAgent(self.uail, Strategy.parse("stochastic-single"), self.models)
        for trial in range(4):
            agent.reset(seed=1, trial=trial)
            self.assertEqual(agent.style, TRAINING_STYLES[trial % 3].value)
        fixed = UAILAgent(self.uail, Strategy.parse("stochastic-single:daytime"), self.models)
        fixed.reset(seed=1, trial=2)
        self.assertEqual(fixed.style, "daytime")

    def test_reset_replays(self):
        agent = UAILAgent(self.uail, Strategy.parse("stochastic-random:4"), self.models, record_trace=True)
        agent.reset(seed=3, trial=0, task="straight")
        first = [agent(self.obs) for _ in range(3)]
        trace = agent.pop_trace()
        self.assertEqual(len(trace), 3)
        self.assertEqual(trace[0]["task"], "straight")
        self.assertEqual(trace[2]["step"], 2)
        self.assertEqual(agent.pop_trace(), [])
        agent.reset(seed=3, trial=0)
        self.assertEqual([agent(self.obs) for _ in range(3)], first)

    def test_factory(self):
        factory = AgentFactory(self.uail, Strategy.parse("stochastic-cross"), self.models)
        self.assertIsInstance(factory(0), UAILAgent)
        self.assertIsInstance(AgentFactory(self.cil, Strategy.parse("direct"))(1), CILAgent)
        clone = pickle.loads(pickle.dumps(factory))
        self.assertEqual(clone.strategy, factory.strategy)

    def test_episode_with_trace(self):
        suite = BenchmarkSuite(
            Town(), Task.STRAIGHT, TEST_STYLE, [[0, 1, 2]], time_limit_factor=0.05, min_time_limit=0.5
        )
        factory = AgentFactory(self.uail, Strategy.parse("stochastic-cross"), self.models, record_trace=True)
        (result,) = run_suite(factory, suite, seeds=[9])
        m = result.metrics
        self.assertEqual((m.agent, m.strategy, m.trial), ("uail", "stochastic-cross", 0))
        self.assertEqual(len(result.trace), m.steps)
        self.assertEqual(result.trace[0]["weather"], TEST_STYLE.value)
        self.assertEqual(len(result.trace[0]["chosen"]), 3)


if __name__ == "__main__":
    unittest.main()
