import math

import numpy as np
import pytest

from prefrl.env import (
    LinkFunction,
    Policy,
    PreferenceOracle,
    TabularMdp,
    Trajectory,
    enumerate_policies,
    evaluate_policy,
    random_tabular_mdp,
)
from prefrl.errors import ModelMisspecificationError
from prefrl.pbts import (
    DirichletTransitionPosterior,
    RewardParticlePosterior,
    default_particles,
    init_state,
    pbts_episode,
    pbts_query_uncertainty,
    plan_value_iteration,
    posterior_snapshot,
    sample_posterior_mdp,
    update_reward_posterior,
    update_transition_posterior,
)

BTL = LinkFunction.btl()
AFFINE = LinkFunction.affine()


def random_trajectory(rng, S, A, H):
    return Trajectory(tuple(int(x) for x in rng.integers(S, size=H)), tuple(int(x) for x in rng.integers(A, size=H)))


def play(env, particles, epsilon, episodes, seed=0, link=BTL):
    state = init_state(env, particles, link, np.random.default_rng(seed))
    oracle = PreferenceOracle(link, env, np.random.default_rng(seed + 1))
    rng = np.random.default_rng(seed + 2)
    records = []
    for _ in range(episodes):
        state, rec = pbts_episode(state, env, oracle, epsilon, rng)
        records.append(rec)
    return state, records


def direct_log_weights(particles, link, history):
    """Reward posterior recomputed from scratch as a product over queried rounds."""
    out = np.zeros(len(particles))
    for j, r in enumerate(particles):
        for tau0, tau1, o, z in history:
            if not z:
                continue
            r0 = sum(r[s, a] for s, a in tau0.steps)
            r1 = sum(r[s, a] for s, a in tau1.steps)
            p = o * link(r1 - r0) + (1 - o) * link(r0 - r1)
            out[j] += math.log(p)
    return out


def normalise(log_w):
    return log_w - np.logaddexp.reduce(log_w)


class TestDirichletPosterior:
    def test_empty_is_prior(self):
        post = DirichletTransitionPosterior.empty(3, 2, prior=0.5)
        np.testing.assert_array_equal(post.concentrations, 0.5)

    def test_counting(self):
        post = DirichletTransitionPosterior.empty(2, 2)
        post = update_transition_posterior(post, Trajectory((0, 0, 0), (1, 1, 0)))
        assert post.concentrations[0, 1, 0] == 3.0
        assert post.counts.sum() == 2

    def test_mean_matches_counting_oracle(self, rng):
        S, A, H, prior = 3, 2, 4, 0.7
        post = DirichletTransitionPosterior.empty(S, A, prior)
        counts = {}
        for _ in range(50):
            traj = random_trajectory(rng, S, A, H)
            post = post.update(traj)
            for h in range(H - 1):
                key = (traj.states[h], traj.actions[h], traj.states[h + 1])
                counts[key] = counts.get(key, 0) + 1
        assert post.counts.sum() == 50 * (H - 1)
        for s in range(S):
            for a in range(A):
                row = [counts.get((s, a, s2), 0) for s2 in range(S)]
                total = sum(row)
                expected = [(n + prior) / (total + S * prior) for n in row]
                np.testing.assert_allclose(post.mean()[s, a], expected, rtol=1e-15)

    def test_update_is_pure(self):
        post = DirichletTransitionPosterior.empty(2, 1)
        post.update(Trajectory((0, 1), (0, 0)))
        assert post.counts.sum() == 0

    def test_concentrated_row(self):
        counts = np.zeros((1, 1, 2), dtype=np.int64)
        counts[0, 0, 0] = 10**9 - 1
        post = DirichletTransitionPosterior(counts, 1.0)
        rng = np.random.default_rng(0)
        draws = np.array([post.sample(rng)[0, 0] for _ in range(1000)])
        np.testing.assert_allclose(draws, np.tile([1.0, 0.0], (1000, 1)), atol=1e-3)

    def test_rows_on_simplex(self, rng):
        post = DirichletTransitionPosterior(rng.integers(0, 5, size=(4, 3, 4)), 0.3)
        P = post.sample(rng)
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=-1), 1.0, atol=1e-12)

    def test_non_positive_prior(self):
        with pytest.raises(ValueError):
            DirichletTransitionPosterior.empty(2, 2, prior=0.0)


class TestRewardPosterior:
    def test_unqueried_round_changes_nothing(self, rng):
        post = RewardParticlePosterior.uniform(rng.uniform(size=(4, 2, 2)), BTL)
        tau = random_trajectory(rng, 2, 2, 3)
        after = update_reward_posterior(post, tau, tau, 1, 0)
        assert after.log_weights.tobytes() == post.log_weights.tobytes()

    def test_identical_particles_stay_tied(self, rng):
        table = rng.uniform(size=(2, 2))
        post = RewardParticlePosterior.uniform(np.stack([table, table, rng.uniform(size=(2, 2))]), BTL)
        for _ in range(10):
            post = post.update(random_trajectory(rng, 2, 2, 3), random_trajectory(rng, 2, 2, 3),
                               int(rng.integers(2)), 1)
        assert post.log_weights[0] == post.log_weights[1]
        w = post.weights()
        assert w[0] == w[1]

    @pytest.mark.parametrize("link", [BTL, AFFINE], ids=["btl", "affine"])
    def test_direct_product_oracle(self, rng, link):
        particles = rng.uniform(size=(3, 2, 2)) / 3
        post = RewardParticlePosterior.uniform(particles, link)
        history = []
        for _ in range(5):
            item = (random_trajectory(rng, 2, 2, 3), random_trajectory(rng, 2, 2, 3), int(rng.integers(2)),
                    int(rng.integers(2)))
            history.append(item)
            post = post.update(*item)
        expected = normalise(direct_log_weights(particles, link, history))
        np.testing.assert_allclose(normalise(post.log_weights), expected, rtol=0, atol=1e-12)
        assert post.weights().sum() == pytest.approx(1.0, abs=1e-12)

    def test_zero_likelihood_excludes_particle(self):
        particles = np.array([[[1.0]], [[0.0]]])
        post = RewardParticlePosterior.uniform(particles, AFFINE)
        tau0, tau1 = Trajectory((0,), (0,)), Trajectory((0,), (0,))
        # identical trajectories: gap 0, both particles keep probability 1/2
        post = post.update(tau0, tau1, 1, 1)
        np.testing.assert_allclose(post.weights(), [0.5, 0.5])

    def test_all_particles_excluded_is_misspecification(self):
        env_table = np.array([[1.0, 0.0]])
        post = RewardParticlePosterior.uniform(np.stack([env_table, env_table]), AFFINE)
        # r(tau1) - r(tau0) = -1, so preferring tau1 has probability exactly zero under every particle
        post = post.update(Trajectory((0,), (0,)), Trajectory((0,), (1,)), 1, 1)
        assert np.all(np.isneginf(post.log_weights))
        with pytest.raises(ModelMisspecificationError):
            post.weights()
        with pytest.raises(ModelMisspecificationError):
            post.sample_index(np.random.default_rng(0))

    def test_single_particle_always_sampled(self, rng):
        env = random_tabular_mdp(2, 2, 2, rng)
        state = init_state(env, env.rewards[None], BTL, rng)
        for _ in range(20):
            _, r = sample_posterior_mdp(state, rng)
            np.testing.assert_array_equal(r, env.rewards)

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            RewardParticlePosterior(np.zeros((2, 2, 2)), np.zeros(3), BTL)


class TestQueryUncertainty:
    def test_single_particle(self, rng):
        post = RewardParticlePosterior.uniform(rng.uniform(size=(1, 2, 2)), BTL)
        assert pbts_query_uncertainty(post, random_trajectory(rng, 2, 2, 2), random_trajectory(rng, 2, 2, 2)) == 0

    def test_two_particles(self):
        particles = np.array([[[0.0, 0.0]], [[1.0, 0.0]]])
        post = RewardParticlePosterior.uniform(particles, BTL)
        u = pbts_query_uncertainty(post, Trajectory((0,), (0,)), Trajectory((0,), (1,)))
        assert u == 0.5

    def test_matches_monte_carlo(self, rng):
        particles = rng.uniform(size=(10, 3, 2))
        post = RewardParticlePosterior(particles, rng.normal(size=10), BTL)
        tau0, tau1 = random_trajectory(rng, 3, 2, 4), random_trajectory(rng, 3, 2, 4)
        w = post.weights()
        gaps = np.array([sum(p[s, a] for s, a in tau0.steps) - sum(p[s, a] for s, a in tau1.steps)
                         for p in particles])
        i = rng.choice(10, size=10**6, p=w)
        j = rng.choice(10, size=10**6, p=w)
        mc = np.mean(np.abs(gaps[i] - gaps[j]))
        assert pbts_query_uncertainty(post, tau0, tau1) == pytest.approx(mc, rel=0.01)

    def test_bounded_by_spread(self, rng):
        for _ in range(50):
            J = int(rng.integers(1, 20))
            post = RewardParticlePosterior(rng.uniform(size=(J, 2, 2)), rng.normal(size=J) * 3, BTL)
            tau0, tau1 = random_trajectory(rng, 2, 2, 3), random_trajectory(rng, 2, 2, 3)
            gaps = [sum(p[s, a] for s, a in tau0.steps) - sum(p[s, a] for s, a in tau1.steps)
                    for p in post.particles]
            assert pbts_query_uncertainty(post, tau0, tau1) <= max(gaps) - min(gaps) + 1e-12

    def test_monte_carlo_fallback_for_large_sets(self, rng):
        post = RewardParticlePosterior.uniform(rng.uniform(size=(600, 2, 2)), BTL)
        tau0, tau1 = Trajectory((0, 1), (0, 1)), Trajectory((1, 0), (1, 0))
        with pytest.raises(ValueError):
            pbts_query_uncertainty(post, tau0, tau1)
        gaps = (post.particles[:, 0, 0] + post.particles[:, 1, 1]) - (post.particles[:, 1, 1] + post.particles[:, 0, 0])
        assert np.all(gaps == 0)
        assert pbts_query_uncertainty(post, tau0, tau1, rng, mc_pairs=1000) == 0.0


class TestPlanner:
    def test_single_step_is_greedy(self, rng):
        r = rng.uniform(size=(4, 3))
        P = random_tabular_mdp(4, 3, 1, rng).transitions
        policy, value = plan_value_iteration(P, r, 1, 2)
        np.testing.assert_array_equal(policy.actions[0], np.argmax(r, axis=1))
        assert value == r[2].max()

    def test_zero_reward(self, rng):
        P = random_tabular_mdp(3, 2, 4, rng).transitions
        policy, value = plan_value_iteration(P, np.zeros((3, 2)), 4)
        assert value == 0.0
        np.testing.assert_array_equal(policy.actions, 0)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_enumeration(self, seed):
        env = random_tabular_mdp(2, 2, 2, seed)
        policy, value = plan_value_iteration(env.transitions, env.rewards, 2, 0)
        values = [evaluate_policy(env.transitions, env.rewards, pi)[0, 0] for pi in enumerate_policies(2, 2, 2)]
        assert len(values) == 16
        assert abs(value - max(values)) <= 1e-12
        assert abs(evaluate_policy(env.transitions, env.rewards, policy)[0, 0] - value) <= 1e-12


class TestEpisode:
    def env(self, seed=0):
        return random_tabular_mdp(3, 2, 3, seed)

    def test_infinite_threshold(self):
        env = self.env()
        particles, _ = default_particles(env, 8, np.random.default_rng(0))
        state, records = play(env, particles, math.inf, 25)
        assert all(rec.z == 0 for rec in records)
        np.testing.assert_array_equal(state.rewards.log_weights, 0)
        assert state.transitions.counts.sum() == 25 * (env.horizon - 1)

    def test_single_particle_never_queries(self):
        env = self.env()
        _, records = play(env, env.rewards[None], 0.0, 20)
        assert all(rec.z == 0 and rec.uncertainty == 0 for rec in records)

    def test_replay(self):
        env = self.env(3)
        particles, _ = default_particles(env, 16, np.random.default_rng(0))
        _, a = play(env, particles, 0.1, 30)
        _, b = play(env, particles, 0.1, 30)
        assert [(r.z, r.o, r.uncertainty, r.traj0, r.traj1) for r in a] == \
            [(r.z, r.o, r.uncertainty, r.traj0, r.traj1) for r in b]
        assert all(x.policy0 == y.policy0 for x, y in zip(a, b))

    def test_posterior_reflects_history(self):
        env = self.env(1)
        particles, _ = default_particles(env, 6, np.random.default_rng(0))
        state, records = play(env, particles, 0.05, 60)
        counts = np.zeros((3, 2, 3), dtype=np.int64)
        for rec in records:
            for s, a, s2 in rec.traj0.transitions():
                counts[s, a, s2] += 1
        np.testing.assert_array_equal(state.transitions.concentrations, 1.0 + counts)
        history = [(r.traj0, r.traj1, r.o, r.z) for r in records]
        np.testing.assert_allclose(state.rewards.log_weights, direct_log_weights(particles, BTL, history),
                                   rtol=0, atol=1e-12)

    def test_comparator_lag(self):
        env = self.env()
        particles, _ = default_particles(env, 4, np.random.default_rng(0))
        _, records = play(env, particles, 0.1, 10)
        assert records[0].policy1 == Policy.constant(3, 3, 0)
        for prev, cur in zip(records, records[1:]):
            assert cur.policy1 is prev.policy0

    def test_threshold_monotonicity(self):
        env = self.env(2)
        particles, _ = default_particles(env, 10, np.random.default_rng(0))
        state = init_state(env, particles, BTL, np.random.default_rng(0))
        oracle = PreferenceOracle(BTL, env, np.random.default_rng(1))
        rng = np.random.default_rng(2)
        for t in range(40):
            zs = []
            for eps in (0.0, 0.05, 0.2, 1.0):
                _, rec = pbts_episode(state, env, lambda a, b: 1, eps, np.random.default_rng(t))
                zs.append(rec.z)
            assert zs == sorted(zs, reverse=True)
            state, _ = pbts_episode(state, env, oracle, 0.05, rng)

    def test_default_particles_hold_truth(self):
        env = self.env()
        particles, slot = default_particles(env, 32, np.random.default_rng(4))
        assert particles.shape == (32, 3, 2)
        np.testing.assert_array_equal(particles[slot], env.rewards)
        assert np.all((particles >= 0) & (particles <= 1))

    def test_snapshot(self):
        env = self.env()
        particles, _ = default_particles(env, 4, np.random.default_rng(0))
        state, _ = play(env, particles, 0.1, 5)
        snap = posterior_snapshot(state)
        assert snap["t"] == 6
        assert np.array(snap["concentrations"]).shape == (3, 2, 3)
        assert sum(snap["weights"]) == pytest.approx(1.0)

    def test_affine_contradiction_raises(self):
        # one state, two actions; every particle claims action 0 is worth 1 more than action 1
        env = TabularMdp(np.ones((1, 2, 1)), np.array([[0.0, 1.0]]), 1)
        particles = np.array([[[1.0, 0.0]], [[1.0, 0.0]]])
        state = init_state(env, particles, AFFINE, np.random.default_rng(0),
                           initial_policy=Policy(np.array([[1]])))
        oracle = PreferenceOracle(AFFINE, env, np.random.default_rng(1))
        rng = np.random.default_rng(2)
        # the greedy policy picks action 0 and the comparator action 1; the truth prefers tau1 surely
        state, rec = pbts_episode(state, env, oracle, -1.0, rng)
        assert rec.z == 1 and rec.o == 1
        with pytest.raises(ModelMisspecificationError):
            pbts_episode(state, env, oracle, -1.0, rng)
