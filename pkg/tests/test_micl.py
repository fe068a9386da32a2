import math

import numpy as np
import pytest

from ezvsl import synth
from ezvsl import tensor as T
from ezvsl.data import from_samples
from ezvsl.micl import (
    STRATEGIES,
    NumericError,
    TrainConfig,
    curve_csv,
    match_score,
    micl_loss,
    micl_loss_a2v,
    micl_loss_v2a,
    micl_losses,
    score_matrix,
    train,
)
from ezvsl.models import AVModel, AudioEncoder, ProjectionHeads, VisualEncoder, encode_audio, encode_visual
from ezvsl.tensor import Tensor

from oracles import central_diff, match_score_loop, micl_a2v_brute, micl_v2a_brute, rel_error


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


class TestMatchScore:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_all_locations_equal(self, strategy):
        a = np.array([0.3, -1.2, 2.0])
        V = np.repeat(a[:, None, None], 3, axis=1).repeat(4, axis=2)
        assert match_score(Tensor(a), Tensor(V), strategy).item() == pytest.approx(1.0, abs=1e-12)

    def test_one_match_rest_orthogonal(self):
        a = np.array([1.0, 0.0, 0.0])
        V = np.zeros((3, 2, 3))
        V[1] = 1.0
        V[:, 1, 2] = a
        assert match_score(Tensor(a), Tensor(V), "max_of_sim").item() == pytest.approx(1.0, abs=1e-12)
        assert match_score(Tensor(a), Tensor(V), "avg_of_sim").item() == pytest.approx(1 / 6, abs=1e-12)

    @pytest.mark.parametrize("strategy", STRATEGIES)
    @pytest.mark.parametrize("seed", range(5))
    def test_loop_oracle(self, strategy, seed):
        rng = np.random.default_rng(seed)
        a, V = rng.normal(size=4), rng.normal(size=(4, 3, 2))
        assert match_score(Tensor(a), Tensor(V), strategy).item() == pytest.approx(
            match_score_loop(a, V, strategy), abs=1e-12
        )

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_score_matrix_agrees_with_single(self, strategy):
        rng = np.random.default_rng(9)
        A, V = rng.normal(size=(4, 5)), rng.normal(size=(4, 5, 3, 3))
        s = score_matrix(Tensor(A), Tensor(V), strategy).data
        for i in range(4):
            for k in range(4):
                assert s[i, k] == pytest.approx(match_score(Tensor(A[i]), Tensor(V[k]), strategy).item(), abs=1e-12)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError, match="strategy"):
            match_score(Tensor(np.ones(2)), Tensor(np.ones((2, 1, 1))), "mean_pool")


def _bags(rng, b, d, h=2, w=2):
    return rng.normal(size=(b, d)), rng.normal(size=(b, d, h, w))


class TestLossValues:
    def test_single_sample_is_zero(self):
        A, V = _bags(np.random.default_rng(0), 1, 3)
        for fn in (micl_loss_a2v, micl_loss_v2a, micl_loss):
            assert fn(Tensor(A), Tensor(V)).item() == 0.0

    def test_indistinguishable_pair_gives_log2(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        bag = np.ones((2, 1, 1))  # equally similar to both audios
        V = np.stack([bag, bag])
        assert micl_loss_a2v(Tensor(a), Tensor(V)).item() == pytest.approx(math.log(2), abs=1e-12)

    @pytest.mark.parametrize("b", [2, 3, 4])
    def test_identical_audio_gives_log_b(self, b):
        rng = np.random.default_rng(b)
        A = np.tile(rng.normal(size=3), (b, 1))
        V = rng.normal(size=(b, 3, 2, 2))
        assert micl_loss_v2a(Tensor(A), Tensor(V)).item() == pytest.approx(math.log(b), abs=1e-12)

    def test_handcrafted_b3(self):
        A = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        V = np.array(
            [
                [[[1.0, 0.0]], [[0.0, 1.0]]],
                [[[0.5, -1.0]], [[1.0, 0.2]]],
                [[[2.0, 1.0]], [[2.0, -1.0]]],
            ]
        )  # (3, d=2, 1, 2)
        assert micl_loss_a2v(Tensor(A), Tensor(V), tau=1.0).item() == pytest.approx(
            micl_a2v_brute(A, V, 1.0), abs=1e-10
        )
        assert micl_loss_v2a(Tensor(A), Tensor(V), tau=1.0).item() == pytest.approx(
            micl_v2a_brute(A, V, 1.0), abs=1e-10
        )

    @pytest.mark.parametrize("strategy", STRATEGIES)
    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force_oracle(self, strategy, seed):
        rng = np.random.default_rng(seed)
        b, d = 2 + seed % 3, 1 + seed % 3
        A, V = _bags(rng, b, d, 2, 3)
        tau = [0.07, 0.5, 1.0][seed % 3]
        assert micl_loss_a2v(Tensor(A), Tensor(V), tau, strategy).item() == pytest.approx(
            micl_a2v_brute(A, V, tau, strategy), abs=1e-10
        )
        assert micl_loss_v2a(Tensor(A), Tensor(V), tau, strategy).item() == pytest.approx(
            micl_v2a_brute(A, V, tau, strategy), abs=1e-10
        )

    def test_total_is_sum(self):
        A, V = _bags(np.random.default_rng(3), 4, 3)
        a2v, v2a, total = micl_losses(Tensor(A), Tensor(V))
        assert total.item() == a2v.item() + v2a.item()
        assert micl_loss(Tensor(A), Tensor(V)).item() == micl_loss_a2v(Tensor(A), Tensor(V)).item() + micl_loss_v2a(
            Tensor(A), Tensor(V)
        ).item()


class TestLossProperties:
    @pytest.mark.parametrize("seed", range(10))
    def test_nonnegative(self, seed):
        A, V = _bags(np.random.default_rng(seed), 5, 4)
        a2v, v2a, _ = micl_losses(Tensor(A), Tensor(V), tau=0.05)
        assert a2v.item() >= 0 and v2a.item() >= 0

    @pytest.mark.parametrize("seed", range(5))
    def test_batch_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        A, V = _bags(rng, 6, 4)
        p = rng.permutation(6)
        a = micl_loss(Tensor(A), Tensor(V)).item()
        b = micl_loss(Tensor(A[p]), Tensor(V[p])).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_temperature_monotone(self):
        rng = np.random.default_rng(4)
        A = np.eye(4)
        V = rng.normal(scale=0.1, size=(4, 4, 2, 2))
        V[np.arange(4), np.arange(4), 0, 1] += 3.0  # strong diagonal match
        s = score_matrix(Tensor(A), Tensor(V)).data
        assert all(s[i, i] > s[i, k] for i in range(4) for k in range(4) if k != i)
        losses = [micl_loss(Tensor(A), Tensor(V), tau).item() for tau in (1.0, 0.5, 0.2, 0.07)]
        assert all(x > y for x, y in zip(losses, losses[1:]))

    def test_gradient_only_at_argmax_cells(self):
        rng = np.random.default_rng(5)
        A, Vd = _bags(rng, 3, 4, 3, 3)
        V = leaf(Vd)
        micl_loss_a2v(Tensor(A), V).backward()
        for k in range(3):
            touched = set()
            for i in range(3):
                sims = [match_score_loop(A[i], Vd[k][:, y : y + 1, x : x + 1], "max_of_sim") for y in range(3) for x in range(3)]
                touched.add(divmod(int(np.argmax(sims)), 3))
            g = np.abs(V.grad[k]).sum(axis=0)
            for y in range(3):
                for x in range(3):
                    if (y, x) not in touched:
                        assert g[y, x] == 0.0
            assert all(g[c] > 0 for c in touched)

    def test_non_finite_reports_index(self):
        A, V = _bags(np.random.default_rng(6), 3, 2)
        V[1, 0, 0, 0] = np.nan
        with pytest.raises(NumericError, match=r"\[.*\]"):
            micl_loss(Tensor(A), Tensor(V))

    def test_bad_tau(self):
        A, V = _bags(np.random.default_rng(7), 2, 2)
        with pytest.raises(ValueError):
            micl_loss_a2v(Tensor(A), Tensor(V), tau=0.0)
        with pytest.raises(ValueError):
            TrainConfig(tau=-1)
        with pytest.raises(ValueError):
            TrainConfig(matching_strategy="median")


def tiny_branch(seed):
    """Encoders small enough for coordinate-wise finite differences."""
    rng = np.random.default_rng(seed)
    vis = VisualEncoder(rng, channels=(3, 3, 3, 3, 3))
    aud = AudioEncoder(rng, 5, channels=(3, 3, 3))
    heads = ProjectionHeads(rng, 3, 3, dim=3)
    model = AVModel(vis, aud, heads)
    # Random biases keep pre-activations off exactly zero (the ReLU kink) and dead
    # cells off the zero vector (the norm floor); finite differences need smoothness.
    for name, p in model.named_parameters().items():
        if name.endswith("bias") or name.startswith("proj.b_"):
            p.data[:] = rng.normal(0.0, 0.3, size=p.shape)
    return model


def full_loss_gradient_error(seed, strategy="max_of_sim", n_coords=4):
    """Worst relative error over a sample of coordinates of every parameter tensor."""
    rng = np.random.default_rng(1000 + seed)
    model = tiny_branch(seed)
    images = rng.random((3, 3, 16, 16))
    specs = rng.normal(size=(3, 5, 8))

    def loss():
        V = encode_visual(model.visual, model.heads, Tensor(images))
        A = encode_audio(model.audio, model.heads, Tensor(specs))
        return micl_loss(A, V, tau=0.5, strategy=strategy)

    model.zero_grad()
    loss().backward()
    worst = 0.0
    for p in model.parameters():
        coords = rng.choice(p.data.size, size=min(n_coords, p.data.size), replace=False)
        num = central_diff(lambda: loss().item(), p.data, coords=coords)
        worst = max(worst, rel_error(p.grad.ravel()[coords], [num[c] for c in coords]))
    return worst


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_full_loss_gradient_through_encoders(strategy):
    assert full_loss_gradient_error(0, strategy) < 1e-4


@pytest.fixture(scope="module")
def small_data():
    classes = synth.make_classes(8)
    return from_samples(synth.generate_dataset(2, 96, classes).samples)


class TestTrain:
    def test_deterministic_curves(self, small_data):
        cfg = TrainConfig(epochs=2, lr=1e-3, seed=3)
        a = train(cfg, small_data, AVModel.build(0, small_data.specs.shape[1]))
        b = train(cfg, small_data, AVModel.build(0, small_data.specs.shape[1]))
        assert curve_csv(a.curve) == curve_csv(b.curve)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.model.state_dict().values(), b.model.state_dict().values()))

    def test_loss_decreases(self, small_data):
        res = train(TrainConfig(epochs=4, lr=1e-3), small_data, AVModel.build(0, small_data.specs.shape[1]))
        assert res.curve[-1].total < res.curve[0].total
        assert curve_csv(res.curve).splitlines()[0] == "epoch,mean_loss_a2v,mean_loss_v2a,mean_total"

    def test_divergence_keeps_last_good(self, small_data):
        model = AVModel.build(0, small_data.specs.shape[1])
        start = model.state_dict()
        model.heads.U_a.data[0, 0] = np.nan
        with pytest.raises(NumericError) as info:
            train(TrainConfig(epochs=1), small_data, model)
        assert info.value.last_good is not None
        assert info.value.last_good["proj.U_v"].tobytes() == start["proj.U_v"].tobytes()

    def test_empty_data(self, small_data):
        with pytest.raises(ValueError, match="empty"):
            train(TrainConfig(epochs=1), small_data.subset([]), AVModel.build(0, small_data.specs.shape[1]))
