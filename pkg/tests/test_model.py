import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from osa_transfer import model as M
from osa_transfer.errors import ModelError
from osa_transfer.model import Checkpoint, ModelConfig, TrainConfig

from conftest import TINY, FakeNight, fake_nights


def tiny_net(task="multi", seed=0, dtype=torch.float64):
    net = M.build_model(replace(TINY, task_mode=task), seed)
    return net.to(dtype)


def relu_margin(net, x):
    """Smallest |input| to any ReLU: finite differences are only valid away from kinks."""
    h, margin = x.unsqueeze(1), float("inf")
    with torch.no_grad():
        for layer in net.encoder:
            if isinstance(layer, torch.nn.ReLU):
                margin = min(margin, h.abs().min().item())
            h = layer(h)
    return margin


def smooth_batch(net, n, frames, h=1e-4, seed=0):
    """A random float64 batch whose ReLU inputs all sit at least 10 h from zero."""
    gen = torch.Generator().manual_seed(seed)
    while True:
        x = torch.randn(n, frames, 64, dtype=torch.float64, generator=gen)
        if relu_margin(net, x) > 10 * h:
            return x


def finite_difference_check(net, x, y, s, n_coords=120, h=1e-4, seed=0):
    grads, _ = M.backward(net, x, y, s)
    rng = np.random.default_rng(seed)
    params = dict(net.named_parameters())
    names = list(params)
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(int(rng.integers(d)) for d in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = M.compute_loss(*net(x), y, s, net.task_mode)[2].item()
            p[idx] = orig - h
            down = M.compute_loss(*net(x), y, s, net.task_mode)[2].item()
            p[idx] = orig
        num = (up - down) / (2 * h)
        ana = grads[name][idx].item()
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


class TestForward:
    def test_shapes(self):
        net = tiny_net()
        y, s = net(torch.zeros(3, 40, 64, dtype=torch.float64))
        assert y.shape == s.shape == (3,)
        assert ((y > 0) & (y < 1)).all()

    def test_single_has_no_spo2(self):
        y, s = tiny_net("single")(torch.zeros(2, 40, 64, dtype=torch.float64))
        assert s is None and set(tiny_net("single").heads) == {"osa"}

    def test_full_size_segment(self):
        p = M.forward(M.build_model(TINY), np.zeros((1498, 64), np.float32))
        assert 0 < p.y_hat < 1 and 0 < p.s_hat < 1

    def test_bad_input(self):
        with pytest.raises(ModelError, match="expected input"):
            tiny_net()(torch.zeros(2, 40, 32, dtype=torch.float64))

    def test_default_architecture(self):
        net = M.build_model(ModelConfig())
        assert net.config.conv_blocks == 4
        assert net.heads["osa"].in_features == 128

    def test_same_seed_same_weights(self):
        assert M.fingerprint(M.build_model(TINY, 3)) == M.fingerprint(M.build_model(TINY, 3))
        assert M.fingerprint(M.build_model(TINY, 3)) != M.fingerprint(M.build_model(TINY, 4))


class TestLoss:
    def test_half_probability(self):
        v = M.loss(M.Prediction(0.5, 0.5), 1, 0.5)
        assert v.bce == pytest.approx(math.log(2))
        assert v.mse == 0 and v.total == pytest.approx(math.log(2))

    def test_perfect(self):
        v = M.loss(M.Prediction(1.0, 0.2), 1, 0.2)
        assert v.bce == pytest.approx(-math.log(1 - 1e-7))
        assert v.mse == 0

    def test_clamp_keeps_finite(self):
        assert math.isfinite(M.loss(M.Prediction(0.0, 0.0), 1, 1.0).total)

    def test_unlabelled_ignored(self):
        v = M.loss(([0.5, 0.5], [0.0, 0.9]), [1, 1], [0.0, np.nan])
        assert v.mse == 0

    def test_single_task_ignores_mse(self):
        v = M.loss(([0.5], [0.0]), [1], [1.0], task_mode="single")
        assert v.total == v.bce

    @given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=8), st.data())
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, y_hat, data):
        y = data.draw(st.lists(st.sampled_from([0, 1]), min_size=len(y_hat), max_size=len(y_hat)))
        s = data.draw(st.lists(st.floats(0, 1), min_size=len(y_hat), max_size=len(y_hat)))
        v = M.loss((y_hat, y_hat), y, s)
        assert v.bce >= 0 and v.mse >= 0 and v.total >= v.bce


class TestGradients:
    @pytest.mark.parametrize("task", ["single", "multi"])
    def test_finite_differences(self, task):
        net = tiny_net(task, seed=1)
        x = smooth_batch(net, 2, 16, seed=1)
        y = torch.tensor([1.0, 0.0], dtype=torch.float64)
        s = torch.tensor([0.8, float("nan")], dtype=torch.float64)
        assert finite_difference_check(net, x, y, s) < 1e-3

    def test_frozen_zeroes_encoder(self):
        net = tiny_net()
        x = torch.randn(2, 24, 64, dtype=torch.float64)
        grads, _ = M.backward(net, x, torch.ones(2, dtype=torch.float64), None, freeze_encoder=True)
        assert all(not g.any() for n, g in grads.items() if n.startswith("encoder."))
        assert any(g.any() for n, g in grads.items() if n.startswith("heads."))

    def test_non_finite(self):
        net = tiny_net()
        x = torch.full((1, 24, 64), float("nan"), dtype=torch.float64)
        with pytest.raises(ModelError, match="non-finite"):
            M.backward(net, x, torch.ones(1, dtype=torch.float64), None)


class TestAdam:
    def test_matches_torch_adam(self):
        ours, ref = tiny_net(seed=5), tiny_net(seed=5)
        opt = torch.optim.Adam(ref.parameters(), lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
        state = M.AdamState()
        rng = torch.Generator().manual_seed(0)
        for _ in range(5):
            x = torch.randn(3, 24, 64, dtype=torch.float64, generator=rng)
            y = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
            s = torch.tensor([0.5, 0.0, 0.3], dtype=torch.float64)
            grads, _ = M.backward(ours, x, y, s)
            M.adam_step(ours, grads, 1e-2, state)
            opt.zero_grad()
            M.compute_loss(*ref(x), y, s, "multi")[2].backward()
            opt.step()
        for (n, a), (_, b) in zip(ours.named_parameters(), ref.named_parameters()):
            torch.testing.assert_close(a, b, rtol=1e-10, atol=1e-12, msg=n)

    def test_first_step_is_lr_sign(self):
        net = tiny_net()
        before = {n: p.detach().clone() for n, p in net.named_parameters()}
        grads = {n: torch.full_like(p, -3.0) for n, p in net.named_parameters()}
        M.adam_step(net, grads, 0.01, M.AdamState())
        for n, p in net.named_parameters():
            torch.testing.assert_close(p - before[n], torch.full_like(p, 0.01), rtol=1e-6, atol=0)

    def test_frozen_names_untouched(self):
        net = tiny_net()
        fp = M.fingerprint(net)
        grads = {n: torch.ones_like(p) for n, p in net.named_parameters()}
        M.adam_step(net, grads, 0.1, M.AdamState(), frozen=list(net.encoder_parameters()))
        assert M.fingerprint(net) == fp


class TestTraining:
    def test_adult_loss_decreases(self):
        nights = fake_nights(4)
        ck = M.train_adult(nights, TINY, TrainConfig(8, 8, 1e-2, seed=0))
        curve = [r["total"] for r in ck.curve]
        assert len(curve) == 8 and curve[-1] < curve[0]
        assert ck.meta["adult_train"]["epochs"] == 8

    def test_deterministic(self):
        nights = fake_nights(3)
        a = M.train_adult(nights, TINY, TrainConfig(2, 8, 1e-2, seed=7))
        b = M.train_adult(nights, TINY, TrainConfig(2, 8, 1e-2, seed=7))
        assert M.fingerprint(a.net) == M.fingerprint(b.net)

    @pytest.mark.parametrize("mode,want", [("none", [0.0, 0.0, 0.0]), ("fd", [21.0, 21.0, 21.0]),
                                           ("sd", [20.0, 21.0, 22.0])])
    def test_adult_label_delay(self, mode, want):
        asked = []

        class Recording(FakeNight):
            def s_labels(self, delay_s):
                asked.append(delay_s)
                return super().s_labels(delay_s)

        nights = [Recording(**vars(n)) for n in fake_nights(3)]
        M.train_adult(nights, TINY, TrainConfig(1, 8, 1e-2, delay_mode=mode))
        assert asked == want
        asked.clear()
        M.train_adult(nights, replace(TINY, task_mode="single"), TrainConfig(1, 8, 1e-2, delay_mode=mode))
        assert asked == []

    def test_resume_zero_epochs_is_identity(self):
        nights = fake_nights(3)
        a = M.train_adult(nights, TINY, TrainConfig(2, 8, 1e-2))
        b = M.train_adult(nights, TINY, TrainConfig(0, 8, 1e-2), resume=a)
        assert b.to_bytes() == a.to_bytes()

    def test_resume_continues_epochs(self):
        nights = fake_nights(3)
        a = M.train_adult(nights, TINY, TrainConfig(2, 8, 1e-2))
        b = M.train_adult(nights, TINY, TrainConfig(1, 8, 1e-2), resume=a)
        assert [r["epoch"] for r in b.curve] == [1, 2, 3]

    def test_frozen_keeps_encoder(self):
        nights = fake_nights(5)
        adult = M.train_adult(nights, TINY, TrainConfig(1, 8, 1e-2))
        ft = M.fine_tune(adult, nights, "frozen", "sd", TrainConfig(3, 4, 1e-2, 5))
        assert M.fingerprint(ft.net) == M.fingerprint(adult.net)
        assert ft.net.heads["osa"].weight.data.ne(adult.net.heads["osa"].weight.data).any()
        full = M.fine_tune(adult, nights, "full", "sd", TrainConfig(3, 4, 1e-2, 5))
        assert M.fingerprint(full.net) != M.fingerprint(adult.net)
        assert ft.meta["strategy"] == "frozen" and ft.meta["delay_mode"] == "night_specific"

    def test_fine_tune_single_from_multi(self):
        nights = fake_nights(5)
        adult = M.train_adult(nights, TINY, TrainConfig(1, 8, 1e-2))
        ft = M.fine_tune(adult, nights, "full", "none", TrainConfig(1, 4, 1e-3), task_mode="single")
        assert ft.task_mode == "single"
        with pytest.raises(ModelError, match="multi-task"):
            M.fine_tune(adult, nights, "full", "fd", TrainConfig(1, 4, 1e-3), task_mode="single")

    def test_single_cannot_become_multi(self):
        ck = Checkpoint(M.build_model(replace(TINY, task_mode="single")))
        with pytest.raises(ModelError):
            ck.as_task("multi")

    def test_bad_strategy_and_empty(self):
        ck = Checkpoint(M.build_model(TINY))
        with pytest.raises(ModelError):
            M.fine_tune(ck, fake_nights(2), "partial")
        with pytest.raises(ModelError):
            M.fine_tune(ck, [], "full")

    def test_resolve_delays(self):
        nights = fake_nights(3)
        nights[1].delays = None
        d, g = M.resolve_delays(nights, "sd")
        assert g == 21.0 and d == [20.0, 21.0, 22.0]
        assert M.resolve_delays(nights, "fd")[0] == [21.0] * 3
        assert M.resolve_delays(nights, "none") == ([0.0] * 3, None)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        nights = fake_nights(2)
        ck = M.train_adult(nights, TINY, TrainConfig(1, 8, 1e-2))
        ck.save(tmp_path / "c.ckpt")
        back = Checkpoint.load(tmp_path / "c.ckpt")
        assert M.fingerprint(back.net) == M.fingerprint(ck.net)
        assert back.curve == ck.curve and back.meta == ck.meta
        y0, s0 = M.predict_segments(ck.net, nights[0].values)
        y1, s1 = M.predict_segments(back.net, nights[0].values)
        np.testing.assert_array_equal(y0, y1)
        np.testing.assert_array_equal(s0, s1)
        assert (tmp_path / "c.ckpt").read_bytes()[:8] == b"OSACKPT\x00"

    def test_corrupt(self, tmp_path):
        with pytest.raises(ModelError, match="not a checkpoint"):
            Checkpoint.from_bytes(b"garbage")
        data = Checkpoint(M.build_model(TINY)).to_bytes()
        with pytest.raises(ModelError, match="size"):
            Checkpoint.from_bytes(data + b"\0\0\0\0")
        with pytest.raises(ModelError, match="missing"):
            Checkpoint.load(tmp_path / "none.ckpt")

    def test_curve_csv(self, tmp_path):
        ck = M.train_adult(fake_nights(2), TINY, TrainConfig(2, 8, 1e-2))
        ck.write_curve(tmp_path / "curve.csv")
        lines = (tmp_path / "curve.csv").read_text().splitlines()
        assert lines[0] == "epoch,split,bce,mse,total" and len(lines) == 3

    def test_predict_night(self):
        night = fake_nights(1)[0]
        out = M.predict_night(Checkpoint(M.build_model(TINY)), night)
        assert len(out) == 12 and out[3][0].start_s == 30.0
