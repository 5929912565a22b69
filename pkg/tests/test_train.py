import json

import numpy as np
import pytest

from helpers import tiny_config, tiny_data
from ppnet import tensor as T
from ppnet.config import FLAT_KEYS, TrainConfig, profile
from ppnet.exceptions import CheckpointError, ConfigError, DivergenceError
from ppnet.tensor import Tensor
from ppnet.train import (AdamState, Checkpoint, checkpoint_bytes, checkpoint_from_bytes, clip_global_norm,
                         copy_last_ssim, evaluate_next_frame, load_checkpoint, model_from_checkpoint,
                         optimizer_step, rewindow, save_checkpoint, sweep_p, sweep_seq_len, train)


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self):
        p = {"w": Tensor(np.array([1.0, -2.0]))}
        optimizer_step(p, {"w": np.array([0.5, -3.0])}, AdamState(), lr=0.1)
        # bias-corrected first step is g / (|g| + eps)
        np.testing.assert_allclose(p["w"].data, [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 3.0 / (3.0 + 1e-8)],
                                   rtol=1e-15)

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(0)
        w0 = rng.normal(size=5)
        grads = rng.normal(size=(6, 5))
        p = {"w": Tensor(w0.copy())}
        state = AdamState()
        for g in grads:
            optimizer_step(p, {"w": g}, state, lr=0.01)
        # textbook recurrences, written independently
        w, m, v = w0.copy(), np.zeros(5), np.zeros(5)
        for k, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        np.testing.assert_allclose(p["w"].data, w, rtol=1e-12)
        assert state.step == 6

    def test_non_finite_gradient_names_parameter(self):
        p = {"a": Tensor(np.zeros(2)), "b": Tensor(np.zeros(2))}
        with pytest.raises(DivergenceError, match="b"):
            optimizer_step(p, {"a": np.zeros(2), "b": np.array([0.0, np.nan])}, AdamState(), lr=0.1)
        assert np.all(p["a"].data == 0)

    def test_clip_global_norm(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_global_norm(g, 1.0) == 5.0
        np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])
        g = {"a": np.array([0.3])}
        clip_global_norm(g, 1.0)
        assert g["a"][0] == 0.3


class TestConfig:
    def test_flat_round_trip(self):
        cfg = tiny_config(p=10.0, lambda0=0.25, seed=4)
        again = TrainConfig.from_flat(json.loads(cfg.canonical_json()))
        assert again.canonical_json() == cfg.canonical_json()
        assert set(cfg.to_flat()) == set(FLAT_KEYS)

    def test_missing_and_unknown_keys(self):
        flat = tiny_config().to_flat()
        del flat["p"]
        with pytest.raises(ConfigError, match="p"):
            TrainConfig.from_flat(flat)
        with pytest.raises(ConfigError):
            tiny_config(colour="blue")

    def test_fingerprint_ignores_epochs_and_data(self):
        a = tiny_config()
        assert a.fingerprint() == a.replace(epochs=9, data_count=100).fingerprint()
        assert a.fingerprint() != a.replace(learning_rate=0.5).fingerprint()

    def test_profiles(self):
        assert profile("desk").net.num_layers == 4
        full = profile("full")
        assert full.net.num_layers == 6 and full.net.input_size == (128, 160)
        with pytest.raises(ConfigError):
            profile("cloud")


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        ckpt, _ = train(tiny_config(epochs=1), tiny_data())
        path = tmp_path / "c.ppnc"
        save_checkpoint(path, ckpt)
        back = load_checkpoint(path)
        assert path.read_bytes()[:4] == b"PPNC"
        assert checkpoint_bytes(back) == path.read_bytes()
        for name, arr in ckpt.params.items():
            assert back.params[name].tobytes() == arr.tobytes()
            assert back.moments.m[name].tobytes() == ckpt.moments.m[name].tobytes()
        assert back.step == ckpt.step == ckpt.moments.step
        assert not (tmp_path / "c.ppnc.tmp").exists()

    def test_corruption_detected(self):
        ckpt, _ = train(tiny_config(epochs=1), tiny_data())
        buf = checkpoint_bytes(ckpt)
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint_from_bytes(b"XXXX" + buf[4:])
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint_from_bytes(buf[:-3])

    def test_model_from_checkpoint_reproduces_predictions(self):
        data = tiny_data()
        ckpt, _ = train(tiny_config(epochs=1), data)
        a = model_from_checkpoint(ckpt)
        b = model_from_checkpoint(checkpoint_from_bytes(checkpoint_bytes(ckpt)))
        batch = next(data.batches(3))
        with T.no_grad():
            pa = a.forward_sequence(batch).next_frame_predictions()
            pb = b.forward_sequence(batch).next_frame_predictions()
        assert pa.tobytes() == pb.tobytes()


class TestTrain:
    def test_bit_reproducible(self):
        data = tiny_data()
        (c1, l1), (c2, l2) = train(tiny_config(), data), train(tiny_config(), data)
        assert checkpoint_bytes(c1) == checkpoint_bytes(c2)
        assert l1.losses == l2.losses

    def test_loss_decreases(self):
        _, log = train(tiny_config(epochs=8), tiny_data())
        el = log.epoch_losses()
        assert len(el) == 8 and el[-1] < el[0]

    def test_resume_equals_uninterrupted(self):
        data = tiny_data()
        full, log_full = train(tiny_config(epochs=2), data)
        half, _ = train(tiny_config(epochs=1), data)
        resumed, log_res = train(tiny_config(epochs=1), data, resume=half)
        # stored configs differ in the epoch count only
        for name, arr in full.params.items():
            assert resumed.params[name].tobytes() == arr.tobytes()
            assert resumed.moments.v[name].tobytes() == full.moments.v[name].tobytes()
        assert resumed.step == full.step
        assert log_res.losses == log_full.losses[len(log_full.losses) // 2:]

    def test_resume_rejects_other_config(self):
        ckpt, _ = train(tiny_config(epochs=1), tiny_data())
        with pytest.raises(CheckpointError):
            train(tiny_config(learning_rate=0.5), tiny_data(), resume=ckpt)

    @pytest.mark.parametrize("schedule,counts", [("pyramidal", [4, 3]), ("synchronous", [4, 4])])
    def test_cell_update_counter(self, schedule, counts):
        data = tiny_data(count=5)
        _, log = train(tiny_config(epochs=1, schedule=schedule), data)
        assert all(r.updates == counts for r in log.rows)
        assert log.cell_updates == 5 * sum(counts)
        assert [r.batch for r in log.rows] == [2, 2, 1]

    def test_log_csv(self):
        _, log = train(tiny_config(epochs=1), tiny_data())
        lines = log.to_csv().splitlines()
        assert lines[0] == "step,loss,time_ms,updates"
        assert lines[1].startswith("1,") and lines[1].endswith(",4;3")

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_divergence_keeps_last_good_state(self, tmp_path):
        path = tmp_path / "last.ppnc"
        with pytest.raises(DivergenceError) as exc:
            train(tiny_config(learning_rate=1e30, clip_norm=1e30, epochs=5), tiny_data(), checkpoint_path=path)
        ckpt = exc.value.checkpoint
        assert ckpt is not None and path.exists()
        assert all(np.isfinite(a).all() for a in ckpt.params.values())

    def test_empty_data(self):
        from ppnet.data import SequenceSet

        with pytest.raises(ValueError):
            train(tiny_config(), SequenceSet(np.zeros((0, 4, 1, 16, 16))))


class TestEvaluation:
    def test_copy_last_on_static_video_is_one(self):
        from ppnet.data import gen_moving_shapes

        data = gen_moving_shapes(0, 2, 4, (16, 16), speed_range=(0, 0))
        assert copy_last_ssim(data) == pytest.approx(1.0, abs=1e-9)

    def test_evaluate_next_frame_keys(self):
        from ppnet.data import gen_moving_shapes
        from ppnet.network import PPNet, PPNetConfig

        data = gen_moving_shapes(0, 3, 4, (16, 16), shape_size=(3, 6))
        model = PPNet(PPNetConfig(num_layers=2, channels=[2, 3], input_size=(16, 16)))
        scores = evaluate_next_frame(model, data, batch_size=2)
        assert set(scores) == {"ssim", "mse", "mean_error"}
        assert scores["mean_error"] > 0

    def test_too_short_to_score(self):
        from ppnet.network import PPNet

        with pytest.raises(ValueError, match="no step"):
            evaluate_next_frame(PPNet(tiny_config().net), tiny_data(T=2))

    def test_rewindow_preserves_frames(self):
        data = tiny_data(count=2, T=8)
        w = rewindow(data, 4)
        assert w.sequences.shape == (4, 4, 1, 16, 16)
        np.testing.assert_array_equal(w.sequences[1], data.sequences[0, 4:])
        with pytest.raises(ValueError):
            rewindow(data, 9)


class TestSweeps:
    def test_sweep_p_adds_baseline(self):
        rows = sweep_p(tiny_config(epochs=1), tiny_data(), tiny_data(seed=1, count=2), [10.0, 1000.0])
        assert [r["p"] for r in rows] == [0.0, 10.0, 1000.0]
        assert rows[0]["baseline"] and not rows[1]["baseline"]

    def test_sweep_seq_len(self):
        cfg = tiny_config(epochs=1)
        rows = sweep_seq_len(cfg, tiny_data(count=2, T=8), tiny_data(seed=1, count=2, T=8), lengths=(4, 8))
        assert [r["sequences"] for r in rows] == [4, 2]
        assert all(r["epoch_time_s"] > 0 for r in rows)
