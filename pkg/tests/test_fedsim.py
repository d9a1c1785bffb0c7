import inspect

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prfl import fedsim
from prfl.config import DatasetConfig, ExperimentConfig, ModelConfig
from prfl.dpd import DpdConfig, decode
from prfl.errors import ConfigurationError, ProtocolError
from prfl.fedsim import aggregate, apply_dp_noise, run_experiment, run_round, sample_clients, setup


def small_cfg(**kw):
    base = dict(rounds=3, clients=6, participation_ratio=0.5, local_steps=2, batch_size=8,
                dataset=DatasetConfig(num_classes=4, n_per_class=30), model=ModelConfig(hidden_width=32))
    base.update(kw)
    return ExperimentConfig(**base)


class TestSampling:
    def test_ten_percent_of_twenty(self):
        assert len(sample_clients(20, 0.1, np.random.default_rng())) == 2

    def test_all(self):
        assert sample_clients(7, 1.0, np.random.default_rng()) == list(range(7))

    def test_seeded(self):
        a = sample_clients(50, 0.3, np.random.default_rng(4))
        assert a == sample_clients(50, 0.3, np.random.default_rng(4)) and a == sorted(a)

    @pytest.mark.parametrize("ratio", [0.0, 1.5, -1])
    def test_bad_ratio(self, ratio):
        with pytest.raises(ConfigurationError):
            sample_clients(10, ratio, np.random.default_rng())

    @given(st.integers(1, 200), st.floats(0.001, 1.0))
    def test_size(self, n, ratio):
        assert len(sample_clients(n, ratio, np.random.default_rng())) == max(1, round(ratio * n))


class TestDpNoise:
    def test_zero(self):
        d = {"w": np.arange(4.0)}
        out = apply_dp_noise(d, 0.0, np.random.default_rng())
        assert np.array_equal(out["w"], d["w"]) and out["w"] is not d["w"]

    def test_std(self):
        out = apply_dp_noise({"w": np.zeros(100_000)}, 0.05, np.random.default_rng(1))
        assert abs(out["w"].std() - 0.05) < 1e-3 and abs(out["w"].mean()) < 1e-3


class TestAggregate:
    def test_one(self):
        d = {"w": np.array([1.5, -2.0])}
        assert np.array_equal(aggregate([(3, d, 10)])["w"], d["w"])

    def test_equal_weights(self):
        assert aggregate([(0, {"w": np.array([2.0])}, 5), (1, {"w": np.array([4.0])}, 5)])["w"][0] == 3.0

    def test_weighted(self):
        assert aggregate([(0, {"w": np.array([2.0])}, 1), (1, {"w": np.array([4.0])}, 3)])["w"][0] == 3.5

    def test_empty(self):
        with pytest.raises(ProtocolError):
            aggregate([])

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.floats(-10, 10), st.integers(1, 100)), min_size=1, max_size=8),
           st.randoms())
    def test_permutation_invariant_bitwise(self, items, rnd):
        ups = [(i, {"w": np.array([v])}, n) for i, (v, n) in enumerate(items)]
        shuffled = list(ups)
        rnd.shuffle(shuffled)
        assert aggregate(ups)["w"][0] == aggregate(shuffled)["w"][0]
        ones = aggregate([(i, {"w": np.array([1.0])}, n) for i, _, n in ups])["w"][0]
        assert abs(ones - 1.0) <= 1e-12


class TestRounds:
    def test_rounds_zero(self):
        reports, summary = run_experiment(small_cfg(rounds=0))
        assert len(reports) == 1 and reports[0].round == 0 and reports[0].participants == []
        assert 0 <= summary["final_mean_accuracy"] <= 1

    def test_local_never_changes_global(self):
        sim = setup(small_cfg(strategy="local"))
        g0 = sim.server.global_student.copy()
        for _ in range(3):
            rep = run_round(sim)
            assert rep.uploaded_floats == 0
        assert sim.server.global_student.equals(g0)

    @pytest.mark.parametrize("strategy", ["prfl", "fedavg", "local"])
    def test_deterministic(self, strategy):
        a, _ = run_experiment(small_cfg(strategy=strategy))
        b, _ = run_experiment(small_cfg(strategy=strategy))
        assert [r.accuracy for r in a] == [r.accuracy for r in b]
        assert [r.uploaded_floats for r in a] == [r.uploaded_floats for r in b]

    def test_threads_do_not_change_results(self, monkeypatch):
        a, _ = run_experiment(small_cfg())
        monkeypatch.setenv("PRFL_THREADS", "3")
        b, _ = run_experiment(small_cfg())
        assert [r.accuracy for r in a] == [r.accuracy for r in b]

    def test_report_fields(self):
        reps, _ = run_experiment(small_cfg(rounds=2))
        r = reps[-1]
        assert len(r.participants) == 3
        assert 0 < r.uploaded_floats <= r.full_floats
        assert 0 < r.compression_ratio <= 1
        assert set(r.losses) == set(r.participants)
        assert all(0 <= a <= 1 for a in r.accuracy.values() if not np.isnan(a))

    def test_fedavg_uploads_raw(self):
        reps, _ = run_experiment(small_cfg(strategy="fedavg", rounds=1))
        assert reps[-1].uploaded_floats == reps[-1].full_floats

    def test_full_mode_uploads_everything(self):
        reps, s = run_experiment(small_cfg(dpd=DpdConfig(mode="full"), rounds=1))
        assert s["compression_ratio"] == 1.0

    def test_smallcnn_runs(self):
        cfg = small_cfg(model=ModelConfig(kind="smallcnn", hidden_width=16, channels=(2, 4)), rounds=1)
        assert cfg.dataset.dims == (1, 16, 16)
        reps, _ = run_experiment(cfg)
        assert reps[-1].uploaded_floats < reps[-1].full_floats

    def test_dp_noise_changes_result(self):
        a, _ = run_experiment(small_cfg(dp_tau=0.0))
        b, _ = run_experiment(small_cfg(dp_tau=0.1))
        assert a[-1].accuracy != b[-1].accuracy


class TestBoundary:
    def test_server_functions_take_bytes(self):
        sig = inspect.signature(fedsim.server_receive)
        assert list(sig.parameters) == ["messages"]
        assert "bytes" in str(sig.parameters["messages"].annotation)
        assert "Dataset" not in inspect.getsource(fedsim.server_receive)

    def test_messages_carry_student_only(self, monkeypatch):
        seen = []
        real = fedsim.server_receive

        def spy(messages):
            seen.extend(messages.values())
            return real(messages)

        monkeypatch.setattr(fedsim, "server_receive", spy)
        sim = setup(small_cfg())
        run_round(sim)
        student_names = set(sim.server.global_student.names())
        assert seen
        for blob in seen:
            assert isinstance(blob, bytes)
            assert {m.name for m in decode(blob).matrices} == student_names

    def test_corrupt_message_dropped(self, monkeypatch):
        real = fedsim.server_receive

        def corrupt(messages):
            first = min(messages)
            bad = dict(messages)
            bad[first] = messages[first][:-1] + bytes([messages[first][-1] ^ 1])
            return real(bad)

        monkeypatch.setattr(fedsim, "server_receive", corrupt)
        sim = setup(small_cfg())
        rep = run_round(sim)
        assert len(rep.dropped) == 1 and "Checksum" in next(iter(rep.dropped.values()))

    def test_all_dropped_keeps_global(self, monkeypatch):
        monkeypatch.setattr(fedsim, "server_receive",
                            lambda messages: ({}, {cid: "dropped" for cid in messages}))
        sim = setup(small_cfg())
        g0 = sim.server.global_student.copy()
        run_round(sim)
        assert sim.server.global_student.equals(g0)

    def test_diverged_client_dropped(self, monkeypatch):
        real = fedsim.local_update

        def blow_up(state, base, steps, lr, *args):
            return real(state, base, steps, 1e40 if state.client_id == 1 else lr, *args)

        monkeypatch.setattr(fedsim, "local_update", blow_up)
        sim = setup(small_cfg(participation_ratio=1.0))
        teacher = sim.clients[1].teacher.copy()
        rep = run_round(sim)
        assert "float32" in rep.dropped[1] and 1 not in rep.uploads
        assert sim.clients[1].teacher.equals(teacher)
        assert all(np.all(np.isfinite(v)) for v in sim.server.global_student.as_dict().values())

    def test_empty_client_skipped(self):
        sim = setup(small_cfg(participation_ratio=1.0))
        sim.clients[2].train_idx = sim.clients[2].train_idx[:0]
        rep = run_round(sim)
        assert 2 in rep.dropped and 2 not in rep.losses
