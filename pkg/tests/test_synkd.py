import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff, mlp, rel_err, synkd_gradient_errors
from prfl.errors import DivergenceError, EmptyClientError, ShapeError
from prfl.nncore import ModelSpec, backward, build_model, cross_entropy, forward
from prfl.synkd import (
    STUDENT,
    TEACHER,
    ClientState,
    SynKDConfig,
    bidir_distill_losses,
    correction_loss,
    init_aux,
    kl_div,
    latent_repr_loss,
    local_update,
    loss_graph,
    total_losses,
)

SPEC = ModelSpec("mlp", (6,), 3, 5)


def make_state(seed=0, n=40, spec=SPEC, same=False) -> ClientState:
    r = np.random.default_rng(seed)
    teacher = build_model(spec, r)
    student = teacher.copy() if same else build_model(spec, r)
    x = r.normal(size=(n, *spec.input_dims))
    y = r.integers(0, spec.num_classes, n)
    idx = np.arange(n)
    return ClientState(0, teacher, student, init_aux(spec.hidden_dim, r), x, y,
                       idx[: int(0.8 * n)], idx[int(0.8 * n): int(0.9 * n)], idx[int(0.9 * n):],
                       np.random.default_rng(seed + 100))


class TestCorrectionLoss:
    def test_equal_states(self):
        h = np.random.default_rng().normal(size=(3, 4))
        assert correction_loss(h, h, np.eye(4)) == 0

    def test_hand_value(self):
        assert correction_loss([[1.0, 0.0]], [[0.0, 0.0]], np.eye(2)) == 0.5

    def test_zero_matrix(self):
        r = np.random.default_rng(1)
        assert correction_loss(r.normal(size=(2, 3)), r.normal(size=(2, 3)), np.zeros((3, 3))) == 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            correction_loss(np.zeros((2, 3)), np.zeros((2, 4)), np.eye(3))
        with pytest.raises(ShapeError):
            correction_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.eye(2))


class TestLatentLoss:
    def test_values(self):
        assert latent_repr_loss(0.0, 1.0, 2.0) == 0
        assert np.isclose(latent_repr_loss(2.0, 1.0, 1.0), 1.0)

    def test_zero_tasks_finite(self):
        assert np.isfinite(latent_repr_loss(1.0, 0.0, 0.0))

    @settings(max_examples=50)
    @given(st.floats(1e-3, 10), st.floats(0, 10), st.floats(1e-3, 10))
    def test_decreasing_in_task_losses(self, cor, task, bump):
        assert latent_repr_loss(cor, task, task + bump) < latent_repr_loss(cor, task, task)


class TestKl:
    def test_equal(self):
        assert kl_div([0.2, 0.8], [0.2, 0.8]) == 0

    def test_ln2(self):
        assert np.isclose(kl_div([1.0, 0.0], [0.5, 0.5]), np.log(2))

    def test_nonnegative_vs_direct_sum(self):
        r = np.random.default_rng(0)
        for _ in range(1000):
            p, q = r.dirichlet(np.ones(4)), r.dirichlet(np.ones(4))
            direct = sum(pi * np.log(pi / qi) for pi, qi in zip(p, q))
            v = kl_div(p, q)
            assert v >= 0 and np.isclose(v, direct)

    def test_batch_mean(self):
        p = np.array([[1.0, 0.0], [0.5, 0.5]])
        q = np.array([[0.5, 0.5], [0.5, 0.5]])
        assert np.isclose(kl_div(p, q), np.log(2) / 2)


class TestBidir:
    def test_equal(self):
        p = np.array([[0.3, 0.7]])
        assert bidir_distill_losses(p, p, 1.0, 1.0) == (0.0, 0.0)

    def test_hand_value(self):
        l_t, _ = bidir_distill_losses([[1.0, 0.0]], [[0.5, 0.5]], 0.5, 0.5)
        assert np.isclose(l_t, np.log(2))

    def test_swap(self):
        a, b = np.array([[0.9, 0.1]]), np.array([[0.4, 0.6]])
        assert bidir_distill_losses(a, b, 1, 2) == bidir_distill_losses(b, a, 1, 2)[::-1]

    def test_decreasing_in_task_sum(self):
        a, b = np.array([[0.9, 0.1]]), np.array([[0.4, 0.6]])
        lo, hi = bidir_distill_losses(a, b, 0.5, 0.5), bidir_distill_losses(a, b, 1.0, 0.5)
        assert hi[0] < lo[0] and hi[1] < lo[1]


class TestTotalLosses:
    def test_identical_models(self):
        s = make_state(same=True)
        x, y = s.split("train")
        b = total_losses(x, y, s)
        assert b.l_cor == 0 and b.l_d_t == 0 and b.l_d_s == 0 and b.l_lrl == 0
        assert b.l_bik_t == b.l_task_t and b.l_bik_s == b.l_task_s

    def test_nonnegative_and_sum_exact(self):
        for seed in range(100):
            s = make_state(seed, n=10)
            x, y = s.split("train")
            b = total_losses(x, y, s)
            assert min(b.l_cor, b.l_task_t, b.l_task_s, b.l_lrl, b.l_d_t, b.l_d_s) >= 0
            assert b.l_bik_s - (b.l_d_s + b.l_lrl + b.l_task_s) == 0
            assert b.l_bik_t - (b.l_d_t + b.l_lrl + b.l_task_t) == 0

    def test_matches_plain_numpy(self):
        s = make_state(3)
        x, y = s.split("train")
        b = total_losses(x, y, s)
        ft, fs = forward(s.teacher, x), forward(s.student, x)
        assert np.isclose(b.l_task_t, cross_entropy(ft.probs, y))
        assert np.isclose(b.l_cor, correction_loss(fs.hidden, ft.hidden, s.w_aux))
        assert np.isclose(b.l_lrl, latent_repr_loss(b.l_cor, b.l_task_t, b.l_task_s))
        assert np.allclose((b.l_d_t, b.l_d_s), bidir_distill_losses(ft.probs, fs.probs, b.l_task_t, b.l_task_s))

    def test_no_lrl_switch(self):
        s = make_state(4)
        x, y = s.split("train")
        b = total_losses(x, y, s, SynKDConfig(use_lrl=False))
        assert b.l_bik_t == b.l_d_t + b.l_task_t


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_all_losses_fd(self, seed):
        s = make_state(seed)
        x, y = s.features[:4], s.labels[:4]
        errs = synkd_gradient_errors(s.teacher, s.student, s.w_aux, x, y)
        assert max(errs.values()) < 1e-4, errs

    def test_no_cross_leak(self):
        s = make_state(5)
        x, y = s.features[:4], s.labels[:4]
        g = loss_graph(s.teacher, s.student, s.w_aux, x, y)
        gt = backward(g.tape, g.l_bik_t)
        gs = backward(g.tape, g.l_bik_s)
        assert all(np.all(v == 0) for k, v in gs.items() if k.startswith(TEACHER))
        assert all(np.all(v == 0) for k, v in gt.items() if k.startswith(STUDENT))

    def test_plain_mse_variant_fd(self):
        s = make_state(6)
        x, y = s.features[:4], s.labels[:4]
        g = loss_graph(s.teacher, s.student, s.w_aux, x, y, SynKDConfig(use_aux=False))
        grads = backward(g.tape, g.l_cor)
        pt = {k: v.copy() for k, v in s.teacher.as_dict().items()}
        hs = mlp(s.student.as_dict(), x)[0]
        for k, arr in pt.items():
            fd = central_diff(lambda: float(np.mean((hs - mlp(pt, x)[0]) ** 2)), arr)
            assert rel_err(grads[TEACHER + k], fd) < 1e-4


class TestLocalUpdate:
    def test_zero_lr(self):
        s = make_state()
        res = local_update(s, s.student.copy(), 2, 0.0, 8)
        assert all(np.all(d == 0) for d in res.delta.values())

    def test_keys_and_count(self):
        s = make_state()
        res = local_update(s, s.student.copy(), 1, 0.1, 8)
        assert list(res.delta) == s.student.names()
        assert res.sample_count == 32

    def test_single_step_matches_gradient(self):
        spec = ModelSpec("mlp", (1,), 2, 1)
        s = make_state(7, n=10, spec=spec)
        glob = build_model(spec, np.random.default_rng(8))
        ref = make_state(7, n=10, spec=spec)
        lr = 0.01
        res = local_update(s, glob, 1, lr, 64)
        # full batch, so the step is deterministic: recompute the student gradient by finite differences
        x, y = ref.split("train")
        values = {k: v.copy() for k, v in glob.as_dict().items()}
        g = loss_graph(ref.teacher, glob, ref.w_aux, x, y)
        b0 = g.bundle()
        den = b0.l_task_t + b0.l_task_s + 1e-8
        pt = ref.teacher.as_dict()
        h_t, p_t = mlp(pt, x)

        def l_bik_s():
            h_s, p_s = mlp(values, x)
            task = -np.mean(np.log(p_s[np.arange(len(y)), y]))
            kl = np.mean(np.sum(p_s * (np.log(p_s) - np.log(p_t)), axis=1))
            cor = np.mean((h_s @ ref.w_aux - h_t @ ref.w_aux) ** 2)
            return kl / den + cor / den + task

        for k, arr in values.items():
            fd = central_diff(l_bik_s, arr)
            np.testing.assert_allclose(res.delta[k], -lr * fd, rtol=1e-5, atol=1e-10)

    def test_student_reset_teacher_persists(self):
        s = make_state()
        teacher0 = s.teacher.copy()
        glob = build_model(SPEC, np.random.default_rng(99))
        local_update(s, glob, 3, 0.1, 8)
        assert not s.teacher.equals(teacher0)
        t1 = s.teacher.copy()
        res = local_update(s, glob, 1, 0.0, 8)
        assert s.teacher.equals(t1)
        assert s.student.equals(glob)
        assert all(np.all(d == 0) for d in res.delta.values())

    def test_deterministic(self):
        a, b = make_state(2), make_state(2)
        glob = build_model(SPEC, np.random.default_rng(1))
        ra, rb = local_update(a, glob, 4, 0.05, 8), local_update(b, glob, 4, 0.05, 8)
        assert all(np.array_equal(ra.delta[k], rb.delta[k]) for k in ra.delta)

    def test_w_aux_trained(self):
        s = make_state()
        w0 = s.w_aux.copy()
        local_update(s, build_model(SPEC, np.random.default_rng(1)), 2, 0.1, 8)
        assert not np.array_equal(w0, s.w_aux)

    def test_empty_client(self):
        s = make_state()
        s.train_idx = s.train_idx[:0]
        with pytest.raises(EmptyClientError):
            local_update(s, s.student, 1, 0.1, 8)

    def test_divergence_rolls_back(self):
        s = make_state()
        before = (s.teacher.copy(), s.student.copy(), s.w_aux.copy())
        with pytest.raises(DivergenceError):
            local_update(s, s.teacher, 3, 1e40, 8)
        assert s.teacher.equals(before[0]) and s.student.equals(before[1])
        assert np.array_equal(s.w_aux, before[2])

    def test_shared_spec_required(self):
        s = make_state()
        with pytest.raises(ShapeError):
            ClientState(0, s.teacher, build_model(ModelSpec("mlp", (6,), 3, 4), np.random.default_rng()),
                        s.w_aux, s.features, s.labels, s.train_idx, s.val_idx, s.test_idx, s.rng)
