"""Synchronized bidirectional distillation between a local teacher and student.

Both models share one architecture. Each local step computes the task
losses, a correction loss on the backbone outputs projected through a
trainable square matrix, and KL terms in both directions. Distillation
terms are divided by the (detached) sum of the two task losses so that
they fade while the models are still poorly fit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, EmptyClientError, ShapeError
from .nncore import ModelParams, Tape, backward, cross_entropy_node, forward_on_tape, sgd_step
from .nncore import tape as T

DEN_EPS = 1e-8
PROB_EPS = T.PROB_EPS
# Largest magnitude a transmitted float32 can hold.
WIRE_MAX = float(np.finfo(np.float32).max)

TEACHER = "teacher/"
STUDENT = "student/"
AUX = "w_aux"


@dataclass
class SynKDConfig:
    """Switches for the distillation ablations.

    ``use_aux=False`` replaces the projected correction loss by a plain mean
    squared difference of hidden states; ``use_lrl=False`` drops the latent
    representation term from both total losses.
    """

    use_aux: bool = True
    use_lrl: bool = True


@dataclass
class ClientState:
    client_id: int
    teacher: ModelParams
    student: ModelParams
    w_aux: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    rng: np.random.Generator = field(repr=False)

    def __post_init__(self):
        d = self.student.spec.hidden_dim
        if self.teacher.spec != self.student.spec:
            raise ShapeError("teacher and student must share one ModelSpec")
        if self.w_aux.shape != (d, d):
            raise ShapeError(f"w_aux must be {d}x{d}, got {self.w_aux.shape}")

    @property
    def num_train(self) -> int:
        return len(self.train_idx)

    def split(self, name: str):
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]
        return self.features[idx], self.labels[idx]


@dataclass
class LossBundle:
    l_cor: float
    l_task_t: float
    l_task_s: float
    l_lrl: float
    l_d_t: float
    l_d_s: float
    l_bik_t: float
    l_bik_s: float


@dataclass
class LocalUpdateResult:
    delta: dict[str, np.ndarray]
    sample_count: int
    final_losses: LossBundle


def init_aux(d: int, rng: np.random.Generator) -> np.ndarray:
    return np.eye(d) + rng.normal(0.0, 0.01, size=(d, d))


def correction_loss(h_s, h_t, w_aux) -> float:
    h_s, h_t, w_aux = (np.asarray(a, dtype=np.float64) for a in (h_s, h_t, w_aux))
    if h_s.shape != h_t.shape or h_s.ndim != 2 or w_aux.shape != (h_s.shape[1], h_s.shape[1]):
        raise ShapeError(f"incompatible shapes {h_s.shape}, {h_t.shape}, {w_aux.shape}")
    diff = h_s @ w_aux - h_t @ w_aux
    return float(np.mean(diff * diff))


def latent_repr_loss(l_cor: float, l_task_t: float, l_task_s: float) -> float:
    return l_cor / (l_task_t + l_task_s + DEN_EPS)


def kl_div(p, q) -> float:
    """KL(p || q) for a single row, or the mean over rows for a batch."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    terms = p * (np.log(np.maximum(p, PROB_EPS)) - np.log(np.maximum(q, PROB_EPS)))
    return float(terms.sum(axis=1).mean())


def bidir_distill_losses(probs_t, probs_s, l_task_t: float, l_task_s: float) -> tuple[float, float]:
    den = l_task_t + l_task_s + DEN_EPS
    return kl_div(probs_t, probs_s) / den, kl_div(probs_s, probs_t) / den


# --- recorded versions --------------------------------------------------------


def _correction_node(h_s, h_t, w_aux):
    diff = h_s - h_t if w_aux is None else T.matmul(h_s, w_aux) - T.matmul(h_t, w_aux)
    return T.mean(T.square(diff))


def _kl_node(p, q_const):
    """Batch-mean KL(p || q) with q carrying no gradient."""
    log_q = np.log(np.maximum(q_const, PROB_EPS))
    return T.mean(T.sum_rows(T.mul(p, T.sub(T.log_clamped(p), log_q))))


@dataclass
class LossGraph:
    tape: Tape
    l_cor: T.Node
    l_task_t: T.Node
    l_task_s: T.Node
    l_lrl_t: T.Node
    l_lrl_s: T.Node
    l_d_t: T.Node
    l_d_s: T.Node
    l_bik_t: T.Node
    l_bik_s: T.Node

    def bundle(self) -> LossBundle:
        v = lambda n: float(n.value)
        return LossBundle(
            l_cor=v(self.l_cor), l_task_t=v(self.l_task_t), l_task_s=v(self.l_task_s),
            l_lrl=v(self.l_lrl_s), l_d_t=v(self.l_d_t), l_d_s=v(self.l_d_s),
            l_bik_t=v(self.l_bik_t), l_bik_s=v(self.l_bik_s),
        )


def loss_graph(teacher: ModelParams, student: ModelParams, w_aux, batch, labels,
               cfg: SynKDConfig | None = None) -> LossGraph:
    """Record every distillation loss for one batch on a fresh tape.

    Parameters appear on the tape as ``teacher/<name>``, ``student/<name>``
    and ``w_aux``. The teacher's total loss only reaches teacher parameters
    (and ``w_aux``), the student's only student parameters (and ``w_aux``).
    """
    cfg = cfg or SynKDConfig()
    tape = Tape()
    ft = forward_on_tape(tape, teacher, batch, TEACHER)
    fs = forward_on_tape(tape, student, batch, STUDENT)
    w = tape.param(AUX, w_aux) if cfg.use_aux else None

    l_task_t = cross_entropy_node(ft.probs, labels)
    l_task_s = cross_entropy_node(fs.probs, labels)
    den = float(l_task_t.value) + float(l_task_s.value) + DEN_EPS
    inv = 1.0 / den

    l_cor = _correction_node(fs.hidden, ft.hidden, w)
    l_lrl_t = T.scale(_correction_node(T.detach(fs.hidden), ft.hidden, w), inv)
    l_lrl_s = T.scale(_correction_node(fs.hidden, T.detach(ft.hidden), w), inv)

    l_d_t = T.scale(_kl_node(ft.probs, fs.probs.value), inv)
    l_d_s = T.scale(_kl_node(fs.probs, ft.probs.value), inv)

    if cfg.use_lrl:
        l_bik_t = T.add(T.add(l_d_t, l_lrl_t), l_task_t)
        l_bik_s = T.add(T.add(l_d_s, l_lrl_s), l_task_s)
    else:
        l_bik_t = T.add(l_d_t, l_task_t)
        l_bik_s = T.add(l_d_s, l_task_s)
    return LossGraph(tape, l_cor, l_task_t, l_task_s, l_lrl_t, l_lrl_s, l_d_t, l_d_s, l_bik_t, l_bik_s)


def split_grads(grads: dict[str, np.ndarray]):
    gt = {k[len(TEACHER):]: v for k, v in grads.items() if k.startswith(TEACHER)}
    gs = {k[len(STUDENT):]: v for k, v in grads.items() if k.startswith(STUDENT)}
    return gt, gs, grads.get(AUX)


def total_losses(batch, labels, state: ClientState, cfg: SynKDConfig | None = None) -> LossBundle:
    return loss_graph(state.teacher, state.student, state.w_aux, batch, labels, cfg).bundle()


def _draw_batch(state: ClientState, batch_size: int):
    n = state.num_train
    take = state.rng.choice(n, size=min(batch_size, n), replace=False)
    idx = state.train_idx[np.sort(take)]
    return state.features[idx], state.labels[idx]


def _finite(*arrays) -> bool:
    return all(np.all(np.isfinite(a)) and np.all(np.abs(a) <= WIRE_MAX) for a in arrays)


def local_update(state: ClientState, global_student: ModelParams, steps: int, lr: float,
                 batch_size: int, cfg: SynKDConfig | None = None) -> LocalUpdateResult:
    """Co-train teacher and student for ``steps`` minibatches.

    The student restarts from ``global_student``; the teacher and ``w_aux``
    carry over in ``state``. Returns the student's parameter change.

    When both task losses reach zero the distillation weight approaches
    ``1 / DEN_EPS`` and a step can blow the parameters up. If any value
    stops fitting in float32, the state is restored to what it was before
    the call and :class:`DivergenceError` is raised.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if state.num_train == 0:
        raise EmptyClientError(f"client {state.client_id} has no training samples")
    cfg = cfg or SynKDConfig()
    saved = (state.teacher, state.student, state.w_aux)
    try:
        return _co_train(state, global_student, steps, lr, batch_size, cfg)
    except DivergenceError:
        state.teacher, state.student, state.w_aux = saved
        raise


def _co_train(state, global_student, steps, lr, batch_size, cfg) -> LocalUpdateResult:
    state.student = global_student.copy()
    bundle = None
    for _ in range(steps):
        x, y = _draw_batch(state, batch_size)
        g = loss_graph(state.teacher, state.student, state.w_aux, x, y, cfg)
        bundle = g.bundle()
        gt, _, _ = split_grads(backward(g.tape, g.l_bik_t))
        _, gs, _ = split_grads(backward(g.tape, g.l_bik_s))
        if cfg.use_aux:
            g_aux = backward(g.tape, T.add(g.l_bik_t, g.l_bik_s))[AUX]
            state.w_aux = state.w_aux - lr * g_aux
        state.teacher = sgd_step(state.teacher, gt, lr)
        state.student = sgd_step(state.student, gs, lr)
        if not _finite(state.w_aux, *state.teacher.as_dict().values(), *state.student.as_dict().values()):
            raise DivergenceError(f"client {state.client_id}: local parameters left float32 range "
                                  f"(task losses {bundle.l_task_t:.3g}, {bundle.l_task_s:.3g})")
    return LocalUpdateResult(state.student.sub(global_student), state.num_train, bundle)


def plain_update(state: ClientState, start: ModelParams, steps: int, lr: float,
                 batch_size: int) -> LocalUpdateResult:
    """Cross-entropy-only SGD on the student, used by the FedAvg and Local baselines."""
    if state.num_train == 0:
        raise EmptyClientError(f"client {state.client_id} has no training samples")
    state.student = start.copy()
    loss = None
    for _ in range(steps):
        x, y = _draw_batch(state, batch_size)
        tape = Tape()
        out = forward_on_tape(tape, state.student, x)
        loss = cross_entropy_node(out.probs, y)
        state.student = sgd_step(state.student, backward(tape, loss), lr)
    lt = float(loss.value)
    bundle = LossBundle(0.0, lt, lt, 0.0, 0.0, 0.0, lt, lt)
    return LocalUpdateResult(state.student.sub(start), state.num_train, bundle)
