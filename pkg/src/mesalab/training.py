"""Empirical autoregressive loss, analytic gradients, and vanilla gradient descent.

The per-sequence loss is sum_{t=2}^{T-1} 0.5 |yhat_t - x_{t+1}|^2 and the batch
loss is its mean over a fixed dataset (the population expectation is
approximated once by sampling, not resampled per epoch).  Gradients are exact
and analytic: the prediction is linear in each real parameter, so for any
parameter p entering the complex prediction the contribution is
Re{(yhat - x_target)^* d yhat / d p}, accumulated over t and sequences in
fixed index order.  Central finite differences serve as the correctness oracle
in the test suite.

All heavy lifting is vectorized over (sequence, time) pairs.  For a fixed
dataset the per-step prompt second moments S_t never change, so they are
precomputed once when they fit in a memory budget and recomputed in
fixed-order chunks otherwise; both paths reduce in the same index order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from mesalab.ar_data import ARSequence, rng_stream
from mesalab.attention import AttentionParams, DiagonalAB

# elements of complex workspace per dataset before switching to chunked recompute
_PRECOMPUTE_BUDGET = 20_000_000


class TrainingDiverged(RuntimeError):
    """Raised when the batch loss explodes past the divergence guard."""


@dataclass(frozen=True)
class Diagonal:
    """Diagonal start: kq32 = a0 I, pv12 = b0 I, all other blocks zero."""

    a0: float
    b0: float


@dataclass(frozen=True)
class GaussianInit:
    """Every entry of every trainable block i.i.d. N(0, sigma_w^2)."""

    sigma_w: float


InitSpec = Union[Diagonal, GaussianInit]


@dataclass(frozen=True)
class TrainConfig:
    n: int
    T_tr: int
    d: int
    init: InitSpec
    step_size: float
    epochs: int
    mask_nondiagonal: bool = False
    seed: int = 1
    log_every: int = 10
    stop_tol: float | None = None  # stop early once step_size * max|grad| falls below

    def __post_init__(self):
        if self.T_tr < 3:
            raise ValueError("T_tr must be >= 3 (loss needs at least the t=2 term)")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.n < 1 or self.d < 1 or self.epochs < 0:
            raise ValueError("n, d must be positive and epochs nonnegative")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


@dataclass(frozen=True)
class Gradient:
    """Gradient of the batch loss over the trainable blocks."""

    wkq: np.ndarray
    wpv: np.ndarray
    d: int


@dataclass(frozen=True)
class TrainSnapshot:
    epoch: int
    params: AttentionParams
    train_loss: float
    test_loss: float
    diag_a: float
    diag_b: float
    ab: float


@dataclass
class TrainTrajectory:
    snapshots: list[TrainSnapshot] = field(default_factory=list)

    @property
    def final(self) -> TrainSnapshot:
        return self.snapshots[-1]


# ---------------------------------------------------------------------------
# batched loss/gradient kernel
# ---------------------------------------------------------------------------


def stack_dataset(dataset: Sequence[ARSequence]) -> np.ndarray:
    """Pack a dataset into an (n, T, d) complex array; shapes must agree."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    T, d = dataset[0].T, dataset[0].d
    for seq in dataset:
        if seq.T != T or seq.d != d:
            raise ValueError("dataset sequences have mismatched shapes")
    return np.stack([seq.x for seq in dataset])


def _embed_tokens(X: np.ndarray) -> np.ndarray:
    """Reduced embedded tokens (x_i, x_{i-1}) for every position, x_0 = 0."""
    n, T, d = X.shape
    E = np.zeros((n, T, 2 * d), dtype=complex)
    E[:, :, :d] = X
    E[:, 1:, d:] = X[:, :-1]
    return E


def _prompt_tensors(X: np.ndarray):
    """Per (sequence, t) tensors for t = 2..T-1: second moment S, query token e,
    and target x_{t+1}."""
    n, T, d = X.shape
    E = _embed_tokens(X)
    outer = E[:, :, :, None] * np.conj(E)[:, :, None, :]
    C = np.cumsum(outer, axis=1)
    ts = np.arange(2, T)
    rho = (ts - 1).astype(float)
    S = C[:, ts - 1] / rho[None, :, None, None]
    return S, E[:, ts - 1], X[:, ts]


def _stream_eval(X: np.ndarray, E: np.ndarray, wkq: np.ndarray, wpv: np.ndarray, want_grad: bool):
    """Loss/gradient sums via a running second-moment accumulator over t.

    Same reductions as the precomputed path but with O(n d^2) workspace, for
    datasets whose per-step tensors do not fit the memory budget."""
    n, T, d = X.shape
    C = np.einsum("ni,nj->nij", E[:, 0], np.conj(E[:, 0]))
    loss = 0.0
    g_kq = np.zeros((2 * d, 2 * d)) if want_grad else None
    g_pv = np.zeros((d, 2 * d)) if want_grad else None
    for t in range(2, T):  # 1-based prediction positions 2..T-1
        e_t = E[:, t - 1]
        C += np.einsum("ni,nj->nij", e_t, np.conj(e_t))
        rho = float(t - 1)
        q = e_t @ wkq.T
        v = np.einsum("nlk,nk->nl", C, q) / rho
        r = v @ wpv.T - X[:, t]
        loss += 0.5 * float(np.sum(np.abs(r) ** 2))
        if want_grad:
            g_pv += np.real(np.einsum("nj,nl->jl", np.conj(r), v))
            w = np.conj(r) @ wpv
            u = np.einsum("nkj,nk->nj", C, w) / rho
            g_kq += np.real(np.einsum("nk,nl->kl", u, e_t))
    return loss, g_kq, g_pv


def _chunk_loss_grad(S, e, tgt, wkq, wpv, want_grad: bool):
    """Loss and (optionally) gradient sums over one chunk, not yet divided by n."""
    q = np.einsum("lk,nmk->nml", wkq, e)
    v = np.einsum("nmlk,nmk->nml", S, q)
    yhat = np.einsum("jl,nml->nmj", wpv, v)
    r = yhat - tgt
    loss = 0.5 * float(np.sum(np.abs(r) ** 2))
    if not want_grad:
        return loss, None, None
    g_pv = np.real(np.einsum("nmj,nml->jl", np.conj(r), v))
    w = np.einsum("jl,nmj->nml", wpv, np.conj(r))
    u = np.einsum("nmkj,nmk->nmj", S, w)
    g_kq = np.real(np.einsum("nmk,nml->kl", u, e))
    return loss, g_kq, g_pv


class BatchKernel:
    """Loss/gradient evaluator bound to one fixed dataset.

    Precomputes the prompt second moments when the workspace fits the memory
    budget; for larger datasets streams a running accumulator over positions
    instead.  Either way the reduction order is a fixed function of the
    dataset, so repeated evaluations are bitwise identical.
    """

    def __init__(self, X: np.ndarray, max_elements: int = _PRECOMPUTE_BUDGET):
        n, T, d = X.shape
        if T < 3:
            raise ValueError("loss needs T >= 3")
        self.X = X
        self.n, self.T, self.d = n, T, d
        per_seq = (T - 2) * (2 * d) ** 2
        self.chunk = max(1, min(n, max_elements // max(per_seq, 1)))
        if self.chunk >= n:
            self._tensors = _prompt_tensors(X)
            self._E = None
        else:
            self._tensors = None
            self._E = _embed_tokens(X)

    def _iter_chunks(self):
        """Fixed-order chunks of the precomputed tensors (per-sequence paths)."""
        if self._tensors is not None:
            yield self._tensors
            return
        for start in range(0, self.n, self.chunk):
            yield _prompt_tensors(self.X[start : start + self.chunk])

    def loss_and_gradient(self, params: AttentionParams) -> tuple[float, Gradient]:
        if self._tensors is not None:
            S, e, tgt = self._tensors
            loss, g_kq, g_pv = _chunk_loss_grad(S, e, tgt, params.wkq, params.wpv, True)
        else:
            loss, g_kq, g_pv = _stream_eval(self.X, self._E, params.wkq, params.wpv, True)
        n = float(self.n)
        return loss / n, Gradient(g_kq / n, g_pv / n, self.d)

    def loss(self, params: AttentionParams) -> float:
        if self._tensors is not None:
            S, e, tgt = self._tensors
            total = _chunk_loss_grad(S, e, tgt, params.wkq, params.wpv, False)[0]
        else:
            total = _stream_eval(self.X, self._E, params.wkq, params.wpv, False)[0]
        return total / float(self.n)

    def diagonal_curvature(self, params: AttentionParams) -> tuple[np.ndarray, np.ndarray]:
        """Entrywise second derivatives of the batch loss.

        The prediction is linear in each single parameter, so
        d^2 L / dp^2 = mean_n sum_t |d yhat / dp|^2 exactly:

            wkq entry (k, l): mean sum_t ||(wpv S_t)_{:,k}||^2 |e_{t,l}|^2
            wpv entry (j, k): mean sum_t |(S_t wkq e_t)_k|^2   (same for all j)
        """
        h_kq = np.zeros_like(params.wkq)
        h_pv = np.zeros_like(params.wpv)
        for S, e, _ in self._iter_chunks():
            ps = np.einsum("jl,nmlk->nmjk", params.wpv, S)
            col = np.sum(np.abs(ps) ** 2, axis=2)  # (n, m, 2d)
            h_kq += np.einsum("nmk,nml->kl", col, np.abs(e) ** 2)
            q = np.einsum("lk,nmk->nml", params.wkq, e)
            v = np.einsum("nmlk,nmk->nml", S, q)
            h_pv += np.sum(np.abs(v) ** 2, axis=(0, 1))[None, :]
        return h_kq / float(self.n), h_pv / float(self.n)

    def per_sequence_gradients(self, params: AttentionParams) -> tuple[np.ndarray, np.ndarray]:
        """Per-sequence gradients (n, 2d, 2d) and (n, d, 2d); their mean equals
        loss_and_gradient's.  Used for Monte-Carlo standard errors."""
        g_kq = np.empty((self.n, 2 * self.d, 2 * self.d))
        g_pv = np.empty((self.n, self.d, 2 * self.d))
        pos = 0
        for S, e, tgt in self._iter_chunks():
            q = np.einsum("lk,nmk->nml", params.wkq, e)
            v = np.einsum("nmlk,nmk->nml", S, q)
            r = np.einsum("jl,nml->nmj", params.wpv, v) - tgt
            g_pv[pos : pos + r.shape[0]] = np.real(np.einsum("nmj,nml->njl", np.conj(r), v))
            w = np.einsum("jl,nmj->nml", params.wpv, np.conj(r))
            u = np.einsum("nmkj,nmk->nmj", S, w)
            g_kq[pos : pos + r.shape[0]] = np.real(np.einsum("nmk,nml->nkl", u, e))
            pos += r.shape[0]
        return g_kq, g_pv


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def sequence_loss(params: AttentionParams, seq: ARSequence) -> float:
    """sum_{t=2}^{T-1} 0.5 |yhat_t - x_{t+1}|^2 for one sequence."""
    if seq.T < 3:
        raise ValueError("sequence loss needs T >= 3")
    return BatchKernel(seq.x[None, :, :]).loss(params)


def batch_loss(params: AttentionParams, dataset: Sequence[ARSequence]) -> float:
    """Mean of sequence_loss over the dataset, reduced in index order."""
    return BatchKernel(stack_dataset(dataset)).loss(params)


def loss_gradient(params: AttentionParams, dataset: Sequence[ARSequence]) -> Gradient:
    """Exact analytic gradient of batch_loss over every real entry of wkq, wpv."""
    return BatchKernel(stack_dataset(dataset)).loss_and_gradient(params)[1]


def mask_nondiagonal(grad: Gradient) -> Gradient:
    """Zero the off-diagonal gradient entries of the kq32 and pv12 blocks.

    All other blocks pass through untouched.  Idempotent.
    """
    d = grad.d
    wkq = grad.wkq.copy()
    wpv = grad.wpv.copy()
    wkq[d:, :d] = np.diag(np.diag(wkq[d:, :d]))
    wpv[:, :d] = np.diag(np.diag(wpv[:, :d]))
    return Gradient(wkq, wpv, d)


def init_params(init: InitSpec, d: int, seed: int = 0) -> AttentionParams:
    """Diagonal -> a0 I / b0 I blocks; GaussianInit -> dense i.i.d. N(0, sigma_w^2)."""
    if isinstance(init, Diagonal):
        return DiagonalAB(init.a0, init.b0).to_params(d)
    if isinstance(init, GaussianInit):
        rng = rng_stream(seed, 0)
        wkq = rng.standard_normal((2 * d, 2 * d)) * init.sigma_w
        wpv = rng.standard_normal((d, 2 * d)) * init.sigma_w
        return AttentionParams(wkq, wpv, d)
    raise TypeError(f"unknown init spec: {init!r}")


def train(
    config: TrainConfig,
    dataset: Sequence[ARSequence],
    test_dataset: Sequence[ARSequence] | None = None,
) -> TrainTrajectory:
    """Full-batch vanilla gradient descent with snapshot logging.

    Aborts with TrainingDiverged if the loss exceeds 1e6 times its initial
    value (or stops being finite).  With config.stop_tol set, stops once the
    sup-norm parameter update drops below it.
    """
    X = stack_dataset(dataset)
    n, T, d = X.shape
    if (n, T, d) != (config.n, config.T_tr, config.d):
        raise ValueError(
            f"dataset shape {(n, T, d)} does not match config {(config.n, config.T_tr, config.d)}"
        )
    kernel = BatchKernel(X)
    test_kernel = None
    if test_dataset is not None:
        X_te = stack_dataset(test_dataset)
        if X_te.shape[2] != d:
            raise ValueError("test dataset dimension differs from train")
        test_kernel = BatchKernel(X_te)

    params = init_params(config.init, d, config.seed)
    trajectory = TrainTrajectory()

    def snapshot(epoch: int):
        t_loss = kernel.loss(params)
        te_loss = test_kernel.loss(params) if test_kernel is not None else float("nan")
        a, b = params.diag_ab()
        trajectory.snapshots.append(
            TrainSnapshot(epoch, params, t_loss, te_loss, a, b, a * b)
        )

    snapshot(0)
    guard = trajectory.snapshots[0].train_loss * 1e6

    for epoch in range(1, config.epochs + 1):
        loss, grad = kernel.loss_and_gradient(params)
        if not np.isfinite(loss) or loss > guard:
            raise TrainingDiverged(
                f"loss {loss:.3e} at epoch {epoch} exceeds 1e6 x initial; "
                f"step_size={config.step_size} is too large for this dataset"
            )
        if config.mask_nondiagonal:
            grad = mask_nondiagonal(grad)
        params = AttentionParams(
            params.wkq - config.step_size * grad.wkq,
            params.wpv - config.step_size * grad.wpv,
            d,
        )
        update_sup = config.step_size * max(
            float(np.max(np.abs(grad.wkq))), float(np.max(np.abs(grad.wpv)))
        )
        done = epoch == config.epochs or (
            config.stop_tol is not None and update_sup < config.stop_tol
        )
        if epoch % config.log_every == 0 or done:
            snapshot(epoch)
        if done:
            break
    return trajectory


# ---------------------------------------------------------------------------
# external interfaces: trajectory CSV, config files
# ---------------------------------------------------------------------------

TRAJECTORY_HEADER = "epoch,train_loss,test_loss,a,b,ab"


def save_trajectory_csv(path: Union[str, Path], trajectory: TrainTrajectory) -> None:
    lines = [TRAJECTORY_HEADER]
    for s in trajectory.snapshots:
        lines.append(
            f"{s.epoch},{s.train_loss!r},{s.test_loss!r},{s.diag_a!r},{s.diag_b!r},{s.ab!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def parse_init_spec(value) -> InitSpec:
    if isinstance(value, dict):
        kind = value["kind"]
        if kind == "diagonal":
            return Diagonal(float(value["a0"]), float(value["b0"]))
        if kind == "gaussian":
            return GaussianInit(float(value["sigma_w"]))
        raise ValueError(f"unknown init kind {kind!r}")
    text = str(value)
    kind, _, rest = text.partition(":")
    if kind == "diagonal":
        a0, b0 = (float(v) for v in rest.split(","))
        return Diagonal(a0, b0)
    if kind == "gaussian":
        return GaussianInit(float(rest))
    raise ValueError(f"cannot parse init spec {text!r}")


def load_train_config(path: Union[str, Path]) -> TrainConfig:
    """Read a TrainConfig from JSON or from key=value lines.

    key=value example:

        n=2000
        T_tr=20
        d=5
        init=diagonal:0.1,0.1
        step_size=0.005
        epochs=500
        mask_nondiagonal=false
        seed=1
        log_every=10
    """
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        raw = json.loads(text)
    else:
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
    bools = {"true": True, "false": False, "1": True, "0": False}
    stop_tol = raw.get("stop_tol")
    return TrainConfig(
        n=int(raw["n"]),
        T_tr=int(raw["T_tr"]),
        d=int(raw["d"]),
        init=parse_init_spec(raw["init"]),
        step_size=float(raw["step_size"]),
        epochs=int(raw["epochs"]),
        mask_nondiagonal=(
            raw.get("mask_nondiagonal", False)
            if isinstance(raw.get("mask_nondiagonal", False), bool)
            else bools[str(raw.get("mask_nondiagonal", "false")).lower()]
        ),
        seed=int(raw.get("seed", 1)),
        log_every=int(raw.get("log_every", 10)),
        stop_tol=None if stop_tol in (None, "", "none") else float(stop_tol),
    )
