"""One-layer linear causal self-attention: embedding, forward pass, equivalent forms.

Token i of a prompt embeds as e_i = (0_d, x_i, x_{i-1}) with x_0 = 0_d.  Only
four blocks of the key-query product and two blocks of the projection-value
product reach the prediction, so parameters are stored in reduced form:

    wkq = [[K22, K23], [K32, K33]]  (2d x 2d, real)
    wpv = [V12, V13]                (d x 2d, real)

and the next-token prediction at time t >= 2 is

    yhat_t = wpv . (E_t E_t* / (t-1)) . wkq . e_t

over the last-2d-rows view E_t of the embedded prompt.  Three provably equal
evaluation routes are implemented (direct, Kronecker/vectorized bilinear form,
and the one-step-least-squares predictor for diagonal parameters); tests hold
them to 1e-12 of each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from mesalab.ar_data import ARSequence


@dataclass(frozen=True)
class AttentionParams:
    """Trainable blocks feeding the prediction; all entries real."""

    wkq: np.ndarray  # (2d, 2d)
    wpv: np.ndarray  # (d, 2d)
    d: int

    def __post_init__(self):
        wkq = np.asarray(self.wkq, dtype=float)
        wpv = np.asarray(self.wpv, dtype=float)
        object.__setattr__(self, "wkq", wkq)
        object.__setattr__(self, "wpv", wpv)
        if wkq.shape != (2 * self.d, 2 * self.d):
            raise ValueError(f"wkq must be {(2 * self.d, 2 * self.d)}, got {wkq.shape}")
        if wpv.shape != (self.d, 2 * self.d):
            raise ValueError(f"wpv must be {(self.d, 2 * self.d)}, got {wpv.shape}")

    # block views, named by their position in the full 3d x 3d matrices
    @property
    def kq22(self) -> np.ndarray:
        return self.wkq[: self.d, : self.d]

    @property
    def kq23(self) -> np.ndarray:
        return self.wkq[: self.d, self.d :]

    @property
    def kq32(self) -> np.ndarray:
        return self.wkq[self.d :, : self.d]

    @property
    def kq33(self) -> np.ndarray:
        return self.wkq[self.d :, self.d :]

    @property
    def pv12(self) -> np.ndarray:
        return self.wpv[:, : self.d]

    @property
    def pv13(self) -> np.ndarray:
        return self.wpv[:, self.d :]

    def diag_ab(self) -> tuple[float, float]:
        """Mean diagonals of the two driving blocks (the reported a, b)."""
        return float(np.mean(np.diag(self.kq32))), float(np.mean(np.diag(self.pv12)))

    def to_json_dict(self) -> dict:
        return {
            "d": self.d,
            "wkq": [[float(v) for v in row] for row in self.wkq],
            "wpv": [[float(v) for v in row] for row in self.wpv],
        }

    @classmethod
    def from_json_dict(cls, rec: dict) -> "AttentionParams":
        return cls(np.array(rec["wkq"], dtype=float), np.array(rec["wpv"], dtype=float), int(rec["d"]))


@dataclass(frozen=True)
class DiagonalAB:
    """Parameter point with kq32 = a I, pv12 = b I and every other block zero."""

    a: float
    b: float

    def to_params(self, d: int) -> AttentionParams:
        wkq = np.zeros((2 * d, 2 * d))
        wkq[d:, :d] = self.a * np.eye(d)
        wpv = np.zeros((d, 2 * d))
        wpv[:, :d] = self.b * np.eye(d)
        return AttentionParams(wkq, wpv, d)

    def to_json_dict(self) -> dict:
        return {"a": float(self.a), "b": float(self.b)}


@dataclass(frozen=True)
class EmbeddedPrompt:
    """Embedded tokens e_1..e_t; reduced drops the always-zero first d rows."""

    tokens: np.ndarray  # (t, 3d)
    d: int

    def __post_init__(self):
        tok = np.asarray(self.tokens, dtype=complex)
        object.__setattr__(self, "tokens", tok)
        if tok.ndim != 2 or tok.shape[1] != 3 * self.d:
            raise ValueError("tokens must be a t x 3d array")
        if tok.shape[0] < 2:
            raise ValueError("prompt needs at least two tokens")

    @property
    def t(self) -> int:
        return self.tokens.shape[0]

    @property
    def reduced(self) -> np.ndarray:
        """Last-2d-rows view: row i is (x_i, x_{i-1})."""
        return self.tokens[:, self.d :]


def embed(seq: ARSequence, t: int) -> EmbeddedPrompt:
    """Embedded prompt of the first t tokens; requires 2 <= t <= T."""
    if not 2 <= t <= seq.T:
        raise ValueError(f"time index t={t} outside [2, {seq.T}]")
    d = seq.d
    tokens = np.zeros((t, 3 * d), dtype=complex)
    tokens[:, d : 2 * d] = seq.x[:t]
    tokens[1:, 2 * d :] = seq.x[: t - 1]
    return EmbeddedPrompt(tokens, d)


def _second_moment(prompt: EmbeddedPrompt) -> np.ndarray:
    """(1/(t-1)) sum_i e_i e_i^* over the reduced tokens."""
    e = prompt.reduced
    rho = float(prompt.t - 1)
    return (e.T @ e.conj()) / rho  # rows of e are tokens, so this is sum_i e_i e_i^*


def predict_next(params: AttentionParams, prompt: EmbeddedPrompt) -> np.ndarray:
    """Direct forward pass: wpv . (E E*/rho) . wkq . e_t."""
    if params.d != prompt.d:
        raise ValueError("parameter and prompt dimensions differ")
    S = _second_moment(prompt)
    e_t = prompt.reduced[-1]
    return params.wpv @ (S @ (params.wkq @ e_t))


def quadratic_form_predict(params: AttentionParams, prompt: EmbeddedPrompt, j: int) -> complex:
    """Coordinate j of the prediction via the vectorized bilinear form
    B_j^T (e_t^T kron E E*/rho) Vec(wkq), with Vec in column order."""
    if not 1 <= j <= params.d:
        raise ValueError(f"coordinate j={j} outside [1, {params.d}]")
    S = _second_moment(prompt)
    e_t = prompt.reduced[-1]
    b_j = params.wpv[j - 1]
    vec_a = params.wkq.flatten(order="F")
    return complex(b_j @ np.kron(e_t[None, :], S) @ vec_a)


def mesa_predict(ab: float, seq: ARSequence, t: int) -> np.ndarray:
    """Prediction of the converged diagonal model in closed form.

    Evaluates both algebraically identical expressions

        (ab/(t-1)) sum_{i<t} x_{i+1} x_i^* x_t
      = diag(lambda) (ab/(t-1)) sum_{i<t} x_i x_i^* x_t

    and asserts they agree before returning.
    """
    if not 2 <= t <= seq.T:
        raise ValueError(f"time index t={t} outside [2, {seq.T}]")
    x = seq.x
    coef = ab / (t - 1)
    inner = np.conj(x[: t - 1]) @ x[t - 1]  # x_i^* x_t for i = 1..t-1
    form_shift = coef * (x[1:t].T @ inner)
    gram = x[: t - 1].T @ x[: t - 1].conj()  # sum_i x_i x_i^*
    form_spectral = seq.spectrum.lambdas * (coef * (gram @ x[t - 1]))
    if not np.allclose(form_shift, form_spectral, rtol=1e-10, atol=1e-12):
        raise AssertionError("shift-product and spectral forms disagree")
    return form_shift


def one_step_gd_ols(seq: ARSequence, t: int, eta: float) -> tuple[np.ndarray, np.ndarray]:
    """One explicit gradient step, from zero, on the in-context least-squares
    objective 0.5 sum_{i<t} |x_{i+1} - M x_i|^2.

    Returns the stepped matrix M = eta sum_{i<t} x_{i+1} x_i^* and its
    prediction M x_t.
    """
    if not 2 <= t <= seq.T:
        raise ValueError(f"time index t={t} outside [2, {seq.T}]")
    x = seq.x
    m = eta * np.einsum("ti,tj->ij", x[1:t], np.conj(x[: t - 1]))
    return m, m @ x[t - 1]


def predict_next_batch(params: AttentionParams, X: np.ndarray, t: int) -> np.ndarray:
    """Forward pass at one time index for a stacked dataset.

    X is (n, T, d) complex with rows x_1..x_T; returns the (n, d) predictions
    yhat_t.  Matches predict_next(params, embed(seq, t)) sequence by sequence.
    """
    n, T, d = X.shape
    if not 2 <= t <= T:
        raise ValueError(f"time index t={t} outside [2, {T}]")
    if params.d != d:
        raise ValueError("parameter and dataset dimensions differ")
    E = np.zeros((n, t, 2 * d), dtype=complex)
    E[:, :, :d] = X[:, :t]
    E[:, 1:, d:] = X[:, : t - 1]
    S = np.einsum("nik,nil->nkl", E, np.conj(E)) / (t - 1)
    q = E[:, -1] @ params.wkq.T
    v = np.einsum("nkl,nl->nk", S, q)
    return v @ params.wpv.T


def mean_elementwise_ratio(yhat: np.ndarray, truth: np.ndarray, zero_tol: float = 1e-12) -> float:
    """Mean over coordinates of yhat_j / truth_j, skipping |truth_j| <= zero_tol.

    Coordinates with (numerically) zero denominators carry no ratio
    information for sparse tokens, so they are excluded rather than
    propagated as inf/nan.
    """
    mask = np.abs(truth) > zero_tol
    if not np.any(mask):
        raise ValueError("all denominator coordinates are zero")
    return float(np.mean(np.real(yhat[mask] / truth[mask])))


def save_params(path: Union[str, Path], params: AttentionParams) -> None:
    rec = {"schema_version": 1, **params.to_json_dict()}
    Path(path).write_text(json.dumps(rec, indent=2) + "\n")


def load_params(path: Union[str, Path]) -> AttentionParams:
    return AttentionParams.from_json_dict(json.loads(Path(path).read_text()))
