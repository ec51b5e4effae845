"""Two-layer recurrent caption encoder with visually conditioned binary gates.

The lower LSTM consumes the embedded caption.  At every timestep a scalar
gate, computed from the lower hidden state concatenated with the visual
feature and relaxed through a Gumbel-sigmoid, decides how much of the lower
hidden state reaches the upper LSTM.  The final upper hidden state is the
caption representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor, accumulate_grad

GATE_MODES = ("soft", "hard", "forced_open", "forced_closed")


@dataclass
class LstmParams:
    """Stacked cell weights: gate blocks ordered input, forget, output, candidate."""

    W: Tensor  # (4h, d)
    U: Tensor  # (4h, h)
    b: Tensor  # (4h,)

    @property
    def hidden_dim(self):
        return self.U.data.shape[1]

    @property
    def input_dim(self):
        return self.W.data.shape[1]

    def tensors(self):
        return [self.W, self.U, self.b]


@dataclass
class GateParams:
    w_z: Tensor  # (h + dim_F,) or (h + project_dim,)
    b_z: Tensor  # scalar
    tau: float = 0.3
    mode: str = "soft"
    W_proj: Tensor = None  # optional (project_dim, dim_F) reduction of F

    def tensors(self):
        ts = [self.w_z, self.b_z]
        if self.W_proj is not None:
            ts.append(self.W_proj)
        return ts


def init_lstm_params(input_dim, hidden_dim, rng, name=""):
    """Uniform [-1/sqrt(h), 1/sqrt(h)] weights; forget bias starts at 1."""
    s = 1.0 / math.sqrt(hidden_dim)
    W = Tensor(rng.uniform(-s, s, size=(4 * hidden_dim, input_dim)), requires_grad=True, name=f"{name}W")
    U = Tensor(rng.uniform(-s, s, size=(4 * hidden_dim, hidden_dim)), requires_grad=True, name=f"{name}U")
    b = np.zeros(4 * hidden_dim)
    b[hidden_dim : 2 * hidden_dim] = 1.0
    return LstmParams(W=W, U=U, b=Tensor(b, requires_grad=True, name=f"{name}b"))


def init_gate_params(hidden_dim, dim_f, rng, tau=0.3, mode="soft", project_dim=None, name="gate_"):
    """Gate starts mostly open (bias 2) so the upper layer is not starved early."""
    if tau <= 0:
        raise ValueError(f"gate temperature must be positive, got {tau}")
    if mode not in GATE_MODES:
        raise ValueError(f"gate mode must be one of {GATE_MODES}, got {mode!r}")
    vis_dim = dim_f if project_dim is None else project_dim
    s = 1.0 / math.sqrt(hidden_dim + vis_dim)
    w_z = Tensor(rng.uniform(-s, s, size=hidden_dim + vis_dim), requires_grad=True, name=f"{name}w_z")
    b_z = Tensor(2.0, requires_grad=True, name=f"{name}b_z")
    W_proj = None
    if project_dim is not None:
        sp = 1.0 / math.sqrt(dim_f)
        W_proj = Tensor(rng.uniform(-sp, sp, size=(project_dim, dim_f)), requires_grad=True, name=f"{name}W_proj")
    return GateParams(w_z=w_z, b_z=b_z, tau=tau, mode=mode, W_proj=W_proj)


def lstm_cell_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: LstmParams, literal_cell=False):
    """One fused LSTM cell step.  Returns (h, c) tensors on the graph."""
    h = params.hidden_dim
    d = params.input_dim
    if x.data.shape != (d,):
        raise ad.ShapeError(f"lstm_cell_step: input shape {x.data.shape} does not match (d={d},)")
    if h_prev.data.shape != (h,) or c_prev.data.shape != (h,):
        raise ad.ShapeError(
            f"lstm_cell_step: state shapes {h_prev.data.shape}/{c_prev.data.shape} do not match (h={h},)"
        )
    xd = np.ascontiguousarray(x.data)
    hd = np.ascontiguousarray(h_prev.data)
    cd = np.ascontiguousarray(c_prev.data)
    Wd = np.ascontiguousarray(params.W.data)
    Ud = np.ascontiguousarray(params.U.data)
    bd = np.ascontiguousarray(params.b.data)
    hc_data, cache = kernels.cell_forward(xd, hd, cd, Wd, Ud, bd, literal_cell)

    parents = (x, h_prev, c_prev, params.W, params.U, params.b)

    def bw(g):
        g = np.ascontiguousarray(g)
        dx, dh_prev, dc_prev, dW, dU, db = kernels.cell_backward(
            g[:h], g[h:], xd, hd, cd, Wd, Ud, cache, literal_cell
        )
        accumulate_grad(x, dx)
        accumulate_grad(h_prev, dh_prev)
        accumulate_grad(c_prev, dc_prev)
        accumulate_grad(params.W, dW)
        accumulate_grad(params.U, dU)
        accumulate_grad(params.b, db)

    hc = Tensor(hc_data, parents=parents, backward_fn=bw, op="lstm_cell")
    return ad.slice1d(hc, 0, h), ad.slice1d(hc, h, 2 * h)


def sample_gumbel_noise(rng):
    """g1 - g2 with g_k i.i.d. Gumbel(0,1); the difference is Logistic(0,1)."""
    u = rng.random(2)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    g1, g2 = -np.log(-np.log(u))
    return float(g1 - g2)


def gumbel_sigmoid(logit: Tensor, tau: float, rng=None, hard=False, noise=None) -> Tensor:
    """Binary-concrete relaxation of a Bernoulli gate.

    Soft value: sigmoid((logit + g1 - g2) / tau).  With ``hard`` the forward
    value is thresholded at 0.5 and the gradient is taken straight-through
    from the soft value.  ``noise=None`` with no rng disables noise
    (deterministic limit sigmoid(logit / tau)); pass an explicit noise sample
    for reproducible stochastic evaluation.
    """
    if tau <= 0:
        raise ValueError(f"gumbel_sigmoid: temperature must be positive, got {tau}")
    if noise is None:
        noise = sample_gumbel_noise(rng) if rng is not None else 0.0
    soft = ad.sigmoid(ad.scale(ad.add_const(logit, noise), 1.0 / tau))
    return ad.straight_through_threshold(soft) if hard else soft


def boundary_gate(h_lower: Tensor, F: Tensor, params: GateParams, rng=None, train=True, noise=None) -> Tensor:
    """Scalar gate for one timestep, conditioned on h_t and the visual feature.

    At inference (train=False) the noise is disabled and the hard threshold
    is applied regardless of mode, so embeddings are deterministic.
    """
    if params.mode == "forced_open":
        return Tensor(1.0)
    if params.mode == "forced_closed":
        return Tensor(0.0)
    vis = F if params.W_proj is None else ad.matmul(params.W_proj, F)
    inp = ad.concat([h_lower, vis])
    if inp.data.shape != params.w_z.data.shape:
        raise ad.ShapeError(
            f"boundary_gate: concat shape {inp.data.shape} does not match w_z shape {params.w_z.data.shape}"
        )
    logit = ad.add(ad.matmul(params.w_z, inp), params.b_z)
    if train:
        return gumbel_sigmoid(logit, params.tau, rng=rng, hard=(params.mode == "hard"), noise=noise)
    return gumbel_sigmoid(logit, params.tau, rng=None, hard=True, noise=0.0)


def encode_sequence(embedded, F: Tensor, lower: LstmParams, upper: LstmParams, gate: GateParams,
                    rng=None, train=True, literal_cell=False, gate_noise=None):
    """Run the gated two-layer encoder over one embedded caption.

    Returns (final upper hidden state, gate trace as a list of scalar
    tensors).  ``gate_noise`` optionally fixes the per-timestep noise samples
    (used by gradient checks).
    """
    if not embedded:
        raise ValueError("encode_sequence: empty sequence")
    h = lower.hidden_dim
    h_l = Tensor(np.zeros(h))
    c_l = Tensor(np.zeros(h))
    h_u = Tensor(np.zeros(upper.hidden_dim))
    c_u = Tensor(np.zeros(upper.hidden_dim))
    trace = []
    for t, e_t in enumerate(embedded):
        h_l, c_l = lstm_cell_step(e_t, h_l, c_l, lower, literal_cell)
        noise = gate_noise[t] if gate_noise is not None else None
        z_t = boundary_gate(h_l, F, gate, rng=rng, train=train, noise=noise)
        trace.append(z_t)
        gated = ad.mul(h_l, z_t)
        h_u, c_u = lstm_cell_step(gated, h_u, c_u, upper, literal_cell)
    return h_u, trace
