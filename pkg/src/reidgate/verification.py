"""Finite-difference verification of the full differentiable pipeline.

Builds small random instances of the complete graph (embedding -> gated
two-layer encoder with fixed gate noise -> fusion -> joint loss) and
compares every analytic parameter gradient against central finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fusion as fus
from .autodiff import Tensor, grad_check
from .config import config_from_dict
from .encoder import encode_sequence, sample_gumbel_noise
from .training import forward_record, init_model
from .synthdata import ObservationRecord
from .text import Vocabulary


@dataclass
class PipelineCheck:
    seed: int
    dims: dict
    max_rel_err: float
    passed: bool
    worst_param: str


def _random_vocab(size):
    tokens = ["<pad>", "<unk>"] + [f"tok{i}" for i in range(size - 2)]
    return Vocabulary(token_to_id={t: i for i, t in enumerate(tokens)}, id_to_token=tokens)


def build_random_pipeline(seed, max_dim=8, max_len=5, use_triplet=True, hard_gate=False):
    """Random tiny model + batch; returns (loss_fn, params) for grad_check.

    Gate noise is sampled once and frozen so the closure is deterministic.
    """
    rng = np.random.default_rng(seed)
    dims = {
        "d_emb": int(rng.integers(2, max_dim + 1)),
        "h": int(rng.integers(2, max_dim + 1)),
        "r": int(rng.integers(2, max_dim + 1)),
        "dim_f": int(rng.integers(2, max_dim + 1)),
    }
    vocab_size = int(rng.integers(4, 10))
    num_classes = 2
    cfg = config_from_dict({
        "model": {"d_emb": dims["d_emb"], "h": dims["h"], "r": dims["r"],
                  "gate_mode": "hard" if hard_gate else "soft"},
        "loss": {"use_triplet": use_triplet},
    })
    vocab = _random_vocab(vocab_size)
    model = init_model(cfg, vocab_size, num_classes, dims["dim_f"], rng)

    # two identities x two observations so batch-hard mining is well posed
    records = []
    noises = []
    for label in (0, 1):
        for _ in range(2):
            n = int(rng.integers(1, max_len + 1))
            tokens = [vocab.id_to_token[int(rng.integers(2, vocab_size))] for _ in range(n)]
            records.append(ObservationRecord(
                image_key=f"k{label}", identity=label, camera=0,
                features=rng.standard_normal(dims["dim_f"]), tokens=tokens,
            ))
            noises.append([sample_gumbel_noise(rng) for _ in range(n)])

    def loss_fn():
        embeddings, labels = [], []
        for rec, noise in zip(records, noises):
            ids = [vocab.lookup(t) for t in rec.tokens]
            from .text import embed

            embedded = embed(ids, model.W_emb)
            F = Tensor(rec.features)
            h_final, _ = encode_sequence(
                embedded, F, model.lower, model.upper, model.gate,
                train=True, literal_cell=cfg.model.literal_cell, gate_noise=noise,
            )
            f = fus.fuse(h_final, F, model.fusion)
            embeddings.append(f)
            labels.append(rec.identity)
        total, _, _ = fus.total_loss(embeddings, labels, model.fusion.theta,
                                     cfg.loss.alpha, cfg.loss.use_triplet)
        return total

    return loss_fn, model.tensors(), dims


def run_pipeline_gradcheck(trials=100, tolerance=1e-4, epsilon=1e-6, seed=0, log=None):
    """Gradient fidelity sweep over random pipeline instances."""
    checks = []
    for trial in range(trials):
        loss_fn, params, dims = build_random_pipeline(seed + trial)
        report = grad_check(loss_fn, params, epsilon=epsilon, tolerance=tolerance)
        worst = max(report.entries, key=lambda e: e.max_rel_err)
        checks.append(PipelineCheck(seed=seed + trial, dims=dims,
                                    max_rel_err=report.max_rel_err,
                                    passed=report.passed, worst_param=worst.name))
        if log:
            status = "ok" if report.passed else "FAIL"
            log(f"trial {trial:3d} dims={dims} max_rel_err={report.max_rel_err:.3e} [{status}]")
    return checks
