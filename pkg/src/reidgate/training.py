"""Model assembly, PK batch sampling, the optimization loop, checkpointing,
evaluation, and the ablation driver."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import fusion as fus
from . import retrieval, synthdata, text
from .autodiff import Tensor, backward, zero_grads
from .config import ExperimentConfig, config_from_dict
from .encoder import GateParams, LstmParams, encode_sequence, init_gate_params, init_lstm_params
from .fusion import FusionParams, init_fusion_params

CHECKPOINT_FORMAT = "reidgate-checkpoint-v1"


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class ModelParams:
    W_emb: Tensor
    lower: LstmParams
    upper: LstmParams
    gate: GateParams
    fusion: FusionParams

    def named_tensors(self):
        pairs = [
            ("W_emb", self.W_emb),
            ("lower.W", self.lower.W), ("lower.U", self.lower.U), ("lower.b", self.lower.b),
            ("upper.W", self.upper.W), ("upper.U", self.upper.U), ("upper.b", self.upper.b),
            ("gate.w_z", self.gate.w_z), ("gate.b_z", self.gate.b_z),
            ("fusion.W_fc", self.fusion.W_fc), ("fusion.b_fc", self.fusion.b_fc),
            ("fusion.theta", self.fusion.theta),
        ]
        if self.gate.W_proj is not None:
            pairs.append(("gate.W_proj", self.gate.W_proj))
        return pairs

    def tensors(self):
        return [t for _, t in self.named_tensors()]


def init_model(cfg: ExperimentConfig, vocab_size, num_classes, dim_f, rng) -> ModelParams:
    m = cfg.model
    s = 1.0 / np.sqrt(m.d_emb)
    W_emb = Tensor(rng.uniform(-s, s, size=(vocab_size, m.d_emb)), requires_grad=True, name="W_emb")
    lower = init_lstm_params(m.d_emb, m.h, rng, name="lower.")
    upper = init_lstm_params(m.h, m.h, rng, name="upper.")
    gate = init_gate_params(m.h, dim_f, rng, tau=m.tau, mode=m.gate_mode,
                            project_dim=m.gate_project_dim, name="gate.")
    fusion = init_fusion_params(m.h, m.r, dim_f, num_classes, rng, name="fusion.")
    return ModelParams(W_emb=W_emb, lower=lower, upper=upper, gate=gate, fusion=fusion)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class Sgd:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: ExperimentConfig, params):
    o = cfg.optim
    if o.algorithm == "adam":
        return Adam(params, lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps)
    if o.algorithm == "sgd":
        return Sgd(params, lr=o.lr)
    raise ValueError(f"unknown optimizer {o.algorithm!r}")


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


def build_dataset(cfg: ExperimentConfig):
    d = cfg.data
    if d.source == "synthetic":
        s = d.synthetic
        bank = synthdata.synth_identity_bank(
            s.num_identities, M=s.num_attributes, dim_f=s.dim_f, seed=s.seed,
            sigma_vis=s.sigma_vis, p_token_err=s.p_token_err, p_distractor=s.p_distractor,
        )
        return synthdata.generate_dataset(bank, obs_per_id=s.obs_per_id, seed=s.seed,
                                          num_cameras=s.num_cameras)
    return synthdata.load_dataset(d.features_path, d.captions_path)


def group_by_identity(records):
    by_id = {}
    for r in records:
        by_id.setdefault(r.identity, []).append(r)
    return by_id


def pk_sample(records, p, k, rng):
    """One batch of p distinct identities x k observations each."""
    by_id = records if isinstance(records, dict) else group_by_identity(records)
    eligible = sorted(i for i, obs in by_id.items() if len(obs) >= k)
    if len(eligible) < p:
        raise ValueError(f"pk_sample: need {p} identities with >= {k} observations, have {len(eligible)}")
    chosen = rng.choice(len(eligible), size=p, replace=False)
    batch = []
    for ci in chosen:
        obs = by_id[eligible[int(ci)]]
        picks = rng.choice(len(obs), size=k, replace=False)
        batch.extend(obs[int(j)] for j in picks)
    return batch


def epoch_batches(by_id, p, k, rng):
    """PK batches covering every eligible identity at least once per epoch."""
    eligible = sorted(i for i, obs in by_id.items() if len(obs) >= k)
    if len(eligible) < p:
        raise ValueError(f"epoch_batches: need {p} identities with >= {k} observations, have {len(eligible)}")
    order = [eligible[int(i)] for i in rng.permutation(len(eligible))]
    batches = []
    for start in range(0, len(order), p):
        ids = order[start : start + p]
        if len(ids) < p:
            # pad the trailing batch with identities not already in it
            extra = [i for i in order if i not in ids]
            ids = ids + extra[: p - len(ids)]
        batch = []
        for ident in ids:
            obs = by_id[ident]
            picks = rng.choice(len(obs), size=k, replace=False)
            batch.extend(obs[int(j)] for j in picks)
        batches.append(batch)
    return batches


# ---------------------------------------------------------------------------
# forward pass over one observation
# ---------------------------------------------------------------------------


def forward_record(record, model: ModelParams, vocab, cfg: ExperimentConfig, rng=None, train=True):
    """Caption + visual feature -> fused embedding.  Returns (f, gate_trace)."""
    ids = [vocab.lookup(tok) for tok in record.tokens] or [text.UNK_ID]
    embedded = text.embed(ids, model.W_emb)
    F = Tensor(record.features)
    h_final, trace = encode_sequence(
        embedded, F, model.lower, model.upper, model.gate,
        rng=rng, train=train, literal_cell=cfg.model.literal_cell,
    )
    f = fus.fuse(h_final, F, model.fusion)
    if cfg.loss.l2_normalize:
        f = ad.l2_normalize(f)
    return f, trace


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ModelParams
    vocab: text.Vocabulary
    label_classes: list
    trace: list  # rows: (epoch, id_loss, triplet_loss, total)
    dataset: list
    config: ExperimentConfig
    rng: np.random.Generator


def train(cfg: ExperimentConfig, dataset=None, out_dir=None, log=None) -> TrainResult:
    cfg.validate()
    if dataset is None:
        dataset = build_dataset(cfg)
    vocab = text.build_vocab([r.caption for r in dataset])
    label_classes = sorted({r.identity for r in dataset})
    class_of = {ident: i for i, ident in enumerate(label_classes)}
    dim_f = dataset[0].features.shape[0]

    rng = np.random.default_rng(cfg.seed)
    model = init_model(cfg, len(vocab), len(label_classes), dim_f, rng)
    opt = make_optimizer(cfg, model.tensors())
    by_id = group_by_identity(dataset)

    trace = []
    for epoch in range(cfg.optim.epochs):
        sums = np.zeros(3)
        nb = 0
        for batch in epoch_batches(by_id, cfg.sampler.p, cfg.sampler.k, rng):
            zero_grads(model.tensors())
            embeddings, labels = [], []
            for rec in batch:
                f, _ = forward_record(rec, model, vocab, cfg, rng=rng, train=True)
                embeddings.append(f)
                labels.append(class_of[rec.identity])
            total, id_term, trip_term = fus.total_loss(
                embeddings, labels, model.fusion.theta, cfg.loss.alpha, cfg.loss.use_triplet
            )
            if not np.isfinite(total.data):
                path = None
                if out_dir:
                    path = os.path.join(out_dir, "diverged.json")
                    save_checkpoint(path, model, cfg, vocab, label_classes, epoch, rng)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} (id={id_term.item()}, triplet={trip_term.item()})",
                    checkpoint_path=path,
                )
            backward(total)
            opt.step()
            sums += (id_term.item(), trip_term.item(), total.item())
            nb += 1
        row = (epoch, sums[0] / nb, sums[1] / nb, sums[2] / nb)
        trace.append(row)
        if log:
            log(f"epoch {epoch:4d}  id {row[1]:.4f}  triplet {row[2]:.4f}  total {row[3]:.4f}")
    return TrainResult(model=model, vocab=vocab, label_classes=label_classes,
                       trace=trace, dataset=dataset, config=cfg, rng=rng)


def write_trace_csv(trace, path):
    with open(path, "w") as fh:
        fh.write("epoch,id_loss,triplet_loss,total\n")
        for epoch, idl, tripl, total in trace:
            fh.write(f"{epoch},{idl!r},{tripl!r},{total!r}\n")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvaluationRun:
    report: retrieval.MetricsReport
    gate_stats: dict
    q_feats: np.ndarray
    g_feats: np.ndarray
    q_ids: np.ndarray
    q_cams: np.ndarray
    g_ids: np.ndarray
    g_cams: np.ndarray

    def to_json_dict(self, include_embeddings=True):
        out = {"metrics": self.report.to_json_dict(), "gate_stats": self.gate_stats}
        if include_embeddings:
            out["query"] = {
                "features": self.q_feats.tolist(),
                "ids": self.q_ids.tolist(), "cameras": self.q_cams.tolist(),
            }
            out["gallery"] = {
                "features": self.g_feats.tolist(),
                "ids": self.g_ids.tolist(), "cameras": self.g_cams.tolist(),
            }
        return out


def query_gallery_split(records):
    """First observation per (identity, camera) is a query; the rest gallery."""
    seen = set()
    q_idx, g_idx = [], []
    for i, r in enumerate(records):
        key = (r.identity, r.camera)
        if key in seen:
            g_idx.append(i)
        else:
            seen.add(key)
            q_idx.append(i)
    return q_idx, g_idx


def _gate_statistics(records, traces):
    """Mean inference-time gate value per token kind, plus overall open rate."""
    sums = {"attr": [0.0, 0], "distractor": [0.0, 0]}
    total, count = 0.0, 0
    for rec, trace in zip(records, traces):
        kinds = rec.token_kinds if rec.token_kinds else [None] * len(trace)
        for kind, z in zip(kinds, trace):
            v = float(z.data)
            total += v
            count += 1
            if kind in sums:
                sums[kind][0] += v
                sums[kind][1] += 1
    return {
        "open_rate": total / count if count else 0.0,
        "attr_mean": sums["attr"][0] / sums["attr"][1] if sums["attr"][1] else None,
        "distractor_mean": sums["distractor"][0] / sums["distractor"][1] if sums["distractor"][1] else None,
    }


def evaluate(model: ModelParams, dataset, vocab, cfg: ExperimentConfig,
             metric="euclidean", topk=(1, 5, 10, 20)) -> EvaluationRun:
    """Deterministic retrieval evaluation with inference-time gating."""
    dim_f = dataset[0].features.shape[0]
    expected = model.fusion.fused_dim
    if cfg.model.r + dim_f != expected:
        raise ValueError(
            f"evaluate: dataset feature dim {dim_f} does not match checkpoint fused dim {expected}"
        )
    feats = []
    traces = []
    for rec in dataset:
        f, trace = forward_record(rec, model, vocab, cfg, rng=None, train=False)
        feats.append(f.data)
        traces.append(trace)
    feats = np.stack(feats)
    gate_stats = _gate_statistics(dataset, traces)

    q_idx, g_idx = query_gallery_split(dataset)
    ids = np.array([r.identity for r in dataset])
    cams = np.array([r.camera for r in dataset])
    report = retrieval.evaluate_ranking(
        feats[q_idx], feats[g_idx], ids[q_idx], cams[q_idx], ids[g_idx], cams[g_idx],
        metric=metric, topk=topk,
    )
    return EvaluationRun(report=report, gate_stats=gate_stats,
                         q_feats=feats[q_idx], g_feats=feats[g_idx],
                         q_ids=ids[q_idx], q_cams=cams[q_idx],
                         g_ids=ids[g_idx], g_cams=cams[g_idx])


def evaluate_visual_only(dataset, metric="euclidean", topk=(1, 5, 10, 20)) -> EvaluationRun:
    """Baseline ranking on the raw visual features, no trained model."""
    feats = np.stack([r.features for r in dataset])
    q_idx, g_idx = query_gallery_split(dataset)
    ids = np.array([r.identity for r in dataset])
    cams = np.array([r.camera for r in dataset])
    report = retrieval.evaluate_ranking(
        feats[q_idx], feats[g_idx], ids[q_idx], cams[q_idx], ids[g_idx], cams[g_idx],
        metric=metric, topk=topk,
    )
    stats = {"open_rate": None, "attr_mean": None, "distractor_mean": None}
    return EvaluationRun(report=report, gate_stats=stats,
                         q_feats=feats[q_idx], g_feats=feats[g_idx],
                         q_ids=ids[q_idx], q_cams=cams[q_idx],
                         g_ids=ids[g_idx], g_cams=cams[g_idx])


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: ModelParams, cfg: ExperimentConfig, vocab, label_classes, step, rng):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "step": int(step),
        "rng_state": rng.bit_generator.state,
        "vocab": list(vocab.id_to_token),
        "label_classes": [int(c) for c in label_classes],
        "params": {
            name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in model.named_tensors()
        },
    }
    tmp_fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".", suffix=".tmp")
    try:
        with os.fdopen(tmp_fd, "w") as fh:
            json.dump(doc, fh)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_checkpoint(path):
    """Returns (model, cfg, vocab, label_classes, step, rng)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    cfg = config_from_dict(doc["config"])
    id_to_token = doc["vocab"]
    vocab = text.Vocabulary(
        token_to_id={tok: i for i, tok in enumerate(id_to_token)},
        id_to_token=list(id_to_token),
    )

    def tensor_of(name):
        entry = doc["params"][name]
        data = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        return Tensor(data, requires_grad=True, name=name)

    gate = GateParams(
        w_z=tensor_of("gate.w_z"), b_z=tensor_of("gate.b_z"),
        tau=cfg.model.tau, mode=cfg.model.gate_mode,
        W_proj=tensor_of("gate.W_proj") if "gate.W_proj" in doc["params"] else None,
    )
    model = ModelParams(
        W_emb=tensor_of("W_emb"),
        lower=LstmParams(W=tensor_of("lower.W"), U=tensor_of("lower.U"), b=tensor_of("lower.b")),
        upper=LstmParams(W=tensor_of("upper.W"), U=tensor_of("upper.U"), b=tensor_of("upper.b")),
        gate=gate,
        fusion=FusionParams(W_fc=tensor_of("fusion.W_fc"), b_fc=tensor_of("fusion.b_fc"),
                            theta=tensor_of("fusion.theta")),
    )
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng_state"]
    return model, cfg, vocab, doc["label_classes"], doc["step"], rng


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = (
    ("id", "forced_open", False),
    ("id+triplet", "forced_open", True),
    ("id+gates", None, False),
    ("id+triplet+gates", None, True),
)


def ablation(cfg: ExperimentConfig, rerank_k1=20, rerank_k2=6, rerank_lam=0.3, log=None):
    """Train every loss/gate variant from the same seed and compare.

    The re-rank row post-processes the id+triplet+gates embeddings; the
    visual-only row needs no training.
    """
    dataset = build_dataset(cfg)
    rows = []

    run_visual = evaluate_visual_only(dataset)
    rows.append(_row("visual_only", run_visual))

    gated_run = None
    for name, gate_mode, use_triplet in ABLATION_VARIANTS:
        variant = config_from_dict(cfg.to_dict())
        if gate_mode is not None:
            variant.model.gate_mode = gate_mode
        variant.loss.use_triplet = use_triplet
        if log:
            log(f"training variant {name!r}")
        result = train(variant, dataset=dataset)
        run = evaluate(result.model, dataset, result.vocab, variant)
        rows.append(_row(name, run))
        if name == "id+triplet+gates":
            gated_run = run

    dist = retrieval.distance_matrix(gated_run.q_feats, gated_run.g_feats, "euclidean")
    reranked = retrieval.k_reciprocal_rerank(dist, gated_run.q_feats, gated_run.g_feats,
                                             k1=rerank_k1, k2=rerank_k2, lam=rerank_lam)
    report = retrieval.evaluate_ranking(
        gated_run.q_feats, gated_run.g_feats, gated_run.q_ids, gated_run.q_cams,
        gated_run.g_ids, gated_run.g_cams, dist=reranked,
    )
    rows.append({"name": "id+triplet+gates+rerank", "mAP": report.mAP,
                 "cmc": {str(k): v for k, v in report.cmc.items()}, "gate_stats": gated_run.gate_stats})
    return rows


def _row(name, run: EvaluationRun):
    return {"name": name, "mAP": run.report.mAP,
            "cmc": {str(k): v for k, v in run.report.cmc.items()},
            "gate_stats": run.gate_stats}


def format_ablation_table(rows):
    ks = sorted(rows[0]["cmc"], key=int)
    header = f"{'variant':<26} {'mAP':>7} " + " ".join(f"{'top-' + k:>7}" for k in ks)
    lines = [header, "-" * len(header)]
    for row in rows:
        cells = " ".join(f"{row['cmc'][k]:7.3f}" for k in ks)
        lines.append(f"{row['name']:<26} {row['mAP']:7.3f} {cells}")
    return "\n".join(lines)
