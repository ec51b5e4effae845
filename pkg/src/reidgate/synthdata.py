"""Synthetic identity world and observation files.

Identities carry binary attribute vectors.  Visual features are a fixed
linear projection of the attributes plus Gaussian noise; captions list the
attribute tokens, corrupted by a token-flip channel and interleaved with
distractor tokens.  This stands in for an upstream feature extractor and
caption generator, whose output is noisy in exactly these two ways.

Identities are generated in confusable pairs (one attribute bit apart) so
that visual features alone do not trivially separate the world and the
caption branch has something to contribute.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

DEFAULT_NUM_IDENTITIES = 50
DEFAULT_OBS_PER_ID = 8
DEFAULT_M = 16
DEFAULT_DIM_F = 64
DEFAULT_SIGMA_VIS = 0.3
DEFAULT_P_TOKEN_ERR = 0.15
DEFAULT_P_DISTRACTOR = 0.3
DEFAULT_NUM_CAMERAS = 4
DISTRACTOR_VOCAB_SIZE = 64


@dataclass
class ObservationRecord:
    image_key: str
    identity: int
    camera: int
    features: np.ndarray
    tokens: list  # caption tokens, in order
    token_kinds: list = None  # parallel list: "attr" | "distractor" (synthetic only)

    @property
    def caption(self) -> str:
        return " ".join(self.tokens)


@dataclass
class IdentityBank:
    attributes: np.ndarray  # (num_identities, M) in {0, 1}
    W_vis: np.ndarray  # (dim_F, M)
    sigma_vis: float = DEFAULT_SIGMA_VIS
    p_token_err: float = DEFAULT_P_TOKEN_ERR
    p_distractor: float = DEFAULT_P_DISTRACTOR
    distractor_tokens: list = field(default_factory=list)

    @property
    def num_identities(self):
        return self.attributes.shape[0]

    @property
    def num_attributes(self):
        return self.attributes.shape[1]

    @property
    def dim_f(self):
        return self.W_vis.shape[0]


def attribute_token(m: int, value: int) -> str:
    return f"attr{m:02d}v{int(value)}"


def _int_to_bits(x: int, m: int) -> np.ndarray:
    return np.array([(x >> j) & 1 for j in range(m)], dtype=np.int64)


def synth_identity_bank(num_identities, M=DEFAULT_M, dim_f=DEFAULT_DIM_F, seed=0,
                        sigma_vis=DEFAULT_SIGMA_VIS, p_token_err=DEFAULT_P_TOKEN_ERR,
                        p_distractor=DEFAULT_P_DISTRACTOR) -> IdentityBank:
    """Deterministic bank with pairwise-distinct attribute vectors."""
    if 2**M < num_identities:
        raise ValueError(f"synth_identity_bank: 2^{M} < {num_identities} identities requested")
    if not 0.0 <= p_token_err <= 1.0:
        raise ValueError("synth_identity_bank: p_token_err must lie in [0, 1]")
    if not 0.0 <= p_distractor < 1.0:
        raise ValueError("synth_identity_bank: p_distractor must lie in [0, 1) for finite captions")
    rng = np.random.default_rng(seed)
    used = set()
    vectors = []

    def claim(vec) -> bool:
        key = tuple(int(v) for v in vec)
        if key in used:
            return False
        used.add(key)
        vectors.append(np.array(key, dtype=np.int64))
        return True

    def claim_any_unused():
        for x in range(2**M):
            if claim(_int_to_bits(x, M)):
                return
        raise AssertionError("attribute space exhausted despite capacity check")

    while len(vectors) < num_identities:
        base = rng.integers(0, 2, size=M)
        for _ in range(1000):
            if claim(base):
                break
            base = rng.integers(0, 2, size=M)
        else:
            claim_any_unused()
            continue
        if len(vectors) < num_identities:
            # confusable twin: one attribute bit away from the base
            twin = base.copy()
            twin[rng.integers(0, M)] ^= 1
            if not claim(twin):
                pass  # twin already taken; next loop draws a fresh base
    attributes = np.stack(vectors[:num_identities])
    W_vis = rng.uniform(-1.0, 1.0, size=(dim_f, M))
    distractors = [f"filler{i:02d}" for i in range(DISTRACTOR_VOCAB_SIZE)]
    return IdentityBank(
        attributes=attributes,
        W_vis=W_vis,
        sigma_vis=sigma_vis,
        p_token_err=p_token_err,
        p_distractor=p_distractor,
        distractor_tokens=distractors,
    )


def sample_observation(bank: IdentityBank, identity: int, camera: int, rng,
                       image_key=None) -> ObservationRecord:
    """One noisy observation of an identity.

    Features: W_vis @ a + N(0, sigma_vis^2 I).  Caption: attribute tokens in
    canonical order, each flipped to the wrong-value token with probability
    p_token_err; per attribute slot, Geometric-many distractor tokens are
    drawn (failures before success at rate 1 - p_distractor, so the expected
    distractor fraction equals p_distractor) and inserted at random
    positions.
    """
    if not 0 <= identity < bank.num_identities:
        raise ValueError(f"sample_observation: identity {identity} out of range")
    a = bank.attributes[identity]
    features = bank.W_vis @ a.astype(np.float64)
    if bank.sigma_vis > 0:
        features = features + bank.sigma_vis * rng.standard_normal(bank.dim_f)
    tokens = []
    kinds = []
    for m, v in enumerate(a):
        value = int(v)
        if bank.p_token_err > 0 and rng.random() < bank.p_token_err:
            value = 1 - value
        tokens.append(attribute_token(m, value))
        kinds.append("attr")
    if bank.p_distractor > 0:
        num_extra = 0
        for _ in range(bank.num_attributes):
            num_extra += int(rng.geometric(1.0 - bank.p_distractor)) - 1
        for _ in range(num_extra):
            pos = int(rng.integers(0, len(tokens) + 1))
            tok = bank.distractor_tokens[int(rng.integers(0, len(bank.distractor_tokens)))]
            tokens.insert(pos, tok)
            kinds.insert(pos, "distractor")
    if image_key is None:
        image_key = f"id{identity:04d}_cam{camera}"
    return ObservationRecord(
        image_key=image_key,
        identity=int(identity),
        camera=int(camera),
        features=features,
        tokens=tokens,
        token_kinds=kinds,
    )


def generate_dataset(bank: IdentityBank, obs_per_id=DEFAULT_OBS_PER_ID, seed=0,
                     num_cameras=DEFAULT_NUM_CAMERAS):
    """All observations for the bank; cameras assigned round-robin."""
    rng = np.random.default_rng(seed)
    records = []
    for identity in range(bank.num_identities):
        for j in range(obs_per_id):
            camera = j % num_cameras
            key = f"id{identity:04d}_obs{j:02d}"
            records.append(sample_observation(bank, identity, camera, rng, image_key=key))
    return records


# ---------------------------------------------------------------------------
# JSON Lines files
# ---------------------------------------------------------------------------


def save_features(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({
                "image_key": r.image_key,
                "id": r.identity,
                "camera": r.camera,
                "features": [float(v) for v in r.features],
            }) + "\n")


def load_features(path):
    """Feature records from JSON Lines; dimensions must be consistent."""
    records = []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                key = obj["image_key"]
                identity = int(obj["id"])
                camera = int(obj["camera"])
                features = np.asarray(obj["features"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise ValueError(f"{path}:{lineno}: malformed feature record ({err})") from err
            if features.ndim != 1:
                raise ValueError(f"{path}:{lineno}: features must be a flat list")
            if dim is None:
                dim = features.shape[0]
            elif features.shape[0] != dim:
                raise ValueError(
                    f"{path}:{lineno}: feature dimension {features.shape[0]} differs from {dim}"
                )
            records.append(ObservationRecord(
                image_key=key, identity=identity, camera=camera,
                features=features, tokens=[], token_kinds=None,
            ))
    return records


def save_captions(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"image_key": r.image_key, "caption": r.caption}) + "\n")


def load_captions(path):
    """Mapping image_key -> caption string."""
    captions = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                captions[obj["image_key"]] = str(obj["caption"])
            except (json.JSONDecodeError, KeyError, TypeError) as err:
                raise ValueError(f"{path}:{lineno}: malformed caption record ({err})") from err
    return captions


def load_dataset(features_path, captions_path):
    """Join feature and caption files on image_key."""
    records = load_features(features_path)
    captions = load_captions(captions_path)
    for r in records:
        if r.image_key not in captions:
            raise ValueError(f"no caption for image_key {r.image_key!r} in {captions_path}")
        r.tokens = captions[r.image_key].split()
    return records
