"""Query-composition models: reference feature + caption tokens -> one
unit-norm feature in the shared embedding space.

Every kind also carries the image projection used to encode candidate and
target images, so queries and candidates are compared in the same space.
All forward passes have exact analytic backward passes (float64 throughout);
``tests`` verify them against central finite differences.

Kinds
-----
image_only        projected reference feature only
text_only         normalized mean of token embeddings
random_image_text concat_mlp architecture; the caller feeds a randomly
                  substituted reference feature instead of the true one
concat_mlp        [projected image ; mean token embedding] -> ReLU MLP
gated_residual    sigmoid gate on the projected image plus a residual term
transformer       [CLS, tokens..., image] through post-norm self-attention
                  layers; the output read at the image slot
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DataError, FormatError, Vocabulary, l2_normalize

COMPOSER_KINDS = (
    "image_only", "text_only", "random_image_text",
    "concat_mlp", "gated_residual", "transformer",
)
_TEXT_KINDS = tuple(kind for kind in COMPOSER_KINDS if kind != "image_only")
_MLP_KINDS = ("concat_mlp", "random_image_text")

CHECKPOINT_MAGIC = b"CPR1"
CHECKPOINT_VERSION = 1

LN_EPS = 1e-5


@dataclass(frozen=True)
class ComposerConfig:
    kind: str
    feature_dim: int
    model_dim: int = 64
    ff_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    vocab_size: int = 1
    max_tokens: int = 32
    frozen_projection: bool = False

    def __post_init__(self):
        if self.kind not in COMPOSER_KINDS:
            raise DataError(f"unknown composer kind {self.kind!r}")
        if self.model_dim % self.num_heads != 0:
            raise DataError("model_dim must be divisible by num_heads")
        if self.frozen_projection and self.feature_dim != self.model_dim:
            raise DataError("a frozen projection requires feature_dim == model_dim")
        for name in ("feature_dim", "model_dim", "ff_dim", "num_layers",
                     "num_heads", "vocab_size", "max_tokens"):
            if getattr(self, name) < (0 if name == "num_layers" else 1):
                raise DataError(f"{name} must be positive, got {getattr(self, name)}")


def parameter_layout(config: ComposerConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Named parameter groups and shapes; a pure function of the config."""
    d, f, v = config.model_dim, config.feature_dim, config.vocab_size
    layout: list[tuple[str, tuple[int, ...]]] = []
    if not config.frozen_projection:
        layout += [("img_proj.w", (d, f)), ("img_proj.b", (d,))]
    if config.kind in _TEXT_KINDS:
        layout.append(("tok_emb", (v, d)))
    if config.kind in _MLP_KINDS:
        layout += [
            ("mlp.w1", (config.ff_dim, 2 * d)), ("mlp.b1", (config.ff_dim,)),
            ("mlp.w2", (d, config.ff_dim)), ("mlp.b2", (d,)),
        ]
    elif config.kind == "gated_residual":
        layout += [
            ("gate.w", (d, 2 * d)), ("gate.b", (d,)),
            ("res.w", (d, 2 * d)), ("res.b", (d,)),
        ]
    elif config.kind == "transformer":
        layout += [("cls_emb", (d,)), ("pos_emb", (config.max_tokens + 2, d))]
        for i in range(config.num_layers):
            prefix = f"layer{i}"
            for gate in ("wq", "wk", "wv", "wo"):
                layout.append((f"{prefix}.attn.{gate}", (d, d)))
            for bias in ("bq", "bk", "bv", "bo"):
                layout.append((f"{prefix}.attn.{bias}", (d,)))
            layout += [
                (f"{prefix}.ln1.g", (d,)), (f"{prefix}.ln1.b", (d,)),
                (f"{prefix}.ff.w1", (config.ff_dim, d)), (f"{prefix}.ff.b1", (config.ff_dim,)),
                (f"{prefix}.ff.w2", (d, config.ff_dim)), (f"{prefix}.ff.b2", (d,)),
                (f"{prefix}.ln2.g", (d,)), (f"{prefix}.ln2.b", (d,)),
            ]
    return layout


class ParameterBlock:
    """Flat float64 storage with named views aliasing the same memory."""

    def __init__(self, layout: list[tuple[str, tuple[int, ...]]],
                 flat: np.ndarray | None = None):
        self.layout = list(layout)
        total = sum(int(np.prod(shape)) for _, shape in layout)
        if flat is None:
            flat = np.zeros(total, dtype=np.float64)
        else:
            flat = np.asarray(flat, dtype=np.float64)
            if flat.shape != (total,):
                raise DataError(f"flat vector has size {flat.size}, layout needs {total}")
        self.flat = flat
        self.views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in layout:
            size = int(np.prod(shape))
            self.views[name] = self.flat[offset:offset + size].reshape(shape)
            offset += size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def __setitem__(self, name: str, value) -> None:
        self.views[name][...] = value

    def __contains__(self, name: str) -> bool:
        return name in self.views

    @property
    def size(self) -> int:
        return self.flat.size

    def group_names(self) -> list[str]:
        return [name for name, _ in self.layout]

    def zeros_like(self) -> "ParameterBlock":
        return ParameterBlock(self.layout)

    def copy(self) -> "ParameterBlock":
        return ParameterBlock(self.layout, self.flat.copy())


@dataclass
class ComposerParameters:
    """All trainable weights of one composer, flat-indexable for gradient
    checking and optimizer updates."""
    config: ComposerConfig
    block: ParameterBlock

    @property
    def flat(self) -> np.ndarray:
        return self.block.flat

    def __getitem__(self, name: str) -> np.ndarray:
        return self.block[name]

    def copy(self) -> "ComposerParameters":
        return ComposerParameters(self.config, self.block.copy())


def parameter_count(config: ComposerConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in parameter_layout(config))


def init_parameters(config: ComposerConfig, rng_seed: int = 0) -> ComposerParameters:
    """Symmetric uniform init scaled by fan-in; layer-norm gain 1, bias 0."""
    rng = np.random.default_rng(rng_seed)
    block = ParameterBlock(parameter_layout(config))
    for name, shape in block.layout:
        view = block[name]
        if name.endswith((".g",)):
            view[...] = 1.0
        elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            view[...] = 0.0
        else:
            fan_in = shape[-1] if len(shape) == 2 else config.model_dim
            bound = 1.0 / math.sqrt(fan_in)
            view[...] = rng.uniform(-bound, bound, size=shape)
    return ComposerParameters(config, block)


# ---------------------------------------------------------------------------
# Shared image projection
# ---------------------------------------------------------------------------

def _norm_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return l2_normalize(x), norms


def _norm_rows_backward(y: np.ndarray, norms: np.ndarray, dy: np.ndarray) -> np.ndarray:
    dot = np.sum(dy * y, axis=-1, keepdims=True)
    safe = np.where(norms < 1e-12, 1.0, norms)
    dx = (dy - y * dot) / safe
    return np.where(norms < 1e-12, dy, dx)


def project_image_with_cache(params: ComposerParameters, features: np.ndarray):
    """Project raw image features to unit vectors in the model space.

    The same projection encodes reference, target, and candidate images.
    With a frozen projection the features pass through identity (then
    normalization) and receive no parameter gradient.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
    if features.shape[1] != params.config.feature_dim:
        raise DataError(
            f"feature dimension {features.shape[1]} != {params.config.feature_dim}"
        )
    if params.config.frozen_projection:
        pre = features
    else:
        pre = features @ params["img_proj.w"].T + params["img_proj.b"]
    phi, norms = _norm_rows(pre)
    cache = {"features": features, "pre": pre, "phi": phi, "norms": norms}
    return phi, cache


def project_image(params: ComposerParameters, features: np.ndarray) -> np.ndarray:
    phi, _ = project_image_with_cache(params, features)
    return phi


def project_image_backward(params: ComposerParameters, cache: dict,
                           dphi: np.ndarray, grads: ParameterBlock) -> np.ndarray:
    """Accumulate projection gradients; returns the gradient w.r.t. features."""
    dpre = _norm_rows_backward(cache["phi"], cache["norms"], dphi)
    if params.config.frozen_projection:
        return dpre
    grads["img_proj.w"] += dpre.T @ cache["features"]
    grads["img_proj.b"] += dpre.sum(axis=0)
    return dpre @ params["img_proj.w"]


# ---------------------------------------------------------------------------
# Token pooling (text_only, concat_mlp, gated_residual)
# ---------------------------------------------------------------------------

def _pad_tokens(token_batch: list[list[int]], vocab_size: int):
    if any(len(ids) == 0 for ids in token_batch):
        raise DataError("empty token list; encode captions with an OOV fallback")
    for ids in token_batch:
        for token_id in ids:
            if not 0 <= token_id < vocab_size:
                raise DataError(f"token id {token_id} out of vocab range {vocab_size}")
    lengths = np.array([len(ids) for ids in token_batch], dtype=np.int64)
    width = int(lengths.max())
    padded = np.zeros((len(token_batch), width), dtype=np.int64)
    mask = np.zeros((len(token_batch), width), dtype=np.float64)
    for row, ids in enumerate(token_batch):
        padded[row, :len(ids)] = ids
        mask[row, :len(ids)] = 1.0
    return padded, mask, lengths


def _mean_token_embedding(params, token_batch):
    padded, mask, lengths = _pad_tokens(token_batch, params.config.vocab_size)
    emb = params["tok_emb"][padded] * mask[:, :, None]
    mean = emb.sum(axis=1) / lengths[:, None]
    return mean, {"padded": padded, "mask": mask, "lengths": lengths}


def _mean_token_embedding_backward(cache, dmean, grads):
    scaled = dmean[:, None, :] * (cache["mask"] / cache["lengths"][:, None])[:, :, None]
    np.add.at(grads["tok_emb"], cache["padded"].reshape(-1),
              scaled.reshape(-1, scaled.shape[-1]))


# ---------------------------------------------------------------------------
# Transformer internals
# ---------------------------------------------------------------------------

def _layer_norm(x, gain, bias):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv
    return gain * xhat + bias, {"xhat": xhat, "inv": inv}


def _layer_norm_backward(cache, gain, dy):
    xhat, inv = cache["xhat"], cache["inv"]
    dgain = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbias = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _split_heads(x, num_heads):
    batch, seq, dim = x.shape
    return x.reshape(batch, seq, num_heads, dim // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    batch, heads, seq, head_dim = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, seq, heads * head_dim)


def _attention_forward(params, prefix, x, key_mask):
    num_heads = params.config.num_heads
    head_dim = params.config.model_dim // num_heads
    q = x @ params[f"{prefix}.attn.wq"].T + params[f"{prefix}.attn.bq"]
    k = x @ params[f"{prefix}.attn.wk"].T + params[f"{prefix}.attn.bk"]
    v = x @ params[f"{prefix}.attn.wv"].T + params[f"{prefix}.attn.bv"]
    qh, kh, vh = (_split_heads(t, num_heads) for t in (q, k, v))
    scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(head_dim)
    scores = np.where(key_mask[:, None, None, :], scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    context = weights @ vh
    merged = _merge_heads(context)
    out = merged @ params[f"{prefix}.attn.wo"].T + params[f"{prefix}.attn.bo"]
    cache = {"x": x, "qh": qh, "kh": kh, "vh": vh, "weights": weights,
             "merged": merged, "head_dim": head_dim}
    return out, cache


def _attention_backward(params, prefix, cache, dout, grads):
    num_heads = params.config.num_heads
    grads[f"{prefix}.attn.wo"] += np.einsum("bso,bsi->oi", dout, cache["merged"])
    grads[f"{prefix}.attn.bo"] += dout.sum(axis=(0, 1))
    dmerged = dout @ params[f"{prefix}.attn.wo"]
    dcontext = _split_heads(dmerged, num_heads)
    weights = cache["weights"]
    dweights = dcontext @ cache["vh"].transpose(0, 1, 3, 2)
    dvh = weights.transpose(0, 1, 3, 2) @ dcontext
    dscores = weights * (dweights - np.sum(dweights * weights, axis=-1, keepdims=True))
    dscores /= math.sqrt(cache["head_dim"])
    dqh = dscores @ cache["kh"]
    dkh = dscores.transpose(0, 1, 3, 2) @ cache["qh"]
    dx = np.zeros_like(cache["x"])
    for name, dt in (("wq", dqh), ("wk", dkh), ("wv", dvh)):
        dflat = _merge_heads(dt)
        grads[f"{prefix}.attn.{name}"] += np.einsum("bso,bsi->oi", dflat, cache["x"])
        grads[f"{prefix}.attn.b{name[1]}"] += dflat.sum(axis=(0, 1))
        dx += dflat @ params[f"{prefix}.attn.{name}"]
    return dx


def _transformer_forward(params, phi_img, token_batch):
    config = params.config
    padded, mask, lengths = _pad_tokens(
        [ids[: config.max_tokens] for ids in token_batch], config.vocab_size
    )
    batch = len(token_batch)
    width = padded.shape[1]
    seq = width + 2
    img_slot = lengths + 1
    x = np.zeros((batch, seq, config.model_dim), dtype=np.float64)
    x[:, 0] = params["cls_emb"]
    x[:, 1:1 + width] = params["tok_emb"][padded] * mask[:, :, None]
    x[np.arange(batch), img_slot] = phi_img
    x += params["pos_emb"][:seq]
    key_mask = np.zeros((batch, seq), dtype=bool)
    key_mask[:, 0] = True
    key_mask[:, 1:1 + width] = mask.astype(bool)
    key_mask[np.arange(batch), img_slot] = True
    layers = []
    for i in range(config.num_layers):
        prefix = f"layer{i}"
        attn_out, attn_cache = _attention_forward(params, prefix, x, key_mask)
        x1, ln1_cache = _layer_norm(x + attn_out, params[f"{prefix}.ln1.g"],
                                    params[f"{prefix}.ln1.b"])
        pre = x1 @ params[f"{prefix}.ff.w1"].T + params[f"{prefix}.ff.b1"]
        hidden = np.maximum(pre, 0.0)
        ff_out = hidden @ params[f"{prefix}.ff.w2"].T + params[f"{prefix}.ff.b2"]
        x2, ln2_cache = _layer_norm(x1 + ff_out, params[f"{prefix}.ln2.g"],
                                    params[f"{prefix}.ln2.b"])
        layers.append({"attn": attn_cache, "ln1": ln1_cache, "x1": x1,
                       "pre": pre, "hidden": hidden, "ln2": ln2_cache})
        x = x2
    slot_states = x[np.arange(batch), img_slot]
    phi, norms = _norm_rows(slot_states)
    cache = {"padded": padded, "mask": mask, "img_slot": img_slot, "seq": seq,
             "layers": layers, "phi": phi, "norms": norms, "batch": batch,
             "width": width}
    return phi, cache


def _transformer_backward(params, cache, dphi, grads):
    config = params.config
    batch, seq, width = cache["batch"], cache["seq"], cache["width"]
    dslot = _norm_rows_backward(cache["phi"], cache["norms"], dphi)
    dx = np.zeros((batch, seq, config.model_dim), dtype=np.float64)
    dx[np.arange(batch), cache["img_slot"]] = dslot
    for i in reversed(range(config.num_layers)):
        prefix = f"layer{i}"
        layer = cache["layers"][i]
        dsum2, dg2, db2 = _layer_norm_backward(layer["ln2"], params[f"{prefix}.ln2.g"], dx)
        grads[f"{prefix}.ln2.g"] += dg2
        grads[f"{prefix}.ln2.b"] += db2
        dff = dsum2
        grads[f"{prefix}.ff.w2"] += np.einsum("bso,bsi->oi", dff, layer["hidden"])
        grads[f"{prefix}.ff.b2"] += dff.sum(axis=(0, 1))
        dhidden = dff @ params[f"{prefix}.ff.w2"]
        dpre = dhidden * (layer["pre"] > 0.0)
        grads[f"{prefix}.ff.w1"] += np.einsum("bso,bsi->oi", dpre, layer["x1"])
        grads[f"{prefix}.ff.b1"] += dpre.sum(axis=(0, 1))
        dx1 = dsum2 + dpre @ params[f"{prefix}.ff.w1"]
        dsum1, dg1, db1 = _layer_norm_backward(layer["ln1"], params[f"{prefix}.ln1.g"], dx1)
        grads[f"{prefix}.ln1.g"] += dg1
        grads[f"{prefix}.ln1.b"] += db1
        dx = dsum1 + _attention_backward(params, prefix, layer["attn"], dsum1, grads)
    grads["pos_emb"][:seq] += dx.sum(axis=0)
    grads["cls_emb"] += dx[:, 0].sum(axis=0)
    dtok = dx[:, 1:1 + width] * cache["mask"][:, :, None]
    np.add.at(grads["tok_emb"], cache["padded"].reshape(-1),
              dtok.reshape(-1, config.model_dim))
    return dx[np.arange(batch), cache["img_slot"]]


# ---------------------------------------------------------------------------
# Composition dispatch
# ---------------------------------------------------------------------------

def compose_with_cache(params: ComposerParameters, ref_features: np.ndarray,
                       token_batch: list[list[int]]):
    """Composed unit-norm features (batch, model_dim) plus a backward cache.

    For ``random_image_text`` the caller passes the substituted reference
    features; the architecture itself matches ``concat_mlp``.
    """
    kind = params.config.kind
    ref_features = np.asarray(ref_features, dtype=np.float64)
    if ref_features.ndim == 1:
        ref_features = ref_features[None, :]
    cache: dict = {"kind": kind}

    if kind == "image_only":
        phi, proj_cache = project_image_with_cache(params, ref_features)
        cache["proj"] = proj_cache
        return phi, cache

    if kind == "text_only":
        mean, tok_cache = _mean_token_embedding(params, token_batch)
        phi, norms = _norm_rows(mean)
        cache.update({"tok": tok_cache, "phi": phi, "norms": norms})
        return phi, cache

    if kind in _MLP_KINDS:
        phi_img, proj_cache = project_image_with_cache(params, ref_features)
        mean, tok_cache = _mean_token_embedding(params, token_batch)
        joint = np.concatenate([phi_img, mean], axis=1)
        pre = joint @ params["mlp.w1"].T + params["mlp.b1"]
        hidden = np.maximum(pre, 0.0)
        out = hidden @ params["mlp.w2"].T + params["mlp.b2"]
        phi, norms = _norm_rows(out)
        cache.update({"proj": proj_cache, "tok": tok_cache, "joint": joint,
                      "pre": pre, "hidden": hidden, "phi": phi, "norms": norms})
        return phi, cache

    if kind == "gated_residual":
        phi_img, proj_cache = project_image_with_cache(params, ref_features)
        mean, tok_cache = _mean_token_embedding(params, token_batch)
        joint = np.concatenate([phi_img, mean], axis=1)
        gate_pre = joint @ params["gate.w"].T + params["gate.b"]
        gate = 1.0 / (1.0 + np.exp(-gate_pre))
        residual = joint @ params["res.w"].T + params["res.b"]
        out = gate * phi_img + residual
        phi, norms = _norm_rows(out)
        cache.update({"proj": proj_cache, "tok": tok_cache, "joint": joint,
                      "gate": gate, "phi_img": phi_img, "phi": phi, "norms": norms})
        return phi, cache

    if kind == "transformer":
        phi_img, proj_cache = project_image_with_cache(params, ref_features)
        phi, tf_cache = _transformer_forward(params, phi_img, token_batch)
        cache.update({"proj": proj_cache, "tf": tf_cache})
        return phi, cache

    raise DataError(f"unknown composer kind {kind!r}")


def compose(params: ComposerParameters, ref_features: np.ndarray,
            token_batch: list[list[int]]) -> np.ndarray:
    phi, _ = compose_with_cache(params, ref_features, token_batch)
    return phi


def compose_backward(params: ComposerParameters, cache: dict, dphi: np.ndarray,
                     grads: ParameterBlock) -> None:
    """Accumulate exact gradients of the composed output into ``grads``.

    ``dphi`` is the upstream gradient w.r.t. the composed features, already
    carrying any batch reduction weights.
    """
    kind = cache["kind"]
    if kind == "image_only":
        project_image_backward(params, cache["proj"], dphi, grads)
        return
    if kind == "text_only":
        dmean = _norm_rows_backward(cache["phi"], cache["norms"], dphi)
        _mean_token_embedding_backward(cache["tok"], dmean, grads)
        return
    if kind in _MLP_KINDS:
        dout = _norm_rows_backward(cache["phi"], cache["norms"], dphi)
        grads["mlp.w2"] += dout.T @ cache["hidden"]
        grads["mlp.b2"] += dout.sum(axis=0)
        dhidden = dout @ params["mlp.w2"]
        dpre = dhidden * (cache["pre"] > 0.0)
        grads["mlp.w1"] += dpre.T @ cache["joint"]
        grads["mlp.b1"] += dpre.sum(axis=0)
        djoint = dpre @ params["mlp.w1"]
        dim = params.config.model_dim
        project_image_backward(params, cache["proj"], djoint[:, :dim], grads)
        _mean_token_embedding_backward(cache["tok"], djoint[:, dim:], grads)
        return
    if kind == "gated_residual":
        dout = _norm_rows_backward(cache["phi"], cache["norms"], dphi)
        gate, phi_img, joint = cache["gate"], cache["phi_img"], cache["joint"]
        dgate = dout * phi_img
        dgate_pre = dgate * gate * (1.0 - gate)
        grads["gate.w"] += dgate_pre.T @ joint
        grads["gate.b"] += dgate_pre.sum(axis=0)
        grads["res.w"] += dout.T @ joint
        grads["res.b"] += dout.sum(axis=0)
        djoint = dgate_pre @ params["gate.w"] + dout @ params["res.w"]
        dim = params.config.model_dim
        dphi_img = dout * gate + djoint[:, :dim]
        project_image_backward(params, cache["proj"], dphi_img, grads)
        _mean_token_embedding_backward(cache["tok"], djoint[:, dim:], grads)
        return
    if kind == "transformer":
        dphi_img = _transformer_backward(params, cache["tf"], dphi, grads)
        project_image_backward(params, cache["proj"], dphi_img, grads)
        return
    raise DataError(f"unknown composer kind {kind!r}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ComposerParameters, vocab: Vocabulary | None,
                    path: str | Path) -> None:
    """Binary checkpoint: magic, u32 version, u32 length + JSON config blob
    (kind, dims, vocabulary), then the flat float64-le parameter vector."""
    config = params.config
    blob = {
        "kind": config.kind,
        "feature_dim": config.feature_dim,
        "model_dim": config.model_dim,
        "ff_dim": config.ff_dim,
        "num_layers": config.num_layers,
        "num_heads": config.num_heads,
        "vocab_size": config.vocab_size,
        "max_tokens": config.max_tokens,
        "frozen_projection": config.frozen_projection,
        "vocab": vocab.token_to_id if vocab is not None else None,
    }
    payload = json.dumps(blob, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(payload)))
        fh.write(payload)
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ComposerParameters, Vocabulary | None]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a composer checkpoint")
    version, blob_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    blob = json.loads(raw[12:12 + blob_len].decode("utf-8"))
    vocab_table = blob.pop("vocab", None)
    config = ComposerConfig(**blob)
    flat = np.frombuffer(raw, dtype="<f8", offset=12 + blob_len).copy()
    params = ComposerParameters(config, ParameterBlock(parameter_layout(config), flat))
    vocab = Vocabulary(vocab_table) if vocab_table else None
    return params, vocab
