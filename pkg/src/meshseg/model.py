"""The two-stream mesh transformer.

One stream carries per-triangle tokens with adjacency-masked
self-attention; the other carries cluster tokens with full self-attention
over real faces. Each layer exchanges information across the streams:
triangle tokens receive the average of their cluster's tokens, cluster
tokens aggregate same-cluster triangle tokens through masked
cross-attention. Only the triangle stream feeds the classification head.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass

import numpy as np

from meshseg import autodiff as ad
from meshseg.autodiff import Tensor
from meshseg.errors import ConfigError
from meshseg.preprocess import COORD_COLS, NORMAL_COLS, SPECTRAL_COLS, Sample

__all__ = [
    "ModelConfig",
    "AttentionMasks",
    "init_params",
    "build_masks",
    "met_forward",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters plus the ablation switches."""

    num_classes: int
    eigen_count: int = 16
    d_t: int = 512
    d_p: int = 1024
    num_layers: int = 4
    num_heads: int = 8
    ff_multiplier: int = 4
    max_clusters: int = 256
    dropout: float = 0.1
    use_coords: bool = True
    use_normals: bool = True
    use_laplacian: bool = True
    use_cluster_stream: bool = True
    tc_sum: bool = False  # literal C*P sum instead of the cluster average

    def __post_init__(self):
        if self.d_t % self.num_heads or self.d_p % self.num_heads:
            raise ConfigError(
                f"token widths d_t={self.d_t}, d_p={self.d_p} must be divisible by "
                f"num_heads={self.num_heads}"
            )
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def feature_width(self) -> int:
        return 12 + self.eigen_count

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(
    cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32
) -> dict[str, Tensor]:
    """Fresh learnable parameters: uniform 1/sqrt(fan_in) for projections,
    normal(0, 0.02) for the cluster embedding table, unit layer-norm gains."""

    params: dict[str, np.ndarray] = {}

    def linear(name, d_in, d_out, bias=True):
        params[f"{name}.w"] = _uniform(rng, d_in, (d_in, d_out), dtype)
        if bias:
            params[f"{name}.b"] = _uniform(rng, d_in, (d_out,), dtype)

    def layernorm(name, d):
        params[f"{name}.g"] = np.ones(d, dtype=dtype)
        params[f"{name}.b"] = np.zeros(d, dtype=dtype)

    def attention(name, d_q_in, d_kv_in, d):
        for key, d_in in (("wq", d_q_in), ("wk", d_kv_in), ("wv", d_kv_in)):
            params[f"{name}.{key}"] = _uniform(rng, d_in, (d_in, d), dtype)
        params[f"{name}.wo"] = _uniform(rng, d, (d, d), dtype)

    d_t, d_p = cfg.d_t, cfg.d_p
    linear("embed", cfg.feature_width, d_t)
    params["cluster_embed"] = rng.normal(0.0, 0.02, size=(cfg.max_clusters, d_p)).astype(dtype)
    for i in range(cfg.num_layers):
        pre = f"layers.{i}"
        layernorm(f"{pre}.tc.ln", d_t)
        linear(f"{pre}.tc.ff", d_p, d_t)
        layernorm(f"{pre}.ct.ln", d_p)
        attention(f"{pre}.ct", d_p, d_t, d_p)
        layernorm(f"{pre}.sa_t.ln", d_t)
        attention(f"{pre}.sa_t", d_t, d_t, d_t)
        layernorm(f"{pre}.sa_p.ln", d_p)
        attention(f"{pre}.sa_p", d_p, d_p, d_p)
        layernorm(f"{pre}.res_t.ln", d_t)
        linear(f"{pre}.res_t.ff1", d_t, cfg.ff_multiplier * d_t)
        linear(f"{pre}.res_t.ff2", cfg.ff_multiplier * d_t, d_t)
        layernorm(f"{pre}.res_p.ln", d_p)
        linear(f"{pre}.res_p.ff1", d_p, cfg.ff_multiplier * d_p)
        linear(f"{pre}.res_p.ff2", cfg.ff_multiplier * d_p, d_p)
    linear("head.ff1", d_t, d_t)
    linear("head.ff2", d_t, cfg.num_classes)
    return {name: Tensor(arr, requires_grad=True) for name, arr in params.items()}


@dataclass(frozen=True)
class AttentionMasks:
    """Additive masks (0 allowed, -inf blocked) plus the row-normalized
    co-membership used for cluster averaging."""

    adjacency: np.ndarray  # self plus dual-graph neighbors
    cluster: np.ndarray  # same-cluster pairs (diagonal allowed)
    cluster_avg: np.ndarray  # row-normalized co-membership
    real: np.ndarray  # real columns (plus self) for the cluster stream


def build_masks(sample: Sample, dtype=np.float32) -> AttentionMasks:
    n = sample.n_total
    neg_inf = -np.inf
    eye = np.eye(n, dtype=bool)

    allowed_adj = eye | (sample.adjacency.to_dense() > 0)
    adjacency = np.where(allowed_adj, 0.0, neg_inf).astype(dtype)

    co = sample.co_membership() > 0
    cluster = np.where(co, 0.0, neg_inf).astype(dtype)
    cluster_avg = (co / co.sum(axis=1, keepdims=True)).astype(dtype)

    # the cluster stream attends over real faces only; padding rows keep a
    # self-loop so their residual path stays finite
    allowed_real = sample.real_mask[np.newaxis, :] | eye
    real = np.where(allowed_real, 0.0, neg_inf).astype(dtype)
    return AttentionMasks(adjacency=adjacency, cluster=cluster, cluster_avg=cluster_avg, real=real)


def _linear(p, name, x, activation=False):
    out = ad.add(ad.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])
    return ad.relu(out) if activation else out


def _layer_norm(p, name, x):
    return ad.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def multi_head_attention(p, name, q_in, k_in, v_in, mask, num_heads):
    """Masked multi-head attention with per-head width d / num_heads."""
    q = ad.matmul(q_in, p[f"{name}.wq"])
    k = ad.matmul(k_in, p[f"{name}.wk"])
    v = ad.matmul(v_in, p[f"{name}.wv"])
    d = q.shape[-1]
    head_dim = d // num_heads
    scale = 1.0 / np.sqrt(head_dim)
    heads = []
    for h in range(num_heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = ad.slice_last(q, lo, hi)
        kh = ad.slice_last(k, lo, hi)
        vh = ad.slice_last(v, lo, hi)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), scale)
        weights = ad.masked_softmax(scores, mask)
        heads.append(ad.matmul(weights, vh))
    merged = heads[0] if num_heads == 1 else ad.concat_last(heads)
    return ad.matmul(merged, p[f"{name}.wo"])


def _dropout(x, cfg, training, rng):
    return ad.dropout(x, cfg.dropout, training, rng)


def met_layer(p, prefix, e_tok, p_tok, masks, cfg, training, rng):
    """One two-stream layer; both cross-stream updates read the layer input."""
    if not cfg.use_cluster_stream:
        sa = multi_head_attention(
            p, f"{prefix}.sa_t", *( [_layer_norm(p, f"{prefix}.sa_t.ln", e_tok)] * 3 ),
            masks.adjacency, cfg.num_heads,
        )
        e_mid = ad.add(_dropout(sa, cfg, training, rng), e_tok)
        e_out = ad.add(
            _dropout(
                _linear(p, f"{prefix}.res_t.ff2",
                        _linear(p, f"{prefix}.res_t.ff1",
                                _layer_norm(p, f"{prefix}.res_t.ln", e_mid), activation=True)),
                cfg, training, rng,
            ),
            e_mid,
        )
        return e_out, p_tok

    # triangle-from-cluster update: normalized tokens plus a projection of
    # the per-cluster average (or literal sum) of cluster tokens
    if cfg.tc_sum:
        cp = (masks.cluster_avg > 0).astype(masks.cluster_avg.dtype)
    else:
        cp = masks.cluster_avg
    cluster_mix = ad.matmul(Tensor(cp), p_tok)
    tc = ad.add(
        _layer_norm(p, f"{prefix}.tc.ln", e_tok),
        _dropout(_linear(p, f"{prefix}.tc.ff", cluster_mix, activation=True), cfg, training, rng),
    )

    # cluster-from-triangle update: queries from normalized cluster tokens,
    # keys/values from the raw triangle tokens, same-cluster mask
    ct_attn = multi_head_attention(
        p, f"{prefix}.ct", _layer_norm(p, f"{prefix}.ct.ln", p_tok), e_tok, e_tok,
        masks.cluster, cfg.num_heads,
    )
    ct = ad.add(_dropout(ct_attn, cfg, training, rng), p_tok)

    sa_t_in = _layer_norm(p, f"{prefix}.sa_t.ln", tc)
    sa_t = multi_head_attention(
        p, f"{prefix}.sa_t", sa_t_in, sa_t_in, sa_t_in, masks.adjacency, cfg.num_heads
    )
    e_mid = ad.add(_dropout(sa_t, cfg, training, rng), tc)

    sa_p_in = _layer_norm(p, f"{prefix}.sa_p.ln", ct)
    sa_p = multi_head_attention(
        p, f"{prefix}.sa_p", sa_p_in, sa_p_in, sa_p_in, masks.real, cfg.num_heads
    )
    p_mid = ad.add(_dropout(sa_p, cfg, training, rng), ct)

    e_out = ad.add(
        _dropout(
            _linear(p, f"{prefix}.res_t.ff2",
                    _linear(p, f"{prefix}.res_t.ff1",
                            _layer_norm(p, f"{prefix}.res_t.ln", e_mid), activation=True)),
            cfg, training, rng,
        ),
        e_mid,
    )
    p_out = ad.add(
        _dropout(
            _linear(p, f"{prefix}.res_p.ff2",
                    _linear(p, f"{prefix}.res_p.ff1",
                            _layer_norm(p, f"{prefix}.res_p.ln", p_mid), activation=True)),
            cfg, training, rng,
        ),
        p_mid,
    )
    return e_out, p_out


def _masked_features(sample: Sample, cfg: ModelConfig, dtype) -> np.ndarray:
    """Zero out ablated feature blocks; widths stay unchanged."""
    t = sample.features.astype(dtype).copy()
    if not cfg.use_coords:
        t[:, COORD_COLS] = 0
    if not cfg.use_normals:
        t[:, NORMAL_COLS] = 0
    if not cfg.use_laplacian:
        t[:, SPECTRAL_COLS] = 0
    return t


def met_forward(
    sample: Sample,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    masks: AttentionMasks | None = None,
) -> Tensor:
    """Per-triangle class scores, shape (n_total, num_classes).

    Padding rows produce scores too; downstream consumers drop them via
    the sample's real mask.
    """
    if sample.features.shape[1] != cfg.feature_width:
        raise ConfigError(
            f"feature width {sample.features.shape[1]} != configured {cfg.feature_width}"
        )
    pad_clusters = sample.num_clusters + (1 if sample.has_padding else 0)
    if pad_clusters > cfg.max_clusters:
        raise ConfigError(
            f"sample needs {pad_clusters} cluster embeddings, table has {cfg.max_clusters}"
        )
    dtype = params["embed.w"].dtype
    if masks is None:
        masks = build_masks(sample, dtype=dtype)

    t = Tensor(_masked_features(sample, cfg, dtype))
    e_tok = _dropout(_linear(params, "embed", t, activation=True), cfg, training, rng)
    p_tok = ad.embedding_lookup(params["cluster_embed"], sample.cluster_ids)

    for i in range(cfg.num_layers):
        e_tok, p_tok = met_layer(
            params, f"layers.{i}", e_tok, p_tok, masks, cfg, training, rng
        )

    hidden = _dropout(_linear(params, "head.ff1", e_tok, activation=True), cfg, training, rng)
    return _linear(params, "head.ff2", hidden)


def save_checkpoint(path, params: dict[str, Tensor], cfg: ModelConfig) -> None:
    """Zip of a flat little-endian float32 blob plus a JSON manifest
    mapping parameter names to shape and offset."""
    manifest_params = {}
    blob = io.BytesIO()
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data.astype("<f4"))
        blob.write(arr.tobytes())
        manifest_params[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dtype": "<f4",
        "params": manifest_params,
        "config": asdict(cfg),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("params.bin", blob.getvalue())
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig]:
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(
                f"unsupported checkpoint format version {manifest.get('format_version')}"
            )
        flat = np.frombuffer(zf.read("params.bin"), dtype=manifest["dtype"])
    cfg = ModelConfig.from_dict(manifest["config"])
    params = {}
    for name, meta in manifest["params"].items():
        shape = tuple(meta["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = flat[meta["offset"] : meta["offset"] + size].reshape(shape).copy()
        params[name] = Tensor(arr, requires_grad=True)
    return params, cfg
