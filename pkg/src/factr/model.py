"""The forecaster: instance-normalized patches, per-channel temporal
attention, factorization-machine channel mixing, gated fusion, shared head.

Layout conventions, used everywhere below:
    B batch, C channels, L lookback steps, T horizon steps,
    N patches per window, P patch length, D embedding width,
    K dynamic covariate features, r factor ranks.

The three variants nest: ``temporal_only`` is normalization + patching +
temporal attention + head; ``plus_fm`` adds the cross-channel FM block and
gated fusion; ``full`` adds the position-wise MLP on top. Unused tensors
still exist in every variant so checkpoints stay name-compatible; they
simply receive zero gradient.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

REVIN_EPS = 1e-5
VARIANTS = ("temporal_only", "plus_fm", "full")

CHECKPOINT_MAGIC = b"FCTR"
CHECKPOINT_VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class ModelError(ValueError):
    """Configuration or checkpoint contract violation."""


@dataclass
class ModelConfig:
    n_channels: int
    lookback: int = 512
    horizon: int = 96
    patch_len: int = 32
    stride: int = 32
    d_model: int = 32
    fm_rank: int = 8
    spatial_rank: int = 8
    dropout: float = 0.1
    variant: str = "full"
    static_cat_sizes: tuple[int, ...] = ()
    n_static_cont: int = 0
    dyn_vocab_sizes: tuple[int, ...] = ()

    def __post_init__(self):
        self.static_cat_sizes = tuple(self.static_cat_sizes)
        self.dyn_vocab_sizes = tuple(self.dyn_vocab_sizes)
        self.validate()

    def validate(self):
        if self.n_channels < 1:
            raise ModelError("n_channels must be >= 1")
        if not 1 <= self.patch_len <= self.lookback:
            raise ModelError(
                f"patch_len {self.patch_len} must lie in [1, lookback={self.lookback}]")
        if self.stride < 1:
            raise ModelError("stride must be >= 1")
        if min(self.d_model, self.fm_rank, self.spatial_rank, self.horizon) < 1:
            raise ModelError("d_model, ranks and horizon must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.variant not in VARIANTS:
            raise ModelError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if any(v < 1 for v in self.static_cat_sizes + self.dyn_vocab_sizes):
            raise ModelError("vocabulary sizes must be >= 1")

    @property
    def n_patches(self) -> int:
        return (self.lookback - self.patch_len) // self.stride + 1

    @property
    def n_dyn_features(self) -> int:
        return len(self.dyn_vocab_sizes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["static_cat_sizes"] = list(self.static_cat_sizes)
        d["dyn_vocab_sizes"] = list(self.dyn_vocab_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ModelError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


def count_params(config: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts per block; 'total' is their sum.

    Must agree exactly with enumerating the instantiated tensors; the audit
    test enforces that.
    """
    c, d, p = config.n_channels, config.d_model, config.patch_len
    n, t, h = config.n_patches, config.horizon, 4 * config.d_model
    k = config.n_dyn_features
    counts = {
        "revin": 2 * c,
        "patch_embed": p * d + d,
        "pos_embed": n * d,
        "static_embed": c * d + sum(v * d for v in config.static_cat_sizes)
                        + config.n_static_cont * d,
        "dyn_embed": (sum(v * d for v in config.dyn_vocab_sizes)
                      + (k * d * d + d) + (p * d + d)) if k else 0,
        "temporal_attn": 4 * (d * d + d),
        "fm": d * config.fm_rank + config.fm_rank,
        "spatial_proj": 2 * d * config.spatial_rank,
        "fusion_gate": d * d + d,
        "mlp": 2 * d + (d * h + h) + (h * d + d),
        "head": n * d * t + t,
    }
    counts["total"] = sum(counts.values())
    return counts


def low_rank_residual(matrix: np.ndarray, rank: int) -> tuple[float, float]:
    """Squared Frobenius distance from `matrix` to its best rank-`rank`
    approximation, plus the tail singular-value energy. Eckart-Young says
    they are equal; callers assert that."""
    m = np.asarray(matrix, dtype=np.float64)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    approx = (u[:, :rank] * s[:rank]) @ vt[:rank]
    residual = float(((m - approx) ** 2).sum())
    tail = float((s[rank:] ** 2).sum())
    return residual, tail


class Forecaster:
    """Builds parameters at a seed and runs the forward pass.

    Static channel attributes (categorical codes, continuous features) are
    data, not parameters: pass them at construction, they are not stored in
    checkpoints.
    """

    def __init__(self, config: ModelConfig, seed: int = 0,
                 static_cat_codes: np.ndarray | None = None,
                 static_cont: np.ndarray | None = None,
                 dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

        m = len(config.static_cat_sizes)
        if m and (static_cat_codes is None or static_cat_codes.shape != (config.n_channels, m)):
            raise ModelError(
                f"static_cat_codes of shape ({config.n_channels}, {m}) required")
        if config.n_static_cont and (
                static_cont is None
                or static_cont.shape != (config.n_channels, config.n_static_cont)):
            raise ModelError(
                f"static_cont of shape ({config.n_channels}, {config.n_static_cont}) required")
        self.static_cat_codes = static_cat_codes
        self.static_cont = (None if static_cont is None
                            else static_cont.astype(dtype, copy=False))

    # -- parameter construction ---------------------------------------------

    def _init_params(self, rng: np.random.Generator):
        cfg = self.config
        c, d, p, n = cfg.n_channels, cfg.d_model, cfg.patch_len, cfg.n_patches

        def param(name, array):
            self.params[name] = Tensor(array.astype(self.dtype), requires_grad=True)

        def linear(name, fan_in, fan_out, bias=True):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            param(f"{name}.weight", rng.uniform(-limit, limit, (fan_in, fan_out)))
            if bias:
                param(f"{name}.bias", np.zeros(fan_out))

        def table(name, rows, cols):
            param(name, rng.normal(0.0, 0.02, (rows, cols)))

        param("revin.gamma", np.ones(c))
        param("revin.beta", np.zeros(c))
        linear("patch_embed", p, d)
        table("pos_embed", n, d)
        table("chan_embed", c, d)
        for m, size in enumerate(cfg.static_cat_sizes):
            table(f"static_cat.{m}", size, d)
        if cfg.n_static_cont:
            linear("static_cont", cfg.n_static_cont, d, bias=False)
        k = cfg.n_dyn_features
        if k:
            for i, size in enumerate(cfg.dyn_vocab_sizes):
                table(f"dyn_embed.{i}", size, d)
            linear("dyn_merge", k * d, d)
            # Patch-mean init: a constant covariate embeds to a constant
            # patch summary before any training.
            param("dyn_conv.kernel", np.full((p, d), 1.0 / p))
            param("dyn_conv.bias", np.zeros(d))
        for name in ("attn.query", "attn.key", "attn.value", "attn.out"):
            linear(name, d, d)
        linear("fm.factor", d, cfg.fm_rank)
        linear("spatial.down", d, cfg.spatial_rank, bias=False)
        linear("spatial.up", cfg.spatial_rank, d, bias=False)
        linear("fusion.gate", d, d)
        param("mlp.norm.gamma", np.ones(d))
        param("mlp.norm.beta", np.zeros(d))
        linear("mlp.fc1", d, 4 * d)
        linear("mlp.fc2", 4 * d, d)
        linear("head", n * d, cfg.horizon)

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def encoder_param_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("head.")]

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def set_trainable(self, names, trainable: bool):
        for name in names:
            self.params[name].requires_grad = trainable

    # -- forward blocks -------------------------------------------------------

    def revin_normalize(self, x: np.ndarray) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Per-window per-channel standardization with a learned affine.

        Statistics are data (no gradient flows through them); the affine
        gamma/beta is trainable. Returns (normalized, mu, sigma) with the
        stats kept for the inverse after the head.
        """
        mu = x.mean(axis=-1, keepdims=True)
        sigma = np.sqrt(x.var(axis=-1, keepdims=True) + REVIN_EPS)
        xn = Tensor(((x - mu) / sigma).astype(self.dtype, copy=False))
        c = self.config.n_channels
        gamma = self.params["revin.gamma"].reshape(1, c, 1)
        beta = self.params["revin.beta"].reshape(1, c, 1)
        return xn * gamma + beta, mu, sigma

    def revin_denormalize(self, y: Tensor, mu: np.ndarray, sigma: np.ndarray) -> Tensor:
        """Exact algebraic inverse of revin_normalize using the input-window
        statistics."""
        c = self.config.n_channels
        gamma = self.params["revin.gamma"].reshape(1, c, 1)
        beta = self.params["revin.beta"].reshape(1, c, 1)
        return (y - beta) / gamma * Tensor(sigma.astype(self.dtype)) \
            + Tensor(mu.astype(self.dtype))

    def patchify_and_embed(self, xn: Tensor) -> Tensor:
        """[B, C, L] -> patch tokens [B, C, N, D] with positional offsets."""
        cfg = self.config
        patches = T.unfold_last(xn, cfg.patch_len, cfg.stride)          # [B,C,N,P]
        tokens = patches @ self.params["patch_embed.weight"] + self.params["patch_embed.bias"]
        return tokens + self.params["pos_embed"].reshape(1, 1, cfg.n_patches, cfg.d_model)

    def static_embedding(self) -> Tensor:
        """Per-channel identity embedding plus any attribute terms: [C, D]."""
        out = self.params["chan_embed"]
        for m in range(len(self.config.static_cat_sizes)):
            out = out + T.gather_rows(self.params[f"static_cat.{m}"],
                                      self.static_cat_codes[:, m])
        if self.config.n_static_cont:
            out = out + Tensor(self.static_cont) @ self.params["static_cont.weight"]
        return out

    def dynamic_embedding(self, codes: np.ndarray) -> Tensor:
        """Integer covariate codes over time -> patch-rate embeddings.

        codes is [B, L, K] (shared across channels) or [B, C, L, K]; output
        is [B, 1, N, D] or [B, C, N, D]. Lookups are concatenated, mixed to
        width D, then summarized per patch by a depthwise conv whose kernel
        spans exactly one patch.
        """
        cfg = self.config
        k = cfg.n_dyn_features
        if codes.shape[-1] != k:
            raise ModelError(f"expected {k} covariate features, got {codes.shape[-1]}")
        if codes.ndim == 3:
            codes = codes[:, None]                                       # [B,1,L,K]
        looked = [T.gather_rows(self.params[f"dyn_embed.{i}"], codes[..., i])
                  for i in range(k)]                                     # each [B,*,L,D]
        seq = T.concat(looked, axis=-1) @ self.params["dyn_merge.weight"] \
            + self.params["dyn_merge.bias"]                              # [B,*,L,D]
        windows = T.unfold_last(seq.swapaxes(-1, -2), cfg.patch_len, cfg.stride)
        windows = windows.swapaxes(-3, -2).swapaxes(-2, -1)              # [B,*,N,P,D]
        return (windows * self.params["dyn_conv.kernel"]).sum(axis=-2) \
            + self.params["dyn_conv.bias"]                               # [B,*,N,D]

    def attention_core(self, q: Tensor, k: Tensor, v: Tensor, training: bool,
                       rng: np.random.Generator | None) -> tuple[Tensor, Tensor]:
        """The quadratic-in-N part of attention: scores, softmax, weighted mix.

        Kept separate from the linear projections so the scaling benchmark
        can measure the O(N^2) term in isolation.
        """
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.config.d_model))
        probs = T.softmax(scores, axis=-1)                               # [B,C,N,N]
        attn = T.dropout(probs, self.config.dropout, rng, training)
        return attn @ v, probs

    def temporal_attention(self, tokens: Tensor, training: bool,
                           rng: np.random.Generator | None) -> tuple[Tensor, Tensor]:
        """Single-head self-attention over the patch axis, per channel,
        wrapped pre-norm + residual. Returns (Z_temp, attention probs)."""
        h = T.standardize(tokens)
        q = h @ self.params["attn.query.weight"] + self.params["attn.query.bias"]
        k = h @ self.params["attn.key.weight"] + self.params["attn.key.bias"]
        v = h @ self.params["attn.value.weight"] + self.params["attn.value.bias"]
        ctx, probs = self.attention_core(q, k, v, training, rng)
        out = ctx @ self.params["attn.out.weight"] + self.params["attn.out.bias"]
        return tokens + out, probs

    def fm_scores(self, context: Tensor) -> tuple[Tensor, Tensor]:
        """Pairwise channel affinities per patch from rank-r factors.

        context is H0 [B, C, N, D]. Returns (symmetric raw scores
        [B, N, C, C], attention over source channels [B, N, C, C]).
        """
        cfg = self.config
        factors = context @ self.params["fm.factor.weight"] + self.params["fm.factor.bias"]
        f = factors.swapaxes(1, 2)                                       # [B,N,C,r]
        scores = f @ f.swapaxes(-1, -2)                                  # [B,N,C,C]
        # Gram matrices are symmetric; make that exact in floating point.
        scores = (scores + scores.swapaxes(-1, -2)) * 0.5
        probs = T.softmax(scores * (1.0 / np.sqrt(cfg.fm_rank)), axis=-1)
        return scores, probs

    def spatial_projection(self, z_temp: Tensor) -> Tensor:
        """Values for cross-channel mixing, rank-limited: D -> r_sp -> D."""
        return (z_temp @ self.params["spatial.down.weight"]) @ self.params["spatial.up.weight"]

    def gated_fusion(self, z_temp: Tensor, z_spatial: Tensor) -> tuple[Tensor, Tensor]:
        """Sigmoid-convex blend of the temporal and cross-channel streams."""
        gate = T.sigmoid(z_temp @ self.params["fusion.gate.weight"]
                         + self.params["fusion.gate.bias"])
        return gate * z_temp + (1.0 - gate) * z_spatial, gate

    def embedding_mlp(self, z: Tensor, training: bool,
                      rng: np.random.Generator | None) -> Tensor:
        """Position-wise GELU MLP, pre-norm residual."""
        h = T.layer_norm(z, self.params["mlp.norm.gamma"], self.params["mlp.norm.beta"])
        h = T.gelu(h @ self.params["mlp.fc1.weight"] + self.params["mlp.fc1.bias"])
        h = T.dropout(h, self.config.dropout, rng, training)
        return z + (h @ self.params["mlp.fc2.weight"] + self.params["mlp.fc2.bias"])

    def project_forecast(self, z: Tensor) -> Tensor:
        """Flatten patches and project to the horizon, one shared head."""
        b, c = z.shape[0], z.shape[1]
        flat = z.reshape(b, c, self.config.n_patches * self.config.d_model)
        return flat @ self.params["head.weight"] + self.params["head.bias"]

    # -- full forward ----------------------------------------------------------

    def forward(self, x: np.ndarray, covariates: np.ndarray | None = None,
                training: bool = False, rng: np.random.Generator | None = None,
                collect: bool = False):
        """x [B, C, L] -> forecast [B, C, T] in the input's units.

        covariates: integer codes [B, L, K] or [B, C, L, K]; required iff the
        config declares dynamic features. With collect=True also returns a
        dict of detached interpretability arrays.
        """
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.n_channels or x.shape[2] != cfg.lookback:
            raise ModelError(
                f"input must be [B, {cfg.n_channels}, {cfg.lookback}], got {x.shape}")
        if training and cfg.dropout > 0 and rng is None:
            raise ModelError("training forward with dropout needs an rng")
        if cfg.n_dyn_features and covariates is None:
            raise ModelError(f"config declares {cfg.n_dyn_features} covariate features "
                             "but none were passed")
        if not cfg.n_dyn_features and covariates is not None:
            raise ModelError("covariates passed but the config declares none")

        xn, mu, sigma = self.revin_normalize(np.asarray(x, dtype=self.dtype))
        tokens = self.patchify_and_embed(xn)                             # [B,C,N,D]
        z_temp, attn_probs = self.temporal_attention(tokens, training, rng)

        dump = {}
        if collect:
            dump["temporal_attention"] = attn_probs.data.copy()          # [B,C,N,N]

        if cfg.variant == "temporal_only":
            z_mixed = z_temp
        else:
            context = tokens + self.static_embedding().reshape(1, cfg.n_channels, 1,
                                                               cfg.d_model)
            if cfg.n_dyn_features:
                dyn = self.dynamic_embedding(covariates)
                context = context + dyn
            scores, spatial_probs = self.fm_scores(context)              # [B,N,C,C]
            values = self.spatial_projection(z_temp).swapaxes(1, 2)      # [B,N,C,D]
            z_spatial = (spatial_probs @ values).swapaxes(1, 2)          # [B,C,N,D]
            z_fused, gate = self.gated_fusion(z_temp, z_spatial)
            if collect:
                # [B,N,C,C] -> [B,C(target),C(source),N]
                dump["fm_scores"] = scores.data.transpose(0, 2, 3, 1).copy()
                dump["spatial_attention"] = spatial_probs.data.transpose(0, 2, 3, 1).copy()
                dump["fusion_gate"] = gate.data.copy()
            z_mixed = z_fused if cfg.variant == "plus_fm" \
                else self.embedding_mlp(z_fused, training, rng)

        y = self.project_forecast(z_mixed)
        y = self.revin_denormalize(y, mu, sigma)
        return (y, dump) if collect else y

    # -- checkpoints -----------------------------------------------------------

    def save_checkpoint(self, path: str):
        save_checkpoint(path, self.config, {k: v.data for k, v in self.params.items()})

    def load_state(self, tensors: dict[str, np.ndarray], subset: list[str] | None = None):
        """Overwrite parameters from `tensors`; names and shapes must match.

        subset restricts which names are loaded (transfer: encoder only).
        """
        names = subset if subset is not None else list(self.params)
        missing = [n for n in names if n not in tensors]
        if missing:
            raise ModelError(f"checkpoint is missing tensors: {missing[:5]}")
        for n in names:
            have, want = tensors[n].shape, self.params[n].data.shape
            if have != want:
                raise ModelError(
                    f"shape mismatch for {n!r}: checkpoint {have} vs model {want}; "
                    "channel-dependent tensors cannot transfer across datasets with "
                    "different channel counts, re-initialize instead")
            self.params[n].data = tensors[n].astype(self.dtype).copy()


def save_checkpoint(path: str, config: ModelConfig, tensors: dict[str, np.ndarray]):
    """Binary format: magic, version, config JSON, then raw little-endian
    tensors. Bit-exact round trip is part of the contract."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        blob = json.dumps(config.to_dict(), sort_keys=True).encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            if arr.dtype not in _DTYPE_TAGS:
                raise ModelError(f"cannot serialize dtype {arr.dtype} for {name!r}")
            fh.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path: str) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint (bad magic)")
    ofs = 4
    version, = struct.unpack_from("<I", blob, ofs); ofs += 4
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    clen, = struct.unpack_from("<I", blob, ofs); ofs += 4
    config = ModelConfig.from_dict(json.loads(blob[ofs:ofs + clen])); ofs += clen
    count, = struct.unpack_from("<I", blob, ofs); ofs += 4
    tensors = {}
    for _ in range(count):
        nlen, = struct.unpack_from("<H", blob, ofs); ofs += 2
        name = blob[ofs:ofs + nlen].decode(); ofs += nlen
        tag, ndim = struct.unpack_from("<BB", blob, ofs); ofs += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, ofs); ofs += 4 * ndim
        dtype = _TAG_DTYPES.get(tag)
        if dtype is None:
            raise ModelError(f"{path}: unknown dtype tag {tag} for {name!r}")
        nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(blob[ofs:ofs + nbytes],
                            dtype=dtype.newbyteorder("<")).reshape(shape)
        tensors[name] = arr.astype(dtype)  # native byte order, own buffer
        ofs += nbytes
    if ofs != len(blob):
        raise ModelError(f"{path}: {len(blob) - ofs} trailing bytes, file corrupt")
    return config, tensors


def build_model(config: ModelConfig, seed: int = 0, **kwargs) -> Forecaster:
    return Forecaster(config, seed=seed, **kwargs)
