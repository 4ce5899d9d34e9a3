"""Toy encoder-decoder transformer with key/value prefix injection.

Every attention site (encoder self-attention, decoder self-attention,
decoder cross-attention) accepts an optional per-site key/value prefix.
Prefix positions are prepended to the projected keys/values, are never
masked, and sit outside the causal window, so a zero-length prefix reduces
the model to a vanilla transformer bit-for-bit.

The backbone itself is a pre-norm transformer: sinusoidal positions,
learned token embeddings, untied output projection.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import (
    params_digest,
    read_checkpoint,
    stable_fingerprint,
    write_checkpoint,
)
from .errors import CompatibilityError, ConfigError, DataError, ShapeError

MASK_FILL = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 256
    max_source_len: int = 64
    max_target_len: int = 48
    prefix_length: int = 32
    dropout_rate: float = 0.1

    def __post_init__(self):
        for field in ("vocab_size", "d_model", "n_heads", "n_encoder_layers",
                      "n_decoder_layers", "d_ff", "max_source_len", "max_target_len"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.prefix_length < 0:
            raise ConfigError(f"prefix_length must be >= 0, got {self.prefix_length}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        return stable_fingerprint(self.to_dict())


def attention_sites(config: ModelConfig) -> list[str]:
    """Attention sites in forward order; cross-attention counts as its own site."""
    sites = [f"enc{i}.self" for i in range(config.n_encoder_layers)]
    for i in range(config.n_decoder_layers):
        sites.append(f"dec{i}.self")
        sites.append(f"dec{i}.cross")
    return sites


def sinusoid_table(max_len: int, d_model: int) -> np.ndarray:
    position = np.arange(max_len)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, d_model, 2) * (-math.log(10000.0) / d_model))
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div[: d_model // 2])
    return table.astype(ad.default_dtype())


def parameter_spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...], object]]:
    """(name, shape, init) for every backbone parameter, in registration order.

    init is ("xavier", fan_in), "zeros", or "ones".
    """
    d, dff, vocab = config.d_model, config.d_ff, config.vocab_size
    entries: list[tuple[str, tuple[int, ...], object]] = []

    def norm(prefix):
        entries.append((f"{prefix}.gain", (d,), "ones"))
        entries.append((f"{prefix}.bias", (d,), "zeros"))

    def attention(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            entries.append((f"{prefix}.{w}", (d, d), ("xavier", d)))
        for b in ("bq", "bk", "bv", "bo"):
            entries.append((f"{prefix}.{b}", (d,), "zeros"))

    def ffn(prefix):
        entries.append((f"{prefix}.w1", (d, dff), ("xavier", d)))
        entries.append((f"{prefix}.b1", (dff,), "zeros"))
        entries.append((f"{prefix}.w2", (dff, d), ("xavier", dff)))
        entries.append((f"{prefix}.b2", (d,), "zeros"))

    entries.append(("embed.tok", (vocab, d), ("xavier", d)))
    for i in range(config.n_encoder_layers):
        norm(f"enc{i}.ln1")
        attention(f"enc{i}.attn")
        norm(f"enc{i}.ln2")
        ffn(f"enc{i}.ffn")
    norm("enc.ln_out")
    for i in range(config.n_decoder_layers):
        norm(f"dec{i}.ln1")
        attention(f"dec{i}.self")
        norm(f"dec{i}.ln2")
        attention(f"dec{i}.cross")
        norm(f"dec{i}.ln3")
        ffn(f"dec{i}.ffn")
    norm("dec.ln_out")
    entries.append(("out.w", (d, vocab), ("xavier", d)))
    entries.append(("out.b", (vocab,), "zeros"))
    return entries


class Backbone:
    """Transformer parameters plus the config that shaped them."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], seed: int,
                 provenance: str = "random-init"):
        self.config = config
        self.params = params
        self.seed = seed
        self.provenance = provenance
        max_len = max(config.max_source_len, config.max_target_len)
        self.positions = sinusoid_table(max_len, config.d_model)

    @classmethod
    def init(cls, config: ModelConfig, seed: int, provenance: str = "random-init"):
        rng = ad.named_stream(seed, "backbone-init")
        params: dict[str, Tensor] = {}
        for name, shape, init in parameter_spec(config):
            if init == "zeros":
                data = np.zeros(shape, dtype=ad.default_dtype())
            elif init == "ones":
                data = np.ones(shape, dtype=ad.default_dtype())
            else:
                _, fan_in = init
                data = ad.xavier_uniform(rng, shape, fan_in)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, params, seed, provenance)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def digest(self) -> str:
        return params_digest((name, p.data) for name, p in self.params.items())


@dataclass
class BackboneSnapshot:
    """Serialized backbone parameters; never contains prefix parameters."""

    config: ModelConfig
    seed: int
    provenance: str
    tensors: list[tuple[str, np.ndarray]]

    def digest(self) -> str:
        return params_digest(self.tensors)


def snapshot(backbone: Backbone) -> BackboneSnapshot:
    tensors = [(name, np.ascontiguousarray(p.data, dtype="<f4"))
               for name, p in backbone.parameters()]
    return BackboneSnapshot(backbone.config, backbone.seed, backbone.provenance, tensors)


def load_backbone(snap: BackboneSnapshot, expect_config: ModelConfig | None = None) -> Backbone:
    """Rebuild a live backbone from a snapshot (fresh tensors, fresh grads)."""
    if expect_config is not None and expect_config.fingerprint() != snap.config.fingerprint():
        raise CompatibilityError(
            f"snapshot config {snap.config.to_dict()} does not match expected "
            f"{expect_config.to_dict()}"
        )
    expected = {name: shape for name, shape, _ in parameter_spec(snap.config)}
    params: dict[str, Tensor] = {}
    for name, arr in snap.tensors:
        if name not in expected:
            raise CompatibilityError(f"snapshot tensor {name!r} unknown to this architecture")
        if tuple(arr.shape) != expected[name]:
            raise CompatibilityError(
                f"snapshot tensor {name!r} has shape {arr.shape}, expected {expected[name]}"
            )
        params[name] = Tensor(arr, requires_grad=True, name=name)
    missing = set(expected) - set(params)
    if missing:
        raise CompatibilityError(f"snapshot is missing tensors: {sorted(missing)}")
    ordered = {name: params[name] for name, _, _ in parameter_spec(snap.config)}
    return Backbone(snap.config, ordered, snap.seed, snap.provenance)


def save_snapshot(path, snap: BackboneSnapshot) -> None:
    write_checkpoint(path, "backbone", snap.config.to_dict(), snap.seed,
                     snap.provenance, snap.tensors)


def load_snapshot(path) -> BackboneSnapshot:
    doc = read_checkpoint(path, expect_kind="backbone")
    config = ModelConfig(**doc["config"])
    return BackboneSnapshot(config, doc["seed"], doc["provenance"], doc["tensors"])


# ---------------------------------------------------------------------------
# prefix bank


class PrefixBank:
    """Per-site key/value prefixes, optionally produced by a small encoder.

    With the encoder present the flat prefixes are a pure function of the
    embedding table and two affine maps (tanh between them); collapsing
    materializes the flat arrays and drops the encoder.
    """

    def __init__(self, d_model: int, n_heads: int, prefix_length: int,
                 sites: list[str], params: dict[str, Tensor], has_encoder: bool):
        if d_model % n_heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.prefix_length = prefix_length
        self.sites = list(sites)
        self.params = params
        self.has_encoder = has_encoder

    @classmethod
    def init_flat(cls, config: ModelConfig, seed: int) -> "PrefixBank":
        """Directly parameterized prefixes (used for the random-prefix arm)."""
        rng = ad.named_stream(seed, "prefix-init")
        d, length = config.d_model, config.prefix_length
        params: dict[str, Tensor] = {}
        sites = attention_sites(config)
        for site in sites:
            for part in ("key", "value"):
                name = f"prefix.{site}.{part}"
                params[name] = Tensor(ad.xavier_uniform(rng, (length, d), d),
                                      requires_grad=True, name=name)
        return cls(d, config.n_heads, length, sites, params, has_encoder=False)

    @classmethod
    def init_encoded(cls, config: ModelConfig, seed: int,
                     embed_dim: int | None = None,
                     hidden_dim: int | None = None) -> "PrefixBank":
        """Reparameterized prefixes: embedding -> affine -> tanh -> affine."""
        rng = ad.named_stream(seed, "prefix-init")
        d, length = config.d_model, config.prefix_length
        sites = attention_sites(config)
        d_emb = embed_dim or d
        d_hid = hidden_dim or d
        n_out = len(sites) * 2 * d
        spec = [
            ("prefix_encoder.embed", (length, d_emb), d_emb),
            ("prefix_encoder.w1", (d_emb, d_hid), d_emb),
            ("prefix_encoder.b1", (d_hid,), None),
            ("prefix_encoder.w2", (d_hid, n_out), d_hid),
            ("prefix_encoder.b2", (n_out,), None),
        ]
        params: dict[str, Tensor] = {}
        for name, shape, fan_in in spec:
            if fan_in is None:
                data = np.zeros(shape, dtype=ad.default_dtype())
            else:
                data = ad.xavier_uniform(rng, shape, fan_in)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(d, config.n_heads, length, sites, params, has_encoder=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        if self.prefix_length == 0:
            return []
        return list(self.params.items())

    def _to_heads(self, flat: Tensor) -> Tensor:
        length, d = self.prefix_length, self.d_model
        heads, head_dim = self.n_heads, d // self.n_heads
        return ad.permute(ad.reshape(flat, (length, heads, head_dim)), (1, 0, 2))

    def materialize(self) -> dict[str, tuple[Tensor, Tensor]]:
        """Per-site (key, value) tensors shaped [heads, L, head_dim].

        Recomputed on every call; with the encoder present this is a pure
        function of the encoder weights, so gradients flow back to them.
        """
        if self.prefix_length == 0:
            return {}
        out: dict[str, tuple[Tensor, Tensor]] = {}
        if not self.has_encoder:
            for site in self.sites:
                key = self._to_heads(self.params[f"prefix.{site}.key"])
                value = self._to_heads(self.params[f"prefix.{site}.value"])
                out[site] = (key, value)
            return out
        length, d = self.prefix_length, self.d_model
        hidden = ad.tanh(ad.add_bias(
            ad.matmul(self.params["prefix_encoder.embed"], self.params["prefix_encoder.w1"]),
            self.params["prefix_encoder.b1"]))
        flat = ad.add_bias(ad.matmul(hidden, self.params["prefix_encoder.w2"]),
                           self.params["prefix_encoder.b2"])
        stacked = ad.permute(ad.reshape(flat, (length, len(self.sites) * 2, d)), (1, 0, 2))
        for idx, site in enumerate(self.sites):
            key = ad.reshape(ad.slice_axis(stacked, 0, 2 * idx, 2 * idx + 1), (length, d))
            value = ad.reshape(ad.slice_axis(stacked, 0, 2 * idx + 1, 2 * idx + 2), (length, d))
            out[site] = (self._to_heads(key), self._to_heads(value))
        return out

    def flat_arrays(self) -> dict[str, np.ndarray]:
        """Flat [L, d_model] key/value arrays per site, computed without a tape."""
        if not self.has_encoder:
            return {name: p.data.copy() for name, p in self.params.items()}
        emb = self.params["prefix_encoder.embed"].data
        hidden = np.tanh(emb @ self.params["prefix_encoder.w1"].data
                         + self.params["prefix_encoder.b1"].data)
        flat = hidden @ self.params["prefix_encoder.w2"].data + self.params["prefix_encoder.b2"].data
        stacked = flat.reshape(self.prefix_length, len(self.sites) * 2, self.d_model)
        out = {}
        for idx, site in enumerate(self.sites):
            out[f"prefix.{site}.key"] = stacked[:, 2 * idx, :].copy()
            out[f"prefix.{site}.value"] = stacked[:, 2 * idx + 1, :].copy()
        return out

    def check_compatible(self, config: ModelConfig) -> None:
        if self.prefix_length != config.prefix_length:
            raise CompatibilityError(
                f"prefix length {self.prefix_length} does not match model "
                f"prefix length {config.prefix_length}"
            )
        if self.d_model != config.d_model or self.n_heads != config.n_heads:
            raise CompatibilityError(
                f"prefix built for d_model={self.d_model}/heads={self.n_heads}, "
                f"model has d_model={config.d_model}/heads={config.n_heads}"
            )
        if self.sites != attention_sites(config):
            raise CompatibilityError(
                f"prefix covers sites {self.sites}, model expects {attention_sites(config)}"
            )


def collapse_prefix_encoder(bank: PrefixBank) -> PrefixBank:
    """Materialize flat prefixes and drop the encoder. Idempotent."""
    if not bank.has_encoder:
        warnings.warn("prefix encoder already collapsed; bank returned unchanged")
        return bank
    params = {name: Tensor(arr, requires_grad=True, name=name)
              for name, arr in bank.flat_arrays().items()}
    return PrefixBank(bank.d_model, bank.n_heads, bank.prefix_length,
                      bank.sites, params, has_encoder=False)


def save_prefix(path, bank: PrefixBank, config: ModelConfig, seed: int,
                provenance: str) -> None:
    tensors = [(name, np.ascontiguousarray(p.data, dtype="<f4"))
               for name, p in bank.params.items()]
    write_checkpoint(path, "prefix", config.to_dict(), seed, provenance, tensors)


def load_prefix(path) -> tuple[PrefixBank, ModelConfig, str]:
    doc = read_checkpoint(path, expect_kind="prefix")
    config = ModelConfig(**doc["config"])
    names = [name for name, _ in doc["tensors"]]
    has_encoder = any(name.startswith("prefix_encoder.") for name in names)
    params = {name: Tensor(arr, requires_grad=True, name=name)
              for name, arr in doc["tensors"]}
    bank = PrefixBank(config.d_model, config.n_heads, config.prefix_length,
                      attention_sites(config), params, has_encoder=has_encoder)
    return bank, config, doc["provenance"]


# ---------------------------------------------------------------------------
# forward pass


def attention_with_prefix(q: Tensor, k: Tensor, v: Tensor,
                          prefix_kv: tuple[Tensor, Tensor] | None = None,
                          mask: np.ndarray | None = None, *,
                          dropout_rate: float = 0.0,
                          rng: np.random.Generator | None = None,
                          return_weights: bool = False):
    """Scaled dot-product attention over [prefix ; keys].

    q/k/v are [batch, heads, len, head_dim]. ``prefix_kv`` is a (key, value)
    pair shaped [heads, L, head_dim]; the L prefix positions are prepended
    to keys and values. ``mask`` is an additive array broadcastable to
    [batch, heads, q_len, k_len] covering the *non-prefix* keys only —
    prefix positions are never masked.
    """
    if q.data.ndim != 4 or k.data.ndim != 4 or v.data.ndim != 4:
        raise ShapeError("attention expects [batch, heads, len, head_dim] tensors")
    if k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[1] != k.shape[1] \
            or q.shape[3] != k.shape[3]:
        raise ShapeError(f"attention shapes incompatible: q={q.shape} k={k.shape} v={v.shape}")
    batch, heads, q_len, head_dim = q.shape
    k_len = k.shape[2]
    prefix_len = 0
    if prefix_kv is not None:
        pk, pv = prefix_kv
        if pk.data.ndim != 3 or pk.shape != pv.shape or pk.shape[0] != heads \
                or pk.shape[2] != head_dim:
            raise ShapeError(
                f"prefix shape {pk.shape} does not match heads={heads}, head_dim={head_dim}"
            )
        prefix_len = pk.shape[1]
        if prefix_len > 0:
            k = ad.concat([ad.expand_batch(pk, batch), k], axis=2)
            v = ad.concat([ad.expand_batch(pv, batch), v], axis=2)
    scores = ad.scale(ad.bmm(q, ad.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    if mask is not None:
        full = np.broadcast_to(np.asarray(mask, dtype=scores.data.dtype),
                               (batch, heads, q_len, k_len))
        if prefix_len:
            zeros = np.zeros((batch, heads, q_len, prefix_len), dtype=full.dtype)
            full = np.concatenate([zeros, full], axis=3)
        scores = ad.add(scores, Tensor(full))
    weights = ad.softmax(scores, axis=-1)
    if dropout_rate:
        weights = ad.dropout(weights, dropout_rate, rng)
    out = ad.bmm(weights, v)
    return (out, weights) if return_weights else out


def _affine(x2d: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x2d, w), b)


def _split_heads(x2d: Tensor, batch: int, length: int, heads: int, head_dim: int) -> Tensor:
    return ad.permute(ad.reshape(x2d, (batch, length, heads, head_dim)), (0, 2, 1, 3))


def _attention_sublayer(params: dict[str, Tensor], name: str, x_q: Tensor, x_kv: Tensor,
                        mask, prefix_kv, config: ModelConfig, drop: float, rng) -> Tensor:
    batch, q_len, d = x_q.shape
    kv_len = x_kv.shape[1]
    heads, head_dim = config.n_heads, config.head_dim
    q2d = ad.reshape(x_q, (batch * q_len, d))
    kv2d = ad.reshape(x_kv, (batch * kv_len, d))
    q = _split_heads(_affine(q2d, params[f"{name}.wq"], params[f"{name}.bq"]),
                     batch, q_len, heads, head_dim)
    k = _split_heads(_affine(kv2d, params[f"{name}.wk"], params[f"{name}.bk"]),
                     batch, kv_len, heads, head_dim)
    v = _split_heads(_affine(kv2d, params[f"{name}.wv"], params[f"{name}.bv"]),
                     batch, kv_len, heads, head_dim)
    context = attention_with_prefix(q, k, v, prefix_kv=prefix_kv, mask=mask,
                                    dropout_rate=drop, rng=rng)
    merged = ad.reshape(ad.permute(context, (0, 2, 1, 3)), (batch * q_len, d))
    out = _affine(merged, params[f"{name}.wo"], params[f"{name}.bo"])
    return ad.reshape(out, (batch, q_len, d))


def _ffn_sublayer(params: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    batch, length, d = x.shape
    flat = ad.reshape(x, (batch * length, d))
    hidden = ad.relu(_affine(flat, params[f"{name}.w1"], params[f"{name}.b1"]))
    out = _affine(hidden, params[f"{name}.w2"], params[f"{name}.b2"])
    return ad.reshape(out, (batch, length, d))


def _norm(params: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"])


def _embed(backbone: Backbone, ids: np.ndarray, drop: float, rng) -> Tensor:
    config = backbone.config
    batch, length = ids.shape
    emb = ad.scale(ad.embedding(backbone.params["embed.tok"], ids),
                   math.sqrt(config.d_model))
    pos = np.broadcast_to(backbone.positions[:length], (batch, length, config.d_model))
    x = ad.add(emb, Tensor(pos))
    return ad.dropout(x, drop, rng) if drop else x


def _pad_mask(ids: np.ndarray, pad_id: int) -> np.ndarray:
    # additive [batch, 1, 1, len]: MASK_FILL on padding keys
    return np.where(ids == pad_id, MASK_FILL, 0.0).astype(ad.default_dtype())[:, None, None, :]


def _causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), MASK_FILL, dtype=ad.default_dtype()),
                   k=1)[None, None, :, :]


def _validate_ids(ids: np.ndarray, limit: int, vocab: int, what: str) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ShapeError(f"{what} ids must be [batch, len], got shape {ids.shape}")
    if ids.shape[1] > limit:
        raise DataError(f"{what} length {ids.shape[1]} exceeds limit {limit}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DataError(f"{what} token id outside vocabulary of {vocab}")
    return ids


def encode_source(backbone: Backbone, prefix_kv: dict, src_ids: np.ndarray, *,
                  pad_id: int = 0, train: bool = False, rng=None):
    config, params = backbone.config, backbone.params
    src_ids = _validate_ids(src_ids, config.max_source_len, config.vocab_size, "source")
    drop = config.dropout_rate if train else 0.0
    src_mask = _pad_mask(src_ids, pad_id)
    x = _embed(backbone, src_ids, drop, rng)
    for i in range(config.n_encoder_layers):
        normed = _norm(params, f"enc{i}.ln1", x)
        attn = _attention_sublayer(params, f"enc{i}.attn", normed, normed, src_mask,
                                   prefix_kv.get(f"enc{i}.self"), config, drop, rng)
        x = ad.add(x, ad.dropout(attn, drop, rng) if drop else attn)
        ff = _ffn_sublayer(params, f"enc{i}.ffn", _norm(params, f"enc{i}.ln2", x))
        x = ad.add(x, ad.dropout(ff, drop, rng) if drop else ff)
    return _norm(params, "enc.ln_out", x), src_mask


def decode(backbone: Backbone, prefix_kv: dict, enc_out: Tensor, src_mask: np.ndarray,
           tgt_in_ids: np.ndarray, *, pad_id: int = 0, train: bool = False, rng=None) -> Tensor:
    config, params = backbone.config, backbone.params
    tgt_in_ids = _validate_ids(tgt_in_ids, config.max_target_len,
                               config.vocab_size, "target")
    drop = config.dropout_rate if train else 0.0
    t_len = tgt_in_ids.shape[1]
    self_mask = _causal_mask(t_len) + _pad_mask(tgt_in_ids, pad_id)
    x = _embed(backbone, tgt_in_ids, drop, rng)
    for i in range(config.n_decoder_layers):
        normed = _norm(params, f"dec{i}.ln1", x)
        attn = _attention_sublayer(params, f"dec{i}.self", normed, normed, self_mask,
                                   prefix_kv.get(f"dec{i}.self"), config, drop, rng)
        x = ad.add(x, ad.dropout(attn, drop, rng) if drop else attn)
        cross = _attention_sublayer(params, f"dec{i}.cross", _norm(params, f"dec{i}.ln2", x),
                                    enc_out, src_mask, prefix_kv.get(f"dec{i}.cross"),
                                    config, drop, rng)
        x = ad.add(x, ad.dropout(cross, drop, rng) if drop else cross)
        ff = _ffn_sublayer(params, f"dec{i}.ffn", _norm(params, f"dec{i}.ln3", x))
        x = ad.add(x, ad.dropout(ff, drop, rng) if drop else ff)
    x = _norm(params, "dec.ln_out", x)
    batch = tgt_in_ids.shape[0]
    flat = ad.reshape(x, (batch * t_len, config.d_model))
    logits = _affine(flat, params["out.w"], params["out.b"])
    return ad.reshape(logits, (batch, t_len, config.vocab_size))


def forward(backbone: Backbone, prefix: PrefixBank | None, src_ids, tgt_in_ids, *,
            pad_id: int = 0, train: bool = False, rng=None) -> Tensor:
    """Teacher-forced logits [batch, target_len, vocab]."""
    if prefix is not None:
        prefix.check_compatible(backbone.config)
    prefix_kv = prefix.materialize() if prefix is not None else {}
    enc_out, src_mask = encode_source(backbone, prefix_kv, np.asarray(src_ids),
                                      pad_id=pad_id, train=train, rng=rng)
    return decode(backbone, prefix_kv, enc_out, src_mask, np.asarray(tgt_in_ids),
                  pad_id=pad_id, train=train, rng=rng)


def loss_on_batch(backbone: Backbone, prefix: PrefixBank | None, src_ids, tgt_ids, *,
                  pad_id: int = 0, train: bool = False, rng=None) -> Tensor:
    """Cross-entropy of next-token prediction, averaged over non-pad targets."""
    tgt_ids = np.asarray(tgt_ids)
    logits = forward(backbone, prefix, src_ids, tgt_ids[:, :-1],
                     pad_id=pad_id, train=train, rng=rng)
    batch, t_len, vocab = logits.shape
    flat = ad.reshape(logits, (batch * t_len, vocab))
    return ad.cross_entropy(flat, tgt_ids[:, 1:].reshape(-1), pad_id)


def generate_greedy_batch(backbone: Backbone, prefix: PrefixBank | None, src_ids, *,
                          max_len: int, bos_id: int = 1, eos_id: int = 2,
                          pad_id: int = 0) -> list[list[int]]:
    """Greedy argmax decoding for a batch; ties break toward the lowest id.

    Returns, per row, the generated ids after BOS, including EOS when it was
    emitted within ``max_len`` steps.
    """
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    config = backbone.config
    if prefix is not None:
        prefix.check_compatible(config)
    prefix_kv = prefix.materialize() if prefix is not None else {}
    src_ids = np.asarray(src_ids)
    enc_out, src_mask = encode_source(backbone, prefix_kv, src_ids, pad_id=pad_id)
    batch = src_ids.shape[0]
    seq = np.full((batch, 1), bos_id, dtype=np.int64)
    done = np.zeros(batch, dtype=bool)
    outputs: list[list[int]] = [[] for _ in range(batch)]
    steps = min(max_len, config.max_target_len - 1)
    for _ in range(steps):
        logits = decode(backbone, prefix_kv, enc_out, src_mask, seq, pad_id=pad_id)
        nxt = logits.data[:, -1, :].argmax(axis=1)
        nxt = np.where(done, pad_id, nxt)
        for row in range(batch):
            if not done[row]:
                outputs[row].append(int(nxt[row]))
        done |= nxt == eos_id
        if done.all():
            break
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return outputs


def generate_greedy(backbone: Backbone, prefix: PrefixBank | None, src_tokens, *,
                    max_len: int, bos_id: int = 1, eos_id: int = 2,
                    pad_id: int = 0) -> list[int]:
    """Greedy decoding of a single source sequence."""
    src = np.asarray([list(src_tokens)])
    return generate_greedy_batch(backbone, prefix, src, max_len=max_len,
                                 bos_id=bos_id, eos_id=eos_id, pad_id=pad_id)[0]
