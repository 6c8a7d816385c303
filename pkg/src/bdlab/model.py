"""Small autoregressive two-modality policy with low-rank trunk adapters.

Each response position is predicted from the previous token (or a begin
sentinel) and the mean of the context-token embeddings.  That input flows
through a shared tanh trunk whose layers carry low-rank adapters, then through
a per-modality output head.  Positions are independent given their inputs, so
a whole sequence is evaluated as one batched matrix pass.

Forward passes can record intermediates; :func:`backward` turns a weighted sum
of recorded sequence log-probabilities into an exact gradient over the
trainable parameters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, StateError
from .vectors import GradientVector

TEXT = "text"
CODE = "code"
MODALITIES = (TEXT, CODE)

CHECKPOINT_MAGIC = b"bdlab-ckpt-v1"


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 32
    trunk_layers: int = 4
    text_vocab: int = 128
    code_vocab: int = 256
    adapter_rank: int = 4
    adapter_scale: float = 2.0
    gen_tokens: int = 576
    base_init_std: float = 0.2
    # generation-head init is this many times wider, so each code token
    # back-propagates a larger signal than a text token
    code_head_gain: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("hidden_dim", "trunk_layers", "text_vocab", "code_vocab", "adapter_rank", "gen_tokens"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if not self.adapter_scale > 0:
            raise ConfigError("adapter_scale", f"must be > 0, got {self.adapter_scale}")
        if not self.base_init_std >= 0:
            raise ConfigError("base_init_std", f"must be >= 0, got {self.base_init_std}")
        if not self.code_head_gain > 0:
            raise ConfigError("code_head_gain", f"must be > 0, got {self.code_head_gain}")

    def vocab(self, modality: str) -> int:
        if modality == TEXT:
            return self.text_vocab
        if modality == CODE:
            return self.code_vocab
        raise DomainError(f"unknown modality {modality!r}")


@dataclass(frozen=True, eq=False)
class TokenSequence:
    modality: str
    tokens: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DomainError(f"unknown modality {self.modality!r}")
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.int64).ravel())

    def __len__(self) -> int:
        return int(self.tokens.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return self.modality == other.modality and np.array_equal(self.tokens, other.tokens)

    def __hash__(self) -> int:
        return hash((self.modality, self.tokens.tobytes()))

    def validate(self, cfg: ModelConfig) -> None:
        v = cfg.vocab(self.modality)
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= v):
            raise DomainError(f"{self.modality} token id out of vocabulary [0, {v})")


def text(tokens: Iterable[int]) -> TokenSequence:
    return TokenSequence(TEXT, np.fromiter(tokens, dtype=np.int64))


def code(tokens: Iterable[int]) -> TokenSequence:
    return TokenSequence(CODE, np.fromiter(tokens, dtype=np.int64))


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter in canonical (serialization and flattening) order.

    Embedding tables carry one extra row, the begin-of-sequence sentinel.
    """
    d, r = cfg.hidden_dim, cfg.adapter_rank
    shapes: dict[str, tuple[int, ...]] = {
        "w_in": (d, 2 * d),
        "b_in": (d,),
    }
    for l in range(cfg.trunk_layers):
        shapes[f"trunk_w.{l}"] = (d, d)
        shapes[f"trunk_b.{l}"] = (d,)
    shapes["emb_t"] = (cfg.text_vocab + 1, d)
    shapes["emb_g"] = (cfg.code_vocab + 1, d)
    shapes["head_t.weight"] = (cfg.text_vocab, d)
    shapes["head_t.bias"] = (cfg.text_vocab,)
    shapes["head_g.weight"] = (cfg.code_vocab, d)
    shapes["head_g.bias"] = (cfg.code_vocab,)
    for l in range(cfg.trunk_layers):
        shapes[f"lora_A.{l}"] = (r, d)
        shapes[f"lora_B.{l}"] = (d, r)
    return shapes


def default_trainable(cfg: ModelConfig, include_text_head: bool = False) -> tuple[str, ...]:
    names = []
    for l in range(cfg.trunk_layers):
        names += [f"lora_A.{l}", f"lora_B.{l}"]
    if include_text_head:
        names += ["head_t.weight", "head_t.bias"]
    names += ["head_g.weight", "head_g.bias"]
    return tuple(names)


@dataclass(eq=False)
class ModelState:
    """Live parameters, the trainable mask, and a frozen reference snapshot.

    ``trainable`` fixes both which parameters receive gradients and the flat
    order of every :class:`GradientVector` produced for this state.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    reference: dict[str, np.ndarray]
    trainable: tuple[str, ...]
    version: int = field(default=0)

    def __post_init__(self):
        shapes = parameter_shapes(self.config)
        for store in (self.params, self.reference):
            if list(store) != list(shapes):
                raise DomainError("parameter names do not match the configuration")
            for name, shape in shapes.items():
                if store[name].shape != shape:
                    raise DomainError(f"{name}: shape {store[name].shape} != {shape}")
        unknown = set(self.trainable) - set(shapes)
        if unknown:
            raise DomainError(f"unknown trainable parameters {sorted(unknown)}")
        self.trainable = tuple(n for n in shapes if n in set(self.trainable))

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.reference.items()},
            self.trainable,
        )

    def segments(self) -> dict[str, tuple[int, int]]:
        out, pos = {}, 0
        for name in self.trainable:
            n = self.params[name].size
            out[name] = (pos, pos + n)
            pos += n
        return out

    def flat_trainable(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.trainable])

    def set_flat_trainable(self, flat: np.ndarray) -> None:
        for name, (lo, hi) in self.segments().items():
            self.params[name] = np.asarray(flat[lo:hi], dtype=np.float64).reshape(self.params[name].shape).copy()
        self.version += 1

    def reference_state(self) -> "ModelState":
        """A state whose live parameters are the reference snapshot."""
        ref = {k: v.copy() for k, v in self.reference.items()}
        return ModelState(self.config, ref, {k: v.copy() for k, v in ref.items()}, self.trainable)

    def frozen_matches_reference(self) -> bool:
        return all(
            np.array_equal(self.params[n], self.reference[n])
            for n in self.params
            if n not in self.trainable
        )

    def reference_digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.reference.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def init_model(config: ModelConfig, trainable: Sequence[str] | None = None) -> ModelState:
    """Seeded initialization: normal base weights, uniform A, zero B, zero biases."""
    cfg = config
    rng = np.random.default_rng(cfg.rng_seed)
    d = cfg.hidden_dim
    bound = 1.0 / np.sqrt(d)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.startswith("lora_A."):
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.startswith("lora_B.") or name.endswith("bias") or name.startswith(("b_in", "trunk_b.")):
            params[name] = np.zeros(shape)
        else:
            std = cfg.base_init_std * (cfg.code_head_gain if name == "head_g.weight" else 1.0)
            params[name] = rng.normal(0.0, std, size=shape)
    reference = {k: v.copy() for k, v in params.items()}
    return ModelState(cfg, params, reference, tuple(trainable) if trainable is not None else default_trainable(cfg))


def reseed_adapters(state: ModelState, seed: int) -> ModelState:
    """Fresh copy of an untrained state with adapter A matrices redrawn from ``seed``.

    B is still zero, so the policy and its reference are unchanged.
    """
    cfg = state.config
    for l in range(cfg.trunk_layers):
        if np.any(state.params[f"lora_B.{l}"]) or not np.array_equal(
            state.params[f"lora_A.{l}"], state.reference[f"lora_A.{l}"]
        ):
            raise StateError("adapters can only be reseeded before training")
    out = state.copy()
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(cfg.hidden_dim)
    for l in range(cfg.trunk_layers):
        a = rng.uniform(-bound, bound, size=(cfg.adapter_rank, cfg.hidden_dim))
        out.params[f"lora_A.{l}"] = a
        out.reference[f"lora_A.{l}"] = a.copy()
    out.version += 1
    return out


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _tables(modality: str) -> tuple[str, str, str]:
    if modality == TEXT:
        return "emb_t", "head_t.weight", "head_t.bias"
    return "emb_g", "head_g.weight", "head_g.bias"


def effective_weight(params: dict[str, np.ndarray], cfg: ModelConfig, layer: int) -> np.ndarray:
    return params[f"trunk_w.{layer}"] + cfg.adapter_scale * (
        params[f"lora_B.{layer}"] @ params[f"lora_A.{layer}"]
    )


def _trunk(params, cfg, inputs: np.ndarray):
    """Run the trunk on stacked per-position inputs; returns activations per layer."""
    hs = [np.tanh(inputs @ params["w_in"].T + params["b_in"])]
    mats = []
    for l in range(cfg.trunk_layers):
        m = effective_weight(params, cfg, l)
        mats.append(m)
        hs.append(np.tanh(hs[-1] @ m.T + params[f"trunk_b.{l}"]))
    return hs, mats


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    mx = logits.max(axis=-1, keepdims=True)
    shifted = logits - mx
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_pair(cfg: ModelConfig, context: TokenSequence, response: TokenSequence) -> None:
    if context.modality != TEXT:
        raise DomainError("context must be a text sequence")
    if len(context) == 0:
        raise DomainError("empty context")
    if len(response) == 0:
        raise DomainError("empty response")
    context.validate(cfg)
    response.validate(cfg)


def position_inputs(params, cfg, context: TokenSequence, prev_tokens: np.ndarray, modality: str) -> np.ndarray:
    """Stack [embedding(prev), pooled context] for each row of ``prev_tokens``."""
    emb, _, _ = _tables(modality)
    pooled = params["emb_t"][context.tokens].mean(axis=0)
    prev = params[emb][prev_tokens]
    return np.concatenate([prev, np.broadcast_to(pooled, prev.shape)], axis=1)


def shifted_inputs(cfg: ModelConfig, response: TokenSequence) -> np.ndarray:
    """Previous-token ids per position, with the sentinel id at position 0."""
    bos = cfg.vocab(response.modality)
    return np.concatenate([[bos], response.tokens[:-1]]).astype(np.int64)


@dataclass(eq=False)
class ForwardRecord:
    """Result of one sequence forward pass, optionally with saved intermediates."""

    logprob: float
    token_logprobs: np.ndarray
    state_id: int | None = None
    state_version: int | None = None
    _cache: dict | None = field(default=None, repr=False)

    @property
    def recorded(self) -> bool:
        return self._cache is not None


def forward(
    state: ModelState,
    context: TokenSequence,
    response: TokenSequence,
    use_reference: bool = False,
    record: bool = False,
) -> ForwardRecord:
    cfg = state.config
    _check_pair(cfg, context, response)
    params = state.reference if use_reference else state.params
    prev = shifted_inputs(cfg, response)
    inputs = position_inputs(params, cfg, context, prev, response.modality)
    hs, mats = _trunk(params, cfg, inputs)
    _, head_w, head_b = _tables(response.modality)
    logits = hs[-1] @ params[head_w].T + params[head_b]
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    total = probs.sum(axis=1)
    tok_lp = logits[np.arange(len(response)), response.tokens] - np.log(total)
    rec = ForwardRecord(float(tok_lp.sum()), tok_lp)
    if record:
        if use_reference:
            raise StateError("reference parameters are frozen; nothing to differentiate")
        rec.state_id = id(state)
        rec.state_version = state.version
        rec._cache = dict(
            context=context, response=response, prev=prev, inputs=inputs,
            hs=hs, mats=mats, probs=probs, total=total,
        )
    return rec


def sequence_logprob(
    state: ModelState, context: TokenSequence, response: TokenSequence, use_reference: bool = False
) -> float:
    """Sum of per-token log-probabilities of ``response`` given ``context`` (nats)."""
    return forward(state, context, response, use_reference).logprob


def backward(state: ModelState, terms: Sequence[tuple[ForwardRecord, float]]) -> GradientVector:
    """Gradient of ``sum(coef * record.logprob)`` over the state's trainable parameters.

    Every record must come from :func:`forward` with ``record=True`` on this
    state at its current version.
    """
    cfg = state.config
    params = state.params
    want = set(state.trainable)
    grads = {n: np.zeros_like(params[n]) for n in state.trainable}
    s = cfg.adapter_scale
    d = cfg.hidden_dim
    for rec, coef in terms:
        if not isinstance(rec, ForwardRecord) or not rec.recorded:
            raise StateError("backward called without a recorded forward pass")
        if rec.state_id != id(state) or rec.state_version != state.version:
            raise StateError("forward record is stale or belongs to another state")
        if coef == 0.0:
            continue
        c = rec._cache
        response: TokenSequence = c["response"]
        emb, head_w, head_b = _tables(response.modality)
        hs, mats = c["hs"], c["mats"]
        n = len(response)

        dlogits = c["probs"] * (-coef / c["total"])[:, None]
        dlogits[np.arange(n), response.tokens] += coef
        if head_w in want:
            grads[head_w] += dlogits.T @ hs[-1]
        if head_b in want:
            grads[head_b] += dlogits.sum(axis=0)
        dh = dlogits @ params[head_w]
        for l in range(cfg.trunk_layers - 1, -1, -1):
            dz = dh * (1.0 - hs[l + 1] ** 2)
            need_m = any(x in want for x in (f"trunk_w.{l}", f"lora_A.{l}", f"lora_B.{l}"))
            if need_m:
                dm = dz.T @ hs[l]
                if f"trunk_w.{l}" in want:
                    grads[f"trunk_w.{l}"] += dm
                if f"lora_B.{l}" in want:
                    grads[f"lora_B.{l}"] += s * dm @ params[f"lora_A.{l}"].T
                if f"lora_A.{l}" in want:
                    grads[f"lora_A.{l}"] += s * params[f"lora_B.{l}"].T @ dm
            if f"trunk_b.{l}" in want:
                grads[f"trunk_b.{l}"] += dz.sum(axis=0)
            dh = dz @ mats[l]
        dz0 = dh * (1.0 - hs[0] ** 2)
        if "w_in" in want:
            grads["w_in"] += dz0.T @ c["inputs"]
        if "b_in" in want:
            grads["b_in"] += dz0.sum(axis=0)
        if emb in want or "emb_t" in want:
            du = dz0 @ params["w_in"]
            if emb in want:
                np.add.at(grads[emb], c["prev"], du[:, :d])
            if "emb_t" in want:
                ctx = c["context"].tokens
                np.add.at(grads["emb_t"], ctx, np.broadcast_to(du[:, d:].sum(axis=0) / ctx.size, (ctx.size, d)))
    return GradientVector.from_parts((n, grads[n]) for n in state.trainable)


def logprob_and_grad(state: ModelState, context: TokenSequence, response: TokenSequence) -> tuple[float, GradientVector]:
    rec = forward(state, context, response, record=True)
    return rec.logprob, backward(state, [(rec, 1.0)])


def next_token_table(
    state: ModelState, context: TokenSequence, modality: str, use_reference: bool = False
) -> np.ndarray:
    """Log-probabilities of every next token for every previous token (sentinel last).

    Shape ``(V + 1, V)``; the model is first-order, so this table fully
    describes the policy for one context.
    """
    cfg = state.config
    params = state.reference if use_reference else state.params
    v = cfg.vocab(modality)
    prev = np.arange(v + 1)
    inputs = position_inputs(params, cfg, context, prev, modality)
    hs, _ = _trunk(params, cfg, inputs)
    _, head_w, head_b = _tables(modality)
    return _log_softmax(hs[-1] @ params[head_w].T + params[head_b])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    """Write ``magic\\n header-json\\n`` followed by live then reference float64 data."""
    shapes = parameter_shapes(state.config)
    segments, pos = {}, 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        segments[name] = [pos, pos + size, list(shape)]
        pos += size
    header = {
        "config": asdict(state.config),
        "trainable": list(state.trainable),
        "segments": segments,
        "count": pos,
    }
    live = np.concatenate([state.params[n].ravel() for n in shapes]).astype("<f8")
    ref = np.concatenate([state.reference[n].ravel() for n in shapes]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(live.tobytes())
        fh.write(ref.tobytes())


def load_checkpoint(path: str | Path) -> ModelState:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC:
            raise DomainError(f"{path}: not a bdlab checkpoint (magic {magic[:20]!r})")
        header = json.loads(fh.readline())
        blob = fh.read()
    count = header["count"]
    if len(blob) != 2 * 8 * count:
        raise DomainError(f"{path}: truncated checkpoint ({len(blob)} bytes, expected {16 * count})")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    cfg = ModelConfig(**header["config"])
    shapes = parameter_shapes(cfg)
    if set(header["segments"]) != set(shapes):
        raise DomainError(f"{path}: parameter names do not match the configuration")
    live, ref = {}, {}
    for name in shapes:
        lo, hi, shape = header["segments"][name]
        if tuple(shape) != shapes[name]:
            raise DomainError(f"{path}: parameter {name} has shape {tuple(shape)}, expected {shapes[name]}")
        live[name] = flat[lo:hi].reshape(shape).copy()
        ref[name] = flat[count + lo : count + hi].reshape(shape).copy()
    return ModelState(cfg, live, ref, tuple(header["trainable"]))

